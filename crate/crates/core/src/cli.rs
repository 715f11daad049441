//! `kinetostat validate|stiffness|equilibrium|map`.
//!
//! Exit status: 0 success, 1 usage, 2 invalid model, 3 solver failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ModelConfig};
use crate::geometry::{Deflection, Wrench};
use crate::kinetostatics::{
    manipulator_equilibrium, manipulator_stiffness_loaded, manipulator_stiffness_unloaded, KinetoError,
    ManipulatorStiffness, Residuals, StiffnessMatrix,
};
use crate::models::ModelError;

pub const THREADS_ENV: &str = "KINETOSTAT_THREADS";
pub const MAP_HEADER: &str = "x_mm,y_mm,z_mm,value";
/// Factors applied to the compliance blocks by `--paper-scale`.
pub const PAPER_SCALE_TRANSLATIONAL: f64 = 1e4;
pub const PAPER_SCALE_ROTATIONAL: f64 = 1e7;

#[derive(Debug, Parser)]
#[command(
    name = "kinetostat",
    version,
    about = "Stiffness of multi-chain parallel manipulators (units: mm, N, rad, N·mm)"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a model file and report its chains.
    Validate(ValidateArgs),
    /// Aggregated 6×6 stiffness and compliance at a point.
    Stiffness(StiffnessArgs),
    /// Wrench and per-chain state holding a platform deflection.
    Equilibrium(EquilibriumArgs),
    /// A stiffness quantity over a workspace grid, as CSV.
    Map(MapArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Quantity {
    /// Smallest eigenvalue of the translational stiffness, N/mm.
    MinEigTranslational,
    /// Largest magnitude in the translational compliance block, mm/N.
    MaxComplianceEntry,
    /// Condition number of the translational compliance block.
    ConditionNumber,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Model file.
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    /// Write the output here instead of stdout.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct StiffnessArgs {
    #[command(flatten)]
    pub common: Common,
    /// Platform point `X,Y,Z` in mm, or the name of a point in the model.
    #[arg(long, allow_hyphen_values = true)]
    pub point: String,
    /// Platform deflection `DX,DY,DZ,RX,RY,RZ` (mm, rad); selects the loaded mode.
    #[arg(long, allow_hyphen_values = true)]
    pub deflection: Option<String>,
    /// Scale compliance blocks by 1e4 (translational) and 1e7 (rotational).
    #[arg(long)]
    pub paper_scale: bool,
}

#[derive(Debug, Args)]
pub struct EquilibriumArgs {
    #[command(flatten)]
    pub common: Common,
    /// Platform point `X,Y,Z` in mm, or the name of a point in the model
    #[arg(long, allow_hyphen_values = true)]
    pub point: String,
    /// Platform deflection `DX,DY,DZ,RX,RY,RZ` (mm, rad)
    #[arg(long, allow_hyphen_values = true)]
    pub deflection: String,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[command(flatten)]
    pub common: Common,
    /// `XMIN:XMAX:NX,YMIN:YMAX:NY,ZMIN:ZMAX:NZ` in mm; a count of 1 samples the minimum.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: String,
    #[arg(long, value_enum, default_value = "min-eig-translational")]
    pub quantity: Quantity,
    /// Evaluate the loaded stiffness under this deflection at every point.
    #[arg(long, allow_hyphen_values = true)]
    pub deflection: Option<String>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid model: {0}")]
    Model(String),
    #[error("solver failure: {0}")]
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Model(_) => 2,
            CliError::Solver(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Model(e.to_string())
    }
}

impl From<KinetoError> for CliError {
    fn from(e: KinetoError) -> Self {
        CliError::Solver(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidParams(_) | ModelError::Link(_) => CliError::Model(e.to_string()),
            _ => CliError::Solver(e.to_string()),
        }
    }
}

/// Axis range of a grid; `count` samples from `min` to `max` inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn value(&self, i: usize) -> f64 {
        if self.count == 1 {
            self.min
        } else if i + 1 == self.count {
            self.max
        } else {
            self.min + (self.max - self.min) * i as f64 / (self.count - 1) as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub axes: [GridAxis; 3],
}

impl GridSpec {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 3 {
            return Err(CliError::Usage(format!("grid needs three ranges MIN:MAX:N, got `{s}`")));
        }
        let mut axes = [GridAxis {
            min: 0.0,
            max: 0.0,
            count: 1,
        }; 3];
        for (a, p) in axes.iter_mut().zip(&parts) {
            let f: Vec<&str> = p.split(':').collect();
            let bad = || CliError::Usage(format!("bad grid range `{p}` (expected MIN:MAX:N)"));
            if f.len() != 3 {
                return Err(bad());
            }
            let min: f64 = f[0].trim().parse().map_err(|_| bad())?;
            let max: f64 = f[1].trim().parse().map_err(|_| bad())?;
            let count: usize = f[2].trim().parse().map_err(|_| bad())?;
            if !min.is_finite() || !max.is_finite() || min > max {
                return Err(CliError::Usage(format!("grid range `{p}` needs finite MIN <= MAX")));
            }
            if count == 0 {
                return Err(CliError::Usage(format!("grid range `{p}` needs a positive count")));
            }
            *a = GridAxis { min, max, count };
        }
        Ok(Self { axes })
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Points in output order: x slowest, z fastest.
    pub fn points(&self) -> Vec<Vector3<f64>> {
        let [ax, ay, az] = self.axes;
        let mut out = Vec::with_capacity(self.len());
        for i in 0..ax.count {
            for j in 0..ay.count {
                for k in 0..az.count {
                    out.push(Vector3::new(ax.value(i), ay.value(j), az.value(k)));
                }
            }
        }
        out
    }
}

fn parse_floats<const N: usize>(s: &str, what: &str) -> Result<[f64; N], CliError> {
    let bad = || CliError::Usage(format!("{what} needs {N} comma-separated numbers, got `{s}`"));
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    let a: [f64; N] = v.try_into().map_err(|_| bad())?;
    if a.iter().all(|x| x.is_finite()) {
        Ok(a)
    } else {
        Err(bad())
    }
}

pub fn parse_deflection(s: &str) -> Result<Deflection, CliError> {
    parse_floats::<6>(s, "deflection").map(Deflection::from_array)
}

/// Numeric `X,Y,Z` or a point name defined in the model.
pub fn resolve_point(s: &str, model: &ModelConfig) -> Result<Vector3<f64>, CliError> {
    if let Some(p) = model.point(s.trim()) {
        return Ok(p);
    }
    parse_floats::<3>(s, "point")
        .map(Vector3::from)
        .map_err(|e| CliError::Usage(format!("{e}; or use a point name from the model")))
}

/// Removes negative zeros so equal values print identically.
fn clean(v: f64) -> f64 {
    v + 0.0
}

fn rows<const R: usize, const C: usize, S>(
    m: &nalgebra::Matrix<f64, nalgebra::Const<R>, nalgebra::Const<C>, S>,
) -> [[f64; C]; R]
where
    S: nalgebra::RawStorage<f64, nalgebra::Const<R>, nalgebra::Const<C>>,
{
    std::array::from_fn(|i| std::array::from_fn(|j| clean(m[(i, j)])))
}

fn wrench_array(w: &Wrench) -> [f64; 6] {
    w.to_array().map(clean)
}

#[derive(Debug, Serialize)]
struct Units {
    length: &'static str,
    angle: &'static str,
    force: &'static str,
    moment: &'static str,
}

const UNITS: Units = Units {
    length: "mm",
    angle: "rad",
    force: "N",
    moment: "N·mm",
};

#[derive(Debug, Serialize)]
struct ComplianceScale {
    translational: f64,
    rotational: f64,
}

#[derive(Debug, Serialize)]
struct StiffnessOutput {
    model: String,
    units: Units,
    point_mm: [f64; 3],
    /// (mm, mm, mm, rad, rad, rad)
    deflection: [f64; 6],
    /// Total wrench at the tool point (N, N, N, N·mm, N·mm, N·mm).
    wrench: [f64; 6],
    /// Rows/columns ordered (x, y, z, rx, ry, rz).
    stiffness: [[f64; 6]; 6],
    compliance: Option<[[f64; 6]; 6]>,
    compliance_scale: ComplianceScale,
    /// mm/N times compliance_scale.translational
    translational_compliance: Option<[[f64; 3]; 3]>,
    /// rad/(N·mm) times compliance_scale.rotational
    rotational_compliance: Option<[[f64; 3]; 3]>,
    /// Chains whose bordered system was rank deficient.
    degenerate_chains: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct ChainOutput {
    chain: usize,
    name: String,
    q: Vec<f64>,
    theta: Vec<f64>,
    wrench: [f64; 6],
    iterations: usize,
    converged: bool,
    residuals: Residuals,
}

#[derive(Debug, Serialize)]
struct EquilibriumOutput {
    model: String,
    units: Units,
    point_mm: [f64; 3],
    deflection: [f64; 6],
    wrench: [f64; 6],
    chains: Vec<ChainOutput>,
}

#[derive(Debug, Serialize)]
struct ValidateOutput {
    model: String,
    valid: bool,
    chains: Vec<ValidateChain>,
    points: Vec<ValidatePoint>,
}

#[derive(Debug, Serialize)]
struct ValidateChain {
    name: String,
    n: usize,
    m: usize,
}

#[derive(Debug, Serialize)]
struct ValidatePoint {
    name: String,
    position_mm: [f64; 3],
    reachable: bool,
}

#[derive(Debug, Serialize)]
struct MapRow {
    x_mm: f64,
    y_mm: f64,
    z_mm: f64,
    value: Option<f64>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit status. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let pool = match thread_pool() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match pool.install(|| execute(&cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| CliError::Usage(format!("cannot start worker threads: {e}")))
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Validate(a) => {
            let (text, ok) = validate(a)?;
            emit(&a.common.out, &text)?;
            if ok {
                Ok(())
            } else {
                Err(CliError::Model("some reference points are unreachable".into()))
            }
        }
        Command::Stiffness(a) => emit(&a.common.out, &stiffness(a)?),
        Command::Equilibrium(a) => emit(&a.common.out, &equilibrium(a)?),
        Command::Map(a) => emit(&a.common.out, &map(a)?),
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", p.display()))),
        None => {
            use std::io::Write;
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes())
                .and_then(|_| so.flush())
                .map_err(|e| CliError::Usage(format!("cannot write output: {e}")))
        }
    }
}

fn load(path: &Path) -> Result<ModelConfig, CliError> {
    Ok(ModelConfig::from_path(path)?)
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("output types serialize");
    s.push('\n');
    s
}

fn reject_format(f: Format, allowed: &[Format], command: &str) -> Result<(), CliError> {
    if allowed.contains(&f) {
        Ok(())
    } else {
        Err(CliError::Usage(
            format!("{command} does not support --format {f:?}").to_lowercase(),
        ))
    }
}

fn validate(a: &ValidateArgs) -> Result<(String, bool), CliError> {
    let format = a.common.format.unwrap_or(Format::Table);
    reject_format(format, &[Format::Json, Format::Table], "validate")?;
    let model = load(&a.common.model)?;
    let chains: Vec<ValidateChain> = model
        .summary()?
        .into_iter()
        .map(|c| ValidateChain {
            name: c.name,
            n: c.n,
            m: c.m,
        })
        .collect();
    let points: Vec<ValidatePoint> = model
        .points
        .iter()
        .map(|p| ValidatePoint {
            name: p.name.clone(),
            position_mm: p.position,
            reachable: model.manipulator.posture(&Vector3::from(p.position)).is_ok(),
        })
        .collect();
    let valid = points.iter().all(|p| p.reachable);
    let out = ValidateOutput {
        model: model.name.clone(),
        valid,
        chains,
        points,
    };
    let text = match format {
        Format::Json => to_json(&out),
        _ => {
            let mut s = String::new();
            let _ = writeln!(s, "model: {}", out.model);
            let _ = writeln!(s, "valid: {}", out.valid);
            let _ = writeln!(s, "chains: {}", out.chains.len());
            for c in &out.chains {
                let _ = writeln!(s, "  {:<12} n={:<3} m={}", c.name, c.n, c.m);
            }
            let _ = writeln!(s, "points (mm):");
            for p in &out.points {
                let [x, y, z] = p.position_mm;
                let status = if p.reachable { "reachable" } else { "unreachable" };
                let _ = writeln!(s, "  {:<12} {x} {y} {z} {status}", p.name);
            }
            s
        }
    };
    Ok((text, valid))
}

fn stiffness_at(
    model: &ModelConfig,
    point: &Vector3<f64>,
    deflection: Option<&Deflection>,
) -> Result<(ManipulatorStiffness, Wrench), CliError> {
    let posture = model.manipulator.posture(point)?;
    Ok(match deflection {
        None => (manipulator_stiffness_unloaded(&posture)?, Wrench::zero()),
        Some(d) => {
            let (k, eq) = manipulator_stiffness_loaded(&posture, d, &model.solver)?;
            (k, eq.total)
        }
    })
}

fn stiffness(a: &StiffnessArgs) -> Result<String, CliError> {
    let format = a.common.format.unwrap_or(Format::Table);
    reject_format(format, &[Format::Json, Format::Table], "stiffness")?;
    let deflection = a.deflection.as_deref().map(parse_deflection).transpose()?;
    let model = load(&a.common.model)?;
    let point = resolve_point(&a.point, &model)?;
    let (k, wrench) = stiffness_at(&model, &point, deflection.as_ref())?;
    let (st, sr) = if a.paper_scale {
        (PAPER_SCALE_TRANSLATIONAL, PAPER_SCALE_ROTATIONAL)
    } else {
        (1.0, 1.0)
    };
    let c = k.total.compliance().ok();
    let out = StiffnessOutput {
        model: model.name.clone(),
        units: UNITS,
        point_mm: [point.x, point.y, point.z].map(clean),
        deflection: deflection.unwrap_or_else(Deflection::zero).to_array().map(clean),
        wrench: wrench_array(&wrench),
        stiffness: rows(k.total.values()),
        compliance: c.as_ref().map(rows),
        compliance_scale: ComplianceScale {
            translational: st,
            rotational: sr,
        },
        translational_compliance: c.map(|c| rows(&(c.fixed_view::<3, 3>(0, 0) * st))),
        rotational_compliance: c.map(|c| rows(&(c.fixed_view::<3, 3>(3, 3) * sr))),
        degenerate_chains: k
            .per_chain
            .iter()
            .enumerate()
            .filter(|(_, r)| r.degeneracy.is_some())
            .map(|(i, _)| i)
            .collect(),
    };
    Ok(match format {
        Format::Json => to_json(&out),
        _ => stiffness_table(&out),
    })
}

fn fmt_row(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:>22.14e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn stiffness_table(o: &StiffnessOutput) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model: {}", o.model);
    let _ = writeln!(s, "point (mm): {}", fmt_row(&o.point_mm));
    let _ = writeln!(s, "deflection (mm, mm, mm, rad, rad, rad): {}", fmt_row(&o.deflection));
    let _ = writeln!(s, "wrench (N, N, N, N·mm, N·mm, N·mm): {}", fmt_row(&o.wrench));
    let _ = writeln!(
        s,
        "stiffness, rows/cols x y z rx ry rz (N/mm, N/rad, N·mm/mm, N·mm/rad):"
    );
    for r in &o.stiffness {
        let _ = writeln!(s, "  {}", fmt_row(r));
    }
    let scale = |f: f64| if f == 1.0 { String::new() } else { format!(" x {f:e}") };
    match (&o.translational_compliance, &o.rotational_compliance) {
        (Some(t), Some(r)) => {
            let _ = writeln!(
                s,
                "translational compliance (mm/N{}):",
                scale(o.compliance_scale.translational)
            );
            for row in t {
                let _ = writeln!(s, "  {}", fmt_row(row));
            }
            let _ = writeln!(
                s,
                "rotational compliance (rad/(N·mm){}):",
                scale(o.compliance_scale.rotational)
            );
            for row in r {
                let _ = writeln!(s, "  {}", fmt_row(row));
            }
        }
        _ => {
            let _ = writeln!(s, "compliance: undefined (stiffness is singular)");
        }
    }
    if !o.degenerate_chains.is_empty() {
        let _ = writeln!(s, "degenerate chains: {:?}", o.degenerate_chains);
    }
    s
}

fn equilibrium(a: &EquilibriumArgs) -> Result<String, CliError> {
    let format = a.common.format.unwrap_or(Format::Json);
    reject_format(format, &[Format::Json], "equilibrium")?;
    let deflection = parse_deflection(&a.deflection)?;
    let model = load(&a.common.model)?;
    let point = resolve_point(&a.point, &model)?;
    let posture = model.manipulator.posture(&point)?;
    let eq = manipulator_equilibrium(&posture, &deflection, &model.solver)?;
    let out = EquilibriumOutput {
        model: model.name.clone(),
        units: UNITS,
        point_mm: [point.x, point.y, point.z].map(clean),
        deflection: deflection.to_array().map(clean),
        wrench: wrench_array(&eq.total),
        chains: eq
            .per_chain
            .iter()
            .enumerate()
            .map(|(i, e)| ChainOutput {
                chain: i,
                name: model.chain_names.get(i).cloned().unwrap_or_default(),
                q: e.q.iter().copied().map(clean).collect(),
                theta: e.theta.iter().copied().map(clean).collect(),
                wrench: wrench_array(&e.load),
                iterations: e.iterations,
                converged: e.converged,
                residuals: e.residuals,
            })
            .collect(),
    };
    Ok(to_json(&out))
}

/// Value of a map quantity from the aggregated stiffness.
pub fn map_quantity(k: &StiffnessMatrix, q: Quantity) -> Option<f64> {
    let ct: Matrix3<f64> = k.translational_compliance().ok()?;
    let eig = SymmetricEigen::new(ct).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let v = match q {
        Quantity::MinEigTranslational => 1.0 / hi,
        Quantity::MaxComplianceEntry => ct.amax(),
        Quantity::ConditionNumber => hi / lo,
    };
    (v.is_finite() && lo > 0.0).then_some(v)
}

fn map(a: &MapArgs) -> Result<String, CliError> {
    let format = a.common.format.unwrap_or(Format::Csv);
    reject_format(format, &[Format::Csv, Format::Json], "map")?;
    let grid = GridSpec::parse(&a.grid)?;
    let deflection = a.deflection.as_deref().map(parse_deflection).transpose()?;
    let model = load(&a.common.model)?;
    let points = grid.points();
    let values: Vec<Result<f64, CliError>> = points
        .par_iter()
        .map(|p| {
            let (k, _) = stiffness_at(&model, p, deflection.as_ref())?;
            map_quantity(&k.total, a.quantity).ok_or_else(|| CliError::Solver("stiffness is singular".into()))
        })
        .collect();
    let failed = values.iter().filter(|v| v.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} of {} grid points failed (value nan)", points.len());
    }
    let rows: Vec<MapRow> = points
        .iter()
        .zip(&values)
        .map(|(p, v)| MapRow {
            x_mm: clean(p.x),
            y_mm: clean(p.y),
            z_mm: clean(p.z),
            value: v.as_ref().ok().copied().map(clean),
        })
        .collect();
    Ok(match format {
        Format::Json => to_json(&rows),
        _ => {
            let mut s = String::with_capacity(32 * (rows.len() + 1));
            s.push_str(MAP_HEADER);
            s.push('\n');
            for r in &rows {
                let v = r.value.map_or_else(|| "nan".to_string(), |v| v.to_string());
                let _ = writeln!(s, "{},{},{},{v}", r.x_mm, r.y_mm, r.z_mm);
            }
            s
        }
    })
}
