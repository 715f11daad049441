//! Stiffness of elastic chains in the unloaded and loaded modes, the static
//! equilibrium under an imposed end-effector deflection, and aggregation over
//! the chains of a parallel manipulator.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, Matrix6, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain_model::{
    force_hessians, force_jacobian, kinematics, ChainError, ChainState, ForceHessians, Jacobians, KinematicChain,
    SpringBlock,
};
use crate::geometry::{pose_difference, so3_exp, so3_log, Deflection, GeometryError, Transform, Wrench};
use crate::numeric::symmetrize;

/// Reciprocal condition number below which a bordered system is treated as rank deficient.
const RANK_TOL: f64 = 1e-12;
/// Step halvings tried before an iteration is declared divergent.
const MAX_HALVINGS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinetoError {
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("spring block {block} is not symmetric positive definite")]
    InvalidSpring { block: usize },
    #[error("stability margin lost (buckling): K_theta - H_theta_theta is not positive definite")]
    Buckling,
    #[error("equilibrium solve singular at iteration {iteration} (possible buckling or self-motion)")]
    EquilibriumSingular { iteration: usize },
    #[error("equilibrium state is not converged")]
    NotConverged,
    #[error("stiffness matrix is singular; compliance undefined")]
    SingularStiffness,
    #[error("nothing to aggregate")]
    Empty,
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error("chains do not share a tool point: chain {chain} is {distance:e} mm away from chain 0")]
    InconsistentPosture { chain: usize, distance: f64 },
    #[error("{}", describe_failures(.0))]
    ChainsFailed(Vec<ChainFailure>),
    #[error("deflection under load did not converge in {iterations} iterations (force residual {force:e} N, moment residual {moment:e} N·mm)")]
    DeflectionNotConverged { iterations: usize, force: f64, moment: f64 },
}

/// Per-chain diagnostic attached to a failed multi-chain solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainFailure {
    pub chain: usize,
    pub reason: String,
    pub residuals: Option<Residuals>,
    pub iterations: Option<usize>,
}

fn describe_failures(f: &[ChainFailure]) -> String {
    let parts: Vec<String> = f
        .iter()
        .map(|c| match &c.residuals {
            Some(r) => format!(
                "chain {}: {} (residuals: {:e} mm, {:e} rad, {:e} spring, {:e} passive)",
                c.chain, c.reason, r.translational, r.rotational, r.spring_statics, r.passive_statics
            ),
            None => format!("chain {}: {}", c.chain, c.reason),
        })
        .collect();
    format!("equilibrium failed for {}", parts.join("; "))
}

/// Block-diagonal virtual spring stiffness of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SpringAggregate {
    pub blocks: Vec<SpringBlock>,
    dim: usize,
}

impl SpringAggregate {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(self.dim, self.dim);
        for b in &self.blocks {
            let s = b.stiffness.nrows();
            k.view_mut((b.offset, b.offset), (s, s)).copy_from(&b.stiffness);
        }
        k
    }

    /// Block-wise inverse.
    pub fn compliance(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.dim, self.dim);
        for b in &self.blocks {
            let s = b.stiffness.nrows();
            let inv = Cholesky::new(b.stiffness.clone())
                .expect("blocks are validated on assembly")
                .inverse();
            c.view_mut((b.offset, b.offset), (s, s)).copy_from(&symmetrize(&inv));
        }
        c
    }

    /// Scaled copy: every block multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| SpringBlock {
                    offset: b.offset,
                    stiffness: &b.stiffness * s,
                })
                .collect(),
            dim: self.dim,
        }
    }
}

pub fn assemble_spring_matrix(chain: &KinematicChain) -> Result<SpringAggregate, KinetoError> {
    let blocks = chain.spring_blocks().to_vec();
    for (i, b) in blocks.iter().enumerate() {
        if Cholesky::new(symmetrize(&b.stiffness)).is_none() {
            return Err(KinetoError::InvalidSpring { block: i });
        }
    }
    Ok(SpringAggregate { blocks, dim: chain.m() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// mm
    pub translational_tol: f64,
    /// rad
    pub rotational_tol: f64,
    /// N and N·mm
    pub statics_tol: f64,
    pub max_iterations: usize,
    pub scheme: EquilibriumScheme,
}

/// Update rule of the equilibrium iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EquilibriumScheme {
    /// Linearised kinematics plus the load-dependent terms of the statics.
    #[default]
    Newton,
    /// Linearised kinematics only: the statics are updated by substitution,
    /// which converges linearly once the load grows.
    FixedPoint,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            translational_tol: 1e-6,
            rotational_tol: 1e-9,
            statics_tol: 1e-6,
            max_iterations: 50,
            scheme: EquilibriumScheme::Newton,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), KinetoError> {
        for (name, v) in [
            ("translational_tol", self.translational_tol),
            ("rotational_tol", self.rotational_tol),
            ("statics_tol", self.statics_tol),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(KinetoError::InvalidOptions(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_iterations == 0 {
            return Err(KinetoError::InvalidOptions("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Residuals of the equilibrium equations, each measured per block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// Norm of the translational pose error, mm.
    pub translational: f64,
    /// Norm of the rotational pose error, rad.
    pub rotational: f64,
    /// Largest entry of `J_theta^T F - K_theta theta`.
    pub spring_statics: f64,
    /// Largest entry of `J_q^T F`.
    pub passive_statics: f64,
}

impl Residuals {
    fn within(&self, o: &SolverOptions) -> bool {
        self.translational <= o.translational_tol
            && self.rotational <= o.rotational_tol
            && self.spring_statics <= o.statics_tol
            && self.passive_statics <= o.statics_tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    MaxIterations,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumState {
    pub q: DVector<f64>,
    pub theta: DVector<f64>,
    /// External wrench at the tool point that holds the deflected pose.
    pub load: Wrench,
    /// End-effector pose reached.
    pub pose: Transform,
    pub target: Transform,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    pub residuals: Residuals,
}

impl EquilibriumState {
    pub fn state(&self) -> ChainState {
        ChainState::new(self.q.clone(), self.theta.clone())
    }
}

/// Cartesian 6×6 stiffness at the tool point, base-frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StiffnessMatrix(pub Matrix6<f64>);

impl StiffnessMatrix {
    pub fn values(&self) -> &Matrix6<f64> {
        &self.0
    }

    pub fn compliance(&self) -> Result<Matrix6<f64>, KinetoError> {
        let c = match Cholesky::new(self.0) {
            Some(ch) => ch.inverse(),
            None => self.0.try_inverse().ok_or(KinetoError::SingularStiffness)?,
        };
        if !c.iter().all(|v| v.is_finite()) {
            return Err(KinetoError::SingularStiffness);
        }
        Ok((c + c.transpose()) * 0.5)
    }

    /// Force-to-displacement block of the compliance, mm/N.
    pub fn translational_compliance(&self) -> Result<Matrix3<f64>, KinetoError> {
        Ok(self.compliance()?.fixed_view::<3, 3>(0, 0).into_owned())
    }

    /// Moment-to-rotation block of the compliance, rad/(N·mm).
    pub fn rotational_compliance(&self) -> Result<Matrix3<f64>, KinetoError> {
        Ok(self.compliance()?.fixed_view::<3, 3>(3, 3).into_owned())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0 * s)
    }
}

impl std::ops::Add for StiffnessMatrix {
    type Output = StiffnessMatrix;
    fn add(self, o: StiffnessMatrix) -> StiffnessMatrix {
        StiffnessMatrix(self.0 + o.0)
    }
}

/// Rank information of a bordered system that could not be inverted directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Degeneracy {
    /// Numerical rank of the (6+n)×(6+n) bordered matrix.
    pub rank: usize,
    /// Orthonormal null-space basis of the bordered matrix, one column per direction.
    pub null_space: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StiffnessReport {
    pub stiffness: StiffnessMatrix,
    pub degeneracy: Option<Degeneracy>,
}

/// Bordered matrix `[[A, B], [C, D]]` with a diagonal scaling
/// that makes the mixed-unit blocks comparable.
struct Bordered {
    scale: DVector<f64>,
    scaled: DMatrix<f64>,
}

enum Factored {
    Full(DMatrix<f64>),
    Degenerate {
        pinv: DMatrix<f64>,
        rank: usize,
        null_space: DMatrix<f64>,
    },
}

impl Bordered {
    fn new(a: &DMatrix<f64>, b: &DMatrix<f64>, d: &DMatrix<f64>) -> Self {
        let n = b.ncols();
        let dim = 6 + n;
        let mut m = DMatrix::zeros(dim, dim);
        m.view_mut((0, 0), (6, 6)).copy_from(a);
        m.view_mut((0, 6), (6, n)).copy_from(b);
        m.view_mut((6, 0), (n, 6)).copy_from(&b.transpose());
        m.view_mut((6, 6), (n, n)).copy_from(d);
        Self::from_matrix(m)
    }

    /// Scaling: `1/sqrt(A_ii)` on the six wrench rows, then the inverse norm
    /// of each scaled border column.
    fn from_matrix(mut m: DMatrix<f64>) -> Self {
        let dim = m.nrows();
        let mut scale = DVector::from_element(dim, 1.0);
        for i in 0..6 {
            let v = m[(i, i)];
            if v > 0.0 && v.is_finite() {
                scale[i] = 1.0 / v.sqrt();
            }
        }
        for j in 6..dim {
            let norm = (0..6).map(|i| (scale[i] * m[(i, j)]).powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                scale[j] = 1.0 / norm;
            }
        }
        for r in 0..dim {
            for c in 0..dim {
                m[(r, c)] *= scale[r] * scale[c];
            }
        }
        Self { scale, scaled: m }
    }

    fn factor(&self) -> Factored {
        let dim = self.scaled.nrows();
        let svd = self.scaled.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let tol = RANK_TOL * smax;
        let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
        if rank == dim && smax > 0.0 {
            if let Some(inv) = self.scaled.clone().lu().try_inverse() {
                if inv.iter().all(|v| v.is_finite()) {
                    return Factored::Full(inv);
                }
            }
        }
        let u = svd.u.as_ref().expect("requested");
        let vt = svd.v_t.as_ref().expect("requested");
        let mut pinv = DMatrix::zeros(dim, dim);
        let mut null_cols = Vec::new();
        for (k, s) in svd.singular_values.iter().enumerate() {
            if *s > tol {
                pinv += vt.row(k).transpose() * u.column(k).transpose() / *s;
            } else {
                // Back to unscaled coordinates: M x = 0 iff M_s (S^-1 x) = 0.
                let v = vt.row(k).transpose().component_mul(&self.scale);
                null_cols.push(v.normalize());
            }
        }
        let null_space = if null_cols.is_empty() {
            DMatrix::zeros(dim, 0)
        } else {
            DMatrix::from_columns(&null_cols)
        };
        Factored::Degenerate { pinv, rank, null_space }
    }

    /// Unscaled inverse (or pseudo-inverse) from a scaled one.
    fn unscale(&self, inv_scaled: &DMatrix<f64>) -> DMatrix<f64> {
        let dim = inv_scaled.nrows();
        DMatrix::from_fn(dim, dim, |r, c| inv_scaled[(r, c)] * self.scale[r] * self.scale[c])
    }
}

/// Stiffness of a chain at a configuration with force Hessians `h`:
/// the 6×6 block of the inverse of `[[A, B], [B^T, D]]` with
/// `k = (K_theta - H_tt)^-1`, `A = J_t k J_t^T`, `B = J_q + J_t k H_tq`,
/// `D = H_qq + H_qt k H_tq`. With `h = 0` this is the unloaded stiffness.
fn bordered_stiffness(
    jac: &Jacobians,
    springs: &SpringAggregate,
    h: &ForceHessians,
) -> Result<StiffnessReport, KinetoError> {
    let kt = springs.matrix() - &h.theta_theta;
    let k = Cholesky::new(symmetrize(&kt)).ok_or(KinetoError::Buckling)?.inverse();
    let k = symmetrize(&k);
    let jt = &jac.theta;
    let a = symmetrize(&(jt * &k * jt.transpose()));
    let b = &jac.q + jt * &k * &h.theta_q;
    let d = symmetrize(&(&h.qq + &h.q_theta * &k * &h.theta_q));
    let system = Bordered::new(&a, &b, &d);
    let (inv, degeneracy) = match system.factor() {
        Factored::Full(inv) => (system.unscale(&inv), None),
        Factored::Degenerate { pinv, rank, null_space } => {
            (system.unscale(&pinv), Some(Degeneracy { rank, null_space }))
        }
    };
    let block = inv.view((0, 0), (6, 6));
    let kc = Matrix6::from_fn(|r, c| 0.5 * (block[(r, c)] + block[(c, r)]));
    Ok(StiffnessReport {
        stiffness: StiffnessMatrix(kc),
        degeneracy,
    })
}

/// Unloaded stiffness at passive coordinates `q0` with all springs relaxed.
pub fn chain_stiffness_unloaded(chain: &KinematicChain, q0: &DVector<f64>) -> Result<StiffnessReport, KinetoError> {
    let springs = assemble_spring_matrix(chain)?;
    let state = ChainState::rigid(chain, q0.clone());
    let (_, jac) = kinematics(chain, &state)?;
    bordered_stiffness(&jac, &springs, &ForceHessians::zeros(chain.n(), chain.m()))
}

/// Stiffness of a chain linearised about a converged loaded equilibrium.
pub fn chain_stiffness_loaded(chain: &KinematicChain, eq: &EquilibriumState) -> Result<StiffnessReport, KinetoError> {
    if !eq.converged {
        return Err(KinetoError::NotConverged);
    }
    let springs = assemble_spring_matrix(chain)?;
    let state = eq.state();
    let (_, jac) = kinematics(chain, &state)?;
    let h = force_hessians(chain, &state, &eq.load)?;
    bordered_stiffness(&jac, &springs, &h)
}

pub fn aggregate_stiffness(per_chain: &[StiffnessMatrix]) -> Result<StiffnessMatrix, KinetoError> {
    let mut it = per_chain.iter();
    let first = *it.next().ok_or(KinetoError::Empty)?;
    Ok(it.fold(first, |acc, k| acc + *k))
}

struct Evaluation {
    pose: Transform,
    jac: Jacobians,
    error: Vector6<f64>,
}

fn evaluate(
    chain: &KinematicChain,
    q: &DVector<f64>,
    theta: &DVector<f64>,
    target: &Transform,
) -> Result<Evaluation, KinetoError> {
    let state = ChainState::new(q.clone(), theta.clone());
    let (pose, jac) = kinematics(chain, &state)?;
    let error = pose_difference(&pose, target)?.to_vector();
    Ok(Evaluation { pose, jac, error })
}

fn residuals(ev: &Evaluation, k_theta: &DMatrix<f64>, theta: &DVector<f64>, f: &Vector6<f64>) -> Residuals {
    let kt = k_theta * theta;
    let fv = DVector::from_column_slice(f.as_slice());
    let spring = ev.jac.theta.transpose() * &fv - kt;
    let passive = ev.jac.q.transpose() * &fv;
    Residuals {
        translational: ev.error.fixed_rows::<3>(0).norm(),
        rotational: ev.error.fixed_rows::<3>(3).norm(),
        spring_statics: spring.amax(),
        passive_statics: passive.amax(),
    }
}

fn merit(e: &Vector6<f64>, o: &SolverOptions) -> f64 {
    (e.fixed_rows::<3>(0).norm() / o.translational_tol).max(e.fixed_rows::<3>(3).norm() / o.rotational_tol)
}

/// Solves `M x = rhs` for a bordered system, falling back to a least-squares
/// solution when `M` is rank deficient and the equations are still consistent.
fn solve_bordered(system: &Bordered, rhs: &DVector<f64>, iteration: usize) -> Result<DVector<f64>, KinetoError> {
    // Scaled coordinates: M_s y = S rhs, x = S y.
    let rhs_s = rhs.component_mul(&system.scale);
    let sol = match system.factor() {
        Factored::Full(inv) => (inv * &rhs_s).component_mul(&system.scale),
        Factored::Degenerate { pinv, .. } => {
            let y = pinv * &rhs_s;
            let fit = &system.scaled * &y - &rhs_s;
            if fit.norm() > 1e-9 * rhs_s.norm().max(f64::MIN_POSITIVE) {
                return Err(KinetoError::EquilibriumSingular { iteration });
            }
            y.component_mul(&system.scale)
        }
    };
    if !sol.iter().all(|v| v.is_finite()) {
        return Err(KinetoError::EquilibriumSingular { iteration });
    }
    Ok(sol)
}

struct Step {
    load: Vector6<f64>,
    dq: DVector<f64>,
    theta: DVector<f64>,
}

/// The published update: `[[S, J_q], [J_q^T, 0]] [F; dq] = [e + J_theta theta; 0]`,
/// `S = J_theta K_theta^-1 J_theta^T`, then `theta = K_theta^-1 J_theta^T F`.
fn fixed_point_step(
    ev: &Evaluation,
    compliance: &DMatrix<f64>,
    theta: &DVector<f64>,
    iteration: usize,
) -> Result<Step, KinetoError> {
    let n = ev.jac.q.ncols();
    let jt = &ev.jac.theta;
    let s = symmetrize(&(jt * compliance * jt.transpose()));
    let system = Bordered::new(&s, &ev.jac.q, &DMatrix::zeros(n, n));
    let mut rhs = DVector::zeros(6 + n);
    rhs.rows_mut(0, 6)
        .copy_from(&(DVector::from_column_slice(ev.error.as_slice()) + jt * theta));
    let sol = solve_bordered(&system, &rhs, iteration)?;
    let load = Vector6::from_iterator(sol.rows(0, 6).iter().copied());
    let theta = compliance * (jt.transpose() * DVector::from_column_slice(load.as_slice()));
    Ok(Step {
        load,
        dq: sol.rows(6, n).into_owned(),
        theta,
    })
}

/// The same linearisation with the load-dependent terms kept: `G`, the exact
/// derivative of `J^T F`, enters through `k = (K_theta - G_tt)^-1` and the
/// border blocks, exactly as in the loaded stiffness. With `F = 0` this is the
/// published update.
#[allow(clippy::too_many_arguments)]
fn newton_step(
    chain: &KinematicChain,
    ev: &Evaluation,
    k_theta: &DMatrix<f64>,
    q: &DVector<f64>,
    theta: &DVector<f64>,
    f: &Vector6<f64>,
    iteration: usize,
) -> Result<Step, KinetoError> {
    let n = chain.n();
    let jt = &ev.jac.theta;
    let jq = &ev.jac.q;
    let fv = DVector::from_column_slice(f.as_slice());
    let r_theta = jt.transpose() * &fv - k_theta * theta;
    let r_q = jq.transpose() * &fv;
    let state = ChainState::new(q.clone(), theta.clone());
    let g = force_jacobian(chain, &state, &Wrench::from_vector(f))?;
    let k = (k_theta - &g.theta_theta)
        .lu()
        .try_inverse()
        .ok_or(KinetoError::EquilibriumSingular { iteration })?;
    let jtk = jt * &k;
    let gqk = &g.q_theta * &k;
    let dim = 6 + n;
    let mut mat = DMatrix::zeros(dim, dim);
    mat.view_mut((0, 0), (6, 6)).copy_from(&(&jtk * jt.transpose()));
    mat.view_mut((0, 6), (6, n)).copy_from(&(jq + &jtk * &g.theta_q));
    mat.view_mut((6, 0), (n, 6))
        .copy_from(&(jq.transpose() + &gqk * jt.transpose()));
    mat.view_mut((6, 6), (n, n)).copy_from(&(&g.qq + &gqk * &g.theta_q));
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, 6)
        .copy_from(&(DVector::from_column_slice(ev.error.as_slice()) - &jtk * &r_theta));
    rhs.rows_mut(6, n).copy_from(&(-&r_q - &gqk * &r_theta));
    let sol = solve_bordered(&Bordered::from_matrix(mat), &rhs, iteration)?;
    let df = sol.rows(0, 6).into_owned();
    let dq = sol.rows(6, n).into_owned();
    let dtheta = &k * (&r_theta + jt.transpose() * &df + &g.theta_q * &dq);
    Ok(Step {
        load: f + Vector6::from_iterator(df.iter().copied()),
        dq,
        theta: theta + dtheta,
    })
}

/// Static equilibrium of a chain whose tool is held at `target`.
///
/// Each iteration linearises the kinematics at the current configuration and
/// solves the bordered system for the tool wrench and the passive-joint step
/// (see [`EquilibriumScheme`]). A step that worsens the pose error is halved
/// up to eight times before the solve is reported as divergent.
pub fn solve_equilibrium(
    chain: &KinematicChain,
    target: &Transform,
    start: &ChainState,
    options: &SolverOptions,
) -> Result<EquilibriumState, KinetoError> {
    options.validate()?;
    let springs = assemble_spring_matrix(chain)?;
    let k_theta = springs.matrix();
    let compliance = springs.compliance();

    let mut q = start.q.clone();
    let mut theta = start.theta.clone();
    let mut f = Vector6::zeros();
    let mut ev = evaluate(chain, &q, &theta, target)?;
    let mut res = residuals(&ev, &k_theta, &theta, &f);

    let finish = |q: DVector<f64>,
                  theta: DVector<f64>,
                  f: Vector6<f64>,
                  ev: &Evaluation,
                  res: Residuals,
                  it: usize,
                  term: Termination| {
        EquilibriumState {
            q,
            theta,
            load: Wrench::from_vector(&f),
            pose: ev.pose,
            target: *target,
            iterations: it,
            converged: term == Termination::Converged,
            termination: term,
            residuals: res,
        }
    };

    for iteration in 1..=options.max_iterations {
        let step = match options.scheme {
            EquilibriumScheme::FixedPoint => fixed_point_step(&ev, &compliance, &theta, iteration)?,
            EquilibriumScheme::Newton => newton_step(chain, &ev, &k_theta, &q, &theta, &f, iteration)?,
        };

        let m0 = merit(&ev.error, options);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let q_c = &q + &step.dq * alpha;
            let t_c = &theta + (&step.theta - &theta) * alpha;
            let f_c = f + (step.load - f) * alpha;
            let ev_c = evaluate(chain, &q_c, &t_c, target)?;
            let m1 = merit(&ev_c.error, options);
            if m1 <= m0 || m1 <= 1.0 {
                accepted = Some((q_c, t_c, f_c, ev_c));
                break;
            }
            alpha *= 0.5;
        }
        let Some((q_c, t_c, f_c, ev_c)) = accepted else {
            return Ok(finish(q, theta, f, &ev, res, iteration, Termination::Diverged));
        };
        q = q_c;
        theta = t_c;
        f = f_c;
        ev = ev_c;
        res = residuals(&ev, &k_theta, &theta, &f);
        if res.within(options) {
            return Ok(finish(q, theta, f, &ev, res, iteration, Termination::Converged));
        }
    }
    Ok(finish(
        q,
        theta,
        f,
        &ev,
        res,
        options.max_iterations,
        Termination::MaxIterations,
    ))
}

/// A manipulator configuration: chains with their rigid nominal states, all
/// ending at the same tool point.
#[derive(Debug, Clone, PartialEq)]
pub struct Posture {
    chains: Vec<KinematicChain>,
    states: Vec<ChainState>,
    unloaded: Vec<Transform>,
}

/// Tool points of all chains must agree to this distance, mm.
const POSTURE_POINT_TOL: f64 = 1e-6;

impl Posture {
    pub fn new(chains: Vec<KinematicChain>, states: Vec<ChainState>) -> Result<Self, KinetoError> {
        if chains.is_empty() {
            return Err(KinetoError::Empty);
        }
        if chains.len() != states.len() {
            return Err(KinetoError::InvalidOptions(format!(
                "{} chains but {} states",
                chains.len(),
                states.len()
            )));
        }
        let mut unloaded = Vec::with_capacity(chains.len());
        for (c, s) in chains.iter().zip(&states) {
            unloaded.push(kinematics(c, s)?.0);
        }
        let p0 = *unloaded[0].translation();
        for (i, t) in unloaded.iter().enumerate() {
            let distance = (t.translation() - p0).norm();
            if distance > POSTURE_POINT_TOL {
                return Err(KinetoError::InconsistentPosture { chain: i, distance });
            }
        }
        Ok(Self {
            chains,
            states,
            unloaded,
        })
    }

    pub fn chains(&self) -> &[KinematicChain] {
        &self.chains
    }

    pub fn states(&self) -> &[ChainState] {
        &self.states
    }

    /// Unloaded tool frame of each chain.
    pub fn unloaded_poses(&self) -> &[Transform] {
        &self.unloaded
    }

    /// Each chain's tool target after the platform moves by `d`.
    pub fn targets(&self, d: &Deflection) -> Vec<Transform> {
        self.unloaded.iter().map(|t| t.displaced(d)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManipulatorEquilibrium {
    pub deflection: Deflection,
    pub total: Wrench,
    pub per_chain: Vec<EquilibriumState>,
}

/// Equilibrium of every chain with the platform displaced by `deflection`.
pub fn manipulator_equilibrium(
    posture: &Posture,
    deflection: &Deflection,
    options: &SolverOptions,
) -> Result<ManipulatorEquilibrium, KinetoError> {
    options.validate()?;
    let targets = posture.targets(deflection);
    let results: Vec<Result<EquilibriumState, KinetoError>> = posture
        .chains
        .par_iter()
        .zip(posture.states.par_iter())
        .zip(targets.par_iter())
        .map(|((c, s), t)| solve_equilibrium(c, t, s, options))
        .collect();
    let mut failures = Vec::new();
    let mut per_chain = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(eq) if eq.converged => per_chain.push(eq),
            Ok(eq) => failures.push(ChainFailure {
                chain: i,
                reason: match eq.termination {
                    Termination::Diverged => "diverged".into(),
                    _ => "maximum iterations reached".into(),
                },
                residuals: Some(eq.residuals),
                iterations: Some(eq.iterations),
            }),
            Err(e) => failures.push(ChainFailure {
                chain: i,
                reason: e.to_string(),
                residuals: None,
                iterations: None,
            }),
        }
    }
    if !failures.is_empty() {
        return Err(KinetoError::ChainsFailed(failures));
    }
    let total = per_chain.iter().map(|e| e.load).sum();
    Ok(ManipulatorEquilibrium {
        deflection: *deflection,
        total,
        per_chain,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManipulatorStiffness {
    pub total: StiffnessMatrix,
    pub per_chain: Vec<StiffnessReport>,
}

pub fn manipulator_stiffness_unloaded(posture: &Posture) -> Result<ManipulatorStiffness, KinetoError> {
    let per_chain: Vec<StiffnessReport> = posture
        .chains
        .par_iter()
        .zip(posture.states.par_iter())
        .map(|(c, s)| chain_stiffness_unloaded(c, &s.q))
        .collect::<Result<_, _>>()?;
    let ks: Vec<StiffnessMatrix> = per_chain.iter().map(|r| r.stiffness).collect();
    Ok(ManipulatorStiffness {
        total: aggregate_stiffness(&ks)?,
        per_chain,
    })
}

/// Loaded stiffness of the manipulator at an already solved equilibrium.
pub fn manipulator_stiffness_at(
    posture: &Posture,
    eq: &ManipulatorEquilibrium,
) -> Result<ManipulatorStiffness, KinetoError> {
    let per_chain: Vec<StiffnessReport> = posture
        .chains
        .par_iter()
        .zip(eq.per_chain.par_iter())
        .map(|(c, e)| chain_stiffness_loaded(c, e))
        .collect::<Result<_, _>>()?;
    let ks: Vec<StiffnessMatrix> = per_chain.iter().map(|r| r.stiffness).collect();
    Ok(ManipulatorStiffness {
        total: aggregate_stiffness(&ks)?,
        per_chain,
    })
}

/// Equilibrium under the platform deflection and the loaded stiffness there.
pub fn manipulator_stiffness_loaded(
    posture: &Posture,
    deflection: &Deflection,
    options: &SolverOptions,
) -> Result<(ManipulatorStiffness, ManipulatorEquilibrium), KinetoError> {
    let eq = manipulator_equilibrium(posture, deflection, options)?;
    let k = manipulator_stiffness_at(posture, &eq)?;
    Ok((k, eq))
}

/// Platform deflection under an external wrench, found by Newton iteration on
/// the pose with the loaded stiffness as Jacobian.
pub fn deflection_under_load(
    posture: &Posture,
    load: &Wrench,
    options: &SolverOptions,
) -> Result<ManipulatorEquilibrium, KinetoError> {
    options.validate()?;
    let gap = |eq: &ManipulatorEquilibrium| {
        let r = *load - eq.total;
        (r, r.force.amax().max(r.moment.amax()))
    };
    let mut eq = manipulator_equilibrium(posture, &Deflection::zero(), options)?;
    let (mut r, mut size) = gap(&eq);
    for _ in 0..options.max_iterations {
        if size <= options.statics_tol {
            return Ok(eq);
        }
        let k = manipulator_stiffness_at(posture, &eq)?.total;
        let svd = k.0.svd(true, true);
        let step = svd
            .solve(&r.to_vector(), RANK_TOL * svd.singular_values.max())
            .map_err(|_| KinetoError::SingularStiffness)?;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let s = step * alpha;
            let d = compose_deflection(&eq.deflection, &Vector6::from(s))?;
            if let Ok(cand) = manipulator_equilibrium(posture, &d, options) {
                let (r_c, size_c) = gap(&cand);
                if size_c < size {
                    accepted = Some((cand, r_c, size_c));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((cand, r_c, size_c)) => {
                eq = cand;
                r = r_c;
                size = size_c;
            }
            None => break,
        }
    }
    if size <= options.statics_tol {
        return Ok(eq);
    }
    Err(KinetoError::DeflectionNotConverged {
        iterations: options.max_iterations,
        force: r.force.amax(),
        moment: r.moment.amax(),
    })
}

/// Deflection equivalent to applying `d` and then the small motion `s`
/// (translation added, rotation pre-multiplied).
fn compose_deflection(d: &Deflection, s: &Vector6<f64>) -> Result<Deflection, KinetoError> {
    let ds = Deflection::from_vector(s);
    let r = so3_exp(&ds.rotation) * so3_exp(&d.rotation);
    Ok(Deflection::new(d.translation + ds.translation, so3_log(&r)?))
}
