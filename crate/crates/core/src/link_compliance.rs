//! 6×6 link compliance: cantilever beams, serial beam assemblies and
//! externally computed (FEA) matrices.
//!
//! A compliance maps a wrench applied at the link tip, expressed in the tip
//! frame, to the tip deflection (translations x, y, z then rotations x, y, z).

use std::fmt;
use std::path::Path;

use nalgebra::{Cholesky, Matrix3, Matrix6, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain_model::{jacobians, ChainElement, ChainState, KinematicChain};
use crate::geometry::Transform;
use crate::numeric::relative_asymmetry;

/// Asymmetry accepted for a stored compliance.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Asymmetry that imported matrices may carry before being averaged.
pub const IMPORT_SYMMETRY_TOL: f64 = 1e-6;
/// Largest scaled condition number accepted when inverting to stiffness.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("beam parameter `{field}` must be positive and finite, got {value}")]
    InvalidBeam { field: &'static str, value: f64 },
    #[error("serial link needs at least one segment")]
    EmptySegments,
    #[error("compliance has non-finite entries")]
    NonFinite,
    #[error("compliance is not symmetric (relative asymmetry {asymmetry:e})")]
    Asymmetric { asymmetry: f64 },
    #[error("compliance is not positive definite (eigenvalues {eigenvalues:?})")]
    NotPositiveDefinite { eigenvalues: Vec<f64> },
    #[error("compliance is too ill-conditioned to invert (scaled condition {condition:e})")]
    IllConditioned { condition: f64 },
    #[error("line {line}: {reason}")]
    Table { line: usize, reason: String },
    #[error("invalid compliance JSON: {0}")]
    Json(String),
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Straight prismatic beam along its local x axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamSegment {
    /// mm
    pub length: f64,
    /// N/mm²
    pub elastic_modulus: f64,
    /// N/mm²
    pub shear_modulus: f64,
    /// mm²
    pub area: f64,
    /// mm⁴, bending about local y
    pub i_y: f64,
    /// mm⁴, bending about local z
    pub i_z: f64,
    /// mm⁴
    pub j_torsion: f64,
}

impl BeamSegment {
    pub fn validate(&self) -> Result<(), LinkError> {
        let fields = [
            ("length", self.length),
            ("elastic_modulus", self.elastic_modulus),
            ("shear_modulus", self.shear_modulus),
            ("area", self.area),
            ("i_y", self.i_y),
            ("i_z", self.i_z),
            ("j_torsion", self.j_torsion),
        ];
        for (field, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(LinkError::InvalidBeam { field, value });
            }
        }
        Ok(())
    }

    /// Solid circular section of radius `r`.
    pub fn round(length: f64, elastic_modulus: f64, shear_modulus: f64, r: f64) -> Self {
        let area = std::f64::consts::PI * r * r;
        let i = std::f64::consts::PI * r.powi(4) / 4.0;
        Self {
            length,
            elastic_modulus,
            shear_modulus,
            area,
            i_y: i,
            i_z: i,
            j_torsion: 2.0 * i,
        }
    }

    /// Solid rectangle, `width` along local y and `height` along local z.
    /// Torsion uses the usual thin-strip series approximation.
    pub fn rectangular(length: f64, elastic_modulus: f64, shear_modulus: f64, width: f64, height: f64) -> Self {
        let (a, b) = if width >= height {
            (width, height)
        } else {
            (height, width)
        };
        let j = a * b.powi(3) * (1.0 / 3.0 - 0.21 * (b / a) * (1.0 - (b / a).powi(4) / 12.0));
        Self {
            length,
            elastic_modulus,
            shear_modulus,
            area: width * height,
            i_y: width * height.powi(3) / 12.0,
            i_z: height * width.powi(3) / 12.0,
            j_torsion: j,
        }
    }

    pub fn with_length(self, length: f64) -> Self {
        Self { length, ..self }
    }

    /// Section area, both second moments and the torsion constant scaled by `s`.
    pub fn scaled_section(self, s: f64) -> Self {
        Self {
            area: self.area * s,
            i_y: self.i_y * s,
            i_z: self.i_z * s,
            j_torsion: self.j_torsion * s,
            ..self
        }
    }
}

/// Validated symmetric positive-definite 6×6 compliance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix6<f64>", into = "Matrix6<f64>")]
pub struct ComplianceMatrix(Matrix6<f64>);

impl ComplianceMatrix {
    pub fn new(values: Matrix6<f64>) -> Result<Self, LinkError> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(LinkError::NonFinite);
        }
        let asymmetry = relative_asymmetry(&values);
        if asymmetry > SYMMETRY_TOL {
            return Err(LinkError::Asymmetric { asymmetry });
        }
        check_positive_definite(&values)?;
        Ok(Self(values))
    }

    pub fn values(&self) -> &Matrix6<f64> {
        &self.0
    }

    /// Inverse, refused when the diagonally scaled condition number exceeds [`MAX_CONDITION`].
    pub fn to_stiffness(&self) -> Result<Matrix6<f64>, LinkError> {
        let condition = scaled_condition(&self.0);
        if condition > MAX_CONDITION {
            return Err(LinkError::IllConditioned { condition });
        }
        let k = Cholesky::new(self.0)
            .ok_or_else(|| LinkError::NotPositiveDefinite {
                eigenvalues: eigenvalues(&self.0),
            })?
            .inverse();
        Ok((k + k.transpose()) * 0.5)
    }

    pub fn from_stiffness(k: &Matrix6<f64>) -> Result<Self, LinkError> {
        check_positive_definite(k)?;
        let c = Cholesky::new((k + k.transpose()) * 0.5)
            .ok_or_else(|| LinkError::NotPositiveDefinite {
                eigenvalues: eigenvalues(k),
            })?
            .inverse();
        Self::new((c + c.transpose()) * 0.5)
    }
}

impl TryFrom<Matrix6<f64>> for ComplianceMatrix {
    type Error = LinkError;
    fn try_from(m: Matrix6<f64>) -> Result<Self, LinkError> {
        ComplianceMatrix::new(m)
    }
}

impl From<ComplianceMatrix> for Matrix6<f64> {
    fn from(c: ComplianceMatrix) -> Self {
        c.0
    }
}

impl fmt::Display for ComplianceMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..6 {
            let row: Vec<String> = (0..6).map(|c| format!("{:.6e}", self.0[(r, c)])).collect();
            writeln!(f, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

fn eigenvalues(m: &Matrix6<f64>) -> Vec<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

fn check_positive_definite(m: &Matrix6<f64>) -> Result<(), LinkError> {
    let sym = (m + m.transpose()) * 0.5;
    let ev = eigenvalues(&sym);
    if Cholesky::new(sym).is_none() || ev[0] <= 0.0 {
        return Err(LinkError::NotPositiveDefinite { eigenvalues: ev });
    }
    Ok(())
}

fn scaled_condition(m: &Matrix6<f64>) -> f64 {
    let d = Matrix6::from_diagonal(&m.diagonal().map(|v| 1.0 / v.abs().sqrt()));
    let ev = eigenvalues(&(d * m * d));
    ev[5] / ev[0]
}

/// Euler-Bernoulli cantilever compliance at the free tip.
pub fn beam_compliance(beam: &BeamSegment) -> Result<ComplianceMatrix, LinkError> {
    beam.validate()?;
    let BeamSegment {
        length: l,
        elastic_modulus: e,
        shear_modulus: g,
        area,
        i_y,
        i_z,
        j_torsion,
    } = *beam;
    let mut c = Matrix6::zeros();
    c[(0, 0)] = l / (e * area);
    c[(3, 3)] = l / (g * j_torsion);
    c[(1, 1)] = l.powi(3) / (3.0 * e * i_z);
    c[(1, 5)] = l * l / (2.0 * e * i_z);
    c[(5, 1)] = c[(1, 5)];
    c[(5, 5)] = l / (e * i_z);
    c[(2, 2)] = l.powi(3) / (3.0 * e * i_y);
    c[(2, 4)] = -l * l / (2.0 * e * i_y);
    c[(4, 2)] = c[(2, 4)];
    c[(4, 4)] = l / (e * i_y);
    ComplianceMatrix::new(c)
}

/// Compliance at the final tip of beams joined end to end. Each transform
/// places a segment's base relative to the previous tip (the first relative
/// to the link base).
pub fn serial_link_compliance(segments: &[(BeamSegment, Transform)]) -> Result<ComplianceMatrix, LinkError> {
    if segments.is_empty() {
        return Err(LinkError::EmptySegments);
    }
    let mut elements = Vec::with_capacity(3 * segments.len());
    let mut blocks = Vec::with_capacity(segments.len());
    for (beam, placement) in segments {
        blocks.push(*beam_compliance(beam)?.values());
        elements.push(ChainElement::rigid(*placement));
        elements.push(ChainElement::rigid(Transform::tx(beam.length)));
        // Only the kinematic structure is used; the stiffness placeholder never enters the result.
        elements.push(ChainElement::spring(Matrix6::identity()));
    }
    let chain = KinematicChain::new(elements).expect("beam chain is structurally valid");
    let state = ChainState::zeros(&chain);
    let tool = crate::chain_model::forward_kinematics(&chain, &state).expect("dimensions match");
    let jt = jacobians(&chain, &state).expect("dimensions match").theta;
    let mut c_base = Matrix6::zeros();
    for (i, block) in blocks.iter().enumerate() {
        let j = jt.fixed_view::<6, 6>(0, 6 * i);
        c_base += j * block * j.transpose();
    }
    let r = tool.rotation();
    let mut rot = Matrix6::zeros();
    rot.fixed_view_mut::<3, 3>(0, 0).copy_from(&r.transpose());
    rot.fixed_view_mut::<3, 3>(3, 3).copy_from(&r.transpose());
    let c = rot * c_base * rot.transpose();
    ComplianceMatrix::new((c + c.transpose()) * 0.5)
}

/// Validates an externally computed compliance. Asymmetry up to
/// [`IMPORT_SYMMETRY_TOL`] is averaged away; anything larger is rejected.
pub fn load_compliance_matrix(raw: &[[f64; 6]; 6]) -> Result<ComplianceMatrix, LinkError> {
    let m = Matrix6::from_fn(|r, c| raw[r][c]);
    if !m.iter().all(|v| v.is_finite()) {
        return Err(LinkError::NonFinite);
    }
    let asymmetry = relative_asymmetry(&m);
    if asymmetry > IMPORT_SYMMETRY_TOL {
        return Err(LinkError::Asymmetric { asymmetry });
    }
    let m = if asymmetry > 0.0 { (m + m.transpose()) * 0.5 } else { m };
    ComplianceMatrix::new(m)
}

/// Parses six whitespace-separated rows of six numbers. Blank lines and
/// anything after `#` are ignored.
pub fn parse_compliance_table(text: &str) -> Result<[[f64; 6]; 6], LinkError> {
    let mut rows = Vec::new();
    let mut last_line = 0;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let values: Result<Vec<f64>, _> = content
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| s.to_string()))
            .collect();
        let values = values.map_err(|tok| LinkError::Table {
            line: line_no,
            reason: format!("`{tok}` is not a number"),
        })?;
        if values.len() != 6 {
            return Err(LinkError::Table {
                line: line_no,
                reason: format!("expected 6 columns, found {}", values.len()),
            });
        }
        if rows.len() == 6 {
            return Err(LinkError::Table {
                line: line_no,
                reason: "more than 6 rows".into(),
            });
        }
        rows.push([values[0], values[1], values[2], values[3], values[4], values[5]]);
    }
    if rows.len() != 6 {
        return Err(LinkError::Table {
            line: last_line,
            reason: format!("expected 6 rows, found {}", rows.len()),
        });
    }
    Ok([rows[0], rows[1], rows[2], rows[3], rows[4], rows[5]])
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonCompliance {
    compliance: [[f64; 6]; 6],
}

/// Parses `{"compliance": [[...6], ...6 rows]}`.
pub fn parse_compliance_json(text: &str) -> Result<[[f64; 6]; 6], LinkError> {
    serde_json::from_str::<JsonCompliance>(text)
        .map(|j| j.compliance)
        .map_err(|e| LinkError::Json(e.to_string()))
}

/// Reads a compliance file: JSON when the extension is `.json` or the
/// content starts with `{`, otherwise the plain table format.
pub fn read_compliance_file(path: &Path) -> Result<ComplianceMatrix, LinkError> {
    let text = std::fs::read_to_string(path).map_err(|e| LinkError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let is_json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
    let raw = if is_json {
        parse_compliance_json(&text)?
    } else {
        parse_compliance_table(&text)?
    };
    load_compliance_matrix(&raw)
}

/// Rotational 3×3 block of a 6×6 matrix.
pub fn rotational_block(m: &Matrix6<f64>) -> Matrix3<f64> {
    m.fixed_view::<3, 3>(3, 3).into_owned()
}
