//! Model files: TOML describing either an Orthoglide built from parameters or
//! a set of generic chains element by element.
//!
//! ```toml
//! name = "two-leg"
//!
//! [solver]
//! max_iterations = 30
//!
//! [[points]]
//! name = "home"
//! position = [0.0, 0.0, 0.0]
//!
//! [[chain]]
//! name = "leg-1"
//! [[chain.element]]
//! type = "actuated"
//! kind = "prismatic"
//! axis = "x"
//! control_stiffness = 1.0e4
//! [[chain.element]]
//! type = "spring"
//! name = "foot"
//! beam = { length = 80.0, elastic_modulus = 7.0e4, shear_modulus = 2.6e4, area = 1600.0, i_y = 2.1e5, i_z = 2.1e5, j_torsion = 3.6e5 }
//! ```
//!
//! Units are mm, N, rad and N·mm throughout.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix6, Vector3};
use serde::Deserialize;
use thiserror::Error;

use crate::chain_model::{ChainElement, ChainError, Follow, JointKind, KinematicChain};
use crate::geometry::{Axis, Transform};
use crate::kinetostatics::SolverOptions;
use crate::link_compliance::{beam_compliance, load_compliance_matrix, read_compliance_file, BeamSegment, LinkError};
use crate::models::{
    Architecture, GenericManipulator, Manipulator, ModelError, NamedPoint, Orthoglide, OrthoglideParams,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{0}")]
    Parse(String),
    #[error("chain {chain} ({name}), element {element}: {reason}")]
    Element {
        chain: usize,
        name: String,
        element: usize,
        reason: String,
    },
    #[error("chain {chain} ({name}), element {element}, spring `{spring}`: {source}")]
    Spring {
        chain: usize,
        name: String,
        element: usize,
        spring: String,
        source: LinkError,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: String,
    #[serde(default)]
    solver: SolverOptions,
    #[serde(default)]
    points: Vec<NamedPoint>,
    orthoglide: Option<RawOrthoglide>,
    #[serde(default)]
    chain: Vec<RawChain>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOrthoglide {
    architecture: Architecture,
    leg_length: f64,
    bar: BeamSegment,
    bar_separation: f64,
    foot: BeamSegment,
    actuator_stiffness: f64,
    tool_offset: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChain {
    name: Option<String>,
    #[serde(default)]
    element: Vec<RawElement>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum RawElement {
    Rigid {
        #[serde(default)]
        translation: [f64; 3],
        /// Row-major rotation matrix.
        rotation: Option<[[f64; 3]; 3]>,
        /// Rotation vector (axis times angle, rad); alternative to `rotation`.
        rotation_vector: Option<[f64; 3]>,
    },
    Actuated {
        kind: JointKind,
        axis: Axis,
        #[serde(default)]
        nominal: f64,
        control_stiffness: f64,
    },
    Passive {
        kind: JointKind,
        axis: Axis,
        follows: Option<usize>,
        gain: Option<f64>,
    },
    Spring {
        name: Option<String>,
        stiffness: Option<Box<[[f64; 6]; 6]>>,
        compliance: Option<Box<[[f64; 6]; 6]>>,
        beam: Option<BeamSegment>,
        compliance_file: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSummary {
    pub name: String,
    pub n: usize,
    pub m: usize,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub name: String,
    pub solver: SolverOptions,
    pub points: Vec<NamedPoint>,
    pub manipulator: Manipulator,
    pub chain_names: Vec<String>,
}

impl ModelConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses a model; relative compliance files resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        raw.solver
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("[solver]: {e}")))?;
        for p in &raw.points {
            if !p.position.iter().all(|v| v.is_finite()) {
                return Err(ConfigError::Invalid(format!("point `{}` is not finite", p.name)));
            }
        }
        let (manipulator, chain_names) = match (raw.orthoglide, raw.chain.is_empty()) {
            (Some(_), false) => {
                return Err(ConfigError::Invalid(
                    "give either an [orthoglide] section or [[chain]] entries, not both".into(),
                ))
            }
            (None, true) => return Err(ConfigError::Invalid("model defines no chains".into())),
            (Some(o), true) => {
                let params = OrthoglideParams {
                    leg_length: o.leg_length,
                    bar: o.bar,
                    bar_separation: o.bar_separation,
                    foot: o.foot,
                    actuator_stiffness: o.actuator_stiffness,
                    tool_offset: o.tool_offset,
                    points: raw.points.clone(),
                };
                let m = Orthoglide::new(params, o.architecture)?;
                // Building the chains checks every spring.
                m.chains()?;
                let names = (1..=3).map(|i| format!("leg-{i}")).collect();
                (Manipulator::Orthoglide(m), names)
            }
            (None, false) => {
                let mut chains = Vec::new();
                let mut names = Vec::new();
                for (ci, c) in raw.chain.iter().enumerate() {
                    let name = c.name.clone().unwrap_or_else(|| format!("chain-{}", ci + 1));
                    chains.push(build_chain(ci, &name, &c.element, base_dir)?);
                    names.push(name);
                }
                (Manipulator::Generic(GenericManipulator { chains }), names)
            }
        };
        Ok(Self {
            name: raw.name,
            solver: raw.solver,
            points: raw.points,
            manipulator,
            chain_names,
        })
    }

    pub fn point(&self, name: &str) -> Option<Vector3<f64>> {
        self.points
            .iter()
            .find(|p| p.name.eq_ignore_ascii_case(name))
            .map(|p| Vector3::from(p.position))
    }

    pub fn summary(&self) -> Result<Vec<ChainSummary>, ConfigError> {
        Ok(self
            .manipulator
            .chains()?
            .iter()
            .zip(&self.chain_names)
            .map(|(c, name)| ChainSummary {
                name: name.clone(),
                n: c.n(),
                m: c.m(),
            })
            .collect())
    }
}

fn build_chain(ci: usize, name: &str, elements: &[RawElement], base_dir: &Path) -> Result<KinematicChain, ConfigError> {
    let element_err = |element: usize, reason: String| ConfigError::Element {
        chain: ci + 1,
        name: name.to_string(),
        element: element + 1,
        reason,
    };
    let mut out = Vec::with_capacity(elements.len());
    let mut spring_names = Vec::with_capacity(elements.len());
    for (ei, e) in elements.iter().enumerate() {
        let spring_name = match e {
            RawElement::Spring { name: Some(n), .. } => n.clone(),
            _ => format!("#{}", ei + 1),
        };
        spring_names.push(spring_name.clone());
        let spring_err = |source: LinkError| ConfigError::Spring {
            chain: ci + 1,
            name: name.to_string(),
            element: ei + 1,
            spring: spring_name.clone(),
            source,
        };
        let el = match e {
            RawElement::Rigid {
                translation,
                rotation,
                rotation_vector,
            } => {
                let t = Vector3::from(*translation);
                let tf = match (rotation, rotation_vector) {
                    (Some(_), Some(_)) => {
                        return Err(element_err(ei, "give `rotation` or `rotation_vector`, not both".into()))
                    }
                    (Some(r), None) => {
                        let m = Matrix3::from_fn(|i, j| r[i][j]);
                        Transform::new(m, t).map_err(|g| element_err(ei, g.to_string()))?
                    }
                    (None, Some(v)) => {
                        Transform::from_translation(t).compose(&Transform::from_rotation_vector(&Vector3::from(*v)))
                    }
                    (None, None) => Transform::from_translation(t),
                };
                ChainElement::rigid(tf)
            }
            RawElement::Actuated {
                kind,
                axis,
                nominal,
                control_stiffness,
            } => ChainElement::actuator(*kind, *axis, *nominal, *control_stiffness),
            RawElement::Passive {
                kind,
                axis,
                follows,
                gain,
            } => {
                let follows = match (follows, gain) {
                    (Some(c), g) => Some(Follow {
                        coordinate: *c,
                        gain: g.unwrap_or(1.0),
                    }),
                    (None, Some(_)) => return Err(element_err(ei, "`gain` needs `follows`".into())),
                    (None, None) => None,
                };
                ChainElement::PassiveJoint {
                    kind: *kind,
                    axis: *axis,
                    follows,
                }
            }
            RawElement::Spring {
                stiffness,
                compliance,
                beam,
                compliance_file,
                ..
            } => {
                let given = [
                    stiffness.is_some(),
                    compliance.is_some(),
                    beam.is_some(),
                    compliance_file.is_some(),
                ]
                .iter()
                .filter(|b| **b)
                .count();
                if given != 1 {
                    return Err(element_err(
                        ei,
                        format!(
                            "spring `{spring_name}` needs exactly one of `stiffness`, `compliance`, `beam`, `compliance_file`"
                        ),
                    ));
                }
                let k = if let Some(s) = stiffness {
                    Matrix6::from_fn(|i, j| s[i][j])
                } else {
                    let c = if let Some(c) = compliance {
                        load_compliance_matrix(c)
                    } else if let Some(b) = beam {
                        beam_compliance(b)
                    } else {
                        let p = compliance_file.as_ref().expect("counted above");
                        read_compliance_file(&base_dir.join(p))
                    }
                    .map_err(spring_err)?;
                    c.to_stiffness().map_err(spring_err)?
                };
                ChainElement::spring(k)
            }
        };
        out.push(el);
    }
    KinematicChain::new(out).map_err(|e| match e {
        ChainError::InvalidElement { index, reason } => {
            if matches!(elements[index], RawElement::Spring { .. }) {
                element_err(index, format!("spring `{}`: {reason}", spring_names[index]))
            } else {
                element_err(index, reason)
            }
        }
        other => ConfigError::Invalid(format!("chain {} ({name}): {other}", ci + 1)),
    })
}
