//! Bundled manipulators: the orthogonal 3-PUU and its parallelogram-leg
//! 3-PRPaR variant, plus generic chain sets loaded from a config.
//!
//! Each leg is laid out in its own frame, a cyclic permutation of the base
//! axes: the actuator slides along the local x axis, the foot extends along x,
//! and at the reference point Q0 = 0 the leg is parallel to x. The three
//! local x axes are the base x, y and z axes.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain_model::{
    forward_kinematics, rigid_nominal_configuration, ChainElement, ChainError, ChainState, JointKind, KinematicChain,
};
use crate::geometry::{Axis, Transform};
use crate::kinetostatics::{chain_stiffness_unloaded, KinetoError, Posture, StiffnessMatrix};
use crate::link_compliance::{beam_compliance, BeamSegment, LinkError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("point ({x}, {y}, {z}) is outside the workspace of chain {chain}")]
    OutOfWorkspace { chain: usize, x: f64, y: f64, z: f64 },
    #[error("chain {chain}: {source}")]
    Chain { chain: usize, source: ChainError },
    #[error(transparent)]
    Kineto(#[from] KinetoError),
    #[error(transparent)]
    Link(#[from] LinkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Legs are single limbs with universal joints at both ends.
    Puu,
    /// Legs are parallelograms of two bars.
    Prpar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPoint {
    pub name: String,
    /// mm
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrthoglideParams {
    /// Leg length between the two joint centres, mm.
    pub leg_length: f64,
    /// One parallelogram bar; its length is replaced by `leg_length`.
    pub bar: BeamSegment,
    /// Distance between the two parallelogram bars, mm.
    pub bar_separation: f64,
    /// Foot between the actuator carriage and the first leg joint; extends along the actuator axis.
    pub foot: BeamSegment,
    /// Position-control stiffness of each actuator, N/mm.
    pub actuator_stiffness: f64,
    /// Offset from the last leg joint to the platform centre, mm.
    pub tool_offset: f64,
    #[serde(default = "default_points")]
    pub points: Vec<NamedPoint>,
}

fn default_points() -> Vec<NamedPoint> {
    let p = |name: &str, v: f64| NamedPoint {
        name: name.into(),
        position: [v, v, v],
    };
    vec![p("Q0", 0.0), p("Q1", -73.65), p("Q2", 126.35)]
}

impl Default for OrthoglideParams {
    /// Aluminium legs sized like a desktop machine: 310 mm legs of
    /// 8 mm radius round bar 50 mm apart, 40×40 mm feet 80 mm long.
    fn default() -> Self {
        let (e, g) = (7.0e4, 2.6e4);
        Self {
            leg_length: 310.0,
            bar: BeamSegment::round(310.0, e, g, 8.0),
            bar_separation: 50.0,
            foot: BeamSegment::rectangular(80.0, e, g, 40.0, 40.0),
            actuator_stiffness: 4.0e3,
            tool_offset: 40.0,
            points: default_points(),
        }
    }
}

impl OrthoglideParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidParams(m));
        for (name, v) in [
            ("leg_length", self.leg_length),
            ("actuator_stiffness", self.actuator_stiffness),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("bar_separation", self.bar_separation),
            ("tool_offset", self.tool_offset),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        self.bar().validate()?;
        self.foot.validate()?;
        Ok(())
    }

    pub fn bar(&self) -> BeamSegment {
        self.bar.with_length(self.leg_length)
    }

    /// Single limb of the 3-PUU legs: one bar with doubled area, second moments and torsion constant.
    pub fn limb(&self) -> BeamSegment {
        self.bar().scaled_section(2.0)
    }

    /// Distance from a leg's base origin to the carriage at zero actuator position.
    fn base_offset(&self) -> f64 {
        self.leg_length + self.foot.length + self.tool_offset
    }

    pub fn point(&self, name: &str) -> Option<Vector3<f64>> {
        self.points
            .iter()
            .find(|p| p.name.eq_ignore_ascii_case(name))
            .map(|p| Vector3::from(p.position))
    }
}

/// Rotation of leg `i` (0, 1, 2): its local x axis is base x, y, z respectively.
pub fn leg_frame(i: usize) -> Matrix3<f64> {
    let e = [Vector3::x(), Vector3::y(), Vector3::z()];
    Matrix3::from_columns(&[e[i % 3], e[(i + 1) % 3], e[(i + 2) % 3]])
}

fn leg_base(params: &OrthoglideParams, i: usize) -> Transform {
    let r = Transform::new(leg_frame(i), Vector3::zeros()).expect("permutation is a rotation");
    r.compose(&Transform::tx(-params.base_offset()))
}

fn stiffness_of(beam: &BeamSegment) -> Result<Matrix6<f64>, ModelError> {
    Ok(beam_compliance(beam)?.to_stiffness()?)
}

/// Closed-form rigid inverse kinematics of one leg for a platform point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegSolution {
    /// Actuator position, mm.
    pub actuator: f64,
    /// Rotations of the first universal joint (about local z, then y).
    pub q1: f64,
    pub q2: f64,
    /// Second universal joint, `-q2` and `-q1` for a platform that keeps its orientation.
    pub q3: f64,
    pub q4: f64,
}

pub fn leg_inverse_kinematics(params: &OrthoglideParams, leg: usize, point: &Vector3<f64>) -> Option<LegSolution> {
    let l = params.leg_length;
    let p = leg_frame(leg).transpose() * point;
    let lateral = p.y * p.y + p.z * p.z;
    if lateral.is_nan() || lateral >= l * l {
        return None;
    }
    let c = p.x - (l * l - lateral).sqrt();
    let actuator = c + params.base_offset() - params.foot.length - params.tool_offset;
    let u = (p - Vector3::x() * c) / l;
    let q2 = -u.z.clamp(-1.0, 1.0).asin();
    let q1 = u.y.atan2(u.x);
    Some(LegSolution {
        actuator,
        q1,
        q2,
        q3: -q2,
        q4: -q1,
    })
}

/// Stiffness of two parallel bars `separation` apart, joined by pivots about
/// the local y axis at both ends, expressed at the shared end frame. The bars
/// lie along local x rotated by `angle` about y and are offset by `±separation/2`
/// along local z. The result is singular along the parallelogram's own motion.
pub fn parallelogram_stiffness(bar: &BeamSegment, separation: f64, angle: f64) -> Result<StiffnessMatrix, ModelError> {
    let k_bar = stiffness_of(bar)?;
    let mut total = Matrix6::zeros();
    for side in [1.0, -1.0] {
        let chain = KinematicChain::new(vec![
            ChainElement::rigid(Transform::tz(side * separation / 2.0)),
            ChainElement::revolute(Axis::Y),
            ChainElement::rigid(Transform::tx(bar.length)),
            ChainElement::spring(k_bar),
            ChainElement::revolute(Axis::Y),
            ChainElement::rigid(Transform::tz(-side * separation / 2.0)),
        ])
        .map_err(|source| ModelError::Chain { chain: 0, source })?;
        let q = nalgebra::DVector::from_row_slice(&[angle, -angle]);
        total += chain_stiffness_unloaded(&chain, &q)?.stiffness.0;
    }
    Ok(StiffnessMatrix((total + total.transpose()) * 0.5))
}

/// Equivalent 6-dof spring of a parallelogram leg for `Ry(q) Tx(L) Ry(-q) Vs`.
///
/// The two-bar stiffness carries no stiffness along the parallelogram's own
/// motion. Since the chain already has that motion through `q`, any stiffness
/// along it is redundant; `2EA/L` along it makes the spring positive definite.
pub fn parallelogram_spring(bar: &BeamSegment, separation: f64, angle: f64) -> Result<Matrix6<f64>, ModelError> {
    if separation.is_nan() || separation <= 0.0 {
        return Err(ModelError::InvalidParams(format!(
            "parallelogram bar separation must be positive, got {separation}"
        )));
    }
    let k = parallelogram_stiffness(bar, separation, angle)?.0;
    let w = Vector6::new(-angle.sin(), 0.0, -angle.cos(), 0.0, 0.0, 0.0);
    let k_reg = 2.0 * bar.elastic_modulus * bar.area / bar.length;
    let k = k + w * w.transpose() * k_reg;
    Ok((k + k.transpose()) * 0.5)
}

fn leg_chain(
    params: &OrthoglideParams,
    arch: Architecture,
    leg: usize,
    actuator: f64,
    q2: f64,
) -> Result<KinematicChain, ModelError> {
    let mut e = vec![
        ChainElement::rigid(leg_base(params, leg)),
        ChainElement::actuator(JointKind::Prismatic, Axis::X, actuator, params.actuator_stiffness),
        ChainElement::rigid(Transform::tx(params.foot.length)),
        ChainElement::spring(stiffness_of(&params.foot)?),
        ChainElement::revolute(Axis::Z),
        ChainElement::revolute(Axis::Y),
        ChainElement::rigid(Transform::tx(params.leg_length)),
    ];
    match arch {
        Architecture::Puu => {
            e.push(ChainElement::spring(stiffness_of(&params.limb())?));
            e.push(ChainElement::revolute(Axis::Y));
        }
        Architecture::Prpar => {
            e.push(ChainElement::revolute_following(Axis::Y, 1, -1.0));
            e.push(ChainElement::spring(parallelogram_spring(
                &params.bar(),
                params.bar_separation,
                q2,
            )?));
        }
    }
    e.push(ChainElement::revolute(Axis::Z));
    e.push(ChainElement::rigid(Transform::tx(params.tool_offset)));
    KinematicChain::new(e).map_err(|source| ModelError::Chain { chain: leg, source })
}

/// The three 3-PUU legs at the Q0 actuator positions.
pub fn build_orthoglide_puu(params: &OrthoglideParams) -> Result<Vec<KinematicChain>, ModelError> {
    params.validate()?;
    (0..3)
        .map(|i| leg_chain(params, Architecture::Puu, i, 0.0, 0.0))
        .collect()
}

/// The three 3-PRPaR legs at the Q0 actuator positions.
pub fn build_orthoglide_prpar(params: &OrthoglideParams) -> Result<Vec<KinematicChain>, ModelError> {
    params.validate()?;
    (0..3)
        .map(|i| leg_chain(params, Architecture::Prpar, i, 0.0, 0.0))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Orthoglide {
    pub params: OrthoglideParams,
    pub architecture: Architecture,
}

impl Orthoglide {
    pub fn new(params: OrthoglideParams, architecture: Architecture) -> Result<Self, ModelError> {
        params.validate()?;
        Ok(Self { params, architecture })
    }

    pub fn chains(&self) -> Result<Vec<KinematicChain>, ModelError> {
        match self.architecture {
            Architecture::Puu => build_orthoglide_puu(&self.params),
            Architecture::Prpar => build_orthoglide_prpar(&self.params),
        }
    }

    /// Rigid nominal configuration with the platform centre at `point`. The
    /// closed-form solution seeds the numeric solver, which refines it.
    pub fn posture(&self, point: &Vector3<f64>) -> Result<Posture, ModelError> {
        let mut chains = Vec::with_capacity(3);
        let mut states = Vec::with_capacity(3);
        for leg in 0..3 {
            let out = || ModelError::OutOfWorkspace {
                chain: leg,
                x: point.x,
                y: point.y,
                z: point.z,
            };
            let s = leg_inverse_kinematics(&self.params, leg, point).ok_or_else(out)?;
            let chain = leg_chain(&self.params, self.architecture, leg, s.actuator, s.q2)?;
            let q = match self.architecture {
                Architecture::Puu => vec![s.q1, s.q2, s.q3, s.q4],
                Architecture::Prpar => vec![s.q1, s.q2, s.q4],
            };
            let guess = ChainState::rigid(&chain, nalgebra::DVector::from_vec(q));
            let target = Transform::new(leg_frame(leg), *point).expect("permutation is a rotation");
            let sol = rigid_nominal_configuration(&chain, &target, &guess).map_err(|e| match e {
                ChainError::Unreachable { .. } => out(),
                source => ModelError::Chain { chain: leg, source },
            })?;
            chains.push(sol.chain);
            states.push(sol.state);
        }
        Ok(Posture::new(chains, states)?)
    }
}

/// Chains read from a config. Targets keep each chain's tool orientation at
/// its home configuration (all coordinates zero) and move the tool point.
#[derive(Debug, Clone, PartialEq)]
pub struct GenericManipulator {
    pub chains: Vec<KinematicChain>,
}

impl GenericManipulator {
    pub fn posture(&self, point: &Vector3<f64>) -> Result<Posture, ModelError> {
        let mut chains = Vec::new();
        let mut states = Vec::new();
        for (i, c) in self.chains.iter().enumerate() {
            let home = ChainState::zeros(c);
            let t0 = forward_kinematics(c, &home).map_err(|source| ModelError::Chain { chain: i, source })?;
            let target = Transform::new(*t0.rotation(), *point).map_err(|e| ModelError::Chain {
                chain: i,
                source: e.into(),
            })?;
            let sol = rigid_nominal_configuration(c, &target, &home).map_err(|e| match e {
                ChainError::Unreachable { .. } => ModelError::OutOfWorkspace {
                    chain: i,
                    x: point.x,
                    y: point.y,
                    z: point.z,
                },
                source => ModelError::Chain { chain: i, source },
            })?;
            chains.push(sol.chain);
            states.push(sol.state);
        }
        Ok(Posture::new(chains, states)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Manipulator {
    Orthoglide(Orthoglide),
    Generic(GenericManipulator),
}

impl Manipulator {
    pub fn posture(&self, point: &Vector3<f64>) -> Result<Posture, ModelError> {
        match self {
            Manipulator::Orthoglide(o) => o.posture(point),
            Manipulator::Generic(g) => g.posture(point),
        }
    }

    pub fn chains(&self) -> Result<Vec<KinematicChain>, ModelError> {
        match self {
            Manipulator::Orthoglide(o) => o.chains(),
            Manipulator::Generic(g) => Ok(g.chains.clone()),
        }
    }
}
