//! Serial description of one elastic kinematic chain.
//!
//! A chain is an ordered product of rigid links, a position-locked actuator
//! with a series spring, passive joints, and six-dof virtual springs. Each
//! elementary factor depends on at most one coordinate: a passive coordinate
//! `q[i]` or a virtual-spring coordinate `theta[j]`. Passive joints may also
//! follow an earlier passive coordinate with a fixed gain, which is how a
//! parallelogram's `Ry(q) ... Ry(-q)` pair is expressed with one coordinate.
//!
//! Jacobian columns are end-effector twists: rows 0..3 are the velocity of
//! the tool point (mm per unit coordinate) and rows 3..6 the angular velocity,
//! both in base-frame coordinates.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pose_difference, Axis, GeometryError, Motion, Transform, Wrench};
use crate::numeric::relative_asymmetry;

/// Symmetry tolerance for spring stiffness blocks.
pub const SPRING_SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("state dimension mismatch: chain has n = {n}, m = {m}, state has q = {q}, theta = {theta}")]
    DimensionMismatch { n: usize, m: usize, q: usize, theta: usize },
    #[error("element {index}: {reason}")]
    InvalidElement { index: usize, reason: String },
    #[error("target unreachable after {iterations} iterations (residual {translational:e} mm, {rotational:e} rad)")]
    Unreachable {
        iterations: usize,
        translational: f64,
        rotational: f64,
    },
    #[error("wrong number of actuated values: expected {expected}, got {got}")]
    ActuatedCount { expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Prismatic,
    Revolute,
}

impl JointKind {
    pub fn motion(self) -> Motion {
        match self {
            JointKind::Prismatic => Motion::Translation,
            JointKind::Revolute => Motion::Rotation,
        }
    }
}

/// A passive joint slaved to an earlier passive coordinate: value = gain · q[coordinate].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Follow {
    pub coordinate: usize,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChainElement {
    RigidLink(Transform),
    /// Position-locked actuator at `nominal` with a series spring of
    /// `control_stiffness` (N/mm or N·mm/rad); contributes one virtual coordinate.
    ActuatedJoint {
        kind: JointKind,
        axis: Axis,
        nominal: f64,
        control_stiffness: f64,
    },
    PassiveJoint {
        kind: JointKind,
        axis: Axis,
        follows: Option<Follow>,
    },
    /// Six-dof spring: translations x, y, z then rotations x, y, z, in the local frame.
    VirtualSpring6 {
        stiffness: Matrix6<f64>,
    },
}

impl ChainElement {
    pub fn rigid(t: Transform) -> Self {
        ChainElement::RigidLink(t)
    }

    pub fn actuator(kind: JointKind, axis: Axis, nominal: f64, control_stiffness: f64) -> Self {
        ChainElement::ActuatedJoint {
            kind,
            axis,
            nominal,
            control_stiffness,
        }
    }

    pub fn revolute(axis: Axis) -> Self {
        ChainElement::PassiveJoint {
            kind: JointKind::Revolute,
            axis,
            follows: None,
        }
    }

    pub fn prismatic(axis: Axis) -> Self {
        ChainElement::PassiveJoint {
            kind: JointKind::Prismatic,
            axis,
            follows: None,
        }
    }

    pub fn revolute_following(axis: Axis, coordinate: usize, gain: f64) -> Self {
        ChainElement::PassiveJoint {
            kind: JointKind::Revolute,
            axis,
            follows: Some(Follow { coordinate, gain }),
        }
    }

    pub fn spring(stiffness: Matrix6<f64>) -> Self {
        ChainElement::VirtualSpring6 { stiffness }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Coord {
    Passive(usize),
    Virtual(usize),
}

#[derive(Debug, Clone, PartialEq)]
enum Factor {
    Fixed(Transform),
    Joint {
        motion: Motion,
        axis: Axis,
        offset: f64,
        coord: Coord,
        gain: f64,
    },
}

/// One elastic block of the aggregated spring matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpringBlock {
    /// First virtual coordinate of the block.
    pub offset: usize,
    pub stiffness: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    elements: Vec<ChainElement>,
    factors: Vec<Factor>,
    springs: Vec<SpringBlock>,
    /// Virtual coordinate index of each actuator, in element order.
    actuators: Vec<usize>,
    n: usize,
    m: usize,
}

impl KinematicChain {
    pub fn new(elements: Vec<ChainElement>) -> Result<Self, ChainError> {
        let mut factors = Vec::new();
        let mut springs = Vec::new();
        let mut actuators = Vec::new();
        let mut n = 0;
        let mut m = 0;
        for (index, el) in elements.iter().enumerate() {
            let invalid = |reason: String| ChainError::InvalidElement { index, reason };
            match el {
                ChainElement::RigidLink(t) => {
                    if t.orthonormality_error() > crate::geometry::ORTHONORMAL_TOL {
                        return Err(invalid("rigid link rotation is not orthonormal".into()));
                    }
                    factors.push(Factor::Fixed(*t));
                }
                ChainElement::ActuatedJoint {
                    kind,
                    axis,
                    nominal,
                    control_stiffness,
                } => {
                    if !(control_stiffness.is_finite() && *control_stiffness > 0.0) {
                        return Err(invalid(format!(
                            "actuator control stiffness must be positive, got {control_stiffness}"
                        )));
                    }
                    if !nominal.is_finite() {
                        return Err(invalid("actuator nominal is not finite".into()));
                    }
                    factors.push(Factor::Joint {
                        motion: kind.motion(),
                        axis: *axis,
                        offset: *nominal,
                        coord: Coord::Virtual(m),
                        gain: 1.0,
                    });
                    springs.push(SpringBlock {
                        offset: m,
                        stiffness: DMatrix::from_element(1, 1, *control_stiffness),
                    });
                    actuators.push(m);
                    m += 1;
                }
                ChainElement::PassiveJoint { kind, axis, follows } => {
                    let (coord, gain) = match follows {
                        None => {
                            n += 1;
                            (Coord::Passive(n - 1), 1.0)
                        }
                        Some(f) => {
                            if f.coordinate >= n {
                                return Err(invalid(format!(
                                    "follows passive coordinate {} which is not defined yet",
                                    f.coordinate
                                )));
                            }
                            if !f.gain.is_finite() {
                                return Err(invalid("follow gain is not finite".into()));
                            }
                            (Coord::Passive(f.coordinate), f.gain)
                        }
                    };
                    factors.push(Factor::Joint {
                        motion: kind.motion(),
                        axis: *axis,
                        offset: 0.0,
                        coord,
                        gain,
                    });
                }
                ChainElement::VirtualSpring6 { stiffness } => {
                    validate_spring(stiffness).map_err(invalid)?;
                    let motions = [Motion::Translation, Motion::Rotation];
                    for (k, (motion, axis)) in motions
                        .iter()
                        .flat_map(|mo| Axis::ALL.iter().map(move |ax| (*mo, *ax)))
                        .enumerate()
                    {
                        factors.push(Factor::Joint {
                            motion,
                            axis,
                            offset: 0.0,
                            coord: Coord::Virtual(m + k),
                            gain: 1.0,
                        });
                    }
                    springs.push(SpringBlock {
                        offset: m,
                        stiffness: DMatrix::from_iterator(6, 6, stiffness.iter().copied()),
                    });
                    m += 6;
                }
            }
        }
        Ok(Self {
            elements,
            factors,
            springs,
            actuators,
            n,
            m,
        })
    }

    pub fn elements(&self) -> &[ChainElement] {
        &self.elements
    }

    /// Number of independent passive coordinates.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of virtual-spring coordinates.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn spring_blocks(&self) -> &[SpringBlock] {
        &self.springs
    }

    pub fn actuator_count(&self) -> usize {
        self.actuators.len()
    }

    pub fn actuated_values(&self) -> Vec<f64> {
        self.elements
            .iter()
            .filter_map(|e| match e {
                ChainElement::ActuatedJoint { nominal, .. } => Some(*nominal),
                _ => None,
            })
            .collect()
    }

    /// Copy of the chain with every actuator locked at the given positions.
    pub fn with_actuated(&self, values: &[f64]) -> Result<KinematicChain, ChainError> {
        if values.len() != self.actuators.len() {
            return Err(ChainError::ActuatedCount {
                expected: self.actuators.len(),
                got: values.len(),
            });
        }
        let mut it = values.iter();
        let elements = self
            .elements
            .iter()
            .map(|e| match e {
                ChainElement::ActuatedJoint {
                    kind,
                    axis,
                    control_stiffness,
                    ..
                } => ChainElement::ActuatedJoint {
                    kind: *kind,
                    axis: *axis,
                    nominal: *it.next().expect("count checked"),
                    control_stiffness: *control_stiffness,
                },
                other => other.clone(),
            })
            .collect();
        KinematicChain::new(elements)
    }

    /// Sum of rigid translation lengths plus actuator offsets, at least 1 mm.
    pub fn length_scale(&self) -> f64 {
        let s: f64 = self
            .factors
            .iter()
            .map(|f| match f {
                Factor::Fixed(t) => t.translation().norm(),
                Factor::Joint {
                    motion: Motion::Translation,
                    offset,
                    ..
                } => offset.abs(),
                _ => 0.0,
            })
            .sum();
        s.max(1.0)
    }

    fn check(&self, state: &ChainState) -> Result<(), ChainError> {
        if state.q.len() != self.n || state.theta.len() != self.m {
            return Err(ChainError::DimensionMismatch {
                n: self.n,
                m: self.m,
                q: state.q.len(),
                theta: state.theta.len(),
            });
        }
        Ok(())
    }

    fn walk(&self, state: &ChainState) -> Walk {
        let mut t = Transform::identity();
        let mut joints = Vec::new();
        for f in &self.factors {
            match f {
                Factor::Fixed(x) => t = t.compose(x),
                Factor::Joint {
                    motion,
                    axis,
                    offset,
                    coord,
                    gain,
                } => {
                    let value = offset
                        + gain
                            * match coord {
                                Coord::Passive(i) => state.q[*i],
                                Coord::Virtual(j) => state.theta[*j],
                            };
                    joints.push(JointFrame {
                        coord: *coord,
                        gain: *gain,
                        motion: *motion,
                        axis: t.rotation() * axis.unit(),
                        origin: *t.translation(),
                    });
                    t = t.compose(&Transform::elementary(*motion, *axis, value));
                }
            }
        }
        Walk { tool: t, joints }
    }
}

fn validate_spring(k: &Matrix6<f64>) -> Result<(), String> {
    if !k.iter().all(|v| v.is_finite()) {
        return Err("spring stiffness has non-finite entries".into());
    }
    let asym = relative_asymmetry(k);
    if asym > SPRING_SYMMETRY_TOL {
        return Err(format!(
            "spring stiffness is not symmetric (relative asymmetry {asym:e})"
        ));
    }
    let sym = (k + k.transpose()) * 0.5;
    if Cholesky::new(sym).is_none() {
        return Err("spring stiffness is not positive definite".into());
    }
    Ok(())
}

struct JointFrame {
    coord: Coord,
    gain: f64,
    motion: Motion,
    axis: Vector3<f64>,
    origin: Vector3<f64>,
}

struct Walk {
    tool: Transform,
    joints: Vec<JointFrame>,
}

impl Walk {
    /// Twist (tool-point velocity, angular velocity) of every elementary factor.
    fn twists(&self) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        let p = self.tool.translation();
        self.joints
            .iter()
            .map(|j| match j.motion {
                Motion::Translation => (j.axis, Vector3::zeros()),
                Motion::Rotation => (j.axis.cross(&(p - j.origin)), j.axis),
            })
            .collect()
    }
}

/// Passive coordinates `q` (n) and virtual-spring coordinates `theta` (m).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub q: DVector<f64>,
    pub theta: DVector<f64>,
}

impl ChainState {
    pub fn new(q: DVector<f64>, theta: DVector<f64>) -> Self {
        Self { q, theta }
    }

    pub fn zeros(chain: &KinematicChain) -> Self {
        Self {
            q: DVector::zeros(chain.n()),
            theta: DVector::zeros(chain.m()),
        }
    }

    /// Passive coordinates given, springs relaxed.
    pub fn rigid(chain: &KinematicChain, q: DVector<f64>) -> Self {
        Self {
            q,
            theta: DVector::zeros(chain.m()),
        }
    }
}

/// Kinematic Jacobians with respect to the virtual and passive coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobians {
    /// 6 × m
    pub theta: DMatrix<f64>,
    /// 6 × n
    pub q: DMatrix<f64>,
}

/// Blocks of the Hessian of `W^T f(q, theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceHessians {
    pub qq: DMatrix<f64>,
    pub q_theta: DMatrix<f64>,
    pub theta_q: DMatrix<f64>,
    pub theta_theta: DMatrix<f64>,
}

impl ForceHessians {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            qq: DMatrix::zeros(n, n),
            q_theta: DMatrix::zeros(n, m),
            theta_q: DMatrix::zeros(m, n),
            theta_theta: DMatrix::zeros(m, m),
        }
    }
}

pub fn forward_kinematics(chain: &KinematicChain, state: &ChainState) -> Result<Transform, ChainError> {
    chain.check(state)?;
    Ok(chain.walk(state).tool)
}

pub fn jacobians(chain: &KinematicChain, state: &ChainState) -> Result<Jacobians, ChainError> {
    chain.check(state)?;
    Ok(jacobians_of(chain, &chain.walk(state)))
}

fn jacobians_of(chain: &KinematicChain, walk: &Walk) -> Jacobians {
    let mut jt = DMatrix::zeros(6, chain.m);
    let mut jq = DMatrix::zeros(6, chain.n);
    for (j, (v, w)) in walk.joints.iter().zip(walk.twists()) {
        let (target, col) = match j.coord {
            Coord::Passive(i) => (&mut jq, i),
            Coord::Virtual(i) => (&mut jt, i),
        };
        for r in 0..3 {
            target[(r, col)] += j.gain * v[r];
            target[(r + 3, col)] += j.gain * w[r];
        }
    }
    Jacobians { theta: jt, q: jq }
}

/// Forward kinematics and Jacobians from a single pass over the chain.
pub fn kinematics(chain: &KinematicChain, state: &ChainState) -> Result<(Transform, Jacobians), ChainError> {
    chain.check(state)?;
    let walk = chain.walk(state);
    let jac = jacobians_of(chain, &walk);
    Ok((walk.tool, jac))
}

/// Generalised reactions `(J_q^T W, J_theta^T W)` of an end-effector wrench.
pub fn force_gradient(
    chain: &KinematicChain,
    state: &ChainState,
    load: &Wrench,
) -> Result<(DVector<f64>, DVector<f64>), ChainError> {
    let jac = jacobians(chain, state)?;
    let w = load.to_vector();
    Ok((jac.q.transpose() * w, jac.theta.transpose() * w))
}

/// Second derivatives of `W^T f(q, theta)`.
///
/// The rotational part of `f` is measured in exponential coordinates centred on
/// the current end-effector orientation, which makes the Hessian symmetric. For
/// two elementary factors `a` before `b` with twists `(v, w)`,
/// `H_ab = F·(w_a × v_b) + ½ M·(w_a × w_b)` and `H_aa = F·(w_a × v_a)`; the
/// coordinate blocks follow by summing over the factors each coordinate drives.
pub fn force_hessians(chain: &KinematicChain, state: &ChainState, load: &Wrench) -> Result<ForceHessians, ChainError> {
    chain.check(state)?;
    let full = coordinate_blocks(chain, state, load, true);
    let full = (&full + full.transpose()) * 0.5;
    Ok(split_blocks(chain, &full))
}

/// Exact derivative of the generalised reactions `(J_q^T W, J_theta^T W)`
/// with respect to `(q, theta)`: block `qq[(i, j)]` is `d(J_q^T W)_i / dq_j`.
/// It differs from [`force_hessians`] by an antisymmetric part linear in the moment.
pub fn force_jacobian(chain: &KinematicChain, state: &ChainState, load: &Wrench) -> Result<ForceHessians, ChainError> {
    chain.check(state)?;
    Ok(split_blocks(chain, &coordinate_blocks(chain, state, load, false)))
}

fn coordinate_blocks(chain: &KinematicChain, state: &ChainState, load: &Wrench, symmetric: bool) -> DMatrix<f64> {
    let walk = chain.walk(state);
    let twists = walk.twists();
    let f = load.force;
    let mo = load.moment;
    let k = twists.len();
    // Row a, column b: derivative of factor a's reaction with respect to factor b.
    let mut h_el: DMatrix<f64> = DMatrix::zeros(k, k);
    for a in 0..k {
        let (va, wa) = &twists[a];
        h_el[(a, a)] = f.dot(&wa.cross(va));
        for b in (a + 1)..k {
            let (vb, wb) = &twists[b];
            let base = f.dot(&wa.cross(vb));
            let m = mo.dot(&wa.cross(wb));
            if symmetric {
                h_el[(a, b)] = base + 0.5 * m;
                h_el[(b, a)] = base + 0.5 * m;
            } else {
                h_el[(a, b)] = base;
                h_el[(b, a)] = base + m;
            }
        }
    }
    let n = chain.n;
    let dim = n + chain.m;
    let mut gain: DMatrix<f64> = DMatrix::zeros(k, dim);
    for (a, j) in walk.joints.iter().enumerate() {
        let col = match j.coord {
            Coord::Passive(i) => i,
            Coord::Virtual(i) => n + i,
        };
        gain[(a, col)] += j.gain;
    }
    gain.transpose() * h_el * &gain
}

fn split_blocks(chain: &KinematicChain, full: &DMatrix<f64>) -> ForceHessians {
    let n = chain.n;
    ForceHessians {
        qq: full.view((0, 0), (n, n)).into_owned(),
        q_theta: full.view((0, n), (n, chain.m)).into_owned(),
        theta_q: full.view((n, 0), (chain.m, n)).into_owned(),
        theta_theta: full.view((n, n), (chain.m, chain.m)).into_owned(),
    }
}

/// Rigid-model pose solution: locked actuator positions plus passive coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalConfiguration {
    /// The input chain with its actuators locked at the solved positions.
    pub chain: KinematicChain,
    /// Passive coordinates with all springs at zero.
    pub state: ChainState,
    pub iterations: usize,
}

const IK_MAX_ITERATIONS: usize = 100;
const IK_TRANSLATION_TOL: f64 = 1e-9;
const IK_ROTATION_TOL: f64 = 1e-12;

/// Solves the rigid model (all springs at zero) for the actuator positions and
/// passive coordinates that place the end-effector at `target`, using damped
/// Gauss-Newton from `guess` and the chain's current actuator positions.
pub fn rigid_nominal_configuration(
    chain: &KinematicChain,
    target: &Transform,
    guess: &ChainState,
) -> Result<NominalConfiguration, ChainError> {
    chain.check(guess)?;
    let scale = chain.length_scale();
    let na = chain.actuators.len();
    let mut actuated = chain.actuated_values();
    let mut q = guess.q.clone();
    let mut current = chain.clone();

    let residual = |c: &KinematicChain, q: &DVector<f64>| -> Result<(Vector6<f64>, Transform, Jacobians), ChainError> {
        let state = ChainState::rigid(c, q.clone());
        let (tool, jac) = kinematics(c, &state)?;
        let e = pose_difference(&tool, target)?;
        Ok((e.to_vector(), tool, jac))
    };
    let merit = |e: &Vector6<f64>| (e.fixed_rows::<3>(0).norm() / scale).powi(2) + e.fixed_rows::<3>(3).norm().powi(2);
    let converged = |e: &Vector6<f64>| {
        e.fixed_rows::<3>(0).amax() <= IK_TRANSLATION_TOL && e.fixed_rows::<3>(3).amax() <= IK_ROTATION_TOL
    };

    let (mut e, _, mut jac) = residual(&current, &q)?;
    for iteration in 0..IK_MAX_ITERATIONS {
        if converged(&e) {
            return Ok(NominalConfiguration {
                state: ChainState::rigid(&current, q),
                chain: current,
                iterations: iteration,
            });
        }
        let cols = na + chain.n;
        let mut a = DMatrix::zeros(6, cols);
        for (c, &vi) in chain.actuators.iter().enumerate() {
            a.set_column(c, &jac.theta.column(vi));
        }
        for i in 0..chain.n {
            a.set_column(na + i, &jac.q.column(i));
        }
        let mut es = DVector::from_column_slice(e.as_slice());
        for r in 0..3 {
            for c in 0..cols {
                a[(r, c)] /= scale;
            }
            es[r] /= scale;
        }
        let svd = a.svd(true, true);
        let step = svd
            .solve(&es, 1e-12 * svd.singular_values.max())
            .map_err(|_| ChainError::Unreachable {
                iterations: iteration,
                translational: e.fixed_rows::<3>(0).norm(),
                rotational: e.fixed_rows::<3>(3).norm(),
            })?;

        let m0 = merit(&e);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let new_act: Vec<f64> = actuated.iter().enumerate().map(|(c, v)| v + alpha * step[c]).collect();
            let new_q = &q + step.rows(na, chain.n) * alpha;
            let cand = chain.with_actuated(&new_act)?;
            let (e_new, _, jac_new) = residual(&cand, &new_q)?;
            if merit(&e_new) < m0 || converged(&e_new) {
                accepted = Some((new_act, new_q, cand, e_new, jac_new));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((na_, nq, cand, e_new, jac_new)) => {
                actuated = na_;
                q = nq;
                current = cand;
                e = e_new;
                jac = jac_new;
            }
            None => {
                return Err(ChainError::Unreachable {
                    iterations: iteration + 1,
                    translational: e.fixed_rows::<3>(0).norm(),
                    rotational: e.fixed_rows::<3>(3).norm(),
                })
            }
        }
    }
    if converged(&e) {
        return Ok(NominalConfiguration {
            state: ChainState::rigid(&current, q),
            chain: current,
            iterations: IK_MAX_ITERATIONS,
        });
    }
    Err(ChainError::Unreachable {
        iterations: IK_MAX_ITERATIONS,
        translational: e.fixed_rows::<3>(0).norm(),
        rotational: e.fixed_rows::<3>(3).norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn diag_spring(t: f64, r: f64) -> Matrix6<f64> {
        Matrix6::from_diagonal(&Vector6::new(t, t * 1.5, t * 2.0, r, r * 0.7, r * 1.3))
    }

    #[test]
    fn empty_chain_is_identity() {
        let c = KinematicChain::new(vec![]).unwrap();
        let t = forward_kinematics(&c, &ChainState::zeros(&c)).unwrap();
        assert_eq!(t, Transform::identity());
    }

    #[test]
    fn actuator_sets_translation() {
        let c = KinematicChain::new(vec![ChainElement::actuator(JointKind::Prismatic, Axis::X, 100.0, 1e5)]).unwrap();
        assert_eq!((c.n(), c.m()), (0, 1));
        let t = forward_kinematics(&c, &ChainState::zeros(&c)).unwrap();
        assert_eq!(*t.translation(), Vector3::new(100.0, 0.0, 0.0));
    }

    #[test]
    fn quarter_turn_link() {
        let c = KinematicChain::new(vec![
            ChainElement::revolute(Axis::Z),
            ChainElement::rigid(Transform::tx(200.0)),
        ])
        .unwrap();
        let s = ChainState::new(DVector::from_element(1, FRAC_PI_2), DVector::zeros(0));
        let t = forward_kinematics(&c, &s).unwrap();
        assert!((t.translation() - Vector3::new(0.0, 200.0, 0.0)).amax() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let c = KinematicChain::new(vec![ChainElement::revolute(Axis::Z)]).unwrap();
        let s = ChainState::new(DVector::zeros(2), DVector::zeros(0));
        assert!(matches!(
            forward_kinematics(&c, &s),
            Err(ChainError::DimensionMismatch { .. })
        ));
        assert!(jacobians(&c, &s).is_err());
        assert!(force_hessians(&c, &s, &Wrench::zero()).is_err());
    }

    #[test]
    fn prismatic_and_revolute_columns() {
        let c = KinematicChain::new(vec![ChainElement::prismatic(Axis::X)]).unwrap();
        let j = jacobians(&c, &ChainState::zeros(&c)).unwrap();
        assert_eq!(
            j.q.column(0).into_owned(),
            DVector::from_row_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        );

        let c = KinematicChain::new(vec![
            ChainElement::revolute(Axis::Z),
            ChainElement::rigid(Transform::tx(200.0)),
        ])
        .unwrap();
        let j = jacobians(&c, &ChainState::zeros(&c)).unwrap();
        assert_eq!(
            j.q.column(0).into_owned(),
            DVector::from_row_slice(&[0.0, 200.0, 0.0, 0.0, 0.0, 1.0])
        );
    }

    #[test]
    fn springs_are_identity_at_zero() {
        let c = KinematicChain::new(vec![
            ChainElement::rigid(Transform::rz(0.3) * Transform::tx(10.0)),
            ChainElement::spring(diag_spring(1e4, 1e7)),
            ChainElement::revolute(Axis::Y),
            ChainElement::rigid(Transform::tx(50.0)),
            ChainElement::spring(diag_spring(2e4, 3e7)),
        ])
        .unwrap();
        let rigid = KinematicChain::new(vec![
            ChainElement::rigid(Transform::rz(0.3) * Transform::tx(10.0)),
            ChainElement::revolute(Axis::Y),
            ChainElement::rigid(Transform::tx(50.0)),
        ])
        .unwrap();
        let q = DVector::from_element(1, 0.4);
        let a = forward_kinematics(&c, &ChainState::rigid(&c, q.clone())).unwrap();
        let b = forward_kinematics(&rigid, &ChainState::rigid(&rigid, q)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_springs() {
        let mut k = diag_spring(1e4, 1e7);
        k[(0, 1)] = 10.0;
        assert!(matches!(
            KinematicChain::new(vec![ChainElement::spring(k)]),
            Err(ChainError::InvalidElement { index: 0, .. })
        ));
        let mut k = diag_spring(1e4, 1e7);
        k[(2, 2)] = -1.0;
        assert!(KinematicChain::new(vec![ChainElement::spring(k)]).is_err());
        assert!(KinematicChain::new(vec![ChainElement::actuator(JointKind::Prismatic, Axis::X, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn follow_must_reference_defined_coordinate() {
        assert!(KinematicChain::new(vec![ChainElement::revolute_following(Axis::Y, 0, -1.0)]).is_err());
        let c = KinematicChain::new(vec![
            ChainElement::revolute(Axis::Y),
            ChainElement::rigid(Transform::tx(100.0)),
            ChainElement::revolute_following(Axis::Y, 0, -1.0),
        ])
        .unwrap();
        assert_eq!(c.n(), 1);
        // Ry(q) Tx(L) Ry(-q) keeps orientation and moves the tip on a circle.
        let s = ChainState::new(DVector::from_element(1, 0.3), DVector::zeros(0));
        let t = forward_kinematics(&c, &s).unwrap();
        assert!((t.rotation() - nalgebra::Matrix3::identity()).amax() < 1e-15);
        let j = jacobians(&c, &s).unwrap();
        assert!(j.q.fixed_view::<3, 1>(3, 0).amax() < 1e-15);
    }

    #[test]
    fn zero_load_hessians_vanish_exactly() {
        let c = KinematicChain::new(vec![
            ChainElement::revolute(Axis::Z),
            ChainElement::rigid(Transform::tx(120.0)),
            ChainElement::spring(diag_spring(1e4, 1e7)),
            ChainElement::revolute(Axis::X),
        ])
        .unwrap();
        let s = ChainState::new(
            DVector::from_row_slice(&[0.2, -0.4]),
            DVector::from_fn(6, |i, _| 1e-3 * (i as f64 - 2.0)),
        );
        let h = force_hessians(&c, &s, &Wrench::zero()).unwrap();
        for b in [&h.qq, &h.q_theta, &h.theta_q, &h.theta_theta] {
            assert!(b.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let c = KinematicChain::new(vec![
            ChainElement::actuator(JointKind::Prismatic, Axis::X, 30.0, 1e4),
            ChainElement::spring(diag_spring(1e4, 1e7)),
            ChainElement::revolute(Axis::Z),
            ChainElement::revolute(Axis::Y),
            ChainElement::rigid(Transform::tx(150.0) * Transform::rx(0.3)),
            ChainElement::revolute_following(Axis::Y, 1, -1.0),
            ChainElement::spring(diag_spring(2e4, 3e7)),
            ChainElement::revolute(Axis::X),
            ChainElement::rigid(Transform::ty(40.0)),
        ])
        .unwrap();
        let s = ChainState::new(
            DVector::from_row_slice(&[0.2, -0.4, 0.7]),
            DVector::from_fn(13, |i, _| 1e-3 * (i as f64 - 5.0)),
        );
        let w = Wrench::new(Vector3::new(30.0, -12.0, 25.0), Vector3::new(800.0, 1500.0, -400.0));
        let n = c.n();
        let m = c.m();
        let grad = |x: &DVector<f64>| {
            let st = ChainState::new(x.rows(0, n).into_owned(), x.rows(n, m).into_owned());
            let (gq, gt) = force_gradient(&c, &st, &w).unwrap();
            let mut g = DVector::zeros(n + m);
            g.rows_mut(0, n).copy_from(&gq);
            g.rows_mut(n, m).copy_from(&gt);
            g
        };
        let mut x = DVector::zeros(n + m);
        x.rows_mut(0, n).copy_from(&s.q);
        x.rows_mut(n, m).copy_from(&s.theta);
        let h = 1e-6;
        let mut fd: DMatrix<f64> = DMatrix::zeros(n + m, n + m);
        for k in 0..n + m {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            fd.set_column(k, &((grad(&xp) - grad(&xm)) / (2.0 * h)));
        }
        let exact = force_jacobian(&c, &s, &w).unwrap();
        let mut g: DMatrix<f64> = DMatrix::zeros(n + m, n + m);
        g.view_mut((0, 0), (n, n)).copy_from(&exact.qq);
        g.view_mut((0, n), (n, m)).copy_from(&exact.q_theta);
        g.view_mut((n, 0), (m, n)).copy_from(&exact.theta_q);
        g.view_mut((n, n), (m, m)).copy_from(&exact.theta_theta);
        assert!(
            (&g - &fd).amax() / fd.amax() < 1e-6,
            "{}",
            (&g - &fd).amax() / fd.amax()
        );
        let fd = (&fd + fd.transpose()) * 0.5;
        let an = force_hessians(&c, &s, &w).unwrap();
        let mut full: DMatrix<f64> = DMatrix::zeros(n + m, n + m);
        full.view_mut((0, 0), (n, n)).copy_from(&an.qq);
        full.view_mut((0, n), (n, m)).copy_from(&an.q_theta);
        full.view_mut((n, 0), (m, n)).copy_from(&an.theta_q);
        full.view_mut((n, n), (m, m)).copy_from(&an.theta_theta);
        let scale = fd.amax();
        assert!((&full - &fd).amax() / scale < 1e-6, "{}", (&full - &fd).amax() / scale);
        assert_eq!(an.theta_q, an.q_theta.transpose());
    }

    #[test]
    fn ik_round_trip() {
        let c = KinematicChain::new(vec![
            ChainElement::actuator(JointKind::Prismatic, Axis::X, 10.0, 1e4),
            ChainElement::revolute(Axis::Z),
            ChainElement::rigid(Transform::tx(150.0)),
            ChainElement::revolute(Axis::Z),
            ChainElement::rigid(Transform::tx(80.0)),
        ])
        .unwrap();
        let q_star = DVector::from_row_slice(&[0.4, -0.9]);
        let target = forward_kinematics(&c, &ChainState::rigid(&c, q_star.clone())).unwrap();
        // Lock the actuator elsewhere and perturb q; the solver must come back.
        let shifted = c.with_actuated(&[12.0]).unwrap();
        let guess = ChainState::rigid(&c, &q_star + DVector::from_row_slice(&[0.05, -0.03]));
        let sol = rigid_nominal_configuration(&shifted, &target, &guess).unwrap();
        assert!((&sol.state.q - &q_star).amax() < 1e-9);
        assert!((sol.chain.actuated_values()[0] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn ik_out_of_reach() {
        let c = KinematicChain::new(vec![
            ChainElement::revolute(Axis::Z),
            ChainElement::rigid(Transform::tx(100.0)),
        ])
        .unwrap();
        let target = Transform::from_translation(Vector3::new(300.0, 0.0, 0.0));
        let r = rigid_nominal_configuration(&c, &target, &ChainState::zeros(&c));
        assert!(matches!(r, Err(ChainError::Unreachable { .. })));
    }
}
