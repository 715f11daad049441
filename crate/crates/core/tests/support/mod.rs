//! Independent oracles and random inputs shared by the integration suites.
#![allow(dead_code)]

use kinetostat::chain_model::{
    force_gradient, forward_kinematics, ChainElement, ChainState, JointKind, KinematicChain,
};
use kinetostat::geometry::{pose_difference, so3_left_jacobian, Axis, Deflection, Transform, Wrench};
use kinetostat::kinetostatics::{solve_equilibrium, EquilibriumState, SolverOptions};
use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn random_axis(rng: &mut StdRng) -> Axis {
    Axis::ALL[rng.gen_range(0..3)]
}

pub fn random_kind(rng: &mut StdRng) -> JointKind {
    if rng.gen_bool(0.5) {
        JointKind::Revolute
    } else {
        JointKind::Prismatic
    }
}

pub fn random_vec3(rng: &mut StdRng, half_width: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.gen_range(-half_width..half_width))
}

/// Rigid offset with translation components up to `len` mm and a rotation up to about 1.5 rad.
pub fn random_transform(rng: &mut StdRng, len: f64) -> Transform {
    let r = Transform::from_rotation_vector(&random_vec3(rng, 0.9));
    Transform::from_translation(random_vec3(rng, len)).compose(&r)
}

/// Well-conditioned SPD spring: translations 1e3..1e5 N/mm, rotations 1e6..1e8 N·mm/rad.
pub fn random_spring(rng: &mut StdRng) -> Matrix6<f64> {
    let a = Matrix6::from_fn(|_, _| rng.gen_range(-0.4..0.4));
    let core = a * a.transpose() + Matrix6::identity();
    let s = Vector6::from_fn(|i, _| {
        if i < 3 {
            10f64.powf(rng.gen_range(3.0..5.0)).sqrt()
        } else {
            10f64.powf(rng.gen_range(6.0..8.0)).sqrt()
        }
    });
    let d = Matrix6::from_diagonal(&s);
    let k = d * core * d;
    (k + k.transpose()) * 0.5
}

pub struct RandomChain {
    pub chain: KinematicChain,
    pub state: ChainState,
}

/// Random serial chain: an actuator, up to `max_passive` passive joints
/// (sometimes coupled), rigid offsets and one or two 6-dof springs. The state
/// has random passive coordinates and small spring deflections.
pub fn random_chain(rng: &mut StdRng, max_passive: usize) -> RandomChain {
    let mut el = vec![ChainElement::rigid(random_transform(rng, 100.0))];
    let kind = random_kind(rng);
    let kc = match kind {
        JointKind::Prismatic => 10f64.powf(rng.gen_range(3.0..4.5)),
        JointKind::Revolute => 10f64.powf(rng.gen_range(6.0..8.0)),
    };
    el.push(ChainElement::actuator(
        kind,
        random_axis(rng),
        rng.gen_range(-50.0..50.0),
        kc,
    ));
    el.push(ChainElement::rigid(random_transform(rng, 100.0)));
    el.push(ChainElement::spring(random_spring(rng)));
    let n_passive = rng.gen_range(0..=max_passive);
    let mut n = 0;
    let mut kinds = Vec::new();
    for _ in 0..n_passive {
        el.push(ChainElement::rigid(random_transform(rng, 150.0)));
        if n > 0 && kinds[n - 1] == JointKind::Revolute && rng.gen_bool(0.25) {
            el.push(ChainElement::revolute_following(
                random_axis(rng),
                n - 1,
                rng.gen_range(-1.5..1.5),
            ));
        } else {
            let k = random_kind(rng);
            el.push(ChainElement::PassiveJoint {
                kind: k,
                axis: random_axis(rng),
                follows: None,
            });
            kinds.push(k);
            n += 1;
        }
    }
    el.push(ChainElement::rigid(random_transform(rng, 150.0)));
    if rng.gen_bool(0.5) {
        el.push(ChainElement::spring(random_spring(rng)));
        el.push(ChainElement::rigid(random_transform(rng, 60.0)));
    }
    let chain = KinematicChain::new(el).expect("random chain is valid");
    let q = DVector::from_fn(chain.n(), |i, _| match kinds[i] {
        JointKind::Revolute => rng.gen_range(-0.8..0.8),
        JointKind::Prismatic => rng.gen_range(-30.0..30.0),
    });
    let theta = random_theta(rng, &chain);
    RandomChain {
        state: ChainState::new(q, theta),
        chain,
    }
}

/// Small spring deflections: 1e-2 mm or rad for 1-dof springs, 1e-2 mm and 1e-3 rad for 6-dof ones.
pub fn random_theta(rng: &mut StdRng, chain: &KinematicChain) -> DVector<f64> {
    let mut theta = DVector::zeros(chain.m());
    for b in chain.spring_blocks() {
        let d = b.stiffness.nrows();
        for k in 0..d {
            let h = if d == 6 && k >= 3 { 1e-3 } else { 1e-2 };
            theta[b.offset + k] = rng.gen_range(-h..h);
        }
    }
    theta
}

pub fn random_wrench(rng: &mut StdRng, force: f64, moment: f64) -> Wrench {
    Wrench::new(random_vec3(rng, force), random_vec3(rng, moment))
}

/// Translation scale used to make mixed-unit quantities comparable.
pub fn length_scale(chain: &KinematicChain) -> f64 {
    chain.length_scale().max(1.0)
}

/// Central-difference Jacobians `(J_q, J_theta)` of the tool pose: the
/// translation is differenced directly, the rotation through the log of the
/// relative rotation. Steps are `h` times `max(1, |x|)`.
pub fn fd_jacobians(chain: &KinematicChain, state: &ChainState, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let column = |bump: &dyn Fn(&mut ChainState, f64)| -> Vector6<f64> {
        let (mut a, mut b) = (state.clone(), state.clone());
        bump(&mut a, -1.0);
        bump(&mut b, 1.0);
        let ta = forward_kinematics(chain, &a).unwrap();
        let tb = forward_kinematics(chain, &b).unwrap();
        pose_difference(&ta, &tb).unwrap().to_vector()
    };
    let mut jq = DMatrix::zeros(6, chain.n());
    for j in 0..chain.n() {
        let step = h * state.q[j].abs().max(1.0);
        let c = column(&|s: &mut ChainState, sign: f64| s.q[j] += sign * step) / (2.0 * step);
        jq.set_column(j, &c);
    }
    let mut jt = DMatrix::zeros(6, chain.m());
    for j in 0..chain.m() {
        let step = h * state.theta[j].abs().max(1.0);
        let c = column(&|s: &mut ChainState, sign: f64| s.theta[j] += sign * step) / (2.0 * step);
        jt.set_column(j, &c);
    }
    (jq, jt)
}

/// Largest column error with translational rows divided by `len`, relative to the analytic column.
pub fn jacobian_error(analytic: &DMatrix<f64>, fd: &DMatrix<f64>, len: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..analytic.ncols() {
        let scale = |c: DVector<f64>| {
            let mut c = c;
            for i in 0..3 {
                c[i] /= len;
            }
            c
        };
        let a = scale(analytic.column(j).into_owned());
        let f = scale(fd.column(j).into_owned());
        let norm = a.norm();
        if norm > 0.0 {
            worst = worst.max((f - &a).norm() / norm);
        } else {
            worst = worst.max(f.norm());
        }
    }
    worst
}

/// Central-difference derivative of the generalised reactions `(J_q^T W, J_theta^T W)`
/// with respect to `(q, theta)`; row i, column j is `d g_i / d x_j`.
pub fn fd_gradient_derivative(chain: &KinematicChain, state: &ChainState, load: &Wrench, h: f64) -> DMatrix<f64> {
    let n = chain.n();
    let dim = n + chain.m();
    let grad = |s: &ChainState| {
        let (gq, gt) = force_gradient(chain, s, load).unwrap();
        DVector::from_iterator(dim, gq.iter().chain(gt.iter()).copied())
    };
    let mut out = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let (mut a, mut b) = (state.clone(), state.clone());
        let x = if j < n { state.q[j] } else { state.theta[j - n] };
        let step = h * x.abs().max(1.0);
        if j < n {
            a.q[j] -= step;
            b.q[j] += step;
        } else {
            a.theta[j - n] -= step;
            b.theta[j - n] += step;
        }
        out.set_column(j, &((grad(&b) - grad(&a)) / (2.0 * step)));
    }
    out
}

/// Per-coordinate factors that turn a derivative matrix over `(q, theta)`
/// into N·mm units: `len` for prismatic or translational coordinates, 1 otherwise.
pub fn coordinate_scales(chain: &KinematicChain) -> DVector<f64> {
    let len = length_scale(chain);
    let mut s = Vec::new();
    let mut passive = Vec::new();
    let mut virt = Vec::new();
    for e in chain.elements() {
        match e {
            ChainElement::PassiveJoint {
                kind, follows: None, ..
            } => passive.push(*kind),
            ChainElement::ActuatedJoint { kind, .. } => virt.push(*kind),
            ChainElement::VirtualSpring6 { .. } => {
                virt.extend([JointKind::Prismatic; 3]);
                virt.extend([JointKind::Revolute; 3]);
            }
            _ => {}
        }
    }
    for k in passive.iter().chain(virt.iter()) {
        s.push(match k {
            JointKind::Prismatic => len,
            JointKind::Revolute => 1.0,
        });
    }
    DVector::from_vec(s)
}

/// Frobenius error of `a` against `b`, relative to `b`, after scaling both by `s_i s_j`.
pub fn scaled_relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>, s_rows: &DVector<f64>, s_cols: &DVector<f64>) -> f64 {
    let scale = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * s_rows[i] * s_cols[j]);
    let (a, b) = (scale(a), scale(b));
    let denom = b.norm();
    if denom == 0.0 {
        (a - b).norm()
    } else {
        (a - &b).norm() / denom
    }
}

/// `max |a_ij - b_ij| / sqrt(|b_ii b_jj|)`: invariant under a change of units per coordinate.
pub fn normalized_error(a: &Matrix6<f64>, b: &Matrix6<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..6 {
        for j in 0..6 {
            let d = (b[(i, i)] * b[(j, j)]).abs().sqrt();
            worst = worst.max((a[(i, j)] - b[(i, j)]).abs() / d);
        }
    }
    worst
}

/// Stiffness of two springs in series: `(K1^-1 + K2^-1)^-1`.
pub fn series_springs(k1: &Matrix6<f64>, k2: &Matrix6<f64>) -> Matrix6<f64> {
    let c = k1.try_inverse().unwrap() + k2.try_inverse().unwrap();
    c.try_inverse().unwrap()
}

/// Solver settings tight enough that re-solves can be differenced at a 1e-5 step.
pub fn tight_options() -> SolverOptions {
    SolverOptions {
        translational_tol: 1e-11,
        rotational_tol: 1e-13,
        statics_tol: 1e-7,
        max_iterations: 60,
        ..SolverOptions::default()
    }
}

/// Wrench holding the pose `eq.target` displaced by `(dp, dphi)` in an
/// exponential chart centred at the target, with the moment expressed in
/// chart coordinates: `(F, J_l(dphi)^T M)`.
pub fn chart_wrench(
    chain: &KinematicChain,
    eq: &EquilibriumState,
    d: &Vector6<f64>,
    options: &SolverOptions,
) -> Vector6<f64> {
    let t = eq.target.displaced(&Deflection::from_vector(d));
    let sol = solve_equilibrium(chain, &t, &eq.state(), options).expect("re-solve succeeds");
    assert!(sol.converged, "re-solve converged ({:?})", sol.residuals);
    let phi = Vector3::new(d[3], d[4], d[5]);
    let m = so3_left_jacobian(&phi).transpose() * sol.load.moment;
    Vector6::new(sol.load.force.x, sol.load.force.y, sol.load.force.z, m.x, m.y, m.z)
}

/// Derivative of the equilibrium wrench with respect to the chart coordinates
/// of the tool pose, by central differences with step `h` (mm and rad).
pub fn fd_loaded_stiffness(
    chain: &KinematicChain,
    eq: &EquilibriumState,
    h: f64,
    options: &SolverOptions,
) -> Matrix6<f64> {
    let mut k = Matrix6::zeros();
    for j in 0..6 {
        let mut d = Vector6::zeros();
        d[j] = h;
        let plus = chart_wrench(chain, eq, &d, options);
        let minus = chart_wrench(chain, eq, &(-d), options);
        k.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    k
}

/// Cantilever tip deflection under a transverse tip force: `FL^3/(3EI)`.
pub fn cantilever_bending(force: f64, length: f64, e: f64, i: f64) -> f64 {
    force * length.powi(3) / (3.0 * e * i)
}
