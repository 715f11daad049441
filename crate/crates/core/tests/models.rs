mod support;

use std::path::Path;

use kinetostat::chain_model::forward_kinematics;
use kinetostat::config::ModelConfig;
use kinetostat::geometry::{so3_left_jacobian, Deflection, Wrench};
use kinetostat::kinetostatics::{
    deflection_under_load, manipulator_equilibrium, manipulator_stiffness_loaded, manipulator_stiffness_unloaded,
    SolverOptions,
};
use kinetostat::link_compliance::beam_compliance;
use kinetostat::models::{
    leg_frame, leg_inverse_kinematics, parallelogram_stiffness, Architecture, Manipulator, Orthoglide, OrthoglideParams,
};
use nalgebra::{Matrix6, Vector3, Vector6};
use rand::Rng;
use support::*;

const ARCHES: [Architecture; 2] = [Architecture::Puu, Architecture::Prpar];

fn bundled(name: &str) -> ModelConfig {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("models").join(name);
    ModelConfig::from_path(&p).unwrap()
}

fn model(arch: Architecture) -> Orthoglide {
    Orthoglide::new(OrthoglideParams::default(), arch).unwrap()
}

#[test]
fn bundled_configs_document_default_params() {
    for (file, arch) in [
        ("orthoglide-puu.cfg", Architecture::Puu),
        ("orthoglide-prpar.cfg", Architecture::Prpar),
    ] {
        let c = bundled(file);
        let Manipulator::Orthoglide(o) = &c.manipulator else {
            panic!("{file} is not an orthoglide")
        };
        assert_eq!(o.architecture, arch);
        assert_eq!(o.params, OrthoglideParams::default(), "{file}");
        assert_eq!(c.solver, SolverOptions::default());
        let expect_n = if arch == Architecture::Puu { 4 } else { 3 };
        for s in c.summary().unwrap() {
            assert_eq!((s.n, s.m), (expect_n, 13));
        }
    }
}

fn random_point(rng: &mut rand::rngs::StdRng) -> Vector3<f64> {
    random_vec3(rng, 120.0)
}

#[test]
fn numeric_posture_matches_closed_form() {
    let mut r = rng(11);
    let params = OrthoglideParams::default();
    for arch in ARCHES {
        for _ in 0..10 {
            let p = random_point(&mut r);
            let posture = model(arch).posture(&p).unwrap();
            for (leg, (chain, state)) in posture.chains().iter().zip(posture.states()).enumerate() {
                let s = leg_inverse_kinematics(&params, leg, &p).unwrap();
                let expect = match arch {
                    Architecture::Puu => vec![s.q1, s.q2, s.q3, s.q4],
                    Architecture::Prpar => vec![s.q1, s.q2, s.q4],
                };
                for (a, b) in state.q.iter().zip(&expect) {
                    assert!((a - b).abs() <= 1e-9, "leg {leg}: {a} vs {b}");
                }
                assert!((chain.actuated_values()[0] - s.actuator).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn rigid_legs_are_purely_translational() {
    let mut r = rng(12);
    for arch in ARCHES {
        for _ in 0..10 {
            let p = random_point(&mut r);
            let posture = model(arch).posture(&p).unwrap();
            for (leg, (chain, state)) in posture.chains().iter().zip(posture.states()).enumerate() {
                let q = &state.q;
                match arch {
                    Architecture::Puu => {
                        assert!((q[2] + q[1]).abs() <= 1e-12 && (q[3] + q[0]).abs() <= 1e-12, "{q}");
                    }
                    Architecture::Prpar => assert!((q[2] + q[0]).abs() <= 1e-12, "{q}"),
                }
                let t = forward_kinematics(chain, state).unwrap();
                assert!((t.rotation() - leg_frame(leg)).amax() <= 1e-12);
                assert!((t.translation() - p).amax() <= 1e-9);
            }
        }
    }
}

#[test]
fn isotropic_at_q0_for_random_symmetric_params() {
    let mut r = rng(13);
    for _ in 0..6 {
        let mut params = OrthoglideParams::default();
        params.leg_length = r.gen_range(200.0..400.0);
        params.bar = params.bar.scaled_section(r.gen_range(0.5..2.0));
        params.bar_separation = r.gen_range(20.0..80.0);
        params.foot = params.foot.with_length(r.gen_range(40.0..120.0));
        params.actuator_stiffness = r.gen_range(1e3..1e4);
        for arch in ARCHES {
            let m = Orthoglide::new(params.clone(), arch).unwrap();
            let k = manipulator_stiffness_unloaded(&m.posture(&Vector3::zeros()).unwrap())
                .unwrap()
                .total;
            let ct = k.translational_compliance().unwrap();
            for i in 0..3 {
                assert!((ct[(i, i)] - ct[(0, 0)]).abs() <= 1e-8 * ct[(0, 0)]);
                for j in 0..3 {
                    if i != j {
                        assert!(ct[(i, j)].abs() <= 1e-8 * ct[(0, 0)]);
                    }
                }
            }
        }
    }
}

#[test]
fn parallelogram_dominates_limb_at_reference_points() {
    let params = OrthoglideParams::default();
    let limb = beam_compliance(&params.limb()).unwrap().to_stiffness().unwrap()[(4, 4)];
    for name in ["Q0", "Q1", "Q2"] {
        let p = params.point(name).unwrap();
        for leg in 0..3 {
            let s = leg_inverse_kinematics(&params, leg, &p).unwrap();
            let k = parallelogram_stiffness(&params.bar(), params.bar_separation, s.q2).unwrap();
            assert!(k.0[(4, 4)] > 5.0 * limb, "{name} leg {leg}");
        }
        let rot = |arch| {
            manipulator_stiffness_unloaded(&model(arch).posture(&p).unwrap())
                .unwrap()
                .total
                .rotational_compliance()
                .unwrap()
        };
        let (u, r) = (rot(Architecture::Puu), rot(Architecture::Prpar));
        for i in 0..3 {
            assert!(r[(i, i)] < u[(i, i)], "{name}");
        }
    }
}

#[test]
fn limb_share_of_compliance_scales_inversely_with_area() {
    // Actuator and foot sit in series with the limb, so only the limb term halves.
    let c = |s: f64| {
        let mut params = OrthoglideParams::default();
        params.bar = params.bar.scaled_section(s);
        let m = Orthoglide::new(params, Architecture::Puu).unwrap();
        manipulator_stiffness_unloaded(&m.posture(&Vector3::zeros()).unwrap())
            .unwrap()
            .total
            .translational_compliance()
            .unwrap()[(0, 0)]
    };
    let (c1, c2, c4) = (c(1.0), c(2.0), c(4.0));
    assert!(((c1 - c2) - 2.0 * (c2 - c4)).abs() <= 1e-9 * c1);
}

#[test]
fn zero_deflection_is_trivial() {
    for arch in ARCHES {
        let posture = model(arch).posture(&Vector3::new(30.0, -20.0, 10.0)).unwrap();
        let eq = manipulator_equilibrium(&posture, &Deflection::zero(), &SolverOptions::default()).unwrap();
        assert!(eq.total.is_zero());
        assert!(eq.per_chain.iter().all(|e| e.iterations == 1 && e.converged));
        let (k, _) = manipulator_stiffness_loaded(&posture, &Deflection::zero(), &SolverOptions::default()).unwrap();
        assert_eq!(k.total, manipulator_stiffness_unloaded(&posture).unwrap().total);
    }
}

#[test]
fn aggregate_loaded_stiffness_matches_total_wrench_derivative() {
    let opts = tight_options();
    let centre = Vector6::new(0.5, -0.3, 0.4, 0.0, 0.0, 0.0);
    let h = 1e-5;
    for arch in ARCHES {
        let posture = model(arch).posture(&Vector3::new(60.0, 40.0, 90.0)).unwrap();
        let (k, _) = manipulator_stiffness_loaded(&posture, &Deflection::from_vector(&centre), &opts).unwrap();
        let wrench = |d: Vector6<f64>| {
            let eq = manipulator_equilibrium(&posture, &Deflection::from_vector(&(centre + d)), &opts).unwrap();
            let phi = Vector3::new(d[3], d[4], d[5]);
            let m = so3_left_jacobian(&phi).transpose() * eq.total.moment;
            Vector6::new(eq.total.force.x, eq.total.force.y, eq.total.force.z, m.x, m.y, m.z)
        };
        let mut fd = Matrix6::zeros();
        for j in 0..6 {
            let mut d = Vector6::zeros();
            d[j] = h;
            fd.set_column(j, &((wrench(d) - wrench(-d)) / (2.0 * h)));
        }
        let err = normalized_error(&k.total.0, &fd);
        assert!(err <= 1e-4, "{arch:?}: {err:e}");
    }
}

#[test]
fn deflection_under_load_reproduces_the_load() {
    let o = SolverOptions::default();
    for arch in ARCHES {
        let posture = model(arch).posture(&Vector3::new(-40.0, 20.0, 70.0)).unwrap();
        let load = Wrench::new(Vector3::new(300.0, -150.0, 80.0), Vector3::new(2e3, 0.0, -1e3));
        let eq = deflection_under_load(&posture, &load, &o).unwrap();
        let r = load - eq.total;
        assert!(r.force.amax() <= 1e-6 && r.moment.amax() <= 1e-6, "{r:?}");
        // Small loads deflect as the unloaded compliance predicts.
        let small = Wrench::new(Vector3::new(1.0, 0.5, -0.5), Vector3::zeros());
        let d = deflection_under_load(&posture, &small, &o)
            .unwrap()
            .deflection
            .to_vector();
        let c = manipulator_stiffness_unloaded(&posture)
            .unwrap()
            .total
            .compliance()
            .unwrap();
        let lin = c * small.to_vector();
        assert!((d - lin).fixed_rows::<3>(0).norm() <= 1e-3 * lin.fixed_rows::<3>(0).norm());
    }
}
