use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Vector3};
use pbd_core::kinematics::{ArmModel, DhRow, IkError, IkParams, JointConfig, Pose, DOF};
use pbd_core::quat;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook DH matrix, written out entry by entry.
fn dh_matrix(row: &DhRow, q: f64) -> Matrix4<f64> {
    let (st, ct) = (row.theta_offset + q).sin_cos();
    let (sa, ca) = row.alpha.sin_cos();
    #[rustfmt::skip]
    let m = Matrix4::new(
        ct, -st * ca,  st * sa, row.a * ct,
        st,  ct * ca, -ct * sa, row.a * st,
        0.0,      sa,       ca, row.d,
        0.0,     0.0,      0.0, 1.0,
    );
    m
}

fn chain_oracle(arm: &ArmModel, q: &JointConfig) -> Matrix4<f64> {
    let mut t = arm.base().to_isometry().to_homogeneous();
    for (i, row) in arm.rows().iter().enumerate() {
        t *= dh_matrix(row, q[i]);
    }
    t
}

fn random_config(arm: &ArmModel, rng: &mut impl Rng) -> JointConfig {
    let mut q = JointConfig::zeros();
    for (i, l) in arm.limits().iter().enumerate() {
        q[i] = rng.random_range(l.min..l.max);
    }
    q
}

#[test]
fn zero_pose_matches_matrix_chain() {
    let arm = ArmModel::ur10();
    let q = JointConfig::zeros();
    let oracle = chain_oracle(&arm, &q);
    let fk = arm.forward_kinematics(&q);
    let p = oracle.fixed_view::<3, 1>(0, 3).into_owned();
    assert!((fk.position - p).norm() < 1e-12);
    // Closed form for this geometry at q = 0: (a2 + a3, −(d4 + d6), d1 − d5).
    let expected = Vector3::new(-0.612 - 0.5723, -(0.163941 + 0.0922), 0.1273 - 0.1157);
    assert!((fk.position - expected).norm() < 1e-12);
    let r: Matrix3<f64> = oracle.fixed_view::<3, 3>(0, 0).into_owned();
    assert!((fk.orientation.to_rotation_matrix().matrix() - r).amax() < 1e-12);
}

#[test]
fn random_poses_match_matrix_chain() {
    let arm = ArmModel::ur10();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let q = random_config(&arm, &mut rng);
        let oracle = chain_oracle(&arm, &q);
        let fk = arm.forward_kinematics(&q);
        assert!((fk.position - oracle.fixed_view::<3, 1>(0, 3)).norm() < 1e-12);
        let r: Matrix3<f64> = oracle.fixed_view::<3, 3>(0, 0).into_owned();
        assert!((fk.orientation.to_rotation_matrix().matrix() - r).amax() < 1e-12);
    }
}

/// Central finite differences of FK: linear rows from the position,
/// angular rows from the relative rotation vector.
fn fd_jacobian(arm: &ArmModel, q: &JointConfig, h: f64) -> nalgebra::Matrix6<f64> {
    let mut jac = nalgebra::Matrix6::zeros();
    for i in 0..DOF {
        let mut qp = *q;
        let mut qm = *q;
        qp[i] += h;
        qm[i] -= h;
        let (pp, pm) = (arm.forward_kinematics(&qp), arm.forward_kinematics(&qm));
        let lin = (pp.position - pm.position) / (2.0 * h);
        let ang = quat::rotation_error(&pp.orientation, &pm.orientation) / (2.0 * h);
        jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        jac.fixed_view_mut::<3, 1>(3, i).copy_from(&ang);
    }
    jac
}

fn max_relative_error(a: &nalgebra::Matrix6<f64>, b: &nalgebra::Matrix6<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

#[test]
fn jacobian_matches_finite_differences() {
    let arm = ArmModel::ur10();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let q = random_config(&arm, &mut rng);
        worst = worst.max(max_relative_error(&arm.jacobian(&q), &fd_jacobian(&arm, &q, 1e-6)));
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn ik_round_trip_random_configs() {
    let arm = ArmModel::ur10();
    let params = IkParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let q_star = random_config(&arm, &mut rng);
        let target = arm.forward_kinematics(&q_star);
        let mut seed = q_star;
        for i in 0..DOF {
            seed[i] += rng.random_range(-0.1..0.1);
        }
        arm.clamp_to_limits(&mut seed);
        let q = arm.solve_ik(&target, &seed, &params).expect("converges");
        let fk = arm.forward_kinematics(&q);
        assert!((fk.position - target.position).norm() <= 1e-4);
        assert!(fk.orientation_error(&target) <= 1e-3);
        assert!(arm.within_limits(&q));
    }
}

#[test]
fn short_segment_approaches_target() {
    let arm = ArmModel::ur10();
    let q0 = arm.home();
    let start = arm.forward_kinematics(&q0);
    let target = Pose::new(start.position + Vector3::new(0.02, 0.0, 0.0), start.orientation);
    let chain = arm.solve_ik_segment(&q0, &target, 5, &IkParams::default()).unwrap();
    assert_eq!(chain.len(), 5);
    let dists: Vec<f64> = chain
        .iter()
        .map(|q| (arm.forward_kinematics(q).position - target.position).norm())
        .collect();
    for w in dists.windows(2) {
        assert!(w[1] < w[0], "{dists:?}");
    }
    assert!(dists[4] <= 1e-4);
}

#[test]
fn segment_continuity_bound() {
    let arm = ArmModel::ur10();
    let params = IkParams::default();
    let q0 = arm.home();
    let start = arm.forward_kinematics(&q0);
    let target = Pose::tool_down(start.position + Vector3::new(-0.1, 0.2, -0.15));
    let chain = arm.solve_ik_segment(&q0, &target, 8, &params).unwrap();
    let bound = params.step_clamp * params.max_iterations as f64;
    let mut prev = q0;
    for q in &chain {
        assert!(q.max_abs_diff(&prev) <= bound);
        assert!(arm.within_limits(q));
        prev = *q;
    }
}

#[test]
fn unreachable_ball() {
    let arm = ArmModel::ur10();
    for dir in [Vector3::x(), Vector3::y(), -Vector3::z()] {
        let target = Pose::tool_down(dir * (arm.reach() * 1.01));
        assert!(matches!(
            arm.solve_ik(&target, &arm.home(), &IkParams::default()),
            Err(IkError::Unreachable { .. })
        ));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ik_output_respects_limits(
        x in 0.3f64..0.9, y in -0.5f64..0.5, z in 0.05f64..0.8,
    ) {
        let arm = ArmModel::ur10();
        let target = Pose::tool_down(Vector3::new(x, y, z));
        if let Ok(q) = arm.solve_ik(&target, &arm.home(), &IkParams::default()) {
            prop_assert!(arm.within_limits(&q));
        }
    }

    #[test]
    fn jacobian_angular_columns_are_unit(q in proptest::array::uniform6(-PI..PI)) {
        let arm = ArmModel::ur10();
        let jac = arm.jacobian(&JointConfig(q));
        for i in 0..DOF {
            prop_assert!((jac.fixed_view::<3, 1>(3, i).norm() - 1.0).abs() < 1e-12);
        }
    }
}
