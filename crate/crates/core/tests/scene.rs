use std::collections::HashSet;
use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3};
use pbd_core::kinematics::{ArmModel, DhRow, JointConfig, JointLimit, LinkCapsule};
use pbd_core::scene::{
    auto_calibrate, calibration_error, collision_check, segment_box_distance, Collision, RigidTransform, SceneBox,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One unit lever along x at q = 0; every other joint is a zero-length
/// revolute, so all frames are exact at the zero configuration.
fn lever_arm(radius: f64) -> ArmModel {
    let mut rows = vec![DhRow::new(0.0, 0.0, 1.0, 0.0)];
    rows.extend(std::iter::repeat_n(DhRow::new(0.0, 0.0, 0.0, 0.0), 5));
    let limits = vec![JointLimit { min: -PI, max: PI }; 6];
    let capsule = LinkCapsule {
        link: 1,
        radius,
        start: Vector3::new(-1.0, 0.0, 0.0),
        end: Vector3::zeros(),
    };
    ArmModel::new(rows, limits, RigidTransform::identity(), vec![capsule], None).unwrap()
}

fn point_box_distance(p: &Vector3<f64>, center: &Vector3<f64>, half: &Vector3<f64>) -> f64 {
    let r = p - center;
    Vector3::from_fn(|k, _| (r[k].abs() - half[k]).max(0.0)).norm()
}

#[test]
fn overlapping_box_is_reported() {
    let arm = lever_arm(0.25);
    let b = SceneBox::new("mid", Vector3::new(0.5, 0.0, 0.0), Vector3::new(0.1, 0.1, 0.1));
    let hits = collision_check(&arm, &JointConfig::zeros(), &[b]);
    assert_eq!(hits, vec![Collision { link: 1, box_id: "mid".into() }]);
}

#[test]
fn tangent_box_is_not_reported() {
    // Segment (0,0,0)-(1,0,0); box face at y = 0.25, so the distance is
    // exactly the radius.
    let arm = lever_arm(0.25);
    let half = Vector3::new(0.25, 0.25, 0.25);
    let tangent = SceneBox::new("tangent", Vector3::new(0.5, 0.5, 0.0), half);
    assert_eq!(segment_box_distance(&Vector3::zeros(), &Vector3::x(), &tangent.center, &half), 0.25);
    assert!(collision_check(&arm, &JointConfig::zeros(), &[tangent]).is_empty());

    let closer = SceneBox::new("closer", Vector3::new(0.5, 0.4921875, 0.0), half);
    assert_eq!(collision_check(&arm, &JointConfig::zeros(), &[closer]).len(), 1);
}

#[test]
fn far_box_is_ignored_on_real_arm() {
    let arm = ArmModel::ur10();
    let b = SceneBox::new("far", Vector3::new(10.0, 0.0, 0.0), Vector3::new(0.5, 0.5, 0.5));
    assert!(collision_check(&arm, &arm.home(), &[b]).is_empty());
}

#[test]
fn box_on_link_midpoint_is_reported() {
    let arm = ArmModel::ur10();
    let q = arm.home();
    let frames = arm.frames(&q);
    for c in arm.capsules() {
        let mid = frames[c.link].transform_point(&((c.start + c.end) * 0.5).into()).coords;
        let b = SceneBox::new("probe", mid, Vector3::new(0.01, 0.01, 0.01));
        let hits = collision_check(&arm, &q, &[b]);
        assert!(hits.contains(&Collision { link: c.link, box_id: "probe".into() }), "link {}", c.link);
    }
}

#[test]
fn segment_distance_matches_dense_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples = 20_000;
    for _ in 0..200 {
        let p0 = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let p1 = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let c = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5));
        let h = Vector3::from_fn(|_, _| rng.random_range(0.05..0.4));
        let exact = segment_box_distance(&p0, &p1, &c, &h);
        let brute = (0..=samples)
            .map(|i| point_box_distance(&(p0 + (p1 - p0) * (i as f64 / samples as f64)), &c, &h))
            .fold(f64::INFINITY, f64::min);
        let step = (p1 - p0).norm() / samples as f64;
        assert!(exact <= brute + 1e-12, "exact {exact} brute {brute}");
        assert!(brute - exact <= step, "exact {exact} brute {brute}");
    }
}

#[test]
fn collisions_are_monotone_in_radius() {
    let arm = ArmModel::ur10();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let mut q = JointConfig::zeros();
        for (i, l) in arm.limits().iter().enumerate() {
            q[i] = rng.random_range(l.min..l.max);
        }
        let boxes: Vec<SceneBox> = (0..6)
            .map(|i| {
                SceneBox::new(
                    format!("b{i}"),
                    Vector3::from_fn(|_, _| rng.random_range(-1.2..1.2)),
                    Vector3::from_fn(|_, _| rng.random_range(0.02..0.3)),
                )
            })
            .collect();
        let grow = rng.random_range(1.0..3.0);
        let bigger = arm
            .with_capsules(arm.capsules().iter().map(|c| LinkCapsule { radius: c.radius * grow, ..*c }).collect())
            .unwrap();
        let small: HashSet<_> = collision_check(&arm, &q, &boxes).into_iter().map(|c| (c.link, c.box_id)).collect();
        let large: HashSet<_> = collision_check(&bigger, &q, &boxes).into_iter().map(|c| (c.link, c.box_id)).collect();
        assert!(small.is_subset(&large));
    }
}

#[test]
fn calibration_error_on_known_radius() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let reference = Vector3::new(0.4, -0.1, 0.2);
    let radii: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..0.05)).collect();
    let measured: Vec<Vector3<f64>> = radii
        .iter()
        .map(|r| {
            let dir = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
            reference + dir * *r
        })
        .collect();
    let (mean, _) = calibration_error(&measured, &reference).unwrap();
    let expected = radii.iter().sum::<f64>() / radii.len() as f64;
    assert!((mean - expected).abs() < 1e-12);
}

fn arb_transform() -> impl Strategy<Value = RigidTransform> {
    (proptest::array::uniform3(-2.0f64..2.0), proptest::array::uniform3(-PI..PI)).prop_map(|(t, e)| {
        RigidTransform::new(Vector3::from(t), UnitQuaternion::from_euler_angles(e[0], e[1], e[2]))
    })
}

proptest! {
    #[test]
    fn calibration_is_equivariant(ctrl in arb_transform(), offset in arb_transform(), r in arb_transform()) {
        let rot = RigidTransform::new(Vector3::zeros(), r.rotation);
        let lhs = auto_calibrate(&rot.compose(&ctrl), &offset);
        let rhs = rot.compose(&auto_calibrate(&ctrl, &offset));
        prop_assert!((lhs.translation - rhs.translation).norm() < 1e-12);
        prop_assert!(lhs.rotation.angle_to(&rhs.rotation) < 1e-9);
    }

    #[test]
    fn transforms_stay_unit(a in arb_transform(), b in arb_transform()) {
        for t in [a.compose(&b), a.invert(), auto_calibrate(&a, &b), a.compose(&a.invert())] {
            prop_assert!((t.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }
        let id = a.compose(&a.invert());
        prop_assert!(id.translation.norm() < 1e-12);
        prop_assert!(id.rotation.angle() < 1e-7);
    }
}
