use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3};
use pbd_core::kinematics::Pose;
use pbd_core::quat;
use pbd_core::trajectory::{
    map_hand_orientation, redraw_from, resample_phase, OrientationMode, Recorder, RecorderConfig, Trajectory,
    TrajectoryError, TrajectoryStore, Waypoint,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn traj(points: impl IntoIterator<Item = Pose>) -> Trajectory {
    Trajectory::from_poses("t", 0.2, OrientationMode::Captured, points).unwrap()
}

fn arc_point(r: f64, theta: f64) -> Vector3<f64> {
    Vector3::new(0.5 + r * theta.cos(), r * theta.sin(), 0.3)
}

#[test]
fn resampled_arc_stays_within_sagitta() {
    let r = 0.25;
    let n_demo = 12;
    let sweep = PI;
    let step = sweep / (n_demo - 1) as f64;
    let demo = traj((0..n_demo).map(|k| Pose::tool_down(arc_point(r, k as f64 * step))));
    let sagitta = r * (1.0 - (step / 2.0).cos());

    let out = resample_phase(demo.waypoints(), 101).unwrap();
    assert_eq!(out.len(), 101);
    let center = Vector3::new(0.5, 0.0, 0.3);
    let worst = out.iter().map(|(_, p)| (r - (p.position - center).norm()).abs()).fold(0.0, f64::max);
    assert!(worst <= sagitta + 1e-12, "worst {worst} sagitta {sagitta}");
    // the bound is attained near chord midpoints, so it is not vacuous
    assert!(worst > 0.5 * sagitta);
}

#[test]
fn resampled_line_is_collinear() {
    let a = Vector3::new(0.4, -0.2, 0.1);
    let dir = Vector3::new(0.3, 0.5, 0.2).normalize();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // irregular progress along the line
    let mut s = 0.0;
    let demo = traj((0..15).map(|_| {
        s += rng.random_range(0.0..0.05);
        Pose::tool_down(a + dir * s)
    }));
    for n in [2, 7, 64, 333] {
        for (_, p) in resample_phase(demo.waypoints(), n).unwrap() {
            assert!((p.position - a).cross(&dir).norm() <= 1e-9);
        }
    }
}

#[test]
fn resample_rejects_short_input() {
    let one = traj([Pose::tool_down(Vector3::zeros())]);
    assert!(matches!(resample_phase(one.waypoints(), 5), Err(TrajectoryError::TooShort { .. })));
}

#[test]
fn resample_is_idempotent_on_uniform_trajectories() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in [2, 3, 17, 100] {
        let demo = traj((0..n).map(|_| {
            let p = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let q = UnitQuaternion::from_euler_angles(rng.random(), rng.random(), rng.random());
            Pose::new(p, q)
        }));
        let out = resample_phase(demo.waypoints(), n).unwrap();
        for ((_, p), w) in out.iter().zip(demo.waypoints()) {
            assert!((p.position - w.pose.position).amax() <= 1e-12);
            assert!(quat::angle_between(&p.orientation, &w.pose.orientation) <= 1e-12);
        }
    }
}

#[test]
fn store_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let store = TrajectoryStore::open(dir.path()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let original = traj((0..40).map(|_| {
        let p = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0) / 3.0);
        let q = UnitQuaternion::from_euler_angles(rng.random(), rng.random(), rng.random());
        Pose::new(p, q)
    }))
    .with_id("");

    let id = store.save(&original).unwrap();
    let loaded = store.load(&id).unwrap();
    assert_eq!(loaded.id(), id);
    assert_eq!(loaded.sample_period().to_bits(), original.sample_period().to_bits());
    assert_eq!(loaded.orientation_mode(), original.orientation_mode());
    for (a, b) in loaded.waypoints().iter().zip(original.waypoints()) {
        assert_eq!(a.t.to_bits(), b.t.to_bits());
        for k in 0..3 {
            assert_eq!(a.pose.position[k].to_bits(), b.pose.position[k].to_bits());
        }
        assert_eq!(quat::to_wxyz(&a.pose.orientation), quat::to_wxyz(&b.pose.orientation));
    }
    assert_eq!(loaded, original.clone().with_id(id.clone()));

    let second = store.save(&original).unwrap();
    assert_ne!(id, second);
    assert_eq!(store.list().unwrap(), vec![id.clone(), second]);

    store.delete(&id).unwrap();
    assert!(matches!(store.load(&id), Err(TrajectoryError::NotFound(_))));
    assert!(matches!(store.delete(&id), Err(TrajectoryError::NotFound(_))));
    assert!(matches!(store.load("../escape"), Err(TrajectoryError::NotFound(_))));
}

#[test]
fn corrupt_document_is_a_storage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let store = TrajectoryStore::open(dir.path()).unwrap();
    std::fs::write(store.path_of("bad"), "{\"id\": \"bad\"").unwrap();
    assert!(matches!(store.load("bad"), Err(TrajectoryError::StorageFailure(_))));
}

#[test]
fn recorder_rejects_samples_when_inactive() {
    let mut rec = Recorder::new(RecorderConfig::default());
    let p = Pose::tool_down(Vector3::zeros());
    assert!(matches!(rec.record_sample(p, 0.0), Err(TrajectoryError::RecorderInactive)));
}

fn arb_pose() -> impl Strategy<Value = Pose> {
    (proptest::array::uniform3(-1.0f64..1.0), proptest::array::uniform3(-PI..PI))
        .prop_map(|(p, e)| Pose::new(Vector3::from(p), UnitQuaternion::from_euler_angles(e[0], e[1], e[2])))
}

proptest! {
    #[test]
    fn recorded_timestamps_lie_on_the_grid(gaps in proptest::collection::vec(0.0f64..0.5, 1..80)) {
        let mut rec = Recorder::new(RecorderConfig::default());
        rec.start();
        let mut t = 0.0;
        for g in gaps {
            t += g;
            rec.record_sample(Pose::tool_down(Vector3::zeros()), t).unwrap();
        }
        let out = rec.finish("r").unwrap();
        for (i, w) in out.waypoints().iter().enumerate() {
            prop_assert_eq!(w.t.to_bits(), (i as f64 * 0.2).to_bits());
        }
    }

    #[test]
    fn redraw_keeps_prefix(
        poses in proptest::collection::vec(arb_pose(), 1..30),
        fresh in proptest::collection::vec(arb_pose(), 0..20),
        cursor_seed in any::<prop::sample::Index>(),
    ) {
        let original = traj(poses);
        let cursor = cursor_seed.index(original.len());
        let edited = redraw_from(&original, cursor, &fresh).unwrap();
        prop_assert_eq!(edited.len(), cursor + 1 + fresh.len());
        prop_assert_eq!(&edited.waypoints()[..=cursor], &original.waypoints()[..=cursor]);
        for (k, w) in edited.waypoints()[cursor + 1..].iter().enumerate() {
            prop_assert_eq!(w.pose, fresh[k]);
            prop_assert_eq!(w.t, (cursor + 1 + k) as f64 * 0.2);
        }
        let bad = redraw_from(&original, original.len(), &fresh);
        prop_assert!(matches!(bad, Err(TrajectoryError::IndexOutOfRange { .. })), "expected IndexOutOfRange");
    }

    #[test]
    fn mapped_orientation_is_unit(w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
        prop_assume!(w * w + x * x + y * y + z * z > 1e-6);
        let raw = UnitQuaternion::new_normalize(nalgebra::Quaternion::new(w, x, y, z));
        for mode in [OrientationMode::Fixed, OrientationMode::Captured] {
            let q = map_hand_orientation(&raw, mode);
            prop_assert!((q.quaternion().norm() - 1.0).abs() <= 1e-9);
        }
        prop_assert_eq!(map_hand_orientation(&raw, OrientationMode::Fixed), quat::tool_down());
    }
}

#[test]
fn waypoint_json_is_flat() {
    let w = Waypoint { t: 0.4, pose: Pose::tool_down(Vector3::new(1.0, 2.0, 3.0)) };
    let v: serde_json::Value = serde_json::to_value(w).unwrap();
    assert_eq!(v["t"], 0.4);
    assert!(v.get("position").is_some());
    assert!(v.get("orientation").is_some());
}
