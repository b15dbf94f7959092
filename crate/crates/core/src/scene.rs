//! Workspace model: rigid transforms, auto-calibration, box obstacles and
//! capsule-versus-box collision warnings.

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{ArmModel, JointConfig};
use crate::quat;

/// Bundled desk-scale workspace.
pub const DESK_SCENE_JSON: &str = include_str!("../assets/desk_scene.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    #[serde(with = "quat::xyz")]
    pub translation: Vector3<f64>,
    #[serde(with = "quat::wxyz")]
    pub rotation: UnitQuaternion<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(translation: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Self { translation, rotation }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), UnitQuaternion::identity())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(translation, UnitQuaternion::identity())
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            translation: self.translation + self.rotation * other.translation,
            rotation: UnitQuaternion::new_normalize((self.rotation * other.rotation).into_inner()),
        }
    }

    pub fn invert(&self) -> RigidTransform {
        let rotation = self.rotation.inverse();
        RigidTransform { translation: -(rotation * self.translation), rotation }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.translation + self.rotation * p
    }
}

/// Places the robot base from the tracked controller pose and the fixed
/// controller-to-base mount offset.
pub fn auto_calibrate(controller: &RigidTransform, offset: &RigidTransform) -> RigidTransform {
    controller.compose(offset)
}

/// Axis-aligned box obstacle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub id: String,
    #[serde(with = "quat::xyz")]
    pub center: Vector3<f64>,
    #[serde(with = "quat::xyz")]
    pub half_extents: Vector3<f64>,
    #[serde(default)]
    pub label: String,
}

impl SceneBox {
    pub fn new(id: impl Into<String>, center: Vector3<f64>, half_extents: Vector3<f64>) -> Self {
        Self { id: id.into(), center, half_extents, label: String::new() }
    }
}

/// Virtual marker placed by the operator to condition a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    #[serde(with = "quat::xyz")]
    pub position: Vector3<f64>,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    #[serde(default)]
    pub boxes: Vec<SceneBox>,
    #[serde(default)]
    pub calibration_offset: RigidTransform,
}

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("scene file: field `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("scene file: field `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("no measurements")]
    Empty,
}

impl Scene {
    pub fn validate(&self) -> Result<(), SceneError> {
        for (i, b) in self.boxes.iter().enumerate() {
            if !(b.half_extents.iter().all(|h| *h > 0.0)) {
                return Err(SceneError::Invalid {
                    field: format!("boxes[{i}].half_extents"),
                    message: "half extents must be > 0".into(),
                });
            }
            if self.boxes[..i].iter().any(|o| o.id == b.id) {
                return Err(SceneError::Invalid {
                    field: format!("boxes[{i}].id"),
                    message: format!("duplicate box id `{}`", b.id),
                });
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scene: Scene = serde_path_to_error::deserialize(de).map_err(|e| SceneError::Parse {
            field: e.path().to_string(),
            message: e.into_inner().to_string(),
        })?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn desk() -> Self {
        Self::from_json(DESK_SCENE_JSON).expect("bundled scene is valid")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serialises")
    }
}

/// Euclidean distance from the segment `[p0, p1]` to an axis-aligned box.
///
/// The squared distance is piecewise quadratic in the segment parameter,
/// with breaks where the segment crosses a slab boundary. Each piece is
/// minimised in closed form.
pub fn segment_box_distance(p0: &Vector3<f64>, p1: &Vector3<f64>, center: &Vector3<f64>, half: &Vector3<f64>) -> f64 {
    let a = p0 - center;
    let d = p1 - p0;

    let mut breaks = vec![0.0, 1.0];
    for k in 0..3 {
        if d[k] != 0.0 {
            for bound in [-half[k], half[k]] {
                let t = (bound - a[k]) / d[k];
                if t > 0.0 && t < 1.0 {
                    breaks.push(t);
                }
            }
        }
    }
    breaks.sort_by(f64::total_cmp);

    let sq_dist_at = |t: f64| -> f64 {
        (0..3)
            .map(|k| {
                let x = a[k] + t * d[k];
                let excess = (x.abs() - half[k]).max(0.0);
                excess * excess
            })
            .sum()
    };

    let mut best = f64::INFINITY;
    for w in breaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        best = best.min(sq_dist_at(lo)).min(sq_dist_at(hi));
        if hi <= lo {
            continue;
        }
        // Quadratic coefficients of the active faces on this piece.
        let mid = 0.5 * (lo + hi);
        let (mut qa, mut qb) = (0.0, 0.0);
        for k in 0..3 {
            let x = a[k] + mid * d[k];
            let face = if x > half[k] {
                half[k]
            } else if x < -half[k] {
                -half[k]
            } else {
                continue;
            };
            // (a + t d - face)^2
            qa += d[k] * d[k];
            qb += 2.0 * d[k] * (a[k] - face);
        }
        if qa > 0.0 {
            let t = -qb / (2.0 * qa);
            if t > lo && t < hi {
                best = best.min(sq_dist_at(t));
            }
        }
    }
    best.sqrt()
}

/// One capsule-versus-box overlap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collision {
    pub link: usize,
    pub box_id: String,
}

/// Reports every (link, box) pair whose capsule penetrates the box, i.e. the
/// segment-to-box distance is strictly below the capsule radius.
pub fn collision_check(arm: &ArmModel, q: &JointConfig, boxes: &[SceneBox]) -> Vec<Collision> {
    let frames = arm.frames(q);
    let mut hits = Vec::new();
    for capsule in arm.capsules() {
        let frame = &frames[capsule.link];
        let p0 = frame.transform_point(&capsule.start.into()).coords;
        let p1 = frame.transform_point(&capsule.end.into()).coords;
        for b in boxes {
            if segment_box_distance(&p0, &p1, &b.center, &b.half_extents) < capsule.radius {
                hits.push(Collision { link: capsule.link, box_id: b.id.clone() });
            }
        }
    }
    hits
}

/// Mean and population standard deviation of the distances from each
/// measurement to the reference point.
pub fn calibration_error(measured: &[Vector3<f64>], reference: &Vector3<f64>) -> Result<(f64, f64), SceneError> {
    if measured.is_empty() {
        return Err(SceneError::Empty);
    }
    let n = measured.len() as f64;
    let dists: Vec<f64> = measured.iter().map(|m| (m - reference).norm()).collect();
    let mean = dists.iter().sum::<f64>() / n;
    let var = dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}
