//! Serial-arm kinematics: Denavit–Hartenberg forward kinematics, the
//! geometric Jacobian, and a damped least-squares IK solver with joint-limit
//! projection and warm starting.
//!
//! The arm is always a 6-joint revolute chain. Each [`DhRow`] uses the
//! standard convention `Rz(θ + q) · Tz(d) · Tx(a) · Rx(α)`.

use std::ops::{Index, IndexMut};

use nalgebra::{Isometry3, Matrix6, Translation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quat;
use crate::scene::RigidTransform;

pub const DOF: usize = 6;

/// Arm description bundled with the crate (UR10-style geometry).
pub const UR10_ARM_JSON: &str = include_str!("../assets/ur10_arm.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhRow {
    pub theta_offset: f64,
    pub d: f64,
    pub a: f64,
    pub alpha: f64,
}

impl DhRow {
    pub const fn new(theta_offset: f64, d: f64, a: f64, alpha: f64) -> Self {
        Self { theta_offset, d, a, alpha }
    }

    /// Transform from the previous link frame to this one for joint angle `q`.
    pub fn transform(&self, q: f64) -> Isometry3<f64> {
        let theta = self.theta_offset + q;
        let (st, ct) = theta.sin_cos();
        let rotation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta)
            * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), self.alpha);
        Isometry3::from_parts(
            Translation3::new(self.a * ct, self.a * st, self.d),
            rotation,
        )
    }

    fn is_finite(&self) -> bool {
        self.theta_offset.is_finite() && self.d.is_finite() && self.a.is_finite() && self.alpha.is_finite()
    }
}

/// Six joint angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointConfig(pub [f64; DOF]);

impl JointConfig {
    pub const fn zeros() -> Self {
        Self([0.0; DOF])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Largest per-joint absolute difference.
    pub fn max_abs_diff(&self, other: &JointConfig) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<usize> for JointConfig {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for JointConfig {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// End-effector placement: position in meters plus a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    #[serde(with = "quat::xyz")]
    pub position: Vector3<f64>,
    #[serde(with = "quat::wxyz")]
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self { position, orientation }
    }

    /// Position with the tool pointing straight down.
    pub fn tool_down(position: Vector3<f64>) -> Self {
        Self::new(position, quat::tool_down())
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self::new(iso.translation.vector, iso.rotation)
    }

    pub fn orientation_error(&self, other: &Pose) -> f64 {
        quat::angle_between(&self.orientation, &other.orientation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimit {
    pub min: f64,
    pub max: f64,
}

/// Collision capsule rigidly attached to a link frame.
///
/// `link` indexes the chain frames: 0 is the arm base, `i` is the frame after
/// joint `i`. Segment endpoints are expressed in that frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkCapsule {
    pub link: usize,
    pub radius: f64,
    #[serde(with = "quat::xyz")]
    pub start: Vector3<f64>,
    #[serde(with = "quat::xyz")]
    pub end: Vector3<f64>,
}

#[derive(Debug, Error)]
pub enum ArmError {
    #[error("arm file: field `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("arm file: field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

impl ArmError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ArmError::Invalid { field: field.into(), message: message.into() }
    }

    pub fn field(&self) -> &str {
        match self {
            ArmError::Parse { field, .. } | ArmError::Invalid { field, .. } => field,
        }
    }
}

/// Six-joint serial arm. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmModel {
    rows: [DhRow; DOF],
    limits: [JointLimit; DOF],
    base: RigidTransform,
    capsules: Vec<LinkCapsule>,
    home: JointConfig,
}

/// On-disk arm description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmFile {
    pub dh: Vec<DhRow>,
    pub limits: Vec<[f64; 2]>,
    #[serde(default)]
    pub capsules: Vec<LinkCapsule>,
    #[serde(default)]
    pub base: RigidTransform,
    #[serde(default)]
    pub home: Option<JointConfig>,
}

impl ArmModel {
    pub fn new(
        rows: Vec<DhRow>,
        limits: Vec<JointLimit>,
        base: RigidTransform,
        capsules: Vec<LinkCapsule>,
        home: Option<JointConfig>,
    ) -> Result<Self, ArmError> {
        let rows: [DhRow; DOF] = rows
            .try_into()
            .map_err(|v: Vec<DhRow>| ArmError::invalid("dh", format!("expected {DOF} rows, got {}", v.len())))?;
        for (i, r) in rows.iter().enumerate() {
            if !r.is_finite() {
                return Err(ArmError::invalid(format!("dh[{i}]"), "all parameters must be finite"));
            }
        }
        let limits: [JointLimit; DOF] = limits
            .try_into()
            .map_err(|v: Vec<JointLimit>| ArmError::invalid("limits", format!("expected {DOF} pairs, got {}", v.len())))?;
        for (i, l) in limits.iter().enumerate() {
            if !(l.min.is_finite() && l.max.is_finite() && l.min < l.max) {
                return Err(ArmError::invalid(format!("limits[{i}]"), "need finite min < max"));
            }
        }
        for (i, c) in capsules.iter().enumerate() {
            if !(c.radius > 0.0 && c.radius.is_finite()) {
                return Err(ArmError::invalid(format!("capsules[{i}].radius"), "radius must be > 0"));
            }
            if c.link > DOF {
                return Err(ArmError::invalid(format!("capsules[{i}].link"), format!("link index must be 0..={DOF}")));
            }
        }
        let home = match home {
            Some(h) => {
                if !h.is_finite() {
                    return Err(ArmError::invalid("home", "joint values must be finite"));
                }
                if let Some(i) = (0..DOF).find(|&i| h[i] < limits[i].min || h[i] > limits[i].max) {
                    return Err(ArmError::invalid(format!("home[{i}]"), "outside joint limits"));
                }
                h
            }
            None => {
                let mut h = JointConfig::zeros();
                for i in 0..DOF {
                    h[i] = 0.0f64.clamp(limits[i].min, limits[i].max);
                }
                h
            }
        };
        Ok(Self { rows, limits, base, capsules, home })
    }

    pub fn from_file(file: ArmFile) -> Result<Self, ArmError> {
        let limits = file.limits.iter().map(|l| JointLimit { min: l[0], max: l[1] }).collect();
        Self::new(file.dh, limits, file.base, file.capsules, file.home)
    }

    /// Parses an arm description. Errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self, ArmError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ArmFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ArmError::Parse { field: path, message: e.into_inner().to_string() }
        })?;
        Self::from_file(file)
    }

    pub fn to_file(&self) -> ArmFile {
        ArmFile {
            dh: self.rows.to_vec(),
            limits: self.limits.iter().map(|l| [l.min, l.max]).collect(),
            capsules: self.capsules.clone(),
            base: self.base,
            home: Some(self.home),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("arm file serialises")
    }

    pub fn ur10() -> Self {
        Self::from_json(UR10_ARM_JSON).expect("bundled arm description is valid")
    }

    pub fn rows(&self) -> &[DhRow; DOF] {
        &self.rows
    }

    pub fn limits(&self) -> &[JointLimit; DOF] {
        &self.limits
    }

    pub fn base(&self) -> &RigidTransform {
        &self.base
    }

    pub fn capsules(&self) -> &[LinkCapsule] {
        &self.capsules
    }

    pub fn home(&self) -> JointConfig {
        self.home
    }

    /// Copy of this arm with a different base placement.
    pub fn with_base(&self, base: RigidTransform) -> Self {
        Self { base, ..self.clone() }
    }

    /// Copy of this arm with different collision capsules.
    pub fn with_capsules(&self, capsules: Vec<LinkCapsule>) -> Result<Self, ArmError> {
        Self::new(
            self.rows.to_vec(),
            self.limits.to_vec(),
            self.base,
            capsules,
            Some(self.home),
        )
    }

    /// Upper bound on the distance from the base origin to the flange.
    pub fn reach(&self) -> f64 {
        self.rows.iter().map(|r| r.a.abs() + r.d.abs()).sum()
    }

    pub fn within_limits(&self, q: &JointConfig) -> bool {
        (0..DOF).all(|i| q[i] >= self.limits[i].min && q[i] <= self.limits[i].max)
    }

    pub fn clamp_to_limits(&self, q: &mut JointConfig) {
        for i in 0..DOF {
            q[i] = q[i].clamp(self.limits[i].min, self.limits[i].max);
        }
    }

    /// World poses of the base frame followed by each joint frame (7 total).
    pub fn frames(&self, q: &JointConfig) -> [Isometry3<f64>; DOF + 1] {
        let mut frames = [Isometry3::identity(); DOF + 1];
        let mut t = self.base.to_isometry();
        frames[0] = t;
        for (i, row) in self.rows.iter().enumerate() {
            t *= row.transform(q[i]);
            frames[i + 1] = t;
        }
        frames
    }

    pub fn forward_kinematics(&self, q: &JointConfig) -> Pose {
        Pose::from_isometry(&self.frames(q)[DOF])
    }

    /// Geometric Jacobian in the world frame. Rows 0..3 are linear velocity
    /// (m/rad), rows 3..6 angular velocity (rad/rad).
    pub fn jacobian(&self, q: &JointConfig) -> Matrix6<f64> {
        let frames = self.frames(q);
        let p_ee = frames[DOF].translation.vector;
        let mut jac = Matrix6::zeros();
        for i in 0..DOF {
            let z = frames[i].rotation * Vector3::z();
            let p = frames[i].translation.vector;
            let lin = z.cross(&(p_ee - p));
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
        }
        jac
    }

    /// Damped least-squares IK warm-started from `seed`.
    pub fn solve_ik(&self, target: &Pose, seed: &JointConfig, params: &IkParams) -> Result<JointConfig, IkError> {
        if !seed.is_finite() || !self.within_limits(seed) {
            return Err(IkError::SeedOutOfLimits);
        }
        let distance = (target.position - self.base.translation).norm();
        let reach = self.reach();
        if !(distance <= reach) {
            return Err(IkError::Unreachable { distance, reach });
        }

        let lambda_sq = params.damping * params.damping;
        let mut q = *seed;
        let mut iteration = 0;
        loop {
            let pose = self.forward_kinematics(&q);
            let pos_err = target.position - pose.position;
            let ori_angle = quat::angle_between(&target.orientation, &pose.orientation);
            let pos_norm = pos_err.norm();
            if pos_norm <= params.position_tol && ori_angle <= params.orientation_tol {
                return Ok(q);
            }
            if iteration == params.max_iterations {
                return Err(IkError::NotConverged {
                    iterations: iteration,
                    position_error: pos_norm,
                    orientation_error: ori_angle,
                });
            }
            iteration += 1;

            let rot_err = quat::rotation_error(&target.orientation, &pose.orientation);
            let err = Vector6::new(pos_err.x, pos_err.y, pos_err.z, rot_err.x, rot_err.y, rot_err.z);
            let jac = self.jacobian(&q);
            let damped = jac * jac.transpose() + Matrix6::identity() * lambda_sq;
            let Some(y) = damped.lu().solve(&err) else {
                return Err(IkError::NotConverged {
                    iterations: iteration,
                    position_error: pos_norm,
                    orientation_error: ori_angle,
                });
            };
            let dq = jac.transpose() * y;
            for i in 0..DOF {
                q[i] += dq[i].clamp(-params.step_clamp, params.step_clamp);
            }
            self.clamp_to_limits(&mut q);
        }
    }

    /// Solves a chain of IK problems along the straight segment from the
    /// current flange pose to `to_pose`, each seeded with the previous result.
    pub fn solve_ik_segment(
        &self,
        from_q: &JointConfig,
        to_pose: &Pose,
        substeps: usize,
        params: &IkParams,
    ) -> Result<Vec<JointConfig>, IkError> {
        if substeps == 0 {
            return Err(IkError::NoSubsteps);
        }
        let start = self.forward_kinematics(from_q);
        let mut out = Vec::with_capacity(substeps);
        let mut seed = *from_q;
        for k in 1..=substeps {
            let s = k as f64 / substeps as f64;
            let target = Pose::new(
                start.position + (to_pose.position - start.position) * s,
                quat::slerp(&start.orientation, &to_pose.orientation, s),
            );
            seed = self
                .solve_ik(&target, &seed, params)
                .map_err(|cause| IkError::SegmentFailed { substep: k - 1, cause: Box::new(cause) })?;
            out.push(seed);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkParams {
    pub max_iterations: usize,
    pub position_tol: f64,
    pub orientation_tol: f64,
    pub damping: f64,
    pub step_clamp: f64,
}

impl Default for IkParams {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            position_tol: 1e-4,
            orientation_tol: 1e-3,
            damping: 0.05,
            step_clamp: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IkError {
    #[error("IK did not converge after {iterations} iterations (position error {position_error:.3e} m, orientation error {orientation_error:.3e} rad)")]
    NotConverged { iterations: usize, position_error: f64, orientation_error: f64 },
    #[error("target is {distance:.4} m from the base, beyond the chain reach of {reach:.4} m")]
    Unreachable { distance: f64, reach: f64 },
    #[error("seed configuration is outside the joint limits")]
    SeedOutOfLimits,
    #[error("segment needs at least one substep")]
    NoSubsteps,
    #[error("segment substep {substep} failed: {cause}")]
    SegmentFailed { substep: usize, cause: Box<IkError> },
}

impl IkError {
    /// Index of the failing substep for segment errors.
    pub fn substep(&self) -> Option<usize> {
        match self {
            IkError::SegmentFailed { substep, .. } => Some(*substep),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn limits(lo: f64, hi: f64) -> Vec<JointLimit> {
        vec![JointLimit { min: lo, max: hi }; DOF]
    }

    /// Single unit lever rotating about z; remaining joints are inert.
    pub(crate) fn one_link_arm() -> ArmModel {
        let mut rows = vec![DhRow::new(0.0, 0.0, 1.0, 0.0)];
        rows.extend(std::iter::repeat_n(DhRow::new(0.0, 0.0, 0.0, 0.0), 5));
        ArmModel::new(rows, limits(-PI, PI), RigidTransform::identity(), vec![], None).unwrap()
    }

    #[test]
    fn one_link_forward() {
        let arm = one_link_arm();
        let p = arm.forward_kinematics(&JointConfig::zeros()).position;
        assert!((p - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        let mut q = JointConfig::zeros();
        q[0] = FRAC_PI_2;
        let p = arm.forward_kinematics(&q).position;
        assert!((p - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn one_link_jacobian_column() {
        let jac = one_link_arm().jacobian(&JointConfig::zeros());
        let lin = jac.fixed_view::<3, 1>(0, 0).into_owned();
        let ang = jac.fixed_view::<3, 1>(3, 0).into_owned();
        assert!((lin - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
        assert!((ang - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn degenerate_chain_has_no_linear_part() {
        let rows = vec![
            DhRow::new(0.0, 0.0, 0.0, FRAC_PI_2),
            DhRow::new(0.3, 0.0, 0.0, -FRAC_PI_2),
            DhRow::new(0.0, 0.0, 0.0, 0.4),
            DhRow::new(0.0, 0.0, 0.0, FRAC_PI_2),
            DhRow::new(0.1, 0.0, 0.0, -FRAC_PI_2),
            DhRow::new(0.0, 0.0, 0.0, 0.0),
        ];
        let arm = ArmModel::new(rows, limits(-PI, PI), RigidTransform::identity(), vec![], None).unwrap();
        let q = JointConfig([0.3, -0.2, 1.1, 0.5, -0.7, 0.9]);
        let jac = arm.jacobian(&q);
        assert_eq!(jac.fixed_view::<3, 6>(0, 0).amax(), 0.0);
    }

    #[test]
    fn ik_fixed_point_returns_seed() {
        let arm = ArmModel::ur10();
        let seed = JointConfig([0.2, -1.2, 1.4, -1.7, -1.5, 0.3]);
        let target = arm.forward_kinematics(&seed);
        let q = arm.solve_ik(&target, &seed, &IkParams::default()).unwrap();
        assert_eq!(q, seed);
    }

    #[test]
    fn ik_rejects_far_target() {
        let arm = ArmModel::ur10();
        let target = Pose::tool_down(Vector3::new(arm.reach() + 0.01, 0.0, 0.0));
        let err = arm.solve_ik(&target, &arm.home(), &IkParams::default()).unwrap_err();
        assert!(matches!(err, IkError::Unreachable { .. }));
    }

    #[test]
    fn ik_rejects_out_of_limit_seed() {
        let arm = ArmModel::ur10();
        let mut seed = arm.home();
        seed[2] = 10.0;
        let target = arm.forward_kinematics(&arm.home());
        assert_eq!(arm.solve_ik(&target, &seed, &IkParams::default()), Err(IkError::SeedOutOfLimits));
    }

    #[test]
    fn stationary_segment_repeats_seed() {
        let arm = ArmModel::ur10();
        let q0 = arm.home();
        let pose = arm.forward_kinematics(&q0);
        let out = arm.solve_ik_segment(&q0, &pose, 4, &IkParams::default()).unwrap();
        assert_eq!(out, vec![q0; 4]);
    }

    #[test]
    fn segment_past_reach_reports_substep() {
        let arm = ArmModel::ur10();
        let q0 = arm.home();
        let target = Pose::tool_down(Vector3::new(2.5, 0.0, 0.3));
        let err = arm.solve_ik_segment(&q0, &target, 5, &IkParams::default()).unwrap_err();
        assert!(err.substep().is_some());
    }

    #[test]
    fn zero_substeps_rejected() {
        let arm = ArmModel::ur10();
        let pose = arm.forward_kinematics(&arm.home());
        assert_eq!(arm.solve_ik_segment(&arm.home(), &pose, 0, &IkParams::default()), Err(IkError::NoSubsteps));
    }

    #[test]
    fn home_points_tool_down() {
        let arm = ArmModel::ur10();
        let pose = arm.forward_kinematics(&arm.home());
        let tool_axis = pose.orientation * Vector3::z();
        assert!((tool_axis - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!(pose.position.x > 0.5);
    }

    #[test]
    fn parse_error_names_field() {
        let mut file = ArmModel::ur10().to_file();
        file.limits[2] = [1.0, -1.0];
        let text = serde_json::to_string(&file).unwrap();
        let err = ArmModel::from_json(&text).unwrap_err();
        assert_eq!(err.field(), "limits[2]");

        let text = UR10_ARM_JSON.replacen("\"alpha\": 0.0", "\"alpha\": \"zero\"", 1);
        let err = ArmModel::from_json(&text).unwrap_err();
        assert!(err.field().starts_with("dh["), "{err}");
        assert!(err.field().ends_with(".alpha"), "{err}");
    }

    #[test]
    fn wrong_row_count_rejected() {
        let mut file = ArmModel::ur10().to_file();
        file.dh.pop();
        let err = ArmModel::from_file(file).unwrap_err();
        assert_eq!(err.field(), "dh");
    }

    #[test]
    fn nonpositive_capsule_radius_rejected() {
        let mut file = ArmModel::ur10().to_file();
        file.capsules[1].radius = 0.0;
        let err = ArmModel::from_file(file).unwrap_err();
        assert_eq!(err.field(), "capsules[1].radius");
    }
}
