//! Core engine for programming robot arms by demonstration.
//!
//! The crate covers the numerical side of the pipeline: serial-arm
//! kinematics with a damped least-squares IK solver, trajectory recording
//! and editing, probabilistic movement primitives with via-point
//! conditioning, smoothness metrics, and the workspace/scene model used for
//! calibration and collision warnings.

pub mod kinematics;
pub mod metrics;
pub mod promp;
pub mod quat;
pub mod scene;
pub mod trajectory;

pub use kinematics::{ArmModel, DhRow, IkError, IkParams, JointConfig, Pose};
pub use promp::{BasisConfig, ContextualProMP, ProMPModel, ViaPoint};
pub use scene::{Marker, RigidTransform, SceneBox};
pub use trajectory::{OrientationMode, Trajectory, Waypoint};
