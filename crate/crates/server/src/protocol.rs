//! Wire protocol: newline-delimited JSON envelopes `{type, seq, payload}`.
//!
//! The same envelope schema is carried over raw TCP (one envelope per line)
//! and over a websocket (one or more lines per text frame).

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use pbd_core::kinematics::{JointConfig, Pose};
use pbd_core::quat;
use pbd_core::trajectory::OrientationMode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

macro_rules! message_types {
    ($($name:ident),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum MessageType {
            $($name),*
        }

        impl MessageType {
            pub const ALL: &'static [MessageType] = &[$(MessageType::$name),*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(MessageType::$name => stringify!($name)),*
                }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s {
                    $(stringify!($name) => Some(MessageType::$name),)*
                    _ => None,
                }
            }
        }
    };
}

message_types!(
    StartRecording,
    PoseSample,
    StopRecording,
    StepCursor,
    Play,
    Pause,
    RedrawFrom,
    Save,
    Discard,
    AddToTrainingSet,
    ListTrainingSet,
    DeleteTrajectory,
    TrainModel,
    PlaceMarker,
    ConditionAndSample,
    Execute,
    Ack,
    ErrorReply,
    RobotState,
    CollisionWarning,
    ExecutionDone,
    Busy,
);

impl std::fmt::Display for MessageType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Session modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Idle,
    Recording,
    Reviewing,
    Training,
    Executing,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Idle, Mode::Recording, Mode::Reviewing, Mode::Training, Mode::Executing];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    InvalidTransition,
    UnknownMessageType,
    PayloadValidation,
    IKFailure,
    PreflightIKFailure,
    NoModel,
    TooFewDemos,
    TrainingFailed,
    TrainingTooSlow,
    NotFound,
    StorageFailure,
    EndpointUnreachable,
    EndpointTimeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    /// Message type name. Kept as text so unknown types survive parsing.
    #[serde(rename = "type")]
    pub kind: String,
    pub seq: u64,
    #[serde(default)]
    pub payload: Value,
}

impl Envelope {
    pub fn new(kind: MessageType, seq: u64, payload: impl Serialize) -> Self {
        Self { kind: kind.as_str().to_string(), seq, payload: serde_json::to_value(payload).expect("payload serialises") }
    }

    pub fn message_type(&self) -> Option<MessageType> {
        MessageType::parse(&self.kind)
    }

    pub fn is(&self, kind: MessageType) -> bool {
        self.kind == kind.as_str()
    }

    /// Single-line JSON, without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("envelope serialises")
    }

    pub fn from_line(line: &str) -> Result<Self, String> {
        serde_json::from_str(line.trim()).map_err(|e| e.to_string())
    }

    /// Parses the payload into `T`. A missing payload is read as `{}`.
    pub fn parse_payload<T: DeserializeOwned>(&self) -> Result<T, String> {
        let value = if self.payload.is_null() { Value::Object(Default::default()) } else { self.payload.clone() };
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                e.into_inner().to_string()
            } else {
                format!("{path}: {}", e.into_inner())
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    pub mode: Mode,
    pub offending: String,
    pub message: String,
}

// Inbound payloads.

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Empty {}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRecordingPayload {
    #[serde(default)]
    pub orientation_mode: OrientationMode,
    #[serde(default)]
    pub hand_follow: bool,
}

/// Raw tracked pose. A missing orientation stands for the palm-down
/// reference.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPose {
    pub position: [f64; 3],
    #[serde(default)]
    pub orientation: Option<[f64; 4]>,
}

impl RawPose {
    pub fn validate(&self) -> Result<(Vector3<f64>, Option<UnitQuaternion<f64>>), String> {
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err("position must be finite".into());
        }
        let orientation = match self.orientation {
            None => None,
            Some([w, x, y, z]) => {
                let q = Quaternion::new(w, x, y, z);
                let norm = q.norm();
                if !(norm.is_finite() && norm > 1e-6) {
                    return Err(format!("orientation has norm {norm}"));
                }
                Some(UnitQuaternion::new_normalize(q))
            }
        };
        Ok((Vector3::from(self.position), orientation))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSamplePayload {
    /// Wall-clock time of the sample, seconds.
    pub t: f64,
    pub position: [f64; 3],
    #[serde(default)]
    pub orientation: Option<[f64; 4]>,
}

impl PoseSamplePayload {
    pub fn raw(&self) -> RawPose {
        RawPose { position: self.position, orientation: self.orientation }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepCursorPayload {
    pub delta: i64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RedrawFromPayload {
    /// Defaults to the cursor position.
    #[serde(default)]
    pub index: Option<usize>,
    /// Replacement samples, already on the sample grid.
    pub samples: Vec<RawPose>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavePayload {
    #[serde(default)]
    pub id: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeletePayload {
    pub id: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPayload {
    #[serde(default)]
    pub n_basis: Option<usize>,
}

/// Either places one marker or, with `clear`, removes all of them.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaceMarkerPayload {
    #[serde(default)]
    pub position: Option<[f64; 3]>,
    #[serde(default)]
    pub timestamp: Option<f64>,
    #[serde(default)]
    pub clear: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionPayload {
    /// Draw a sample with this seed instead of returning the mean.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutePayload {
    /// Stored trajectory to execute from Idle. Defaults to the last sampled
    /// trajectory.
    #[serde(default)]
    pub id: Option<String>,
}

// Outbound payloads.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotStatePayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    pub joints: [f64; 6],
    #[serde(with = "quat::xyz")]
    pub position: Vector3<f64>,
    #[serde(with = "quat::wxyz")]
    pub orientation: UnitQuaternion<f64>,
    /// Intermediate joint configurations of a hand-follow segment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment: Option<Vec<[f64; 6]>>,
}

impl RobotStatePayload {
    pub fn new(joints: &JointConfig, pose: &Pose) -> Self {
        Self {
            index: None,
            t: None,
            joints: joints.0,
            position: pose.position,
            orientation: pose.orientation,
            segment: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionWarningPayload {
    pub link: usize,
    pub box_id: String,
    /// Waypoint index for execution preflight warnings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
}
