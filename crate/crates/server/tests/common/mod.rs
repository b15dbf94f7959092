#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;
use pbd_core::kinematics::ArmModel;
use pbd_core::scene::Scene;
use pbd_server::protocol::{ErrorCode, ErrorPayload};
use pbd_server::session::{Session, SessionConfig};
use pbd_server::{DataDir, Envelope, MessageType, Mode};
use serde_json::{json, Value};

pub fn config() -> SessionConfig {
    SessionConfig { clock: Arc::new(|| 1_700_000_000.0), ..SessionConfig::default() }
}

pub fn open_session(dir: &Path) -> Session {
    Session::open(DataDir::open(dir).unwrap(), ArmModel::ur10(), Scene::desk(), config()).unwrap()
}

/// Sends client messages with increasing sequence numbers.
pub struct Driver {
    pub session: Session,
    pub seq: u64,
}

impl Driver {
    pub fn new(dir: &Path) -> Self {
        Self { session: open_session(dir), seq: 0 }
    }

    pub fn send(&mut self, kind: MessageType, payload: Value) -> Vec<Envelope> {
        self.seq += 1;
        self.session.handle(&Envelope::new(kind, self.seq, payload))
    }

    pub fn send_raw(&mut self, kind: &str, payload: Value) -> Vec<Envelope> {
        self.seq += 1;
        self.session.handle(&Envelope { kind: kind.to_string(), seq: self.seq, payload })
    }

    /// Sends and expects a single leading `Ack`; returns its payload.
    pub fn ok(&mut self, kind: MessageType, payload: Value) -> Value {
        let replies = self.send(kind, payload);
        assert!(
            replies.first().is_some_and(|r| r.is(MessageType::Ack)),
            "{kind} was not acknowledged: {replies:?}"
        );
        replies[0].payload.clone()
    }

    pub fn record(&mut self, samples: &[Vector3<f64>]) -> Value {
        self.ok(MessageType::StartRecording, json!({}));
        for (k, p) in samples.iter().enumerate() {
            let ack = self.ok(MessageType::PoseSample, sample(k as f64 * 0.2, p));
            assert_eq!(ack["accepted"], true);
        }
        self.ok(MessageType::StopRecording, json!({}))
    }
}

pub fn sample(t: f64, p: &Vector3<f64>) -> Value {
    json!({ "t": t, "position": [p.x, p.y, p.z] })
}

pub fn error_of(replies: &[Envelope]) -> ErrorPayload {
    assert_eq!(replies.len(), 1, "{replies:?}");
    assert!(replies[0].is(MessageType::ErrorReply), "{replies:?}");
    serde_json::from_value(replies[0].payload.clone()).unwrap()
}

pub fn assert_error(replies: &[Envelope], code: ErrorCode) -> ErrorPayload {
    let e = error_of(replies);
    assert_eq!(e.code, code, "{e:?}");
    e
}

/// Reachable tool-down arc in front of the arm; `variant` shifts it
/// sideways and raises the apex.
pub fn arc(n: usize, variant: usize) -> Vec<Vector3<f64>> {
    let v = variant as f64;
    (0..n)
        .map(|k| {
            let s = k as f64 / (n - 1) as f64;
            Vector3::new(0.55 + 0.2 * s, -0.1 + 0.02 * v + 0.2 * s, 0.35 + (0.1 + 0.02 * v) * (PI * s).sin())
        })
        .collect()
}

pub fn mode_of_ack(payload: &Value) -> Mode {
    serde_json::from_value(payload["mode"].clone()).unwrap()
}
