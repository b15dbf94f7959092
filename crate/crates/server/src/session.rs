//! Session state machine.
//!
//! `Session::handle` is the single entry point for client messages. It
//! checks the sequence number, the message type, the transition table and
//! finally the payload, in that order. Any rejection leaves the session
//! exactly as it was and yields one `ErrorReply`.

use std::sync::Arc;
use std::time::{Duration, Instant};

use pbd_core::kinematics::{ArmModel, IkParams, JointConfig, Pose};
use pbd_core::promp::{BasisConfig, ProMPModel, PrompError, ViaPoint, DEFAULT_RESAMPLE};
use pbd_core::scene::{collision_check, Marker, Scene};
use pbd_core::trajectory::{
    map_hand_orientation, palm_down_reference, redraw_from, step_cursor, OrientationMode, PlaybackCursor,
    PlaybackState, Recorder, RecorderConfig, Trajectory, TrajectoryError, TrajectoryStore, Waypoint,
    DEFAULT_SAMPLE_PERIOD,
};
use serde_json::{json, Value};

use crate::executor::{self, ExecError, ExecutionPlan, ExecutionReport};
use crate::protocol::*;
use crate::storage::{self, DataDir, Manifest, ManifestEntry, StorageError, TrainError};

/// Wall clock used for manifest timestamps, seconds since the Unix epoch.
pub type Clock = Arc<dyn Fn() -> f64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
    })
}

#[derive(Clone)]
pub struct SessionConfig {
    pub ik: IkParams,
    pub basis: BasisConfig,
    pub n_resample: usize,
    pub sample_period: f64,
    pub train_budget: Duration,
    pub follow_deadline: Duration,
    pub clock: Clock,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            ik: IkParams::default(),
            basis: BasisConfig::default(),
            n_resample: DEFAULT_RESAMPLE,
            sample_period: DEFAULT_SAMPLE_PERIOD,
            train_budget: Duration::from_secs(1),
            follow_deadline: Duration::from_millis(200),
            clock: system_clock(),
        }
    }
}

/// Target mode of a message in a given mode, or `None` when the pair is
/// not in the transition table.
pub fn transition(mode: Mode, msg: MessageType) -> Option<Mode> {
    use MessageType as M;
    match (mode, msg) {
        (_, M::ListTrainingSet) => Some(mode),
        (Mode::Idle, M::StartRecording) => Some(Mode::Recording),
        (Mode::Idle, M::TrainModel | M::PlaceMarker | M::ConditionAndSample | M::DeleteTrajectory) => Some(Mode::Idle),
        (Mode::Idle | Mode::Reviewing, M::Execute) => Some(Mode::Executing),
        (Mode::Recording, M::PoseSample) => Some(Mode::Recording),
        (Mode::Recording, M::StopRecording) => Some(Mode::Reviewing),
        (Mode::Reviewing, M::StepCursor | M::Play | M::Pause | M::RedrawFrom) => Some(Mode::Reviewing),
        (Mode::Reviewing, M::Save | M::AddToTrainingSet | M::Discard) => Some(Mode::Idle),
        (Mode::Executing, M::ExecutionDone) => Some(Mode::Idle),
        _ => None,
    }
}

/// Comparable view of everything that makes up the session state.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSnapshot {
    pub mode: Mode,
    pub recording: Vec<Waypoint>,
    pub recording_mode: OrientationMode,
    pub hand_follow: bool,
    pub active: Option<Trajectory>,
    pub cursor: Option<PlaybackCursor>,
    pub manifest: Manifest,
    pub model: Option<ProMPModel>,
    pub markers: Vec<Marker>,
    pub sampled: Option<Trajectory>,
    pub joints: JointConfig,
    pub pending: Option<ExecutionPlan>,
    pub executing: bool,
}

struct Failure {
    code: ErrorCode,
    message: String,
}

impl Failure {
    fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    fn payload(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::PayloadValidation, message)
    }
}

impl From<StorageError> for Failure {
    fn from(e: StorageError) -> Self {
        match e {
            StorageError::Trajectory(TrajectoryError::NotFound(id)) => {
                Failure::new(ErrorCode::NotFound, format!("no trajectory `{id}`"))
            }
            other => Failure::new(ErrorCode::StorageFailure, other.to_string()),
        }
    }
}

impl From<TrajectoryError> for Failure {
    fn from(e: TrajectoryError) -> Self {
        StorageError::from(e).into()
    }
}

type Handled = Result<Vec<Envelope>, Failure>;

pub struct Session {
    mode: Mode,
    arm: ArmModel,
    scene: Scene,
    data: DataDir,
    store: TrajectoryStore,
    config: SessionConfig,
    recorder: Recorder,
    hand_follow: bool,
    active: Option<Trajectory>,
    cursor: Option<PlaybackCursor>,
    play_seq: u64,
    manifest: Manifest,
    model: Option<ProMPModel>,
    markers: Vec<Marker>,
    sampled: Option<Trajectory>,
    joints: JointConfig,
    pending: Option<ExecutionPlan>,
    /// Joint trajectory of the execution in flight.
    executing: Option<Vec<JointConfig>>,
    last_seq: Option<u64>,
    last_train: Option<Duration>,
}

impl Session {
    /// Opens a session over `data`, loading the manifest and any stored
    /// model.
    pub fn open(data: DataDir, arm: ArmModel, scene: Scene, config: SessionConfig) -> Result<Self, StorageError> {
        let manifest = Manifest::load(&data)?;
        let model = data.load_model()?;
        let store = data.store()?;
        let joints = arm.home();
        let recorder = Recorder::new(RecorderConfig { sample_period: config.sample_period, ..Default::default() });
        Ok(Self {
            mode: Mode::Idle,
            arm,
            scene,
            data,
            store,
            config,
            recorder,
            hand_follow: false,
            active: None,
            cursor: None,
            play_seq: 0,
            manifest,
            model,
            markers: Vec::new(),
            sampled: None,
            joints,
            pending: None,
            executing: None,
            last_seq: None,
            last_train: None,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn arm(&self) -> &ArmModel {
        &self.arm
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn data(&self) -> &DataDir {
        &self.data
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn model(&self) -> Option<&ProMPModel> {
        self.model.as_ref()
    }

    pub fn active(&self) -> Option<&Trajectory> {
        self.active.as_ref()
    }

    pub fn cursor(&self) -> Option<&PlaybackCursor> {
        self.cursor.as_ref()
    }

    pub fn sampled(&self) -> Option<&Trajectory> {
        self.sampled.as_ref()
    }

    pub fn markers(&self) -> &[Marker] {
        &self.markers
    }

    pub fn joints(&self) -> JointConfig {
        self.joints
    }

    /// Wall time of the last successful training run.
    pub fn last_train_duration(&self) -> Option<Duration> {
        self.last_train
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            mode: self.mode,
            recording: self.recorder.waypoints().to_vec(),
            recording_mode: self.recorder.config().orientation_mode,
            hand_follow: self.hand_follow,
            active: self.active.clone(),
            cursor: self.cursor.clone(),
            manifest: self.manifest.clone(),
            model: self.model.clone(),
            markers: self.markers.clone(),
            sampled: self.sampled.clone(),
            joints: self.joints,
            pending: self.pending.clone(),
            executing: self.executing.is_some(),
        }
    }

    /// Forgets the per-connection sequence number.
    pub fn reset_connection(&mut self) {
        self.last_seq = None;
    }

    /// Hands the preflighted execution to the runtime. Present right after
    /// a successful `Execute`.
    pub fn take_pending_execution(&mut self) -> Option<ExecutionPlan> {
        self.pending.take()
    }

    /// Parses and handles one wire line.
    pub fn handle_line(&mut self, line: &str) -> Vec<Envelope> {
        match Envelope::from_line(line) {
            Ok(env) => self.handle(&env),
            Err(e) => vec![self.error(0, "", ErrorCode::PayloadValidation, format!("malformed envelope: {e}"))],
        }
    }

    pub fn handle(&mut self, env: &Envelope) -> Vec<Envelope> {
        if let Some(last) = self.last_seq {
            if env.seq <= last {
                return vec![self.error(
                    env.seq,
                    &env.kind,
                    ErrorCode::PayloadValidation,
                    format!("seq {} is not greater than {last}", env.seq),
                )];
            }
        }
        self.last_seq = Some(env.seq);

        let Some(kind) = env.message_type() else {
            return vec![self.error(
                env.seq,
                &env.kind,
                ErrorCode::UnknownMessageType,
                format!("unknown message type `{}`", env.kind),
            )];
        };
        if transition(self.mode, kind).is_none() {
            return vec![self.error(
                env.seq,
                &env.kind,
                ErrorCode::InvalidTransition,
                format!("{kind} is not accepted in mode {:?}", self.mode),
            )];
        }
        let result = match kind {
            MessageType::StartRecording => payload(env).and_then(|p| self.start_recording(env.seq, p)),
            MessageType::PoseSample => payload(env).and_then(|p| self.pose_sample(env.seq, p)),
            MessageType::StopRecording => payload::<Empty>(env).and_then(|_| self.stop_recording(env.seq)),
            MessageType::StepCursor => payload(env).and_then(|p| self.step(env.seq, p)),
            MessageType::Play => payload::<Empty>(env).and_then(|_| self.set_playback(env.seq, PlaybackState::Playing)),
            MessageType::Pause => payload::<Empty>(env).and_then(|_| self.set_playback(env.seq, PlaybackState::Paused)),
            MessageType::RedrawFrom => payload(env).and_then(|p| self.redraw(env.seq, p)),
            MessageType::Save => payload(env).and_then(|p| self.save(env.seq, p)),
            MessageType::Discard => payload::<Empty>(env).and_then(|_| self.discard(env.seq)),
            MessageType::AddToTrainingSet => payload::<Empty>(env).and_then(|_| self.add_to_training_set(env.seq)),
            MessageType::ListTrainingSet => payload::<Empty>(env).map(|_| self.list_training_set(env.seq)),
            MessageType::DeleteTrajectory => payload(env).and_then(|p| self.delete(env.seq, p)),
            MessageType::TrainModel => payload(env).and_then(|p| self.train(env.seq, p)),
            MessageType::PlaceMarker => payload(env).and_then(|p| self.place_marker(env.seq, p)),
            MessageType::ConditionAndSample => payload(env).and_then(|p| self.condition_and_sample(env.seq, p)),
            MessageType::Execute => payload(env).and_then(|p| self.execute(env.seq, p)),
            MessageType::ExecutionDone => self.execution_done(env.seq, None),
            MessageType::Ack
            | MessageType::ErrorReply
            | MessageType::RobotState
            | MessageType::CollisionWarning
            | MessageType::Busy => unreachable!("server-only types are absent from the transition table"),
        };
        match result {
            Ok(replies) => replies,
            Err(f) => vec![self.error(env.seq, &env.kind, f.code, f.message)],
        }
    }

    fn error(&self, seq: u64, offending: &str, code: ErrorCode, message: String) -> Envelope {
        Envelope::new(
            MessageType::ErrorReply,
            seq,
            ErrorPayload { code, mode: self.mode, offending: offending.to_string(), message },
        )
    }

    fn ack(&self, seq: u64, of: MessageType, extra: Value) -> Envelope {
        let mut body = json!({ "of": of.as_str(), "mode": self.mode });
        if let (Value::Object(dst), Value::Object(src)) = (&mut body, extra) {
            dst.extend(src);
        }
        Envelope::new(MessageType::Ack, seq, body)
    }

    fn start_recording(&mut self, seq: u64, p: StartRecordingPayload) -> Handled {
        self.recorder = Recorder::new(RecorderConfig {
            sample_period: self.config.sample_period,
            orientation_mode: p.orientation_mode,
        });
        self.recorder.start();
        self.hand_follow = p.hand_follow;
        self.active = None;
        self.cursor = None;
        self.mode = Mode::Recording;
        Ok(vec![self.ack(seq, MessageType::StartRecording, json!({ "hand_follow": p.hand_follow }))])
    }

    fn map_pose(&self, raw: &RawPose, mode: OrientationMode) -> Result<Pose, Failure> {
        let (position, orientation) = raw.validate().map_err(Failure::payload)?;
        let hand = orientation.unwrap_or_else(palm_down_reference);
        Ok(Pose::new(position, map_hand_orientation(&hand, mode)))
    }

    fn pose_sample(&mut self, seq: u64, p: PoseSamplePayload) -> Handled {
        if !(p.t.is_finite() && p.t >= 0.0) {
            return Err(Failure::payload("t must be finite and >= 0"));
        }
        let pose = self.map_pose(&p.raw(), self.recorder.config().orientation_mode)?;
        let accepted = self.recorder.record_sample(pose, p.t).map_err(|e| Failure::payload(e.to_string()))?;
        let mut out = vec![self.ack(
            seq,
            MessageType::PoseSample,
            json!({ "accepted": accepted, "len": self.recorder.waypoints().len() }),
        )];
        if self.hand_follow {
            out.extend(self.hand_follow(seq, &pose));
        }
        Ok(out)
    }

    /// Moves the simulated arm toward `pose` along an IK segment. Replies
    /// with a `RobotState` (plus advisory `CollisionWarning`s), or an
    /// `IKFailure` error that leaves the arm where it was.
    pub fn hand_follow(&mut self, seq: u64, pose: &Pose) -> Vec<Envelope> {
        let start = Instant::now();
        let from = self.arm.forward_kinematics(&self.joints);
        let substeps = executor::substeps_between(&from, pose);
        let chain = match self.arm.solve_ik_segment(&self.joints, pose, substeps, &self.config.ik) {
            Ok(chain) => chain,
            Err(e) => {
                return vec![self.error(seq, MessageType::PoseSample.as_str(), ErrorCode::IKFailure, e.to_string())];
            }
        };
        self.joints = *chain.last().expect("segment has at least one substep");
        let mut state = RobotStatePayload::new(&self.joints, &self.arm.forward_kinematics(&self.joints));
        state.segment = Some(chain.iter().map(|q| q.0).collect());
        let mut out = vec![Envelope::new(MessageType::RobotState, seq, state)];
        let mut seen = Vec::new();
        for q in &chain {
            for c in collision_check(&self.arm, q, &self.scene.boxes) {
                if !seen.contains(&c) {
                    seen.push(c);
                }
            }
        }
        out.extend(seen.into_iter().map(|c| {
            Envelope::new(
                MessageType::CollisionWarning,
                seq,
                CollisionWarningPayload { link: c.link, box_id: c.box_id, index: None },
            )
        }));
        let elapsed = start.elapsed();
        if elapsed > self.config.follow_deadline {
            log::warn!("hand follow took {elapsed:?}, over the {:?} deadline", self.config.follow_deadline);
        }
        out
    }

    fn stop_recording(&mut self, seq: u64) -> Handled {
        self.hand_follow = false;
        if self.recorder.waypoints().is_empty() {
            // Nothing to review: go straight back to Idle.
            self.recorder.finish("").ok();
            self.mode = Mode::Idle;
            return Ok(vec![self.ack(seq, MessageType::StopRecording, json!({ "len": 0 }))]);
        }
        let traj = self.recorder.finish("").map_err(|e| Failure::payload(e.to_string()))?;
        self.cursor = Some(PlaybackCursor::new(&traj));
        self.mode = Mode::Reviewing;
        let reply = self.ack(seq, MessageType::StopRecording, json!({ "len": traj.len(), "trajectory": traj }));
        self.active = Some(traj);
        Ok(vec![reply])
    }

    fn cursor_state(&mut self, seq: u64) -> Vec<Envelope> {
        let (Some(traj), Some(cursor)) = (&self.active, &self.cursor) else { return Vec::new() };
        let w = traj.waypoints()[cursor.index];
        let index = cursor.index;
        let from = self.arm.forward_kinematics(&self.joints);
        let substeps = executor::substeps_between(&from, &w.pose);
        match self.arm.solve_ik_segment(&self.joints, &w.pose, substeps, &self.config.ik) {
            Ok(chain) => {
                self.joints = *chain.last().expect("segment has at least one substep");
                let mut state = RobotStatePayload::new(&self.joints, &self.arm.forward_kinematics(&self.joints));
                state.index = Some(index);
                state.t = Some(w.t);
                vec![Envelope::new(MessageType::RobotState, seq, state)]
            }
            Err(e) => vec![self.error(seq, "StepCursor", ErrorCode::IKFailure, format!("waypoint {index}: {e}"))],
        }
    }

    fn step(&mut self, seq: u64, p: StepCursorPayload) -> Handled {
        let cursor = self.cursor.as_ref().expect("cursor exists in Reviewing");
        self.cursor = Some(step_cursor(cursor, p.delta));
        let mut out = vec![self.ack(seq, MessageType::StepCursor, json!({ "cursor": self.cursor }))];
        out.extend(self.cursor_state(seq));
        Ok(out)
    }

    fn set_playback(&mut self, seq: u64, state: PlaybackState) -> Handled {
        let cursor = self.cursor.as_mut().expect("cursor exists in Reviewing");
        cursor.state = state;
        if state == PlaybackState::Playing {
            self.play_seq = seq;
        }
        let of = if state == PlaybackState::Playing { MessageType::Play } else { MessageType::Pause };
        Ok(vec![self.ack(seq, of, json!({ "cursor": self.cursor }))])
    }

    /// Advances a playing cursor by one waypoint. Called by the runtime
    /// once per sample period.
    pub fn tick(&mut self) -> Vec<Envelope> {
        if self.mode != Mode::Reviewing {
            return Vec::new();
        }
        let Some(cursor) = self.cursor.as_mut() else { return Vec::new() };
        if cursor.state != PlaybackState::Playing {
            return Vec::new();
        }
        if cursor.index + 1 >= cursor.len {
            cursor.state = PlaybackState::Paused;
            return Vec::new();
        }
        cursor.index += 1;
        if cursor.index + 1 == cursor.len {
            cursor.state = PlaybackState::Paused;
        }
        self.cursor_state(self.play_seq)
    }

    fn redraw(&mut self, seq: u64, p: RedrawFromPayload) -> Handled {
        let traj = self.active.as_ref().expect("active trajectory exists in Reviewing");
        let cursor = self.cursor.as_ref().expect("cursor exists in Reviewing");
        let index = p.index.unwrap_or(cursor.index);
        let poses =
            p.samples.iter().map(|raw| self.map_pose(raw, traj.orientation_mode())).collect::<Result<Vec<_>, _>>()?;
        let edited = redraw_from(traj, index, &poses).map_err(|e| Failure::payload(e.to_string()))?;
        self.cursor = Some(PlaybackCursor { index, len: edited.len(), ..cursor.clone() });
        let reply = self.ack(seq, MessageType::RedrawFrom, json!({ "len": edited.len(), "trajectory": edited }));
        self.active = Some(edited);
        Ok(vec![reply])
    }

    fn leave_review(&mut self) {
        self.active = None;
        self.cursor = None;
        self.mode = Mode::Idle;
    }

    fn save(&mut self, seq: u64, p: SavePayload) -> Handled {
        let traj = self.active.as_ref().expect("active trajectory exists in Reviewing");
        if let Some(id) = &p.id {
            if self.store.path_of(id).exists() {
                return Err(Failure::payload(format!("trajectory `{id}` already exists")));
            }
        }
        let id = self
            .store
            .save(&traj.clone().with_id(p.id.unwrap_or_default()))
            .map_err(|e| match e {
                TrajectoryError::Invalid(m) => Failure::payload(m),
                other => other.into(),
            })?;
        self.leave_review();
        Ok(vec![self.ack(seq, MessageType::Save, json!({ "id": id }))])
    }

    fn discard(&mut self, seq: u64) -> Handled {
        self.leave_review();
        Ok(vec![self.ack(seq, MessageType::Discard, json!({}))])
    }

    fn add_to_training_set(&mut self, seq: u64) -> Handled {
        let traj = self.active.as_ref().expect("active trajectory exists in Reviewing");
        let id = self.store.save(&traj.clone().with_id(""))?;
        let mut manifest = self.manifest.clone();
        manifest.entries.push(ManifestEntry {
            id: id.clone(),
            path: DataDir::relative_trajectory_path(&id),
            added_at: (self.config.clock)(),
        });
        if let Err(e) = manifest.save(&self.data) {
            let _ = self.store.delete(&id);
            return Err(e.into());
        }
        self.manifest = manifest;
        self.leave_review();
        Ok(vec![self.ack(seq, MessageType::AddToTrainingSet, json!({ "id": id, "count": self.manifest.entries.len() }))])
    }

    fn list_training_set(&self, seq: u64) -> Vec<Envelope> {
        vec![self.ack(seq, MessageType::ListTrainingSet, json!({ "entries": self.manifest.entries }))]
    }

    fn delete(&mut self, seq: u64, p: DeletePayload) -> Handled {
        if self.manifest.contains(&p.id) {
            let mut manifest = self.manifest.clone();
            manifest.entries.retain(|e| e.id != p.id);
            manifest.save(&self.data)?;
            self.manifest = manifest;
            match self.store.delete(&p.id) {
                Ok(()) | Err(TrajectoryError::NotFound(_)) => {}
                Err(e) => log::warn!("removed `{}` from the manifest but not from disk: {e}", p.id),
            }
        } else {
            self.store.delete(&p.id)?;
        }
        Ok(vec![self.ack(
            seq,
            MessageType::DeleteTrajectory,
            json!({ "id": p.id, "count": self.manifest.entries.len() }),
        )])
    }

    fn train(&mut self, seq: u64, p: TrainPayload) -> Handled {
        let cfg = match p.n_basis {
            Some(k) => BasisConfig::with_basis_count(k),
            None => self.config.basis,
        };
        cfg.validate().map_err(|e| Failure::payload(e.to_string()))?;
        self.mode = Mode::Training;
        let result =
            storage::train_and_store(&self.data, &self.manifest, &cfg, self.config.n_resample, self.config.train_budget);
        self.mode = Mode::Idle;
        let (model, elapsed) = result.map_err(|e| match e {
            TrainError::Promp(PrompError::TooFewDemos { got, min }) => {
                Failure::new(ErrorCode::TooFewDemos, format!("training set has {got} trajectories, need {min}"))
            }
            TrainError::Promp(other) => Failure::new(ErrorCode::TrainingFailed, other.to_string()),
            TrainError::TooSlow { .. } => Failure::new(ErrorCode::TrainingTooSlow, e.to_string()),
            TrainError::Storage(s) => s.into(),
        })?;
        log::info!("trained on {} demonstrations in {elapsed:?}", self.manifest.entries.len());
        self.last_train = Some(elapsed);
        let reply = self.ack(
            seq,
            MessageType::TrainModel,
            json!({
                "n_demos": self.manifest.entries.len(),
                "n_basis": model.n_basis(),
                "reference_duration": model.reference_duration,
            }),
        );
        self.model = Some(model);
        Ok(vec![reply])
    }

    fn place_marker(&mut self, seq: u64, p: PlaceMarkerPayload) -> Handled {
        if p.clear {
            if p.position.is_some() || p.timestamp.is_some() {
                return Err(Failure::payload("clear cannot be combined with a marker"));
            }
            self.markers.clear();
        } else {
            let (Some(position), Some(timestamp)) = (p.position, p.timestamp) else {
                return Err(Failure::payload("position and timestamp are required"));
            };
            if !position.iter().all(|v| v.is_finite()) {
                return Err(Failure::payload("position must be finite"));
            }
            if !(timestamp.is_finite() && timestamp >= 0.0) {
                return Err(Failure::payload("timestamp must be finite and >= 0"));
            }
            self.markers.push(Marker { position: position.into(), timestamp });
        }
        Ok(vec![self.ack(seq, MessageType::PlaceMarker, json!({ "count": self.markers.len() }))])
    }

    /// Output grid for a model: `round(T / period) + 1` points spaced exactly
    /// one sample period apart.
    fn output_grid(&self, model: &ProMPModel) -> (usize, f64) {
        let period = self.config.sample_period;
        let n = (model.reference_duration / period).round().max(1.0) as usize + 1;
        (n, (n - 1) as f64 * period)
    }

    fn condition_and_sample(&mut self, seq: u64, p: ConditionPayload) -> Handled {
        let model = self.model.as_ref().ok_or_else(|| Failure::new(ErrorCode::NoModel, "no trained model"))?;
        let via = markers_to_via_points(model, &self.markers);
        let conditioned = model.condition(&via);
        let (n, duration) = self.output_grid(model);
        let traj = match p.seed {
            Some(seed) => conditioned.sample_trajectory(n, duration, seed),
            None => conditioned.mean_trajectory(n, duration),
        }
        .map_err(|e| Failure::new(ErrorCode::TrainingFailed, e.to_string()))?;
        let reply = self.ack(
            seq,
            MessageType::ConditionAndSample,
            json!({ "markers": self.markers.len(), "trajectory": traj }),
        );
        self.sampled = Some(traj);
        Ok(vec![reply])
    }

    fn execute(&mut self, seq: u64, p: ExecutePayload) -> Handled {
        let traj = match (self.mode, &p.id) {
            (Mode::Reviewing, None) => self.active.clone().expect("active trajectory exists in Reviewing"),
            (Mode::Reviewing, Some(_)) => {
                return Err(Failure::payload("id is only accepted from Idle"));
            }
            (_, Some(id)) => self.store.load(id)?,
            (_, None) => {
                self.sampled.clone().ok_or_else(|| Failure::payload("no sampled trajectory to execute"))?
            }
        };
        let joints = executor::preflight(&self.arm, &self.joints, &traj, &self.config.ik)
            .map_err(|e| Failure::new(ErrorCode::PreflightIKFailure, e.to_string()))?;
        let warnings = executor::plan_collisions(&self.arm, &joints, &self.scene.boxes);
        self.executing = Some(joints.clone());
        self.pending = Some(ExecutionPlan { seq, trajectory: traj.clone(), joints });
        self.mode = Mode::Executing;
        let mut out = vec![self.ack(
            seq,
            MessageType::Execute,
            json!({ "waypoints": traj.len(), "duration": traj.duration() }),
        )];
        out.extend(warnings.into_iter().map(|(i, c)| {
            Envelope::new(
                MessageType::CollisionWarning,
                seq,
                CollisionWarningPayload { link: c.link, box_id: c.box_id, index: Some(i) },
            )
        }));
        Ok(out)
    }

    fn execution_done(&mut self, seq: u64, outcome: Option<&Result<ExecutionReport, ExecError>>) -> Handled {
        let joints = self.executing.take();
        self.pending = None;
        let completed = !matches!(outcome, Some(Err(_)));
        if completed {
            if let Some(last) = joints.and_then(|j| j.last().copied()) {
                self.joints = last;
            }
        }
        self.leave_review();
        let report = match outcome {
            Some(Ok(r)) => json!({ "ok": true, "report": r }),
            Some(Err(e)) => json!({ "ok": false, "error": e.to_string() }),
            None => json!({ "ok": true }),
        };
        Ok(vec![self.ack(seq, MessageType::ExecutionDone, report)])
    }

    /// Completes an execution started by the runtime. Returns the
    /// `ExecutionDone` notification for the client, preceded by an error
    /// reply when streaming failed.
    pub fn finish_execution(&mut self, plan_seq: u64, outcome: Result<ExecutionReport, ExecError>) -> Vec<Envelope> {
        if self.mode != Mode::Executing {
            return Vec::new();
        }
        let mut out = Vec::new();
        if let Err(e) = &outcome {
            let code = match e {
                ExecError::EndpointUnreachable { .. } => ErrorCode::EndpointUnreachable,
                ExecError::EndpointTimeout { .. } => ErrorCode::EndpointTimeout,
            };
            out.push(self.error(plan_seq, MessageType::Execute.as_str(), code, e.to_string()));
        }
        let done = match &outcome {
            Ok(r) => json!({ "ok": true, "report": r }),
            Err(e) => json!({ "ok": false, "error": e.to_string() }),
        };
        let _ = self.execution_done(plan_seq, Some(&outcome));
        out.push(Envelope::new(MessageType::ExecutionDone, plan_seq, done));
        out
    }
}

fn payload<T: serde::de::DeserializeOwned>(env: &Envelope) -> Result<T, Failure> {
    env.parse_payload().map_err(Failure::payload)
}

/// Markers become position via points at phase `timestamp / T_ref`,
/// clamped to `[0, 1]`, with the model's observation noise.
pub fn markers_to_via_points(model: &ProMPModel, markers: &[Marker]) -> Vec<ViaPoint> {
    let noise_var = model.cfg.noise_std * model.cfg.noise_std;
    markers
        .iter()
        .map(|m| {
            let phase =
                if model.reference_duration > 0.0 { (m.timestamp / model.reference_duration).clamp(0.0, 1.0) } else { 0.0 };
            ViaPoint::position(phase, m.position, noise_var)
        })
        .collect()
}
