//! Demonstrated trajectories: wall-clock gated recording onto a fixed
//! sampling grid, hand-orientation mapping, playback cursor, rewind/redraw
//! editing, phase resampling, and one-file-per-trajectory persistence.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::Pose;
use crate::quat;

/// Fixed recording period, seconds.
pub const DEFAULT_SAMPLE_PERIOD: f64 = 0.2;

/// Allowed deviation of a timestamp gap from the sampling period.
pub const GRID_TOL: f64 = 1e-6;

/// Slack on the wall-clock gate so that samples arriving exactly one period
/// apart are not rejected by rounding in the caller's clock arithmetic.
const GATE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OrientationMode {
    #[default]
    Fixed,
    Captured,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    #[serde(flatten)]
    pub pose: Pose,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("recorder is not active")]
    RecorderInactive,
    #[error("index {index} out of range for trajectory of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("trajectory has {len} waypoints, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("invalid trajectory: {0}")]
    Invalid(String),
    #[error("trajectory `{0}` not found")]
    NotFound(String),
    #[error("storage failure: {0}")]
    StorageFailure(String),
}

impl From<io::Error> for TrajectoryError {
    fn from(e: io::Error) -> Self {
        TrajectoryError::StorageFailure(e.to_string())
    }
}

/// Time-stamped pose sequence on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    id: String,
    sample_period: f64,
    orientation_mode: OrientationMode,
    waypoints: Vec<Waypoint>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryFile {
    id: String,
    sample_period: f64,
    orientation_mode: OrientationMode,
    waypoints: Vec<Waypoint>,
}

impl<'de> Deserialize<'de> for Trajectory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let f = TrajectoryFile::deserialize(d)?;
        Trajectory::new(f.id, f.sample_period, f.orientation_mode, f.waypoints).map_err(serde::de::Error::custom)
    }
}

impl Trajectory {
    pub fn new(
        id: impl Into<String>,
        sample_period: f64,
        orientation_mode: OrientationMode,
        waypoints: Vec<Waypoint>,
    ) -> Result<Self, TrajectoryError> {
        if !(sample_period > 0.0 && sample_period.is_finite()) {
            return Err(TrajectoryError::Invalid(format!("sample period {sample_period} must be > 0")));
        }
        if waypoints.is_empty() {
            return Err(TrajectoryError::TooShort { len: 0, min: 1 });
        }
        for (i, w) in waypoints.iter().enumerate() {
            if !(w.t >= 0.0 && w.t.is_finite()) {
                return Err(TrajectoryError::Invalid(format!("waypoint {i}: timestamp {} must be >= 0", w.t)));
            }
            if w.pose.position.iter().any(|c| !c.is_finite()) {
                return Err(TrajectoryError::Invalid(format!("waypoint {i}: non-finite position")));
            }
        }
        for (i, pair) in waypoints.windows(2).enumerate() {
            let gap = pair[1].t - pair[0].t;
            if (gap - sample_period).abs() > GRID_TOL {
                return Err(TrajectoryError::Invalid(format!(
                    "gap {gap} between waypoints {i} and {} differs from the sample period {sample_period}",
                    i + 1
                )));
            }
        }
        Ok(Self { id: id.into(), sample_period, orientation_mode, waypoints })
    }

    /// Builds a trajectory stamped at `k · sample_period`.
    pub fn from_poses(
        id: impl Into<String>,
        sample_period: f64,
        orientation_mode: OrientationMode,
        poses: impl IntoIterator<Item = Pose>,
    ) -> Result<Self, TrajectoryError> {
        let waypoints = poses
            .into_iter()
            .enumerate()
            .map(|(k, pose)| Waypoint { t: k as f64 * sample_period, pose })
            .collect();
        Self::new(id, sample_period, orientation_mode, waypoints)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    pub fn orientation_mode(&self) -> OrientationMode {
        self.orientation_mode
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    /// Time span from the first to the last waypoint.
    pub fn duration(&self) -> f64 {
        self.waypoints[self.waypoints.len() - 1].t - self.waypoints[0].t
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, TrajectoryError> {
        serde_json::from_str(text).map_err(|e| TrajectoryError::Invalid(e.to_string()))
    }
}

impl AsRef<[Waypoint]> for Trajectory {
    fn as_ref(&self) -> &[Waypoint] {
        &self.waypoints
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecorderConfig {
    pub sample_period: f64,
    pub orientation_mode: OrientationMode,
}

impl Default for RecorderConfig {
    fn default() -> Self {
        Self { sample_period: DEFAULT_SAMPLE_PERIOD, orientation_mode: OrientationMode::Fixed }
    }
}

/// Single-writer recorder that gates an incoming pose stream by wall-clock
/// time and re-stamps accepted samples onto the exact sampling grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Recorder {
    config: RecorderConfig,
    active: bool,
    last_accepted_wall: Option<f64>,
    waypoints: Vec<Waypoint>,
}

impl Recorder {
    pub fn new(config: RecorderConfig) -> Self {
        Self { config, active: false, last_accepted_wall: None, waypoints: Vec::new() }
    }

    /// Starts a fresh recording, dropping anything recorded before.
    pub fn start(&mut self) {
        self.active = true;
        self.last_accepted_wall = None;
        self.waypoints.clear();
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn config(&self) -> &RecorderConfig {
        &self.config
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    /// Returns whether the sample was kept.
    pub fn record_sample(&mut self, pose: Pose, t_wall: f64) -> Result<bool, TrajectoryError> {
        if !self.active {
            return Err(TrajectoryError::RecorderInactive);
        }
        if let Some(last) = self.last_accepted_wall {
            if t_wall - last < self.config.sample_period - GATE_EPS {
                return Ok(false);
            }
        }
        let t = self.waypoints.len() as f64 * self.config.sample_period;
        self.waypoints.push(Waypoint { t, pose });
        self.last_accepted_wall = Some(t_wall);
        Ok(true)
    }

    /// Stops recording and returns the recorded trajectory.
    pub fn finish(&mut self, id: impl Into<String>) -> Result<Trajectory, TrajectoryError> {
        self.active = false;
        let waypoints = std::mem::take(&mut self.waypoints);
        Trajectory::new(id, self.config.sample_period, self.config.orientation_mode, waypoints)
    }
}

/// Hand orientation that corresponds to "palm facing down".
pub fn palm_down_reference() -> UnitQuaternion<f64> {
    UnitQuaternion::identity()
}

/// Maps a tracked hand orientation to an end-effector orientation.
///
/// In `Fixed` mode the tool always points down. In `Captured` mode the hand
/// rotation is composed with the calibration rotation that sends the
/// palm-down reference to the tool-down orientation.
pub fn map_hand_orientation(raw: &UnitQuaternion<f64>, mode: OrientationMode) -> UnitQuaternion<f64> {
    match mode {
        OrientationMode::Fixed => quat::tool_down(),
        OrientationMode::Captured => {
            let calibration = palm_down_reference().inverse() * quat::tool_down();
            UnitQuaternion::new_normalize((raw * calibration).into_inner())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PlaybackState {
    Playing,
    #[default]
    Paused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaybackCursor {
    pub trajectory_id: String,
    pub index: usize,
    pub len: usize,
    pub state: PlaybackState,
}

impl PlaybackCursor {
    pub fn new(traj: &Trajectory) -> Self {
        Self { trajectory_id: traj.id().to_string(), index: 0, len: traj.len(), state: PlaybackState::Paused }
    }
}

/// Moves the cursor by `delta`, clamped to the trajectory.
pub fn step_cursor(cursor: &PlaybackCursor, delta: i64) -> PlaybackCursor {
    let last = cursor.len.saturating_sub(1) as i64;
    let index = (cursor.index as i64).saturating_add(delta).clamp(0, last) as usize;
    PlaybackCursor { index, ..cursor.clone() }
}

/// Keeps waypoints `0..=cursor_index` and appends `new_samples` on the grid
/// right after the cursor.
pub fn redraw_from(traj: &Trajectory, cursor_index: usize, new_samples: &[Pose]) -> Result<Trajectory, TrajectoryError> {
    if cursor_index >= traj.len() {
        return Err(TrajectoryError::IndexOutOfRange { index: cursor_index, len: traj.len() });
    }
    let period = traj.sample_period();
    let mut waypoints = traj.waypoints()[..=cursor_index].to_vec();
    waypoints.extend(
        new_samples
            .iter()
            .enumerate()
            .map(|(k, pose)| Waypoint { t: (cursor_index + 1 + k) as f64 * period, pose: *pose }),
    );
    Trajectory::new(traj.id(), period, traj.orientation_mode(), waypoints)
}

/// Pose at normalised time `phase ∈ [0, 1]`: linear in position, spherical
/// in orientation.
pub fn pose_at_phase(waypoints: &[Waypoint], phase: f64) -> Pose {
    let t0 = waypoints[0].t;
    let span = waypoints[waypoints.len() - 1].t - t0;
    let u = t0 + phase.clamp(0.0, 1.0) * span;
    // first index with t > u
    let hi = waypoints.partition_point(|w| w.t <= u);
    if hi == 0 {
        return waypoints[0].pose;
    }
    if hi >= waypoints.len() {
        return waypoints[waypoints.len() - 1].pose;
    }
    let (a, b) = (&waypoints[hi - 1], &waypoints[hi]);
    let s = (u - a.t) / (b.t - a.t);
    if s == 0.0 {
        return a.pose;
    }
    Pose::new(
        a.pose.position + (b.pose.position - a.pose.position) * s,
        quat::slerp(&a.pose.orientation, &b.pose.orientation, s),
    )
}

/// Uniform phases `k / (n − 1)` for `k = 0..n`.
pub fn uniform_phases(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
}

/// Resamples a trajectory at `n` uniformly spaced phases.
pub fn resample_phase(waypoints: &[Waypoint], n: usize) -> Result<Vec<(f64, Pose)>, TrajectoryError> {
    if waypoints.len() < 2 {
        return Err(TrajectoryError::TooShort { len: waypoints.len(), min: 2 });
    }
    if n < 2 {
        return Err(TrajectoryError::TooShort { len: n, min: 2 });
    }
    Ok(uniform_phases(n).into_iter().map(|z| (z, pose_at_phase(waypoints, z))).collect())
}

/// Directory of trajectory documents, one `<id>.json` per trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryStore {
    dir: PathBuf,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl TrajectoryStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, TrajectoryError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_of(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    /// Ids currently stored, sorted.
    pub fn list(&self) -> Result<Vec<String>, TrajectoryError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Next unused id of the form `traj-NNNN`.
    pub fn next_id(&self) -> Result<String, TrajectoryError> {
        let next = self
            .list()?
            .iter()
            .filter_map(|id| id.strip_prefix("traj-").and_then(|n| n.parse::<u64>().ok()))
            .max()
            .map_or(1, |m| m + 1);
        Ok(format!("traj-{next:04}"))
    }

    /// Writes the trajectory and returns its id. Trajectories with an empty
    /// id are given a fresh one.
    pub fn save(&self, traj: &Trajectory) -> Result<String, TrajectoryError> {
        let id = if traj.id().is_empty() { self.next_id()? } else { traj.id().to_string() };
        if !valid_id(&id) {
            return Err(TrajectoryError::Invalid(format!("illegal trajectory id `{id}`")));
        }
        let doc = traj.clone().with_id(id.clone()).to_json();
        write_atomic(&self.path_of(&id), doc.as_bytes())?;
        Ok(id)
    }

    pub fn load(&self, id: &str) -> Result<Trajectory, TrajectoryError> {
        if !valid_id(id) {
            return Err(TrajectoryError::NotFound(id.to_string()));
        }
        let text = match fs::read_to_string(self.path_of(id)) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(TrajectoryError::NotFound(id.to_string())),
            Err(e) => return Err(e.into()),
        };
        Trajectory::from_json(&text).map_err(|e| TrajectoryError::StorageFailure(format!("{id}: {e}")))
    }

    pub fn delete(&self, id: &str) -> Result<(), TrajectoryError> {
        if !valid_id(id) {
            return Err(TrajectoryError::NotFound(id.to_string()));
        }
        match fs::remove_file(self.path_of(id)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(TrajectoryError::NotFound(id.to_string())),
            Err(e) => Err(e.into()),
        }
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
