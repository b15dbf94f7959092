//! Execution: preflight IK over a whole trajectory, then timed streaming of
//! one `RobotState` per waypoint to a robot endpoint over TCP.

use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use pbd_core::kinematics::{ArmModel, IkError, IkParams, JointConfig, Pose};
use pbd_core::quat;
use pbd_core::scene::{collision_check, Collision, SceneBox};
use pbd_core::trajectory::Trajectory;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::protocol::{Envelope, MessageType, RobotStatePayload};

/// Translation per IK substep, meters.
const SUBSTEP_DISTANCE: f64 = 0.02;
/// Rotation per IK substep, radians.
const SUBSTEP_ANGLE: f64 = 0.1;
const MAX_SUBSTEPS: usize = 64;

/// Substep count for an IK segment between two poses.
pub fn substeps_between(from: &Pose, to: &Pose) -> usize {
    let by_distance = (from.position - to.position).norm() / SUBSTEP_DISTANCE;
    let by_angle = quat::angle_between(&from.orientation, &to.orientation) / SUBSTEP_ANGLE;
    (by_distance.max(by_angle).ceil() as usize).clamp(1, MAX_SUBSTEPS)
}

#[derive(Debug, Error)]
#[error("waypoint {index}: {source}")]
pub struct PreflightError {
    pub index: usize,
    #[source]
    pub source: IkError,
}

/// Joint configuration for every waypoint, each seeded from the previous
/// one. Fails on the first waypoint that cannot be solved.
pub fn preflight(
    arm: &ArmModel,
    start: &JointConfig,
    traj: &Trajectory,
    params: &IkParams,
) -> Result<Vec<JointConfig>, PreflightError> {
    let mut q = *start;
    let mut pose = arm.forward_kinematics(&q);
    let mut out = Vec::with_capacity(traj.len());
    for (index, w) in traj.waypoints().iter().enumerate() {
        let substeps = substeps_between(&pose, &w.pose);
        let chain = arm
            .solve_ik_segment(&q, &w.pose, substeps, params)
            .map_err(|source| PreflightError { index, source })?;
        q = *chain.last().expect("segment has at least one substep");
        pose = w.pose;
        out.push(q);
    }
    Ok(out)
}

/// Collision warnings along a planned execution, tagged with the waypoint
/// index.
pub fn plan_collisions(arm: &ArmModel, joints: &[JointConfig], boxes: &[SceneBox]) -> Vec<(usize, Collision)> {
    joints
        .iter()
        .enumerate()
        .flat_map(|(i, q)| collision_check(arm, q, boxes).into_iter().map(move |c| (i, c)))
        .collect()
}

/// A preflighted trajectory waiting to be streamed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionPlan {
    /// Sequence number of the `Execute` request.
    pub seq: u64,
    pub trajectory: Trajectory,
    pub joints: Vec<JointConfig>,
}

impl ExecutionPlan {
    pub fn state(&self, arm: &ArmModel, index: usize) -> Envelope {
        let w = &self.trajectory.waypoints()[index];
        let q = &self.joints[index];
        let mut payload = RobotStatePayload::new(q, &arm.forward_kinematics(q));
        payload.index = Some(index);
        payload.t = Some(w.t);
        Envelope::new(MessageType::RobotState, index as u64, payload)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExecutorConfig {
    pub connect_timeout: Duration,
    /// How long to wait for outstanding echoes after the last send.
    pub echo_timeout: Duration,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self { connect_timeout: Duration::from_secs(1), echo_timeout: Duration::from_secs(2) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub sent: usize,
    pub echoed: usize,
    /// Send time of each state, seconds after the first send.
    pub send_times: Vec<f64>,
    /// Receive time of each echo on the robot's clock, seconds.
    pub echo_times: Vec<f64>,
    /// Echoes whose embedded state differs from what was sent.
    pub mismatched: usize,
    /// Worst deviation of send spacing from waypoint spacing, seconds.
    pub send_jitter: f64,
    /// Worst deviation of receive spacing from waypoint spacing, seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo_jitter: Option<f64>,
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("cannot reach robot endpoint {endpoint}: {message}")]
    EndpointUnreachable { endpoint: String, message: String },
    #[error("robot endpoint echoed {echoed} of {sent} states before timing out")]
    EndpointTimeout { sent: usize, echoed: usize },
}

/// One line written back by the robot endpoint.
#[derive(Debug, Deserialize)]
pub struct EchoLine {
    pub recv_t: f64,
    pub state: Box<RawValue>,
}

/// Largest `|(a_i − a_0) − (b_i − b_0)|`.
pub fn spacing_jitter(actual: &[f64], nominal: &[f64]) -> f64 {
    match (actual.first(), nominal.first()) {
        (Some(a0), Some(b0)) => {
            actual.iter().zip(nominal).map(|(a, b)| ((a - a0) - (b - b0)).abs()).fold(0.0, f64::max)
        }
        _ => 0.0,
    }
}

fn sleep_until(deadline: Instant) {
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let left = deadline - now;
        if left > Duration::from_millis(2) {
            thread::sleep(left - Duration::from_millis(1));
        } else {
            thread::yield_now();
        }
    }
}

/// Streams the plan at waypoint timestamps. Each state is also handed to
/// `on_state` (for mirroring to the client). Without an endpoint the timing
/// loop runs but nothing leaves the process.
pub fn stream(
    arm: &ArmModel,
    plan: &ExecutionPlan,
    endpoint: Option<&str>,
    cfg: &ExecutorConfig,
    mut on_state: impl FnMut(&Envelope),
) -> Result<ExecutionReport, ExecError> {
    let states: Vec<Envelope> = (0..plan.joints.len()).map(|i| plan.state(arm, i)).collect();
    let lines: Vec<String> = states.iter().map(Envelope::to_line).collect();
    let nominal: Vec<f64> = plan.trajectory.waypoints().iter().map(|w| w.t).collect();

    let mut conn = match endpoint {
        Some(ep) => Some(connect(ep, cfg.connect_timeout)?),
        None => None,
    };
    let echo_rx = match &conn {
        Some(stream) => {
            let reader = stream.try_clone().map_err(|e| unreachable(endpoint, e))?;
            let (tx, rx) = mpsc::channel();
            thread::spawn(move || {
                for line in BufReader::new(reader).lines() {
                    let Ok(line) = line else { break };
                    if line.trim().is_empty() {
                        continue;
                    }
                    if tx.send(line).is_err() {
                        break;
                    }
                }
            });
            Some(rx)
        }
        None => None,
    };

    let start = Instant::now();
    let t0 = nominal.first().copied().unwrap_or(0.0);
    let mut send_times = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        sleep_until(start + Duration::from_secs_f64((nominal[i] - t0).max(0.0)));
        if let Some(stream) = conn.as_mut() {
            let mut buf = Vec::with_capacity(line.len() + 1);
            buf.extend_from_slice(line.as_bytes());
            buf.push(b'\n');
            stream.write_all(&buf).map_err(|e| unreachable(endpoint, e))?;
        }
        send_times.push(start.elapsed().as_secs_f64());
        on_state(&states[i]);
    }
    let send_jitter = spacing_jitter(&send_times, &nominal);

    let mut report = ExecutionReport {
        sent: lines.len(),
        echoed: 0,
        send_times,
        echo_times: Vec::new(),
        mismatched: 0,
        send_jitter,
        echo_jitter: None,
    };
    let Some(rx) = echo_rx else { return Ok(report) };

    let deadline = Instant::now() + cfg.echo_timeout;
    while report.echoed < lines.len() {
        let left = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(left) {
            Ok(text) => {
                let idx = report.echoed;
                match serde_json::from_str::<EchoLine>(&text) {
                    Ok(echo) => {
                        if echo.state.get() != lines[idx] {
                            report.mismatched += 1;
                        }
                        report.echo_times.push(echo.recv_t);
                    }
                    Err(_) => report.mismatched += 1,
                }
                report.echoed += 1;
            }
            Err(_) => break,
        }
    }
    if let Some(stream) = conn {
        let _ = stream.shutdown(Shutdown::Both);
    }
    if report.echoed < report.sent {
        return Err(ExecError::EndpointTimeout { sent: report.sent, echoed: report.echoed });
    }
    report.echo_jitter = Some(spacing_jitter(&report.echo_times, &nominal));
    Ok(report)
}

fn unreachable(endpoint: Option<&str>, e: impl std::fmt::Display) -> ExecError {
    ExecError::EndpointUnreachable { endpoint: endpoint.unwrap_or_default().to_string(), message: e.to_string() }
}

fn connect(endpoint: &str, timeout: Duration) -> Result<TcpStream, ExecError> {
    let addrs: Vec<_> = endpoint.to_socket_addrs().map_err(|e| unreachable(Some(endpoint), e))?.collect();
    let mut last = None;
    for addr in addrs {
        match TcpStream::connect_timeout(&addr, timeout) {
            Ok(s) => {
                s.set_nodelay(true).map_err(|e| unreachable(Some(endpoint), e))?;
                return Ok(s);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(unreachable(Some(endpoint), last.map_or("no address".to_string(), |e| e.to_string())))
}
