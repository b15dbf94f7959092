//! Trajectory quality metrics: mean jerk, chord deviation, squared-step
//! variation, and phase-aligned mean squared error.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{self, Waypoint, GRID_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("trajectory has {len} waypoints, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("timestamps are not on a uniform grid")]
    NonUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub mean_jerk: f64,
    pub deviation: f64,
    pub variation: f64,
}

fn require(w: &[Waypoint], min: usize) -> Result<(), MetricsError> {
    if w.len() < min {
        Err(MetricsError::TooShort { len: w.len(), min })
    } else {
        Ok(())
    }
}

/// Mean norm of the jerk vector, m/s³.
///
/// Uses the third difference `(p[i+3] − 3p[i+2] + 3p[i+1] − p[i]) / h³`,
/// which is centered on the half-grid point `t[i] + 1.5h` and exact for
/// cubic motion.
pub fn mean_jerk(traj: impl AsRef<[Waypoint]>) -> Result<f64, MetricsError> {
    let w = traj.as_ref();
    require(w, 4)?;
    let h = w[1].t - w[0].t;
    if !(h > 0.0) || w.windows(2).any(|p| ((p[1].t - p[0].t) - h).abs() > GRID_TOL) {
        return Err(MetricsError::NonUniform);
    }
    let h3 = h * h * h;
    let total: f64 = w
        .windows(4)
        .map(|p| {
            let d = p[3].pose.position - 3.0 * p[2].pose.position + 3.0 * p[1].pose.position - p[0].pose.position;
            (d / h3).norm()
        })
        .sum();
    Ok(total / (w.len() - 3) as f64)
}

/// Mean perpendicular distance from the start-to-end chord, meters. For a
/// closed path (zero-length chord) this is the mean distance to the start.
pub fn deviation(traj: impl AsRef<[Waypoint]>) -> Result<f64, MetricsError> {
    let w = traj.as_ref();
    require(w, 2)?;
    let a = w[0].pose.position;
    let chord = w[w.len() - 1].pose.position - a;
    let len = chord.norm();
    let dist = |p: &Vector3<f64>| -> f64 {
        let r = p - a;
        if len == 0.0 {
            r.norm()
        } else {
            r.cross(&chord).norm() / len
        }
    };
    Ok(w.iter().map(|x| dist(&x.pose.position)).sum::<f64>() / w.len() as f64)
}

/// Sum of squared step lengths between consecutive waypoints, m².
pub fn variation(traj: impl AsRef<[Waypoint]>) -> Result<f64, MetricsError> {
    let w = traj.as_ref();
    require(w, 2)?;
    Ok(w.windows(2).map(|p| (p[1].pose.position - p[0].pose.position).norm_squared()).sum())
}

/// Mean squared position distance after resampling both trajectories at
/// `n` common phases, m².
pub fn mse(a: impl AsRef<[Waypoint]>, b: impl AsRef<[Waypoint]>, n: usize) -> Result<f64, MetricsError> {
    let (a, b) = (a.as_ref(), b.as_ref());
    require(a, 2)?;
    require(b, 2)?;
    if n < 2 {
        return Err(MetricsError::TooShort { len: n, min: 2 });
    }
    let total: f64 = trajectory::uniform_phases(n)
        .into_iter()
        .map(|z| {
            let pa = trajectory::pose_at_phase(a, z).position;
            let pb = trajectory::pose_at_phase(b, z).position;
            let d = pa - pb;
            d.x * d.x + d.y * d.y + d.z * d.z
        })
        .sum();
    Ok(total / n as f64)
}

pub fn smoothness(traj: impl AsRef<[Waypoint]>) -> Result<SmoothnessReport, MetricsError> {
    let w = traj.as_ref();
    Ok(SmoothnessReport { mean_jerk: mean_jerk(w)?, deviation: deviation(w)?, variation: variation(w)? })
}
