//! Data directory layout and the training-set manifest.
//!
//! ```text
//! <data>/trajectories/<id>.json
//! <data>/manifest.json
//! <data>/model.json
//! <data>/scene.json
//! <data>/arm.json
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use pbd_core::promp::{train_promp, BasisConfig, ProMPModel, PrompError};
use pbd_core::trajectory::{write_atomic, Trajectory, TrajectoryError, TrajectoryStore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    /// Opens (and creates if needed) a data directory.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let root = root.into();
        let traj = root.join("trajectories");
        fs::create_dir_all(&traj).map_err(|source| StorageError::Io { path: traj, source })?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn trajectories(&self) -> PathBuf {
        self.root.join("trajectories")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }

    pub fn scene(&self) -> PathBuf {
        self.root.join("scene.json")
    }

    pub fn arm(&self) -> PathBuf {
        self.root.join("arm.json")
    }

    pub fn store(&self) -> Result<TrajectoryStore, StorageError> {
        Ok(TrajectoryStore::open(self.trajectories())?)
    }

    /// Path of a trajectory relative to the data root, as recorded in the
    /// manifest.
    pub fn relative_trajectory_path(id: &str) -> String {
        format!("trajectories/{id}.json")
    }

    pub fn load_model(&self) -> Result<Option<ProMPModel>, StorageError> {
        let path = self.model();
        match fs::read_to_string(&path) {
            Ok(text) => ProMPModel::from_json(&text)
                .map(Some)
                .map_err(|e| StorageError::Corrupt { path, message: e.to_string() }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(StorageError::Io { path, source }),
        }
    }

    pub fn save_model(&self, model: &ProMPModel) -> Result<(), StorageError> {
        let path = self.model();
        write_atomic(&path, model.to_json().as_bytes()).map_err(|source| StorageError::Io { path, source })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    /// Seconds since the Unix epoch.
    pub added_at: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Reads the manifest, treating a missing file as empty. Every entry
    /// must resolve to an existing file under `data`.
    pub fn load(data: &DataDir) -> Result<Self, StorageError> {
        let path = data.manifest();
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Self::default()),
            Err(source) => return Err(StorageError::Io { path, source }),
        };
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| StorageError::Corrupt { path: path.clone(), message: e.to_string() })?;
        for (i, e) in manifest.entries.iter().enumerate() {
            if manifest.entries[..i].iter().any(|o| o.id == e.id) {
                return Err(StorageError::Corrupt { path, message: format!("duplicate id `{}`", e.id) });
            }
            if !data.root().join(&e.path).is_file() {
                return Err(StorageError::Corrupt { path, message: format!("entry `{}` points at missing {}", e.id, e.path) });
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, data: &DataDir) -> Result<(), StorageError> {
        let path = data.manifest();
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        write_atomic(&path, text.as_bytes()).map_err(|source| StorageError::Io { path, source })
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.iter().any(|e| e.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn load_trajectories(&self, data: &DataDir) -> Result<Vec<Trajectory>, StorageError> {
        let store = data.store()?;
        self.entries.iter().map(|e| Ok(store.load(&e.id)?)).collect()
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Promp(#[from] PrompError),
    #[error("training took {elapsed:?}, budget is {budget:?}")]
    TooSlow { elapsed: Duration, budget: Duration },
}

/// Trains over the manifest trajectories and writes the model file. Nothing
/// is written when training fails or exceeds `budget`.
pub fn train_and_store(
    data: &DataDir,
    manifest: &Manifest,
    cfg: &BasisConfig,
    n_resample: usize,
    budget: Duration,
) -> Result<(ProMPModel, Duration), TrainError> {
    let demos = manifest.load_trajectories(data)?;
    let start = Instant::now();
    let model = train_promp(&demos, n_resample, cfg)?;
    let elapsed = start.elapsed();
    if elapsed > budget {
        return Err(TrainError::TooSlow { elapsed, budget });
    }
    data.save_model(&model)?;
    Ok((model, elapsed))
}
