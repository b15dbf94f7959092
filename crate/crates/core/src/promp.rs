//! Probabilistic movement primitives over normalised Gaussian bases.
//!
//! Each Cartesian dimension is an independent scalar primitive: a Gaussian
//! over basis weights, fitted from demonstrations by ridge regression.
//! Via points condition the weight distribution in closed form. A
//! contextual variant regresses the weights affinely on a scalar task
//! parameter.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::Pose;
use crate::quat;
use crate::trajectory::{self, OrientationMode, Trajectory};

/// Modeled Cartesian dimensions (x, y, z).
pub const DIMS: usize = 3;

pub const DEFAULT_BASIS_COUNT: usize = 20;
pub const DEFAULT_RIDGE: f64 = 1e-8;
pub const DEFAULT_COV_REG: f64 = 1e-8;
pub const DEFAULT_NOISE_STD: f64 = 1e-4;
pub const DEFAULT_RESAMPLE: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrompError {
    #[error("need at least {min} demonstrations, got {got}")]
    TooFewDemos { got: usize, min: usize },
    #[error("demonstration {index} has {len} waypoints, need at least 2")]
    TooShort { index: usize, len: usize },
    #[error("regularised normal equations are singular")]
    SingularSystem,
    #[error("all context values are equal")]
    DegenerateContexts,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

/// Basis layout and regression hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    /// Number of basis functions per dimension.
    pub n_basis: usize,
    /// Gaussian width, in squared-phase units.
    pub bandwidth: f64,
    /// Ridge penalty for weight fitting.
    pub ridge: f64,
    /// Default via-point observation noise (standard deviation, meters).
    pub noise_std: f64,
    /// Diagonal added to the sample weight covariance.
    pub cov_reg: f64,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self::with_basis_count(DEFAULT_BASIS_COUNT)
    }
}

impl BasisConfig {
    /// Default hyperparameters for `k` basis functions, with bandwidth
    /// `1 / (2k²)`.
    pub fn with_basis_count(k: usize) -> Self {
        let kf = k.max(1) as f64;
        Self {
            n_basis: k,
            bandwidth: 1.0 / (2.0 * kf * kf),
            ridge: DEFAULT_RIDGE,
            noise_std: DEFAULT_NOISE_STD,
            cov_reg: DEFAULT_COV_REG,
        }
    }

    pub fn validate(&self) -> Result<(), PrompError> {
        if self.n_basis == 0 {
            return Err(PrompError::InvalidConfig("n_basis must be >= 1".into()));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(PrompError::InvalidConfig("bandwidth must be > 0".into()));
        }
        if !(self.ridge > 0.0 && self.ridge.is_finite()) {
            return Err(PrompError::InvalidConfig("ridge must be > 0".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(PrompError::InvalidConfig("noise_std must be >= 0".into()));
        }
        if !(self.cov_reg >= 0.0 && self.cov_reg.is_finite()) {
            return Err(PrompError::InvalidConfig("cov_reg must be >= 0".into()));
        }
        Ok(())
    }

    /// Centers evenly spaced over `[−2σ, 1 + 2σ]` with `σ = √bandwidth`.
    pub fn centers(&self) -> Vec<f64> {
        let k = self.n_basis;
        if k == 1 {
            return vec![0.5];
        }
        let margin = 2.0 * self.bandwidth.sqrt();
        let lo = -margin;
        let hi = 1.0 + margin;
        (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
    }
}

fn basis_row_with(z: f64, centers: &[f64], bandwidth: f64) -> DVector<f64> {
    let exps: Vec<f64> = centers.iter().map(|c| -(z - c) * (z - c) / (2.0 * bandwidth)).collect();
    let peak = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw = DVector::from_iterator(exps.len(), exps.iter().map(|e| (e - peak).exp()));
    let sum = raw.sum();
    raw / sum
}

/// Normalised basis activations at one phase.
pub fn basis_row(z: f64, cfg: &BasisConfig) -> DVector<f64> {
    basis_row_with(z, &cfg.centers(), cfg.bandwidth)
}

/// `n × K` design matrix; each row sums to one.
pub fn basis_matrix(phases: &[f64], cfg: &BasisConfig) -> DMatrix<f64> {
    let centers = cfg.centers();
    let mut phi = DMatrix::zeros(phases.len(), cfg.n_basis);
    for (i, &z) in phases.iter().enumerate() {
        phi.set_row(i, &basis_row_with(z, &centers, cfg.bandwidth).transpose());
    }
    phi
}

/// Factorised ridge system for a fixed design matrix.
struct RidgeSolver {
    phi: DMatrix<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl RidgeSolver {
    fn new(phases: &[f64], cfg: &BasisConfig) -> Result<Self, PrompError> {
        cfg.validate()?;
        let phi = basis_matrix(phases, cfg);
        let k = cfg.n_basis;
        let gram = phi.transpose() * &phi + DMatrix::identity(k, k) * cfg.ridge;
        let chol = gram.cholesky().ok_or(PrompError::SingularSystem)?;
        Ok(Self { phi, chol })
    }

    fn solve(&self, y: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(&(self.phi.transpose() * y))
    }
}

/// Ridge-regression weights `(ΦᵀΦ + λI)⁻¹ Φᵀ y` for one dimension.
pub fn fit_weights(series: &[f64], phases: &[f64], cfg: &BasisConfig) -> Result<DVector<f64>, PrompError> {
    if series.len() != phases.len() {
        return Err(PrompError::InvalidConfig("series and phases differ in length".into()));
    }
    if series.len() < 2 {
        return Err(PrompError::TooShort { index: 0, len: series.len() });
    }
    let solver = RidgeSolver::new(phases, cfg)?;
    Ok(solver.solve(&DVector::from_column_slice(series)))
}

/// Gaussian over the basis weights of one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDistribution {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl WeightDistribution {
    fn condition(&mut self, phi: &DVector<f64>, value: f64, noise_var: f64) {
        let sigma_phi = &self.cov * phi;
        let denom = noise_var + phi.dot(&sigma_phi);
        if !(denom > 0.0) {
            return;
        }
        let gain = &sigma_phi / denom;
        let innovation = value - phi.dot(&self.mean);
        self.mean += &gain * innovation;
        // Σ ← Σ − L φᵀ Σ, then restore exact symmetry.
        self.cov -= &gain * sigma_phi.transpose();
        symmetrize(&mut self.cov);
    }

    /// Symmetric square-root factor `F` with `F Fᵀ = Σ` (negative
    /// eigenvalues from rounding are floored at zero).
    fn factor(&self) -> DMatrix<f64> {
        let eig = SymmetricEigen::new(self.cov.clone());
        let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Observation of the trajectory at one phase. `values[d]` is `None` for
/// dimensions left unconstrained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViaPoint {
    pub phase: f64,
    pub values: [Option<f64>; DIMS],
    pub noise_var: f64,
}

impl ViaPoint {
    pub fn position(phase: f64, p: Vector3<f64>, noise_var: f64) -> Self {
        Self { phase, values: [Some(p.x), Some(p.y), Some(p.z)], noise_var }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProMPModel {
    pub cfg: BasisConfig,
    pub dims: [WeightDistribution; DIMS],
    /// Orientation attached to every reconstructed waypoint.
    pub orientation: UnitQuaternion<f64>,
    /// Mean duration of the training demonstrations, seconds.
    pub reference_duration: f64,
}

fn check_demos<'a>(demos: impl Iterator<Item = &'a Trajectory>) -> Result<(), PrompError> {
    for (index, d) in demos.enumerate() {
        if d.len() < 2 {
            return Err(PrompError::TooShort { index, len: d.len() });
        }
    }
    Ok(())
}

/// Per-demo fitted weights for every dimension, plus the demo duration.
struct FittedDemo {
    weights: [DVector<f64>; DIMS],
    duration: f64,
}

fn fit_demos<'a>(
    demos: impl Iterator<Item = &'a Trajectory>,
    n_resample: usize,
    cfg: &BasisConfig,
) -> Result<Vec<FittedDemo>, PrompError> {
    if n_resample < 2 {
        return Err(PrompError::InvalidConfig("n_resample must be >= 2".into()));
    }
    let phases = trajectory::uniform_phases(n_resample);
    let solver = RidgeSolver::new(&phases, cfg)?;
    demos
        .map(|demo| {
            let samples = trajectory::resample_phase(demo.waypoints(), n_resample)
                .map_err(|e| PrompError::InvalidModel(e.to_string()))?;
            let weights = std::array::from_fn(|d| {
                let y = DVector::from_iterator(n_resample, samples.iter().map(|(_, p)| p.position[d]));
                solver.solve(&y)
            });
            Ok(FittedDemo { weights, duration: demo.duration() })
        })
        .collect()
}

/// Canonical ordering so that sums do not depend on the input order.
fn canonical_order(fits: &mut [FittedDemo]) {
    fits.sort_by(|a, b| {
        let ka = a.weights.iter().flat_map(|w| w.iter()).chain(std::iter::once(&a.duration));
        let kb = b.weights.iter().flat_map(|w| w.iter()).chain(std::iter::once(&b.duration));
        ka.zip(kb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
}

/// Fits a primitive from at least two demonstrations.
pub fn train_promp(demos: &[Trajectory], n_resample: usize, cfg: &BasisConfig) -> Result<ProMPModel, PrompError> {
    if demos.len() < 2 {
        return Err(PrompError::TooFewDemos { got: demos.len(), min: 2 });
    }
    check_demos(demos.iter())?;
    let mut fits = fit_demos(demos.iter(), n_resample, cfg)?;
    canonical_order(&mut fits);

    let n = fits.len() as f64;
    let k = cfg.n_basis;
    let dims = std::array::from_fn(|d| {
        let mut mean = DVector::zeros(k);
        for f in &fits {
            mean += &f.weights[d];
        }
        mean /= n;
        let mut cov = DMatrix::zeros(k, k);
        for f in &fits {
            let diff = &f.weights[d] - &mean;
            cov += &diff * diff.transpose();
        }
        cov /= n - 1.0;
        cov += DMatrix::identity(k, k) * cfg.cov_reg;
        symmetrize(&mut cov);
        WeightDistribution { mean, cov }
    });
    let reference_duration = fits.iter().map(|f| f.duration).sum::<f64>() / n;
    Ok(ProMPModel { cfg: *cfg, dims, orientation: quat::tool_down(), reference_duration })
}

fn reconstruct(
    weights: &[DVector<f64>; DIMS],
    cfg: &BasisConfig,
    orientation: UnitQuaternion<f64>,
    n: usize,
    duration: f64,
) -> Result<Trajectory, PrompError> {
    if n < 2 {
        return Err(PrompError::InvalidConfig("need at least 2 output points".into()));
    }
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(PrompError::InvalidConfig(format!("duration {duration} must be > 0")));
    }
    let phi = basis_matrix(&trajectory::uniform_phases(n), cfg);
    let cols: [DVector<f64>; DIMS] = std::array::from_fn(|d| &phi * &weights[d]);
    let poses = (0..n).map(|i| Pose::new(Vector3::new(cols[0][i], cols[1][i], cols[2][i]), orientation));
    Trajectory::from_poses("", duration / (n - 1) as f64, OrientationMode::Fixed, poses)
        .map_err(|e| PrompError::InvalidModel(e.to_string()))
}

impl ProMPModel {
    pub fn n_basis(&self) -> usize {
        self.cfg.n_basis
    }

    /// Returns a conditioned copy; the model itself is untouched.
    pub fn condition(&self, via: &[ViaPoint]) -> ProMPModel {
        let mut out = self.clone();
        for v in via {
            let phi = basis_row(v.phase.clamp(0.0, 1.0), &self.cfg);
            for (d, value) in v.values.iter().enumerate() {
                if let Some(y) = value {
                    out.dims[d].condition(&phi, *y, v.noise_var.max(0.0));
                }
            }
        }
        out
    }

    pub fn mean_weights(&self) -> [DVector<f64>; DIMS] {
        std::array::from_fn(|d| self.dims[d].mean.clone())
    }

    /// Mean position at phase `z`.
    pub fn mean_at(&self, z: f64) -> Vector3<f64> {
        let phi = basis_row(z, &self.cfg);
        Vector3::from_fn(|d, _| phi.dot(&self.dims[d].mean))
    }

    /// Per-dimension predictive variance `φᵀ Σ_w φ` at phase `z`.
    pub fn variance_at(&self, z: f64) -> [f64; DIMS] {
        let phi = basis_row(z, &self.cfg);
        std::array::from_fn(|d| phi.dot(&(&self.dims[d].cov * &phi)))
    }

    pub fn mean_trajectory(&self, n: usize, duration: f64) -> Result<Trajectory, PrompError> {
        reconstruct(&self.mean_weights(), &self.cfg, self.orientation, n, duration)
    }

    /// Draws one weight vector per dimension and reconstructs it.
    /// Deterministic for a given seed.
    pub fn sample_trajectory(&self, n: usize, duration: f64, seed: u64) -> Result<Trajectory, PrompError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.cfg.n_basis;
        let weights = std::array::from_fn(|d| {
            let z = DVector::from_iterator(k, (0..k).map(|_| StandardNormal.sample(&mut rng)));
            &self.dims[d].mean + self.dims[d].factor() * z
        });
        reconstruct(&weights, &self.cfg, self.orientation, n, duration)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelFile::from(self)).expect("model serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, PrompError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| PrompError::InvalidModel(e.to_string()))?;
        file.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct DimensionFile {
    mean: Vec<f64>,
    /// Row-major `K × K`.
    cov: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    cfg: BasisConfig,
    dims: Vec<DimensionFile>,
    #[serde(with = "quat::wxyz")]
    orientation: UnitQuaternion<f64>,
    reference_duration: f64,
}

impl From<&ProMPModel> for ModelFile {
    fn from(m: &ProMPModel) -> Self {
        ModelFile {
            cfg: m.cfg,
            dims: m
                .dims
                .iter()
                .map(|d| DimensionFile {
                    mean: d.mean.iter().copied().collect(),
                    cov: d.cov.transpose().iter().copied().collect(),
                })
                .collect(),
            orientation: m.orientation,
            reference_duration: m.reference_duration,
        }
    }
}

impl TryFrom<ModelFile> for ProMPModel {
    type Error = PrompError;

    fn try_from(f: ModelFile) -> Result<Self, PrompError> {
        f.cfg.validate()?;
        let k = f.cfg.n_basis;
        if f.dims.len() != DIMS {
            return Err(PrompError::InvalidModel(format!("expected {DIMS} dimensions, got {}", f.dims.len())));
        }
        for (i, d) in f.dims.iter().enumerate() {
            if d.mean.len() != k || d.cov.len() != k * k {
                return Err(PrompError::InvalidModel(format!("dimension {i}: sizes do not match n_basis {k}")));
            }
        }
        if !(f.reference_duration > 0.0 && f.reference_duration.is_finite()) {
            return Err(PrompError::InvalidModel("reference_duration must be > 0".into()));
        }
        let dims = std::array::from_fn(|i| WeightDistribution {
            mean: DVector::from_column_slice(&f.dims[i].mean),
            cov: DMatrix::from_row_slice(k, k, &f.dims[i].cov),
        });
        Ok(ProMPModel { cfg: f.cfg, dims, orientation: f.orientation, reference_duration: f.reference_duration })
    }
}

/// Primitive whose weights are an affine function of a scalar context.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualProMP {
    pub cfg: BasisConfig,
    /// Per dimension, a `K × 2` matrix mapping `[1, context]` to weights.
    pub maps: [DMatrix<f64>; DIMS],
    pub orientation: UnitQuaternion<f64>,
    pub reference_duration: f64,
}

/// Least-squares affine regression of per-demo weights on the context.
pub fn train_contextual(
    demos: &[(Trajectory, f64)],
    n_resample: usize,
    cfg: &BasisConfig,
) -> Result<ContextualProMP, PrompError> {
    if demos.len() < 2 {
        return Err(PrompError::TooFewDemos { got: demos.len(), min: 2 });
    }
    check_demos(demos.iter().map(|(t, _)| t))?;
    let contexts: Vec<f64> = demos.iter().map(|(_, c)| *c).collect();
    if contexts.iter().any(|c| !c.is_finite()) {
        return Err(PrompError::InvalidConfig("context values must be finite".into()));
    }
    let n = contexts.len() as f64;
    let c_mean = contexts.iter().sum::<f64>() / n;
    let sxx: f64 = contexts.iter().map(|c| (c - c_mean) * (c - c_mean)).sum();
    if !(sxx > 0.0) {
        return Err(PrompError::DegenerateContexts);
    }
    let fits = fit_demos(demos.iter().map(|(t, _)| t), n_resample, cfg)?;
    let k = cfg.n_basis;
    let maps = std::array::from_fn(|d| {
        let mut w_mean = DVector::zeros(k);
        for f in &fits {
            w_mean += &f.weights[d];
        }
        w_mean /= n;
        let mut slope = DVector::zeros(k);
        for (f, c) in fits.iter().zip(&contexts) {
            slope += (&f.weights[d] - &w_mean) * (c - c_mean);
        }
        slope /= sxx;
        let intercept = &w_mean - &slope * c_mean;
        let mut a = DMatrix::zeros(k, 2);
        a.set_column(0, &intercept);
        a.set_column(1, &slope);
        a
    });
    let reference_duration = fits.iter().map(|f| f.duration).sum::<f64>() / n;
    Ok(ContextualProMP { cfg: *cfg, maps, orientation: quat::tool_down(), reference_duration })
}

impl ContextualProMP {
    pub fn weights_for(&self, context: f64) -> [DVector<f64>; DIMS] {
        std::array::from_fn(|d| self.maps[d].column(0) + self.maps[d].column(1) * context)
    }

    pub fn predict(&self, context: f64, n: usize, duration: f64) -> Result<Trajectory, PrompError> {
        reconstruct(&self.weights_for(context), &self.cfg, self.orientation, n, duration)
    }
}

/// Mean trajectory of a contextual primitive at `context`.
pub fn predict_contextual(
    model: &ContextualProMP,
    context: f64,
    n: usize,
    duration: f64,
) -> Result<Trajectory, PrompError> {
    model.predict(context, n, duration)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_demo(c: f64, n: usize) -> Trajectory {
        Trajectory::from_poses(
            "c",
            0.2,
            OrientationMode::Fixed,
            (0..n).map(|_| Pose::tool_down(Vector3::new(c, c, c))),
        )
        .unwrap()
    }

    #[test]
    fn single_basis_is_one() {
        let cfg = BasisConfig::with_basis_count(1);
        let phi = basis_matrix(&[0.0, 0.3, 1.0], &cfg);
        assert!(phi.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rows_sum_to_one() {
        let cfg = BasisConfig::default();
        let phi = basis_matrix(&trajectory::uniform_phases(57), &cfg);
        for row in phi.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn three_bases_symmetric_at_midpoint() {
        let cfg = BasisConfig::with_basis_count(3);
        let row = basis_row(0.5, &cfg);
        // Hand evaluation: centers −m, 0.5, 1+m with m = 2√h, h = 1/18.
        let h: f64 = 1.0 / 18.0;
        let m = 2.0 * h.sqrt();
        let side = (-(0.5 + m).powi(2) / (2.0 * h)).exp();
        let expected_mid = 1.0 / (1.0 + 2.0 * side);
        assert!((row[1] - expected_mid).abs() < 1e-12);
        assert!((row[0] - row[2]).abs() < 1e-15);
        assert!(row[1] > row[0]);
    }

    #[test]
    fn zero_series_gives_zero_weights() {
        let phases = trajectory::uniform_phases(50);
        let w = fit_weights(&[0.0; 50], &phases, &BasisConfig::default()).unwrap();
        assert!(w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_few_demos() {
        let demos = vec![constant_demo(1.0, 5)];
        assert_eq!(
            train_promp(&demos, 50, &BasisConfig::default()),
            Err(PrompError::TooFewDemos { got: 1, min: 2 })
        );
    }

    #[test]
    fn degenerate_contexts() {
        let demos = vec![(constant_demo(1.0, 5), 0.2), (constant_demo(2.0, 5), 0.2)];
        assert_eq!(
            train_contextual(&demos, 50, &BasisConfig::default()),
            Err(PrompError::DegenerateContexts)
        );
    }

    #[test]
    fn zero_covariance_means_zero_gain() {
        let demos = vec![constant_demo(1.0, 5), constant_demo(2.0, 5)];
        let mut model = train_promp(&demos, 50, &BasisConfig::default()).unwrap();
        for d in &mut model.dims {
            d.cov.fill(0.0);
        }
        let via = ViaPoint::position(0.5, Vector3::new(9.0, 9.0, 9.0), 0.01);
        assert_eq!(model.condition(&[via]), model);
    }

    #[test]
    fn zero_map_predicts_zero() {
        let cfg = BasisConfig::default();
        let model = ContextualProMP {
            cfg,
            maps: std::array::from_fn(|_| DMatrix::zeros(cfg.n_basis, 2)),
            orientation: quat::tool_down(),
            reference_duration: 1.0,
        };
        let t = model.predict(0.7, 11, 2.0).unwrap();
        assert!(t.waypoints().iter().all(|w| w.pose.position == Vector3::zeros()));
    }

    #[test]
    fn model_file_rejects_size_mismatch() {
        let demos = vec![constant_demo(1.0, 5), constant_demo(2.0, 5)];
        let model = train_promp(&demos, 50, &BasisConfig::default()).unwrap();
        let text = model.to_json().replacen("\"n_basis\": 20", "\"n_basis\": 19", 1);
        assert!(matches!(ProMPModel::from_json(&text), Err(PrompError::InvalidModel(_))));
    }
}
