use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use clap::{Parser, Subcommand};
use nalgebra::Vector3;
use pbd_core::kinematics::{ArmModel, IkParams};
use pbd_core::metrics;
use pbd_core::promp::{BasisConfig, ProMPModel};
use pbd_core::scene::{auto_calibrate, Marker, RigidTransform, Scene};
use pbd_core::trajectory::{Trajectory, DEFAULT_SAMPLE_PERIOD};
use pbd_server::executor::{self, ExecError, ExecutionPlan, ExecutorConfig};
use pbd_server::mock_robot::MockRobot;
use pbd_server::session::{markers_to_via_points, Session, SessionConfig};
use pbd_server::storage::{self, DataDir, Manifest, TrainError};
use pbd_server::transport::{Server, ServerOptions};
use serde_json::json;

#[derive(Parser)]
#[command(name = "pbd", version, about = "Programming-by-demonstration session server and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the interactive session server.
    Serve {
        #[arg(long)]
        data: PathBuf,
        /// Arm description; defaults to the data directory's copy, then the bundled UR10.
        #[arg(long)]
        arm: Option<PathBuf>,
        /// Scene description; defaults to the data directory's copy, then the bundled desk scene.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:7600")]
        listen: String,
        /// Robot endpoint that receives execution streams.
        #[arg(long)]
        robot: Option<String>,
        /// Tracked controller position `x,y,z`; places the arm base at the
        /// controller composed with the scene's calibration offset.
        #[arg(long, value_parser = parse_vec3)]
        controller: Option<Vector3<f64>>,
    },
    /// Train a model from the data directory's training set.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        basis: Option<usize>,
    },
    /// Condition a stored model on markers and print the mean trajectory.
    Sample {
        #[arg(long)]
        model: PathBuf,
        /// Marker `x,y,z,t`; repeatable.
        #[arg(long = "marker", value_parser = parse_marker)]
        markers: Vec<Marker>,
        /// Draw a random trajectory with this seed instead of the mean.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Smoothness metrics of a trajectory, plus MSE against a reference.
    Metrics {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Common phase samples for MSE.
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Stream a trajectory file to a robot endpoint.
    Replay {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        arm: Option<PathBuf>,
    },
    /// Run the mock robot endpoint.
    MockRobot {
        #[arg(long, default_value = "127.0.0.1:7700")]
        listen: String,
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

struct CliError {
    code: &'static str,
    message: String,
}

impl CliError {
    fn new(code: &'static str, message: impl ToString) -> Self {
        Self { code, message: message.to_string() }
    }
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated numbers, got `{s}`"));
    }
    let mut out = [0.0f64; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("`{p}` is not a number"))?;
        if !o.is_finite() {
            return Err(format!("`{p}` is not finite"));
        }
    }
    Ok(out)
}

fn parse_vec3(s: &str) -> Result<Vector3<f64>, String> {
    parse_floats::<3>(s).map(Vector3::from)
}

fn parse_marker(s: &str) -> Result<Marker, String> {
    let [x, y, z, t] = parse_floats::<4>(s)?;
    if t < 0.0 {
        return Err("marker time must be >= 0".into());
    }
    Ok(Marker { position: Vector3::new(x, y, z), timestamp: t })
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::new("Io", format!("{}: {e}", path.display())))
}

fn load_arm(path: Option<&Path>) -> Result<ArmModel, CliError> {
    match path {
        Some(p) => ArmModel::from_json(&read(p)?).map_err(|e| CliError::new("InvalidArm", e)),
        None => Ok(ArmModel::ur10()),
    }
}

fn load_trajectory(path: &Path) -> Result<Trajectory, CliError> {
    Trajectory::from_json(&read(path)?).map_err(|e| CliError::new("InvalidTrajectory", format!("{}: {e}", path.display())))
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string(v).expect("json serialises"));
}

fn serve(
    data: &Path,
    arm: Option<&Path>,
    scene: Option<&Path>,
    listen: &str,
    robot: Option<String>,
    controller: Option<Vector3<f64>>,
) -> Result<(), CliError> {
    let data = DataDir::open(data).map_err(|e| CliError::new("StorageFailure", e))?;
    let arm_path = arm.map(Path::to_path_buf).or_else(|| data.arm().is_file().then(|| data.arm()));
    let mut arm = load_arm(arm_path.as_deref())?;
    let scene_path = scene.map(Path::to_path_buf).or_else(|| data.scene().is_file().then(|| data.scene()));
    let scene = match scene_path {
        Some(p) => Scene::from_json(&read(&p)?).map_err(|e| CliError::new("InvalidScene", e))?,
        None => Scene::desk(),
    };
    if let Some(c) = controller {
        arm = arm.with_base(auto_calibrate(&RigidTransform::from_translation(c), &scene.calibration_offset));
    }
    for (path, text) in [(data.arm(), arm.to_json()), (data.scene(), scene.to_json())] {
        pbd_core::trajectory::write_atomic(&path, text.as_bytes())
            .map_err(|e| CliError::new("StorageFailure", format!("{}: {e}", path.display())))?;
    }
    let session = Session::open(data, arm, scene, SessionConfig::default()).map_err(|e| CliError::new("StorageFailure", e))?;
    let options = ServerOptions { robot, ..ServerOptions::default() };
    let server = Server::bind(listen, Arc::new(Mutex::new(session)), options)
        .map_err(|e| CliError::new("BindFailure", format!("{listen}: {e}")))?;
    let addr = server.local_addr().map_err(|e| CliError::new("BindFailure", e))?;
    print_json(&json!({ "listening": addr.to_string() }));
    server.run();
    Ok(())
}

fn train(data: &Path, basis: Option<usize>) -> Result<(), CliError> {
    let data = DataDir::open(data).map_err(|e| CliError::new("StorageFailure", e))?;
    let manifest = Manifest::load(&data).map_err(|e| CliError::new("StorageFailure", e))?;
    let cfg = basis.map_or_else(BasisConfig::default, BasisConfig::with_basis_count);
    let (model, elapsed) =
        storage::train_and_store(&data, &manifest, &cfg, pbd_core::promp::DEFAULT_RESAMPLE, std::time::Duration::from_secs(1))
            .map_err(|e| match e {
                TrainError::Promp(pbd_core::promp::PrompError::TooFewDemos { .. }) => CliError::new("TooFewDemos", e),
                TrainError::Promp(_) => CliError::new("TrainingFailed", e),
                TrainError::TooSlow { .. } => CliError::new("TrainingTooSlow", e),
                TrainError::Storage(_) => CliError::new("StorageFailure", e),
            })?;
    print_json(&json!({
        "model": data.model().display().to_string(),
        "n_demos": manifest.entries.len(),
        "n_basis": model.n_basis(),
        "reference_duration": model.reference_duration,
        "train_seconds": elapsed.as_secs_f64(),
    }));
    Ok(())
}

fn sample(model: &Path, markers: &[Marker], seed: Option<u64>) -> Result<(), CliError> {
    let model = ProMPModel::from_json(&read(model)?).map_err(|e| CliError::new("InvalidModel", e))?;
    let conditioned = model.condition(&markers_to_via_points(&model, markers));
    let n = (model.reference_duration / DEFAULT_SAMPLE_PERIOD).round().max(1.0) as usize + 1;
    let duration = (n - 1) as f64 * DEFAULT_SAMPLE_PERIOD;
    let traj = match seed {
        Some(s) => conditioned.sample_trajectory(n, duration, s),
        None => conditioned.mean_trajectory(n, duration),
    }
    .map_err(|e| CliError::new("InvalidModel", e))?;
    print_json(&serde_json::to_value(&traj).expect("trajectory serialises"));
    Ok(())
}

fn metrics_cmd(traj: &Path, reference: Option<&Path>, n: usize) -> Result<(), CliError> {
    let t = load_trajectory(traj)?;
    let report = metrics::smoothness(&t).map_err(|e| CliError::new("MetricsError", e))?;
    let mut out = json!({
        "mean_jerk": report.mean_jerk,
        "deviation": report.deviation,
        "variation": report.variation,
    });
    if let Some(r) = reference {
        let r = load_trajectory(r)?;
        out["mse"] = json!(metrics::mse(&t, &r, n).map_err(|e| CliError::new("MetricsError", e))?);
    }
    print_json(&out);
    Ok(())
}

fn replay(traj: &Path, endpoint: &str, arm: Option<&Path>) -> Result<(), CliError> {
    let arm = load_arm(arm)?;
    let t = load_trajectory(traj)?;
    let joints = executor::preflight(&arm, &arm.home(), &t, &IkParams::default())
        .map_err(|e| CliError::new("PreflightIKFailure", e))?;
    let plan = ExecutionPlan { seq: 0, trajectory: t, joints };
    let report = executor::stream(&arm, &plan, Some(endpoint), &ExecutorConfig::default(), |_| {}).map_err(|e| match e {
        ExecError::EndpointUnreachable { .. } => CliError::new("EndpointUnreachable", e),
        ExecError::EndpointTimeout { .. } => CliError::new("EndpointTimeout", e),
    })?;
    print_json(&serde_json::to_value(&report).expect("report serialises"));
    Ok(())
}

fn mock_robot(listen: &str, log: Option<PathBuf>) -> Result<(), CliError> {
    let robot = MockRobot::spawn(listen, log).map_err(|e| CliError::new("BindFailure", e))?;
    print_json(&json!({ "listening": robot.addr().to_string() }));
    robot.join();
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve { data, arm, scene, listen, robot, controller } => {
            serve(&data, arm.as_deref(), scene.as_deref(), &listen, robot, controller)
        }
        Command::Train { data, basis } => train(&data, basis),
        Command::Sample { model, markers, seed } => sample(&model, &markers, seed),
        Command::Metrics { traj, reference, n } => metrics_cmd(&traj, reference.as_deref(), n),
        Command::Replay { traj, endpoint, arm } => replay(&traj, &endpoint, arm.as_deref()),
        Command::MockRobot { listen, log } => mock_robot(&listen, log),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.code, "message": e.message }));
            ExitCode::FAILURE
        }
    }
}
