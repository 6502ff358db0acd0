//! `linecal`: calibrate two RGB-D cameras from matched lines.
//!
//! Exit codes: 0 on success, 1 on I/O, schema or usage errors, 2 when
//! calibration does not converge or a rig spec is infeasible.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use linecal::eval::{pose_variation_errors, plane_merge_metrics, PlaneMergeInput, PoseGroup};
use linecal::io::{
    parse_json, read_json, read_text, sweep_csv, to_canonical_json, write_bytes, CalibrationFile, IoError,
    ObservationFile,
};
use linecal::pipeline::{run, PipelineConfig, Termination};
use linecal::simulator::{generate, sweep, RigSpec, SimulatorError, SweepGrid};

/// Environment variable that overrides every RNG seed.
const SEED_ENV: &str = "PELICAL_SEED";

#[derive(Parser)]
#[command(name = "linecal", version, about = "Line-based extrinsic calibration of two RGB-D cameras")]
#[command(after_help = "Exit codes: 0 success, 1 I/O or schema error, 2 not converged or infeasible rig.\n\
PELICAL_SEED overrides the RNG seed of every command, including seeds set in config files.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic observation file and its ground truth.
    Simulate(SimulateArgs),
    /// Calibrate over a grid of rotations and baselines and write a CSV table.
    Sweep(SweepArgs),
    /// Estimate the target-from-source extrinsics from an observation file.
    Calibrate(CalibrateArgs),
    /// Compare board planes seen by both cameras under a calibration.
    EvaluatePlanes(PlaneArgs),
    /// Step errors of pose sequences that vary one parameter at a time.
    ///
    /// Rotations are read as intrinsic XYZ Euler angles (roll, pitch, yaw)
    /// with R = Rx(roll) Ry(pitch) Rz(yaw). Rotation groups are expected to
    /// step the middle angle (about y) by --step-rot-deg; poses with
    /// |pitch| >= 85 degrees are rejected as ambiguous.
    PoseErrors(PoseArgs),
}

#[derive(Args)]
struct PipelineFlags {
    /// Pipeline config JSON; its fields override the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Convergence-vote distance threshold in meters.
    #[arg(long)]
    epsilon_d: Option<f64>,
    /// Mean refinement cost per correspondence below which a pose is accepted.
    #[arg(long)]
    cost_threshold: Option<f64>,
    /// Stop after this many observations.
    #[arg(long)]
    max_pairs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Rig spec JSON; missing fields take defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Rotations about y in degrees.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 20.0, 40.0, 60.0, 80.0])]
    rotations: Vec<f64>,
    /// Baselines along x in meters.
    #[arg(long, value_delimiter = ',', default_values_t = [0.20, 0.25, 0.30, 0.35, 0.40, 0.45])]
    baselines: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct PlaneArgs {
    /// Board point sets (and optional corners) in both camera frames.
    #[arg(long)]
    input: PathBuf,
    /// Calibration file holding the extrinsics to evaluate.
    #[arg(long)]
    calibration: PathBuf,
    /// Board square size in millimeters.
    #[arg(long)]
    square_mm: Option<f64>,
    /// Write metrics here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PoseArgs {
    /// JSON array of {"varied": "rotation"|"translation", "poses": [...]}.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 20.0)]
    step_rot_deg: f64,
    #[arg(long, default_value_t = 5.0)]
    step_trans_cm: f64,
    #[arg(long)]
    output: Option<PathBuf>,
}

/// A command failure and its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl ToString) -> Self {
        Self { code: 1, message: message.to_string() }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Self::usage(e)
    }
}

impl From<SimulatorError> for Failure {
    fn from(e: SimulatorError) -> Self {
        let code = if matches!(e, SimulatorError::InfeasibleSpec(_)) { 2 } else { 1 };
        Self { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Calibrate(a) => calibrate(a),
        Command::EvaluatePlanes(a) => evaluate_planes(a),
        Command::PoseErrors(a) => pose_errors(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Failure::usage(format!("{SEED_ENV}={v:?} is not a u64"))),
        Err(_) => Ok(None),
    }
}

/// Recursively overlay `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn pipeline_config(flags: &PipelineFlags) -> Result<PipelineConfig, Failure> {
    let mut cfg = PipelineConfig::default();
    if let Some(v) = flags.epsilon_d {
        cfg.epsilon_d_m = v;
    }
    if let Some(v) = flags.cost_threshold {
        cfg.cost_threshold = v;
    }
    if let Some(v) = flags.max_pairs {
        cfg.max_pairs = v;
    }
    if let Some(v) = flags.seed {
        cfg.rng_seed = v;
    }
    if let Some(path) = &flags.config {
        let mut value = serde_json::to_value(&cfg).expect("config serializes");
        merge(&mut value, parse_json(&read_text(path)?)?);
        cfg = serde_json::from_value(value).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    }
    if let Some(seed) = env_seed()? {
        cfg.rng_seed = seed;
    }
    cfg.validate().map_err(Failure::usage)?;
    Ok(cfg)
}

fn rig_spec(path: Option<&Path>, seed: Option<u64>) -> Result<RigSpec, Failure> {
    let mut spec: RigSpec = match path {
        Some(p) => read_json(p, "rig spec")?,
        None => RigSpec::default(),
    };
    if let Some(s) = seed {
        spec.rng_seed = s;
    }
    if let Some(s) = env_seed()? {
        spec.rng_seed = s;
    }
    Ok(spec)
}

fn emit(bytes: &[u8], output: Option<&Path>) -> Result<(), Failure> {
    match output {
        Some(p) => Ok(write_bytes(p, bytes)?),
        None => {
            print!("{}", String::from_utf8_lossy(bytes));
            Ok(())
        }
    }
}

fn simulate(a: SimulateArgs) -> Result<u8, Failure> {
    let spec = rig_spec(a.spec.as_deref(), a.seed)?;
    let (observations, truth) = generate(&spec)?;
    let file = ObservationFile {
        target_intrinsics: spec.target_intrinsics,
        source_intrinsics: spec.source_intrinsics,
        observations,
    };
    file.write(&a.output)?;
    if let Some(p) = &a.truth {
        write_bytes(p, &to_canonical_json(&truth))?;
    }
    eprintln!("wrote {} observations to {}", file.observations.len(), a.output.display());
    Ok(0)
}

fn run_sweep(a: SweepArgs) -> Result<u8, Failure> {
    let spec = rig_spec(a.spec.as_deref(), a.pipeline.seed)?;
    let cfg = pipeline_config(&a.pipeline)?;
    let grid = SweepGrid { rotations_deg: a.rotations, baselines_m: a.baselines, repeats: a.repeats };
    let cells = sweep(&spec, &grid, &cfg)?;
    write_bytes(&a.output, sweep_csv(&cells).as_bytes())?;
    let converged = cells.iter().filter(|c| c.converged).count();
    eprintln!("{converged}/{} runs converged; table written to {}", cells.len(), a.output.display());
    Ok(0)
}

fn calibrate(a: CalibrateArgs) -> Result<u8, Failure> {
    let cfg = pipeline_config(&a.pipeline)?;
    let obs = ObservationFile::read(&a.input)?;
    let report = run(&obs.observations, &obs.target_intrinsics, &cfg).map_err(Failure::usage)?;
    CalibrationFile::from_report(&report).write(&a.output)?;
    eprintln!(
        "termination: {} ({} accepted pairs, {} voting inliers)",
        report.termination.as_str(),
        report.accepted_pair_count,
        report.voting_inlier_count
    );
    Ok(if report.termination == Termination::Converged { 0 } else { 2 })
}

fn evaluate_planes(a: PlaneArgs) -> Result<u8, Failure> {
    let mut input: PlaneMergeInput = read_json(&a.input, "plane input")?;
    if let Some(mm) = a.square_mm {
        input.square_mm = mm;
    }
    let t = CalibrationFile::read(&a.calibration)?.extrinsics()?;
    let metrics = plane_merge_metrics(&input, &t).map_err(Failure::usage)?;
    emit(&to_canonical_json(&metrics), a.output.as_deref())?;
    Ok(0)
}

fn pose_errors(a: PoseArgs) -> Result<u8, Failure> {
    let groups: Vec<PoseGroup> = read_json(&a.input, "pose groups")?;
    let table = pose_variation_errors(&groups, a.step_rot_deg, a.step_trans_cm).map_err(Failure::usage)?;
    emit(&to_canonical_json(&table), a.output.as_deref())?;
    Ok(0)
}
