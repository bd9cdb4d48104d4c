use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use dictslam_core::dataset::{read_ground_truth_csv, write_dataset, DatasetError};
use dictslam_core::pipeline::{
    evaluate_against_ground_truth, read_map_points_csv, read_trajectory_csv, replay, run_slam,
    sweep_mu, Metrics, PipelineError, RunConfig,
};
use dictslam_core::synthstream::{
    generate_world, simulate_flight, BuiltinScenario, FlightPlan, FlightRecord, SynthError,
    WorldSpec,
};

#[derive(Parser)]
#[command(name = "dictslam", version, about = "Streaming dictionary-learning SLAM over image sequences")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic warehouse dataset directory
    Gen(GenCmd),
    /// Run the full pipeline over a dataset and write run artifacts
    Run(RunCmd),
    /// Re-encode a dataset against a frozen dictionary checkpoint
    Replay(ReplayCmd),
    /// Recompute alignment and error metrics from a run's artifacts
    Eval(EvalCmd),
    /// Re-run matching and evaluation over a list of loop-closure thresholds
    SweepMu(SweepMuCmd),
}

#[derive(Args)]
struct GenCmd {
    /// Builtin scenario: flight1, flight2, flight3 or square-loop
    #[arg(long, required_unless_present = "spec", conflicts_with = "spec")]
    scenario: Option<String>,
    /// Custom world and flight-plan file (key=value lines)
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,
    /// Stream seed (overrides the spec file's)
    #[arg(long)]
    seed: Option<u64>,
    /// Frame width in pixels
    #[arg(long)]
    width: Option<u32>,
    /// Frame height in pixels
    #[arg(long)]
    height: Option<u32>,
    /// Dataset directory to create
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunCmd {
    /// Dataset directory
    #[arg(long)]
    dataset: PathBuf,
    /// Directory for the run artifacts
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    params: ParamArgs,
}

#[derive(Args)]
struct ReplayCmd {
    /// Dataset directory
    #[arg(long)]
    dataset: PathBuf,
    /// Dictionary checkpoint from a previous run
    #[arg(long, value_name = "FILE")]
    dictionary: PathBuf,
    /// Directory for replay.csv
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    params: ParamArgs,
}

#[derive(Args)]
struct EvalCmd {
    /// Run directory holding trajectory.csv, map.csv and metrics.json
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory with ground_truth.csv
    #[arg(long)]
    dataset: PathBuf,
    /// Directory for the recomputed metrics.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepMuCmd {
    /// Dataset directory
    #[arg(long)]
    dataset: PathBuf,
    /// Directory for sweep.csv
    #[arg(long)]
    out: PathBuf,
    /// Thresholds to test
    #[arg(required = true, value_name = "MU")]
    mus: Vec<f64>,
    #[command(flatten)]
    params: ParamArgs,
}

/// Pipeline parameters, assembled from defaults, then an optional config
/// file, then explicit flags — later sources win.
#[derive(Args)]
struct ParamArgs {
    /// Flat key=value parameter file; flags below override it
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Coding step size
    #[arg(long)]
    eta_c: Option<f64>,
    /// Dictionary step size
    #[arg(long)]
    eta_d: Option<f64>,
    /// Sparsity weight
    #[arg(long)]
    lambda1: Option<f64>,
    /// Coding iterations per frame
    #[arg(long)]
    n_c: Option<usize>,
    /// Dictionary iterations per frame
    #[arg(long)]
    n_d: Option<usize>,
    /// Dictionary size
    #[arg(long)]
    n_atoms: Option<usize>,
    /// Dictionary init noise scale
    #[arg(long)]
    sigma_w: Option<f64>,
    /// Atom norm bound: a number, or "none" to disable clipping
    #[arg(long, value_name = "NORM", value_parser = parse_clip_flag)]
    clip_atom_norm: Option<ClipArg>,
    /// Loop-closure similarity threshold
    #[arg(long)]
    mu: Option<f64>,
    /// Template sampling period in seconds
    #[arg(long)]
    sample_period: Option<f64>,
    /// Seconds of recent templates excluded from matching
    #[arg(long)]
    exclusion_window: Option<f64>,
    /// Map relaxation step size
    #[arg(long)]
    alpha: Option<f64>,
    /// Map relaxation iterations per closure
    #[arg(long)]
    iterations: Option<usize>,
    /// Surprise filter window
    #[arg(long)]
    surprise_window: Option<usize>,
    /// Gate dictionary updates on surprise (false = always update)
    #[arg(long, value_name = "BOOL")]
    gating: Option<bool>,
    /// RNG seed for dictionary init
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy)]
struct ClipArg(Option<f64>);

fn parse_clip_flag(value: &str) -> Result<ClipArg, String> {
    parse_clip(value).map(ClipArg)
}

fn parse_clip(value: &str) -> Result<Option<f64>, String> {
    if value == "none" {
        Ok(None)
    } else {
        value.parse().map(Some).map_err(|_| format!("bad value {value:?} (number or \"none\")"))
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Config(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Pipeline(e) => e.exit_code(),
            CliError::Dataset(_) => 2,
            CliError::Synth(_) | CliError::Config(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Exit code 2 is reserved for dataset problems, so usage errors
            // leave with 1 instead of clap's default.
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Run(args) => cmd_run(args),
        Cmd::Replay(args) => cmd_replay(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::SweepMu(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("dictslam: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn cmd_gen(args: GenCmd) -> Result<(), CliError> {
    let (record, scenario): (FlightRecord, String) = if let Some(spec_path) = &args.spec {
        let mut spec = load_custom_spec(spec_path)?;
        if let Some(seed) = args.seed {
            spec.world.seed = seed;
        }
        if let Some(w) = args.width {
            spec.world.image_size.0 = w;
        }
        if let Some(h) = args.height {
            spec.world.image_size.1 = h;
        }
        let world = generate_world(&spec.world)?;
        (simulate_flight(&world, &spec.plan)?, "custom".to_string())
    } else {
        let name = args.scenario.as_deref().expect("clap requires scenario or spec");
        let scenario = parse_scenario(name)?;
        let size = (args.width.unwrap_or(64), args.height.unwrap_or(48));
        (scenario.generate(args.seed.unwrap_or(0), size)?, scenario.name().to_string())
    };
    write_dataset(&args.out, &record, &scenario)?;
    if let Some(spec_path) = &args.spec {
        let copy = args.out.join("spec.txt");
        fs::copy(spec_path, &copy)
            .map_err(|e| CliError::Config(format!("{}: {e}", copy.display())))?;
    }
    log::info!("scenario {scenario}, seed {}", record.seed);
    println!("wrote {} frames to {}", record.frames.len(), args.out.display());
    Ok(())
}

fn cmd_run(args: RunCmd) -> Result<(), CliError> {
    let config = build_config(&args.params)?;
    let metrics = run_slam(&args.dataset, &args.out, &config)?;
    println!(
        "{}: mae_l={} mae_m={} mu={} params={}",
        metrics.scenario,
        metrics.mae_l,
        metrics.mae_m,
        metrics.mu,
        &metrics.params_hash[..12]
    );
    Ok(())
}

fn cmd_replay(args: ReplayCmd) -> Result<(), CliError> {
    let config = build_config(&args.params)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.out.display())))?;
    let stats = replay(&args.dataset, &args.dictionary, &args.out.join("replay.csv"), &config.coding)?;
    println!("replayed {} frames: mean e_k={} max e_k={}", stats.errors.len(), stats.mean(), stats.max());
    Ok(())
}

fn cmd_eval(args: EvalCmd) -> Result<(), CliError> {
    let trajectory = read_trajectory_csv(&args.run.join("trajectory.csv"))?;
    let map_points = read_map_points_csv(&args.run.join("map.csv"))?;
    let gt = read_ground_truth_csv(&args.dataset.join("ground_truth.csv"))?;
    // mu and params_hash describe the run that produced the artifacts; they
    // only exist in its metrics.json, so eval requires it and carries them over.
    let run_metrics_path = args.run.join("metrics.json");
    let text = fs::read_to_string(&run_metrics_path)
        .map_err(|e| CliError::Config(format!("{}: {e}", run_metrics_path.display())))?;
    let run_metrics: Metrics = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", run_metrics_path.display())))?;

    let (transform, mae_l, mae_m) = evaluate_against_ground_truth(&trajectory, &map_points, &gt)?;
    let metrics = Metrics { mae_l, mae_m, transform, ..run_metrics };
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.out.display())))?;
    let out_path = args.out.join("metrics.json");
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| CliError::Config(format!("metrics serialization: {e}")))?;
    fs::write(&out_path, json + "\n")
        .map_err(|e| CliError::Config(format!("{}: {e}", out_path.display())))?;
    println!(
        "{}: mae_l={} mae_m={} transform=({}, {}, {})",
        metrics.scenario, mae_l, mae_m, transform.tx, transform.ty, transform.phi
    );
    Ok(())
}

fn cmd_sweep(args: SweepMuCmd) -> Result<(), CliError> {
    let config = build_config(&args.params)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.out.display())))?;
    let points = sweep_mu(&args.dataset, &args.out.join("sweep.csv"), &config, &args.mus)?;
    for p in &points {
        println!("mu={}: loop_closures={} mae_l={} mae_m={}", p.mu, p.loop_closures, p.mae_l, p.mae_m);
    }
    let best = points
        .iter()
        .min_by(|a, b| a.mae_l.total_cmp(&b.mae_l))
        .expect("sweep requires at least one mu");
    println!("best mu={} (mae_l={})", best.mu, best.mae_l);
    Ok(())
}

fn parse_scenario(name: &str) -> Result<BuiltinScenario, CliError> {
    BuiltinScenario::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| {
            let known: Vec<&str> = BuiltinScenario::ALL.iter().map(|s| s.name()).collect();
            CliError::Config(format!("unknown scenario {name:?} (expected one of {})", known.join(", ")))
        })
}

fn parse_kv_file(
    path: &Path,
    mut set: impl FnMut(&str, &str) -> Result<(), String>,
) -> Result<(), CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("{}: line {}: expected key=value", path.display(), i + 1))
        })?;
        set(key.trim(), value.trim()).map_err(|msg| {
            CliError::Config(format!("{}: line {}: {msg}", path.display(), i + 1))
        })?;
    }
    Ok(())
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("bad value {value:?} for {key}"))
}

fn set_param(config: &mut RunConfig, key: &str, value: &str) -> Result<(), String> {
    match key {
        "eta_c" => config.coding.eta_c = parse_value(key, value)?,
        "eta_d" => config.coding.eta_d = parse_value(key, value)?,
        "lambda1" => config.coding.lambda1 = parse_value(key, value)?,
        "n_c" => config.coding.n_c = parse_value(key, value)?,
        "n_d" => config.coding.n_d = parse_value(key, value)?,
        "n_atoms" => config.coding.n_atoms = parse_value(key, value)?,
        "sigma_w" => config.coding.sigma_w = parse_value(key, value)?,
        "clip_atom_norm" => {
            config.coding.clip_atom_norm = parse_clip(value).map_err(|m| format!("{m} for {key}"))?
        }
        "mu" => config.matcher.mu = parse_value(key, value)?,
        "sample_period" => config.matcher.sample_period = parse_value(key, value)?,
        "exclusion_window" => config.matcher.exclusion_window = parse_value(key, value)?,
        "alpha" => config.relax.alpha = parse_value(key, value)?,
        "iterations" => config.relax.iterations = parse_value(key, value)?,
        "surprise_window" => config.surprise_window = parse_value(key, value)?,
        "gating" => config.gating = parse_value(key, value)?,
        "seed" => config.seed = parse_value(key, value)?,
        _ => return Err(format!("unknown parameter {key:?}")),
    }
    Ok(())
}

fn build_config(args: &ParamArgs) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::default();
    if let Some(path) = &args.config {
        parse_kv_file(path, |key, value| set_param(&mut config, key, value))?;
    }
    let c = &mut config.coding;
    if let Some(v) = args.eta_c {
        c.eta_c = v;
    }
    if let Some(v) = args.eta_d {
        c.eta_d = v;
    }
    if let Some(v) = args.lambda1 {
        c.lambda1 = v;
    }
    if let Some(v) = args.n_c {
        c.n_c = v;
    }
    if let Some(v) = args.n_d {
        c.n_d = v;
    }
    if let Some(v) = args.n_atoms {
        c.n_atoms = v;
    }
    if let Some(v) = args.sigma_w {
        c.sigma_w = v;
    }
    if let Some(ClipArg(v)) = args.clip_atom_norm {
        c.clip_atom_norm = v;
    }
    let m = &mut config.matcher;
    if let Some(v) = args.mu {
        m.mu = v;
    }
    if let Some(v) = args.sample_period {
        m.sample_period = v;
    }
    if let Some(v) = args.exclusion_window {
        m.exclusion_window = v;
    }
    if let Some(v) = args.alpha {
        config.relax.alpha = v;
    }
    if let Some(v) = args.iterations {
        config.relax.iterations = v;
    }
    if let Some(v) = args.surprise_window {
        config.surprise_window = v;
    }
    if let Some(v) = args.gating {
        config.gating = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    Ok(config)
}

struct CustomSpec {
    world: WorldSpec,
    plan: FlightPlan,
}

fn load_custom_spec(path: &Path) -> Result<CustomSpec, CliError> {
    let mut world = WorldSpec::default();
    let mut plan = FlightPlan::default();
    parse_kv_file(path, |key, value| {
        match key {
            "aisle_count" => world.aisle_count = parse_value(key, value)?,
            "aisle_length" => world.aisle_length = parse_value(key, value)?,
            "texture_bank_size" => world.texture_bank_size = parse_value(key, value)?,
            "width" => world.image_size.0 = parse_value(key, value)?,
            "height" => world.image_size.1 = parse_value(key, value)?,
            "seed" => world.seed = parse_value(key, value)?,
            "waypoints" => plan.waypoints = parse_waypoints(value)?,
            "speed" => plan.speed = parse_value(key, value)?,
            "frame_rate" => plan.frame_rate = parse_value(key, value)?,
            "turn_rate" => plan.turn_rate = parse_value(key, value)?,
            "noise_sigma_xy" => plan.noise_sigma_xy = parse_value(key, value)?,
            "noise_sigma_theta" => plan.noise_sigma_theta = parse_value(key, value)?,
            "pixel_noise_sigma" => plan.pixel_noise_sigma = parse_value(key, value)?,
            "redundancy_bound" => plan.redundancy_bound = parse_value(key, value)?,
            _ => return Err(format!("unknown parameter {key:?}")),
        }
        Ok(())
    })?;
    Ok(CustomSpec { world, plan })
}

fn parse_waypoints(value: &str) -> Result<Vec<(f64, f64)>, String> {
    value
        .split(';')
        .map(|pair| {
            let bad = || format!("bad waypoint {pair:?} (want x,y)");
            let (x, y) = pair.split_once(',').ok_or_else(bad)?;
            Ok((
                x.trim().parse().map_err(|_| bad())?,
                y.trim().parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}
