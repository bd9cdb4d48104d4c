//! End-to-end drivers: the streaming SLAM loop over a dataset, frozen-
//! dictionary replay, the matching-threshold sweep, and the artifact files
//! each of them writes.
//!
//! Per frame the runner takes one (possibly gated) learning step, logs the
//! surprise telemetry, integrates odometry, and on each matcher sampling tick
//! queries for a loop closure before storing the new template. A closure
//! links the new experience to the matched one and the relaxed pose becomes
//! the current estimate, so the correction propagates into every later frame.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ExperienceMap, Pose, RelPose, RelaxParams};
use crate::dataset::{DatasetError, DatasetReader};
use crate::dlsc::{encode, Dictionary, DlscError, DlscParams, EncoderState, SparseCode};
use crate::eval::{
    align_coarse_to_fine, mae_mapping, AlignmentTransform, EvalError, GridSpec, TrajPoint,
    Trajectory,
};
use crate::frame::Frame;
use crate::matcher::{MatcherError, MatcherParams, TemplateStore};
use crate::surprise::{
    gated_learning_step, ungated_learning_step, GatedStepError, SurpriseError, SurpriseState,
};
use crate::synthstream::{GroundTruthSample, OdomSample};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("sparse coding diverged at frame {frame}")]
    Divergence { frame: usize },
    #[error(transparent)]
    Coding(DlscError),
    #[error(transparent)]
    Surprise(#[from] SurpriseError),
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code: 2 for dataset problems, 3 for numerical divergence,
    /// 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Dataset(_) => 2,
            PipelineError::Divergence { .. } => 3,
            _ => 1,
        }
    }
}

fn coding_error(err: DlscError, frame: usize) -> PipelineError {
    match err {
        DlscError::NonFiniteCode { .. } | DlscError::NonFiniteDictionary => {
            PipelineError::Divergence { frame }
        }
        other => PipelineError::Coding(other),
    }
}

fn step_error(err: GatedStepError, frame: usize) -> PipelineError {
    match err {
        GatedStepError::Coding(e) => coding_error(e, frame),
        GatedStepError::Surprise(e) => PipelineError::Surprise(e),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub coding: DlscParams,
    pub matcher: MatcherParams,
    pub relax: RelaxParams,
    pub surprise_window: usize,
    /// `false` runs the ablation: updates always apply, telemetry still
    /// records what the gate would have decided.
    pub gating: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            coding: DlscParams::default(),
            matcher: MatcherParams::default(),
            relax: RelaxParams::default(),
            surprise_window: 5,
            gating: true,
            seed: 0,
        }
    }
}

/// Hash of every behavioural parameter, for telling result sets apart.
/// Deliberately excludes anything filesystem- or machine-specific.
pub fn params_hash(config: &RunConfig) -> String {
    use sha2::{Digest, Sha256};
    let c = &config.coding;
    let m = &config.matcher;
    let r = &config.relax;
    let text = format!(
        "eta_c={}\neta_d={}\nlambda1={}\nn_c={}\nn_d={}\nn_atoms={}\nsigma_w={}\n\
         clip_atom_norm={:?}\nmu={}\nsample_period={}\nexclusion_window={}\n\
         alpha={}\niterations={}\nsurprise_window={}\ngating={}\nseed={}\n",
        c.eta_c,
        c.eta_d,
        c.lambda1,
        c.n_c,
        c.n_d,
        c.n_atoms,
        c.sigma_w,
        c.clip_atom_norm,
        m.mu,
        m.sample_period,
        m.exclusion_window,
        r.alpha,
        r.iterations,
        config.surprise_window,
        config.gating,
        config.seed,
    );
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One telemetry row, written to `surprise.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurpriseRow {
    pub k: usize,
    pub e: f64,
    pub s2_raw: f64,
    pub s2_filtered: f64,
    pub gate_open: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub timestamp: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// The matcher-plus-map half of the loop, separated out so the threshold
/// sweep can re-run it over captured codes without re-encoding the stream.
#[derive(Debug)]
struct MatcherBackend {
    matcher: MatcherParams,
    relax: RelaxParams,
    store: TemplateStore,
    map: ExperienceMap,
    pose: Pose,
    trajectory: Vec<TrajectorySample>,
    loop_closures: u64,
}

impl MatcherBackend {
    fn new(matcher: MatcherParams, relax: RelaxParams) -> Self {
        MatcherBackend {
            matcher,
            relax,
            store: TemplateStore::new(),
            map: ExperienceMap::new(),
            pose: Pose::origin(),
            trajectory: Vec::new(),
            loop_closures: 0,
        }
    }

    fn on_frame(
        &mut self,
        code: &SparseCode,
        timestamp: f64,
        odom: &OdomSample,
    ) -> Result<(), PipelineError> {
        self.pose = self.pose.compose(&RelPose { dx: odom.dx, dy: odom.dy, dtheta: odom.dtheta });
        if self.store.due(timestamp, &self.matcher) {
            let target = self
                .store
                .find_loop_closure(code, timestamp, &self.matcher)
                .and_then(|m| self.store.get(m.template_id))
                .map(|t| t.experience_id);
            let id = self.map.on_sample(self.pose, timestamp, target, &self.relax)?;
            if target.is_some() {
                self.loop_closures += 1;
                self.pose = self.map.experience(id).expect("experience just added").pose;
            }
            self.store.maybe_sample(code, timestamp, id, &self.matcher);
        }
        self.trajectory.push(TrajectorySample {
            timestamp,
            x: self.pose.x,
            y: self.pose.y,
            theta: self.pose.theta,
        });
        Ok(())
    }
}

pub struct SlamRunner {
    config: RunConfig,
    encoder: EncoderState,
    surprise: SurpriseState,
    mb: MatcherBackend,
    telemetry: Vec<SurpriseRow>,
    frame_index: usize,
}

impl SlamRunner {
    pub fn new(n_inputs: usize, config: RunConfig) -> Result<Self, PipelineError> {
        config.matcher.validate()?;
        config.relax.validate().map_err(PipelineError::Backend)?;
        let encoder = EncoderState::new(n_inputs, config.coding.clone(), config.seed)
            .map_err(PipelineError::Coding)?;
        let surprise = SurpriseState::new(config.surprise_window)?;
        let mb = MatcherBackend::new(config.matcher.clone(), config.relax.clone());
        Ok(SlamRunner { config, encoder, surprise, mb, telemetry: Vec::new(), frame_index: 0 })
    }

    pub fn step(&mut self, frame: &Frame, odom: &OdomSample) -> Result<SurpriseRow, PipelineError> {
        let k = self.frame_index;
        let result = if self.config.gating {
            gated_learning_step(&mut self.encoder, &mut self.surprise, frame)
        } else {
            ungated_learning_step(&mut self.encoder, &mut self.surprise, frame)
        };
        let (code, decision) = result.map_err(|e| step_error(e, k))?;
        let row = SurpriseRow {
            k,
            e: self.encoder.prev_error(),
            s2_raw: self.surprise.last_raw().unwrap_or(0.0),
            s2_filtered: decision.s2(),
            gate_open: decision.learn(),
        };
        self.telemetry.push(row);
        self.mb.on_frame(&code, frame.timestamp, odom)?;
        self.frame_index += 1;
        Ok(row)
    }

    pub fn encoder(&self) -> &EncoderState {
        &self.encoder
    }

    pub fn store(&self) -> &TemplateStore {
        &self.mb.store
    }

    pub fn map(&self) -> &ExperienceMap {
        &self.mb.map
    }

    pub fn telemetry(&self) -> &[SurpriseRow] {
        &self.telemetry
    }

    pub fn trajectory(&self) -> &[TrajectorySample] {
        &self.mb.trajectory
    }

    pub fn loop_closures(&self) -> u64 {
        self.mb.loop_closures
    }

    pub fn frames_seen(&self) -> usize {
        self.frame_index
    }
}

/// Integrate raw odometry from the origin, with no corrections: the baseline
/// every loop-closing run is judged against.
pub fn dead_reckoning_trajectory(odometry: &[OdomSample]) -> Vec<TrajectorySample> {
    let mut pose = Pose::origin();
    odometry
        .iter()
        .map(|o| {
            pose = pose.compose(&RelPose { dx: o.dx, dy: o.dy, dtheta: o.dtheta });
            TrajectorySample { timestamp: o.timestamp, x: pose.x, y: pose.y, theta: pose.theta }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub scenario: String,
    pub mae_l: f64,
    pub mae_m: f64,
    pub transform: AlignmentTransform,
    pub mu: f64,
    pub params_hash: String,
}

fn to_eval_trajectory(samples: &[TrajectorySample]) -> Result<Trajectory, EvalError> {
    Trajectory::new(
        samples.iter().map(|s| TrajPoint { timestamp: s.timestamp, x: s.x, y: s.y }).collect(),
    )
}

fn gt_trajectory(gt: &[GroundTruthSample]) -> Result<Trajectory, EvalError> {
    Trajectory::new(
        gt.iter().map(|g| TrajPoint { timestamp: g.timestamp, x: g.x, y: g.y }).collect(),
    )
}

const REFINE_LEVELS: usize = 2;

/// Align the estimate to ground truth (coarse grid, two refinement levels)
/// and score both localisation and mapping under that one transform.
pub fn evaluate_against_ground_truth(
    trajectory: &[TrajectorySample],
    map_points: &[(f64, f64)],
    gt: &[GroundTruthSample],
) -> Result<(AlignmentTransform, f64, f64), PipelineError> {
    let traj = to_eval_trajectory(trajectory)?;
    let gt_traj = gt_trajectory(gt)?;
    let (transform, mae_l) =
        align_coarse_to_fine(&traj, &gt_traj, &GridSpec::default_coarse(), REFINE_LEVELS)?;
    let moved: Vec<(f64, f64)> =
        map_points.iter().map(|&(x, y)| transform.apply_point(x, y)).collect();
    let mae_m = mae_mapping(&moved, &gt_traj)?;
    Ok((transform, mae_l, mae_m))
}

fn fmt_cell(v: f64) -> String {
    format!("{v}")
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_trajectory_csv(path: &Path, samples: &[TrajectorySample]) -> Result<(), PipelineError> {
    let mut text = String::from("timestamp,x,y,theta\n");
    for s in samples {
        text.push_str(&format!(
            "{},{},{},{}\n",
            fmt_cell(s.timestamp),
            fmt_cell(s.x),
            fmt_cell(s.y),
            fmt_cell(s.theta)
        ));
    }
    write_text(path, &text)
}

pub fn write_surprise_csv(path: &Path, rows: &[SurpriseRow]) -> Result<(), PipelineError> {
    let mut text = String::from("k,e_k,s2_raw,s2_filtered,gate_open\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.k,
            fmt_cell(r.e),
            fmt_cell(r.s2_raw),
            fmt_cell(r.s2_filtered),
            u8::from(r.gate_open)
        ));
    }
    write_text(path, &text)
}

fn read_artifact_csv(path: &Path, header: &str) -> Result<Vec<Vec<f64>>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(PipelineError::Config(format!(
            "{}: expected header {header:?}",
            path.display()
        )));
    }
    let want = header.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Result<Vec<f64>, _> = line.split(',').map(str::parse).collect();
        let row = cells.map_err(|_| {
            PipelineError::Config(format!("{}: line {}: bad number", path.display(), i + 2))
        })?;
        if row.len() != want {
            return Err(PipelineError::Config(format!(
                "{}: line {}: expected {want} columns, got {}",
                path.display(),
                i + 2,
                row.len()
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Read back a trajectory written by [`write_trajectory_csv`]. The writer's
/// shortest-roundtrip float formatting makes this lossless.
pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectorySample>, PipelineError> {
    let rows = read_artifact_csv(path, "timestamp,x,y,theta")?;
    Ok(rows
        .into_iter()
        .map(|r| TrajectorySample { timestamp: r[0], x: r[1], y: r[2], theta: r[3] })
        .collect())
}

/// Read the experience positions back out of a `map.csv`.
pub fn read_map_points_csv(path: &Path) -> Result<Vec<(f64, f64)>, PipelineError> {
    let rows = read_artifact_csv(path, "experience_id,x,y,theta")?;
    Ok(rows.into_iter().map(|r| (r[1], r[2])).collect())
}

/// Run the full pipeline over a dataset directory and write every artifact
/// (`trajectory.csv`, `map.csv`, `links.csv`, `templates.csv`,
/// `surprise.csv`, `dictionary.dlsc`, `metrics.json`) into `out_dir`.
pub fn run_slam(
    dataset_dir: &Path,
    out_dir: &Path,
    config: &RunConfig,
) -> Result<Metrics, PipelineError> {
    let reader = DatasetReader::open(dataset_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let n_inputs = reader.frame(0)?.len();
    let mut runner = SlamRunner::new(n_inputs, config.clone())?;
    for i in 0..reader.len() {
        let frame = reader.frame(i)?;
        runner.step(&frame, &reader.odometry()[i])?;
    }

    write_trajectory_csv(&out_dir.join("trajectory.csv"), runner.trajectory())?;
    write_surprise_csv(&out_dir.join("surprise.csv"), runner.telemetry())?;
    let mut buf = Vec::new();
    runner.map().write_map_csv(&mut buf).map_err(|e| io_err(&out_dir.join("map.csv"), e))?;
    fs::write(out_dir.join("map.csv"), &buf).map_err(|e| io_err(&out_dir.join("map.csv"), e))?;
    buf.clear();
    runner.map().write_links_csv(&mut buf).map_err(|e| io_err(&out_dir.join("links.csv"), e))?;
    fs::write(out_dir.join("links.csv"), &buf).map_err(|e| io_err(&out_dir.join("links.csv"), e))?;
    buf.clear();
    runner.store().write_csv(&mut buf).map_err(|e| io_err(&out_dir.join("templates.csv"), e))?;
    fs::write(out_dir.join("templates.csv"), &buf)
        .map_err(|e| io_err(&out_dir.join("templates.csv"), e))?;
    runner
        .encoder()
        .dictionary()
        .save_checkpoint(&out_dir.join("dictionary.dlsc"))
        .map_err(PipelineError::Coding)?;

    let map_points: Vec<(f64, f64)> =
        runner.map().experiences().iter().map(|e| (e.pose.x, e.pose.y)).collect();
    let (transform, mae_l, mae_m) =
        evaluate_against_ground_truth(runner.trajectory(), &map_points, reader.ground_truth())?;
    let metrics = Metrics {
        scenario: reader.meta().scenario.clone(),
        mae_l,
        mae_m,
        transform,
        mu: config.matcher.mu,
        params_hash: params_hash(config),
    };
    let metrics_path = out_dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| PipelineError::Config(format!("metrics serialization: {e}")))?;
    write_text(&metrics_path, &(json + "\n"))?;
    Ok(metrics)
}

#[derive(Debug, Clone)]
pub struct ReplayStats {
    pub errors: Vec<f64>,
}

impl ReplayStats {
    pub fn mean(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.errors.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.errors.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Re-encode a frame sequence against a frozen dictionary, starting from a
/// zero code and warm-starting through the stream as the live system would.
/// Returns the per-frame reprojection errors.
pub fn replay_errors<'a>(
    dictionary: Dictionary,
    coding: &DlscParams,
    frames: impl IntoIterator<Item = &'a Frame>,
) -> Result<Vec<f64>, PipelineError> {
    let mut enc =
        EncoderState::from_dictionary(dictionary, coding.clone()).map_err(PipelineError::Coding)?;
    let mut errors = Vec::new();
    for (k, frame) in frames.into_iter().enumerate() {
        encode(&mut enc, frame).map_err(|e| coding_error(e, k))?;
        errors.push(enc.prev_error());
    }
    Ok(errors)
}

/// Replay a dataset against a checkpointed dictionary and write `replay.csv`
/// (`k,e_k`). The dictionary is never updated.
pub fn replay(
    dataset_dir: &Path,
    dictionary_path: &Path,
    out_csv: &Path,
    coding: &DlscParams,
) -> Result<ReplayStats, PipelineError> {
    let reader = DatasetReader::open(dataset_dir)?;
    let dictionary = Dictionary::load_checkpoint(dictionary_path).map_err(PipelineError::Coding)?;
    let mut enc =
        EncoderState::from_dictionary(dictionary, coding.clone()).map_err(PipelineError::Coding)?;
    let mut errors = Vec::with_capacity(reader.len());
    for k in 0..reader.len() {
        let frame = reader.frame(k)?;
        encode(&mut enc, &frame).map_err(|e| coding_error(e, k))?;
        errors.push(enc.prev_error());
    }
    let mut text = String::from("k,e_k\n");
    for (k, e) in errors.iter().enumerate() {
        text.push_str(&format!("{k},{}\n", fmt_cell(*e)));
    }
    write_text(out_csv, &text)?;
    Ok(ReplayStats { errors })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub mu: f64,
    pub loop_closures: u64,
    pub mae_l: f64,
    pub mae_m: f64,
}

/// Encode the stream once, then re-run matching, mapping and evaluation for
/// each threshold. Sampling times and templates do not depend on `mu`, so the
/// captured codes replay exactly.
pub fn sweep_mu(
    dataset_dir: &Path,
    out_csv: &Path,
    config: &RunConfig,
    mus: &[f64],
) -> Result<Vec<SweepPoint>, PipelineError> {
    if mus.is_empty() {
        return Err(PipelineError::Config("sweep needs at least one mu value".into()));
    }
    for &mu in mus {
        MatcherParams { mu, ..config.matcher.clone() }.validate()?;
    }
    let reader = DatasetReader::open(dataset_dir)?;
    let n_inputs = reader.frame(0)?.len();
    let mut enc = EncoderState::new(n_inputs, config.coding.clone(), config.seed)
        .map_err(PipelineError::Coding)?;
    let mut sur = SurpriseState::new(config.surprise_window)?;
    let mut codes = Vec::with_capacity(reader.len());
    for k in 0..reader.len() {
        let frame = reader.frame(k)?;
        let result = if config.gating {
            gated_learning_step(&mut enc, &mut sur, &frame)
        } else {
            ungated_learning_step(&mut enc, &mut sur, &frame)
        };
        let (code, _) = result.map_err(|e| step_error(e, k))?;
        codes.push((frame.timestamp, code));
    }

    let gt = reader.ground_truth();
    let mut points = Vec::with_capacity(mus.len());
    for &mu in mus {
        let params = MatcherParams { mu, ..config.matcher.clone() };
        let mut mb = MatcherBackend::new(params, config.relax.clone());
        for (k, (timestamp, code)) in codes.iter().enumerate() {
            mb.on_frame(code, *timestamp, &reader.odometry()[k])?;
        }
        let map_points: Vec<(f64, f64)> =
            mb.map.experiences().iter().map(|e| (e.pose.x, e.pose.y)).collect();
        let (_, mae_l, mae_m) = evaluate_against_ground_truth(&mb.trajectory, &map_points, gt)?;
        points.push(SweepPoint { mu, loop_closures: mb.loop_closures, mae_l, mae_m });
    }

    let mut text = String::from("mu,loop_closures,mae_l,mae_m\n");
    for p in &points {
        text.push_str(&format!(
            "{},{},{},{}\n",
            fmt_cell(p.mu),
            p.loop_closures,
            fmt_cell(p.mae_l),
            fmt_cell(p.mae_m)
        ));
    }
    write_text(out_csv, &text)?;
    Ok(points)
}
