//! Scripted experiments: one JSON spec in, CSV/PGM/JSON artifacts out.
//!
//! Each experiment reads its parameters from `spec.parameters`, writes its
//! artifacts into `spec.output_dir`, and finishes with `run.json` listing the
//! files, a small numeric summary, and any flagged failures.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::flow::{gnc_schedule, rate_grid, run_gnc_flow, RateGridConfig};
use crate::foe::FoEModel;
use crate::gmm::{linspace, BoxDomain, GaussianMixture, MixtureDocument};
use crate::io::{emit_csv, export_params, load_model, load_pgm, load_pgm_dir, save_model, save_pgm, write_atomic};
use crate::solve::{
    best_linear_schedule, capped_psnr, joint_minimize, psnr, scheduled_solve_traced, vn_forward_traced, vn_train,
    LogSchedule, SolveOutcome, TaskSpec, VNParams, VNSample, VNTrainConfig, DEFAULT_ETA,
};
use crate::spline::{SplineGrid, DEFAULT_N_T, DEFAULT_N_X};
use crate::tensor::ImageTensor;
use crate::train::{train, train_1d_score_recovery, PatchCorpus, ScoreRecoveryConfig, TrainConfig, TrainOptions};

/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "GNCPRIOR_THREADS";

pub const EXPERIMENTS: [&str; 7] =
    ["gmm-sweep", "gnc-rate", "train", "score-recovery", "solve", "vn-train", "export-params"];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default = "empty_object")]
    pub parameters: Value,
    pub output_dir: PathBuf,
    /// Overrides the seed inside `parameters`, where the experiment has one.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

impl ExperimentSpec {
    pub fn new(name: &str, parameters: Value, output_dir: impl Into<PathBuf>) -> Self {
        Self { name: name.into(), parameters, output_dir: output_dir.into(), seed: None }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub experiment: String,
    pub files: Vec<PathBuf>,
    pub summary: Value,
    /// Non-fatal failures; the run counts as failed when this is non-empty.
    pub flags: Vec<String>,
}

impl RunReport {
    pub fn is_clean(&self) -> bool {
        self.flags.is_empty()
    }
}

/// Sizes the global worker pool from [`THREADS_ENV`]; a no-op when unset.
pub fn init_threads_from_env() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize =
        v.trim().parse().map_err(|_| Error::invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    if n == 0 {
        return Err(Error::invalid(format!("{THREADS_ENV} must be positive")));
    }
    // a pool that already exists (e.g. in tests) keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parameters decoded into the target experiment's config.
#[derive(Clone, Debug)]
pub enum Parsed {
    GmmSweep(GmmSweepConfig),
    GncRate(GncRateConfig),
    Train(TrainExperiment),
    ScoreRecovery(ScoreRecoveryExperiment),
    Solve(SolveConfig),
    VnTrain(VnTrainExperiment),
    ExportParams(ExportConfig),
}

impl ExperimentSpec {
    /// Decodes `parameters` and applies the seed override without touching any file.
    pub fn parse(&self) -> Result<Parsed> {
        let p = &self.parameters;
        let seed = self.seed;
        Ok(match self.name.as_str() {
            "gmm-sweep" => Parsed::GmmSweep(parse(p)?),
            "gnc-rate" => Parsed::GncRate(parse(p)?),
            "train" => {
                let mut cfg: TrainExperiment = parse(p)?;
                if let Some(s) = seed {
                    cfg.train.seed = s;
                    cfg.init_seed = s;
                }
                cfg.train.validate()?;
                Parsed::Train(cfg)
            }
            "score-recovery" => {
                let mut cfg: ScoreRecoveryExperiment = parse(p)?;
                if let Some(s) = seed {
                    cfg.recovery.train.seed = s;
                }
                cfg.recovery.train.validate()?;
                Parsed::ScoreRecovery(cfg)
            }
            "solve" => {
                let mut cfg: SolveConfig = parse(p)?;
                if let Some(s) = seed {
                    cfg.task = cfg.task.with_seed(s);
                }
                cfg.task.validate()?;
                Parsed::Solve(cfg)
            }
            "vn-train" => {
                let mut cfg: VnTrainExperiment = parse(p)?;
                if let Some(s) = seed {
                    cfg.task = cfg.task.with_seed(s);
                }
                cfg.task.validate()?;
                Parsed::VnTrain(cfg)
            }
            "export-params" => Parsed::ExportParams(parse(p)?),
            other => return Err(Error::UnknownExperiment(other.into())),
        })
    }
}

/// Runs one experiment and writes `run.json` next to its artifacts.
pub fn run(spec: &ExperimentSpec) -> Result<RunReport> {
    let out = &spec.output_dir;
    let mut report = match spec.parse()? {
        Parsed::GmmSweep(c) => gmm_sweep(&c, out)?,
        Parsed::GncRate(c) => gnc_rate(&c, out)?,
        Parsed::Train(c) => train_experiment(&c, out)?,
        Parsed::ScoreRecovery(c) => score_recovery(&c, out)?,
        Parsed::Solve(c) => solve_experiment(&c, out)?,
        Parsed::VnTrain(c) => vn_train_experiment(&c, out)?,
        Parsed::ExportParams(c) => export_experiment(&c, out)?,
    };
    report.experiment = spec.name.clone();
    let path = out.join("run.json");
    write_atomic(&path, &serde_json::to_vec_pretty(&report)?)?;
    report.files.push(path);
    Ok(report)
}

fn parse<T: DeserializeOwned>(v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| Error::format(format!("experiment parameters: {e}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::at_path(dir, e))
}

fn mixture_or_benchmark(doc: &Option<MixtureDocument>) -> Result<GaussianMixture> {
    match doc {
        Some(d) => GaussianMixture::from_document(d.clone()),
        None => Ok(GaussianMixture::benchmark_1d()),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::invalid(format!("{what} path is required")));
    }
    if !path.exists() {
        return Err(Error::at_path(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found")),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------- gmm-sweep

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmSweepConfig {
    /// Defaults to the three-component 1D benchmark mixture.
    pub mixture: Option<MixtureDocument>,
    pub domain: BoxDomain,
    pub points_per_axis: usize,
    /// Decreasing smoothing levels tested for convexity.
    pub t_candidates: Vec<f64>,
    /// Smoothing levels at which 1D energy curves are sampled.
    pub curve_ts: Vec<f64>,
    pub curve_points: usize,
}

impl Default for GmmSweepConfig {
    fn default() -> Self {
        Self {
            mixture: None,
            domain: BoxDomain { lower: vec![-3.0], upper: vec![3.0] },
            points_per_axis: 2001,
            t_candidates: (0..=60).map(|k| 10f64.powf(2.0 - k as f64 / 10.0)).collect(),
            curve_ts: vec![1e-4, 1e-2, 1e-1, 1.0, 16.0],
            curve_points: 601,
        }
    }
}

pub fn gmm_sweep(cfg: &GmmSweepConfig, out: &Path) -> Result<RunReport> {
    let gmm = mixture_or_benchmark(&cfg.mixture)?;
    create_dir(out)?;
    let (conv, scan) = gmm.convexity_report(&cfg.domain, cfg.points_per_axis, &cfg.t_candidates)?;
    let mut files = Vec::new();

    let path = out.join("convexity.csv");
    let rows: Vec<[f64; 2]> = scan.curve.iter().map(|&(t, m)| [t, m]).collect();
    emit_csv(&path, &["t", "min_eigenvalue"], &rows)?;
    files.push(path);

    if gmm.dim() == 1 {
        let xs = linspace(cfg.domain.lower[0], cfg.domain.upper[0], cfg.curve_points.max(2));
        let mut rows = Vec::with_capacity(xs.len() * cfg.curve_ts.len());
        for &t in &cfg.curve_ts {
            let smoothed = gmm.smooth(t)?;
            for &x in &xs {
                let e = smoothed.evaluate(&[x])?;
                rows.push([t, x, e.value, e.gradient[0], e.hessian[(0, 0)]]);
            }
        }
        let path = out.join("energy_curves.csv");
        emit_csv(&path, &["t", "x", "energy", "gradient", "hessian"], &rows)?;
        files.push(path);
    }

    let path = out.join("report.json");
    write_atomic(&path, &serde_json::to_vec_pretty(&conv)?)?;
    files.push(path);
    let mut flags = Vec::new();
    if conv.numeric_t > conv.bound_t {
        flags.push(format!("numeric threshold {} exceeds the proven bound {}", conv.numeric_t, conv.bound_t));
    }
    let summary = json!({ "bound_t": conv.bound_t, "numeric_t": conv.numeric_t });
    Ok(RunReport { files, summary, flags, ..Default::default() })
}

// ----------------------------------------------------------------- gnc-rate

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GncRateConfig {
    pub mixture: Option<MixtureDocument>,
    pub rate: RateGridConfig,
    /// Equally spaced starts whose full trajectories are written out.
    pub trajectory_starts: usize,
    pub trajectory_t0: f64,
    pub trajectory_steps: usize,
}

impl Default for GncRateConfig {
    fn default() -> Self {
        Self {
            mixture: None,
            rate: RateGridConfig::default(),
            trajectory_starts: 21,
            trajectory_t0: 1.0,
            trajectory_steps: 100,
        }
    }
}

pub fn gnc_rate(cfg: &GncRateConfig, out: &Path) -> Result<RunReport> {
    let gmm = mixture_or_benchmark(&cfg.mixture)?;
    create_dir(out)?;
    let cells = rate_grid(&gmm, &cfg.rate)?;
    let mut files = Vec::new();
    let path = out.join("rate.csv");
    let rows: Vec<[f64; 3]> = cells.iter().map(|c| [c.t0, c.steps as f64, c.rate]).collect();
    emit_csv(&path, &["t0", "I", "rate"], &rows)?;
    files.push(path);

    if cfg.trajectory_starts > 0 {
        let schedule = gnc_schedule(cfg.trajectory_t0, cfg.rate.t_min, cfg.trajectory_steps, cfg.rate.eta)?;
        let (lo, hi) = cfg.rate.domain;
        let starts = if cfg.trajectory_starts == 1 { vec![lo] } else { linspace(lo, hi, cfg.trajectory_starts) };
        let mut rows = Vec::new();
        for (k, &x0) in starts.iter().enumerate() {
            let traj = run_gnc_flow(&gmm, &[x0], &schedule)?;
            for (i, x) in traj.iter().enumerate() {
                let t = schedule.values().get(i).copied().unwrap_or(f64::NAN);
                rows.push([k as f64, i as f64, t, x[0]]);
            }
        }
        let path = out.join("trajectories.csv");
        emit_csv(&path, &["start", "step", "t", "x"], &rows)?;
        files.push(path);
    }
    let summary = json!({ "cells": cells });
    Ok(RunReport { files, summary, ..Default::default() })
}

// -------------------------------------------------------------------- train

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainExperiment {
    /// Directory of 8-bit PGM training images.
    pub corpus: PathBuf,
    pub depth: usize,
    pub n_x: usize,
    pub n_t: usize,
    pub init_seed: u64,
    /// Continue from this model file instead of a fresh initialization.
    pub resume: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for TrainExperiment {
    fn default() -> Self {
        Self {
            corpus: PathBuf::new(),
            depth: 1,
            n_x: DEFAULT_N_X,
            n_t: DEFAULT_N_T,
            init_seed: 0,
            resume: None,
            train: TrainConfig::default(),
        }
    }
}

pub fn train_experiment(cfg: &TrainExperiment, out: &Path) -> Result<RunReport> {
    require_file(&cfg.corpus, "training corpus")?;
    cfg.train.validate()?;
    let images: Vec<ImageTensor> = load_pgm_dir(&cfg.corpus)?.into_iter().map(|(_, img)| img).collect();
    let corpus = PatchCorpus::new(images, cfg.train.patch_size)?;
    let mut model = match &cfg.resume {
        Some(p) => load_model(p)?,
        None => {
            let grid = SplineGrid::new(cfg.n_x, cfg.n_t, cfg.train.t_hat_min, cfg.train.t_hat_max)?;
            FoEModel::initialized(cfg.depth, grid, cfg.init_seed)?
        }
    };
    create_dir(out)?;
    let model_path = out.join("model.json");
    let trace_path = out.join("trace.csv");
    let opts = TrainOptions {
        checkpoint: Some(model_path.clone()),
        trace_csv: Some(trace_path.clone()),
        ..Default::default()
    };
    let files = vec![model_path, trace_path];
    match train(&mut model, &corpus, &cfg.train, &opts) {
        Ok(trace) => {
            let last = trace.last().map_or(f64::NAN, |r| r.loss);
            let summary = json!({ "iterations": trace.len(), "final_loss": last, "images": corpus.len() });
            Ok(RunReport { files, summary, ..Default::default() })
        }
        // the last good model and the trace are already on disk
        Err(e @ Error::Diverged { .. }) => Ok(RunReport { files, flags: vec![e.to_string()], ..Default::default() }),
        Err(e) => Err(e),
    }
}

// ----------------------------------------------------------- score-recovery

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreRecoveryExperiment {
    pub mixture: Option<MixtureDocument>,
    pub recovery: ScoreRecoveryConfig,
    /// Flag the run when any reported error exceeds this.
    pub max_rel_error: Option<f64>,
    pub curve_points: usize,
}

impl Default for ScoreRecoveryExperiment {
    fn default() -> Self {
        Self { mixture: None, recovery: ScoreRecoveryConfig::default(), max_rel_error: None, curve_points: 201 }
    }
}

pub fn score_recovery(cfg: &ScoreRecoveryExperiment, out: &Path) -> Result<RunReport> {
    let gmm = mixture_or_benchmark(&cfg.mixture)?;
    create_dir(out)?;
    let (model, report) = train_1d_score_recovery(&gmm, &cfg.recovery)?;
    let mut files = Vec::new();

    let path = out.join("score_error.csv");
    let rows: Vec<[f64; 4]> = report.rows.iter().map(|r| [r.t, r.lo, r.hi, r.rel_error]).collect();
    emit_csv(&path, &["t", "lo", "hi", "rel_error"], &rows)?;
    files.push(path);

    let path = out.join("trace.csv");
    let rows: Vec<[f64; 3]> = report.trace.iter().map(|r| [r.iteration as f64, r.loss, r.lr]).collect();
    emit_csv(&path, &["iteration", "loss", "lr"], &rows)?;
    files.push(path);

    let path = out.join("model.json");
    save_model(&path, &model)?;
    files.push(path);

    let act = &model.layers[0].activations[0];
    let k = model.layers[0].conv.kernels[0];
    let mut rows = Vec::new();
    for r in &report.rows {
        let smoothed = gmm.smooth(r.t)?;
        for x in linspace(r.lo, r.hi, cfg.curve_points.max(2)) {
            let learned = -k * act.eval(k * x, r.t.ln(), 1, 0)?;
            let truth = -smoothed.evaluate(&[x])?.gradient[0];
            rows.push([r.t, x, learned, truth]);
        }
    }
    let path = out.join("score_curves.csv");
    emit_csv(&path, &["t", "x", "learned_score", "true_score"], &rows)?;
    files.push(path);

    let mut flags = Vec::new();
    if let Some(limit) = cfg.max_rel_error {
        for r in &report.rows {
            if !(r.rel_error < limit) {
                flags.push(format!("score error {:.4} at t={} exceeds {limit}", r.rel_error, r.t));
            }
        }
    }
    let summary = json!({ "rows": report.rows, "max_ema_increase": report.max_ema_increase });
    Ok(RunReport { files, summary, flags, ..Default::default() })
}

// -------------------------------------------------------------------- solve

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMethod {
    /// Proximal GNC flow along a linear log-smoothing schedule.
    #[default]
    Scheduled,
    /// Joint descent in the image and the smoothing level.
    Joint,
    /// Unrolled network with learned per-step parameters.
    Vn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    /// The input is a clean image; the observation is synthesized from the task.
    #[default]
    Clean,
    /// The input already is the observation (for inpainting, zeros mark missing pixels).
    Observation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    pub model: PathBuf,
    pub task: TaskSpec,
    pub input: PathBuf,
    #[serde(default)]
    pub input_kind: InputKind,
    /// Ground truth for PSNR; defaults to the input when it is clean.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default)]
    pub method: SolveMethod,
    /// Initial log-smoothing; defaults to the top of the model's range.
    #[serde(default)]
    pub t_hat0: Option<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Learned schedule for `method = "vn"`.
    #[serde(default)]
    pub vn_params: Option<PathBuf>,
}

fn default_steps() -> usize {
    30
}

fn default_eta() -> f64 {
    DEFAULT_ETA
}

fn trace_rows(outcome: &SolveOutcome) -> Vec<[f64; 4]> {
    outcome.trace.iter().map(|r| [r.step as f64, r.energy, r.psnr.map_or(f64::NAN, capped_psnr), r.t_hat]).collect()
}

pub fn solve_experiment(cfg: &SolveConfig, out: &Path) -> Result<RunReport> {
    require_file(&cfg.model, "model")?;
    require_file(&cfg.input, "input image")?;
    let model = load_model(&cfg.model)?;
    let input = load_pgm(&cfg.input)?;
    let (fid, x0) = match cfg.input_kind {
        InputKind::Clean => cfg.task.degrade(&input)?,
        InputKind::Observation => cfg.task.observe(input.clone())?,
    };
    let reference = match (&cfg.reference, cfg.input_kind) {
        (Some(p), _) => Some(load_pgm(p)?),
        (None, InputKind::Clean) => Some(input),
        (None, InputKind::Observation) => None,
    };
    let t_hat0 = cfg.t_hat0.unwrap_or(model.t_hat_range().1);
    let outcome = match cfg.method {
        SolveMethod::Scheduled => {
            let schedule = LogSchedule::linear(t_hat0, model.t_hat_range().0, cfg.steps, cfg.eta)?;
            scheduled_solve_traced(&model, &fid, &x0, &schedule, reference.as_ref())?
        }
        SolveMethod::Joint => joint_minimize(&model, &fid, &x0, t_hat0, cfg.eta, cfg.steps, reference.as_ref())?,
        SolveMethod::Vn => {
            let path = cfg.vn_params.as_ref().ok_or_else(|| Error::invalid("method \"vn\" needs vn_params"))?;
            let vn = load_vn_params(path)?;
            vn_forward_traced(&model, &vn, &fid, &x0, reference.as_ref())?
        }
    };
    create_dir(out)?;
    let mut files = Vec::new();
    let path = out.join("observation.pgm");
    save_pgm(&path, fid.observation())?;
    files.push(path);
    let path = out.join("restored.pgm");
    save_pgm(&path, &outcome.x)?;
    files.push(path);
    let path = out.join("trace.csv");
    emit_csv(&path, &["step", "energy", "psnr", "t_hat"], &trace_rows(&outcome))?;
    files.push(path);

    let (input_psnr, output_psnr) = match &reference {
        Some(r) => (Some(capped_psnr(psnr(&x0, r)?)), Some(capped_psnr(psnr(&outcome.x, r)?))),
        None => (None, None),
    };
    let summary = json!({
        "input_psnr": input_psnr,
        "output_psnr": output_psnr,
        "final_energy": outcome.final_energy(),
    });
    let flags = outcome.aborted.into_iter().collect();
    Ok(RunReport { files, summary, flags, ..Default::default() })
}

pub fn load_vn_params(path: &Path) -> Result<VNParams> {
    let bytes = fs::read(path).map_err(|e| Error::at_path(path, e))?;
    let raw: VNParams = serde_json::from_slice(&bytes)?;
    VNParams::new(raw.t_hats, raw.etas)
}

// ----------------------------------------------------------------- vn-train

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VnTrainExperiment {
    pub model: PathBuf,
    pub train_dir: PathBuf,
    pub val_dir: PathBuf,
    pub task: TaskSpec,
    /// Side of the centered square crop taken from every image (`None` keeps full images).
    #[serde(default = "default_crop")]
    pub crop: Option<usize>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Grid for the fixed-schedule baseline; defaults to 6 values across the model's range.
    #[serde(default)]
    pub t_hat0s: Option<Vec<f64>>,
    #[serde(default = "default_etas")]
    pub etas: Vec<f64>,
    #[serde(default)]
    pub vn: VNTrainConfig,
}

fn default_crop() -> Option<usize> {
    Some(48)
}

fn default_etas() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}

/// Centered `side × side` crop, or the image itself when it is smaller.
pub fn center_crop(img: &ImageTensor, side: usize) -> Result<ImageTensor> {
    let (h, w) = (img.height().min(side), img.width().min(side));
    img.crop((img.height() - h) / 2, (img.width() - w) / 2, h, w)
}

/// Degrades every image of `dir`; image `k` uses seed `task.seed() + k`.
pub fn load_samples(dir: &Path, task: &TaskSpec, crop: Option<usize>) -> Result<Vec<VNSample>> {
    require_file(dir, "image directory")?;
    let images = load_pgm_dir(dir)?;
    if images.is_empty() {
        return Err(Error::invalid(format!("no PGM images in {}", dir.display())));
    }
    images
        .iter()
        .enumerate()
        .map(|(k, (_, img))| {
            let img = match crop {
                Some(side) => center_crop(img, side)?,
                None => img.clone(),
            };
            task.with_seed(task.seed().wrapping_add(k as u64)).sample(&img)
        })
        .collect()
}

/// Per-step mean energy and PSNR of one solver over a sample set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodCurve {
    /// Mean `E(x_i, t̂_i)` along each run's own smoothing path.
    pub energy: Vec<f64>,
    pub psnr: Vec<f64>,
    /// Mean `E(x_I, t̂_min)`: every endpoint scored on the least-smoothed energy.
    pub target_energy: f64,
    pub aborted: usize,
}

impl MethodCurve {
    pub fn final_energy(&self) -> f64 {
        self.energy.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_psnr(&self) -> f64 {
        self.psnr.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub fixed: MethodCurve,
    pub joint: MethodCurve,
    pub vn: MethodCurve,
}

fn mean_curve(outcomes: &[SolveOutcome], target_energy: f64) -> MethodCurve {
    let len = outcomes.iter().map(|o| o.trace.len()).min().unwrap_or(0);
    let n = outcomes.len() as f64;
    let mut energy = vec![0.0; len];
    let mut psnr = vec![0.0; len];
    for o in outcomes {
        for (k, row) in o.trace.iter().take(len).enumerate() {
            energy[k] += row.energy / n;
            psnr[k] += row.psnr.map_or(f64::NAN, capped_psnr) / n;
        }
    }
    let aborted = outcomes.iter().filter(|o| o.aborted.is_some()).count();
    MethodCurve { energy, psnr, target_energy, aborted }
}

/// Runs the fixed schedule, the joint solver (started at the fixed schedule's
/// `(t̂₀, η₀)` for as many steps), and the learned schedule on every sample.
pub fn compare_methods(
    model: &FoEModel,
    samples: &[VNSample],
    fixed: &LogSchedule,
    vn: &VNParams,
) -> Result<MethodComparison> {
    use rayon::prelude::*;
    let steps = fixed.len();
    let (t0, eta0) = (fixed.t_hats[0], fixed.etas[0]);
    let t_min = model.t_hat_range().0;
    let run = |f: &(dyn Fn(&VNSample) -> Result<SolveOutcome> + Sync)| -> Result<MethodCurve> {
        let outs = samples.par_iter().map(f).collect::<Result<Vec<_>>>()?;
        let mut target = 0.0;
        for (o, s) in outs.iter().zip(samples) {
            target += (model.energy(&o.x, t_min)? + s.fid.energy(&o.x)?) / samples.len() as f64;
        }
        Ok(mean_curve(&outs, target))
    };
    Ok(MethodComparison {
        fixed: run(&|s| scheduled_solve_traced(model, &s.fid, &s.x0, fixed, Some(&s.target)))?,
        joint: run(&|s| joint_minimize(model, &s.fid, &s.x0, t0, eta0, steps, Some(&s.target)))?,
        vn: run(&|s| vn_forward_traced(model, vn, &s.fid, &s.x0, Some(&s.target)))?,
    })
}

pub fn default_t_hat0s(model: &FoEModel) -> Vec<f64> {
    let (lo, hi) = model.t_hat_range();
    linspace(lo + 0.5 * (hi - lo), hi, 6)
}

pub fn vn_train_experiment(cfg: &VnTrainExperiment, out: &Path) -> Result<RunReport> {
    require_file(&cfg.model, "model")?;
    let model = load_model(&cfg.model)?;
    let train_set = load_samples(&cfg.train_dir, &cfg.task, cfg.crop)?;
    // validation observations use a disjoint seed range
    let val_task = cfg.task.with_seed(cfg.task.seed().wrapping_add(1 << 32));
    let val_set = load_samples(&cfg.val_dir, &val_task, cfg.crop)?;
    let t_hat0s = cfg.t_hat0s.clone().unwrap_or_else(|| default_t_hat0s(&model));
    create_dir(out)?;
    let mut files = Vec::new();

    let (fixed, candidates) = best_linear_schedule(&model, &val_set, &t_hat0s, &cfg.etas, cfg.steps)?;
    let path = out.join("schedule_search.csv");
    let rows: Vec<[f64; 3]> = candidates.iter().map(|c| [c.t_hat0, c.eta, c.psnr]).collect();
    emit_csv(&path, &["t_hat0", "eta", "psnr"], &rows)?;
    files.push(path);
    let path = out.join("fixed_schedule.json");
    write_atomic(&path, &serde_json::to_vec_pretty(&fixed)?)?;
    files.push(path);

    let mut vn = VNParams::from_schedule(&fixed);
    let mut flags = Vec::new();
    let report = match vn_train(&model, &mut vn, &train_set, &val_set, &cfg.vn) {
        Ok(r) => Some(r),
        Err(e @ Error::Diverged { .. }) => {
            flags.push(e.to_string());
            None
        }
        Err(e) => return Err(e),
    };
    let path = out.join("vn_params.json");
    write_atomic(&path, &serde_json::to_vec_pretty(&vn)?)?;
    files.push(path);
    if let Some(r) = &report {
        let path = out.join("vn_trace.csv");
        let rows: Vec<[f64; 3]> = r.trace.iter().map(|e| [e.epoch as f64, e.train_mse, e.val_psnr]).collect();
        emit_csv(&path, &["epoch", "train_mse", "val_psnr"], &rows)?;
        files.push(path);
    }

    let cmp = compare_methods(&model, &val_set, &fixed, &vn)?;
    let len = cmp.fixed.energy.len().min(cmp.joint.energy.len()).min(cmp.vn.energy.len());
    let rows: Vec<[f64; 7]> = (0..len)
        .map(|k| {
            [
                k as f64,
                cmp.fixed.energy[k],
                cmp.joint.energy[k],
                cmp.vn.energy[k],
                cmp.fixed.psnr[k],
                cmp.joint.psnr[k],
                cmp.vn.psnr[k],
            ]
        })
        .collect();
    let path = out.join("comparison.csv");
    emit_csv(
        &path,
        &["step", "energy_fixed", "energy_joint", "energy_vn", "psnr_fixed", "psnr_joint", "psnr_vn"],
        &rows,
    )?;
    files.push(path);
    for (name, c) in [("fixed", &cmp.fixed), ("joint", &cmp.joint), ("vn", &cmp.vn)] {
        if c.aborted > 0 {
            flags.push(format!("{name} solver aborted on {} samples", c.aborted));
        }
    }
    let summary = json!({
        "best_fixed": { "t_hat0": fixed.t_hats[0], "eta": fixed.etas[0] },
        "vn_initial_val_psnr": report.as_ref().map(|r| r.initial_val_psnr),
        "vn_best_val_psnr": report.as_ref().map(|r| r.best_val_psnr),
        "vn_best_epoch": report.as_ref().map(|r| r.best_epoch),
        "final_energy": { "fixed": cmp.fixed.final_energy(), "joint": cmp.joint.final_energy(), "vn": cmp.vn.final_energy() },
        "target_energy": { "fixed": cmp.fixed.target_energy, "joint": cmp.joint.target_energy, "vn": cmp.vn.target_energy },
        "final_psnr": { "fixed": cmp.fixed.final_psnr(), "joint": cmp.joint.final_psnr(), "vn": cmp.vn.final_psnr() },
    });
    Ok(RunReport { files, summary, flags, ..Default::default() })
}

// ------------------------------------------------------------ export-params

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    pub model: PathBuf,
}

pub fn export_experiment(cfg: &ExportConfig, out: &Path) -> Result<RunReport> {
    require_file(&cfg.model, "model")?;
    let model = load_model(&cfg.model)?;
    let files = export_params(&model, out)?;
    let kernels = files.iter().filter(|p| p.extension().is_some_and(|e| e == "pgm")).count();
    let summary = json!({ "kernels": kernels, "activations": files.len() - kernels });
    Ok(RunReport { files, summary, ..Default::default() })
}
