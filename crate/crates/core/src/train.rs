//! Joint score-matching training: patch sampling, batched loss/gradient,
//! the AdaBelief loop with cosine annealing, and the 1D score-recovery and
//! loss-equivalence harnesses on Gaussian-mixture data.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{loss_backprop, LossParts};
use crate::error::{Error, Result};
use crate::foe::FoEModel;
use crate::gmm::{linspace, GaussianMixture};
use crate::io::{emit_csv, save_model};
use crate::optim::{cosine_lr, AdaBelief};
use crate::spline::{SplineActivation2D, SplineGrid, DEFAULT_N_T, DEFAULT_N_X};
use crate::tensor::{ImageTensor, Tensor};

/// The only generator accepted in configs: ChaCha with 8 rounds, seeded from a `u64`.
pub const RNG_NAME: &str = "chacha8";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub t_hat_min: f64,
    pub t_hat_max: f64,
    /// Weight of the smoothing-direction term; `None` means `1/d`.
    pub m_t: Option<f64>,
    pub batch_size: usize,
    pub patch_size: usize,
    pub iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    pub rng: String,
    /// Save a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_hat_min: (1e-4f64).ln(),
            t_hat_max: 0.0,
            m_t: None,
            batch_size: 16,
            patch_size: 32,
            iterations: 5000,
            lr_start: 1e-3,
            lr_end: 5e-5,
            seed: 0,
            rng: RNG_NAME.into(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    /// Full-size recipe: 96×96 patches, batch 128, 100 000 iterations.
    pub fn paper_scale() -> Self {
        Self { batch_size: 128, patch_size: 96, iterations: 100_000, checkpoint_every: 5000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_hat_min.is_finite() && self.t_hat_max.is_finite() && self.t_hat_min < self.t_hat_max) {
            return Err(Error::invalid("t_hat_min < t_hat_max required"));
        }
        if self.batch_size == 0 || self.patch_size == 0 || self.iterations == 0 {
            return Err(Error::invalid("batch_size, patch_size and iterations must be positive"));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return Err(Error::invalid("learning rates need lr_start >= lr_end > 0"));
        }
        if let Some(m) = self.m_t {
            if !(m.is_finite() && m >= 0.0) {
                return Err(Error::invalid("m_t must be finite and non-negative"));
            }
        }
        if self.rng != RNG_NAME {
            return Err(Error::invalid(format!("unsupported rng {:?} (only {RNG_NAME:?})", self.rng)));
        }
        Ok(())
    }

    pub fn make_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Learning rate used at iteration `it` (the last iteration uses `lr_end`).
    pub fn lr_at(&self, it: usize) -> Result<f64> {
        cosine_lr(it, self.iterations.saturating_sub(1), self.lr_start, self.lr_end)
    }
}

/// Grayscale training images with intensities in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct PatchCorpus {
    images: Vec<ImageTensor>,
    patch_size: usize,
}

impl PatchCorpus {
    pub fn new(images: Vec<ImageTensor>, patch_size: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("training corpus is empty"));
        }
        if patch_size == 0 {
            return Err(Error::invalid("patch size must be positive"));
        }
        for (i, img) in images.iter().enumerate() {
            if img.channels() != 1 || img.height() < patch_size || img.width() < patch_size {
                return Err(Error::invalid(format!(
                    "corpus image {i} ({}x{}) is smaller than the {patch_size}px patch",
                    img.height(),
                    img.width()
                )));
            }
        }
        Ok(Self { images, patch_size })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }
}

/// A clean sample, its noise, and the log-smoothing level; the model sees `x + e^{t̂/2} n`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPoint {
    pub x: ImageTensor,
    pub noise: ImageTensor,
    pub t_hat: f64,
}

impl TrainingPoint {
    pub fn noisy(&self) -> ImageTensor {
        let mut y = self.x.clone();
        y.axpy((0.5 * self.t_hat).exp(), &self.noise);
        y
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let data = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::image(h, w, data).expect("shape matches data")
}

/// Draws image index, patch corner, `t̂ ~ U[t̂_min, t̂_max]`, then the noise, in that order.
pub fn sample_training_point(corpus: &PatchCorpus, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<TrainingPoint> {
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let p = corpus.patch_size;
    let img = &corpus.images[rng.random_range(0..corpus.len())];
    let y0 = rng.random_range(0..=img.height() - p);
    let x0 = rng.random_range(0..=img.width() - p);
    let t_hat = rng.random_range(cfg.t_hat_min..cfg.t_hat_max);
    let x = img.crop(y0, x0, p, p)?;
    let noise = normal_tensor(rng, p, p);
    Ok(TrainingPoint { x, noise, t_hat })
}

/// Fixed-shape pairwise reduction so sums do not depend on scheduling.
pub(crate) fn tree_sum(mut items: Vec<(f64, Vec<f64>)>) -> (f64, Vec<f64>) {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some((la, mut ga)) = it.next() {
            if let Some((lb, gb)) = it.next() {
                for (a, b) in ga.iter_mut().zip(&gb) {
                    *a += b;
                }
                next.push((la + lb, ga));
            } else {
                next.push((la, ga));
            }
        }
        items = next;
    }
    items.pop().unwrap_or((0.0, Vec::new()))
}

/// Whether the model is `R(y, t̂) = φ(k·y, t̂)` on single pixels: one layer, one `1×1` kernel.
fn is_scalar(model: &FoEModel) -> bool {
    model.layers.len() == 1 && model.layers[0].conv.kernels.len() == 1
}

/// Closed-form per-sample loss for a scalar model on a `1×1` input; adds the
/// parameter gradient into `grad` (kernel first, then the spline weights).
pub fn scalar_loss_and_grad(
    model: &FoEModel,
    y: f64,
    n: f64,
    t_hat: f64,
    m_t: f64,
    grad: &mut [f64],
) -> Result<LossParts> {
    if !is_scalar(model) {
        return Err(Error::invalid("closed-form loss needs a scalar model"));
    }
    if grad.len() != model.num_params() {
        return Err(Error::DimensionMismatch { expected: model.num_params(), got: grad.len() });
    }
    let grid = model.grid;
    if !grid.contains_t_hat(t_hat) {
        return Err(Error::SmoothingOutOfRange { value: t_hat, min: grid.t_hat_min, max: grid.t_hat_max });
    }
    let act = &model.layers[0].activations[0];
    let k = model.layers[0].conv.kernels[0];
    let u = k * y;
    let phi = |dx, dt| act.eval(u, t_hat, dx, dt);
    let s = (0.5 * t_hat).exp();
    let r = s * k * phi(1, 0)? - n;
    let score = 0.5 * r * r;
    let (mut t_term, mut r_t) = (0.0, 0.0);
    if m_t > 0.0 {
        r_t = phi(0, 1)?;
        t_term = 0.5 * m_t * (r_t * r_t - 2.0 * phi(0, 2)?);
        grad[0] += m_t * y * (r_t * phi(1, 1)? - phi(1, 2)?);
    }
    grad[0] += r * s * (phi(1, 0)? + u * phi(2, 0)?);
    // cotangents of φ_x, φ_t and φ_tt at (u, t̂)
    let seeds = [(1, 0, r * s * k), (0, 1, m_t * r_t), (0, 2, -m_t)];
    let cols = grid.t_columns();
    let w = &mut grad[1..];
    for (dx, dt, c) in seeds {
        if c == 0.0 {
            continue;
        }
        let bt = grid.t_basis(t_hat, dt);
        for (l, vx) in grid.x_basis(u, dx).iter() {
            for (o, vt) in bt.iter() {
                w[l * cols + o] += c * vx * vt;
            }
        }
    }
    Ok(LossParts { score, t_term })
}

/// Mean loss and mean parameter gradient over a batch.
pub fn batch_loss_and_grad(model: &FoEModel, batch: &[TrainingPoint], m_t: Option<f64>) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if is_scalar(model) && batch.iter().all(|p| p.x.len() == 1 && p.noise.len() == 1) {
        // single-pixel samples: accumulate sparse closed-form gradients in batch order
        let mut grad = vec![0.0; model.num_params()];
        let mut loss = 0.0;
        for p in batch {
            let y = p.noisy().data()[0];
            loss += scalar_loss_and_grad(model, y, p.noise.data()[0], p.t_hat, m_t.unwrap_or(1.0), &mut grad)?.total();
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        return Ok((loss / n, grad));
    }
    let per: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|p| {
            let m = m_t.unwrap_or(1.0 / p.x.len() as f64);
            let (parts, g): (LossParts, Vec<f64>) = loss_backprop(model, &p.noisy(), &p.noise, p.t_hat, m)?;
            Ok((parts.total(), g))
        })
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let (loss, mut grad) = tree_sum(per);
    for g in &mut grad {
        *g /= n;
    }
    Ok((loss / n, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Model file rewritten at every checkpoint and at the end.
    pub checkpoint: Option<PathBuf>,
    /// Loss trace CSV `(iteration, loss, lr)`, rewritten at every checkpoint and at the end.
    pub trace_csv: Option<PathBuf>,
    /// Parameters excluded from updates (same layout as [`FoEModel::params`]).
    pub frozen: Option<Vec<bool>>,
    pub progress: Option<&'a dyn Fn(&TraceRow)>,
}

fn trace_rows(trace: &[TraceRow]) -> Vec<[f64; 3]> {
    trace.iter().map(|r| [r.iteration as f64, r.loss, r.lr]).collect()
}

fn write_outputs(model: &FoEModel, trace: &[TraceRow], opts: &TrainOptions) -> Result<()> {
    if let Some(p) = &opts.checkpoint {
        save_model(p, model)?;
    }
    if let Some(p) = &opts.trace_csv {
        emit_csv(p, &["iteration", "loss", "lr"], &trace_rows(trace))?;
    }
    Ok(())
}

/// Generic loop: draws `batch_size` points per iteration from `sampler` and
/// takes one AdaBelief step. On a non-finite loss or gradient the model keeps
/// the last good parameters, the outputs are flushed, and `Diverged` is returned.
pub fn train_with<S>(
    model: &mut FoEModel,
    cfg: &TrainConfig,
    mut sampler: S,
    opts: &TrainOptions,
) -> Result<Vec<TraceRow>>
where
    S: FnMut(&mut ChaCha8Rng) -> Result<TrainingPoint>,
{
    cfg.validate()?;
    let n = model.num_params();
    if let Some(f) = &opts.frozen {
        if f.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: f.len() });
        }
    }
    let mut rng = cfg.make_rng();
    let mut opt = AdaBelief::new(n);
    let mut params = model.params();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let lr = cfg.lr_at(it)?;
        let batch = (0..cfg.batch_size).map(|_| sampler(&mut rng)).collect::<Result<Vec<_>>>()?;
        let step = batch_loss_and_grad(model, &batch, cfg.m_t).and_then(|(loss, mut grad)| {
            if !loss.is_finite() {
                return Err(Error::NonFinite("batch loss".into()));
            }
            if let Some(f) = &opts.frozen {
                for (g, frozen) in grad.iter_mut().zip(f) {
                    if *frozen {
                        *g = 0.0;
                    }
                }
            }
            let mut next = params.clone();
            opt.step(&mut next, &grad, lr)?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("updated parameters".into()));
            }
            Ok((loss, next))
        });
        let (loss, next) = match step {
            Ok(v) => v,
            Err(e @ (Error::NonFinite(_) | Error::SmoothingOutOfRange { .. })) => {
                model.set_params(&params)?;
                write_outputs(model, &trace, opts)?;
                return Err(Error::Diverged { iteration: it, reason: e.to_string() });
            }
            Err(e) => return Err(e),
        };
        params = next;
        model.set_params(&params)?;
        let row = TraceRow { iteration: it, loss, lr };
        trace.push(row);
        if let Some(cb) = opts.progress {
            cb(&row);
        }
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            write_outputs(model, &trace, opts)?;
        }
    }
    write_outputs(model, &trace, opts)?;
    Ok(trace)
}

/// Trains on random patches of `corpus`.
pub fn train(
    model: &mut FoEModel,
    corpus: &PatchCorpus,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<Vec<TraceRow>> {
    if corpus.patch_size() != cfg.patch_size {
        return Err(Error::invalid("corpus patch size differs from the config"));
    }
    train_with(model, cfg, |rng| sample_training_point(corpus, cfg, rng), opts)
}

/// Exponential moving average of the loss trace with smoothing factor `alpha`.
pub fn ema(trace: &[TraceRow], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = None;
    for r in trace {
        let v = match acc {
            None => r.loss,
            Some(a) => (1.0 - alpha) * a + alpha * r.loss,
        };
        acc = Some(v);
        out.push(v);
    }
    out
}

fn sample_mixture_1d(gmm: &GaussianMixture, rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    let mut k = gmm.len() - 1;
    for (i, w) in gmm.weights().iter().enumerate() {
        acc += w;
        if u < acc {
            k = i;
            break;
        }
    }
    let z: f64 = rng.sample(StandardNormal);
    gmm.means()[k][0] + gmm.covariances()[k][(0, 0)].sqrt() * z
}

fn require_1d(gmm: &GaussianMixture) -> Result<()> {
    if gmm.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: gmm.dim() });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreRecoveryConfig {
    pub n_x: usize,
    pub n_t: usize,
    pub train: TrainConfig,
    /// Smoothing levels `t` at which the score error is reported.
    pub eval_t: Vec<f64>,
    /// Uniform evaluation points across the 5th–95th percentile interval.
    pub eval_points: usize,
}

impl Default for ScoreRecoveryConfig {
    /// Training covers `t ∈ [1e-4, 10]` so that every reported level, `t = 1`
    /// included, lies well inside the sampled smoothing interval.
    fn default() -> Self {
        Self {
            n_x: DEFAULT_N_X,
            n_t: DEFAULT_N_T,
            train: TrainConfig {
                t_hat_max: 10f64.ln(),
                batch_size: 1024,
                patch_size: 1,
                iterations: 20_000,
                lr_start: 1e-2,
                lr_end: 1e-4,
                m_t: Some(1.0),
                checkpoint_every: 500,
                ..TrainConfig::default()
            },
            eval_t: vec![1e-2, 1e-1, 1.0],
            eval_points: 401,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreErrorRow {
    pub t: f64,
    pub lo: f64,
    pub hi: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub rows: Vec<ScoreErrorRow>,
    pub trace: Vec<TraceRow>,
    /// `(iteration, EMA loss)` at every checkpoint.
    pub ema_checkpoints: Vec<(usize, f64)>,
    /// Largest relative increase `(EMA(k+1) − EMA(k)) / |EMA(k)|` between consecutive
    /// checkpoints (the loss can be negative through the smoothing-direction term).
    pub max_ema_increase: f64,
}

/// 5th and 95th percentiles of the smoothed 1D mixture density.
pub fn percentile_interval(gmm: &GaussianMixture, t: f64) -> Result<(f64, f64)> {
    require_1d(gmm)?;
    let sd = gmm.covariances().iter().map(|c| (c[(0, 0)] + t).sqrt()).fold(0.0, f64::max);
    let lo = gmm.means().iter().map(|m| m[0]).fold(f64::INFINITY, f64::min) - 10.0 * sd;
    let hi = gmm.means().iter().map(|m| m[0]).fold(f64::NEG_INFINITY, f64::max) + 10.0 * sd;
    let xs = linspace(lo, hi, 20_001);
    let smoothed = gmm.smooth(t)?;
    let dens = xs.iter().map(|x| smoothed.evaluate(&[*x]).map(|e| (-e.value).exp())).collect::<Result<Vec<_>>>()?;
    let mut cdf = vec![0.0; xs.len()];
    for k in 1..xs.len() {
        cdf[k] = cdf[k - 1] + 0.5 * (dens[k] + dens[k - 1]) * (xs[k] - xs[k - 1]);
    }
    let total = cdf[xs.len() - 1];
    let quantile = |q: f64| {
        let target = q * total;
        let k = cdf.partition_point(|c| *c < target).clamp(1, xs.len() - 1);
        let (c0, c1) = (cdf[k - 1], cdf[k]);
        let f = if c1 > c0 { (target - c0) / (c1 - c0) } else { 0.0 };
        xs[k - 1] + f * (xs[k] - xs[k - 1])
    };
    Ok((quantile(0.05), quantile(0.95)))
}

/// Relative L2 error between `−∂_x φ(·, ln t)` and the analytic smoothed score,
/// on a uniform grid over the 5th–95th percentile interval.
pub fn score_error(model: &FoEModel, gmm: &GaussianMixture, t: f64, points: usize) -> Result<ScoreErrorRow> {
    require_1d(gmm)?;
    if model.layers.len() != 1 || model.layers[0].activations.len() != 1 {
        return Err(Error::invalid("score recovery needs a scalar model"));
    }
    if points < 2 {
        return Err(Error::invalid("need at least two evaluation points"));
    }
    let (lo, hi) = percentile_interval(gmm, t)?;
    let act = &model.layers[0].activations[0];
    let k = model.layers[0].conv.kernels[0];
    let smoothed = gmm.smooth(t)?;
    let (mut num, mut den) = (0.0, 0.0);
    for x in linspace(lo, hi, points) {
        let learned = -k * act.eval(k * x, t.ln(), 1, 0)?;
        let truth = -smoothed.evaluate(&[x])?.gradient[0];
        num += (learned - truth).powi(2);
        den += truth * truth;
    }
    Ok(ScoreErrorRow { t, lo, hi, rel_error: (num / den).sqrt() })
}

/// Trains a scalar prior (frozen identity convolution, one activation) on
/// samples of `gmm` and reports score errors per smoothing level.
pub fn train_1d_score_recovery(gmm: &GaussianMixture, cfg: &ScoreRecoveryConfig) -> Result<(FoEModel, ScoreReport)> {
    require_1d(gmm)?;
    let tc = &cfg.train;
    tc.validate()?;
    let grid = SplineGrid::new(cfg.n_x, cfg.n_t, tc.t_hat_min, tc.t_hat_max)?;
    let mut model = FoEModel::scalar(grid)?;
    let frozen = model.kernel_mask();
    let sampler = |rng: &mut ChaCha8Rng| -> Result<TrainingPoint> {
        let x = sample_mixture_1d(gmm, rng);
        let t_hat = rng.random_range(tc.t_hat_min..tc.t_hat_max);
        let n: f64 = rng.sample(StandardNormal);
        Ok(TrainingPoint { x: Tensor::image(1, 1, vec![x])?, noise: Tensor::image(1, 1, vec![n])?, t_hat })
    };
    let opts = TrainOptions { frozen: Some(frozen), ..TrainOptions::default() };
    let trace = train_with(&mut model, tc, sampler, &opts)?;
    let smooth = ema(&trace, 0.01);
    let every = tc.checkpoint_every.max(1);
    let ema_checkpoints: Vec<(usize, f64)> = (every - 1..trace.len()).step_by(every).map(|k| (k, smooth[k])).collect();
    let max_ema_increase =
        ema_checkpoints.windows(2).map(|w| (w[1].1 - w[0].1) / w[0].1.abs()).fold(f64::NEG_INFINITY, f64::max);
    let rows = cfg.eval_t.iter().map(|&t| score_error(&model, gmm, t, cfg.eval_points)).collect::<Result<Vec<_>>>()?;
    Ok((model, ScoreReport { rows, trace, ema_checkpoints, max_ema_increase }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalencePair {
    pub a: usize,
    pub b: usize,
    /// `D(θ_a) − D(θ_b)` with `D = J_DSM − J_ESM`.
    pub diff: f64,
    pub std_error: f64,
}

impl EquivalencePair {
    pub fn z_score(&self) -> f64 {
        self.diff / self.std_error
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// `J_DSM − J_ESM` per parameter setting.
    pub gaps: Vec<f64>,
    pub pairs: Vec<EquivalencePair>,
}

impl EquivalenceReport {
    pub fn within(&self, k_se: f64) -> bool {
        self.pairs.iter().all(|p| p.diff.abs() <= k_se * p.std_error)
    }
}

/// Monte-Carlo check that denoising and explicit score matching differ by a
/// parameter-independent constant: the same `n_samples` draws `(x, n, t̂)`
/// are scored under `settings` random scalar models.
pub fn loss_equivalence(
    gmm: &GaussianMixture,
    grid: SplineGrid,
    n_samples: usize,
    settings: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    require_1d(gmm)?;
    if n_samples < 2 || settings < 2 {
        return Err(Error::invalid("need at least two samples and two parameter settings"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x = sample_mixture_1d(gmm, &mut rng);
        let t_hat: f64 = rng.random_range(grid.t_hat_min..grid.t_hat_max);
        let n: f64 = rng.sample(StandardNormal);
        let s = (0.5 * t_hat).exp();
        let y = x + s * n;
        let b = s * gmm.smoothed_energy(&[y], t_hat.exp())?.gradient[0];
        samples.push((y, t_hat, n, b));
    }
    let base = SplineActivation2D::init_quadratic(grid)?;
    let mut per_setting = Vec::with_capacity(settings);
    for _ in 0..settings {
        let weights = base.weights.iter().map(|w| w + rng.random_range(-1.0..1.0)).collect();
        let act = SplineActivation2D::from_weights(grid, weights)?;
        let d = samples
            .iter()
            .map(|&(y, t_hat, n, b)| {
                let a = (0.5 * t_hat).exp() * act.eval(y, t_hat, 1, 0)?;
                Ok(0.5 * (a - n).powi(2) - 0.5 * (a - b).powi(2))
            })
            .collect::<Result<Vec<f64>>>()?;
        per_setting.push(d);
    }
    let count = n_samples as f64;
    let gaps = per_setting.iter().map(|d| d.iter().sum::<f64>() / count).collect();
    let mut pairs = Vec::new();
    for a in 0..settings {
        for b in a + 1..settings {
            let diffs: Vec<f64> = per_setting[a].iter().zip(&per_setting[b]).map(|(u, v)| u - v).collect();
            let mean = diffs.iter().sum::<f64>() / count;
            let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (count - 1.0);
            pairs.push(EquivalencePair { a, b, diff: mean, std_error: (var / count).sqrt() });
        }
    }
    Ok(EquivalenceReport { gaps, pairs })
}
