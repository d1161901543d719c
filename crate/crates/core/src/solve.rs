//! Inference with a learned prior: proximal maps of the data terms, joint
//! minimization over `(x, t̂)`, the fixed-schedule solve, and unrolled
//! schedule learning.
//!
//! Every scheme iterates the preconditioned proximal-gradient step
//! `x ← prox_{s D}(x − s ∇_x R(x, t̂))`. The step size is `s = η e^{t̂}` for the
//! fixed and joint schemes; the unrolled network learns `s` directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::flow::Schedule;
use crate::foe::FoEModel;
use crate::optim::AdaBelief;
use crate::tensor::{ImageTensor, Tensor};
use crate::train::tree_sum;

pub const DEFAULT_ETA: f64 = 1.0;
/// Stand-in for the infinite PSNR of identical images in CSV output.
pub const PSNR_CAP: f64 = 99.0;
/// Floor applied to learned step sizes after every update.
pub const MIN_VN_ETA: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub enum Fidelity {
    /// `D(z, x) = ‖x − z‖² / 2σ²`.
    Denoising { sigma2: f64 },
    /// `D` is the indicator of `x = z` on observed pixels (`mask = true`).
    Inpainting { mask: Vec<bool> },
}

/// A data term `D(z, ·)` with its observation.
#[derive(Clone, Debug, PartialEq)]
pub struct FidelityTerm {
    kind: Fidelity,
    z: ImageTensor,
}

impl FidelityTerm {
    pub fn denoising(z: ImageTensor, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::invalid(format!("noise variance must be positive, got {sigma2}")));
        }
        Ok(Self { kind: Fidelity::Denoising { sigma2 }, z })
    }

    pub fn inpainting(z: ImageTensor, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != z.len() {
            return Err(Error::ShapeMismatch(format!("mask has {} entries for {} pixels", mask.len(), z.len())));
        }
        Ok(Self { kind: Fidelity::Inpainting { mask }, z })
    }

    /// A term with `D ≡ 0` and identity prox: inpainting with nothing observed.
    pub fn none(shape_of: &ImageTensor) -> Self {
        Self { kind: Fidelity::Inpainting { mask: vec![false; shape_of.len()] }, z: Tensor::zeros_like(shape_of) }
    }

    pub fn kind(&self) -> &Fidelity {
        &self.kind
    }

    pub fn observation(&self) -> &ImageTensor {
        &self.z
    }

    /// `D(z, x)`; infinite for inpainting when an observed pixel differs from `z`.
    pub fn energy(&self, x: &ImageTensor) -> Result<f64> {
        x.ensure_same_shape(&self.z, "fidelity")?;
        Ok(match &self.kind {
            Fidelity::Denoising { sigma2 } => {
                let d: f64 = x.data().iter().zip(self.z.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                d / (2.0 * sigma2)
            }
            Fidelity::Inpainting { mask } => {
                let consistent = x.data().iter().zip(self.z.data()).zip(mask).all(|((a, b), m)| !m || a == b);
                if consistent {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        })
    }

    /// `argmin_u ½‖u − x‖² + τ D(z, u)`.
    pub fn prox(&self, x: &ImageTensor, tau: f64) -> Result<ImageTensor> {
        x.ensure_same_shape(&self.z, "fidelity")?;
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(Error::invalid(format!("prox weight must be finite and non-negative, got {tau}")));
        }
        let mut out = x.clone();
        match &self.kind {
            Fidelity::Denoising { sigma2 } => {
                let c = tau / sigma2;
                for (o, zz) in out.data_mut().iter_mut().zip(self.z.data()) {
                    *o = (*o + c * zz) / (1.0 + c);
                }
            }
            Fidelity::Inpainting { mask } => {
                for ((o, zz), m) in out.data_mut().iter_mut().zip(self.z.data()).zip(mask) {
                    if *m {
                        *o = *zz;
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn prox_fidelity(fid: &FidelityTerm, x: &ImageTensor, tau: f64) -> Result<ImageTensor> {
    fid.prox(x, tau)
}

/// `10 log10(1 / MSE)` for unit-peak images; `+∞` when the images are identical.
pub fn psnr(x: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    x.ensure_same_shape(reference, "psnr")?;
    if x.is_empty() {
        return Err(Error::invalid("psnr of an empty image"));
    }
    let mse = x.data().iter().zip(reference.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// PSNR clipped to [`PSNR_CAP`] for tabular output.
pub fn capped_psnr(v: f64) -> f64 {
    v.min(PSNR_CAP)
}

/// Per-iteration log-smoothing values with one base step size each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogSchedule {
    pub t_hats: Vec<f64>,
    pub etas: Vec<f64>,
}

impl LogSchedule {
    pub fn new(t_hats: Vec<f64>, etas: Vec<f64>) -> Result<Self> {
        check_steps(&t_hats, &etas)?;
        Ok(Self { t_hats, etas })
    }

    /// `steps` values linear in `t̂` from `t̂₀` down to `t̂_min`, both included;
    /// a single step uses `t̂₀`.
    pub fn linear(t_hat0: f64, t_hat_min: f64, steps: usize, eta: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(t_hat0 >= t_hat_min) || !t_hat0.is_finite() || !t_hat_min.is_finite() {
            return Err(Error::invalid(format!("linear schedule needs t̂₀ ≥ t̂_min, got {t_hat0} and {t_hat_min}")));
        }
        let t_hats = if steps == 1 {
            vec![t_hat0]
        } else {
            let last = (steps - 1) as f64;
            (0..steps)
                .map(|i| if i + 1 == steps { t_hat_min } else { t_hat0 + (t_hat_min - t_hat0) * i as f64 / last })
                .collect()
        };
        Self::new(t_hats, vec![eta; steps])
    }

    /// The same iteration expressed in `t̂ = ln t`.
    pub fn from_schedule(s: &Schedule) -> Result<Self> {
        Self::new(s.values().iter().map(|t| t.ln()).collect(), s.step_sizes().to_vec())
    }

    pub fn len(&self) -> usize {
        self.t_hats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_hats.is_empty()
    }
}

fn check_steps(t_hats: &[f64], etas: &[f64]) -> Result<()> {
    if t_hats.is_empty() {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if t_hats.len() != etas.len() {
        return Err(Error::invalid("one step size per smoothing value required"));
    }
    if t_hats.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("log-smoothing values must be finite"));
    }
    if etas.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
        return Err(Error::invalid("step sizes must be finite and non-negative"));
    }
    Ok(())
}

/// Learned per-step smoothing and (already scaled) step sizes of the unrolled scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VNParams {
    pub t_hats: Vec<f64>,
    pub etas: Vec<f64>,
}

impl VNParams {
    pub fn new(t_hats: Vec<f64>, etas: Vec<f64>) -> Result<Self> {
        check_steps(&t_hats, &etas)?;
        Ok(Self { t_hats, etas })
    }

    /// Folds the `e^{t̂}` preconditioning into the step sizes, so that
    /// [`vn_forward`] retraces [`scheduled_solve`].
    pub fn from_schedule(s: &LogSchedule) -> Self {
        let etas = s.t_hats.iter().zip(&s.etas).map(|(t, e)| e * t.exp()).collect();
        Self { t_hats: s.t_hats.clone(), etas }
    }

    pub fn len(&self) -> usize {
        self.t_hats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_hats.is_empty()
    }

    /// Clamps `t̂` to `range` and step sizes to at least [`MIN_VN_ETA`].
    pub fn project(&mut self, range: (f64, f64)) {
        for t in &mut self.t_hats {
            *t = t.clamp(range.0, range.1);
        }
        for e in &mut self.etas {
            *e = e.max(MIN_VN_ETA);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub t_hat: f64,
    /// `R(x_i, t̂_i) + D(z, x_i)` before step `i` (the last row is the final iterate).
    pub energy: f64,
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    /// Final iterate, or the last finite one after an abort.
    pub x: ImageTensor,
    pub trace: Vec<TraceStep>,
    /// Why the iteration stopped early, if it did.
    pub aborted: Option<String>,
}

impl SolveOutcome {
    pub fn into_result(self) -> Result<ImageTensor> {
        match self.aborted {
            None => Ok(self.x),
            Some(reason) => Err(Error::NonFinite(reason)),
        }
    }

    pub fn final_energy(&self) -> Option<f64> {
        self.trace.last().map(|r| r.energy)
    }
}

fn check_problem(model: &FoEModel, fid: &FidelityTerm, x0: &ImageTensor) -> Result<()> {
    x0.ensure_same_shape(&fid.z, "initial iterate")?;
    if x0.channels() != 1 {
        return Err(Error::ShapeMismatch("solvers act on single-channel images".into()));
    }
    if !x0.all_finite() {
        return Err(Error::NonFinite("initial iterate".into()));
    }
    let _ = model;
    Ok(())
}

struct Recorder<'r> {
    trace: Vec<TraceStep>,
    reference: Option<&'r ImageTensor>,
}

impl Recorder<'_> {
    /// Logs one row; returns an abort reason when the energy is not finite.
    fn record(
        &mut self,
        step: usize,
        t_hat: f64,
        r: f64,
        fid: &FidelityTerm,
        x: &ImageTensor,
    ) -> Result<Option<String>> {
        let energy = r + fid.energy(x)?;
        let psnr = self.reference.map(|reference| psnr(x, reference)).transpose()?;
        self.trace.push(TraceStep { step, t_hat, energy, psnr });
        Ok((!energy.is_finite()).then(|| format!("joint energy {energy} at step {step}")))
    }
}

/// Shared inner loop of the fixed schedule and the unrolled network.
fn unrolled(
    model: &FoEModel,
    fid: &FidelityTerm,
    x0: &ImageTensor,
    steps: &[(f64, f64)],
    reference: Option<&ImageTensor>,
) -> Result<SolveOutcome> {
    check_problem(model, fid, x0)?;
    let mut rec = Recorder { trace: Vec::with_capacity(steps.len() + 1), reference };
    let mut x = x0.clone();
    for (i, &(t_hat, s)) in steps.iter().enumerate() {
        let (r, g) = model.energy_and_grad(&x, t_hat)?;
        if let Some(reason) = rec.record(i, t_hat, r, fid, &x)? {
            return Ok(SolveOutcome { x, trace: rec.trace, aborted: Some(reason) });
        }
        let mut v = x.clone();
        v.axpy(-s, &g);
        let next = fid.prox(&v, s)?;
        if !next.all_finite() {
            return Ok(SolveOutcome {
                x,
                trace: rec.trace,
                aborted: Some(format!("non-finite iterate after step {i}")),
            });
        }
        x = next;
    }
    let t_last = steps.last().map_or(model.t_hat_range().1, |s| s.0);
    let r = model.energy(&x, t_last)?;
    let aborted = rec.record(steps.len(), t_last, r, fid, &x)?;
    Ok(SolveOutcome { x, trace: rec.trace, aborted })
}

/// Fixed-schedule solve `x_{i+1} = prox_{η_i e^{t̂_i} D}(x_i − η_i e^{t̂_i} ∇_x R(x_i, t̂_i))`.
pub fn scheduled_solve(
    model: &FoEModel,
    fid: &FidelityTerm,
    x0: &ImageTensor,
    schedule: &LogSchedule,
) -> Result<ImageTensor> {
    scheduled_solve_traced(model, fid, x0, schedule, None)?.into_result()
}

pub fn scheduled_solve_traced(
    model: &FoEModel,
    fid: &FidelityTerm,
    x0: &ImageTensor,
    schedule: &LogSchedule,
    reference: Option<&ImageTensor>,
) -> Result<SolveOutcome> {
    check_steps(&schedule.t_hats, &schedule.etas)?;
    let steps: Vec<(f64, f64)> = schedule.t_hats.iter().zip(&schedule.etas).map(|(t, e)| (*t, e * t.exp())).collect();
    unrolled(model, fid, x0, &steps, reference)
}

/// Endpoint `x_I` of the unrolled scheme with learned `(t̂_i, η_i)`.
pub fn vn_forward(model: &FoEModel, vn: &VNParams, fid: &FidelityTerm, x0: &ImageTensor) -> Result<ImageTensor> {
    vn_forward_traced(model, vn, fid, x0, None)?.into_result()
}

pub fn vn_forward_traced(
    model: &FoEModel,
    vn: &VNParams,
    fid: &FidelityTerm,
    x0: &ImageTensor,
    reference: Option<&ImageTensor>,
) -> Result<SolveOutcome> {
    check_steps(&vn.t_hats, &vn.etas)?;
    let steps: Vec<(f64, f64)> = vn.t_hats.iter().copied().zip(vn.etas.iter().copied()).collect();
    unrolled(model, fid, x0, &steps, reference)
}

/// Joint descent on `E(x, t̂) = R(x, t̂) + D(z, x)`: a proximal-gradient step in
/// `x` and a projected step `t̂ − (η/d) ∂_t̂ R`, both taken at `(x_i, t̂_i)`.
pub fn joint_minimize(
    model: &FoEModel,
    fid: &FidelityTerm,
    x0: &ImageTensor,
    t_hat0: f64,
    eta: f64,
    iters: usize,
    reference: Option<&ImageTensor>,
) -> Result<SolveOutcome> {
    check_problem(model, fid, x0)?;
    let (lo, hi) = model.t_hat_range();
    if !(lo..=hi).contains(&t_hat0) {
        return Err(Error::SmoothingOutOfRange { value: t_hat0, min: lo, max: hi });
    }
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::invalid(format!("step size must be finite and non-negative, got {eta}")));
    }
    let d = x0.len() as f64;
    let mut rec = Recorder { trace: Vec::with_capacity(iters + 1), reference };
    let mut x = x0.clone();
    let mut t_hat = t_hat0;
    for i in 0..iters {
        let (r, g) = model.energy_and_grad(&x, t_hat)?;
        if let Some(reason) = rec.record(i, t_hat, r, fid, &x)? {
            return Ok(SolveOutcome { x, trace: rec.trace, aborted: Some(reason) });
        }
        let (r_t, _) = model.t_derivatives(&x, t_hat)?;
        let s = eta * t_hat.exp();
        let mut v = x.clone();
        v.axpy(-s, &g);
        let next = fid.prox(&v, s)?;
        let next_t = (t_hat - eta / d * r_t).clamp(lo, hi);
        if !next.all_finite() || !next_t.is_finite() {
            return Ok(SolveOutcome {
                x,
                trace: rec.trace,
                aborted: Some(format!("non-finite iterate after step {i}")),
            });
        }
        x = next;
        t_hat = next_t;
    }
    let r = model.energy(&x, t_hat)?;
    let aborted = rec.record(iters, t_hat, r, fid, &x)?;
    Ok(SolveOutcome { x, trace: rec.trace, aborted })
}

/// One paired example for schedule learning.
#[derive(Clone, Debug)]
pub struct VNSample {
    pub fid: FidelityTerm,
    pub x0: ImageTensor,
    pub target: ImageTensor,
}

/// Endpoint error `‖x_I − x̂‖² / d` and its gradient with respect to every
/// `t̂_i` and `η_i`, by reverse mode through the unrolled recursion.
pub fn vn_loss_and_grad(model: &FoEModel, vn: &VNParams, sample: &VNSample) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_steps(&vn.t_hats, &vn.etas)?;
    check_problem(model, &sample.fid, &sample.x0)?;
    sample.x0.ensure_same_shape(&sample.target, "target")?;
    let mut tape = Tape::new(model);
    let mut x = tape.leaf(sample.x0.clone(), false);
    let mut handles = Vec::with_capacity(vn.len());
    for (&t, &e) in vn.t_hats.iter().zip(&vn.etas) {
        let tv = tape.scalar(t, true);
        let ev = tape.scalar(e, true);
        let nodes = tape.energy_gradient(x, tv)?;
        let v = tape.step(x, nodes.grad, ev)?;
        x = match &sample.fid.kind {
            Fidelity::Denoising { sigma2 } => tape.prox_denoise(v, ev, &sample.fid.z, *sigma2)?,
            Fidelity::Inpainting { mask } => tape.prox_inpaint(v, &sample.fid.z, mask)?,
        };
        handles.push((tv, ev));
    }
    let out = tape.value(x);
    if !out.all_finite() {
        return Err(Error::NonFinite("unrolled endpoint".into()));
    }
    let n = out.len() as f64;
    let mut seed = out.clone();
    seed.axpy(-1.0, &sample.target);
    let loss = seed.norm_sq() / n;
    seed.scale(2.0 / n);
    let grads = tape.backward(vec![(x, seed)], false)?;
    let d_t = handles.iter().map(|(t, _)| grads.scalar(*t)).collect();
    let d_eta = handles.iter().map(|(_, e)| grads.scalar(*e)).collect();
    Ok((loss, d_t, d_eta))
}

fn vn_per_sample(model: &FoEModel, vn: &VNParams, samples: &[VNSample]) -> Result<Vec<(f64, Vec<f64>)>> {
    if samples.is_empty() {
        return Err(Error::invalid("schedule learning needs at least one sample"));
    }
    samples
        .par_iter()
        .map(|s| {
            let (l, mut gt, ge) = vn_loss_and_grad(model, vn, s)?;
            gt.extend(ge);
            Ok((l, gt))
        })
        .collect()
}

/// Mean endpoint error over `samples` with its gradient `[∂t̂…, ∂η…]`, reduced in a fixed order.
pub fn vn_batch_loss_and_grad(model: &FoEModel, vn: &VNParams, samples: &[VNSample]) -> Result<(f64, Vec<f64>)> {
    let (loss, mut grad) = tree_sum(vn_per_sample(model, vn, samples)?);
    let n = samples.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Mean of `ln MSE_i` (the mean PSNR up to the factor `−10/ln 10`) with its
/// gradient; also returns the plain mean MSE.
pub fn vn_batch_log_loss_and_grad(
    model: &FoEModel,
    vn: &VNParams,
    samples: &[VNSample],
) -> Result<(f64, f64, Vec<f64>)> {
    let parts = vn_per_sample(model, vn, samples)?;
    let mse = parts.iter().map(|(l, _)| *l).sum::<f64>() / samples.len() as f64;
    let logs = parts
        .into_iter()
        .map(|(l, g)| {
            let inv = 1.0 / l.max(f64::MIN_POSITIVE);
            (l.max(f64::MIN_POSITIVE).ln(), g.into_iter().map(|v| v * inv).collect())
        })
        .collect();
    let (loss, mut grad) = tree_sum(logs);
    let n = samples.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, mse, grad))
}

/// Mean PSNR of a solver over `samples`, evaluated per image in parallel.
pub fn mean_psnr<F>(samples: &[VNSample], solve: F) -> Result<f64>
where
    F: Fn(&VNSample) -> Result<ImageTensor> + Sync,
{
    if samples.is_empty() {
        return Err(Error::invalid("mean psnr over an empty set"));
    }
    let scores = samples.par_iter().map(|s| psnr(&solve(s)?, &s.target)).collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCandidate {
    pub t_hat0: f64,
    pub eta: f64,
    pub psnr: f64,
}

/// Grid search over linear schedules `(t̂₀, η)` with `steps` iterations,
/// scored by mean PSNR; returns the best schedule and every candidate's score.
pub fn best_linear_schedule(
    model: &FoEModel,
    samples: &[VNSample],
    t_hat0s: &[f64],
    etas: &[f64],
    steps: usize,
) -> Result<(LogSchedule, Vec<ScheduleCandidate>)> {
    let t_min = model.t_hat_range().0;
    let mut scored = Vec::new();
    let mut best: Option<(LogSchedule, f64)> = None;
    for &t0 in t_hat0s {
        for &eta in etas {
            let schedule = LogSchedule::linear(t0, t_min, steps, eta)?;
            let score = mean_psnr(samples, |s| scheduled_solve(model, &s.fid, &s.x0, &schedule))?;
            scored.push(ScheduleCandidate { t_hat0: t0, eta, psnr: score });
            if best.as_ref().is_none_or(|(_, b)| score > *b) {
                best = Some((schedule, score));
            }
        }
    }
    let (schedule, _) = best.ok_or_else(|| Error::invalid("no schedule candidates"))?;
    Ok((schedule, scored))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VNTrainConfig {
    /// Full-batch gradient steps.
    pub epochs: usize,
    pub lr: f64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
}

impl Default for VNTrainConfig {
    fn default() -> Self {
        Self { epochs: 100, lr: 2e-2, patience: 25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VNEpochRow {
    pub epoch: usize,
    /// Training error of the parameters entering this epoch.
    pub train_mse: f64,
    /// Validation PSNR after this epoch's update.
    pub val_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VNTrainReport {
    pub initial_val_psnr: f64,
    pub best_val_psnr: f64,
    /// Epoch whose parameters were kept; 0 means the initialization.
    pub best_epoch: usize,
    pub trace: Vec<VNEpochRow>,
}

/// Learns the `2I` schedule parameters of `vn` against a frozen model.
///
/// The objective is the mean log endpoint error, whose gradient is scale-free
/// (the raw MSE gradient is small enough to sink below the optimizer's ε).
/// AdaBelief acts on `(t̂_i, ln η_i)` so the step sizes, which span several
/// orders of magnitude across the schedule, move by relative amounts. After
/// every step `t̂_i` is projected onto the model's range and `η_i` floored at
/// [`MIN_VN_ETA`]. The parameters with the best validation PSNR (the
/// initialization included) are kept; on divergence they are restored before
/// the error is returned.
pub fn vn_train(
    model: &FoEModel,
    vn: &mut VNParams,
    train: &[VNSample],
    val: &[VNSample],
    cfg: &VNTrainConfig,
) -> Result<VNTrainReport> {
    check_steps(&vn.t_hats, &vn.etas)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("schedule learning needs training and validation samples"));
    }
    if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(Error::invalid(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let range = model.t_hat_range();
    let score = |p: &VNParams| mean_psnr(val, |s| vn_forward(model, p, &s.fid, &s.x0));
    vn.project(range);
    let n = vn.len();
    let initial = score(vn)?;
    let mut best = (vn.clone(), initial, 0usize);
    let mut opt = AdaBelief::new(2 * n);
    let mut p: Vec<f64> = vn.t_hats.iter().copied().chain(vn.etas.iter().map(|e| e.ln())).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        let step = vn_batch_log_loss_and_grad(model, vn, train).and_then(|(loss, mse, mut grad)| {
            for (g, e) in grad[n..].iter_mut().zip(&vn.etas) {
                *g *= e;
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite("schedule loss".into()));
            }
            opt.step(&mut p, &grad, cfg.lr)?;
            Ok(mse)
        });
        let loss = match step {
            Ok(l) => l,
            Err(e) => {
                *vn = best.0;
                return Err(Error::Diverged { iteration: epoch, reason: e.to_string() });
            }
        };
        vn.t_hats.copy_from_slice(&p[..n]);
        for (e, q) in vn.etas.iter_mut().zip(&p[n..]) {
            *e = q.exp();
        }
        vn.project(range);
        for k in 0..n {
            p[k] = vn.t_hats[k];
            p[n + k] = vn.etas[k].ln();
        }
        let val_psnr = match score(vn) {
            Ok(v) if v.is_finite() => v,
            other => {
                *vn = best.0;
                let reason = other.map_or_else(|e| e.to_string(), |v| format!("validation psnr {v}"));
                return Err(Error::Diverged { iteration: epoch, reason });
            }
        };
        trace.push(VNEpochRow { epoch, train_mse: loss, val_psnr });
        if val_psnr > best.1 {
            best = (vn.clone(), val_psnr, epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    *vn = best.0;
    Ok(VNTrainReport { initial_val_psnr: initial, best_val_psnr: best.1, best_epoch: best.2, trace })
}

/// How an observation is produced from (or read as) an image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Additive white Gaussian noise of standard deviation `sigma`.
    Denoising {
        sigma: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Each pixel is missing independently with probability `missing`; missing pixels are zero-filled.
    Inpainting {
        missing: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl TaskSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskSpec::Denoising { sigma, .. } if !(sigma > 0.0) || !sigma.is_finite() => {
                Err(Error::invalid(format!("noise level must be positive, got {sigma}")))
            }
            TaskSpec::Inpainting { missing, .. } if !(0.0..=1.0).contains(&missing) => {
                Err(Error::invalid(format!("missing fraction must lie in [0, 1], got {missing}")))
            }
            _ => Ok(()),
        }
    }

    pub fn seed(&self) -> u64 {
        match *self {
            TaskSpec::Denoising { seed, .. } | TaskSpec::Inpainting { seed, .. } => seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        match &mut s {
            TaskSpec::Denoising { seed: v, .. } | TaskSpec::Inpainting { seed: v, .. } => *v = seed,
        }
        s
    }

    /// Synthesizes an observation of `clean`; returns the data term and the
    /// solver start `x₀ = z`.
    pub fn degrade(&self, clean: &ImageTensor) -> Result<(FidelityTerm, ImageTensor)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed());
        match *self {
            TaskSpec::Denoising { sigma, .. } => {
                let mut z = clean.clone();
                for v in z.data_mut() {
                    *v += sigma * rng.sample::<f64, _>(StandardNormal);
                }
                Ok((FidelityTerm::denoising(z.clone(), sigma * sigma)?, z))
            }
            TaskSpec::Inpainting { missing, .. } => {
                let mask: Vec<bool> = (0..clean.len()).map(|_| rng.random::<f64>() >= missing).collect();
                let mut z = clean.clone();
                for (v, m) in z.data_mut().iter_mut().zip(&mask) {
                    if !m {
                        *v = 0.0;
                    }
                }
                Ok((FidelityTerm::inpainting(z.clone(), mask)?, z))
            }
        }
    }

    /// Reads `z` as an existing observation; for inpainting, exact zeros mark missing pixels.
    pub fn observe(&self, z: ImageTensor) -> Result<(FidelityTerm, ImageTensor)> {
        self.validate()?;
        match *self {
            TaskSpec::Denoising { sigma, .. } => Ok((FidelityTerm::denoising(z.clone(), sigma * sigma)?, z)),
            TaskSpec::Inpainting { .. } => {
                let mask = z.data().iter().map(|v| *v != 0.0).collect();
                Ok((FidelityTerm::inpainting(z.clone(), mask)?, z))
            }
        }
    }

    pub fn sample(&self, clean: &ImageTensor) -> Result<VNSample> {
        let (fid, x0) = self.degrade(clean)?;
        Ok(VNSample { fid, x0, target: clean.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{run_gnc_flow, Schedule};
    use crate::foe::FoEFamily;
    use crate::spline::{SplineActivation2D, SplineGrid};

    fn grid() -> SplineGrid {
        SplineGrid::new(21, 6, -4.0, 0.0).unwrap()
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::image(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn tiny_model(seed: u64) -> FoEModel {
        let mut m = FoEModel::kaiming(&[3], &[3], grid(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let mut p = m.params();
        for v in &mut p {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
        m.set_params(&p).unwrap();
        m
    }

    /// Scalar prior whose energy is the smoothed single Gaussian `N(m, s2)`, up to spline accuracy.
    fn gaussian_prior(m: f64, s2: f64) -> FoEModel {
        let g = grid();
        let cols = g.t_columns();
        let shift = 5.0 / 12.0 * g.gamma_x().powi(2);
        let mut w = vec![0.0; g.weight_len()];
        for l in 0..g.n_x {
            for o in 0..cols {
                let v = s2 + g.mu_t(o).exp();
                let x = g.mu_x(l);
                w[l * cols + o] = ((x - m).powi(2) - shift) / (2.0 * v) + 0.5 * (2.0 * std::f64::consts::PI * v).ln();
            }
        }
        let mut model = FoEModel::scalar(g).unwrap();
        model.layers[0].activations[0] = SplineActivation2D::from_weights(g, w).unwrap();
        model
    }

    #[test]
    fn prox_examples() {
        let x = random_image(4, 4, 1);
        let z = random_image(4, 4, 2);
        let fid = FidelityTerm::denoising(z.clone(), 0.04).unwrap();
        let half = fid.prox(&x, 0.04).unwrap();
        for ((h, a), b) in half.data().iter().zip(x.data()).zip(z.data()) {
            assert!((h - 0.5 * (a + b)).abs() < 1e-15);
        }
        assert_eq!(fid.prox(&x, 0.0).unwrap(), x);
        let all = FidelityTerm::inpainting(z.clone(), vec![true; 16]).unwrap();
        assert_eq!(all.prox(&x, 0.3).unwrap(), z);
        assert!(fid.prox(&Tensor::zeros(1, 3, 4), 1.0).is_err());
        assert!(fid.prox(&x, -1.0).is_err());
        assert!(FidelityTerm::inpainting(z, vec![true; 3]).is_err());
    }

    fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn denoising_prox_matches_dense_minimization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x: f64 = rng.random_range(-2.0..2.0);
            let z: f64 = rng.random_range(-2.0..2.0);
            let sigma2: f64 = rng.random_range(0.001..1.0);
            let tau: f64 = rng.random_range(0.0..2.0);
            let fid = FidelityTerm::denoising(Tensor::image(1, 1, vec![z]).unwrap(), sigma2).unwrap();
            let p = fid.prox(&Tensor::image(1, 1, vec![x]).unwrap(), tau).unwrap().data()[0];
            let obj = |u: f64| 0.5 * (u - x).powi(2) + tau * (u - z).powi(2) / (2.0 * sigma2);
            // dense scan to bracket, then golden-section refinement
            let grid: Vec<f64> = (0..=8000).map(|k| -4.0 + k as f64 * 1e-3).collect();
            let k = (0..grid.len()).min_by(|a, b| obj(grid[*a]).total_cmp(&obj(grid[*b]))).unwrap();
            let u = golden_min(obj, grid[k.saturating_sub(1)], grid[(k + 1).min(grid.len() - 1)]);
            assert!((p - u).abs() < 1e-6, "{p} vs {u}");
        }
    }

    #[test]
    fn inpainting_prox_is_projection() {
        let x = random_image(5, 5, 4);
        let z = random_image(5, 5, 5);
        let mask: Vec<bool> = (0..25).map(|k| k % 3 == 0).collect();
        let fid = FidelityTerm::inpainting(z.clone(), mask.clone()).unwrap();
        let p = fid.prox(&x, 0.7).unwrap();
        assert_eq!(fid.energy(&p).unwrap(), 0.0);
        for k in 0..25 {
            assert_eq!(p.data()[k], if mask[k] { z.data()[k] } else { x.data()[k] });
        }
        assert_eq!(fid.energy(&x).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_examples() {
        let r = random_image(4, 4, 6);
        assert_eq!(psnr(&r, &r).unwrap(), f64::INFINITY);
        assert_eq!(capped_psnr(f64::INFINITY), PSNR_CAP);
        let shifted = r.map(|v| v + 0.1);
        assert!((psnr(&shifted, &r).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&r, &Tensor::zeros(1, 2, 2)).is_err());
    }

    #[test]
    fn linear_schedule_shape() {
        let s = LogSchedule::linear(-1.0, -4.0, 4, 1.0).unwrap();
        assert_eq!(s.t_hats, vec![-1.0, -2.0, -3.0, -4.0]);
        assert_eq!(LogSchedule::linear(-1.0, -4.0, 1, 1.0).unwrap().t_hats, vec![-1.0]);
        assert!(LogSchedule::linear(-5.0, -4.0, 3, 1.0).is_err());
        assert!(LogSchedule::linear(-1.0, -4.0, 0, 1.0).is_err());
    }

    #[test]
    fn joint_with_zero_step_is_identity() {
        let model = tiny_model(1);
        let z = random_image(6, 6, 8);
        let fid = FidelityTerm::denoising(z.clone(), 0.01).unwrap();
        let x0 = random_image(6, 6, 9);
        let out = joint_minimize(&model, &fid, &x0, -1.5, 0.0, 5, None).unwrap();
        assert_eq!(out.x, x0);
        assert!(out.trace.iter().all(|r| r.t_hat == -1.5));
    }

    #[test]
    fn joint_t_hat_stays_projected() {
        let model = tiny_model(2);
        let z = random_image(6, 6, 10);
        let fid = FidelityTerm::denoising(z.clone(), 0.01).unwrap();
        let (lo, hi) = model.t_hat_range();
        for eta in [0.5, 5.0, 500.0] {
            let out = joint_minimize(&model, &fid, &z, hi, eta, 20, Some(&z)).unwrap();
            assert!(out.trace.iter().all(|r| r.t_hat >= lo && r.t_hat <= hi));
        }
        assert!(joint_minimize(&model, &fid, &z, hi + 0.1, 1.0, 1, None).is_err());
    }

    #[test]
    fn joint_energy_decreases_on_gaussian_prior() {
        let model = gaussian_prior(0.3, 0.25);
        let fid = FidelityTerm::denoising(Tensor::image(1, 1, vec![0.9]).unwrap(), 0.05).unwrap();
        for x0 in [-2.0, 0.0, 0.9, 2.5] {
            let out =
                joint_minimize(&model, &fid, &Tensor::image(1, 1, vec![x0]).unwrap(), 0.0, 0.1, 200, None).unwrap();
            assert!(out.aborted.is_none());
            for w in out.trace.windows(2) {
                assert!(w[1].energy <= w[0].energy + 1e-12, "{} > {}", w[1].energy, w[0].energy);
            }
        }
    }

    #[test]
    fn one_step_schedule_is_one_prox_gradient_step() {
        let model = tiny_model(3);
        let z = random_image(6, 6, 11);
        let fid = FidelityTerm::denoising(z.clone(), 0.02).unwrap();
        let s = LogSchedule::linear(-2.0, -4.0, 1, 0.7).unwrap();
        let out = scheduled_solve(&model, &fid, &z, &s).unwrap();
        let step = 0.7 * (-2.0f64).exp();
        let mut v = z.clone();
        v.axpy(-step, &model.grad_x(&z, -2.0).unwrap());
        assert_eq!(out, fid.prox(&v, step).unwrap());
    }

    #[test]
    fn zero_prior_gives_convex_combination() {
        let g = grid();
        let mut model = FoEModel::scalar(g).unwrap();
        model.layers[0].activations[0] = SplineActivation2D::from_weights(g, vec![0.0; g.weight_len()]).unwrap();
        let z = random_image(3, 3, 12);
        let x0 = random_image(3, 3, 13);
        let sigma2 = 0.05;
        let fid = FidelityTerm::denoising(z.clone(), sigma2).unwrap();
        let s = LogSchedule::linear(-0.5, -4.0, 8, 1.0).unwrap();
        let out = scheduled_solve(&model, &fid, &x0, &s).unwrap();
        let alpha: f64 = s.t_hats.iter().map(|t| 1.0 / (1.0 + t.exp() / sigma2)).product();
        for ((o, a), b) in out.data().iter().zip(x0.data()).zip(z.data()) {
            assert!((o - (alpha * a + (1.0 - alpha) * b)).abs() < 1e-14);
        }
    }

    #[test]
    fn unconstrained_schedule_matches_gnc_flow() {
        let model = gaussian_prior(0.1, 0.3);
        let family = FoEFamily { model: &model, height: 1, width: 1 };
        let ts: Vec<f64> = (0..10).map(|i| (-0.2 - 0.35 * i as f64).exp()).collect();
        let schedule = Schedule::with_uniform_step(ts, 0.8).unwrap();
        let log = LogSchedule::from_schedule(&schedule).unwrap();
        for x0 in [-1.5, 0.2, 2.0] {
            let x = Tensor::image(1, 1, vec![x0]).unwrap();
            let out = scheduled_solve(&model, &FidelityTerm::none(&x), &x, &log).unwrap();
            let flow = run_gnc_flow(&family, &[x0], &schedule).unwrap();
            let want = flow.last().unwrap()[0];
            assert!((out.data()[0] - want).abs() < 1e-12, "{} vs {want}", out.data()[0]);
        }
    }

    #[test]
    fn inpainting_keeps_observed_pixels_at_every_iterate() {
        let model = tiny_model(4);
        let clean = random_image(7, 7, 14);
        let task = TaskSpec::Inpainting { missing: 0.6, seed: 3 };
        let (fid, x0) = task.degrade(&clean).unwrap();
        let Fidelity::Inpainting { mask } = fid.kind().clone() else { unreachable!() };
        let full = LogSchedule::linear(-0.5, -4.0, 6, 1.0).unwrap();
        for k in 1..=full.len() {
            let s = LogSchedule::new(full.t_hats[..k].to_vec(), full.etas[..k].to_vec()).unwrap();
            let x = scheduled_solve(&model, &fid, &x0, &s).unwrap();
            for (i, m) in mask.iter().enumerate() {
                if *m {
                    assert_eq!(x.data()[i], clean.data()[i]);
                }
            }
        }
    }

    #[test]
    fn vn_from_schedule_reproduces_scheduled_solve() {
        let model = tiny_model(5);
        let clean = random_image(6, 6, 15);
        for task in [TaskSpec::Denoising { sigma: 0.1, seed: 1 }, TaskSpec::Inpainting { missing: 0.5, seed: 1 }] {
            let (fid, x0) = task.degrade(&clean).unwrap();
            let s = LogSchedule::linear(-0.3, -4.0, 7, 1.0).unwrap();
            let a = scheduled_solve(&model, &fid, &x0, &s).unwrap();
            let b = vn_forward(&model, &VNParams::from_schedule(&s), &fid, &x0).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn vn_single_zero_step_returns_observation() {
        let model = tiny_model(6);
        let clean = random_image(5, 5, 16);
        let (fid, z) = TaskSpec::Denoising { sigma: 0.1, seed: 2 }.degrade(&clean).unwrap();
        let vn = VNParams::new(vec![-1.0], vec![0.0]).unwrap();
        assert_eq!(vn_forward(&model, &vn, &fid, &z).unwrap(), z);
    }

    fn vn_sample(task: TaskSpec, seed: u64) -> VNSample {
        task.sample(&random_image(6, 6, seed)).unwrap()
    }

    #[test]
    fn vn_gradient_matches_finite_differences() {
        let model = tiny_model(7);
        let vn = VNParams::new(vec![-0.5, -1.3, -2.2, -3.0, -3.6], vec![0.3, 0.2, 0.1, 0.05, 0.03]).unwrap();
        for task in [TaskSpec::Denoising { sigma: 0.1, seed: 4 }, TaskSpec::Inpainting { missing: 0.5, seed: 4 }] {
            let sample = vn_sample(task, 17);
            let (_, gt, ge) = vn_loss_and_grad(&model, &vn, &sample).unwrap();
            let loss = |p: &VNParams| {
                let x = vn_forward(&model, p, &sample.fid, &sample.x0).unwrap();
                let mut d = x;
                d.axpy(-1.0, &sample.target);
                d.norm_sq() / d.len() as f64
            };
            for k in 0..vn.len() {
                let h = 1e-5;
                let mut p = vn.clone();
                p.t_hats[k] += h;
                let up = loss(&p);
                p.t_hats[k] -= 2.0 * h;
                let fd_t = (up - loss(&p)) / (2.0 * h);
                let mut p = vn.clone();
                p.etas[k] += h;
                let up = loss(&p);
                p.etas[k] -= 2.0 * h;
                let fd_e = (up - loss(&p)) / (2.0 * h);
                for (a, f) in [(gt[k], fd_t), (ge[k], fd_e)] {
                    assert!((a - f).abs() <= 1e-3 * f.abs().max(1e-6), "step {k}: {a} vs {f}");
                }
            }
        }
    }

    #[test]
    fn vn_endpoint_is_continuous_in_t_hat() {
        let model = tiny_model(8);
        let sample = vn_sample(TaskSpec::Denoising { sigma: 0.1, seed: 5 }, 18);
        let vn = VNParams::new(vec![-1.0, -2.0, -3.0], vec![0.2, 0.1, 0.05]).unwrap();
        let base = vn_forward(&model, &vn, &sample.fid, &sample.x0).unwrap();
        let mut p = vn.clone();
        p.t_hats[1] += 1e-6;
        let mut d = vn_forward(&model, &p, &sample.fid, &sample.x0).unwrap();
        d.axpy(-1.0, &base);
        assert!(d.norm_sq().sqrt() < 1e-4);
    }

    #[test]
    fn vn_training_never_ends_below_initialization() {
        // per-pixel Gaussian prior matching the uniform test images' moments
        let model = gaussian_prior(0.5, 1.0 / 12.0);
        let task = TaskSpec::Denoising { sigma: 0.1, seed: 0 };
        let train: Vec<VNSample> = (0..2).map(|k| vn_sample(task.with_seed(k), 20 + k)).collect();
        let val = vec![vn_sample(task.with_seed(9), 30)];
        let init = VNParams::from_schedule(&LogSchedule::linear(-2.0, -4.0, 4, 1.0).unwrap());
        let mut vn = init.clone();
        let cfg = VNTrainConfig { epochs: 15, lr: 5e-2, patience: 15 };
        let report = vn_train(&model, &mut vn, &train, &val, &cfg).unwrap();
        let (lo, hi) = model.t_hat_range();
        assert!(vn.t_hats.iter().all(|t| (lo..=hi).contains(t)));
        assert!(vn.etas.iter().all(|e| *e >= MIN_VN_ETA));
        let mse = |p: &VNParams| {
            let mut d = vn_forward(&model, p, &val[0].fid, &val[0].x0).unwrap();
            d.axpy(-1.0, &val[0].target);
            d.norm_sq()
        };
        assert!(mse(&vn) <= mse(&init));
        assert!(report.best_val_psnr >= report.initial_val_psnr);
        assert!(report.best_val_psnr > report.initial_val_psnr, "no improvement at all: {report:?}");
    }

    #[test]
    fn task_spec_json() {
        let t = TaskSpec::from_json(r#"{"kind": "denoising", "sigma": 0.1, "seed": 3}"#).unwrap();
        assert_eq!(t, TaskSpec::Denoising { sigma: 0.1, seed: 3 });
        let t = TaskSpec::from_json(r#"{"kind": "inpainting", "missing": 0.8}"#).unwrap();
        assert_eq!(t.seed(), 0);
        assert!(TaskSpec::from_json(r#"{"kind": "deblurring"}"#).is_err());
        assert!(TaskSpec::from_json(r#"{"kind": "inpainting", "missing": 1.5}"#).is_err());
        assert!(TaskSpec::from_json(r#"{"kind": "denoising", "sigma": 0.1, "extra": 1}"#).is_err());
    }

    #[test]
    fn degradation_is_seeded() {
        let clean = random_image(8, 8, 40);
        let task = TaskSpec::Inpainting { missing: 0.8, seed: 11 };
        assert_eq!(task.degrade(&clean).unwrap(), task.degrade(&clean).unwrap());
        let (fid, z) = TaskSpec::Inpainting { missing: 0.0, seed: 1 }.degrade(&clean).unwrap();
        assert_eq!(z, clean);
        let model = tiny_model(10);
        let s = LogSchedule::linear(-1.0, -4.0, 5, 1.0).unwrap();
        assert_eq!(scheduled_solve(&model, &fid, &z, &s).unwrap(), clean);
    }
}
