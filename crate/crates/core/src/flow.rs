//! Graduated non-convexity flow over a smoothed energy family.
//!
//! Each step takes one gradient step on `F(·, t_i)` preconditioned by the
//! smoothing variance, `x ← x − η t_i ∇_x F(x, t_i)`, while `t_i` decreases.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{linspace, BoxDomain, GaussianMixture};

/// Default classification radius around the target minimum.
pub const DEFAULT_ATTAINMENT_TOL: f64 = 0.1;
pub const DEFAULT_ETA: f64 = 1.0;
pub const DEFAULT_T_MIN: f64 = 1e-4;

/// A family of energies `(x, t) ↦ F(x, t)` with gradient in `x`.
pub trait EnergyFamily: Sync {
    fn dim(&self) -> usize;

    /// Returns `(F(x, t), ∇_x F(x, t))`.
    fn energy_and_gradient(&self, x: &[f64], t: f64) -> Result<(f64, Vec<f64>)>;

    fn gradient(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.energy_and_gradient(x, t)?.1)
    }
}

impl EnergyFamily for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn energy_and_gradient(&self, x: &[f64], t: f64) -> Result<(f64, Vec<f64>)> {
        let e = self.smoothed_energy(x, t)?;
        Ok((e.value, e.gradient))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    values: Vec<f64>,
    step_sizes: Vec<f64>,
}

impl Schedule {
    /// Strictly decreasing positive smoothing values with one step size per value.
    pub fn new(values: Vec<f64>, step_sizes: Vec<f64>) -> Result<Self> {
        Self::check(&values, &step_sizes)?;
        if values.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::invalid("schedule values must be strictly decreasing"));
        }
        Ok(Self { values, step_sizes })
    }

    pub fn with_uniform_step(values: Vec<f64>, eta: f64) -> Result<Self> {
        let n = values.len();
        Self::new(values, vec![eta; n])
    }

    /// Degenerate schedule holding `t` fixed: plain preconditioned gradient descent on `F(·, t)`.
    pub fn constant(t: f64, steps: usize, eta: f64) -> Result<Self> {
        let values = vec![t; steps];
        let step_sizes = vec![eta; steps];
        Self::check(&values, &step_sizes)?;
        Ok(Self { values, step_sizes })
    }

    fn check(values: &[f64], step_sizes: &[f64]) -> Result<()> {
        if values.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if values.len() != step_sizes.len() {
            return Err(Error::invalid("one step size per schedule value required"));
        }
        if values.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::invalid("schedule values must be positive and finite"));
        }
        // eta = 0 is admitted so the identity flow can be expressed
        if step_sizes.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return Err(Error::invalid("step sizes must be nonnegative and finite"));
        }
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn step_sizes(&self) -> &[f64] {
        &self.step_sizes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `steps` geometrically spaced values from `t0` down to `t_min`, both included.
///
/// A single step uses `t0` alone.
pub fn log_schedule(t0: f64, t_min: f64, steps: usize) -> Result<Vec<f64>> {
    if !(t_min > 0.0) || !(t0 > t_min) || !t0.is_finite() {
        return Err(Error::invalid(format!("log schedule needs t0 > t_min > 0, got t0={t0}, t_min={t_min}")));
    }
    if steps == 0 {
        return Err(Error::invalid("log schedule needs at least one step"));
    }
    Ok(linspace(t0.log10(), t_min.log10(), steps)
        .into_iter()
        .enumerate()
        .map(|(i, e)| match i {
            0 => t0,
            _ if i == steps - 1 => t_min,
            _ => 10f64.powf(e),
        })
        .collect())
}

/// Log schedule from `t0` to `t_min`, or a constant schedule when `t0 <= t_min`.
pub fn gnc_schedule(t0: f64, t_min: f64, steps: usize, eta: f64) -> Result<Schedule> {
    if t0 <= t_min {
        Schedule::constant(t0, steps, eta)
    } else {
        Schedule::with_uniform_step(log_schedule(t0, t_min, steps)?, eta)
    }
}

/// One preconditioned step `x − η t ∇_x F(x, t)`.
pub fn gnc_flow_step<F: EnergyFamily + ?Sized>(family: &F, x: &[f64], t: f64, eta: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::NonPositiveSmoothing(t));
    }
    if !(eta >= 0.0) {
        return Err(Error::invalid(format!("step size must be nonnegative, got {eta}")));
    }
    let grad = family.gradient(x, t)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient at t={t}")));
    }
    Ok(x.iter().zip(&grad).map(|(xi, gi)| xi - eta * t * gi).collect())
}

/// Full trajectory `x_0, …, x_I` of the flow.
pub fn run_gnc_flow<F: EnergyFamily + ?Sized>(family: &F, x0: &[f64], schedule: &Schedule) -> Result<Vec<Vec<f64>>> {
    if x0.len() != family.dim() {
        return Err(Error::DimensionMismatch { expected: family.dim(), got: x0.len() });
    }
    let mut traj = Vec::with_capacity(schedule.len() + 1);
    traj.push(x0.to_vec());
    for (&t, &eta) in schedule.values().iter().zip(schedule.step_sizes()) {
        let next = gnc_flow_step(family, traj.last().unwrap(), t, eta)?;
        traj.push(next);
    }
    Ok(traj)
}

/// Fraction of flows from `n_starts` equally spaced starts (endpoints included) that end within
/// `tol` of `target`.
pub fn attainment_rate<F: EnergyFamily + ?Sized>(
    family: &F,
    n_starts: usize,
    domain: (f64, f64),
    schedule: &Schedule,
    target: &[f64],
    tol: f64,
) -> Result<f64> {
    let (lo, hi) = domain;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::EmptyDomain(format!("degenerate interval [{lo}, {hi}]")));
    }
    if n_starts < 2 {
        return Err(Error::invalid("attainment rate needs at least two starts"));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("attainment tolerance must be positive"));
    }
    if family.dim() != 1 || target.len() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: family.dim().max(target.len()) });
    }
    let starts = linspace(lo, hi, n_starts);
    let hits = starts
        .par_iter()
        .map(|&x0| -> Result<usize> {
            let mut x = vec![x0];
            for (&t, &eta) in schedule.values().iter().zip(schedule.step_sizes()) {
                x = gnc_flow_step(family, &x, t, eta)?;
            }
            Ok(usize::from((x[0] - target[0]).abs() <= tol))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(hits as f64 / n_starts as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub t0: f64,
    pub steps: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateGridConfig {
    pub t0s: Vec<f64>,
    pub steps: Vec<usize>,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_n_starts")]
    pub n_starts: usize,
    #[serde(default = "default_domain")]
    pub domain: (f64, f64),
    #[serde(default = "default_target")]
    pub target: Vec<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_t_min() -> f64 {
    DEFAULT_T_MIN
}
fn default_eta() -> f64 {
    DEFAULT_ETA
}
fn default_n_starts() -> usize {
    1000
}
fn default_domain() -> (f64, f64) {
    (-3.0, 3.0)
}
fn default_target() -> Vec<f64> {
    vec![0.5]
}
fn default_tol() -> f64 {
    DEFAULT_ATTAINMENT_TOL
}

impl Default for RateGridConfig {
    fn default() -> Self {
        Self {
            t0s: vec![1e-4, 1e-2, 1e-1, 1.0],
            steps: vec![1, 10, 100],
            t_min: DEFAULT_T_MIN,
            eta: DEFAULT_ETA,
            n_starts: 1000,
            domain: default_domain(),
            target: default_target(),
            tol: DEFAULT_ATTAINMENT_TOL,
        }
    }
}

/// Attainment rate for every `(t0, I)` cell, row-major in `t0`.
pub fn rate_grid<F: EnergyFamily + ?Sized>(family: &F, cfg: &RateGridConfig) -> Result<Vec<RateCell>> {
    let mut cells = Vec::with_capacity(cfg.t0s.len() * cfg.steps.len());
    for &t0 in &cfg.t0s {
        for &steps in &cfg.steps {
            let schedule = gnc_schedule(t0, cfg.t_min, steps, cfg.eta)?;
            let rate = attainment_rate(family, cfg.n_starts, cfg.domain, &schedule, &cfg.target, cfg.tol)?;
            cells.push(RateCell { t0, steps, rate });
        }
    }
    Ok(cells)
}

/// Restricts `domain` to the 1D interval the rate experiment uses.
pub fn interval_of(domain: &BoxDomain) -> Result<(f64, f64)> {
    domain.validate()?;
    if domain.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: domain.dim() });
    }
    Ok((domain.lower[0], domain.upper[0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * y.abs().max(1e-300), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn log_schedule_examples() {
        assert_close(&log_schedule(1.0, 1e-4, 5).unwrap(), &[1.0, 1e-1, 1e-2, 1e-3, 1e-4], 1e-12);
        assert!(log_schedule(1.0, 1.0, 1).is_err());
        assert_close(&log_schedule(0.25, 0.01, 3).unwrap(), &[0.25, 0.05, 0.01], 1e-12);
        assert_eq!(log_schedule(0.5, 0.1, 1).unwrap(), vec![0.5]);
    }

    #[test]
    fn schedule_invariants() {
        assert!(Schedule::with_uniform_step(vec![1.0, 1.0], 1.0).is_err());
        assert!(Schedule::with_uniform_step(vec![1.0, 0.5], -1.0).is_err());
        assert!(Schedule::with_uniform_step(vec![], 1.0).is_err());
        assert!(Schedule::constant(1e-4, 3, 1.0).is_ok());
    }

    #[test]
    fn single_gaussian_is_reached_in_one_step() {
        let g = GaussianMixture::new_1d(vec![1.0], &[0.0], &[0.0]).unwrap();
        for t in [0.01, 0.3, 2.0] {
            let x = gnc_flow_step(&g, &[1.7], t, 1.0).unwrap();
            assert!(x[0].abs() < 1e-12);
        }
        assert_eq!(gnc_flow_step(&g, &[1.7], 0.5, 0.0).unwrap(), vec![1.7]);
    }

    #[test]
    fn benchmark_step_matches_gradient() {
        let g = GaussianMixture::benchmark_1d();
        let x = gnc_flow_step(&g, &[-3.0], 1.0, 1.0).unwrap();
        // independent evaluation of the smoothed derivative at t = 1
        let (w, mu, var) =
            ([0.05, 0.15, 0.15, 0.60, 0.05], [-1.0, -0.5, 0.0, 0.5, 1.0], [1.10, 1.01, 1.05, 1.01, 1.10]);
        let (mut f, mut df) = (0.0, 0.0);
        for i in 0..5 {
            let p = w[i] * (-(-3.0f64 - mu[i]).powi(2) / (2.0 * var[i])).exp()
                / (2.0 * std::f64::consts::PI * var[i]).sqrt();
            f += p;
            df += -p * (-3.0 - mu[i]) / var[i];
        }
        let grad_f = -df / f;
        assert!((x[0] - (-3.0 - grad_f)).abs() < 1e-12);
    }

    #[test]
    fn trajectory_shapes_and_contraction() {
        let g = GaussianMixture::new_1d(vec![1.0], &[0.2], &[0.3]).unwrap();
        let s = Schedule::with_uniform_step(log_schedule(1.0, 0.01, 20).unwrap(), 0.5).unwrap();
        let traj = run_gnc_flow(&g, &[2.5], &s).unwrap();
        assert_eq!(traj.len(), 21);
        assert_eq!(traj[0], vec![2.5]);
        for w in traj.windows(2) {
            assert!((w[1][0] - 0.2).abs() < (w[0][0] - 0.2).abs());
        }
        let one = Schedule::with_uniform_step(vec![0.7], 1.0).unwrap();
        let traj = run_gnc_flow(&g, &[1.0], &one).unwrap();
        assert_eq!(traj[1], gnc_flow_step(&g, &[1.0], 0.7, 1.0).unwrap());
    }

    #[test]
    fn benchmark_flow_reaches_global_minimum() {
        let g = GaussianMixture::benchmark_1d();
        let s = gnc_schedule(1.0, DEFAULT_T_MIN, 100, 1.0).unwrap();
        let traj = run_gnc_flow(&g, &[0.9], &s).unwrap();
        assert!((traj.last().unwrap()[0] - 0.5).abs() < 0.05);
    }

    #[test]
    fn convex_family_rate_is_one() {
        let g = GaussianMixture::new_1d(vec![1.0], &[0.5], &[0.02]).unwrap();
        let s = gnc_schedule(1.0, 1e-2, 50, 1.0).unwrap();
        let r = attainment_rate(&g, 200, (-3.0, 3.0), &s, &[0.5], 0.1).unwrap();
        assert_eq!(r, 1.0);
        assert!(attainment_rate(&g, 1, (-3.0, 3.0), &s, &[0.5], 0.1).is_err());
        assert!(attainment_rate(&g, 10, (1.0, 1.0), &s, &[0.5], 0.1).is_err());
    }
}
