//! Gaussian-mixture energies smoothed by an isotropic Gaussian of variance `t`.
//!
//! For a mixture `p = Σ w_i G(x_i, Σ_i)` the smoothed density is again a
//! mixture with covariances `Σ_i + t·Id`, so the energy
//! `F(x, t) = −log (p ∗ G(0, t·Id))(x)` and its first two derivatives are
//! available in closed form. Zero covariances encode an empirical (Dirac)
//! measure; they need no special casing because `t·Id` keeps every smoothed
//! covariance positive definite.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigen-analysis of the Hessian is limited to low dimensions.
pub const MAX_EIGEN_DIM: usize = 8;

const SIMPLEX_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-12;
/// Minimum Hessian eigenvalue still counted as convex by the grid test.
pub const CONVEXITY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
}

/// JSON layout: `{"weights":[...], "means":[[...]], "covariances":[[[...]]]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureDocument {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if means.len() != n || covariances.len() != n {
            return Err(Error::invalid(format!(
                "{n} weights but {} means and {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::invalid("mixture dimension must be positive"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("mixture weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }

        let mut mean_vecs = Vec::with_capacity(n);
        for m in &means {
            if m.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: m.len() });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("mixture means must be finite"));
            }
            mean_vecs.push(DVector::from_column_slice(m));
        }

        let mut cov_mats = Vec::with_capacity(n);
        for c in &covariances {
            if c.len() != d || c.iter().any(|row| row.len() != d) {
                return Err(Error::invalid(format!("covariance must be {d}x{d}")));
            }
            let mat = DMatrix::from_fn(d, d, |i, j| c[i][j]);
            if mat.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("covariances must be finite"));
            }
            for i in 0..d {
                for j in 0..i {
                    let scale = 1.0f64.max(mat[(i, j)].abs());
                    if (mat[(i, j)] - mat[(j, i)]).abs() > PSD_TOL * scale {
                        return Err(Error::invalid("covariance must be symmetric"));
                    }
                }
            }
            if min_eigenvalue(&mat) < -PSD_TOL {
                return Err(Error::invalid("covariance must be positive semi-definite"));
            }
            cov_mats.push(mat);
        }

        Ok(Self { weights, means: mean_vecs, covariances: cov_mats })
    }

    /// One-dimensional mixture from scalar means and variances.
    pub fn new_1d(weights: Vec<f64>, means: &[f64], variances: &[f64]) -> Result<Self> {
        Self::new(weights, means.iter().map(|m| vec![*m]).collect(), variances.iter().map(|v| vec![vec![*v]]).collect())
    }

    /// The five-component 1D benchmark on `[-3, 3]` whose global minimum sits at `x = 1/2`.
    pub fn benchmark_1d() -> Self {
        Self::new_1d(vec![0.05, 0.15, 0.15, 0.60, 0.05], &[-1.0, -0.5, 0.0, 0.5, 1.0], &[0.10, 0.01, 0.05, 0.01, 0.10])
            .expect("benchmark mixture is valid")
    }

    /// Empirical measure `1/n Σ δ_{x_i}` as a mixture with zero covariances.
    pub fn empirical(points: &[Vec<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("empirical measure needs at least one point"));
        }
        let n = points.len();
        let d = points[0].len();
        Self::new(vec![1.0 / n as f64; n], points.to_vec(), vec![vec![vec![0.0; d]; d]; n])
    }

    pub fn from_document(doc: MixtureDocument) -> Result<Self> {
        Self::new(doc.weights, doc.means, doc.covariances)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }

    pub fn to_document(&self) -> MixtureDocument {
        let d = self.dim();
        MixtureDocument {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covariances: self
                .covariances
                .iter()
                .map(|c| (0..d).map(|i| (0..d).map(|j| c[(i, j)]).collect()).collect())
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    /// Mixture with every mean shifted by `offset`.
    pub fn translated(&self, offset: &[f64]) -> Result<Self> {
        if offset.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: offset.len() });
        }
        let shift = DVector::from_column_slice(offset);
        Ok(Self {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m + &shift).collect(),
            covariances: self.covariances.clone(),
        })
    }

    /// Precomputes the factorizations of `Σ_i + t·Id` for repeated evaluation at one `t`.
    pub fn smooth(&self, t: f64) -> Result<SmoothedMixture<'_>> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::NonPositiveSmoothing(t));
        }
        let d = self.dim();
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut components = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            if self.weights[i] == 0.0 {
                continue;
            }
            let cov = &self.covariances[i] + DMatrix::<f64>::identity(d, d) * t;
            let chol: Cholesky<f64, Dyn> = Cholesky::new(cov)
                .ok_or_else(|| Error::NonFinite(format!("smoothed covariance {i} is not positive definite")))?;
            let half_log_det: f64 = chol.l_dirty().diagonal().iter().take(d).map(|v| v.ln()).sum();
            let precision = chol.inverse();
            components.push(SmoothedComponent {
                index: i,
                log_norm: self.weights[i].ln() - d as f64 * half_log_2pi - half_log_det,
                chol,
                precision,
            });
        }
        Ok(SmoothedMixture { mixture: self, t, components })
    }

    pub fn smoothed_energy(&self, x: &[f64], t: f64) -> Result<EnergyEval> {
        self.smooth(t)?.evaluate(x)
    }

    /// Density of the smoothed mixture at `x`.
    pub fn smoothed_density(&self, x: &[f64], t: f64) -> Result<f64> {
        Ok((-self.smoothed_energy(x, t)?.value).exp())
    }

    /// `max_{corners} max_i ‖x − x_i‖²`, a smoothing level at which `F(·, t)` is convex on the box.
    pub fn convexity_threshold_bound(&self, domain: &BoxDomain) -> Result<f64> {
        if domain.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: domain.dim() });
        }
        domain.validate()?;
        // Per axis, the farthest corner coordinate from a mean is one of the two bounds,
        // so the corner maximum factorizes over axes.
        let best = self
            .means
            .iter()
            .map(|m| {
                (0..self.dim())
                    .map(|k| {
                        let lo = (domain.lower[k] - m[k]).powi(2);
                        let hi = (domain.upper[k] - m[k]).powi(2);
                        lo.max(hi)
                    })
                    .sum::<f64>()
            })
            .fold(0.0f64, f64::max);
        Ok(best)
    }

    /// Sweeps `t_candidates` (largest first) and records the smallest Hessian eigenvalue over `grid`.
    ///
    /// The reported threshold is the smallest candidate such that it and every larger
    /// candidate are convex on the grid.
    pub fn numeric_convexity_threshold(&self, grid: &[Vec<f64>], t_candidates: &[f64]) -> Result<ConvexityScan> {
        if grid.is_empty() {
            return Err(Error::EmptyDomain("evaluation grid has no points".into()));
        }
        if t_candidates.is_empty() {
            return Err(Error::invalid("no smoothing candidates given"));
        }
        if t_candidates.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::invalid("smoothing candidates must be strictly decreasing"));
        }
        if self.dim() > MAX_EIGEN_DIM {
            return Err(Error::invalid(format!("Hessian eigen-analysis limited to d <= {MAX_EIGEN_DIM}")));
        }
        let mut curve = Vec::with_capacity(t_candidates.len());
        let mut threshold = None;
        let mut prefix_convex = true;
        for &t in t_candidates {
            let smoothed = self.smooth(t)?;
            let mut min_eig = f64::INFINITY;
            for x in grid {
                let eval = smoothed.evaluate(x)?;
                min_eig = min_eig.min(eval.min_hessian_eigenvalue());
            }
            if prefix_convex && min_eig >= -CONVEXITY_TOL {
                threshold = Some(t);
            } else {
                prefix_convex = false;
            }
            curve.push((t, min_eig));
        }
        Ok(ConvexityScan { threshold, curve })
    }

    /// Proof bound and grid sweep on an axis-aligned box.
    pub fn convexity_report(
        &self,
        domain: &BoxDomain,
        points_per_axis: usize,
        t_candidates: &[f64],
    ) -> Result<(ConvexityReport, ConvexityScan)> {
        let bound_t = self.convexity_threshold_bound(domain)?;
        let grid = domain.grid(points_per_axis)?;
        let scan = self.numeric_convexity_threshold(&grid, t_candidates)?;
        let numeric_t = scan.threshold()?;
        let grid_spec =
            format!("box lower={:?} upper={:?}, {} points per axis", domain.lower, domain.upper, points_per_axis);
        Ok((ConvexityReport { bound_t, numeric_t, grid_spec }, scan))
    }
}

struct SmoothedComponent {
    index: usize,
    log_norm: f64,
    chol: Cholesky<f64, Dyn>,
    precision: DMatrix<f64>,
}

/// A mixture with its covariances already widened by `t·Id`.
pub struct SmoothedMixture<'a> {
    mixture: &'a GaussianMixture,
    t: f64,
    components: Vec<SmoothedComponent>,
}

impl SmoothedMixture<'_> {
    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<EnergyEval> {
        let d = self.mixture.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x.len() });
        }
        let xv = DVector::from_column_slice(x);
        let mut log_terms = Vec::with_capacity(self.components.len());
        let mut residuals = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let diff = &xv - &self.mixture.means[c.index];
            let r = c.chol.solve(&diff);
            let quad = diff.dot(&r);
            log_terms.push(c.log_norm - 0.5 * quad);
            residuals.push(r);
        }
        let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NonFinite("mixture density underflowed".into()));
        }
        let sum: f64 = log_terms.iter().map(|l| (l - max).exp()).sum();
        let value = -(max + sum.ln());

        let resp: Vec<f64> = log_terms.iter().map(|l| (l - max).exp() / sum).collect();
        let mut gradient = DVector::zeros(d);
        for (g, r) in resp.iter().zip(&residuals) {
            gradient.axpy(*g, r, 1.0);
        }
        let mut hessian = &gradient * gradient.transpose();
        for ((g, r), c) in resp.iter().zip(&residuals).zip(&self.components) {
            hessian += (&c.precision - r * r.transpose()) * *g;
        }
        Ok(EnergyEval { value, gradient: gradient.iter().copied().collect(), hessian })
    }
}

#[derive(Clone, Debug)]
pub struct EnergyEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: DMatrix<f64>,
}

impl EnergyEval {
    pub fn min_hessian_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.hessian)
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return Err(Error::EmptyDomain("box bounds must have equal, nonzero length".into()));
        }
        for (lo, hi) in self.lower.iter().zip(&self.upper) {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::EmptyDomain(format!("axis [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }

    /// Tensor grid with `n` equally spaced points per axis, endpoints included.
    pub fn grid(&self, n: usize) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        if n == 0 {
            return Err(Error::EmptyDomain("grid needs at least one point per axis".into()));
        }
        let axes: Vec<Vec<f64>> = self.lower.iter().zip(&self.upper).map(|(&lo, &hi)| linspace(lo, hi, n)).collect();
        let total = n.checked_pow(self.dim() as u32).ok_or_else(|| Error::invalid("grid too large"))?;
        let mut points = Vec::with_capacity(total);
        let mut idx = vec![0usize; self.dim()];
        for _ in 0..total {
            points.push(idx.iter().enumerate().map(|(k, &i)| axes[k][i]).collect());
            for k in (0..self.dim()).rev() {
                idx[k] += 1;
                if idx[k] < n {
                    break;
                }
                idx[k] = 0;
            }
        }
        Ok(points)
    }
}

/// `n` equally spaced values on `[lo, hi]`, both ends included (a single point gives `lo`).
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| if i == n - 1 { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvexityReport {
    pub bound_t: f64,
    pub numeric_t: f64,
    pub grid_spec: String,
}

#[derive(Clone, Debug)]
pub struct ConvexityScan {
    pub threshold: Option<f64>,
    /// `(t, min eigenvalue over the grid)` per candidate, in candidate order.
    pub curve: Vec<(f64, f64)>,
}

impl ConvexityScan {
    pub fn threshold(&self) -> Result<f64> {
        self.threshold.ok_or(Error::NoneConvex)
    }
}
