//! Quartic B-spline kernel and tensor-product activations `φ(x, t̂)`.
//!
//! Feature-axis nodes sit on an equidistant grid over `[-3.5, 3.5]`; the
//! activation is exactly zero once `x` leaves the kernel support of every
//! node. The smoothing axis uses `n_t` equidistant nodes on `[t̂_min, t̂_max]`
//! plus two ghost nodes with the same spacing beyond each end, so the basis
//! sums to one on the whole smoothing interval.

use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 3;
pub const DEFAULT_N_X: usize = 63;
pub const DEFAULT_N_T: usize = 16;
pub const FEATURE_RANGE: (f64, f64) = (-3.5, 3.5);
/// Ghost nodes added past each end of the smoothing axis.
pub const T_GHOSTS: usize = 2;
const SUPPORT: f64 = 2.5;

// Polynomial pieces in the local variable v of each branch, highest power last, scaled by 1/24.
const INNER: [f64; 5] = [11.0, 12.0, -6.0, -12.0, 6.0]; // v = |x| + 1/2
const MIDDLE: [f64; 5] = [1.0, 4.0, 6.0, 4.0, -4.0]; // v = 3/2 - |x|
const OUTER: [f64; 5] = [0.0, 0.0, 0.0, 0.0, 1.0]; // v = 5/2 - |x|

fn poly_derivative(c: &[f64; 5], v: f64, order: usize) -> f64 {
    // k-th derivative of Σ c_j v^j
    let mut acc = 0.0;
    for j in (order..5).rev() {
        let mut coef = c[j];
        for m in 0..order {
            coef *= (j - m) as f64;
        }
        acc = acc * v + coef;
    }
    acc
}

/// The quartic B-spline `φ` (order 0) or its derivatives up to order 3; zero for `|x| ≥ 5/2`.
pub fn quartic_kernel(x: f64, order: usize) -> f64 {
    debug_assert!(order <= MAX_ORDER);
    kernel_derivative(x, order)
}

fn kernel_derivative(x: f64, order: usize) -> f64 {
    let a = x.abs();
    let (coeffs, v, dv) = if a < 0.5 {
        (&INNER, a + 0.5, 1.0)
    } else if a < 1.5 {
        (&MIDDLE, 1.5 - a, -1.0)
    } else if a < SUPPORT {
        (&OUTER, SUPPORT - a, -1.0)
    } else {
        return if x.is_nan() { f64::NAN } else { 0.0 };
    };
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let chain = if order % 2 == 1 { sign * dv } else { 1.0 };
    chain * poly_derivative(coeffs, v, order) / 24.0
}

fn check_order(dx: usize, dt: usize) -> Result<()> {
    if dx + dt > MAX_ORDER {
        Err(Error::DerivativeOrder { dx, dt })
    } else {
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineGrid {
    pub n_x: usize,
    pub n_t: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub t_hat_min: f64,
    pub t_hat_max: f64,
}

/// Nonzero basis values along one axis: indices `start..start + len`.
#[derive(Clone, Copy, Debug)]
pub struct BasisWindow {
    pub start: usize,
    pub len: usize,
    pub values: [f64; 6],
}

impl BasisWindow {
    fn empty() -> Self {
        Self { start: 0, len: 0, values: [0.0; 6] }
    }

    fn nan() -> Self {
        Self { start: 0, len: 1, values: [f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0] }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values[..self.len].iter().enumerate().map(move |(k, v)| (self.start + k, *v))
    }
}

/// `TAYLOR[d][m][j]`: coefficient of `τ^j` in the `d`-th derivative of `φ(τ − m + 2)`
/// for `τ ∈ [−½, ½)`, where each shifted kernel is a single polynomial piece.
static TAYLOR: LazyLock<[[[f64; 5]; 5]; MAX_ORDER + 1]> = LazyLock::new(|| {
    let mut table = [[[0.0; 5]; 5]; MAX_ORDER + 1];
    for (m, shift) in (-2i32..=2).enumerate() {
        let at = -shift as f64;
        // Taylor coefficients φ^{(j)}(at)/j! of the piece containing `at`
        let mut base = [0.0; 5];
        let mut fact = 1.0;
        for (j, b) in base.iter_mut().enumerate() {
            if j > 0 {
                fact *= j as f64;
            }
            *b = kernel_derivative(at, j) / fact;
        }
        for (d, slot) in table.iter_mut().enumerate() {
            for j in d..5 {
                let falling: f64 = (0..d).map(|q| (j - q) as f64).product();
                slot[m][j - d] = base[j] * falling;
            }
        }
    }
    table
});

fn window(origin: f64, gamma: f64, count: usize, x: f64, order: usize) -> BasisWindow {
    if x.is_nan() {
        return BasisWindow::nan();
    }
    let s = (x - origin) / gamma;
    let k = (s + 0.5).floor();
    if k < -2.0 || k > (count + 1) as f64 {
        return BasisWindow::empty();
    }
    let tau = s - k;
    let k = k as isize;
    let lo = (k - 2).max(0) as usize;
    let hi = ((k + 2) as usize).min(count - 1);
    if lo > hi {
        return BasisWindow::empty();
    }
    let scale = gamma.powi(-(order as i32));
    let table = &TAYLOR[order];
    let mut w = BasisWindow { start: lo, len: hi + 1 - lo, values: [0.0; 6] };
    for (slot, l) in (lo..=hi).enumerate() {
        let c = &table[(l as isize - k + 2) as usize];
        let v = (((c[4] * tau + c[3]) * tau + c[2]) * tau + c[1]) * tau + c[0];
        w.values[slot] = v * scale;
    }
    w
}

/// `Σ_o row[o] b_o`. Inside the smoothing range the derivative basis sums to
/// zero, so `centered` subtracts the first weight first: rows constant in `t̂`
/// then give exactly zero instead of rounding noise.
fn contract_t(row: &[f64], bt: &BasisWindow, centered: bool) -> f64 {
    let base = if centered && bt.len > 0 { row[bt.start] } else { 0.0 };
    bt.iter().map(|(o, vt)| (row[o] - base) * vt).sum()
}

impl SplineGrid {
    pub fn new(n_x: usize, n_t: usize, t_hat_min: f64, t_hat_max: f64) -> Result<Self> {
        let g = Self { n_x, n_t, x_min: FEATURE_RANGE.0, x_max: FEATURE_RANGE.1, t_hat_min, t_hat_max };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x < 2 || self.n_t < 2 {
            return Err(Error::invalid("spline grids need at least two nodes per axis"));
        }
        if self.n_x > 100_000 || self.n_t > 100_000 {
            return Err(Error::invalid("spline grid too large"));
        }
        let finite = [self.x_min, self.x_max, self.t_hat_min, self.t_hat_max].iter().all(|v| v.is_finite());
        if !finite || !(self.x_min < self.x_max) || !(self.t_hat_min < self.t_hat_max) {
            return Err(Error::invalid("spline ranges must be finite, nonempty intervals"));
        }
        Ok(())
    }

    pub fn gamma_x(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x - 1) as f64
    }

    pub fn gamma_t(&self) -> f64 {
        (self.t_hat_max - self.t_hat_min) / (self.n_t - 1) as f64
    }

    pub fn mu_x(&self, l: usize) -> f64 {
        self.x_min + l as f64 * self.gamma_x()
    }

    /// Number of stored columns on the smoothing axis, ghosts included.
    pub fn t_columns(&self) -> usize {
        self.n_t + 2 * T_GHOSTS
    }

    /// Center of stored smoothing column `o` (column `T_GHOSTS` sits at `t̂_min`).
    pub fn mu_t(&self, o: usize) -> f64 {
        self.t_hat_min + (o as f64 - T_GHOSTS as f64) * self.gamma_t()
    }

    pub fn weight_len(&self) -> usize {
        self.n_x * self.t_columns()
    }

    pub fn contains_t_hat(&self, t_hat: f64) -> bool {
        t_hat >= self.t_hat_min && t_hat <= self.t_hat_max
    }

    pub fn x_basis(&self, x: f64, order: usize) -> BasisWindow {
        window(self.x_min, self.gamma_x(), self.n_x, x, order)
    }

    pub fn t_basis(&self, t_hat: f64, order: usize) -> BasisWindow {
        window(self.mu_t(0), self.gamma_t(), self.t_columns(), t_hat, order)
    }
}

/// One 2D activation `φ(x, t̂) = Σ_{l,o} w_{lo} φ((x − μ_l)/γ_x) φ((t̂ − μ_o)/γ_t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineActivation2D {
    pub grid: SplineGrid,
    /// Row-major `n_x × t_columns` weights.
    pub weights: Vec<f64>,
}

/// The activation restricted to a fixed `t̂` and smoothing-derivative order: a 1D spline in `x`.
#[derive(Clone, Debug)]
pub struct SplineSlice {
    grid: SplineGrid,
    coeffs: Vec<f64>,
    /// One quartic in `τ = s − k` per unit cell `k − ½ ≤ s < k + ½`, `k = −2, …, n_x + 1`.
    pieces: Vec<[f64; 5]>,
}

/// Locates `x` on the feature axis: cell index into the piece tables and the local offset `τ`.
fn cell(grid: &SplineGrid, x: f64) -> Option<(usize, f64)> {
    let s = (x - grid.x_min) / grid.gamma_x();
    let k = (s + 0.5).floor();
    if !(k >= -2.0 && k <= (grid.n_x + 1) as f64) {
        return None;
    }
    Some(((k + 2.0) as usize, s - k))
}

impl SplineSlice {
    fn new(grid: SplineGrid, coeffs: Vec<f64>) -> Self {
        let cells = grid.n_x + 4;
        let mut pieces = vec![[0.0; 5]; cells];
        for (i, piece) in pieces.iter_mut().enumerate() {
            for (m, taylor) in TAYLOR[0].iter().enumerate() {
                // node l = k + m − 2 with k = i − 2
                let Some(l) = (i + m).checked_sub(4).filter(|l| *l < grid.n_x) else { continue };
                for (p, t) in piece.iter_mut().zip(taylor) {
                    *p += coeffs[l] * t;
                }
            }
        }
        Self { grid, coeffs, pieces }
    }

    pub fn eval(&self, x: f64, dx: usize) -> f64 {
        if x.is_nan() {
            return f64::NAN;
        }
        let Some((i, t)) = cell(&self.grid, x) else { return 0.0 };
        let p = &self.pieces[i];
        let v = match dx {
            0 => (((p[4] * t + p[3]) * t + p[2]) * t + p[1]) * t + p[0],
            1 => ((4.0 * p[4] * t + 3.0 * p[3]) * t + 2.0 * p[2]) * t + p[1],
            2 => (12.0 * p[4] * t + 6.0 * p[3]) * t + 2.0 * p[2],
            3 => 24.0 * p[4] * t + 6.0 * p[3],
            _ => 24.0 * p[4],
        };
        if dx == 0 {
            v
        } else {
            v * self.grid.gamma_x().powi(-(dx as i32))
        }
    }

    /// `out[p] = eval(xs[p], dx)` for a whole channel.
    pub fn eval_into(&self, xs: &[f64], dx: usize, out: &mut [f64]) {
        let scale = self.grid.gamma_x().powi(-(dx as i32));
        let inv = 1.0 / self.grid.gamma_x();
        let (x_min, top) = (self.grid.x_min, (self.grid.n_x + 1) as f64);
        macro_rules! sweep {
            ($p:ident, $t:ident, $e:expr) => {
                for (o, &x) in out.iter_mut().zip(xs) {
                    let s = (x - x_min) * inv;
                    let k = (s + 0.5).floor();
                    *o = if k >= -2.0 && k <= top {
                        let $p = &self.pieces[(k + 2.0) as usize];
                        let $t = s - k;
                        $e * scale
                    } else if x.is_nan() {
                        f64::NAN
                    } else {
                        0.0
                    };
                }
            };
        }
        match dx {
            0 => sweep!(p, t, (((p[4] * t + p[3]) * t + p[2]) * t + p[1]) * t + p[0]),
            1 => sweep!(p, t, ((4.0 * p[4] * t + 3.0 * p[3]) * t + 2.0 * p[2]) * t + p[1]),
            2 => sweep!(p, t, (12.0 * p[4] * t + 6.0 * p[3]) * t + 2.0 * p[2]),
            3 => sweep!(p, t, 24.0 * p[4] * t + 6.0 * p[3]),
            _ => sweep!(p, _t, 24.0 * p[4]),
        }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }
}

impl SplineActivation2D {
    pub fn zeros(grid: SplineGrid) -> Self {
        Self { grid, weights: vec![0.0; grid.weight_len()] }
    }

    pub fn from_weights(grid: SplineGrid, weights: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if weights.len() != grid.weight_len() {
            return Err(Error::ShapeMismatch(format!(
                "spline weights: expected {}, got {}",
                grid.weight_len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("spline weights must be finite"));
        }
        Ok(Self { grid, weights })
    }

    pub fn weight(&self, l: usize, o: usize) -> f64 {
        self.weights[l * self.grid.t_columns() + o]
    }

    /// `∂^dx_x ∂^dt_t̂ φ(x, t̂)`.
    pub fn eval(&self, x: f64, t_hat: f64, dx: usize, dt: usize) -> Result<f64> {
        check_order(dx, dt)?;
        let bx = self.grid.x_basis(x, dx);
        let bt = self.grid.t_basis(t_hat, dt);
        let cols = self.grid.t_columns();
        let centered = dt > 0 && self.grid.contains_t_hat(t_hat);
        let mut acc = 0.0;
        for (l, vx) in bx.iter() {
            acc += vx * contract_t(&self.weights[l * cols..(l + 1) * cols], &bt, centered);
        }
        Ok(acc)
    }

    /// Basis products `b` with `eval(x, t̂, dx, dt) = ⟨weights, b⟩`.
    pub fn weight_gradient(&self, x: f64, t_hat: f64, dx: usize, dt: usize) -> Result<Vec<f64>> {
        check_order(dx, dt)?;
        let mut out = vec![0.0; self.weights.len()];
        let bx = self.grid.x_basis(x, dx);
        let bt = self.grid.t_basis(t_hat, dt);
        let cols = self.grid.t_columns();
        for (l, vx) in bx.iter() {
            for (o, vt) in bt.iter() {
                out[l * cols + o] = vx * vt;
            }
        }
        Ok(out)
    }

    pub fn slice(&self, t_hat: f64, dt: usize) -> Result<SplineSlice> {
        check_order(0, dt)?;
        let bt = self.grid.t_basis(t_hat, dt);
        let cols = self.grid.t_columns();
        let centered = dt > 0 && self.grid.contains_t_hat(t_hat);
        let coeffs =
            (0..self.grid.n_x).map(|l| contract_t(&self.weights[l * cols..(l + 1) * cols], &bt, centered)).collect();
        Ok(SplineSlice::new(self.grid, coeffs))
    }

    /// Adds `Σ_p cot_p ∂/∂w [∂^dx ∂^dt φ](xs_p, t̂)` into `out`.
    pub fn accumulate_weight_gradient(
        &self,
        xs: &[f64],
        cot: &[f64],
        t_hat: f64,
        dx: usize,
        dt: usize,
        out: &mut [f64],
    ) -> Result<()> {
        check_order(dx, dt)?;
        // power moments Σ c τ^j per unit cell, then one contraction per node
        let mut moments = vec![[0.0; 5]; self.grid.n_x + 4];
        let mut nan = false;
        for (&x, &c) in xs.iter().zip(cot) {
            if c == 0.0 {
                continue;
            }
            if x.is_nan() {
                nan = true;
                continue;
            }
            let Some((i, t)) = cell(&self.grid, x) else { continue };
            let m = &mut moments[i];
            let mut p = c;
            for slot in m.iter_mut() {
                *slot += p;
                p *= t;
            }
        }
        let scale = self.grid.gamma_x().powi(-(dx as i32));
        let mut per_node = vec![0.0; self.grid.n_x];
        for (i, m) in moments.iter().enumerate() {
            if m.iter().all(|v| *v == 0.0) {
                continue;
            }
            for (k, taylor) in TAYLOR[dx].iter().enumerate() {
                let Some(l) = (i + k).checked_sub(4).filter(|l| *l < self.grid.n_x) else { continue };
                per_node[l] += scale * m.iter().zip(taylor).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        if nan {
            per_node[0] = f64::NAN;
        }
        let cols = self.grid.t_columns();
        let bt = self.grid.t_basis(t_hat, dt);
        for (l, acc) in per_node.iter().enumerate() {
            if *acc == 0.0 {
                continue;
            }
            for (o, vt) in bt.iter() {
                out[l * cols + o] += acc * vt;
            }
        }
        Ok(())
    }

    /// Activation constant along `t̂` whose feature-axis coefficients are `coeffs(μ_l)`.
    pub fn constant_in_t(grid: SplineGrid, coeffs: impl Fn(f64) -> f64) -> Result<Self> {
        grid.validate()?;
        let cols = grid.t_columns();
        let mut weights = vec![0.0; grid.weight_len()];
        for l in 0..grid.n_x {
            weights[l * cols..(l + 1) * cols].fill(coeffs(grid.mu_x(l)));
        }
        Self::from_weights(grid, weights)
    }

    /// `φ(x, t̂) = x` wherever all feature-axis nodes covering `x` exist.
    pub fn init_identity(grid: SplineGrid) -> Result<Self> {
        Self::constant_in_t(grid, |m| m)
    }

    /// `φ(x, t̂) = x²/2` on the same interior; the shift cancels the kernel variance 5/12.
    pub fn init_quadratic(grid: SplineGrid) -> Result<Self> {
        let var = 5.0 / 12.0 * grid.gamma_x().powi(2);
        Self::constant_in_t(grid, |m| 0.5 * (m * m - var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> SplineGrid {
        SplineGrid::new(DEFAULT_N_X, DEFAULT_N_T, (1e-4f64).ln(), 0.0).unwrap()
    }

    #[test]
    fn batched_slice_matches_pointwise_evaluation() {
        let g = grid();
        let w: Vec<f64> = (0..g.weight_len()).map(|k| ((k * 37) % 101) as f64 / 50.0 - 1.0).collect();
        let act = SplineActivation2D::from_weights(g, w).unwrap();
        let xs: Vec<f64> = (0..400).map(|k| -4.2 + k as f64 * 0.021).chain([f64::NAN, 1e9, -1e9]).collect();
        for dt in 0..=2 {
            let slice = act.slice(-3.3, dt).unwrap();
            for dx in 0..=MAX_ORDER - dt {
                let mut out = vec![0.0; xs.len()];
                slice.eval_into(&xs, dx, &mut out);
                for (x, o) in xs.iter().zip(&out) {
                    let p = slice.eval(*x, dx);
                    if x.is_nan() {
                        assert!(o.is_nan() && p.is_nan());
                        continue;
                    }
                    let full = act.eval(*x, -3.3, dx, dt).unwrap();
                    assert!((o - p).abs() <= 1e-10 * p.abs().max(1.0), "dx={dx} x={x}: {o} vs {p}");
                    assert!((o - full).abs() <= 1e-9 * full.abs().max(1.0), "dx={dx} dt={dt} x={x}: {o} vs {full}");
                }
            }
        }
    }

    #[test]
    fn kernel_values() {
        assert_eq!(quartic_kernel(2.5, 0), 0.0);
        assert_eq!(quartic_kernel(-2.5, 0), 0.0);
        assert!((quartic_kernel(0.0, 0) - 115.0 / 192.0).abs() < 1e-15);
        assert!((quartic_kernel(1.0, 0) - 19.0 / 96.0).abs() < 1e-15);
        assert_eq!(quartic_kernel(0.0, 1), 0.0);
        assert_eq!(quartic_kernel(7.0, 3), 0.0);
    }

    #[test]
    fn kernel_derivatives_match_finite_differences() {
        let h = 1e-5;
        for k in 0..200 {
            let x = -2.6 + 5.2 * (k as f64 + 0.37) / 200.0;
            for order in 0..3 {
                let fd = (quartic_kernel(x + h, order) - quartic_kernel(x - h, order)) / (2.0 * h);
                let an = quartic_kernel(x, order + 1);
                assert!((fd - an).abs() < 1e-6, "x={x} order={order}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn c3_continuity_at_breakpoints() {
        let eps = 1e-13;
        for b in [-2.5, -1.5, -0.5, 0.5, 1.5, 2.5] {
            for order in 0..=3 {
                let l = quartic_kernel(b - eps, order);
                let r = quartic_kernel(b + eps, order);
                assert!((l - r).abs() < 1e-11, "break {b} order {order}: {l} vs {r}");
            }
        }
    }

    #[test]
    fn partition_of_unity() {
        for k in 0..1000 {
            let x = -3.0 + 6.0 * k as f64 / 999.0;
            let s: f64 = (-8..=8).map(|j| quartic_kernel(x - j as f64, 0)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_zero() {
        let act = SplineActivation2D::zeros(grid());
        for dx in 0..=3 {
            for dt in 0..=(3 - dx) {
                assert_eq!(act.eval(0.3, -2.0, dx, dt).unwrap(), 0.0);
            }
        }
        assert!(matches!(act.eval(0.0, 0.0, 2, 2), Err(Error::DerivativeOrder { .. })));
    }

    #[test]
    fn single_weight_is_product_of_kernels() {
        let g = grid();
        let mut act = SplineActivation2D::zeros(g);
        let (l, o) = (30, 7);
        act.weights[l * g.t_columns() + o] = 1.0;
        let (x, t) = (0.05, -5.0);
        let expected =
            quartic_kernel((x - g.mu_x(l)) / g.gamma_x(), 0) * quartic_kernel((t - g.mu_t(o)) / g.gamma_t(), 0);
        assert!((act.eval(x, t, 0, 0).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn identity_init_fits() {
        let act = SplineActivation2D::init_identity(grid()).unwrap();
        for k in 0..=60 {
            let x = -3.0 + 0.1 * k as f64;
            for t in [-9.0, -4.0, -0.1] {
                assert!((act.eval(x, t, 0, 0).unwrap() - x).abs() < 1e-12);
                assert!((act.eval(x, t, 1, 0).unwrap() - 1.0).abs() < 1e-12);
                assert!(act.eval(x, t, 0, 1).unwrap() == 0.0);
            }
        }
        let q = SplineActivation2D::init_quadratic(grid()).unwrap();
        for k in 0..=60 {
            let x = -3.0 + 0.1 * k as f64;
            assert!((q.eval(x, -3.0, 0, 0).unwrap() - 0.5 * x * x).abs() < 1e-12);
            assert!((q.eval(x, -3.0, 2, 0).unwrap() - 1.0).abs() < 1e-12);
        }
        assert!(q.eval(1.2, (1e-4f64).ln(), 0, 2).unwrap() == 0.0);
    }

    #[test]
    fn compact_support_outside_feature_range() {
        let act = SplineActivation2D::init_identity(grid()).unwrap();
        let g = act.grid;
        let far = g.x_max + 2.5 * g.gamma_x() + 1e-9;
        assert_eq!(act.eval(far, -1.0, 0, 0).unwrap(), 0.0);
        assert!(act.weight_gradient(far, -1.0, 1, 1).unwrap().iter().all(|v| *v == 0.0));
        assert!(act.weight_gradient(-far, -1.0, 0, 0).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn weight_perturbation_is_exact() {
        let g = grid();
        let mut act = SplineActivation2D::init_quadratic(g).unwrap();
        let (x, t) = (0.41, -2.2);
        let grad = act.weight_gradient(x, t, 1, 1).unwrap();
        let base = act.eval(x, t, 1, 1).unwrap();
        let idx = grad.iter().position(|v| v.abs() > 1e-3).unwrap();
        let eps = 1e-3;
        act.weights[idx] += eps;
        let moved = act.eval(x, t, 1, 1).unwrap();
        assert!((moved - base - eps * grad[idx]).abs() < 1e-12);
    }

    fn random_activation(seed: u64) -> SplineActivation2D {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = SplineGrid::new(15, 6, -3.0, 0.0).unwrap();
        let w = (0..g.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        SplineActivation2D::from_weights(g, w).unwrap()
    }

    #[test]
    fn mixed_partials_match_nested_finite_differences() {
        let act = random_activation(5);
        // third derivatives have kinks at the knots, so keep the step small
        let h = 1e-5;
        for &(x, t) in &[(0.3, -1.1), (-1.7, -2.4), (2.2, -0.3)] {
            for dx in 0..=3usize {
                for dt in 0..=(3 - dx) {
                    if dx + dt == 0 {
                        continue;
                    }
                    // differentiate a lower-order analytic partial once more
                    let (fd, an) = if dx > 0 {
                        let f = |xx: f64| act.eval(xx, t, dx - 1, dt).unwrap();
                        ((f(x + h) - f(x - h)) / (2.0 * h), act.eval(x, t, dx, dt).unwrap())
                    } else {
                        let f = |tt: f64| act.eval(x, tt, dx, dt - 1).unwrap();
                        ((f(t + h) - f(t - h)) / (2.0 * h), act.eval(x, t, dx, dt).unwrap())
                    };
                    let scale = an.abs().max(1.0);
                    assert!((fd - an).abs() / scale < 1e-4, "({dx},{dt}) at ({x},{t}): {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn slice_matches_full_evaluation() {
        let act = random_activation(9);
        for dt in 0..=2 {
            let s = act.slice(-1.3, dt).unwrap();
            for dx in 0..=(3 - dt) {
                let x = 0.77;
                assert!((s.eval(x, dx) - act.eval(x, -1.3, dx, dt).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn accumulated_weight_gradient_matches_pointwise() {
        let act = random_activation(3);
        let xs = [0.1, -2.0, 1.4];
        let cot = [0.5, -1.0, 2.0];
        let mut acc = vec![0.0; act.weights.len()];
        act.accumulate_weight_gradient(&xs, &cot, -0.7, 2, 1, &mut acc).unwrap();
        let mut direct = vec![0.0; act.weights.len()];
        for (x, c) in xs.iter().zip(&cot) {
            for (d, g) in direct.iter_mut().zip(act.weight_gradient(*x, -0.7, 2, 1).unwrap()) {
                *d += c * g;
            }
        }
        for (a, b) in acc.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn kernel_is_even_and_odd_orders_are_odd(x in -4.0f64..4.0) {
            prop_assert!((quartic_kernel(x, 0) - quartic_kernel(-x, 0)).abs() < 1e-15);
            prop_assert!((quartic_kernel(x, 1) + quartic_kernel(-x, 1)).abs() < 1e-14);
            prop_assert!((quartic_kernel(x, 2) - quartic_kernel(-x, 2)).abs() < 1e-14);
            prop_assert!((quartic_kernel(x, 3) + quartic_kernel(-x, 3)).abs() < 1e-13);
        }

        #[test]
        fn evaluation_is_linear_in_weights(
            x in -4.5f64..4.5, t in -3.2f64..0.2, seed in 0u64..1000, dx in 0usize..=3,
        ) {
            let act = random_activation(seed);
            let dt = (3 - dx).min(1);
            let g = act.weight_gradient(x, t, dx, dt).unwrap();
            let dot: f64 = g.iter().zip(&act.weights).map(|(a, b)| a * b).sum();
            let v = act.eval(x, t, dx, dt).unwrap();
            prop_assert!((dot - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }
}
