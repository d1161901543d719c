//! Multi-channel 2D correlation with symmetric (mirror) padding, its exact
//! adjoint, and kernel gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kernels stored as `n_out × n_in × size × size`, no bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvOp {
    pub n_out: usize,
    pub n_in: usize,
    pub size: usize,
    pub kernels: Vec<f64>,
}

/// Index into `0..n` of position `p` under half-sample symmetric extension.
pub fn mirror_index(p: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let q = p.rem_euclid(period);
    if q >= n as isize {
        (period - 1 - q) as usize
    } else {
        q as usize
    }
}

struct Padded {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn pad_plane(plane: &[f64], h: usize, w: usize, r: usize) -> Padded {
    let rows = h + 2 * r;
    let cols = w + 2 * r;
    let col_map: Vec<usize> = (0..cols).map(|x| mirror_index(x as isize - r as isize, w)).collect();
    let mut data = vec![0.0; rows * cols];
    for y in 0..rows {
        let src = mirror_index(y as isize - r as isize, h) * w;
        let row = &mut data[y * cols..(y + 1) * cols];
        for (dst, &cx) in row.iter_mut().zip(&col_map) {
            *dst = plane[src + cx];
        }
    }
    Padded { rows, cols, data }
}

fn fold_plane(padded: &Padded, h: usize, w: usize, r: usize, out: &mut [f64]) {
    let col_map: Vec<usize> = (0..padded.cols).map(|x| mirror_index(x as isize - r as isize, w)).collect();
    for y in 0..padded.rows {
        let dst = mirror_index(y as isize - r as isize, h) * w;
        let row = &padded.data[y * padded.cols..(y + 1) * padded.cols];
        for (v, &cx) in row.iter().zip(&col_map) {
            out[dst + cx] += v;
        }
    }
}

impl ConvOp {
    pub fn new(n_out: usize, n_in: usize, size: usize, kernels: Vec<f64>) -> Result<Self> {
        let op = Self { n_out, n_in, size, kernels };
        op.validate()?;
        Ok(op)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_out == 0 || self.n_in == 0 || self.size == 0 || self.size % 2 == 0 {
            return Err(Error::invalid(format!(
                "convolution needs positive channel counts and an odd kernel size, got {}x{}x{}",
                self.n_out, self.n_in, self.size
            )));
        }
        let expected = self
            .n_out
            .checked_mul(self.n_in)
            .and_then(|v| v.checked_mul(self.size))
            .and_then(|v| v.checked_mul(self.size))
            .ok_or_else(|| Error::invalid("kernel size overflows"))?;
        if self.kernels.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "kernel array: expected {expected} values, got {}",
                self.kernels.len()
            )));
        }
        if self.kernels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("kernel values must be finite"));
        }
        Ok(())
    }

    /// `1 × 1` single-channel identity.
    pub fn identity() -> Self {
        Self { n_out: 1, n_in: 1, size: 1, kernels: vec![1.0] }
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    fn kernel_offset(&self, o: usize, c: usize) -> usize {
        (o * self.n_in + c) * self.size * self.size
    }

    pub fn kernel(&self, o: usize, c: usize) -> &[f64] {
        let k = self.size * self.size;
        let off = self.kernel_offset(o, c);
        &self.kernels[off..off + k]
    }

    fn check_input(&self, x: &Tensor, channels: usize) -> Result<()> {
        if x.channels() != channels {
            return Err(Error::ShapeMismatch(format!("convolution expects {channels} channels, got {}", x.channels())));
        }
        if x.height() == 0 || x.width() == 0 {
            return Err(Error::ShapeMismatch("empty image".into()));
        }
        Ok(())
    }

    /// `out[o] = Σ_c k[o, c] ⋆ pad(x[c])`, same spatial size as `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x, self.n_in)?;
        let (h, w) = (x.height(), x.width());
        let k = self.size * self.size;
        let mut out = Tensor::zeros(self.n_out, h, w);
        for c in 0..self.n_in {
            let col = im2col(&pad_plane(x.channel(c), h, w, self.radius()), h, w, self.size);
            // out (n_out × hw) += K_c (n_out × k) · col (k × hw)
            gemm(
                (self.n_out, k, h * w),
                (&self.kernels[c * k..], self.n_in * k, 1),
                (&col, h * w, 1),
                (out.data_mut(), h * w, 1),
                1.0,
            );
        }
        Ok(out)
    }

    /// Exact adjoint of [`ConvOp::forward`], mapping `n_out` channels back to `n_in`.
    pub fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        self.check_input(y, self.n_out)?;
        let (h, w) = (y.height(), y.width());
        let r = self.radius();
        let k = self.size * self.size;
        let mut out = Tensor::zeros(self.n_in, h, w);
        let mut col = vec![0.0; k * h * w];
        for c in 0..self.n_in {
            // col (k × hw) = K_cᵀ (k × n_out) · y (n_out × hw)
            gemm(
                (k, self.n_out, h * w),
                (&self.kernels[c * k..], 1, self.n_in * k),
                (y.data(), h * w, 1),
                (&mut col, h * w, 1),
                0.0,
            );
            let mut acc = Padded { rows: h + 2 * r, cols: w + 2 * r, data: vec![0.0; (h + 2 * r) * (w + 2 * r)] };
            col2im(&col, h, w, self.size, &mut acc);
            fold_plane(&acc, h, w, r, out.channel_mut(c));
        }
        Ok(out)
    }

    /// Adds `∂⟨cot, forward(x)⟩/∂k` into `grad` (same layout as `kernels`).
    pub fn accumulate_kernel_gradient(&self, x: &Tensor, cot: &Tensor, grad: &mut [f64]) -> Result<()> {
        self.check_input(x, self.n_in)?;
        self.check_input(cot, self.n_out)?;
        if (x.height(), x.width()) != (cot.height(), cot.width()) {
            return Err(Error::ShapeMismatch("kernel gradient: spatial sizes differ".into()));
        }
        if grad.len() != self.kernels.len() {
            return Err(Error::DimensionMismatch { expected: self.kernels.len(), got: grad.len() });
        }
        let (h, w) = (x.height(), x.width());
        let k = self.size * self.size;
        for c in 0..self.n_in {
            let col = im2col(&pad_plane(x.channel(c), h, w, self.radius()), h, w, self.size);
            // G_c (n_out × k) += cot (n_out × hw) · colᵀ (hw × k)
            gemm(
                (self.n_out, h * w, k),
                (cot.data(), h * w, 1),
                (&col, 1, h * w),
                (&mut grad[c * k..], self.n_in * k, 1),
                1.0,
            );
        }
        Ok(())
    }
}

/// Patch matrix `col[(a s + b) hw + y w + x] = padded[y + a, x + b]`.
fn im2col(p: &Padded, h: usize, w: usize, s: usize) -> Vec<f64> {
    let hw = h * w;
    let mut col = vec![0.0; s * s * hw];
    for a in 0..s {
        for b in 0..s {
            let dst = &mut col[(a * s + b) * hw..(a * s + b + 1) * hw];
            for y in 0..h {
                let start = (y + a) * p.cols + b;
                dst[y * w..(y + 1) * w].copy_from_slice(&p.data[start..start + w]);
            }
        }
    }
    col
}

/// Scatter-adds a patch matrix back onto the padded plane (adjoint of [`im2col`]).
fn col2im(col: &[f64], h: usize, w: usize, s: usize, p: &mut Padded) {
    let hw = h * w;
    for a in 0..s {
        for b in 0..s {
            let src = &col[(a * s + b) * hw..(a * s + b + 1) * hw];
            for y in 0..h {
                let start = (y + a) * p.cols + b;
                for (d, v) in p.data[start..start + w].iter_mut().zip(&src[y * w..(y + 1) * w]) {
                    *d += v;
                }
            }
        }
    }
}

/// `C ← A B + beta C` on strided row-major views `(slice, row stride, column stride)`.
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    c: (&mut [f64], usize, usize),
    beta: f64,
) {
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || last(m, k, a.1, a.2) < a.0.len(), "gemm: A out of bounds");
    assert!(k == 0 || last(k, n, b.1, b.2) < b.0.len(), "gemm: B out of bounds");
    assert!(last(m, n, c.1, c.2) < c.0.len(), "gemm: C out of bounds");
    // SAFETY: every index the kernel touches lies within the asserted extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            c.1 as isize,
            c.2 as isize,
        );
    }
}

/// The 48 orthonormal 7×7 DCT-II basis filters without the constant one.
pub fn dct_filters() -> ConvOp {
    const N: usize = 7;
    let alpha = |k: usize| if k == 0 { (1.0 / N as f64).sqrt() } else { (2.0 / N as f64).sqrt() };
    let basis =
        |k: usize, i: usize| alpha(k) * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * N) as f64).cos();
    let mut kernels = Vec::with_capacity(48 * N * N);
    for p in 0..N {
        for q in 0..N {
            if p == 0 && q == 0 {
                continue;
            }
            for a in 0..N {
                for b in 0..N {
                    kernels.push(basis(p, a) * basis(q, b));
                }
            }
        }
    }
    ConvOp { n_out: N * N - 1, n_in: 1, size: N, kernels }
}

/// Zero-mean normal kernels with standard deviation `sqrt(2 / (n_in k²))`.
pub fn kaiming_init(n_out: usize, n_in: usize, size: usize, seed: u64) -> Result<ConvOp> {
    let fan_in = (n_in * size * size) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = n_out * n_in * size * size;
    let kernels = (0..count).map(|_| normal.sample(&mut rng)).collect();
    ConvOp::new(n_out, n_in, size, kernels)
}
