//! Smoothing-conditioned Fields-of-Experts regularizer
//! `R_L(y, t̂) = ⟨1, Φ_L(·, t̂) ∘ K_L ∘ … ∘ Φ_1(·, t̂) ∘ K_1 (y)⟩`.
//!
//! Evaluation here is direct: a forward pass for the value, a reverse pass
//! for `∇_y R`, and second-order jets in `t̂` for `∂_t̂ R` and `∂²_t̂ R`.
//! Parameter gradients of the training loss live in [`crate::autodiff`].

use serde::{Deserialize, Serialize};

use crate::conv::{dct_filters, kaiming_init, ConvOp};
use crate::error::{Error, Result};
use crate::flow::EnergyFamily;
use crate::spline::{SplineActivation2D, SplineGrid};
use crate::tensor::{ImageTensor, Tensor};

pub const FIRST_KERNEL: usize = 7;
pub const HIDDEN_KERNEL: usize = 3;
pub const CHANNELS: usize = 48;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub conv: ConvOp,
    pub activations: Vec<SplineActivation2D>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoEModel {
    pub grid: SplineGrid,
    pub layers: Vec<Layer>,
}

/// Degree-2 Taylor jet of a tensor along `t̂`.
#[derive(Clone, Debug, PartialEq)]
pub struct TJet {
    pub value: Tensor,
    pub first: Tensor,
    pub second: Tensor,
}

impl TJet {
    pub fn constant(value: Tensor) -> Self {
        let first = Tensor::zeros_like(&value);
        let second = Tensor::zeros_like(&value);
        Self { value, first, second }
    }
}

/// Applies `∂^dx_x ∂^dt_t̂ φ_j` to every element of channel `j`.
pub(crate) fn apply_activation(
    acts: &[SplineActivation2D],
    u: &Tensor,
    t_hat: f64,
    dx: usize,
    dt: usize,
) -> Result<Tensor> {
    let mut out = Tensor::zeros_like(u);
    for (j, act) in acts.iter().enumerate() {
        let slice = act.slice(t_hat, dt)?;
        if dx + dt > crate::spline::MAX_ORDER {
            return Err(Error::DerivativeOrder { dx, dt });
        }
        slice.eval_into(u.channel(j), dx, out.channel_mut(j));
    }
    Ok(out)
}

fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= v;
    }
    out
}

impl FoEModel {
    pub fn new(grid: SplineGrid, layers: Vec<Layer>) -> Result<Self> {
        let m = Self { grid, layers };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        let mut channels = 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.conv.validate()?;
            if layer.conv.n_in != channels {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} expects {} input channels, previous layer gives {channels}",
                    layer.conv.n_in
                )));
            }
            if layer.activations.len() != layer.conv.n_out {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} has {} activations for {} channels",
                    layer.activations.len(),
                    layer.conv.n_out
                )));
            }
            for act in &layer.activations {
                if act.grid != self.grid {
                    return Err(Error::invalid(format!("layer {i} activation grid differs from the model grid")));
                }
                if act.weights.len() != self.grid.weight_len() || act.weights.iter().any(|w| !w.is_finite()) {
                    return Err(Error::invalid(format!("layer {i} has malformed spline weights")));
                }
            }
            channels = layer.conv.n_out;
        }
        Ok(())
    }

    /// Hidden activations start as the identity, the final potentials as `x²/2`.
    fn default_activations(grid: SplineGrid, count: usize, last: bool) -> Result<Vec<SplineActivation2D>> {
        let act =
            if last { SplineActivation2D::init_quadratic(grid)? } else { SplineActivation2D::init_identity(grid)? };
        Ok(vec![act; count])
    }

    /// `depth` layers of 48 channels: DCT-initialized 7×7 filters first, Kaiming 3×3 after.
    pub fn initialized(depth: usize, grid: SplineGrid, seed: u64) -> Result<Self> {
        if depth == 0 {
            return Err(Error::invalid("model depth must be positive"));
        }
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let conv = if i == 0 {
                dct_filters()
            } else {
                kaiming_init(CHANNELS, CHANNELS, HIDDEN_KERNEL, seed.wrapping_add(i as u64))?
            };
            let activations = Self::default_activations(grid, CHANNELS, i + 1 == depth)?;
            layers.push(Layer { conv, activations });
        }
        Self::new(grid, layers)
    }

    /// Kaiming-initialized model with arbitrary channel counts and kernel sizes.
    pub fn kaiming(channels: &[usize], kernel_sizes: &[usize], grid: SplineGrid, seed: u64) -> Result<Self> {
        if channels.is_empty() || channels.len() != kernel_sizes.len() {
            return Err(Error::invalid("one kernel size per layer required"));
        }
        let mut layers = Vec::with_capacity(channels.len());
        let mut n_in = 1;
        for (i, (&n_out, &size)) in channels.iter().zip(kernel_sizes).enumerate() {
            let conv = kaiming_init(n_out, n_in, size, seed.wrapping_add(i as u64))?;
            let activations = Self::default_activations(grid, n_out, i + 1 == channels.len())?;
            layers.push(Layer { conv, activations });
            n_in = n_out;
        }
        Self::new(grid, layers)
    }

    /// Scalar prior: identity `1×1` convolution followed by one activation.
    pub fn scalar(grid: SplineGrid) -> Result<Self> {
        Self::new(
            grid,
            vec![Layer { conv: ConvOp::identity(), activations: vec![SplineActivation2D::init_quadratic(grid)?] }],
        )
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn t_hat_range(&self) -> (f64, f64) {
        (self.grid.t_hat_min, self.grid.t_hat_max)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.conv.kernels.len() + l.activations.len() * self.grid.weight_len()).sum()
    }

    /// Flat parameter vector: per layer, kernels then each activation's weights.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.conv.kernels);
            for a in &l.activations {
                out.extend_from_slice(&a.weights);
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.conv.kernels.len();
            l.conv.kernels.copy_from_slice(&params[off..off + n]);
            off += n;
            for a in &mut l.activations {
                let n = a.weights.len();
                a.weights.copy_from_slice(&params[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// Offsets into the flat parameter vector: `(kernel_offset, [activation offsets])` per layer.
    pub fn param_layout(&self) -> Vec<(usize, Vec<usize>)> {
        let mut off = 0;
        let w = self.grid.weight_len();
        self.layers
            .iter()
            .map(|l| {
                let k = off;
                off += l.conv.kernels.len();
                let acts = (0..l.activations.len())
                    .map(|_| {
                        let a = off;
                        off += w;
                        a
                    })
                    .collect();
                (k, acts)
            })
            .collect()
    }

    /// Mask over the flat parameters selecting convolution kernels.
    pub fn kernel_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            mask.extend(std::iter::repeat(true).take(l.conv.kernels.len()));
            mask.extend(std::iter::repeat(false).take(l.activations.len() * self.grid.weight_len()));
        }
        mask
    }

    pub fn check_inputs(&self, y: &Tensor, t_hat: f64) -> Result<()> {
        if !self.grid.contains_t_hat(t_hat) {
            return Err(Error::SmoothingOutOfRange {
                value: t_hat,
                min: self.grid.t_hat_min,
                max: self.grid.t_hat_max,
            });
        }
        if y.channels() != self.layers[0].conv.n_in {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} input channels, got {}",
                self.layers[0].conv.n_in,
                y.channels()
            )));
        }
        if y.is_empty() {
            return Err(Error::ShapeMismatch("empty image".into()));
        }
        Ok(())
    }

    /// Pre-activation features `u_1, …, u_L`.
    fn features(&self, y: &Tensor, t_hat: f64) -> Result<Vec<Tensor>> {
        let mut us = Vec::with_capacity(self.depth());
        let mut a = self.layers[0].conv.forward(y)?;
        us.push(a.clone());
        for i in 1..self.depth() {
            a = apply_activation(&self.layers[i - 1].activations, &a, t_hat, 0, 0)?;
            a = self.layers[i].conv.forward(&a)?;
            us.push(a.clone());
        }
        Ok(us)
    }

    pub fn energy(&self, y: &ImageTensor, t_hat: f64) -> Result<f64> {
        self.check_inputs(y, t_hat)?;
        let us = self.features(y, t_hat)?;
        let last = self.depth() - 1;
        Ok(apply_activation(&self.layers[last].activations, &us[last], t_hat, 0, 0)?.sum())
    }

    fn backward_from(&self, us: &[Tensor], t_hat: f64) -> Result<Tensor> {
        let last = self.depth() - 1;
        let mut delta = apply_activation(&self.layers[last].activations, &us[last], t_hat, 1, 0)?;
        for i in (0..self.depth()).rev() {
            let b = self.layers[i].conv.adjoint(&delta)?;
            if i == 0 {
                return Ok(b);
            }
            let slope = apply_activation(&self.layers[i - 1].activations, &us[i - 1], t_hat, 1, 0)?;
            delta = mul(&slope, &b);
        }
        unreachable!("model has at least one layer")
    }

    /// `∇_y R_L(y, t̂)` by a reverse pass through the adjoint convolutions.
    pub fn grad_x(&self, y: &ImageTensor, t_hat: f64) -> Result<ImageTensor> {
        self.check_inputs(y, t_hat)?;
        let us = self.features(y, t_hat)?;
        self.backward_from(&us, t_hat)
    }

    pub fn energy_and_grad(&self, y: &ImageTensor, t_hat: f64) -> Result<(f64, ImageTensor)> {
        self.check_inputs(y, t_hat)?;
        let us = self.features(y, t_hat)?;
        let last = self.depth() - 1;
        let e = apply_activation(&self.layers[last].activations, &us[last], t_hat, 0, 0)?.sum();
        Ok((e, self.backward_from(&us, t_hat)?))
    }

    /// Propagates `(u, ∂_t̂ u, ∂²_t̂ u)` through activation `layer`.
    pub fn activation_jet(&self, layer: usize, u: &TJet, t_hat: f64) -> Result<TJet> {
        let acts = &self.layers[layer].activations;
        let f = |dx, dt| apply_activation(acts, &u.value, t_hat, dx, dt);
        let value = f(0, 0)?;
        let fx = f(1, 0)?;
        let ft = f(0, 1)?;
        let fxx = f(2, 0)?;
        let fxt = f(1, 1)?;
        let ftt = f(0, 2)?;
        let mut first = Tensor::zeros_like(&value);
        let mut second = Tensor::zeros_like(&value);
        let (du, ddu) = (u.first.data(), u.second.data());
        for k in 0..value.len() {
            let d1 = du[k];
            first.data_mut()[k] = fx.data()[k] * d1 + ft.data()[k];
            second.data_mut()[k] =
                fxx.data()[k] * d1 * d1 + 2.0 * fxt.data()[k] * d1 + ftt.data()[k] + fx.data()[k] * ddu[k];
        }
        Ok(TJet { value, first, second })
    }

    /// `(∂_t̂ R_L, ∂²_t̂ R_L)` at `(y, t̂)`.
    pub fn t_derivatives(&self, y: &ImageTensor, t_hat: f64) -> Result<(f64, f64)> {
        self.check_inputs(y, t_hat)?;
        let mut jet = TJet::constant(self.layers[0].conv.forward(y)?);
        for i in 0..self.depth() {
            if i > 0 {
                let conv = &self.layers[i].conv;
                jet = TJet {
                    value: conv.forward(&jet.value)?,
                    first: conv.forward(&jet.first)?,
                    second: conv.forward(&jet.second)?,
                };
            }
            jet = self.activation_jet(i, &jet, t_hat)?;
        }
        Ok((jet.first.sum(), jet.second.sum()))
    }
}

/// A prior seen as an energy family in `(x, t)` with `t̂ = ln t`, over images of a fixed size.
pub struct FoEFamily<'a> {
    pub model: &'a FoEModel,
    pub height: usize,
    pub width: usize,
}

impl EnergyFamily for FoEFamily<'_> {
    fn dim(&self) -> usize {
        self.height * self.width
    }

    fn energy_and_gradient(&self, x: &[f64], t: f64) -> Result<(f64, Vec<f64>)> {
        if !(t > 0.0) {
            return Err(Error::NonPositiveSmoothing(t));
        }
        let img = Tensor::image(self.height, self.width, x.to_vec())?;
        let (e, g) = self.model.energy_and_grad(&img, t.ln())?;
        Ok((e, g.into_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> SplineGrid {
        SplineGrid::new(21, 6, -4.0, 0.0).unwrap()
    }

    fn randomize(model: &mut FoEModel, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = model.params();
        for v in &mut p {
            *v += scale * rng.random_range(-1.0..1.0);
        }
        model.set_params(&p).unwrap();
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::image(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_energy_and_gradient() {
        let mut m = FoEModel::kaiming(&[4, 3], &[3, 3], grid(), 1).unwrap();
        let zero = vec![0.0; m.num_params()];
        m.set_params(&zero).unwrap();
        let y = random_image(6, 5, 2);
        assert_eq!(m.energy(&y, -1.0).unwrap(), 0.0);
        assert!(m.grad_x(&y, -1.0).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quadratic_potential_on_zero_image() {
        let g = SplineGrid::new(63, 16, (1e-4f64).ln(), 0.0).unwrap();
        let m = FoEModel::initialized(1, g, 0).unwrap();
        let y = Tensor::zeros(1, 8, 8);
        let d1 = (48 * 64) as f64;
        assert!(m.energy(&y, -3.0).unwrap().abs() < 1e-3 * d1);
    }

    #[test]
    fn identity_conv_quadratic_potential_gradient_is_y() {
        let m = FoEModel::scalar(SplineGrid::new(63, 16, -9.0, 0.0).unwrap()).unwrap();
        let y = Tensor::image(2, 3, vec![0.1, -0.4, 1.2, 2.0, -2.5, 0.0]).unwrap();
        let g = m.grad_x(&y, -2.0).unwrap();
        for (a, b) in g.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn out_of_range_smoothing_is_rejected() {
        let m = FoEModel::kaiming(&[2], &[3], grid(), 1).unwrap();
        let y = random_image(4, 4, 1);
        assert!(matches!(m.energy(&y, 0.5), Err(Error::SmoothingOutOfRange { .. })));
        assert!(matches!(m.grad_x(&y, -4.5), Err(Error::SmoothingOutOfRange { .. })));
        let wrong = Tensor::zeros(2, 4, 4);
        assert!(matches!(m.energy(&wrong, -1.0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn scaling_last_layer_scales_energy() {
        let mut m = FoEModel::kaiming(&[3, 2], &[3, 3], grid(), 4).unwrap();
        randomize(&mut m, 3, 0.2);
        let y = random_image(5, 5, 8);
        let e = m.energy(&y, -2.0).unwrap();
        for a in &mut m.layers[1].activations {
            for w in &mut a.weights {
                *w *= 2.5;
            }
        }
        assert!((m.energy(&y, -2.0).unwrap() - 2.5 * e).abs() < 1e-10 * e.abs().max(1.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for depth in 1..=3 {
            let channels = vec![4; depth];
            let sizes: Vec<usize> = (0..depth).map(|i| if i == 0 { 5 } else { 3 }).collect();
            let mut m = FoEModel::kaiming(&channels, &sizes, grid(), depth as u64).unwrap();
            randomize(&mut m, 10 + depth as u64, 0.3);
            let y = random_image(7, 6, 3);
            let t = -1.7;
            let g = m.grad_x(&y, t).unwrap();
            let h = 1e-5;
            for k in [0, 5, 17, 41] {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp.data_mut()[k] += h;
                ym.data_mut()[k] -= h;
                let fd = (m.energy(&yp, t).unwrap() - m.energy(&ym, t).unwrap()) / (2.0 * h);
                let an = g.data()[k];
                assert!((fd - an).abs() / an.abs().max(1e-2) < 1e-4, "depth {depth} pixel {k}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn t_derivatives_match_finite_differences() {
        let mut m = FoEModel::kaiming(&[4, 3], &[3, 3], grid(), 2).unwrap();
        randomize(&mut m, 6, 0.3);
        let y = random_image(6, 6, 4);
        let t = -2.1;
        let (d1, d2) = m.t_derivatives(&y, t).unwrap();
        let h = 1e-4;
        let e = |tt: f64| m.energy(&y, tt).unwrap();
        let fd1 = (e(t + h) - e(t - h)) / (2.0 * h);
        let fd2 = (e(t + h) - 2.0 * e(t) + e(t - h)) / (h * h);
        assert!((fd1 - d1).abs() / d1.abs().max(1e-2) < 1e-4, "{fd1} vs {d1}");
        assert!((fd2 - d2).abs() / d2.abs().max(1e-2) < 1e-4, "{fd2} vs {d2}");
    }

    #[test]
    fn t_constant_activations_have_zero_t_derivatives() {
        let m = FoEModel::kaiming(&[3, 2], &[3, 3], grid(), 5).unwrap();
        let y = random_image(5, 5, 1);
        let (d1, d2) = m.t_derivatives(&y, -2.0).unwrap();
        assert_eq!((d1, d2), (0.0, 0.0));
    }

    #[test]
    fn single_layer_t_derivative_is_sum_of_activation_partials() {
        let mut m = FoEModel::kaiming(&[3], &[3], grid(), 7).unwrap();
        randomize(&mut m, 2, 0.5);
        let y = random_image(4, 5, 9);
        let t = -0.8;
        let u = m.layers[0].conv.forward(&y).unwrap();
        let mut want = 0.0;
        for j in 0..3 {
            for x in u.channel(j) {
                want += m.layers[0].activations[j].eval(*x, t, 0, 1).unwrap();
            }
        }
        let (d1, _) = m.t_derivatives(&y, t).unwrap();
        assert!((d1 - want).abs() < 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn energy_is_additive_over_separated_patches() {
        let mut m = FoEModel::kaiming(&[3], &[3], grid(), 8).unwrap();
        randomize(&mut m, 5, 0.4);
        // zero background contributes a constant per pixel; subtract it
        let blank = Tensor::zeros(1, 20, 20);
        let base = m.energy(&blank, -1.0).unwrap();
        let mut a = blank.clone();
        let mut b = blank.clone();
        for y in 3..6 {
            for x in 3..6 {
                a.set(0, y, x, 0.3 + 0.1 * (x + y) as f64);
                b.set(0, y + 11, x + 11, 0.9 - 0.05 * (x * y) as f64);
            }
        }
        let mut both = a.clone();
        both.axpy(1.0, &b);
        let ea = m.energy(&a, -1.0).unwrap() - base;
        let eb = m.energy(&b, -1.0).unwrap() - base;
        let eab = m.energy(&both, -1.0).unwrap() - base;
        assert!((eab - ea - eb).abs() < 1e-10);
    }

    #[test]
    fn directional_derivative_matches_reverse_mode() {
        let mut m = FoEModel::kaiming(&[4, 4, 3], &[5, 3, 3], grid(), 12).unwrap();
        randomize(&mut m, 1, 0.25);
        let y = random_image(8, 8, 2);
        let v = random_image(8, 8, 3);
        let t = -3.0;
        let g = m.grad_x(&y, t).unwrap();
        let h = 1e-6;
        let mut yp = y.clone();
        yp.axpy(h, &v);
        let fd = (m.energy(&yp, t).unwrap() - m.energy(&y, t).unwrap()) / h;
        let an = g.dot(&v);
        assert!((fd - an).abs() / an.abs().max(1e-2) < 1e-4, "{fd} vs {an}");
    }

    #[test]
    fn param_round_trip() {
        let mut m = FoEModel::kaiming(&[2, 2], &[3, 3], grid(), 1).unwrap();
        let mut p = m.params();
        p[0] = 42.0;
        let last = p.len() - 1;
        p[last] = -7.0;
        m.set_params(&p).unwrap();
        assert_eq!(m.params(), p);
        assert_eq!(m.layers[0].conv.kernels[0], 42.0);
        assert!(m.set_params(&p[1..]).is_err());
        let layout = m.param_layout();
        assert_eq!(layout[0].0, 0);
        assert_eq!(layout[1].1[1] + m.grid.weight_len(), m.num_params());
    }
}
