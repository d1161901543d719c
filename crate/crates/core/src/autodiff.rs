//! Reverse-mode differentiation over a small tape of image-tensor operations.
//!
//! The tape records exactly the operations needed to express `∇_y R`, the
//! `t̂`-jets of `R`, and unrolled proximal-gradient iterations, so losses built
//! from them can be differentiated with respect to the model parameters, to
//! scalar variables such as `t̂` and step sizes, and to input tensors.

use crate::error::{Error, Result};
use crate::foe::{apply_activation, FoEModel};
use crate::spline::MAX_ORDER;
use crate::tensor::{ImageTensor, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScalarVar(usize);

enum Op<'a> {
    Leaf {
        requires_grad: bool,
    },
    Conv {
        layer: usize,
        x: Var,
    },
    ConvAdjoint {
        layer: usize,
        x: Var,
    },
    Act {
        layer: usize,
        u: Var,
        dx: usize,
        dt: usize,
        t_hat: ScalarVar,
    },
    Mul {
        a: Var,
        b: Var,
    },
    /// `alpha * a + beta * b`
    Lin {
        a: Var,
        b: Var,
        alpha: f64,
        beta: f64,
    },
    /// `x − eta * g`
    Step {
        x: Var,
        g: Var,
        eta: ScalarVar,
    },
    /// `argmin_u ½‖u − v‖² + (tau / 2σ²)‖u − z‖²`
    ProxDenoise {
        v: Var,
        tau: ScalarVar,
        z: &'a Tensor,
        sigma2: f64,
    },
    /// Observed pixels take `z`, the rest pass `v` through.
    ProxInpaint {
        v: Var,
        mask: &'a [bool],
    },
}

struct Node<'a> {
    op: Op<'a>,
    value: Tensor,
}

struct Scalar {
    value: f64,
    requires_grad: bool,
}

pub struct Tape<'a> {
    model: &'a FoEModel,
    nodes: Vec<Node<'a>>,
    scalars: Vec<Scalar>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    /// Flat parameter gradient in [`FoEModel::params`] order; empty unless requested.
    pub params: Vec<f64>,
    /// One entry per scalar variable (zero for those not requiring gradients).
    pub scalars: Vec<f64>,
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of a node, if any gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.adjoints[v.0].as_ref()
    }

    pub fn scalar(&self, s: ScalarVar) -> f64 {
        self.scalars[s.0]
    }
}

fn add_into(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => acc.axpy(1.0, &t),
        None => *slot = Some(t),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= v;
    }
    out
}

impl<'a> Tape<'a> {
    pub fn new(model: &'a FoEModel) -> Self {
        Self { model, nodes: Vec::new(), scalars: Vec::new() }
    }

    pub fn model(&self) -> &'a FoEModel {
        self.model
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, s: ScalarVar) -> f64 {
        self.scalars[s.0].value
    }

    pub fn scalar(&mut self, value: f64, requires_grad: bool) -> ScalarVar {
        self.scalars.push(Scalar { value, requires_grad });
        ScalarVar(self.scalars.len() - 1)
    }

    fn push(&mut self, op: Op<'a>, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn layer_index(&self, layer: usize) -> Result<()> {
        if layer >= self.model.depth() {
            return Err(Error::invalid(format!("layer {layer} out of range")));
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf { requires_grad }, value)
    }

    pub fn conv(&mut self, layer: usize, x: Var) -> Result<Var> {
        self.layer_index(layer)?;
        let value = self.model.layers[layer].conv.forward(self.value(x))?;
        Ok(self.push(Op::Conv { layer, x }, value))
    }

    pub fn conv_adjoint(&mut self, layer: usize, x: Var) -> Result<Var> {
        self.layer_index(layer)?;
        let value = self.model.layers[layer].conv.adjoint(self.value(x))?;
        Ok(self.push(Op::ConvAdjoint { layer, x }, value))
    }

    /// `∂^dx_x ∂^dt_t̂ φ` of layer `layer`, applied channelwise to `u`.
    pub fn activation(&mut self, layer: usize, u: Var, t_hat: ScalarVar, dx: usize, dt: usize) -> Result<Var> {
        self.layer_index(layer)?;
        let t = self.scalar_value(t_hat);
        if !self.model.grid.contains_t_hat(t) {
            return Err(Error::SmoothingOutOfRange {
                value: t,
                min: self.model.grid.t_hat_min,
                max: self.model.grid.t_hat_max,
            });
        }
        let value = apply_activation(&self.model.layers[layer].activations, self.value(u), t, dx, dt)?;
        Ok(self.push(Op::Act { layer, u, dx, dt, t_hat }, value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).ensure_same_shape(self.value(b), "elementwise product")?;
        let value = hadamard(self.value(a), self.value(b));
        Ok(self.push(Op::Mul { a, b }, value))
    }

    pub fn lin(&mut self, alpha: f64, a: Var, beta: f64, b: Var) -> Result<Var> {
        self.value(a).ensure_same_shape(self.value(b), "linear combination")?;
        let mut value = self.value(a).clone();
        value.scale(alpha);
        value.axpy(beta, self.value(b));
        Ok(self.push(Op::Lin { a, b, alpha, beta }, value))
    }

    pub fn step(&mut self, x: Var, g: Var, eta: ScalarVar) -> Result<Var> {
        self.value(x).ensure_same_shape(self.value(g), "gradient step")?;
        let mut value = self.value(x).clone();
        value.axpy(-self.scalar_value(eta), self.value(g));
        Ok(self.push(Op::Step { x, g, eta }, value))
    }

    pub fn prox_denoise(&mut self, v: Var, tau: ScalarVar, z: &'a Tensor, sigma2: f64) -> Result<Var> {
        self.value(v).ensure_same_shape(z, "denoising prox")?;
        let c = self.scalar_value(tau) / sigma2;
        let mut value = self.value(v).clone();
        for (o, zz) in value.data_mut().iter_mut().zip(z.data()) {
            *o = (*o + c * zz) / (1.0 + c);
        }
        Ok(self.push(Op::ProxDenoise { v, tau, z, sigma2 }, value))
    }

    pub fn prox_inpaint(&mut self, v: Var, z: &'a Tensor, mask: &'a [bool]) -> Result<Var> {
        self.value(v).ensure_same_shape(z, "inpainting prox")?;
        if mask.len() != z.len() {
            return Err(Error::ShapeMismatch("inpainting mask size".into()));
        }
        let mut value = self.value(v).clone();
        for ((o, zz), m) in value.data_mut().iter_mut().zip(z.data()).zip(mask) {
            if *m {
                *o = *zz;
            }
        }
        Ok(self.push(Op::ProxInpaint { v, mask }, value))
    }

    /// Records `∇_y R(x, t̂)`; returns the gradient node and the per-layer
    /// pre-activations and activation slopes so callers can reuse them.
    pub fn energy_gradient(&mut self, x: Var, t_hat: ScalarVar) -> Result<GradientNodes> {
        let depth = self.model.depth();
        let mut pre = Vec::with_capacity(depth);
        let mut input = x;
        for i in 0..depth {
            let u = self.conv(i, input)?;
            pre.push(u);
            if i + 1 < depth {
                input = self.activation(i, u, t_hat, 0, 0)?;
            }
        }
        let mut slopes = vec![None; depth];
        let last = self.activation(depth - 1, pre[depth - 1], t_hat, 1, 0)?;
        slopes[depth - 1] = Some(last);
        let mut delta = last;
        for i in (0..depth).rev() {
            let b = self.conv_adjoint(i, delta)?;
            if i == 0 {
                delta = b;
                break;
            }
            let s = self.activation(i - 1, pre[i - 1], t_hat, 1, 0)?;
            slopes[i - 1] = Some(s);
            delta = self.mul(s, b)?;
        }
        Ok(GradientNodes {
            grad: delta,
            pre,
            slopes: slopes.into_iter().map(|s| s.expect("every layer has a slope")).collect(),
        })
    }

    /// Records the second-order `t̂`-jet of the final potentials; returns `(ȧ_L, ä_L)`.
    pub fn t_jet(&mut self, nodes: &GradientNodes, t_hat: ScalarVar) -> Result<(Var, Var)> {
        let depth = self.model.depth();
        let mut first = self.activation(0, nodes.pre[0], t_hat, 0, 1)?;
        let mut second = self.activation(0, nodes.pre[0], t_hat, 0, 2)?;
        for i in 1..depth {
            let u = nodes.pre[i];
            let du = self.conv(i, first)?;
            let ddu = self.conv(i, second)?;
            let fx = nodes.slopes[i];
            let ft = self.activation(i, u, t_hat, 0, 1)?;
            let fxx = self.activation(i, u, t_hat, 2, 0)?;
            let fxt = self.activation(i, u, t_hat, 1, 1)?;
            let ftt = self.activation(i, u, t_hat, 0, 2)?;
            let a = self.mul(fx, du)?;
            first = self.lin(1.0, a, 1.0, ft)?;
            let du2 = self.mul(du, du)?;
            let t1 = self.mul(fxx, du2)?;
            let t2 = self.mul(fxt, du)?;
            let t3 = self.mul(fx, ddu)?;
            let s1 = self.lin(1.0, t1, 2.0, t2)?;
            let s2 = self.lin(1.0, ftt, 1.0, t3)?;
            second = self.lin(1.0, s1, 1.0, s2)?;
        }
        Ok((first, second))
    }

    fn needs(&self, want_params: bool) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        let scalar_req = |s: ScalarVar| self.scalars[s.0].requires_grad;
        for (k, node) in self.nodes.iter().enumerate() {
            needs[k] = match &node.op {
                Op::Leaf { requires_grad } => *requires_grad,
                Op::Conv { x, .. } | Op::ConvAdjoint { x, .. } => want_params || needs[x.0],
                Op::Act { u, t_hat, .. } => want_params || needs[u.0] || scalar_req(*t_hat),
                Op::Mul { a, b } | Op::Lin { a, b, .. } => needs[a.0] || needs[b.0],
                Op::Step { x, g, eta } => needs[x.0] || needs[g.0] || scalar_req(*eta),
                Op::ProxDenoise { v, tau, .. } => needs[v.0] || scalar_req(*tau),
                Op::ProxInpaint { v, .. } => needs[v.0],
            };
        }
        needs
    }

    /// Propagates the given output adjoints back through the tape.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>, want_params: bool) -> Result<Gradients> {
        let needs = self.needs(want_params);
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, t) in seeds {
            self.value(v).ensure_same_shape(&t, "seed adjoint")?;
            add_into(&mut adj[v.0], t);
        }
        let layout = self.model.param_layout();
        let mut params = if want_params { vec![0.0; self.model.num_params()] } else { Vec::new() };
        let mut scalars = vec![0.0; self.scalars.len()];

        for k in (0..self.nodes.len()).rev() {
            if !needs[k] {
                continue;
            }
            let Some(out) = adj[k].take() else { continue };
            let node = &self.nodes[k];
            match &node.op {
                Op::Leaf { .. } => {
                    adj[k] = Some(out);
                }
                Op::Conv { layer, x } => {
                    let conv = &self.model.layers[*layer].conv;
                    if want_params {
                        let off = layout[*layer].0;
                        let n = conv.kernels.len();
                        conv.accumulate_kernel_gradient(self.value(*x), &out, &mut params[off..off + n])?;
                    }
                    if needs[x.0] {
                        add_into(&mut adj[x.0], conv.adjoint(&out)?);
                    }
                }
                Op::ConvAdjoint { layer, x } => {
                    let conv = &self.model.layers[*layer].conv;
                    if want_params {
                        // ⟨ō, Kᵀx⟩ = ⟨K ō, x⟩
                        let off = layout[*layer].0;
                        let n = conv.kernels.len();
                        conv.accumulate_kernel_gradient(&out, self.value(*x), &mut params[off..off + n])?;
                    }
                    if needs[x.0] {
                        add_into(&mut adj[x.0], conv.forward(&out)?);
                    }
                }
                Op::Act { layer, u, dx, dt, t_hat } => {
                    let acts = &self.model.layers[*layer].activations;
                    let t = self.scalar_value(*t_hat);
                    let uv = self.value(*u);
                    if want_params {
                        let w = self.model.grid.weight_len();
                        for (j, act) in acts.iter().enumerate() {
                            let off = layout[*layer].1[j];
                            act.accumulate_weight_gradient(
                                uv.channel(j),
                                out.channel(j),
                                t,
                                *dx,
                                *dt,
                                &mut params[off..off + w],
                            )?;
                        }
                    }
                    if needs[u.0] {
                        if dx + dt + 1 > MAX_ORDER {
                            return Err(Error::DerivativeOrder { dx: dx + 1, dt: *dt });
                        }
                        let slope = apply_activation(acts, uv, t, dx + 1, *dt)?;
                        add_into(&mut adj[u.0], hadamard(&slope, &out));
                    }
                    if self.scalars[t_hat.0].requires_grad {
                        if dx + dt + 1 > MAX_ORDER {
                            return Err(Error::DerivativeOrder { dx: *dx, dt: dt + 1 });
                        }
                        let dphi = apply_activation(acts, uv, t, *dx, dt + 1)?;
                        scalars[t_hat.0] += dphi.dot(&out);
                    }
                }
                Op::Mul { a, b } => {
                    if needs[a.0] {
                        add_into(&mut adj[a.0], hadamard(&out, self.value(*b)));
                    }
                    if needs[b.0] {
                        add_into(&mut adj[b.0], hadamard(&out, self.value(*a)));
                    }
                }
                Op::Lin { a, b, alpha, beta } => {
                    if needs[a.0] {
                        add_into(&mut adj[a.0], out.map(|v| alpha * v));
                    }
                    if needs[b.0] {
                        add_into(&mut adj[b.0], out.map(|v| beta * v));
                    }
                }
                Op::Step { x, g, eta } => {
                    let e = self.scalar_value(*eta);
                    if self.scalars[eta.0].requires_grad {
                        scalars[eta.0] -= out.dot(self.value(*g));
                    }
                    if needs[g.0] {
                        add_into(&mut adj[g.0], out.map(|v| -e * v));
                    }
                    if needs[x.0] {
                        add_into(&mut adj[x.0], out);
                    }
                }
                Op::ProxDenoise { v, tau, z, sigma2 } => {
                    let c = self.scalar_value(*tau) / sigma2;
                    if self.scalars[tau.0].requires_grad {
                        let vv = self.value(*v);
                        let s: f64 = out
                            .data()
                            .iter()
                            .zip(z.data().iter().zip(vv.data()))
                            .map(|(o, (zz, x))| o * (zz - x))
                            .sum();
                        scalars[tau.0] += s / (sigma2 * (1.0 + c) * (1.0 + c));
                    }
                    if needs[v.0] {
                        add_into(&mut adj[v.0], out.map(|o| o / (1.0 + c)));
                    }
                }
                Op::ProxInpaint { v, mask, .. } => {
                    if needs[v.0] {
                        let mut pass = out;
                        for (o, m) in pass.data_mut().iter_mut().zip(mask.iter()) {
                            if *m {
                                *o = 0.0;
                            }
                        }
                        add_into(&mut adj[v.0], pass);
                    }
                }
            }
        }
        Ok(Gradients { params, scalars, adjoints: adj })
    }
}

/// Nodes recorded by [`Tape::energy_gradient`].
pub struct GradientNodes {
    /// `∇_y R`.
    pub grad: Var,
    /// Pre-activations `u_1, …, u_L`.
    pub pre: Vec<Var>,
    /// `φ_x` evaluated on each `u_i`.
    pub slopes: Vec<Var>,
}

/// Value of the per-sample training loss, split into its two terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub score: f64,
    pub t_term: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.score + self.t_term
    }
}

/// Per-sample loss `½‖e^{t̂/2}∇_y R − n‖² + (m_t/2)[(∂_t̂R)² − 2∂²_t̂R]` at `y`
/// and its exact gradient with respect to every model parameter.
pub fn loss_backprop(
    model: &FoEModel,
    y: &ImageTensor,
    noise: &ImageTensor,
    t_hat: f64,
    m_t: f64,
) -> Result<(LossParts, Vec<f64>)> {
    model.check_inputs(y, t_hat)?;
    y.ensure_same_shape(noise, "noise")?;
    if !m_t.is_finite() || m_t < 0.0 {
        return Err(Error::invalid(format!("t-term weight must be finite and non-negative, got {m_t}")));
    }
    let mut tape = Tape::new(model);
    let t = tape.scalar(t_hat, false);
    let yv = tape.leaf(y.clone(), false);
    let nodes = tape.energy_gradient(yv, t)?;
    let s = (0.5 * t_hat).exp();

    let mut resid = tape.value(nodes.grad).clone();
    resid.scale(s);
    resid.axpy(-1.0, noise);
    let score = 0.5 * resid.norm_sq();
    resid.scale(s);
    let mut seeds = vec![(nodes.grad, resid)];

    let mut t_term = 0.0;
    if m_t > 0.0 {
        let (first, second) = tape.t_jet(&nodes, t)?;
        let r_t = tape.value(first).sum();
        let r_tt = tape.value(second).sum();
        t_term = 0.5 * m_t * (r_t * r_t - 2.0 * r_tt);
        let shape = tape.value(first);
        let (c, h, w) = shape.shape();
        seeds.push((first, Tensor::filled(c, h, w, m_t * r_t)));
        seeds.push((second, Tensor::filled(c, h, w, -m_t)));
    }
    let parts = LossParts { score, t_term };
    if !parts.total().is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = tape.backward(seeds, true)?;
    Ok((parts, grads.params))
}
