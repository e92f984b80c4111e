//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! Every learned component (encoders, actor trunk and head, critic, experts,
//! gate, discriminators) is a [`DenseNet`]. Parameters live in one flat
//! buffer laid out layer by layer as `[W_0 (row-major, out x in), b_0, W_1, b_1, ...]`,
//! and gradients use exactly the same layout, so optimizers and checkpoint
//! code can treat every network as a plain `&mut [f64]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Elu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Relu => a.max(0.0),
            Activation::Elu => {
                if a >= 0.0 {
                    a
                } else {
                    a.exp_m1()
                }
            }
            Activation::Identity => a,
        }
    }

    /// First derivative given the pre-activation `a` and output `h = apply(a)`.
    #[inline]
    pub fn derivative(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if a >= 0.0 {
                    1.0
                } else {
                    h + 1.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    #[inline]
    pub fn second_derivative(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * h * (1.0 - h * h),
            Activation::Relu | Activation::Identity => 0.0,
            Activation::Elu => {
                if a >= 0.0 {
                    0.0
                } else {
                    h + 1.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.outputs * self.inputs + self.outputs
    }
}

/// Shape manifest written next to the flat parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetManifest {
    pub format_version: u32,
    pub layers: Vec<LayerShape>,
    pub param_count: usize,
}

#[derive(Clone, Debug)]
pub struct DenseNet {
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    params: Vec<f64>,
    generation: u64,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.params == other.params
    }
}

/// Activations cached by [`DenseNet::forward`] for the matching backward call.
#[derive(Clone, Debug)]
pub struct Tape {
    generation: u64,
    layer_count: usize,
    /// `inputs[k]` is the input of layer k (so `inputs[0]` is x).
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    out: Vec<Vec<f64>>,
}

impl Tape {
    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }

    pub fn output(&self) -> &[f64] {
        self.out.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl DenseNet {
    /// Builds a zero-parameter network from explicit layer shapes.
    pub fn from_shapes(layers: Vec<LayerShape>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::DimensionMismatch {
                    context: "layer chain",
                    expected: pair[0].outputs,
                    got: pair[1].inputs,
                });
            }
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.param_count();
        }
        Ok(Self {
            layers,
            offsets,
            params: vec![0.0; total],
            generation: 0,
        })
    }

    /// MLP `input -> hidden... -> output` with `hidden_act` on hidden layers,
    /// Xavier-uniform weights and zero biases.
    pub fn mlp<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_act: Activation,
        output_act: Activation,
        rng: &mut R,
    ) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(output);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| LayerShape {
                inputs: dims[k],
                outputs: dims[k + 1],
                activation: if k + 1 == n { output_act } else { hidden_act },
            })
            .collect();
        let mut net = Self::from_shapes(layers).expect("mlp dims chain by construction");
        net.init_xavier(rng);
        net
    }

    pub fn init_xavier<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for k in 0..self.layers.len() {
            let shape = self.layers[k];
            let limit = (6.0 / (shape.inputs + shape.outputs) as f64).sqrt();
            let (w, b) = self.layer_mut(k);
            for v in w.iter_mut() {
                *v = rng.random_range(-limit..limit);
            }
            b.fill(0.0);
        }
        self.generation += 1;
    }

    /// Multiplies the last layer's weights by `gain` (zero gives an exactly zero output layer).
    pub fn scale_output_layer(&mut self, gain: f64) {
        let k = self.layers.len() - 1;
        let (w, b) = self.layer_mut(k);
        w.iter_mut().for_each(|v| *v *= gain);
        b.iter_mut().for_each(|v| *v *= gain);
        self.generation += 1;
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the flat parameters. Invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    pub fn layer(&self, k: usize) -> (&[f64], &[f64]) {
        let s = self.layers[k];
        let o = self.offsets[k];
        let nw = s.inputs * s.outputs;
        (&self.params[o..o + nw], &self.params[o + nw..o + nw + s.outputs])
    }

    pub fn layer_mut(&mut self, k: usize) -> (&mut [f64], &mut [f64]) {
        self.generation += 1;
        let s = self.layers[k];
        let o = self.offsets[k];
        let nw = s.inputs * s.outputs;
        let (w, rest) = self.params[o..o + nw + s.outputs].split_at_mut(nw);
        (w, rest)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "net input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Forward pass without recording a tape.
    pub fn infer(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        for k in 0..self.layers.len() {
            let shape = self.layers[k];
            let (w, b) = self.layer(k);
            let mut next = Vec::with_capacity(shape.outputs);
            for i in 0..shape.outputs {
                let row = &w[i * shape.inputs..(i + 1) * shape.inputs];
                let a = b[i] + dot(row, &cur);
                next.push(shape.activation.apply(a));
            }
            cur = next;
        }
        Ok(cur)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut tape = Tape {
            generation: self.generation,
            layer_count: n,
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            out: Vec::with_capacity(n),
        };
        let mut cur = x.to_vec();
        for k in 0..n {
            let shape = self.layers[k];
            let (w, b) = self.layer(k);
            let mut pre = Vec::with_capacity(shape.outputs);
            let mut out = Vec::with_capacity(shape.outputs);
            for i in 0..shape.outputs {
                let row = &w[i * shape.inputs..(i + 1) * shape.inputs];
                let a = b[i] + dot(row, &cur);
                pre.push(a);
                out.push(shape.activation.apply(a));
            }
            tape.inputs.push(cur);
            tape.pre.push(pre);
            cur = out.clone();
            tape.out.push(out);
        }
        Ok((cur, tape))
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        if tape.generation != self.generation || tape.layer_count != self.layers.len() {
            return Err(Error::TapeMismatch);
        }
        Ok(())
    }

    /// Reverse pass for the cotangent `grad_out`. Parameter gradients of
    /// `<grad_out, y>` are *added* into `grads`; the input gradient is returned.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        self.check_tape(tape)?;
        if grad_out.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "backward cotangent",
                expected: self.output_dim(),
                got: grad_out.len(),
            });
        }
        if grads.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                context: "gradient buffer",
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let mut upstream = grad_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            let shape = self.layers[k];
            let (w, _) = self.layer(k);
            let input = &tape.inputs[k];
            let delta: Vec<f64> = (0..shape.outputs)
                .map(|i| upstream[i] * shape.activation.derivative(tape.pre[k][i], tape.out[k][i]))
                .collect();
            let o = self.offsets[k];
            let nw = shape.inputs * shape.outputs;
            let (gw, gb) = grads[o..o + nw + shape.outputs].split_at_mut(nw);
            let mut down = vec![0.0; shape.inputs];
            for i in 0..shape.outputs {
                let d = delta[i];
                if d == 0.0 {
                    continue;
                }
                gb[i] += d;
                let grow = &mut gw[i * shape.inputs..(i + 1) * shape.inputs];
                axpy(d, input, grow);
                axpy(d, &w[i * shape.inputs..(i + 1) * shape.inputs], &mut down);
            }
            upstream = down;
        }
        Ok(upstream)
    }

    /// For a scalar-output network: returns `s = u . grad_x y(x)` and adds
    /// `scale * ds/dparams` into `grads`.
    ///
    /// Forward-mode tangents are propagated along `u`, then the combined
    /// primal/tangent chain is reversed, which yields the exact parameter
    /// gradient of the input-gradient projection.
    pub fn input_gradient_projection(
        &self,
        x: &[f64],
        u: &[f64],
        scale: f64,
        grads: &mut [f64],
    ) -> Result<f64> {
        self.check_input(x)?;
        if self.output_dim() != 1 {
            return Err(Error::DimensionMismatch {
                context: "input-gradient projection output",
                expected: 1,
                got: self.output_dim(),
            });
        }
        if u.len() != x.len() {
            return Err(Error::DimensionMismatch {
                context: "projection direction",
                expected: x.len(),
                got: u.len(),
            });
        }
        let n = self.layers.len();
        let mut h_in: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut t_in: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut pre_dot: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut outs: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut h = x.to_vec();
        let mut t = u.to_vec();
        for k in 0..n {
            let shape = self.layers[k];
            let (w, b) = self.layer(k);
            let mut a = Vec::with_capacity(shape.outputs);
            let mut ad = Vec::with_capacity(shape.outputs);
            let mut hn = Vec::with_capacity(shape.outputs);
            let mut tn = Vec::with_capacity(shape.outputs);
            for i in 0..shape.outputs {
                let row = &w[i * shape.inputs..(i + 1) * shape.inputs];
                let ai = b[i] + dot(row, &h);
                let adi = dot(row, &t);
                let hi = shape.activation.apply(ai);
                a.push(ai);
                ad.push(adi);
                hn.push(hi);
                tn.push(shape.activation.derivative(ai, hi) * adi);
            }
            h_in.push(h);
            t_in.push(t);
            pre.push(a);
            pre_dot.push(ad);
            outs.push(hn.clone());
            h = hn;
            t = tn;
        }
        let s = t[0];

        let mut h_bar = vec![0.0; 1];
        let mut t_bar = vec![scale; 1];
        for k in (0..n).rev() {
            let shape = self.layers[k];
            let (w, _) = self.layer(k);
            let o = self.offsets[k];
            let nw = shape.inputs * shape.outputs;
            let (gw, gb) = grads[o..o + nw + shape.outputs].split_at_mut(nw);
            let mut h_down = vec![0.0; shape.inputs];
            let mut t_down = vec![0.0; shape.inputs];
            for i in 0..shape.outputs {
                let (a, hv) = (pre[k][i], outs[k][i]);
                let d1 = shape.activation.derivative(a, hv);
                let d2 = shape.activation.second_derivative(a, hv);
                let ad_bar = t_bar[i] * d1;
                let a_bar = t_bar[i] * pre_dot[k][i] * d2 + h_bar[i] * d1;
                let row = &w[i * shape.inputs..(i + 1) * shape.inputs];
                let grow = &mut gw[i * shape.inputs..(i + 1) * shape.inputs];
                if ad_bar != 0.0 {
                    axpy(ad_bar, &t_in[k], grow);
                    axpy(ad_bar, row, &mut t_down);
                }
                if a_bar != 0.0 {
                    axpy(a_bar, &h_in[k], grow);
                    gb[i] += a_bar;
                    axpy(a_bar, row, &mut h_down);
                }
            }
            h_bar = h_down;
            t_bar = t_down;
        }
        Ok(s)
    }

    /// Appends `extra` zero-weight input columns to the first layer; outputs
    /// for the original inputs are unchanged.
    pub fn widen_input(&mut self, extra: usize) {
        if extra == 0 {
            return;
        }
        let mut layers = self.layers.clone();
        layers[0].inputs += extra;
        let mut wider = DenseNet::from_shapes(layers).expect("widening preserves chain");
        let old = self.layers[0];
        {
            let (w_old, b_old) = self.layer(0);
            let (w_new, b_new) = wider.layer_mut(0);
            for i in 0..old.outputs {
                let src = &w_old[i * old.inputs..(i + 1) * old.inputs];
                w_new[i * (old.inputs + extra)..i * (old.inputs + extra) + old.inputs].copy_from_slice(src);
            }
            b_new.copy_from_slice(b_old);
        }
        for k in 1..self.layers.len() {
            let (w_old, b_old) = self.layer(k);
            let (w_new, b_new) = wider.layer_mut(k);
            w_new.copy_from_slice(w_old);
            b_new.copy_from_slice(b_old);
        }
        wider.generation = self.generation + 1;
        *self = wider;
    }

    pub fn manifest(&self) -> NetManifest {
        NetManifest {
            format_version: MANIFEST_VERSION,
            layers: self.layers.clone(),
            param_count: self.params.len(),
        }
    }

    pub fn from_manifest(manifest: &NetManifest, params: &[f64]) -> Result<Self> {
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::FormatVersion {
                found: manifest.format_version,
                expected: MANIFEST_VERSION,
            });
        }
        let mut net = Self::from_shapes(manifest.layers.clone())?;
        if params.len() != net.params.len() || manifest.param_count != net.params.len() {
            return Err(Error::DimensionMismatch {
                context: "manifest parameter count",
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params.copy_from_slice(params);
        Ok(net)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(w: &[f64]) -> Vec<f64> {
    if w.is_empty() {
        return Vec::new();
    }
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Vector-Jacobian product of softmax: given `p = softmax(w)` and `dL/dp`, returns `dL/dw`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - inner)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(param_count: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    /// One bias-corrected Adam update. A non-finite gradient leaves both the
    /// parameters and the optimizer state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                context: "adam step",
                expected: self.m.len(),
                got: grads.len().min(params.len()),
            });
        }
        if !(self.config.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.config.lr)));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
