//! Small fixed-architecture network toolkit: batched dense, convolutional,
//! layer-norm and attention layers with hand-written backward passes, a
//! diagonal Gaussian, Adam and parameter (de)serialisation.
//!
//! Every batch is a row-major `Array2<f64>` with one sample (or one token) per
//! row. Layers are pure in the forward direction; training variants return a
//! cache that the matching `backward` consumes, accumulating into `Param::grad`.

mod attention;
mod conv;
pub mod serial;

pub use attention::{attention_forward, AttentionSpec, MemTransformer, MemTransformerCache, MultiHeadAttention};
pub use conv::{conv_forward, ConvLayerSpec, ConvStack, ConvStackCache, ConvStackSpec};

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NetError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("invalid network spec: {0}")]
    Spec(String),
}

pub(crate) fn check_width(x: &Mat, expected: usize, what: &'static str) -> Result<(), NetError> {
    if x.ncols() != expected {
        return Err(NetError::Shape { what, expected, got: x.ncols() });
    }
    Ok(())
}

/// A trainable tensor (stored as a matrix) with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Mat,
    pub grad: Mat,
}

impl Param {
    pub fn new(value: Mat) -> Self {
        let grad = Mat::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Mat::zeros((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything owning parameters. Visitation order is fixed and defines the
/// layout used by the optimiser and the checkpoint.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zero_grad(m: &mut dyn Module) {
    m.visit_mut("", &mut |_, p| p.grad.fill(0.0));
}

pub fn param_count(m: &dyn Module) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, p| n += p.len());
    n
}

pub fn flatten_params(m: &dyn Module) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit("", &mut |_, p| out.extend(p.value.iter().copied()));
    out
}

pub fn flatten_grads(m: &dyn Module) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit("", &mut |_, p| out.extend(p.grad.iter().copied()));
    out
}

pub fn set_flat_params(m: &mut dyn Module, values: &[f64]) {
    let mut k = 0;
    m.visit_mut("", &mut |_, p| {
        for v in p.value.iter_mut() {
            *v = values[k];
            k += 1;
        }
    });
    assert_eq!(k, values.len(), "flat parameter length mismatch");
}

/// Worst relative error between analytic and central-difference gradients
/// (fourth-order stencil, step `h`) over every parameter of `module`.
///
/// `loss(module, true)` must return the loss and accumulate its gradient into
/// the (already zeroed) parameter grads; `loss(module, false)` only evaluates.
/// Relative error is `|a - n| / max(|a| + |n|, 1e-6)`.
pub fn finite_difference_check<M: Module>(module: &mut M, h: f64, mut loss: impl FnMut(&mut M, bool) -> f64) -> f64 {
    zero_grad(module);
    loss(module, true);
    let analytic = flatten_grads(module);
    let base = flatten_params(module);
    let mut worst: f64 = 0.0;
    let mut p = base.clone();
    let mut eval = |module: &mut M, p: &mut Vec<f64>, i: usize, x: f64| {
        p[i] = x;
        set_flat_params(module, p);
        loss(module, false)
    };
    for i in 0..base.len() {
        let x = base[i];
        let f2 = eval(module, &mut p, i, x + 2.0 * h);
        let f1 = eval(module, &mut p, i, x + h);
        let m1 = eval(module, &mut p, i, x - h);
        let m2 = eval(module, &mut p, i, x - 2.0 * h);
        p[i] = x;
        let num = (8.0 * (f1 - m1) - (f2 - m2)) / (12.0 * h);
        let rel = (num - analytic[i]).abs() / (num.abs() + analytic[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    set_flat_params(module, &base);
    worst
}

pub fn grad_norm(modules: &[&dyn Module]) -> f64 {
    let mut s = 0.0;
    for m in modules {
        m.visit("", &mut |_, p| s += p.grad.iter().map(|g| g * g).sum::<f64>());
    }
    s.sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(modules: &mut [&mut dyn Module], max_norm: f64) -> f64 {
    let norm = grad_norm(&modules.iter().map(|m| &**m as &dyn Module).collect::<Vec<_>>());
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / (norm + 1e-6);
        for m in modules.iter_mut() {
            m.visit_mut("", &mut |_, p| p.grad.mapv_inplace(|g| g * scale));
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Elu,
}

impl Activation {
    pub fn apply(self, x: &Mat) -> Mat {
        match self {
            Activation::Identity => x.clone(),
            Activation::Elu => x.mapv(|v| if v > 0.0 { v } else { v.exp_m1() }),
        }
    }

    /// Gradient through the activation given its pre-activation input.
    pub fn backward(self, pre: &Mat, dy: &Mat) -> Mat {
        match self {
            Activation::Identity => dy.clone(),
            Activation::Elu => {
                let mut dx = dy.clone();
                ndarray::Zip::from(&mut dx).and(pre).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d *= x.exp();
                    }
                });
                dx
            }
        }
    }
}

/// Orthogonal matrix (rows x cols) scaled by `gain`.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Mat {
    let (n, k) = (rows.max(cols), rows.min(cols));
    let a = nalgebra::DMatrix::<f64>::from_fn(n, k, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let q = qr.q();
    let r = qr.r();
    let mut out = Mat::zeros((rows, cols));
    for i in 0..n {
        for j in 0..k {
            // sign fix makes the draw uniform over orthogonal matrices
            let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
            let v = q[(i, j)] * s * gain;
            if rows >= cols {
                out[(i, j)] = v;
            } else {
                out[(j, i)] = v;
            }
        }
    }
    out
}

/// Affine layer `y = x W + b` with `W` of shape (in, out).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        Self { w: Param::new(orthogonal(input, output, gain, rng)), b: Param::zeros(1, output) }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { w: Param::zeros(input, output), b: Param::zeros(1, output) }
    }

    pub fn identity(n: usize) -> Self {
        Self { w: Param::new(Mat::eye(n)), b: Param::zeros(1, n) }
    }

    pub fn input_dim(&self) -> usize {
        self.w.value.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.value.ncols()
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat, NetError> {
        check_width(x, self.input_dim(), "linear input")?;
        let mut y = x.dot(&self.w.value);
        y += &self.b.value;
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Mat, dy: &Mat) -> Mat {
        self.w.grad += &x.t().dot(dy);
        self.b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.value.t())
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseStackSpec {
    pub input: usize,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub output_activation: Activation,
}

impl DenseStackSpec {
    pub fn new(input: usize, widths: &[usize], output_activation: Activation) -> Self {
        Self { input, widths: widths.to_vec(), activation: Activation::Elu, output_activation }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.widths.is_empty() {
            return Err(NetError::Spec("dense stack needs at least one layer".into()));
        }
        if self.input == 0 || self.widths.contains(&0) {
            return Err(NetError::Spec("dense widths must be positive".into()));
        }
        Ok(())
    }

    pub fn output(&self) -> usize {
        *self.widths.last().unwrap_or(&self.input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: DenseStackSpec,
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Mat>,
    pre: Vec<Mat>,
}

impl Mlp {
    /// Hidden layers use gain sqrt(2); the output layer uses `output_gain`.
    pub fn new<R: Rng + ?Sized>(spec: DenseStackSpec, output_gain: f64, rng: &mut R) -> Result<Self, NetError> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.widths.len());
        let mut prev = spec.input;
        for (i, &w) in spec.widths.iter().enumerate() {
            let gain = if i + 1 == spec.widths.len() { output_gain } else { 2f64.sqrt() };
            layers.push(Linear::new(prev, w, gain, rng));
            prev = w;
        }
        Ok(Self { spec, layers })
    }

    pub fn from_layers(spec: DenseStackSpec, layers: Vec<Linear>) -> Result<Self, NetError> {
        spec.validate()?;
        let mut prev = spec.input;
        for (l, &w) in layers.iter().zip(&spec.widths) {
            if l.input_dim() != prev || l.output_dim() != w {
                return Err(NetError::Spec("layer shapes disagree with spec".into()));
            }
            prev = w;
        }
        if layers.len() != spec.widths.len() {
            return Err(NetError::Spec("layer count disagrees with spec".into()));
        }
        Ok(Self { spec, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output()
    }

    fn act(&self, i: usize) -> Activation {
        if i + 1 == self.layers.len() {
            self.spec.output_activation
        } else {
            self.spec.activation
        }
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat, NetError> {
        check_width(x, self.input_dim(), "dense stack input")?;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = self.act(i).apply(&l.forward(&h)?);
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Mat) -> Result<(Mat, MlpCache), NetError> {
        check_width(x, self.input_dim(), "dense stack input")?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.forward(&h)?;
            let next = self.act(i).apply(&z);
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        Ok((h, MlpCache { inputs, pre }))
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: &Mat) -> Mat {
        let mut g = dy.clone();
        for i in (0..self.layers.len()).rev() {
            let act = self.act(i);
            let dz = act.backward(&cache.pre[i], &g);
            g = self.layers[i].backward(&cache.inputs[i], &dz);
        }
        g
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("l{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("l{i}")), f);
        }
    }
}

pub fn dense_forward(net: &Mlp, input: &Mat) -> Result<Mat, NetError> {
    net.forward(input)
}

/// Per-row layer normalisation with learned gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self { gamma: Param::new(Mat::ones((1, d))), beta: Param::zeros(1, d), eps: 1e-5 }
    }

    pub fn dim(&self) -> usize {
        self.gamma.value.ncols()
    }

    fn normalise(&self, x: &Mat) -> (Mat, Vec<f64>) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + self.eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv.push(is);
        }
        (xhat, inv)
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat, NetError> {
        check_width(x, self.dim(), "layer norm input")?;
        let (mut y, _) = self.normalise(x);
        y *= &self.gamma.value;
        y += &self.beta.value;
        Ok(y)
    }

    pub fn forward_cached(&self, x: &Mat) -> Result<(Mat, LayerNormCache), NetError> {
        check_width(x, self.dim(), "layer norm input")?;
        let (xhat, inv_std) = self.normalise(x);
        let mut y = &xhat * &self.gamma.value;
        y += &self.beta.value;
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Mat) -> Mat {
        self.gamma.grad += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gamma.value;
        let d = dy.ncols() as f64;
        let mut dx = Mat::zeros(dy.raw_dim());
        for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
            let g = dxhat.row(r);
            let xh = cache.xhat.row(r);
            let s1 = g.sum();
            let s2 = g.dot(&xh);
            let is = cache.inv_std[r];
            for c in 0..out.len() {
                out[c] = is / d * (d * g[c] - s1 - xh[c] * s2);
            }
        }
        dx
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

pub const LOG_STD_MIN: f64 = -6.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Batched diagonal Gaussian; `log_std` is already clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Mat,
    pub log_std: Mat,
}

impl DiagGaussian {
    pub fn new(mean: Mat, log_std: Mat) -> Self {
        let log_std = log_std.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Self { mean, log_std }
    }

    pub fn std(&self) -> Mat {
        self.log_std.mapv(f64::exp)
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }
}

/// `z = mu + sigma * eps`.
pub fn reparameterize(g: &DiagGaussian, eps: &Mat) -> Mat {
    &g.mean + &(&g.std() * eps)
}

/// Per-row `0.5 * sum(mu^2 + sigma^2 - 1 - 2 ln sigma)`.
pub fn kl_to_standard_normal(g: &DiagGaussian) -> Vec<f64> {
    g.mean
        .rows()
        .into_iter()
        .zip(g.log_std.rows())
        .map(|(m, ls)| {
            0.5 * m.iter().zip(ls.iter()).map(|(&mu, &l)| mu * mu + (2.0 * l).exp() - 1.0 - 2.0 * l).sum::<f64>()
        })
        .collect()
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam keyed by parameter visitation order across the given modules.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub config: AdamConfig,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, config: AdamConfig::default(), t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, modules: &mut [&mut dyn Module]) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let lr = self.lr;
        let mut k = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        for module in modules.iter_mut() {
            module.visit_mut("", &mut |_, p| {
                if ms.len() <= k {
                    ms.push(Mat::zeros(p.value.raw_dim()));
                    vs.push(Mat::zeros(p.value.raw_dim()));
                }
                let (m, v) = (&mut ms[k], &mut vs[k]);
                ndarray::Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|w, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
                k += 1;
            });
        }
    }
}

/// Running per-feature mean/variance (batched Welford merge). Frozen
/// statistics are what a checkpoint stores.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
    pub clip: f64,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim], count: 0.0, clip: 5.0 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, x: &Mat) {
        let n = x.nrows() as f64;
        if n == 0.0 {
            return;
        }
        let bm = x.mean_axis(Axis(0)).expect("non-empty batch");
        let bv = x.var_axis(Axis(0), 0.0);
        let total = self.count + n;
        for j in 0..self.dim() {
            let delta = bm[j] - self.mean[j];
            let m2 = self.var[j] * self.count + bv[j] * n + delta * delta * self.count * n / total;
            self.mean[j] += delta * n / total;
            self.var[j] = m2 / total;
        }
        self.count = total;
    }

    /// `(x - mean) / sqrt(var + 1e-8)` clipped to `±clip`; the row width must be
    /// a multiple of the statistic width (stacked frames share statistics).
    pub fn normalize(&self, x: &Mat) -> Mat {
        let d = self.dim();
        assert_eq!(x.ncols() % d, 0, "normalizer width {d} does not tile {}", x.ncols());
        let inv: Vec<f64> = self.var.iter().map(|v| 1.0 / (v + 1e-8).sqrt()).collect();
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = ((*v - self.mean[j % d]) * inv[j % d]).clamp(-self.clip, self.clip);
            }
        }
        out
    }
}
