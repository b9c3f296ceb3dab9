//! Valid (unpadded) 2-D convolutions on channel-last feature maps.
//!
//! A batch of maps is a `(B, H * W * C)` matrix with index `(y * W + x) * C + c`,
//! so the final 4x4xd map reshapes directly into 16 row-major tokens.

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_width, join, Activation, Mat, Module, NetError, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvStackSpec {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub layers: Vec<ConvLayerSpec>,
}

impl Default for ConvStackSpec {
    fn default() -> Self {
        Self {
            in_channels: 2,
            in_h: 64,
            in_w: 64,
            layers: vec![
                ConvLayerSpec { channels: 16, kernel: 4, stride: 4 },
                ConvLayerSpec { channels: 32, kernel: 2, stride: 2 },
                ConvLayerSpec { channels: 64, kernel: 2, stride: 2 },
            ],
        }
    }
}

impl ConvStackSpec {
    /// Spatial size after every layer.
    pub fn shapes(&self) -> Result<Vec<(usize, usize, usize)>, NetError> {
        let mut out = Vec::with_capacity(self.layers.len());
        let (mut h, mut w) = (self.in_h, self.in_w);
        for l in &self.layers {
            if l.kernel == 0 || l.stride == 0 || l.channels == 0 || l.kernel > h || l.kernel > w {
                return Err(NetError::Spec(format!("invalid conv layer {l:?} on {h}x{w}")));
            }
            h = (h - l.kernel) / l.stride + 1;
            w = (w - l.kernel) / l.stride + 1;
            out.push((h, w, l.channels));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let shapes = self.shapes()?;
        match shapes.last() {
            Some(&(4, 4, _)) => Ok(()),
            other => Err(NetError::Spec(format!("conv stack must end in a 4x4 map, got {other:?}"))),
        }
    }

    pub fn token_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.channels)
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// (kernel * kernel * in_c, out_c), rows ordered (ky, kx, c).
    pub w: Param,
    pub b: Param,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(in_c: usize, in_h: usize, in_w: usize, spec: ConvLayerSpec, rng: &mut R) -> Self {
        let fan_in = spec.kernel * spec.kernel * in_c;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Mat::from_shape_fn((fan_in, spec.channels), |_| rng.random_range(-bound..bound));
        let b = Mat::from_shape_fn((1, spec.channels), |_| rng.random_range(-bound..bound));
        Self {
            in_c,
            out_c: spec.channels,
            kernel: spec.kernel,
            stride: spec.stride,
            in_h,
            in_w,
            out_h: (in_h - spec.kernel) / spec.stride + 1,
            out_w: (in_w - spec.kernel) / spec.stride + 1,
            w: Param::new(w),
            b: Param::new(b),
        }
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col(&self, x: &Mat) -> Mat {
        let (k, s, c) = (self.kernel, self.stride, self.in_c);
        let batch = x.nrows();
        let p = self.positions();
        let mut cols = Mat::zeros((batch * p, k * k * c));
        for b in 0..batch {
            let src = x.row(b);
            let src = src.as_slice().expect("row-major batch");
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let mut dst = cols.row_mut(b * p + oy * self.out_w + ox);
                    let dst = dst.as_slice_mut().expect("row-major cols");
                    for ky in 0..k {
                        let y = oy * s + ky;
                        let start = (y * self.in_w + ox * s) * c;
                        dst[ky * k * c..(ky + 1) * k * c].copy_from_slice(&src[start..start + k * c]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Mat, batch: usize) -> Mat {
        let (k, s, c) = (self.kernel, self.stride, self.in_c);
        let p = self.positions();
        let mut dx = Mat::zeros((batch, self.in_h * self.in_w * c));
        for b in 0..batch {
            let mut dst = dx.row_mut(b);
            let dst = dst.as_slice_mut().expect("row-major batch");
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let src = dcols.row(b * p + oy * self.out_w + ox);
                    let src = src.as_slice().expect("row-major cols");
                    for ky in 0..k {
                        let y = oy * s + ky;
                        let start = (y * self.in_w + ox * s) * c;
                        for (d, v) in dst[start..start + k * c].iter_mut().zip(&src[ky * k * c..(ky + 1) * k * c]) {
                            *d += v;
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output map and the im2col matrix needed by `backward`.
    pub fn forward_cols(&self, x: &Mat) -> Result<(Mat, Mat), NetError> {
        check_width(x, self.in_h * self.in_w * self.in_c, "conv input")?;
        let cols = self.im2col(x);
        let mut y = cols.dot(&self.w.value);
        y += &self.b.value;
        let batch = x.nrows();
        let y = y.into_shape_with_order((batch, self.positions() * self.out_c)).expect("contiguous conv output");
        Ok((y, cols))
    }

    pub fn backward(&mut self, cols: &Mat, dy: &Mat) -> Mat {
        let batch = dy.nrows();
        let dy = dy.to_shape((batch * self.positions(), self.out_c)).expect("conv grad reshape");
        self.w.grad += &cols.t().dot(&dy);
        self.b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dcols = dy.dot(&self.w.value.t());
        self.col2im(&dcols, batch)
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// Convolutions with ELU between layers; the last layer is linear so the
/// tokens are unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub spec: ConvStackSpec,
    pub layers: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct ConvStackCache {
    cols: Vec<Mat>,
    pre: Vec<Mat>,
}

impl ConvStack {
    pub fn new<R: Rng + ?Sized>(spec: ConvStackSpec, rng: &mut R) -> Result<Self, NetError> {
        spec.validate()?;
        let mut layers = Vec::new();
        let (mut c, mut h, mut w) = (spec.in_channels, spec.in_h, spec.in_w);
        for l in &spec.layers {
            let conv = Conv2d::new(c, h, w, *l, rng);
            (c, h, w) = (conv.out_c, conv.out_h, conv.out_w);
            layers.push(conv);
        }
        Ok(Self { spec, layers })
    }

    fn act(&self, i: usize) -> Activation {
        if i + 1 == self.layers.len() {
            Activation::Identity
        } else {
            Activation::Elu
        }
    }

    pub fn token_width(&self) -> usize {
        self.spec.token_width()
    }

    /// `(B, H*W*C)` channel-last input to `(B * 16, d)` tokens.
    pub fn forward(&self, x: &Mat) -> Result<Mat, NetError> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Mat) -> Result<(Mat, ConvStackCache), NetError> {
        check_width(x, self.spec.input_len(), "conv stack input")?;
        let mut h = x.clone();
        let mut cols = Vec::new();
        let mut pre = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let (z, c) = l.forward_cols(&h)?;
            h = self.act(i).apply(&z);
            cols.push(c);
            pre.push(z);
        }
        let batch = x.nrows();
        let d = self.token_width();
        let tokens = h.into_shape_with_order((batch * 16, d)).expect("4x4 token map");
        Ok((tokens, ConvStackCache { cols, pre }))
    }

    /// Takes the gradient w.r.t. the `(B * 16, d)` tokens; returns the input gradient.
    pub fn backward(&mut self, cache: &ConvStackCache, dtokens: &Mat) -> Mat {
        let batch = dtokens.nrows() / 16;
        let mut g = dtokens.to_shape((batch, 16 * self.token_width())).expect("token grad").to_owned();
        for i in (0..self.layers.len()).rev() {
            let dz = self.act(i).backward(&cache.pre[i], &g);
            g = self.layers[i].backward(&cache.cols[i], &dz);
        }
        g
    }
}

impl Module for ConvStack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("c{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("c{i}")), f);
        }
    }
}

pub fn conv_forward(net: &ConvStack, input: &Mat) -> Result<Mat, NetError> {
    net.forward(input)
}
