//! Multi-head self-attention and the memory-augmented pre-LN transformer.

use ndarray::{s, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_width, join, Activation, LayerNorm, LayerNormCache, Linear, Mat, Module, NetError, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionSpec {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
}

impl Default for AttentionSpec {
    fn default() -> Self {
        Self { d: 64, heads: 4, layers: 2, ff: 128 }
    }
}

impl AttentionSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(NetError::Spec(format!("token width {} not divisible by {} heads", self.d, self.heads)));
        }
        if self.layers == 0 || self.ff == 0 {
            return Err(NetError::Spec("attention needs at least one layer and a positive ff width".into()));
        }
        Ok(())
    }
}

/// The key projection has no bias: softmax is invariant to it, so `wk.b`
/// stays zero and is not exposed as a parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// One (L, L) row-stochastic matrix per (sample, head).
    probs: Vec<Mat>,
    ctx: Mat,
    seq: usize,
}

impl AttentionCache {
    pub fn probs(&self) -> &[Mat] {
        &self.probs
    }
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            heads,
            wq: Linear::new(d, d, 1.0, rng),
            wk: Linear::new(d, d, 1.0, rng),
            wv: Linear::new(d, d, 1.0, rng),
            wo: Linear::new(d, d, 1.0, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.input_dim()
    }

    pub fn forward(&self, x: &Mat, seq: usize) -> Result<Mat, NetError> {
        Ok(self.forward_cached(x, seq)?.0)
    }

    /// `x` holds `B * seq` tokens, sample-major. Attention never crosses samples.
    pub fn forward_cached(&self, x: &Mat, seq: usize) -> Result<(Mat, AttentionCache), NetError> {
        let d = self.dim();
        check_width(x, d, "attention input")?;
        if seq == 0 || x.nrows() % seq != 0 {
            return Err(NetError::Shape { what: "attention sequence rows", expected: seq, got: x.nrows() });
        }
        let batch = x.nrows() / seq;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.forward(x)?;
        let k = self.wk.forward(x)?;
        let v = self.wv.forward(x)?;
        let mut ctx = Mat::zeros((x.nrows(), d));
        let mut probs = Vec::with_capacity(batch * self.heads);
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![rows.clone(), cols.clone()]);
                let kh = k.slice(s![rows.clone(), cols.clone()]);
                let vh = v.slice(s![rows.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t()) * scale;
                for mut row in p.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|v| (v - m).exp());
                    let z = row.sum();
                    row.mapv_inplace(|v| v / z);
                }
                ctx.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let y = self.wo.forward(&ctx)?;
        Ok((y, AttentionCache { x: x.clone(), q, k, v, probs, ctx, seq }))
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &Mat) -> Mat {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let seq = cache.seq;
        let batch = cache.x.nrows() / seq;
        let dctx = self.wo.backward(&cache.ctx, dy);
        let mut dq = Mat::zeros(cache.q.raw_dim());
        let mut dk = Mat::zeros(cache.k.raw_dim());
        let mut dv = Mat::zeros(cache.v.raw_dim());
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &cache.probs[b * self.heads + h];
                let dc = dctx.slice(s![rows.clone(), cols.clone()]);
                let qh = cache.q.slice(s![rows.clone(), cols.clone()]);
                let kh = cache.k.slice(s![rows.clone(), cols.clone()]);
                let vh = cache.v.slice(s![rows.clone(), cols.clone()]);
                dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&dc));
                let dp = dc.dot(&vh.t());
                let mut ds = p * &dp;
                let row_dot = ds.sum_axis(Axis(1));
                for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v -= p[(i, j)] * row_dot[i];
                    }
                }
                ds *= scale;
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
                dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
            }
        }
        let mut dx = self.wq.backward(&cache.x, &dq);
        dx += &self.wk.backward(&cache.x, &dk);
        dx += &self.wv.backward(&cache.x, &dv);
        dx
    }
}

impl Module for MultiHeadAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.wq.visit(&join(prefix, "q"), f);
        f(&join(prefix, "k.w"), &self.wk.w);
        self.wv.visit(&join(prefix, "v"), f);
        self.wo.visit(&join(prefix, "o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.wq.visit_mut(&join(prefix, "q"), f);
        f(&join(prefix, "k.w"), &mut self.wk.w);
        self.wv.visit_mut(&join(prefix, "v"), f);
        self.wo.visit_mut(&join(prefix, "o"), f);
    }
}

/// Pre-LN block: `h = x + attn(ln1(x))`, `y = h + ff(ln2(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    f_in: Mat,
    pre1: Mat,
    g: Mat,
}

impl TransformerBlock {
    fn new<R: Rng + ?Sized>(spec: &AttentionSpec, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(spec.d),
            attn: MultiHeadAttention::new(spec.d, spec.heads, rng),
            ln2: LayerNorm::new(spec.d),
            ff1: Linear::new(spec.d, spec.ff, 2f64.sqrt(), rng),
            ff2: Linear::new(spec.ff, spec.d, 1.0, rng),
        }
    }

    fn forward_cached(&self, x: &Mat, seq: usize) -> Result<(Mat, BlockCache), NetError> {
        let (a_in, ln1) = self.ln1.forward_cached(x)?;
        let (a, attn) = self.attn.forward_cached(&a_in, seq)?;
        let h = x + &a;
        let (f_in, ln2) = self.ln2.forward_cached(&h)?;
        let pre1 = self.ff1.forward(&f_in)?;
        let g = Activation::Elu.apply(&pre1);
        let y = &h + &self.ff2.forward(&g)?;
        Ok((y, BlockCache { ln1, attn, ln2, f_in, pre1, g }))
    }

    fn backward(&mut self, c: &BlockCache, dy: &Mat) -> Mat {
        let dg = self.ff2.backward(&c.g, dy);
        let dpre = Activation::Elu.backward(&c.pre1, &dg);
        let df_in = self.ff1.backward(&c.f_in, &dpre);
        let dh = dy + &self.ln2.backward(&c.ln2, &df_in);
        let da_in = self.attn.backward(&c.attn, &dh);
        &dh + &self.ln1.backward(&c.ln1, &da_in)
    }
}

impl Module for TransformerBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.ff1.visit(&join(prefix, "ff1"), f);
        self.ff2.visit(&join(prefix, "ff2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.ff1.visit_mut(&join(prefix, "ff1"), f);
        self.ff2.visit_mut(&join(prefix, "ff2"), f);
    }
}

/// Transformer over `[memory tokens | input tokens]`; the outputs at the
/// memory positions become the next memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MemTransformer {
    pub spec: AttentionSpec,
    pub blocks: Vec<TransformerBlock>,
    pub ln_out: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct MemTransformerCache {
    blocks: Vec<BlockCache>,
    ln_out: LayerNormCache,
    mem: usize,
    tokens: usize,
}

impl MemTransformerCache {
    /// Attention weights of the first layer, one matrix per (sample, head).
    pub fn first_layer_probs(&self) -> &[Mat] {
        self.blocks[0].attn.probs()
    }
}

impl MemTransformer {
    pub fn new<R: Rng + ?Sized>(spec: AttentionSpec, rng: &mut R) -> Result<Self, NetError> {
        spec.validate()?;
        let blocks = (0..spec.layers).map(|_| TransformerBlock::new(&spec, rng)).collect();
        Ok(Self { spec, blocks, ln_out: LayerNorm::new(spec.d) })
    }

    fn assemble(&self, tokens: &Mat, memory: &Mat, lt: usize, m: usize) -> Result<(Mat, usize), NetError> {
        check_width(tokens, self.spec.d, "attention tokens")?;
        check_width(memory, self.spec.d, "memory tokens")?;
        if lt == 0 || tokens.nrows() % lt != 0 {
            return Err(NetError::Shape { what: "token rows", expected: lt, got: tokens.nrows() });
        }
        let batch = tokens.nrows() / lt;
        if memory.nrows() != batch * m {
            return Err(NetError::Shape { what: "memory rows", expected: batch * m, got: memory.nrows() });
        }
        let l = lt + m;
        let mut x = Mat::zeros((batch * l, self.spec.d));
        for b in 0..batch {
            x.slice_mut(s![b * l..b * l + m, ..]).assign(&memory.slice(s![b * m..(b + 1) * m, ..]));
            x.slice_mut(s![b * l + m..(b + 1) * l, ..]).assign(&tokens.slice(s![b * lt..(b + 1) * lt, ..]));
        }
        Ok((x, batch))
    }

    fn split(&self, y: &Mat, batch: usize, lt: usize, m: usize) -> (Mat, Mat) {
        let l = lt + m;
        let mut out = Mat::zeros((batch * lt, self.spec.d));
        let mut mem = Mat::zeros((batch * m, self.spec.d));
        for b in 0..batch {
            mem.slice_mut(s![b * m..(b + 1) * m, ..]).assign(&y.slice(s![b * l..b * l + m, ..]));
            out.slice_mut(s![b * lt..(b + 1) * lt, ..]).assign(&y.slice(s![b * l + m..(b + 1) * l, ..]));
        }
        (out, mem)
    }

    /// `tokens`: `(B * lt, d)`, `memory`: `(B * m, d)`. Returns (token outputs,
    /// updated memory).
    pub fn forward(&self, tokens: &Mat, memory: &Mat, lt: usize, m: usize) -> Result<(Mat, Mat), NetError> {
        let (out, mem, _) = self.forward_cached(tokens, memory, lt, m)?;
        Ok((out, mem))
    }

    pub fn forward_cached(
        &self,
        tokens: &Mat,
        memory: &Mat,
        lt: usize,
        m: usize,
    ) -> Result<(Mat, Mat, MemTransformerCache), NetError> {
        let (mut x, batch) = self.assemble(tokens, memory, lt, m)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, c) = blk.forward_cached(&x, lt + m)?;
            caches.push(c);
            x = y;
        }
        let (y, ln_out) = self.ln_out.forward_cached(&x)?;
        let (out, mem) = self.split(&y, batch, lt, m);
        Ok((out, mem, MemTransformerCache { blocks: caches, ln_out, mem: m, tokens: lt }))
    }

    /// Gradients w.r.t. token outputs and memory outputs in; gradients w.r.t.
    /// input tokens and input memory out.
    pub fn backward(&mut self, cache: &MemTransformerCache, d_out: &Mat, d_mem: &Mat) -> (Mat, Mat) {
        let (m, lt) = (cache.mem, cache.tokens);
        let batch = d_out.nrows() / lt;
        let (mut g, _) = self.assemble(d_out, d_mem, lt, m).expect("gradient shapes follow the forward pass");
        g = self.ln_out.backward(&cache.ln_out, &g);
        for (blk, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = blk.backward(c, &g);
        }
        self.split(&g, batch, lt, m)
    }
}

impl Module for MemTransformer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blk{i}")), f);
        }
        self.ln_out.visit(&join(prefix, "ln_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blk{i}")), f);
        }
        self.ln_out.visit_mut(&join(prefix, "ln_out"), f);
    }
}

pub fn attention_forward(
    net: &MemTransformer,
    tokens: &Mat,
    memory_tokens: &Mat,
    seq_len: usize,
    memory_len: usize,
) -> Result<(Mat, Mat), NetError> {
    net.forward(tokens, memory_tokens, seq_len, memory_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{finite_difference_check, set_flat_params, standard_normal, zero_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(8)
    }

    #[test]
    fn spec_requires_divisible_heads() {
        assert!(AttentionSpec { d: 10, heads: 4, layers: 1, ff: 8 }.validate().is_err());
        assert!(AttentionSpec::default().validate().is_ok());
    }

    #[test]
    fn single_token_identity_value_returns_token() {
        let mut mha = MultiHeadAttention::new(4, 1, &mut rng());
        mha.wq = Linear::zeros(4, 4);
        mha.wk = Linear::zeros(4, 4);
        mha.wv = Linear::identity(4);
        mha.wo = Linear::identity(4);
        let x = ndarray::array![[0.5, -1.0, 2.0, 3.0]];
        let (y, c) = mha.forward_cached(&x, 1).unwrap();
        assert_eq!(y, x);
        assert_eq!(c.probs()[0][(0, 0)], 1.0);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut r = rng();
        let net = MemTransformer::new(AttentionSpec::default(), &mut r).unwrap();
        let tokens = standard_normal(3 * 17, 64, &mut r);
        let mem = standard_normal(3 * 8, 64, &mut r);
        let (_, _, c) = net.forward_cached(&tokens, &mem, 17, 8).unwrap();
        assert_eq!(c.first_layer_probs().len(), 12);
        for p in c.first_layer_probs() {
            assert_eq!(p.dim(), (25, 25));
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn permuting_input_tokens_permutes_outputs() {
        let mut r = rng();
        let net = MemTransformer::new(AttentionSpec { d: 8, heads: 2, layers: 2, ff: 16 }, &mut r).unwrap();
        let tokens = standard_normal(5, 8, &mut r);
        let mem = standard_normal(2, 8, &mut r);
        let perm = [3, 0, 4, 1, 2];
        let mut shuffled = tokens.clone();
        for (i, &p) in perm.iter().enumerate() {
            shuffled.row_mut(i).assign(&tokens.row(p));
        }
        let (a, ma) = net.forward(&tokens, &mem, 5, 2).unwrap();
        let (b, mb) = net.forward(&shuffled, &mem, 5, 2).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for k in 0..8 {
                assert!((b[(i, k)] - a[(p, k)]).abs() < 1e-12);
            }
        }
        assert!((&ma - &mb).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn batch_order_does_not_mix_samples() {
        let mut r = rng();
        let net = MemTransformer::new(AttentionSpec { d: 8, heads: 2, layers: 1, ff: 8 }, &mut r).unwrap();
        let tokens = standard_normal(2 * 3, 8, &mut r);
        let mem = standard_normal(2, 8, &mut r);
        let (both, _) = net.forward(&tokens, &mem, 3, 1).unwrap();
        let (second, _) =
            net.forward(&tokens.slice(s![3..6, ..]).to_owned(), &mem.slice(s![1..2, ..]).to_owned(), 3, 1).unwrap();
        assert_eq!(both.slice(s![3..6, ..]), second);
    }

    #[test]
    fn transformer_gradients_match_finite_differences() {
        let mut r = rng();
        let mut net = MemTransformer::new(AttentionSpec { d: 8, heads: 2, layers: 2, ff: 6 }, &mut r).unwrap();
        // perturb layer-norm affine terms away from their identity init
        let mut flat = crate::netcore::flatten_params(&net);
        for v in flat.iter_mut() {
            *v += 0.1 * r.random_range(-1.0..1.0);
        }
        set_flat_params(&mut net, &flat);
        let tokens = standard_normal(2 * 3, 8, &mut r);
        let mem = standard_normal(2 * 2, 8, &mut r);
        let wt = standard_normal(6, 8, &mut r);
        let wm = standard_normal(4, 8, &mut r);
        let worst = finite_difference_check(&mut net, 1e-6, |net, grad| {
            if grad {
                let (o, m, c) = net.forward_cached(&tokens, &mem, 3, 2).unwrap();
                net.backward(&c, &wt, &wm);
                (&o * &wt).sum() + (&m * &wm).sum()
            } else {
                let (o, m) = net.forward(&tokens, &mem, 3, 2).unwrap();
                (&o * &wt).sum() + (&m * &wm).sum()
            }
        });
        assert!(worst < 1e-4, "{worst}");
        zero_grad(&mut net);
        let (_, _, c) = net.forward_cached(&tokens, &mem, 3, 2).unwrap();
        let (dt, dm) = net.backward(&c, &wt, &wm);
        let f = |t: &Mat, m: &Mat| {
            let (o, mm) = net.forward(t, m, 3, 2).unwrap();
            (&o * &wt).sum() + (&mm * &wm).sum()
        };
        for (i, j) in [(0, 0), (4, 7)] {
            let mut tp = tokens.clone();
            tp[(i, j)] += 1e-6;
            let mut tm = tokens.clone();
            tm[(i, j)] -= 1e-6;
            let num = (f(&tp, &mem) - f(&tm, &mem)) / 2e-6;
            assert!((num - dt[(i, j)]).abs() < 1e-6 * num.abs().max(1.0));
            let mut mp = mem.clone();
            mp[(i % 4, j)] += 1e-6;
            let mut mm = mem.clone();
            mm[(i % 4, j)] -= 1e-6;
            let num = (f(&tokens, &mp) - f(&tokens, &mm)) / 2e-6;
            assert!((num - dm[(i % 4, j)]).abs() < 1e-6 * num.abs().max(1.0));
        }
    }
}
