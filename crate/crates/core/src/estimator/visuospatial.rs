use ndarray::{s, Axis};
use rand::Rng;

use super::{EstimatorConfig, FOOT_DIM, SCAN_DIM, VISUAL_TOKENS, VIS_FOOT_LATENT_DIM, VIS_SCAN_LATENT_DIM};
use crate::netcore::{
    check_width, join, Activation, ConvStack, ConvStackCache, DenseStackSpec, Linear, Mat, MemTransformer,
    MemTransformerCache, Mlp, MlpCache, Module, NetError, Param,
};
use crate::obs::HISTORY_DIM;

/// Per-environment memory tokens. `initial` selects the learned initial
/// tokens instead of `tokens` (set at episode start).
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    pub tokens: Mat,
    pub initial: bool,
}

impl MemoryState {
    pub fn reset(count: usize, width: usize) -> Self {
        Self { tokens: Mat::zeros((count, width)), initial: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisuospatialOutput {
    pub scan: Mat,
    pub foot: Mat,
    pub z_s: Mat,
    pub z_f: Mat,
}

#[derive(Debug, Clone)]
pub struct VisuospatialCache {
    p_cache: MlpCache,
    c_cache: ConvStackCache,
    t_cache: MemTransformerCache,
    initial: Vec<bool>,
    trunk_out: Mat,
    trunk_cache: MlpCache,
    scan_cache: MlpCache,
    foot_cache: MlpCache,
}

/// One proprio token, 16 depth tokens (with learned positional encodings) and
/// the memory tokens through the memory transformer. The readout concatenates
/// the proprio-token output with the mean visual-token output.
#[derive(Debug, Clone, PartialEq)]
pub struct VisuospatialModule {
    pub proprio: Mlp,
    pub conv: ConvStack,
    pub pos_enc: Param,
    pub transformer: MemTransformer,
    pub init_memory: Param,
    pub trunk: Mlp,
    pub zs_head: Linear,
    pub zf_head: Linear,
    pub scan_decoder: Mlp,
    pub foot_decoder: Mlp,
}

impl VisuospatialModule {
    pub fn new<R: Rng + ?Sized>(cfg: &EstimatorConfig, rng: &mut R) -> Result<Self, NetError> {
        let d = cfg.attention.d;
        let mut pw = cfg.vis_proprio.clone();
        pw.push(d);
        let proprio = Mlp::new(DenseStackSpec::new(HISTORY_DIM, &pw, Activation::Identity), 1.0, rng)?;
        let conv = ConvStack::new(cfg.conv.clone(), rng)?;
        let pos_enc = Param::new(crate::netcore::standard_normal(VISUAL_TOKENS, d, rng) * 0.02);
        let transformer = MemTransformer::new(cfg.attention, rng)?;
        let init_memory = Param::new(crate::netcore::standard_normal(cfg.memory_tokens, d, rng) * 0.02);
        let trunk = Mlp::new(DenseStackSpec::new(2 * d, &[cfg.vis_trunk], Activation::Elu), 2f64.sqrt(), rng)?;
        let dec = |latent: usize, out: usize, rng: &mut R| {
            Mlp::new(DenseStackSpec::new(latent, &[cfg.vis_decoder, out], Activation::Identity), 1.0, rng)
        };
        let scan_decoder = dec(VIS_SCAN_LATENT_DIM, SCAN_DIM, rng)?;
        let foot_decoder = dec(VIS_FOOT_LATENT_DIM, FOOT_DIM, rng)?;
        Ok(Self {
            proprio,
            conv,
            pos_enc,
            transformer,
            init_memory,
            trunk,
            zs_head: Linear::new(cfg.vis_trunk, VIS_SCAN_LATENT_DIM, 0.1, rng),
            zf_head: Linear::new(cfg.vis_trunk, VIS_FOOT_LATENT_DIM, 0.1, rng),
            scan_decoder,
            foot_decoder,
        })
    }

    pub fn width(&self) -> usize {
        self.transformer.spec.d
    }

    pub fn memory_tokens(&self) -> usize {
        self.init_memory.value.nrows()
    }

    pub fn reset_memory(&self) -> MemoryState {
        MemoryState::reset(self.memory_tokens(), self.width())
    }

    pub fn stack_memory(&self, memory: &[&MemoryState]) -> Result<(Mat, Vec<bool>), NetError> {
        let (m, d) = (self.memory_tokens(), self.width());
        let mut tokens = Mat::zeros((memory.len() * m, d));
        for (b, mem) in memory.iter().enumerate() {
            if mem.tokens.dim() != (m, d) {
                return Err(NetError::Shape { what: "memory tokens", expected: m, got: mem.tokens.nrows() });
            }
            tokens.slice_mut(s![b * m..(b + 1) * m, ..]).assign(&mem.tokens);
        }
        Ok((tokens, memory.iter().map(|m| m.initial).collect()))
    }

    pub fn split_memory(&self, tokens: &Mat) -> Vec<MemoryState> {
        let m = self.memory_tokens();
        (0..tokens.nrows() / m)
            .map(|b| MemoryState { tokens: tokens.slice(s![b * m..(b + 1) * m, ..]).to_owned(), initial: false })
            .collect()
    }

    pub fn forward(
        &self,
        history: &Mat,
        depth: &Mat,
        memory: &Mat,
        initial: &[bool],
    ) -> Result<(VisuospatialOutput, Mat), NetError> {
        let (out, mem, _) = self.forward_cached(history, depth, memory, initial)?;
        Ok((out, mem))
    }

    /// `history`: normalized `(B, 450)`; `depth`: `(B, H*W*2)`; `memory`:
    /// `(B * m, d)`. Returns the outputs and the next memory `(B * m, d)`.
    pub fn forward_cached(
        &self,
        history: &Mat,
        depth: &Mat,
        memory: &Mat,
        initial: &[bool],
    ) -> Result<(VisuospatialOutput, Mat, VisuospatialCache), NetError> {
        let batch = history.nrows();
        let (m, d) = (self.memory_tokens(), self.width());
        if depth.nrows() != batch {
            return Err(NetError::Shape { what: "depth batch", expected: batch, got: depth.nrows() });
        }
        if initial.len() != batch {
            return Err(NetError::Shape { what: "memory flags", expected: batch, got: initial.len() });
        }
        check_width(memory, d, "memory tokens")?;
        if memory.nrows() != batch * m {
            return Err(NetError::Shape { what: "memory rows", expected: batch * m, got: memory.nrows() });
        }
        let (p_tok, p_cache) = self.proprio.forward_cached(history)?;
        let (v_tok, c_cache) = self.conv.forward_cached(depth)?;
        let seq = 1 + VISUAL_TOKENS;
        let mut tokens = Mat::zeros((batch * seq, d));
        let mut mem_in = memory.clone();
        for b in 0..batch {
            tokens.row_mut(b * seq).assign(&p_tok.row(b));
            let mut vis = tokens.slice_mut(s![b * seq + 1..(b + 1) * seq, ..]);
            vis.assign(&v_tok.slice(s![b * VISUAL_TOKENS..(b + 1) * VISUAL_TOKENS, ..]));
            vis += &self.pos_enc.value;
            if initial[b] {
                mem_in.slice_mut(s![b * m..(b + 1) * m, ..]).assign(&self.init_memory.value);
            }
        }
        let (t_out, next_mem, t_cache) = self.transformer.forward_cached(&tokens, &mem_in, seq, m)?;
        let mut read = Mat::zeros((batch, 2 * d));
        for b in 0..batch {
            read.slice_mut(s![b, ..d]).assign(&t_out.row(b * seq));
            let mean = t_out.slice(s![b * seq + 1..(b + 1) * seq, ..]).mean_axis(Axis(0)).expect("visual tokens");
            read.slice_mut(s![b, d..]).assign(&mean);
        }
        let (trunk_out, trunk_cache) = self.trunk.forward_cached(&read)?;
        let z_s = self.zs_head.forward(&trunk_out)?;
        let z_f = self.zf_head.forward(&trunk_out)?;
        let (scan, scan_cache) = self.scan_decoder.forward_cached(&z_s)?;
        let (foot, foot_cache) = self.foot_decoder.forward_cached(&z_f)?;
        let cache = VisuospatialCache {
            p_cache,
            c_cache,
            t_cache,
            initial: initial.to_vec(),
            trunk_out,
            trunk_cache,
            scan_cache,
            foot_cache,
        };
        Ok((VisuospatialOutput { scan, foot, z_s, z_f }, next_mem, cache))
    }

    /// The next memory is detached, so only the head losses flow back.
    pub fn backward(&mut self, cache: &VisuospatialCache, d_scan: &Mat, d_foot: &Mat) {
        let (m, d) = (self.memory_tokens(), self.width());
        let seq = 1 + VISUAL_TOKENS;
        let batch = d_scan.nrows();
        let d_zs = self.scan_decoder.backward(&cache.scan_cache, d_scan);
        let d_zf = self.foot_decoder.backward(&cache.foot_cache, d_foot);
        let mut d_trunk = self.zs_head.backward(&cache.trunk_out, &d_zs);
        d_trunk += &self.zf_head.backward(&cache.trunk_out, &d_zf);
        let d_read = self.trunk.backward(&cache.trunk_cache, &d_trunk);
        let mut d_out = Mat::zeros((batch * seq, d));
        let inv = 1.0 / VISUAL_TOKENS as f64;
        for b in 0..batch {
            d_out.row_mut(b * seq).assign(&d_read.slice(s![b, ..d]));
            let dv = d_read.slice(s![b, d..]).mapv(|v| v * inv);
            for t in 1..seq {
                d_out.row_mut(b * seq + t).assign(&dv);
            }
        }
        let (d_tokens, d_mem) = self.transformer.backward(&cache.t_cache, &d_out, &Mat::zeros((batch * m, d)));
        let mut d_p = Mat::zeros((batch, d));
        let mut d_v = Mat::zeros((batch * VISUAL_TOKENS, d));
        for b in 0..batch {
            d_p.row_mut(b).assign(&d_tokens.row(b * seq));
            let dv = d_tokens.slice(s![b * seq + 1..(b + 1) * seq, ..]);
            d_v.slice_mut(s![b * VISUAL_TOKENS..(b + 1) * VISUAL_TOKENS, ..]).assign(&dv);
            self.pos_enc.grad += &dv;
            if cache.initial[b] {
                self.init_memory.grad += &d_mem.slice(s![b * m..(b + 1) * m, ..]);
            }
        }
        self.proprio.backward(&cache.p_cache, &d_p);
        self.conv.backward(&cache.c_cache, &d_v);
    }
}

impl Module for VisuospatialModule {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.proprio.visit(&join(prefix, "proprio"), f);
        self.conv.visit(&join(prefix, "conv"), f);
        f(&join(prefix, "pos_enc"), &self.pos_enc);
        self.transformer.visit(&join(prefix, "transformer"), f);
        f(&join(prefix, "init_memory"), &self.init_memory);
        self.trunk.visit(&join(prefix, "trunk"), f);
        self.zs_head.visit(&join(prefix, "zs"), f);
        self.zf_head.visit(&join(prefix, "zf"), f);
        self.scan_decoder.visit(&join(prefix, "scan_decoder"), f);
        self.foot_decoder.visit(&join(prefix, "foot_decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.proprio.visit_mut(&join(prefix, "proprio"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
        f(&join(prefix, "pos_enc"), &mut self.pos_enc);
        self.transformer.visit_mut(&join(prefix, "transformer"), f);
        f(&join(prefix, "init_memory"), &mut self.init_memory);
        self.trunk.visit_mut(&join(prefix, "trunk"), f);
        self.zs_head.visit_mut(&join(prefix, "zs"), f);
        self.zf_head.visit_mut(&join(prefix, "zf"), f);
        self.scan_decoder.visit_mut(&join(prefix, "scan_decoder"), f);
        self.foot_decoder.visit_mut(&join(prefix, "foot_decoder"), f);
    }
}
