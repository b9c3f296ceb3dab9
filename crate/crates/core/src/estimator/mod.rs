//! Dual-branch state estimator.
//!
//! The kinesthetic branch encodes the proprioceptive history into an explicit
//! estimate (base velocity, foot forces), a VAE-style latent and a prediction
//! of the next observation. The visuospatial branch fuses the history with two
//! depth frames and a set of memory tokens in a transformer and predicts the
//! surrounding elevation and per-foot local heights.

mod kinesthetic;
mod visuospatial;

pub use kinesthetic::{KinestheticCache, KinestheticGrads, KinestheticModule, KinestheticOutput};
pub use visuospatial::{MemoryState, VisuospatialCache, VisuospatialModule, VisuospatialOutput};

use ndarray::{s, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::netcore::serial::{SerialError, TensorStore};
use crate::netcore::{
    clip_grad_norm, join, kl_to_standard_normal, standard_normal, zero_grad, Adam, AttentionSpec, ConvStackSpec, Mat,
    Module, NetError, Param, RunningNorm,
};
use crate::obs::{privileged_layout, PrivilegedObs, HISTORY_DIM, PROPRIO_DIM};
use crate::simcore::{DepthFrame, DEPTH_H, DEPTH_W};
use crate::simcore::{compute_foot_positions, LegGeometry};
use crate::simcore::RobotState;
use crate::terrain::{HeightField, SCAN_CLIP, SCAN_LEN};

pub const EXPLICIT_DIM: usize = 11;
pub const KIN_LATENT_DIM: usize = 20;
pub const VIS_SCAN_LATENT_DIM: usize = 12;
pub const VIS_FOOT_LATENT_DIM: usize = 8;
/// Kinesthetic partition of the latent bundle: `ê | z`.
pub const KIN_PARTITION: usize = EXPLICIT_DIM + KIN_LATENT_DIM;
/// Visuospatial partition: `z_s | z_F`.
pub const VIS_PARTITION: usize = VIS_SCAN_LATENT_DIM + VIS_FOOT_LATENT_DIM;
pub const LATENT_DIM: usize = KIN_PARTITION + VIS_PARTITION;
pub const SCAN_DIM: usize = SCAN_LEN;
pub const FOOT_GRID: usize = 3;
pub const FOOT_SPACING: f64 = 0.05;
pub const FOOT_DIM: usize = 4 * FOOT_GRID * FOOT_GRID;
pub const VISUAL_TOKENS: usize = 16;
/// Contact forces enter the explicit target in units of 100 N.
pub const FORCE_SCALE: f64 = 0.01;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EstimatorError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("estimator loss is not finite")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub kl: f64,
    pub explicit: f64,
    pub next_obs: f64,
    pub scan: f64,
    pub foot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl LossWeights {
    pub fn uniform(w: f64) -> Self {
        Self { kl: w, explicit: w, next_obs: w, scan: w, foot: w }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub kin_encoder: Vec<usize>,
    pub kin_decoder: Vec<usize>,
    pub vis_proprio: Vec<usize>,
    pub attention: AttentionSpec,
    pub conv: ConvStackSpec,
    pub memory_tokens: usize,
    pub vis_trunk: usize,
    pub vis_decoder: usize,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub minibatches: usize,
    pub epochs: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            kin_encoder: vec![256, 128],
            kin_decoder: vec![64],
            vis_proprio: vec![128],
            attention: AttentionSpec::default(),
            conv: ConvStackSpec::default(),
            memory_tokens: 8,
            vis_trunk: 128,
            vis_decoder: 64,
            weights: LossWeights::default(),
            learning_rate: 1e-3,
            max_grad_norm: 1.0,
            minibatches: 4,
            epochs: 1,
        }
    }
}

impl EstimatorConfig {
    /// Narrow networks on a 16x16 depth image, for gradient checks.
    pub fn reduced() -> Self {
        use crate::netcore::ConvLayerSpec;
        Self {
            kin_encoder: vec![6, 5],
            kin_decoder: vec![4],
            vis_proprio: vec![5],
            attention: AttentionSpec { d: 4, heads: 2, layers: 1, ff: 6 },
            conv: ConvStackSpec {
                in_channels: 2,
                in_h: 16,
                in_w: 16,
                layers: vec![
                    ConvLayerSpec { channels: 3, kernel: 2, stride: 2 },
                    ConvLayerSpec { channels: 4, kernel: 2, stride: 2 },
                ],
            },
            memory_tokens: 2,
            vis_trunk: 6,
            vis_decoder: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        self.attention.validate()?;
        self.conv.validate()?;
        if self.conv.token_width() != self.attention.d {
            return Err(NetError::Spec(format!(
                "conv token width {} differs from attention width {}",
                self.conv.token_width(),
                self.attention.d
            )));
        }
        if self.memory_tokens == 0 || self.vis_trunk == 0 || self.vis_decoder == 0 || self.kin_encoder.is_empty() {
            return Err(NetError::Spec("estimator widths must be positive".into()));
        }
        if self.minibatches == 0 || self.epochs == 0 || !(self.learning_rate > 0.0) {
            return Err(NetError::Spec("estimator optimiser settings must be positive".into()));
        }
        let w = self.weights;
        if [w.kl, w.explicit, w.next_obs, w.scan, w.foot].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(NetError::Spec("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Concatenated `[ê | z | z_s | z_F]` per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBundle {
    pub values: Mat,
}

impl LatentBundle {
    pub fn new(explicit: &Mat, z: &Mat, z_s: &Mat, z_f: &Mat) -> Result<Self, NetError> {
        crate::netcore::check_width(explicit, EXPLICIT_DIM, "explicit estimate")?;
        crate::netcore::check_width(z, KIN_LATENT_DIM, "kinesthetic latent")?;
        crate::netcore::check_width(z_s, VIS_SCAN_LATENT_DIM, "scan latent")?;
        crate::netcore::check_width(z_f, VIS_FOOT_LATENT_DIM, "foot latent")?;
        let values = ndarray::concatenate![Axis(1), *explicit, *z, *z_s, *z_f];
        Ok(Self { values })
    }

    pub fn kinesthetic(&self) -> ndarray::ArrayView2<'_, f64> {
        self.values.slice(s![.., ..KIN_PARTITION])
    }

    pub fn visuospatial(&self) -> ndarray::ArrayView2<'_, f64> {
        self.values.slice(s![.., KIN_PARTITION..])
    }

    /// Zeroes `ê` and `z` while keeping the width.
    pub fn zero_kinesthetic(&mut self) {
        self.values.slice_mut(s![.., ..KIN_PARTITION]).fill(0.0);
    }
}

/// Latents cut off from the estimator: the only form the actor accepts.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedLatents(Mat);

impl BlockedLatents {
    /// Wraps stored latent values (e.g. replayed from a rollout buffer).
    pub fn detached(values: Mat) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &Mat {
        &self.0
    }
}

pub fn blocked_latents(bundle: &LatentBundle) -> BlockedLatents {
    BlockedLatents(bundle.values.clone())
}

/// `[v_body (3) | 0.01 * forces (8)]`.
pub fn explicit_target(privileged: &PrivilegedObs) -> [f64; EXPLICIT_DIM] {
    let mut e = [0.0; EXPLICIT_DIM];
    e[..3].copy_from_slice(&privileged.0[privileged_layout::LIN_VEL]);
    for (d, s) in e[3..].iter_mut().zip(&privileged.0[privileged_layout::FORCES]) {
        *d = s * FORCE_SCALE;
    }
    e
}

/// `foot_z - h` on a 3x3 grid (0.05 m spacing, base-yaw aligned) under each
/// foot, feet in FL, FR, RL, RR order, clipped to the scan range.
pub fn foot_height_target(field: &HeightField, state: &RobotState, geom: &LegGeometry) -> [f64; FOOT_DIM] {
    let feet = compute_foot_positions(state, geom);
    let (_, _, yaw) = state.euler();
    let (sn, cs) = yaw.sin_cos();
    let mut out = [0.0; FOOT_DIM];
    let mut k = 0;
    for foot in &feet {
        for i in 0..FOOT_GRID {
            for j in 0..FOOT_GRID {
                let dx = (i as f64 - 1.0) * FOOT_SPACING;
                let dy = (j as f64 - 1.0) * FOOT_SPACING;
                let h = field.height_clamped(foot.x + cs * dx - sn * dy, foot.y + sn * dx + cs * dy);
                out[k] = (foot.z - h).clamp(-SCAN_CLIP, SCAN_CLIP);
                k += 1;
            }
        }
    }
    out
}

/// Depth mapped from `[0.1, 3.0]` m to `[-1, 1]`.
#[inline]
pub fn normalize_depth(d: f32) -> f64 {
    (d as f64 - 1.55) / 1.45
}

/// Channel-last `(current, previous)` network input of length `2 * 64 * 64`.
pub fn depth_input(current: &DepthFrame, previous: &DepthFrame) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * DEPTH_W * DEPTH_H);
    for (c, p) in current.pixels().iter().zip(previous.pixels()) {
        out.push(normalize_depth(*c));
        out.push(normalize_depth(*p));
    }
    out
}

/// Per-term values (unweighted) and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub explicit: f64,
    pub next_obs: f64,
    pub scan: f64,
    pub foot: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct KinTargets {
    pub explicit: Mat,
    /// Normalized next proprio observation.
    pub next_obs: Mat,
}

#[derive(Debug, Clone)]
pub struct VisTargets {
    pub scan: Mat,
    pub foot: Mat,
}

#[derive(Debug, Clone)]
pub struct VisGrads {
    pub scan: Mat,
    pub foot: Mat,
}

#[derive(Debug, Clone)]
pub struct EstimatorLoss {
    pub breakdown: LossBreakdown,
    pub kin: KinestheticGrads,
    pub vis: VisGrads,
}

fn check_same(a: &Mat, b: &Mat, what: &'static str) -> Result<(), NetError> {
    if a.dim() != b.dim() {
        let got = if a.nrows() != b.nrows() { b.nrows() } else { b.ncols() };
        let expected = if a.nrows() != b.nrows() { a.nrows() } else { a.ncols() };
        return Err(NetError::Shape { what, expected, got });
    }
    Ok(())
}

fn mse(pred: &Mat, target: &Mat) -> (f64, Mat) {
    let n = pred.len().max(1) as f64;
    let diff = pred - target;
    let v = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (v, diff * (2.0 / n))
}

fn l1(pred: &Mat, target: &Mat) -> (f64, Mat) {
    let n = pred.len().max(1) as f64;
    let diff = pred - target;
    let v = diff.iter().map(|d| d.abs()).sum::<f64>() / n;
    let g = diff.mapv(|d| if d > 0.0 { 1.0 / n } else if d < 0.0 { -1.0 / n } else { 0.0 });
    (v, g)
}

fn row_mean_scale(m: &Mat) -> f64 {
    1.0 / m.nrows().max(1) as f64
}

/// Weighted sum of the KL of `q(z|history)` to `N(0, I)`, the MSE of `ê`
/// and `ô_{t+1}`, and the mean absolute errors of `ŝ` and `F̂`. Each term is
/// a mean over the rows of its own batch (kinesthetic and visuospatial batches
/// may differ in size). Returns the gradients w.r.t. every output.
pub fn estimator_loss(
    kin: &KinestheticOutput,
    kin_targets: &KinTargets,
    vis: &VisuospatialOutput,
    vis_targets: &VisTargets,
    weights: &LossWeights,
) -> Result<EstimatorLoss, NetError> {
    check_same(&kin.explicit, &kin_targets.explicit, "explicit target")?;
    check_same(&kin.next_obs, &kin_targets.next_obs, "next observation target")?;
    check_same(&vis.scan, &vis_targets.scan, "scan target")?;
    check_same(&vis.foot, &vis_targets.foot, "foot height target")?;
    let inv_b = row_mean_scale(&kin.explicit);
    let kl = kl_to_standard_normal(&kin.dist).iter().sum::<f64>() * inv_b;
    let (explicit, g_e) = mse(&kin.explicit, &kin_targets.explicit);
    let (next_obs, g_o) = mse(&kin.next_obs, &kin_targets.next_obs);
    let (scan, g_s) = l1(&vis.scan, &vis_targets.scan);
    let (foot, g_f) = l1(&vis.foot, &vis_targets.foot);
    let total = weights.kl * kl
        + weights.explicit * explicit
        + weights.next_obs * next_obs
        + weights.scan * scan
        + weights.foot * foot;
    let d_mu = &kin.dist.mean * (weights.kl * inv_b);
    let d_log_std = kin.dist.log_std.mapv(|l| ((2.0 * l).exp() - 1.0) * weights.kl * inv_b);
    Ok(EstimatorLoss {
        breakdown: LossBreakdown { kl, explicit, next_obs, scan, foot, total },
        kin: KinestheticGrads {
            explicit: g_e * weights.explicit,
            mu: d_mu,
            log_std: d_log_std,
            next_obs: g_o * weights.next_obs,
        },
        vis: VisGrads { scan: g_s * weights.scan, foot: g_f * weights.foot },
    })
}

/// Both branches plus the shared proprio normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimator {
    pub config: EstimatorConfig,
    pub kin: KinestheticModule,
    pub vis: VisuospatialModule,
    pub norm: RunningNorm,
}

impl Estimator {
    pub fn new<R: Rng + ?Sized>(config: EstimatorConfig, rng: &mut R) -> Result<Self, NetError> {
        config.validate()?;
        let kin = KinestheticModule::new(&config, rng)?;
        let vis = VisuospatialModule::new(&config, rng)?;
        Ok(Self { config, kin, vis, norm: RunningNorm::new(PROPRIO_DIM) })
    }

    pub fn depth_input_len(&self) -> usize {
        self.config.conv.input_len()
    }

    pub fn normalize_history(&self, history: &Mat) -> Result<Mat, NetError> {
        crate::netcore::check_width(history, HISTORY_DIM, "proprio history")?;
        Ok(self.norm.normalize(history))
    }

    /// `eps = None` gives `z = μ`.
    pub fn kinesthetic_forward(&self, history: &Mat, eps: Option<&Mat>) -> Result<KinestheticOutput, NetError> {
        self.kin.forward(&self.normalize_history(history)?, eps)
    }

    pub fn visuospatial_forward(
        &self,
        history: &Mat,
        depth: &Mat,
        memory: &[&MemoryState],
    ) -> Result<(VisuospatialOutput, Vec<MemoryState>), NetError> {
        let (tokens, initial) = self.vis.stack_memory(memory)?;
        let (out, next) = self.vis.forward(&self.normalize_history(history)?, depth, &tokens, &initial)?;
        Ok((out, self.vis.split_memory(&next)))
    }

    pub fn save(&self, store: &mut TensorStore, prefix: &str) {
        store.insert_module(prefix, self);
        store.insert(&join(prefix, "norm.mean"), vec![PROPRIO_DIM], &self.norm.mean);
        store.insert(&join(prefix, "norm.var"), vec![PROPRIO_DIM], &self.norm.var);
        store.insert(&join(prefix, "norm.count"), vec![1], &[self.norm.count]);
    }

    pub fn load(&mut self, store: &TensorStore, prefix: &str) -> Result<(), SerialError> {
        store.load_module(prefix, self)?;
        self.norm.mean = store.read(&join(prefix, "norm.mean"), &[PROPRIO_DIM])?;
        self.norm.var = store.read(&join(prefix, "norm.var"), &[PROPRIO_DIM])?;
        self.norm.count = store.read(&join(prefix, "norm.count"), &[1])?[0];
        Ok(())
    }
}

impl Module for Estimator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.kin.visit(&join(prefix, "kin"), f);
        self.vis.visit(&join(prefix, "vis"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.kin.visit_mut(&join(prefix, "kin"), f);
        self.vis.visit_mut(&join(prefix, "vis"), f);
    }
}

/// Kinesthetic training samples collected at every policy step.
#[derive(Debug, Clone)]
pub struct KinBatch {
    /// Raw (unnormalized) histories.
    pub history: Mat,
    pub explicit: Mat,
    /// Raw next proprio observations.
    pub next_proprio: Mat,
}

/// Visuospatial training samples collected at every depth refresh.
#[derive(Debug, Clone)]
pub struct VisBatch {
    pub history: Mat,
    pub depth: Mat,
    /// `memory_tokens` rows per sample: the (detached) memory fed in.
    pub memory: Mat,
    pub initial: Vec<bool>,
    pub scan: Mat,
    pub foot: Mat,
}

impl VisBatch {
    pub fn len(&self) -> usize {
        self.history.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub updates: usize,
    pub skipped: usize,
}

fn gather_rows(m: &Mat, idx: &[usize], rows_per: usize) -> Mat {
    let mut out = Mat::zeros((idx.len() * rows_per, m.ncols()));
    for (k, &i) in idx.iter().enumerate() {
        out.slice_mut(s![k * rows_per..(k + 1) * rows_per, ..]).assign(&m.slice(s![i * rows_per..(i + 1) * rows_per, ..]));
    }
    out
}

/// Optimiser for the estimator alone; actor and critic have their own.
#[derive(Debug, Clone)]
pub struct EstimatorTrainer {
    pub adam: Adam,
}

impl EstimatorTrainer {
    pub fn new(config: &EstimatorConfig) -> Self {
        Self { adam: Adam::new(config.learning_rate) }
    }

    /// Loss and parameter gradients on one minibatch (grads are zeroed first).
    pub fn loss_and_grads(
        est: &mut Estimator,
        kin: &KinBatch,
        kin_idx: &[usize],
        vis: &VisBatch,
        vis_idx: &[usize],
        eps: &Mat,
    ) -> Result<LossBreakdown, EstimatorError> {
        zero_grad(est);
        let h = est.normalize_history(&kin.history.select(Axis(0), kin_idx))?;
        let kin_targets = KinTargets {
            explicit: kin.explicit.select(Axis(0), kin_idx),
            next_obs: est.norm.normalize(&kin.next_proprio.select(Axis(0), kin_idx)),
        };
        let (kout, kcache) = est.kin.forward_cached(&h, Some(eps))?;
        let vh = est.normalize_history(&vis.history.select(Axis(0), vis_idx))?;
        let depth = vis.depth.select(Axis(0), vis_idx);
        let memory = gather_rows(&vis.memory, vis_idx, est.config.memory_tokens);
        let initial: Vec<bool> = vis_idx.iter().map(|&i| vis.initial[i]).collect();
        let (vout, _, vcache) = est.vis.forward_cached(&vh, &depth, &memory, &initial)?;
        let vis_targets = VisTargets { scan: vis.scan.select(Axis(0), vis_idx), foot: vis.foot.select(Axis(0), vis_idx) };
        let loss = estimator_loss(&kout, &kin_targets, &vout, &vis_targets, &est.config.weights)?;
        if !loss.breakdown.total.is_finite() {
            return Err(EstimatorError::NonFinite);
        }
        est.kin.backward(&kcache, &loss.kin);
        est.vis.backward(&vcache, &loss.vis.scan, &loss.vis.foot);
        Ok(loss.breakdown)
    }

    /// Epochs of shuffled minibatch updates. A minibatch with a non-finite
    /// loss is skipped (parameters untouched) and counted.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        est: &mut Estimator,
        kin: &KinBatch,
        vis: &VisBatch,
        rng: &mut R,
    ) -> Result<EstimatorStats, EstimatorError> {
        let cfg = est.config.clone();
        let mut stats = EstimatorStats::default();
        let mut kin_idx: Vec<usize> = (0..kin.history.nrows()).collect();
        let mut vis_idx: Vec<usize> = (0..vis.len()).collect();
        let mb = cfg.minibatches.min(kin_idx.len()).min(vis_idx.len()).max(1);
        if kin_idx.is_empty() || vis_idx.is_empty() {
            return Ok(stats);
        }
        for _ in 0..cfg.epochs {
            kin_idx.shuffle(rng);
            vis_idx.shuffle(rng);
            for k in 0..mb {
                let ks = &kin_idx[k * kin_idx.len() / mb..(k + 1) * kin_idx.len() / mb];
                let vs = &vis_idx[k * vis_idx.len() / mb..(k + 1) * vis_idx.len() / mb];
                let eps = standard_normal(ks.len(), KIN_LATENT_DIM, rng);
                match Self::loss_and_grads(est, kin, ks, vis, vs, &eps) {
                    Ok(b) => {
                        let norm = clip_grad_norm(&mut [est as &mut dyn Module], cfg.max_grad_norm);
                        if !norm.is_finite() {
                            zero_grad(est);
                            stats.skipped += 1;
                            continue;
                        }
                        self.adam.step(&mut [est as &mut dyn Module]);
                        stats.updates += 1;
                        stats.grad_norm += norm;
                        let l = &mut stats.loss;
                        l.kl += b.kl;
                        l.explicit += b.explicit;
                        l.next_obs += b.next_obs;
                        l.scan += b.scan;
                        l.foot += b.foot;
                        l.total += b.total;
                    }
                    Err(EstimatorError::NonFinite) => {
                        zero_grad(est);
                        stats.skipped += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        if stats.updates > 0 {
            let n = stats.updates as f64;
            let l = &mut stats.loss;
            for v in [&mut l.kl, &mut l.explicit, &mut l.next_obs, &mut l.scan, &mut l.foot, &mut l.total] {
                *v /= n;
            }
            stats.grad_norm /= n;
        }
        Ok(stats)
    }
}

#[cfg(test)]
mod tests;
