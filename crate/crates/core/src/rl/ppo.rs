use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_dim, gae, gaussian_entropy, gaussian_log_prob, ActorCritic, RlError, ACTION_DIM};
use crate::netcore::{clip_grad_norm, zero_grad, Adam, Mat, Module};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub learning_rate: f64,
    /// Scale the learning rate to keep the policy KL near `desired_kl`.
    pub adaptive_kl: bool,
    pub desired_kl: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub clip_value_loss: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            epochs: 5,
            minibatches: 4,
            learning_rate: 1e-3,
            adaptive_kl: true,
            desired_kl: 0.01,
            entropy_coef: 0.005,
            value_coef: 1.0,
            max_grad_norm: 1.0,
            clip_value_loss: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.clip > 0.0) {
            return Err("ppo clip must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0 && self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err("gamma and lambda must lie in (0, 1]".into());
        }
        if self.epochs == 0 || self.minibatches == 0 || !(self.learning_rate > 0.0) {
            return Err("ppo epochs, minibatches and learning rate must be positive".into());
        }
        if !(self.max_grad_norm > 0.0) || self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return Err("ppo coefficients must be nonnegative and the grad clip positive".into());
        }
        Ok(())
    }
}

/// Flattened rollout ready for PPO (row = one step of one environment).
#[derive(Debug, Clone, PartialEq)]
pub struct PpoBatch {
    pub actor_in: Mat,
    pub critic_in: Mat,
    pub actions: Mat,
    pub old_log_prob: Vec<f64>,
    pub old_mean: Mat,
    /// `log σ` used while collecting, `(1, 12)`.
    pub old_log_std: Mat,
    pub old_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `(T, N)` storage for one collection phase; row `t * N + n`.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub horizon: usize,
    pub envs: usize,
    actor_in: Mat,
    critic_in: Mat,
    actions: Mat,
    means: Mat,
    log_probs: Vec<f64>,
    values: Mat,
    rewards: Mat,
    dones: Array2<bool>,
}

impl RolloutBuffer {
    pub fn new(horizon: usize, envs: usize, actor_dim: usize, critic_dim: usize) -> Self {
        let rows = horizon * envs;
        Self {
            horizon,
            envs,
            actor_in: Mat::zeros((rows, actor_dim)),
            critic_in: Mat::zeros((rows, critic_dim)),
            actions: Mat::zeros((rows, ACTION_DIM)),
            means: Mat::zeros((rows, ACTION_DIM)),
            log_probs: vec![0.0; rows],
            values: Mat::zeros((horizon, envs)),
            rewards: Mat::zeros((horizon, envs)),
            dones: Array2::from_elem((horizon, envs), false),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn store_step(
        &mut self,
        t: usize,
        actor_in: &Mat,
        critic_in: &Mat,
        actions: &Mat,
        means: &Mat,
        log_probs: &[f64],
        values: &[f64],
    ) -> Result<(), RlError> {
        let n = self.envs;
        check_dim(actor_in, (n, self.actor_in.ncols()), "rollout actor input")?;
        check_dim(critic_in, (n, self.critic_in.ncols()), "rollout critic input")?;
        check_dim(actions, (n, ACTION_DIM), "rollout actions")?;
        check_dim(means, (n, ACTION_DIM), "rollout means")?;
        let rows = t * n..(t + 1) * n;
        self.actor_in.slice_mut(ndarray::s![rows.clone(), ..]).assign(actor_in);
        self.critic_in.slice_mut(ndarray::s![rows.clone(), ..]).assign(critic_in);
        self.actions.slice_mut(ndarray::s![rows.clone(), ..]).assign(actions);
        self.means.slice_mut(ndarray::s![rows.clone(), ..]).assign(means);
        self.log_probs[rows].copy_from_slice(log_probs);
        for (e, v) in values.iter().enumerate() {
            self.values[(t, e)] = *v;
        }
        Ok(())
    }

    /// Rewards should already include `γ V(s_T)` for time-outs.
    pub fn store_outcome(&mut self, t: usize, rewards: &[f64], dones: &[bool]) {
        for e in 0..self.envs {
            self.rewards[(t, e)] = rewards[e];
            self.dones[(t, e)] = dones[e];
        }
    }

    pub fn finish(self, bootstrap: &[f64], log_std: &Mat, gamma: f64, lambda: f64) -> Result<PpoBatch, RlError> {
        let (adv, ret) = gae(&self.rewards, &self.values, &self.dones, bootstrap, gamma, lambda)?;
        Ok(PpoBatch {
            actor_in: self.actor_in,
            critic_in: self.critic_in,
            actions: self.actions,
            old_log_prob: self.log_probs,
            old_mean: self.means,
            old_log_std: log_std.clone(),
            old_values: self.values.iter().copied().collect(),
            advantages: adv.iter().copied().collect(),
            returns: ret.iter().copied().collect(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PpoLoss {
    pub surrogate: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    /// Gradient of the total loss w.r.t. the actor input rows.
    pub d_actor_input: Mat,
}

/// Clipped surrogate + `value_coef` × (clipped) value loss − `entropy_coef` ×
/// entropy on the rows `idx` (advantages used as given). Accumulates the
/// parameter gradients into `ac` (callers zero them).
pub fn ppo_loss_and_grads(ac: &mut ActorCritic, batch: &PpoBatch, idx: &[usize], cfg: &PpoConfig) -> Result<PpoLoss, RlError> {
    let b = idx.len();
    let inv = 1.0 / b.max(1) as f64;
    let x = batch.actor_in.select(Axis(0), idx);
    let a = batch.actions.select(Axis(0), idx);
    let old_mean = batch.old_mean.select(Axis(0), idx);
    let (mean, cache) = ac.actor.net.forward_cached(&x)?;
    let log_std = ac.actor.log_std.value.clone();
    let lp = gaussian_log_prob(&mean, &log_std, &a);
    let inv_var = log_std.mapv(|l| (-2.0 * l).exp());

    let mut surrogate = 0.0;
    let mut clipped = 0usize;
    let mut d_mean = Mat::zeros(mean.raw_dim());
    let mut d_log_std = Mat::zeros(log_std.raw_dim());
    for (r, &i) in idx.iter().enumerate() {
        let adv = batch.advantages[i];
        let ratio = (lp[r] - batch.old_log_prob[i]).exp();
        let clipped_ratio = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        let (u, c) = (ratio * adv, clipped_ratio * adv);
        surrogate -= u.min(c) * inv;
        if (ratio - 1.0).abs() > cfg.clip {
            clipped += 1;
        }
        if u <= c {
            // d(-ratio * adv)/d logp
            let g = -adv * ratio * inv;
            for j in 0..ACTION_DIM {
                let diff = a[(r, j)] - mean[(r, j)];
                d_mean[(r, j)] += g * diff * inv_var[(0, j)];
                d_log_std[(0, j)] += g * (diff * diff * inv_var[(0, j)] - 1.0);
            }
        }
    }
    let entropy = gaussian_entropy(&log_std);
    d_log_std -= cfg.entropy_coef;

    let mut kl = 0.0;
    for (r, _) in idx.iter().enumerate() {
        for j in 0..ACTION_DIM {
            let (lo, ln) = (batch.old_log_std[(0, j)], log_std[(0, j)]);
            let dm = old_mean[(r, j)] - mean[(r, j)];
            kl += ln - lo + ((2.0 * lo).exp() + dm * dm) / (2.0 * (2.0 * ln).exp()) - 0.5;
        }
    }
    kl *= inv;

    let xc = batch.critic_in.select(Axis(0), idx);
    let (v, vcache) = ac.critic.net.forward_cached(&xc)?;
    let mut value = 0.0;
    let mut d_v = Mat::zeros(v.raw_dim());
    for (r, &i) in idx.iter().enumerate() {
        let (vi, ret, old) = (v[(r, 0)], batch.returns[i], batch.old_values[i]);
        let un = (vi - ret).powi(2);
        if cfg.clip_value_loss {
            let delta = vi - old;
            let vc = old + delta.clamp(-cfg.clip, cfg.clip);
            let cl = (vc - ret).powi(2);
            if un >= cl {
                value += un * inv;
                d_v[(r, 0)] = 2.0 * (vi - ret) * inv * cfg.value_coef;
            } else {
                value += cl * inv;
                if delta.abs() < cfg.clip {
                    d_v[(r, 0)] = 2.0 * (vc - ret) * inv * cfg.value_coef;
                }
            }
        } else {
            value += un * inv;
            d_v[(r, 0)] = 2.0 * (vi - ret) * inv * cfg.value_coef;
        }
    }
    let total = surrogate + cfg.value_coef * value - cfg.entropy_coef * entropy;
    if !total.is_finite() {
        return Err(RlError::NonFinite);
    }
    let d_actor_input = ac.actor.net.backward(&cache, &d_mean);
    ac.actor.log_std.grad += &d_log_std;
    ac.critic.net.backward(&vcache, &d_v);
    Ok(PpoLoss { surrogate, value, entropy, total, kl, clip_fraction: clipped as f64 * inv, d_actor_input })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub surrogate: f64,
    pub value: f64,
    pub entropy: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub learning_rate: f64,
    pub grad_norm: f64,
    pub updates: usize,
    /// Set when a non-finite loss stopped the update early.
    pub aborted: bool,
}

/// Normalizes advantages over the batch, then runs `epochs` passes of
/// shuffled minibatch Adam steps on actor and critic jointly.
pub fn ppo_update<R: Rng + ?Sized>(
    ac: &mut ActorCritic,
    opt: &mut Adam,
    batch: &PpoBatch,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<PpoStats, RlError> {
    let mut batch = batch.clone();
    let n = batch.len();
    let mut stats = PpoStats { learning_rate: opt.lr, ..PpoStats::default() };
    if n == 0 {
        return Ok(stats);
    }
    let mean = batch.advantages.iter().sum::<f64>() / n as f64;
    let var = batch.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt() + 1e-8;
    batch.advantages.iter_mut().for_each(|a| *a = (*a - mean) / std);

    let mb = cfg.minibatches.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    'outer: for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for k in 0..mb {
            let rows = &idx[k * n / mb..(k + 1) * n / mb];
            zero_grad(ac);
            let loss = match ppo_loss_and_grads(ac, &batch, rows, cfg) {
                Ok(l) => l,
                Err(RlError::NonFinite) => {
                    zero_grad(ac);
                    stats.aborted = true;
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            if cfg.adaptive_kl {
                if loss.kl > 2.0 * cfg.desired_kl {
                    opt.lr = (opt.lr / 1.5).max(1e-5);
                } else if loss.kl < 0.5 * cfg.desired_kl && loss.kl > 0.0 {
                    opt.lr = (opt.lr * 1.5).min(1e-2);
                }
            }
            let norm = clip_grad_norm(&mut [ac as &mut dyn Module], cfg.max_grad_norm);
            if !norm.is_finite() {
                zero_grad(ac);
                stats.aborted = true;
                break 'outer;
            }
            opt.step(&mut [ac as &mut dyn Module]);
            stats.updates += 1;
            stats.surrogate += loss.surrogate;
            stats.value += loss.value;
            stats.entropy += loss.entropy;
            stats.kl += loss.kl;
            stats.clip_fraction += loss.clip_fraction;
            stats.grad_norm += norm;
        }
    }
    if stats.updates > 0 {
        let k = stats.updates as f64;
        stats.surrogate /= k;
        stats.value /= k;
        stats.entropy /= k;
        stats.kl /= k;
        stats.clip_fraction /= k;
        stats.grad_norm /= k;
    }
    stats.learning_rate = opt.lr;
    Ok(stats)
}
