//! Asymmetric actor-critic trained with PPO. The actor sees the proprio
//! observation and the blocked estimator latents; only the critic sees the
//! privileged state.

mod ppo;
pub mod rewards;

pub use ppo::{ppo_loss_and_grads, ppo_update, PpoBatch, PpoConfig, PpoLoss, PpoStats, RolloutBuffer};
pub use rewards::{compute_rewards, RewardBreakdown, RewardConfig, RewardInputs, RewardTerm, RewardWeights, NUM_TERMS};

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::estimator::{BlockedLatents, LATENT_DIM};
use crate::netcore::serial::{SerialError, TensorStore};
use crate::netcore::{
    check_width, join, standard_normal, Activation, DenseStackSpec, Mat, Mlp, Module, NetError, Param, RunningNorm,
};
use crate::obs::{PrivilegedObs, ProprioObs, PRIVILEGED_DIM, PROPRIO_DIM};
use crate::simcore::NUM_JOINTS;

pub const ACTION_DIM: usize = NUM_JOINTS;
pub const ACTOR_INPUT_DIM: usize = PROPRIO_DIM + LATENT_DIM;
pub const CRITIC_INPUT_DIM: usize = PRIVILEGED_DIM;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RlError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    Shape { what: &'static str, expected: (usize, usize), got: (usize, usize) },
    #[error("PPO loss is not finite")]
    NonFinite,
}

fn check_dim(m: &Mat, dim: (usize, usize), what: &'static str) -> Result<(), RlError> {
    if m.dim() != dim {
        return Err(RlError::Shape { what, expected: dim, got: m.dim() });
    }
    Ok(())
}

/// `δ_t = r_t + γ v_{t+1} (1 - d_t) - v_t`, `A_t = δ_t + γλ (1 - d_t) A_{t+1}`,
/// with `v_T` the bootstrap value. Arrays are `(T, N)`.
pub fn gae(
    rewards: &Mat,
    values: &Mat,
    dones: &Array2<bool>,
    bootstrap: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Mat, Mat), RlError> {
    let (t_len, n) = rewards.dim();
    check_dim(values, (t_len, n), "gae values")?;
    if dones.dim() != (t_len, n) {
        return Err(RlError::Shape { what: "gae dones", expected: (t_len, n), got: dones.dim() });
    }
    if bootstrap.len() != n {
        return Err(RlError::Shape { what: "gae bootstrap", expected: (1, n), got: (1, bootstrap.len()) });
    }
    let mut adv = Mat::zeros((t_len, n));
    for e in 0..n {
        let mut next_adv = 0.0;
        let mut next_value = bootstrap[e];
        for t in (0..t_len).rev() {
            let keep = if dones[(t, e)] { 0.0 } else { 1.0 };
            let delta = rewards[(t, e)] + gamma * next_value * keep - values[(t, e)];
            next_adv = delta + gamma * lambda * keep * next_adv;
            adv[(t, e)] = next_adv;
            next_value = values[(t, e)];
        }
    }
    let returns = &adv + values;
    Ok((adv, returns))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub init_log_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { actor_hidden: vec![128, 64], critic_hidden: vec![256, 128], init_log_std: 0.0 }
    }
}

impl PolicyConfig {
    pub fn reduced() -> Self {
        Self { actor_hidden: vec![5], critic_hidden: vec![4], init_log_std: -0.3 }
    }
}

/// Per-row `Σ_j log N(a_j; μ_j, σ_j)` with a shared `log σ` row.
pub fn gaussian_log_prob(mean: &Mat, log_std: &Mat, actions: &Mat) -> Vec<f64> {
    let ls = log_std.row(0);
    mean.rows()
        .into_iter()
        .zip(actions.rows())
        .map(|(m, a)| {
            m.iter()
                .zip(a.iter())
                .zip(ls.iter())
                .map(|((&mu, &x), &l)| {
                    let z = (x - mu) * (-l).exp();
                    -0.5 * z * z - l - 0.5 * LN_2PI
                })
                .sum()
        })
        .collect()
}

/// Entropy of the diagonal Gaussian with the given `log σ` row.
pub fn gaussian_entropy(log_std: &Mat) -> f64 {
    log_std.iter().map(|l| l + 0.5 * (LN_2PI + 1.0)).sum()
}

/// Actor observation: normalized proprio (45) followed by blocked latents (51).
#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub net: Mlp,
    /// State-independent `log σ`, `(1, 12)`.
    pub log_std: Param,
    pub norm: RunningNorm,
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(cfg: &PolicyConfig, rng: &mut R) -> Result<Self, NetError> {
        let mut widths = cfg.actor_hidden.clone();
        widths.push(ACTION_DIM);
        let net = Mlp::new(DenseStackSpec::new(ACTOR_INPUT_DIM, &widths, Activation::Identity), 0.01, rng)?;
        Ok(Self {
            net,
            log_std: Param::new(Mat::from_elem((1, ACTION_DIM), cfg.init_log_std)),
            norm: RunningNorm::new(PROPRIO_DIM),
        })
    }

    pub fn raw_proprio(proprio: &[ProprioObs]) -> Mat {
        Array2::from_shape_fn((proprio.len(), PROPRIO_DIM), |(i, j)| proprio[i].0[j])
    }

    /// Builds the network input; privileged observations have no path here.
    pub fn input(&self, proprio: &[ProprioObs], latents: &BlockedLatents) -> Result<Mat, RlError> {
        let p = self.norm.normalize(&Self::raw_proprio(proprio));
        let l = latents.values();
        check_width(l, LATENT_DIM, "actor latents")?;
        if l.nrows() != p.nrows() {
            return Err(RlError::Shape { what: "actor latent rows", expected: (p.nrows(), LATENT_DIM), got: l.dim() });
        }
        Ok(ndarray::concatenate![Axis(1), p, *l])
    }

    pub fn mean(&self, input: &Mat) -> Result<Mat, RlError> {
        Ok(self.net.forward(input)?)
    }

    /// Samples actions; returns `(actions, means, log-probs)`.
    pub fn sample<R: Rng + ?Sized>(&self, input: &Mat, rng: &mut R) -> Result<(Mat, Mat, Vec<f64>), RlError> {
        let mean = self.mean(input)?;
        let std = self.log_std.value.mapv(f64::exp);
        let eps = standard_normal(mean.nrows(), ACTION_DIM, rng);
        let actions = &mean + &(&eps * &std);
        let lp = gaussian_log_prob(&mean, &self.log_std.value, &actions);
        Ok((actions, mean, lp))
    }

    pub fn save(&self, store: &mut TensorStore, prefix: &str) {
        self.visit(prefix, &mut |n, p| store.insert_mat(n, &p.value));
        save_norm(store, &join(prefix, "norm"), &self.norm);
    }

    pub fn load(&mut self, store: &TensorStore, prefix: &str) -> Result<(), SerialError> {
        store.load_module(prefix, self)?;
        load_norm(store, &join(prefix, "norm"), &mut self.norm)
    }
}

impl Module for Actor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.net.visit(&join(prefix, "net"), f);
        f(&join(prefix, "log_std"), &self.log_std);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.net.visit_mut(&join(prefix, "net"), f);
        f(&join(prefix, "log_std"), &mut self.log_std);
    }
}

/// `deterministic` returns the mean; otherwise a Gaussian sample.
pub fn act<R: Rng + ?Sized>(
    actor: &Actor,
    proprio: &[ProprioObs],
    latents: &BlockedLatents,
    deterministic: bool,
    rng: &mut R,
) -> Result<Mat, RlError> {
    let input = actor.input(proprio, latents)?;
    if deterministic {
        actor.mean(&input)
    } else {
        Ok(actor.sample(&input, rng)?.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub net: Mlp,
    pub norm: RunningNorm,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(cfg: &PolicyConfig, rng: &mut R) -> Result<Self, NetError> {
        let mut widths = cfg.critic_hidden.clone();
        widths.push(1);
        let net = Mlp::new(DenseStackSpec::new(CRITIC_INPUT_DIM, &widths, Activation::Identity), 1.0, rng)?;
        Ok(Self { net, norm: RunningNorm::new(PRIVILEGED_DIM) })
    }

    pub fn raw_privileged(obs: &[PrivilegedObs]) -> Mat {
        Array2::from_shape_fn((obs.len(), PRIVILEGED_DIM), |(i, j)| obs[i].0[j])
    }

    pub fn input(&self, obs: &[PrivilegedObs]) -> Mat {
        self.norm.normalize(&Self::raw_privileged(obs))
    }

    pub fn value(&self, input: &Mat) -> Result<Vec<f64>, RlError> {
        Ok(self.net.forward(input)?.column(0).to_vec())
    }

    pub fn save(&self, store: &mut TensorStore, prefix: &str) {
        self.net.visit(prefix, &mut |n, p| store.insert_mat(n, &p.value));
        save_norm(store, &join(prefix, "norm"), &self.norm);
    }

    pub fn load(&mut self, store: &TensorStore, prefix: &str) -> Result<(), SerialError> {
        store.load_module(prefix, &mut self.net)?;
        load_norm(store, &join(prefix, "norm"), &mut self.norm)
    }
}

fn save_norm(store: &mut TensorStore, prefix: &str, n: &RunningNorm) {
    store.insert(&join(prefix, "mean"), vec![n.dim()], &n.mean);
    store.insert(&join(prefix, "var"), vec![n.dim()], &n.var);
    store.insert(&join(prefix, "count"), vec![1], &[n.count]);
}

fn load_norm(store: &TensorStore, prefix: &str, n: &mut RunningNorm) -> Result<(), SerialError> {
    let d = n.dim();
    n.mean = store.read(&join(prefix, "mean"), &[d])?;
    n.var = store.read(&join(prefix, "var"), &[d])?;
    n.count = store.read(&join(prefix, "count"), &[1])?[0];
    Ok(())
}

/// The jointly optimised pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub actor: Actor,
    pub critic: Critic,
}

impl ActorCritic {
    pub fn new<R: Rng + ?Sized>(cfg: &PolicyConfig, rng: &mut R) -> Result<Self, NetError> {
        Ok(Self { actor: Actor::new(cfg, rng)?, critic: Critic::new(cfg, rng)? })
    }
}

impl Module for ActorCritic {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.actor.visit(&join(prefix, "actor"), f);
        self.critic.net.visit(&join(prefix, "critic"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.actor.visit_mut(&join(prefix, "actor"), f);
        self.critic.net.visit_mut(&join(prefix, "critic"), f);
    }
}

#[cfg(test)]
mod tests;
