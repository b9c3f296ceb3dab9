//! Single-stage training loop: rollout, estimator update, PPO update,
//! curriculum, metrics and checkpoints.

use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::agent::Agent;
use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::env::{Env, EnvShared, EpisodeSummary, TerrainSource};
use super::eval::Suite;
use super::exec::Executor;
use super::HarnessError;
use crate::estimator::{explicit_target, EstimatorStats, EstimatorTrainer, KinBatch, VisBatch, EXPLICIT_DIM, FOOT_DIM, SCAN_DIM};
use crate::netcore::{Adam, Mat};
use crate::obs::{privileged_layout, HISTORY_DIM, PROPRIO_DIM, PRIVILEGED_DIM};
use crate::rl::{ppo_update, PpoStats, RewardTerm, RolloutBuffer, ACTOR_INPUT_DIM, CRITIC_INPUT_DIM, NUM_TERMS};

/// Completed episodes kept for the rolling metrics.
pub const EPISODE_WINDOW: usize = 100;
const MAX_LOGGED_INCIDENTS: usize = 8;

/// One JSONL line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Seconds since training started.
    pub wall_time: f64,
    pub seed: u64,
    pub variant: String,
    /// Mean per-step reward of this iteration's rollout.
    pub mean_step_reward: f64,
    /// Mean per-step tracking-xy reward of this rollout.
    pub step_tracking_xy: f64,
    /// Rolling mean over recent episodes of each term's episode sum divided by
    /// the maximum episode duration (s), in term order.
    pub episode_terms: Option<[f64; NUM_TERMS]>,
    pub tracking_xy: Option<f64>,
    /// Rolling mean episode length (policy steps).
    pub episode_length: Option<f64>,
    pub episodes_completed: u64,
    pub falls: u64,
    pub mean_level: f64,
    pub ppo: PpoStats,
    pub estimator: EstimatorStats,
    pub incidents: usize,
    pub incident_notes: Vec<String>,
    /// Set when a non-finite loss skipped (part of) an update.
    pub skipped_update: bool,
}

impl IterationRecord {
    /// The record without its wall-clock field, for reproducibility checks.
    pub fn timeless(&self) -> IterationRecord {
        IterationRecord { wall_time: 0.0, ..self.clone() }
    }
}

pub struct Trainer {
    pub config: RunConfig,
    pub agent: Agent,
    pub envs: Vec<Env>,
    pub shared: EnvShared,
    pub executor: Executor,
    pub iteration: usize,
    ppo_opt: Adam,
    est_trainer: EstimatorTrainer,
    rng: ChaCha8Rng,
    window: VecDeque<EpisodeSummary>,
    episodes_completed: u64,
    falls: u64,
    started: Instant,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let agent = Agent::new(&config, &mut rng)?;
        let shared = EnvShared::new(&config.env, &config.randomization, true, config.ablation.blind, Suite::Clean, agent.memory_dims());
        let envs = (0..config.envs)
            .map(|i| Env::new(i, config.seed, TerrainSource::for_training(&config.terrain, i, config.envs), &shared))
            .collect();
        Ok(Self {
            executor: Executor::new(config.workers),
            ppo_opt: Adam::new(config.ppo.learning_rate),
            est_trainer: EstimatorTrainer::new(&config.estimator),
            agent,
            envs,
            shared,
            iteration: 0,
            rng,
            window: VecDeque::new(),
            episodes_completed: 0,
            falls: 0,
            started: Instant::now(),
            config,
        })
    }

    pub fn with_executor(mut self, executor: Executor) -> Self {
        self.executor = executor;
        self
    }

    pub fn curriculum(&self) -> Vec<crate::terrain::CurriculumState> {
        self.envs.iter().filter_map(|e| e.source.curriculum()).collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { config: self.config.clone(), iteration: self.iteration, curriculum: self.curriculum(), agent: self.agent.clone() }
    }

    /// Collects one rollout and applies every update.
    pub fn train_iteration(&mut self) -> Result<IterationRecord, HarnessError> {
        let (t_len, n) = (self.config.horizon, self.envs.len());
        let gamma = self.config.ppo.gamma;
        let mut buffer = RolloutBuffer::new(t_len, n, ACTOR_INPUT_DIM, CRITIC_INPUT_DIM);
        let rows = t_len * n;
        let mut kin = KinBatch {
            history: Mat::zeros((rows, HISTORY_DIM)),
            explicit: Mat::zeros((rows, EXPLICIT_DIM)),
            next_proprio: Mat::zeros((rows, PROPRIO_DIM)),
        };
        let mut raw_proprio = Mat::zeros((rows, PROPRIO_DIM));
        let mut raw_privileged = Mat::zeros((rows, PRIVILEGED_DIM));
        let mut vis_parts = Vec::new();
        let mut reward_sum = 0.0;
        let mut tracking_sum = 0.0;
        let mut incidents = Vec::new();

        for t in 0..t_len {
            let est = self.agent.estimate(&mut self.envs)?;
            let actor_in = self.agent.actor_input(&self.envs, &est.latents)?;
            let critic_in = self.agent.critic_input(&self.envs);
            let (actions, means, log_probs) = self.agent.ac.actor.sample(&actor_in, &mut self.rng)?;
            let values = self.agent.ac.critic.value(&critic_in)?;
            buffer.store_step(t, &actor_in, &critic_in, &actions, &means, &log_probs, &values)?;

            let block = s![t * n..(t + 1) * n, ..];
            kin.history.slice_mut(block).assign(&est.history);
            raw_proprio.slice_mut(block).assign(&Agent::raw_proprio(&self.envs));
            raw_privileged.slice_mut(block).assign(&Agent::raw_privileged(&self.envs));
            for (i, e) in self.envs.iter().enumerate() {
                kin.explicit.row_mut(t * n + i).assign(&ndarray::ArrayView1::from(&explicit_target(&e.privileged)[..]));
            }
            if let Some(v) = est.vis {
                let mut scan = Mat::zeros((v.envs.len(), SCAN_DIM));
                let mut foot = Mat::zeros((v.envs.len(), FOOT_DIM));
                for (k, &i) in v.envs.iter().enumerate() {
                    let e = &self.envs[i];
                    scan.row_mut(k).assign(&ndarray::ArrayView1::from(&e.privileged.0[privileged_layout::SCAN]));
                    foot.row_mut(k).assign(&ndarray::ArrayView1::from(&e.foot_target[..]));
                }
                vis_parts.push(VisBatch { history: v.history, depth: v.depth, memory: v.memory, initial: v.initial, scan, foot });
            }

            let shared = &self.shared;
            let outcomes = self.executor.map_mut(&mut self.envs, |i, env| {
                let a: [f64; 12] = std::array::from_fn(|j| actions[(i, j)]);
                env.step(&a, shared)
            });

            let timeouts: Vec<usize> = (0..n).filter(|&i| outcomes[i].timeout).collect();
            let mut boot = vec![0.0; n];
            if !timeouts.is_empty() {
                let terminal: Vec<_> = timeouts.iter().map(|&i| outcomes[i].terminal.expect("timeout has a terminal state")).collect();
                let v = self.agent.ac.critic.value(&self.agent.ac.critic.input(&terminal))?;
                for (k, &i) in timeouts.iter().enumerate() {
                    boot[i] = gamma * v[k];
                }
            }
            let rewards: Vec<f64> = (0..n).map(|i| outcomes[i].reward.total + boot[i]).collect();
            let dones: Vec<bool> = outcomes.iter().map(|o| o.done).collect();
            buffer.store_outcome(t, &rewards, &dones);
            for (i, o) in outcomes.into_iter().enumerate() {
                kin.next_proprio.row_mut(t * n + i).assign(&ndarray::ArrayView1::from(&o.next_proprio.0[..]));
                reward_sum += o.reward.total;
                tracking_sum += o.reward.get(RewardTerm::TrackingXy);
                if let Some(note) = o.incident {
                    incidents.push(note);
                }
                if let Some(sum) = o.finished {
                    self.episodes_completed += 1;
                    self.falls += sum.fell as u64;
                    if self.window.len() == EPISODE_WINDOW {
                        self.window.pop_front();
                    }
                    self.window.push_back(sum);
                }
            }
        }

        let bootstrap = self.agent.ac.critic.value(&self.agent.critic_input(&self.envs))?;
        let batch = buffer.finish(&bootstrap, &self.agent.ac.actor.log_std.value, gamma, self.config.ppo.lambda)?;

        self.agent.ac.actor.norm.update(&raw_proprio);
        self.agent.ac.critic.norm.update(&raw_privileged);
        self.agent.estimator.norm.update(&raw_proprio);

        let vis = concat_vis(vis_parts, self.agent.memory_dims().0);
        let est_stats = self.est_trainer.update(&mut self.agent.estimator, &kin, &vis, &mut self.rng)?;
        let ppo_stats = ppo_update(&mut self.agent.ac, &mut self.ppo_opt, &batch, &self.config.ppo, &mut self.rng)?;
        self.iteration += 1;

        let record = self.record(reward_sum / rows as f64, tracking_sum / rows as f64, ppo_stats, est_stats, incidents);
        Ok(record)
    }

    fn record(
        &self,
        mean_step_reward: f64,
        step_tracking_xy: f64,
        ppo: PpoStats,
        estimator: EstimatorStats,
        incidents: Vec<String>,
    ) -> IterationRecord {
        let duration = self.config.env.max_episode_steps as f64 * self.config.env.sim.policy_dt();
        let (episode_terms, episode_length) = if self.window.is_empty() {
            (None, None)
        } else {
            let k = self.window.len() as f64;
            let mut terms = [0.0; NUM_TERMS];
            for ep in &self.window {
                for (t, s) in terms.iter_mut().zip(&ep.sums) {
                    *t += s / duration / k;
                }
            }
            (Some(terms), Some(self.window.iter().map(|e| e.length as f64).sum::<f64>() / k))
        };
        let levels = self.curriculum();
        let mean_level = if levels.is_empty() { 0.0 } else { levels.iter().map(|c| c.level as f64).sum::<f64>() / levels.len() as f64 };
        IterationRecord {
            iteration: self.iteration,
            wall_time: self.started.elapsed().as_secs_f64(),
            seed: self.config.seed,
            variant: self.config.variant_label(),
            mean_step_reward,
            step_tracking_xy,
            tracking_xy: episode_terms.map(|t| t[RewardTerm::TrackingXy.index()]),
            episode_terms,
            episode_length,
            episodes_completed: self.episodes_completed,
            falls: self.falls,
            mean_level,
            ppo,
            estimator,
            incidents: incidents.len(),
            incident_notes: incidents.into_iter().take(MAX_LOGGED_INCIDENTS).collect(),
            skipped_update: ppo.aborted || estimator.skipped > 0,
        }
    }

    /// Runs `iterations` iterations, appending JSONL records to `log` and
    /// writing checkpoints under `out_dir` when one is given.
    pub fn run(
        &mut self,
        iterations: usize,
        mut log: Option<&mut dyn Write>,
        out_dir: Option<&Path>,
        mut progress: impl FnMut(&IterationRecord),
    ) -> Result<Vec<IterationRecord>, HarnessError> {
        let mut records = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let r = self.train_iteration()?;
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut **w, &r)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.iteration % every == 0 {
                    self.checkpoint().save(&checkpoint_path(dir, self.iteration))?;
                }
            }
            progress(&r);
            records.push(r);
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join("latest.kivi"))?;
        }
        Ok(records)
    }
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:05}.kivi"))
}

fn concat_vis(parts: Vec<VisBatch>, memory_tokens: usize) -> VisBatch {
    let cat = |f: &dyn Fn(&VisBatch) -> &Mat| -> Mat {
        let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
        if views.is_empty() {
            Mat::zeros((0, 0))
        } else {
            ndarray::concatenate(Axis(0), &views).expect("equal widths")
        }
    };
    let batch = VisBatch {
        history: cat(&|p| &p.history),
        depth: cat(&|p| &p.depth),
        memory: cat(&|p| &p.memory),
        initial: parts.iter().flat_map(|p| p.initial.iter().copied()).collect(),
        scan: cat(&|p| &p.scan),
        foot: cat(&|p| &p.foot),
    };
    debug_assert_eq!(batch.memory.nrows(), batch.len() * memory_tokens);
    batch
}

/// Reads back a JSONL metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<IterationRecord>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Trains a run as configured, writing `metrics.jsonl` and checkpoints into
/// the configured output directory. Returns the final checkpoint as stored.
pub fn train(config: RunConfig, mut progress: impl FnMut(&IterationRecord)) -> Result<Checkpoint, HarnessError> {
    let dir = PathBuf::from(&config.out_dir);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), config.to_toml_string())?;
    let mut log = std::fs::OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?;
    let iterations = config.iterations;
    let mut trainer = Trainer::new(config)?;
    trainer.run(iterations, Some(&mut log), Some(&dir), &mut progress)?;
    trainer.checkpoint().round_trip()
}
