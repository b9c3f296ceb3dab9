//! Disturbance evaluation: deterministic policy episodes on a fixed terrain
//! family with the joint-power metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::agent::Agent;
use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::env::{power_metrics, Env, EnvShared};
use super::episode::EpisodeRecorder;
use super::exec::Executor;
use super::HarnessError;
use crate::obs::{sample_randomization, VelocityCommand};
use crate::simcore::SampledDynamics;
use crate::terrain::TerrainSpec;

/// Depth corruption applied on top of whatever the run's randomization adds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Suite {
    Clean,
    /// Per-pixel Gaussian noise, standard deviation in metres.
    Gaussian { sigma: f64 },
    /// One max-range rectangle covering `ratio` of each frame.
    Occlusion { ratio: f64 },
    /// Random camera rotation within `±deg` per axis on every frame.
    Jitter { deg: f64 },
    FullOcclusion,
}

impl Suite {
    /// The beyond-training disturbance levels of the power study.
    pub const DISTURBED: [Suite; 5] = [
        Suite::Gaussian { sigma: 0.1 },
        Suite::Gaussian { sigma: 0.3 },
        Suite::Occlusion { ratio: 0.6 },
        Suite::Occlusion { ratio: 1.0 },
        Suite::Jitter { deg: 5.0 },
    ];

    pub fn validate(&self) -> Result<(), HarnessError> {
        let ok = match *self {
            Suite::Clean | Suite::FullOcclusion => true,
            Suite::Gaussian { sigma } => sigma.is_finite() && sigma >= 0.0,
            Suite::Occlusion { ratio } => (0.0..=1.0).contains(&ratio),
            Suite::Jitter { deg } => deg.is_finite() && deg >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(HarnessError::Config(format!("invalid suite parameter in `{self}`")))
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Suite::Clean => write!(f, "clean"),
            Suite::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            Suite::Occlusion { ratio } => write!(f, "occlusion:{ratio}"),
            Suite::Jitter { deg } => write!(f, "jitter:{deg}"),
            Suite::FullOcclusion => write!(f, "full_occlusion"),
        }
    }
}

impl FromStr for Suite {
    type Err = HarnessError;

    /// `clean`, `gaussian:SIGMA`, `occlusion:RATIO`, `jitter:DEG` or
    /// `full_occlusion`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.as_str(), None),
        };
        let num = |what: &str| -> Result<f64, HarnessError> {
            let a = arg.ok_or_else(|| HarnessError::Config(format!("suite `{name}` needs a {what}, e.g. `{name}:0.5`")))?;
            a.parse().map_err(|_| HarnessError::Config(format!("suite `{name}`: `{a}` is not a number")))
        };
        let suite = match name {
            "clean" => Suite::Clean,
            "full_occlusion" | "full-occlusion" => Suite::FullOcclusion,
            "gaussian" => Suite::Gaussian { sigma: num("standard deviation")? },
            "occlusion" => Suite::Occlusion { ratio: num("ratio")? },
            "jitter" => Suite::Jitter { deg: num("angle in degrees")? },
            other => return Err(HarnessError::Config(format!("unknown suite `{other}`"))),
        };
        if arg.is_some() && matches!(suite, Suite::Clean | Suite::FullOcclusion) {
            return Err(HarnessError::Config(format!("suite `{name}` takes no parameter")));
        }
        suite.validate()?;
        Ok(suite)
    }
}

/// One evaluation episode's pinned conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub seed: u64,
    pub episode: usize,
    pub terrain: TerrainSpec,
    pub dynamics: SampledDynamics,
    pub command: VelocityCommand,
}

/// Every episode run side by side in one evaluation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBatch {
    pub suite: Suite,
    pub steps: usize,
    pub episodes: Vec<EpisodeSpec>,
}

impl EvalBatch {
    /// `episodes` episodes for each seed on the configured evaluation terrain.
    pub fn new(config: &RunConfig, suite: Suite, episodes: usize, seeds: &[u64]) -> Result<Self, HarnessError> {
        suite.validate()?;
        let ev = &config.eval;
        let mut specs = Vec::with_capacity(episodes * seeds.len());
        for &seed in seeds {
            for e in 0..episodes {
                let mix = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add((e as u64).wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(1));
                let terrain = TerrainSpec::new(ev.terrain, ev.difficulty, config.terrain.obstacles, mix)?;
                let dynamics = if ev.randomize {
                    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(mix);
                    sample_randomization(&config.randomization, &mut rng)
                } else {
                    SampledDynamics::nominal()
                };
                specs.push(EpisodeSpec { seed, episode: e, terrain, dynamics, command: ev.command });
            }
        }
        Ok(Self { suite, steps: ev.episode_steps, episodes: specs })
    }

    pub fn shared(&self, config: &RunConfig, agent: &Agent) -> EnvShared {
        EnvShared::new(&config.env, &config.randomization, false, agent.flags.blind, self.suite, agent.memory_dims())
    }

    pub fn build_envs(&self, shared: &EnvShared) -> Vec<Env> {
        self.episodes
            .iter()
            .enumerate()
            .map(|(i, s)| Env::fixed(i, s.seed, s.terrain, s.dynamics, s.command, shared))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub seed: u64,
    pub episode: usize,
    /// Mean over steps of `Σ_j |τ_j θ̇_j|` (W).
    pub mean_power: f64,
    /// Mean over steps of `var_j |τ_j θ̇_j|` (W²).
    pub mean_power_variance: f64,
    pub mean_tracking_error: f64,
    pub fell: bool,
    pub length: usize,
    pub power_series: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub suite: Suite,
    pub variant: String,
    pub mean_power: f64,
    pub mean_power_variance: f64,
    pub mean_tracking_error: f64,
    pub falls: usize,
    pub mean_episode_length: f64,
    pub episodes: Vec<EpisodeMetrics>,
}

impl EvalReport {
    fn aggregate(suite: Suite, variant: String, episodes: Vec<EpisodeMetrics>) -> Self {
        let k = episodes.len().max(1) as f64;
        let mean = |f: &dyn Fn(&EpisodeMetrics) -> f64| episodes.iter().map(f).sum::<f64>() / k;
        Self {
            suite,
            variant,
            mean_power: mean(&|e| e.mean_power),
            mean_power_variance: mean(&|e| e.mean_power_variance),
            mean_tracking_error: mean(&|e| e.mean_tracking_error),
            falls: episodes.iter().filter(|e| e.fell).count(),
            mean_episode_length: mean(&|e| e.length as f64),
            episodes,
        }
    }

    /// Metrics restricted to the episodes of one seed.
    pub fn for_seed(&self, seed: u64) -> EvalReport {
        let eps = self.episodes.iter().filter(|e| e.seed == seed).cloned().collect();
        Self::aggregate(self.suite, self.variant.clone(), eps)
    }
}

/// Runs prebuilt environments for up to `steps` policy steps with mean
/// actions. An episode stops counting at its first termination.
pub fn run_envs(
    agent: &Agent,
    envs: &mut [Env],
    shared: &EnvShared,
    steps: usize,
    executor: &Executor,
    mut recorder: Option<&mut EpisodeRecorder>,
) -> Result<Vec<(usize, bool, Vec<(f64, f64, f64)>)>, HarnessError> {
    let n = envs.len();
    let mut alive = vec![true; n];
    let mut fell = vec![false; n];
    let mut trace: Vec<Vec<(f64, f64, f64)>> = vec![Vec::with_capacity(steps); n];
    for _ in 0..steps {
        if !alive.iter().any(|a| *a) {
            break;
        }
        let actions = agent.act_deterministic(envs)?;
        if let Some(rec) = recorder.as_deref_mut() {
            if alive[rec.env] {
                let a: [f64; 12] = std::array::from_fn(|j| actions[(rec.env, j)]);
                rec.push(&envs[rec.env], a);
            }
        }
        let outcomes = executor.map_mut(envs, |i, env| {
            let a: [f64; 12] = std::array::from_fn(|j| actions[(i, j)]);
            env.step(&a, shared)
        });
        for (i, o) in outcomes.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            let (p, v) = power_metrics(&o.joint_power);
            trace[i].push((p, v, o.tracking_error));
            if o.done && !o.timeout {
                alive[i] = false;
                fell[i] = true;
            } else if o.done {
                alive[i] = false;
            }
        }
    }
    Ok((0..n).map(|i| (trace[i].len(), fell[i], std::mem::take(&mut trace[i]))).collect())
}

fn metrics_from(spec: &EpisodeSpec, length: usize, fell: bool, trace: Vec<(f64, f64, f64)>) -> EpisodeMetrics {
    let k = trace.len().max(1) as f64;
    EpisodeMetrics {
        seed: spec.seed,
        episode: spec.episode,
        mean_power: trace.iter().map(|t| t.0).sum::<f64>() / k,
        mean_power_variance: trace.iter().map(|t| t.1).sum::<f64>() / k,
        mean_tracking_error: trace.iter().map(|t| t.2).sum::<f64>() / k,
        fell,
        length,
        power_series: trace.iter().map(|t| t.0).collect(),
    }
}

/// Runs an evaluation batch, optionally recording one of its episodes.
pub fn run_batch(
    config: &RunConfig,
    agent: &Agent,
    batch: &EvalBatch,
    executor: &Executor,
    recorder: Option<&mut EpisodeRecorder>,
) -> Result<EvalReport, HarnessError> {
    let shared = batch.shared(config, agent);
    let mut envs = batch.build_envs(&shared);
    let results = run_envs(agent, &mut envs, &shared, batch.steps, executor, recorder)?;
    let episodes = batch.episodes.iter().zip(results).map(|(s, (len, fell, tr))| metrics_from(s, len, fell, tr)).collect();
    Ok(EvalReport::aggregate(batch.suite, config.variant_label(), episodes))
}

/// `episodes` episodes for each of `seeds` under `suite`. The policy is used
/// exactly as stored in the checkpoint.
pub fn evaluate(
    checkpoint: &Checkpoint,
    suite: Suite,
    episodes: usize,
    seeds: &[u64],
    executor: &Executor,
) -> Result<EvalReport, HarnessError> {
    let batch = EvalBatch::new(&checkpoint.config, suite, episodes, seeds)?;
    run_batch(&checkpoint.config, &checkpoint.agent, &batch, executor, None)
}
