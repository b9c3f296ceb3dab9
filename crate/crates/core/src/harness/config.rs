//! Run configuration: TOML with nested sections, every field defaulted,
//! unknown keys rejected.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::estimator::EstimatorConfig;
use crate::obs::{CommandRanges, NoiseScales, RandConfig, VelocityCommand};
use crate::rl::{PolicyConfig, PpoConfig, RewardConfig};
use crate::simcore::SimConfig;
use crate::terrain::TerrainKind;

pub const SEED_ENV_VAR: &str = "KIVI_SEED";

/// A terrain family in the training mix. `flat` is the rough family at zero
/// amplitude regardless of curriculum level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixKind {
    Flat,
    Stairs,
    Boxes,
    RandomRough,
    Slope,
    Gaps,
    HighWalls,
}

impl MixKind {
    pub fn terrain_kind(self) -> TerrainKind {
        match self {
            MixKind::Flat | MixKind::RandomRough => TerrainKind::RandomRough,
            MixKind::Stairs => TerrainKind::Stairs,
            MixKind::Boxes => TerrainKind::Boxes,
            MixKind::Slope => TerrainKind::Slope,
            MixKind::Gaps => TerrainKind::Gaps,
            MixKind::HighWalls => TerrainKind::HighWalls,
        }
    }

    pub fn is_flat(self) -> bool {
        self == MixKind::Flat
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixEntry {
    pub kind: MixKind,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerrainConfig {
    /// Environments are split across the mix in proportion to the weights.
    pub mix: Vec<MixEntry>,
    /// Difficulty reached at the top curriculum level.
    pub max_difficulty: f64,
    pub max_level: u32,
    /// Level every environment starts at.
    pub initial_level: u32,
    /// Extra boxes scattered on every tile.
    pub obstacles: u32,
    pub curriculum: bool,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        Self {
            mix: vec![
                MixEntry { kind: MixKind::Flat, weight: 1.0 },
                MixEntry { kind: MixKind::RandomRough, weight: 1.0 },
                MixEntry { kind: MixKind::Stairs, weight: 1.0 },
            ],
            max_difficulty: 0.4,
            max_level: 8,
            initial_level: 0,
            obstacles: 0,
            curriculum: true,
        }
    }
}

impl TerrainConfig {
    /// Mix family of environment `env` out of `count`.
    pub fn kind_for(&self, env: usize, count: usize) -> MixKind {
        let total: f64 = self.mix.iter().map(|m| m.weight).sum();
        let u = (env as f64 + 0.5) / count.max(1) as f64 * total;
        let mut acc = 0.0;
        for m in &self.mix {
            acc += m.weight;
            if u < acc {
                return m.kind;
            }
        }
        self.mix.last().map(|m| m.kind).unwrap_or(MixKind::Flat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Time-out length in policy steps.
    pub max_episode_steps: usize,
    /// Commands are redrawn this often within an episode (0 = never).
    pub command_resample_steps: usize,
    /// Roll or pitch beyond this (rad) ends the episode.
    pub max_tilt: f64,
    pub commands: CommandRanges,
    pub noise: NoiseScales,
    pub reward: RewardConfig,
    pub sim: SimConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_episode_steps: 1000,
            command_resample_steps: 500,
            max_tilt: 1.0,
            commands: CommandRanges::default(),
            noise: NoiseScales::default(),
            reward: RewardConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Zero `ê` and `z` in the actor input.
    pub no_kinesthetic: bool,
    /// Reset the memory tokens before every visuospatial forward.
    pub no_memory: bool,
    /// Depth is max range everywhere, always.
    pub blind: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoKinesthetic,
    NoMemory,
    Blind,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoKinesthetic, Variant::NoMemory, Variant::Blind];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoKinesthetic => "no_kinesthetic",
            Variant::NoMemory => "no_memory",
            Variant::Blind => "blind",
        }
    }
}

impl FromStr for Variant {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| HarnessError::Config(format!("unknown variant `{s}` (expected full, no_kinesthetic, no_memory or blind)")))
    }
}

/// Settings for evaluation episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episode_steps: usize,
    pub terrain: TerrainKind,
    pub difficulty: f64,
    pub command: VelocityCommand,
    /// Evaluation episodes sample domain randomization when set.
    pub randomize: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episode_steps: 500,
            terrain: TerrainKind::RandomRough,
            difficulty: 0.4,
            command: VelocityCommand { vx: 0.6, vy: 0.0, yaw_rate: 0.0 },
            randomize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub envs: usize,
    /// Policy steps collected per environment per iteration.
    pub horizon: usize,
    pub iterations: usize,
    /// Collection threads; 0 uses every core, 1 is the single-worker mode.
    pub workers: usize,
    pub out_dir: String,
    /// Checkpoint period in iterations (0 = only the final one).
    pub checkpoint_every: usize,
    pub terrain: TerrainConfig,
    pub env: EnvConfig,
    pub randomization: RandConfig,
    pub ppo: PpoConfig,
    pub policy: PolicyConfig,
    pub estimator: EstimatorConfig,
    pub ablation: AblationFlags,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            envs: 64,
            horizon: 48,
            iterations: 500,
            workers: 0,
            out_dir: "runs/kivi".into(),
            checkpoint_every: 100,
            terrain: TerrainConfig::default(),
            env: EnvConfig::default(),
            randomization: RandConfig::default(),
            ppo: PpoConfig::default(),
            policy: PolicyConfig::default(),
            estimator: EstimatorConfig::default(),
            ablation: AblationFlags::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file and applies the `KIVI_SEED` override.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env_overrides()?;
        Ok(cfg)
    }

    pub fn apply_env_overrides(&mut self) -> Result<(), HarnessError> {
        if let Ok(v) = std::env::var(SEED_ENV_VAR) {
            self.seed = parse_seed(&v)?;
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.envs == 0 || self.horizon == 0 {
            return bad("envs and horizon must be positive".into());
        }
        if self.terrain.mix.is_empty() || self.terrain.mix.iter().any(|m| !(m.weight > 0.0)) {
            return bad("terrain mix needs at least one entry, all weights positive".into());
        }
        if !(0.0..=1.0).contains(&self.terrain.max_difficulty) {
            return bad("terrain.max_difficulty must lie in [0, 1]".into());
        }
        if self.terrain.obstacles > crate::terrain::MAX_OBSTACLES {
            return bad(format!("terrain.obstacles must be at most {}", crate::terrain::MAX_OBSTACLES));
        }
        if self.env.max_episode_steps == 0 || self.eval.episode_steps == 0 {
            return bad("episode lengths must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.eval.difficulty) {
            return bad("eval.difficulty must lie in [0, 1]".into());
        }
        if !(self.env.reward.tracking_sigma > 0.0) {
            return bad("env.reward.tracking_sigma must be positive".into());
        }
        self.env.sim.validate().map_err(HarnessError::Config)?;
        self.randomization.validate().map_err(HarnessError::Config)?;
        self.ppo.validate().map_err(HarnessError::Config)?;
        self.estimator.validate()?;
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        let a = self.ablation;
        match (a.no_kinesthetic, a.no_memory, a.blind) {
            (false, false, false) => Variant::Full,
            (true, false, false) => Variant::NoKinesthetic,
            (false, true, false) => Variant::NoMemory,
            (false, false, true) => Variant::Blind,
            _ => Variant::Full,
        }
    }

    /// Name for logs: the variant or the combination of flags.
    pub fn variant_label(&self) -> String {
        let a = self.ablation;
        let flags: Vec<&str> = [(a.no_kinesthetic, "no_kinesthetic"), (a.no_memory, "no_memory"), (a.blind, "blind")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if flags.is_empty() {
            "full".into()
        } else {
            flags.join("+")
        }
    }
}

pub fn parse_seed(s: &str) -> Result<u64, HarnessError> {
    s.trim().parse().map_err(|_| HarnessError::Config(format!("{SEED_ENV_VAR}=`{s}` is not an unsigned integer")))
}

/// Applies one ablation on top of `config`; flags already set stay set.
pub fn ablate(config: &RunConfig, variant: Variant) -> RunConfig {
    let mut c = config.clone();
    match variant {
        Variant::Full => {}
        Variant::NoKinesthetic => c.ablation.no_kinesthetic = true,
        Variant::NoMemory => c.ablation.no_memory = true,
        Variant::Blind => c.ablation.blind = true,
    }
    c
}

/// `ablate` with the variant given by name.
pub fn ablate_named(config: &RunConfig, variant: &str) -> Result<RunConfig, HarnessError> {
    Ok(ablate(config, variant.parse()?))
}
