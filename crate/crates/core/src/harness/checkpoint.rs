//! Self-describing checkpoints: run config, architecture dims, normalizers,
//! curriculum state and every parameter tensor.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::agent::Agent;
use super::config::RunConfig;
use super::HarnessError;
use crate::estimator::{KIN_PARTITION, LATENT_DIM, VISUAL_TOKENS, VIS_PARTITION};
use crate::netcore::serial::TensorStore;
use crate::obs::{PRIVILEGED_DIM, PROPRIO_DIM};
use crate::rl::ACTION_DIM;
use crate::terrain::CurriculumState;

pub const CHECKPOINT_KIND: &str = "kivi-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub proprio: usize,
    pub privileged: usize,
    pub action: usize,
    pub latent: usize,
    pub kinesthetic: usize,
    pub visuospatial: usize,
    pub visual_tokens: usize,
}

impl Dims {
    pub const CURRENT: Dims = Dims {
        proprio: PROPRIO_DIM,
        privileged: PRIVILEGED_DIM,
        action: ACTION_DIM,
        latent: LATENT_DIM,
        kinesthetic: KIN_PARTITION,
        visuospatial: VIS_PARTITION,
        visual_tokens: VISUAL_TOKENS,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: usize,
    pub curriculum: Vec<CurriculumState>,
    pub agent: Agent,
}

impl Checkpoint {
    pub fn to_store(&self) -> TensorStore {
        let mut store = TensorStore::new();
        self.agent.estimator.save(&mut store, "estimator");
        self.agent.ac.actor.save(&mut store, "actor");
        self.agent.ac.critic.save(&mut store, "critic");
        store.meta = json!({
            "kind": CHECKPOINT_KIND,
            "iteration": self.iteration,
            "variant": self.config.variant_label(),
            "dims": Dims::CURRENT,
            "curriculum": self.curriculum,
            "config": self.config.to_toml_string(),
        });
        store
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        Ok(self.to_store().save(path)?)
    }

    pub fn from_store(store: &TensorStore) -> Result<Self, HarnessError> {
        let meta = &store.meta;
        let bad = |m: &str| HarnessError::Checkpoint(m.to_string());
        if meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(bad("not a training checkpoint"));
        }
        let dims: Dims = serde_json::from_value(meta.get("dims").cloned().ok_or_else(|| bad("missing dims"))?)
            .map_err(|e| HarnessError::Checkpoint(format!("dims: {e}")))?;
        if dims != Dims::CURRENT {
            return Err(HarnessError::Checkpoint(format!("dimension mismatch: checkpoint {dims:?}, build {:?}", Dims::CURRENT)));
        }
        let text = meta.get("config").and_then(|c| c.as_str()).ok_or_else(|| bad("missing config"))?;
        let config = RunConfig::from_toml_str(text)?;
        let iteration = meta.get("iteration").and_then(|i| i.as_u64()).ok_or_else(|| bad("missing iteration"))? as usize;
        let curriculum: Vec<CurriculumState> = serde_json::from_value(meta.get("curriculum").cloned().unwrap_or(json!([])))
            .map_err(|e| HarnessError::Checkpoint(format!("curriculum: {e}")))?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut agent = Agent::new(&config, &mut rng)?;
        agent.estimator.load(store, "estimator")?;
        agent.ac.actor.load(store, "actor")?;
        agent.ac.critic.load(store, "critic")?;
        Ok(Self { config, iteration, curriculum, agent })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_store(&TensorStore::load(path)?)
    }

    /// The state a policy has after a save/load round trip (f32 storage).
    pub fn round_trip(&self) -> Result<Self, HarnessError> {
        let bytes = self.to_store().to_bytes();
        Self::from_store(&TensorStore::read_from(&mut bytes.as_slice())?)
    }
}
