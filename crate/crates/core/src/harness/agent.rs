//! Estimator plus actor-critic, driven over a batch of environments.

use ndarray::{s, Array2};
use rand::Rng;

use super::checkpoint::Dims;
use super::config::{AblationFlags, RunConfig};
use super::env::Env;
use super::HarnessError;
use crate::estimator::{
    blocked_latents, depth_input, BlockedLatents, Estimator, LatentBundle, MemoryState, KIN_PARTITION, LATENT_DIM,
    VIS_FOOT_LATENT_DIM, VIS_PARTITION, VIS_SCAN_LATENT_DIM,
};
use crate::netcore::Mat;
use crate::obs::{ProprioObs, HISTORY_DIM};
use crate::rl::{Actor, ActorCritic, Critic};

/// Visuospatial inputs of the environments refreshed at this step.
#[derive(Debug, Clone)]
pub struct VisInputs {
    pub envs: Vec<usize>,
    pub history: Mat,
    pub depth: Mat,
    /// `memory_tokens` rows per refreshed environment.
    pub memory: Mat,
    pub initial: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub latents: BlockedLatents,
    /// Raw proprio histories, `(N, 450)`.
    pub history: Mat,
    pub vis: Option<VisInputs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub estimator: Estimator,
    pub ac: ActorCritic,
    pub flags: AblationFlags,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(config: &RunConfig, rng: &mut R) -> Result<Self, HarnessError> {
        let estimator = Estimator::new(config.estimator.clone(), rng)?;
        let ac = ActorCritic::new(&config.policy, rng)?;
        let agent = Self { estimator, ac, flags: config.ablation };
        let dims = agent.dims()?;
        if dims != Dims::CURRENT {
            return Err(HarnessError::Config(format!("network widths {dims:?} break the contract {:?}", Dims::CURRENT)));
        }
        Ok(agent)
    }

    /// Widths measured from the networks themselves with a one-row probe.
    pub fn dims(&self) -> Result<Dims, HarnessError> {
        let est = &self.estimator;
        let h = Mat::zeros((1, HISTORY_DIM));
        let kin = est.kinesthetic_forward(&h, None)?;
        let mem = est.vis.reset_memory();
        let (vis, _) = est.visuospatial_forward(&h, &Mat::zeros((1, est.depth_input_len())), &[&mem])?;
        let kinesthetic = kin.explicit.ncols() + kin.z.ncols();
        let visuospatial = vis.z_s.ncols() + vis.z_f.ncols();
        Ok(Dims {
            proprio: self.ac.actor.net.input_dim() - kinesthetic - visuospatial,
            privileged: self.ac.critic.net.input_dim(),
            action: self.ac.actor.net.output_dim(),
            latent: kinesthetic + visuospatial,
            kinesthetic,
            visuospatial,
            visual_tokens: est.vis.pos_enc.value.nrows(),
        })
    }

    pub fn memory_dims(&self) -> (usize, usize) {
        (self.estimator.vis.memory_tokens(), self.estimator.vis.width())
    }

    /// Runs the kinesthetic branch on every environment and the visuospatial
    /// branch on those with a fresh frame, updating their memory and held
    /// latents.
    pub fn estimate(&self, envs: &mut [Env]) -> Result<Estimate, HarnessError> {
        let n = envs.len();
        let mut history = Mat::zeros((n, HISTORY_DIM));
        for (i, e) in envs.iter().enumerate() {
            history.row_mut(i).assign(&ndarray::ArrayView1::from(&e.history.proprio_history()[..]));
        }
        let kin = self.estimator.kinesthetic_forward(&history, None)?;

        let due: Vec<usize> = (0..n).filter(|&i| envs[i].refresh_due()).collect();
        let mut vis = None;
        if !due.is_empty() {
            let (m, d) = self.memory_dims();
            let len = self.estimator.depth_input_len();
            let mut depth = Mat::zeros((due.len(), len));
            let mut vh = Mat::zeros((due.len(), HISTORY_DIM));
            for (k, &i) in due.iter().enumerate() {
                let (cur, prev) = envs[i].history.depth_pair().ok_or(HarnessError::Internal("refresh without a frame"))?;
                depth.row_mut(k).assign(&ndarray::Array1::from(depth_input(&cur, &prev)));
                vh.row_mut(k).assign(&history.row(i));
                if self.flags.no_memory {
                    envs[i].memory = MemoryState::reset(m, d);
                }
            }
            let mem: Vec<&MemoryState> = due.iter().map(|&i| &envs[i].memory).collect();
            let (tokens, initial) = self.estimator.vis.stack_memory(&mem)?;
            let (out, next) = self.estimator.visuospatial_forward(&vh, &depth, &mem)?;
            for (k, (&i, mem)) in due.iter().zip(next).enumerate() {
                let mut z = [0.0; VIS_PARTITION];
                for j in 0..VIS_SCAN_LATENT_DIM {
                    z[j] = out.z_s[(k, j)];
                }
                for j in 0..VIS_FOOT_LATENT_DIM {
                    z[VIS_SCAN_LATENT_DIM + j] = out.z_f[(k, j)];
                }
                envs[i].vis_latent = z;
                envs[i].memory = mem;
            }
            vis = Some(VisInputs { envs: due, history: vh, depth, memory: tokens, initial });
        }

        let mut z_vis = Array2::zeros((n, VIS_PARTITION));
        for (i, e) in envs.iter().enumerate() {
            z_vis.row_mut(i).assign(&ndarray::ArrayView1::from(&e.vis_latent[..]));
        }
        let mut bundle = LatentBundle::new(
            &kin.explicit,
            &kin.dist.mean,
            &z_vis.slice(s![.., ..VIS_SCAN_LATENT_DIM]).to_owned(),
            &z_vis.slice(s![.., VIS_SCAN_LATENT_DIM..]).to_owned(),
        )?;
        debug_assert_eq!(bundle.values.ncols(), LATENT_DIM);
        debug_assert_eq!(bundle.kinesthetic().ncols(), KIN_PARTITION);
        if self.flags.no_kinesthetic {
            bundle.zero_kinesthetic();
        }
        Ok(Estimate { latents: blocked_latents(&bundle), history, vis })
    }

    pub fn actor_input(&self, envs: &[Env], latents: &BlockedLatents) -> Result<Mat, HarnessError> {
        let proprio: Vec<ProprioObs> = envs.iter().map(|e| e.proprio).collect();
        Ok(self.ac.actor.input(&proprio, latents)?)
    }

    pub fn critic_input(&self, envs: &[Env]) -> Mat {
        let obs: Vec<_> = envs.iter().map(|e| e.privileged).collect();
        self.ac.critic.input(&obs)
    }

    /// Deterministic (mean) actions for evaluation.
    pub fn act_deterministic(&self, envs: &mut [Env]) -> Result<Mat, HarnessError> {
        let est = self.estimate(envs)?;
        let x = self.actor_input(envs, &est.latents)?;
        Ok(self.ac.actor.mean(&x)?)
    }

    pub fn raw_proprio(envs: &[Env]) -> Mat {
        let p: Vec<ProprioObs> = envs.iter().map(|e| e.proprio).collect();
        Actor::raw_proprio(&p)
    }

    pub fn raw_privileged(envs: &[Env]) -> Mat {
        let p: Vec<_> = envs.iter().map(|e| e.privileged).collect();
        Critic::raw_privileged(&p)
    }
}
