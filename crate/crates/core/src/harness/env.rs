//! One simulated robot on its own terrain tile: actuation delay, PD loop,
//! sensing, rewards, termination and resets.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{EnvConfig, MixKind, TerrainConfig};
use super::eval::Suite;
use crate::estimator::{foot_height_target, FOOT_DIM, VIS_PARTITION};
use crate::estimator::MemoryState;
use crate::obs::{
    assemble_privileged, assemble_proprio, occlude, add_gaussian_noise, shake_offset, DelayQueue, HistoryBuffer,
    PrivilegedObs, ProprioObs, RandConfig, VelocityCommand, sample_randomization,
};
use crate::rl::{compute_rewards, RewardBreakdown, RewardInputs, RewardWeights, NUM_TERMS};
use crate::simcore::{
    action_to_targets, pd_torques, render_depth, CameraModel, CameraOffset, ContactState, DepthFrame, Joints,
    RobotState, SampledDynamics, Simulator, DEPTH_MAX, NUM_JOINTS,
};
use crate::terrain::{generate_terrain, update_curriculum, CurriculumState, HeightField, TerrainSpec, TILE_SIZE};

/// Everything environments share read-only.
#[derive(Debug, Clone)]
pub struct EnvShared {
    pub sim: Simulator,
    pub env: EnvConfig,
    pub randomization: RandConfig,
    pub randomize: bool,
    pub weights: RewardWeights,
    pub camera: CameraModel,
    pub blind: bool,
    pub suite: Suite,
    pub memory_tokens: usize,
    pub memory_width: usize,
}

impl EnvShared {
    pub fn new(env: &EnvConfig, randomization: &RandConfig, randomize: bool, blind: bool, suite: Suite, memory: (usize, usize)) -> Self {
        Self {
            sim: Simulator::new(Default::default(), env.sim.clone()),
            env: env.clone(),
            randomization: *randomization,
            randomize,
            weights: RewardWeights::table(env.sim.policy_dt()),
            camera: CameraModel::default(),
            blind,
            suite,
            memory_tokens: memory.0,
            memory_width: memory.1,
        }
    }
}

/// Where an environment's tiles come from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum TerrainSource {
    /// A mix family whose difficulty follows the curriculum; a fresh tile
    /// seed is drawn at every reset.
    Curriculum { kind: MixKind, curriculum: CurriculumState, max_difficulty: f64, obstacles: u32 },
    /// The same tile for every episode.
    Fixed { spec: TerrainSpec },
}

impl TerrainSource {
    pub fn for_training(cfg: &TerrainConfig, env: usize, count: usize) -> Self {
        TerrainSource::Curriculum {
            kind: cfg.kind_for(env, count),
            curriculum: CurriculumState::new(cfg.initial_level, cfg.max_level),
            max_difficulty: cfg.max_difficulty,
            obstacles: cfg.obstacles,
        }
    }

    pub fn curriculum(&self) -> Option<CurriculumState> {
        match self {
            TerrainSource::Curriculum { curriculum, .. } => Some(*curriculum),
            TerrainSource::Fixed { .. } => None,
        }
    }
}

/// Per-joint power `|τ θ̇|`, its sum (W) and its population variance (W²).
pub fn power_metrics(per_joint: &Joints) -> (f64, f64) {
    let total: f64 = per_joint.iter().sum();
    let mean = total / NUM_JOINTS as f64;
    let var = per_joint.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / NUM_JOINTS as f64;
    (total, var)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub length: usize,
    /// Summed weighted reward terms.
    pub sums: [f64; NUM_TERMS],
    pub fell: bool,
    pub timed_out: bool,
    pub diverged: bool,
    pub level: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub reward: RewardBreakdown,
    pub done: bool,
    /// Ended by the time limit: the trainer bootstraps from `terminal`.
    pub timeout: bool,
    /// Privileged observation of the last state before a reset.
    pub terminal: Option<PrivilegedObs>,
    /// Proprio observation after the step (before any reset).
    pub next_proprio: ProprioObs,
    pub finished: Option<EpisodeSummary>,
    pub incident: Option<String>,
    /// Per-joint `|τ θ̇|`, averaged over the physics substeps.
    pub joint_power: Joints,
    pub tracking_error: f64,
}

#[derive(Debug, Clone)]
pub struct Env {
    pub index: usize,
    pub source: TerrainSource,
    pub spec: TerrainSpec,
    pub field: Arc<HeightField>,
    pub dynamics: SampledDynamics,
    pub state: RobotState,
    pub contacts: ContactState,
    pub command: VelocityCommand,
    pub history: HistoryBuffer,
    pub memory: MemoryState,
    /// `[z_s | z_F]` held since the last depth refresh.
    pub vis_latent: [f64; VIS_PARTITION],
    pub proprio: ProprioObs,
    pub privileged: PrivilegedObs,
    /// Frame rendered at this step, when the refresh is due.
    pub depth: Option<Arc<DepthFrame>>,
    pub foot_target: [f64; FOOT_DIM],
    /// Policy steps since the episode started.
    pub steps: usize,
    pub episodes: u64,
    delay: DelayQueue,
    last_joint_vel: Joints,
    sums: [f64; NUM_TERMS],
    fixed_dynamics: Option<SampledDynamics>,
    fixed_command: Option<VelocityCommand>,
    rng: ChaCha8Rng,
    cam_rng: ChaCha8Rng,
}

fn stream(seed: u64, index: usize, salt: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ salt);
    r.set_stream(index as u64);
    r
}

impl Env {
    pub fn new(index: usize, seed: u64, source: TerrainSource, shared: &EnvShared) -> Self {
        Self::build(index, seed, source, None, None, shared)
    }

    /// An environment with pinned terrain, dynamics and command.
    pub fn fixed(
        index: usize,
        seed: u64,
        spec: TerrainSpec,
        dynamics: SampledDynamics,
        command: VelocityCommand,
        shared: &EnvShared,
    ) -> Self {
        Self::build(index, seed, TerrainSource::Fixed { spec }, Some(dynamics), Some(command), shared)
    }

    fn build(
        index: usize,
        seed: u64,
        source: TerrainSource,
        fixed_dynamics: Option<SampledDynamics>,
        fixed_command: Option<VelocityCommand>,
        shared: &EnvShared,
    ) -> Self {
        let placeholder = TerrainSpec { kind: crate::terrain::TerrainKind::RandomRough, difficulty: 0.0, obstacle_count: 0, seed: 0 };
        let mut env = Self {
            index,
            source,
            spec: placeholder,
            field: Arc::new(HeightField::flat(1, 1, 1.0, [0.0, 0.0], 0.0)),
            dynamics: SampledDynamics::nominal(),
            state: RobotState::at_pose(Default::default(), 0.0, shared.sim.config.default_pose),
            contacts: ContactState::default(),
            command: VelocityCommand::default(),
            history: HistoryBuffer::new(),
            memory: MemoryState::reset(shared.memory_tokens, shared.memory_width),
            vis_latent: [0.0; VIS_PARTITION],
            proprio: ProprioObs::zeros(),
            privileged: PrivilegedObs([0.0; crate::obs::PRIVILEGED_DIM]),
            depth: None,
            foot_target: [0.0; FOOT_DIM],
            steps: 0,
            episodes: 0,
            delay: DelayQueue::new(0.0, shared.sim.config.dt, [0.0; NUM_JOINTS]),
            last_joint_vel: [0.0; NUM_JOINTS],
            sums: [0.0; NUM_TERMS],
            fixed_dynamics,
            fixed_command,
            rng: stream(seed, index, 0x6b69_7669_656e_7631),
            cam_rng: stream(seed, index, 0x6361_6d65_7261_7631),
        };
        env.reset(shared);
        env
    }

    fn tile_spec(&mut self) -> TerrainSpec {
        match &self.source {
            TerrainSource::Fixed { spec } => *spec,
            TerrainSource::Curriculum { kind, curriculum, max_difficulty, obstacles } => {
                let difficulty = if kind.is_flat() { 0.0 } else { curriculum.difficulty(*max_difficulty).clamp(0.0, 1.0) };
                let obstacle_count = if kind.is_flat() { 0 } else { *obstacles };
                TerrainSpec { kind: kind.terrain_kind(), difficulty, obstacle_count, seed: self.rng.random() }
            }
        }
    }

    pub fn reset(&mut self, shared: &EnvShared) {
        let spec = self.tile_spec();
        if spec != self.spec || self.field.rows() <= 1 {
            self.field = Arc::new(generate_terrain(&spec));
            self.spec = spec;
        }
        self.dynamics = match self.fixed_dynamics {
            Some(d) => d,
            None if shared.randomize => sample_randomization(&shared.randomization, &mut self.rng),
            None => SampledDynamics::nominal(),
        };
        let yaw = match self.fixed_dynamics {
            Some(_) => 0.0,
            None => self.rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        };
        self.state = shared.sim.standing_state(&self.field, 0.0, 0.0, yaw, &self.dynamics);
        self.contacts = ContactState::default();
        self.command = match self.fixed_command {
            Some(c) => c,
            None => shared.env.commands.sample(&mut self.rng),
        };
        let rest = action_to_targets(&[0.0; NUM_JOINTS], &shared.sim.config);
        self.delay = DelayQueue::new(self.dynamics.delay_ms, shared.sim.config.dt, rest);
        self.history.reset();
        self.memory = MemoryState::reset(shared.memory_tokens, shared.memory_width);
        self.vis_latent = [0.0; VIS_PARTITION];
        self.last_joint_vel = self.state.joint_vel;
        self.sums = [0.0; NUM_TERMS];
        self.steps = 0;
        self.observe(shared);
    }

    /// Camera image for the current state with every configured disturbance.
    pub fn render(&mut self, shared: &EnvShared) -> DepthFrame {
        if shared.blind {
            return DepthFrame::filled(DEPTH_MAX);
        }
        let mut offset = CameraOffset::default();
        let shake = self.dynamics.camera_shake_deg.abs();
        if shake > 0.0 {
            offset = shake_offset(shake, &mut self.cam_rng);
        }
        if let Suite::Jitter { deg } = shared.suite {
            let s = shake_offset(deg, &mut self.cam_rng);
            offset.roll += s.roll;
            offset.pitch += s.pitch;
            offset.yaw += s.yaw;
        }
        let mut frame = render_depth(&self.state, &self.field, &shared.camera, &offset);
        if self.dynamics.occlusion_ratio > 0.0 {
            occlude(&mut frame, self.dynamics.occlusion_ratio, &mut self.cam_rng);
        }
        match shared.suite {
            Suite::Gaussian { sigma } => add_gaussian_noise(&mut frame, sigma, &mut self.cam_rng),
            Suite::Occlusion { ratio } => {
                occlude(&mut frame, ratio, &mut self.cam_rng);
            }
            Suite::FullOcclusion => {
                occlude(&mut frame, 1.0, &mut self.cam_rng);
            }
            Suite::Clean | Suite::Jitter { .. } => {}
        }
        frame
    }

    /// Fills the observation fields for the current state.
    fn observe(&mut self, shared: &EnvShared) {
        self.proprio = assemble_proprio(&self.state, &self.command, &shared.env.noise, &mut self.rng);
        self.history.push_proprio(self.proprio);
        self.privileged = assemble_privileged(&self.state, &self.proprio, &self.contacts, &self.field);
        if self.steps % shared.sim.config.depth_decimation == 0 {
            let frame = Arc::new(self.render(shared));
            self.history.push_depth(frame.clone());
            self.depth = Some(frame);
            self.foot_target = foot_height_target(&self.field, &self.state, &shared.sim.model.legs);
        } else {
            self.depth = None;
        }
    }

    pub fn refresh_due(&self) -> bool {
        self.depth.is_some()
    }

    fn tilted(&self, max_tilt: f64) -> bool {
        let (roll, pitch, _) = self.state.euler();
        roll.abs() > max_tilt || pitch.abs() > max_tilt
    }

    /// Applies one policy action. Resets the environment when the episode
    /// ends; the returned outcome refers to the episode that just finished.
    pub fn step(&mut self, action: &Joints, shared: &EnvShared) -> StepOutcome {
        let sim = &shared.sim;
        let targets = action_to_targets(action, &sim.config);
        let gains = sim.config.gains.scaled(self.dynamics.kp_factor, self.dynamics.kd_factor);
        let mut joint_power = [0.0; NUM_JOINTS];
        let mut collisions = 0;
        let mut torques = [0.0; NUM_JOINTS];
        let mut incident = None;
        for _ in 0..sim.config.decimation {
            let due = self.delay.push(targets);
            torques = pd_torques(&due, &self.state.joint_pos, &self.state.joint_vel, gains, sim.config.torque_limit);
            match sim.step(&self.state, &torques, &self.field, &self.dynamics) {
                Ok((s, c)) => {
                    self.state = s;
                    collisions = collisions.max(c.collision_count());
                    self.contacts = c;
                }
                Err(e) => {
                    incident = Some(format!("env {} step {}: {e}; episode reset", self.index, self.steps));
                    break;
                }
            }
            for j in 0..NUM_JOINTS {
                joint_power[j] += (torques[j] * self.state.joint_vel[j]).abs();
            }
        }
        let k = sim.config.decimation as f64;
        joint_power.iter_mut().for_each(|p| *p /= k);

        let dt = sim.config.policy_dt();
        let joint_acc: Joints = std::array::from_fn(|j| (self.state.joint_vel[j] - self.last_joint_vel[j]) / dt);
        self.last_joint_vel = self.state.joint_vel;
        let body_vel = self.state.body_lin_vel();
        let inputs = RewardInputs {
            lin_vel: [body_vel.x, body_vel.y, body_vel.z],
            ang_vel: [self.state.ang_vel.x, self.state.ang_vel.y, self.state.ang_vel.z],
            joint_vel: self.state.joint_vel,
            joint_acc,
            torques,
            action: *action,
            prev_action: self.state.prev_action,
            prev_prev_action: self.state.prev_prev_action,
            command: self.command,
            collisions,
        };
        let mut reward = compute_rewards(&inputs, &shared.weights, &shared.env.reward);
        if incident.is_some() {
            reward = RewardBreakdown::default();
        }
        let tracking_error = ((body_vel.x - self.command.vx).powi(2) + (body_vel.y - self.command.vy).powi(2)).sqrt();
        self.state.prev_prev_action = self.state.prev_action;
        self.state.prev_action = *action;
        for (s, r) in self.sums.iter_mut().zip(&reward.terms) {
            *s += r;
        }
        self.steps += 1;
        let cr = shared.env.command_resample_steps;
        if cr > 0 && self.steps % cr == 0 && self.fixed_command.is_none() {
            self.command = shared.env.commands.sample(&mut self.rng);
        }

        let diverged = incident.is_some();
        let fell = !diverged && (self.contacts.base_contact || self.tilted(shared.env.max_tilt));
        let timed_out = !diverged && !fell && self.steps >= shared.env.max_episode_steps;
        if !diverged {
            self.observe(shared);
        }
        let next_proprio = self.proprio;
        let done = diverged || fell || timed_out;
        let mut outcome = StepOutcome {
            reward,
            done,
            timeout: timed_out,
            terminal: None,
            next_proprio,
            finished: None,
            incident,
            joint_power,
            tracking_error,
        };
        if done {
            outcome.terminal = Some(self.privileged);
            let level = self.finish_episode(shared);
            outcome.finished = Some(EpisodeSummary { length: self.steps, sums: self.sums, fell, timed_out, diverged, level });
            self.episodes += 1;
            self.reset(shared);
        }
        outcome
    }

    /// Curriculum update from the distance walked this episode.
    fn finish_episode(&mut self, shared: &EnvShared) -> Option<u32> {
        let walked = if self.state.is_finite() { self.state.position.xy().norm() } else { 0.0 };
        let time = self.steps as f64 * shared.sim.config.policy_dt();
        let speed = (self.command.vx.powi(2) + self.command.vy.powi(2)).sqrt();
        match &mut self.source {
            TerrainSource::Curriculum { curriculum, .. } => {
                let traversed = walked / (TILE_SIZE / 2.0);
                let commanded = if speed * time > 1e-6 { walked / (speed * time) } else { 1.0 };
                *curriculum = update_curriculum(*curriculum, traversed, commanded);
                Some(curriculum.level)
            }
            TerrainSource::Fixed { .. } => None,
        }
    }
}
