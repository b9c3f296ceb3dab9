//! Locomotion reward suite: two tracking objectives and nine penalties.

use serde::{Deserialize, Serialize};

use crate::obs::VelocityCommand;
use crate::simcore::{Joints, NUM_JOINTS};

pub const NUM_TERMS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardTerm {
    TrackingXy,
    TrackingYaw,
    VelocityZ,
    AngVelXy,
    JointAcc,
    JointPower,
    JointTorque,
    PowerDistribution,
    Collision,
    ActionRate,
    Smoothness,
}

impl RewardTerm {
    pub const ALL: [RewardTerm; NUM_TERMS] = [
        RewardTerm::TrackingXy,
        RewardTerm::TrackingYaw,
        RewardTerm::VelocityZ,
        RewardTerm::AngVelXy,
        RewardTerm::JointAcc,
        RewardTerm::JointPower,
        RewardTerm::JointTorque,
        RewardTerm::PowerDistribution,
        RewardTerm::Collision,
        RewardTerm::ActionRate,
        RewardTerm::Smoothness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RewardTerm::TrackingXy => "tracking_xy",
            RewardTerm::TrackingYaw => "tracking_yaw",
            RewardTerm::VelocityZ => "velocity_z",
            RewardTerm::AngVelXy => "ang_vel_xy",
            RewardTerm::JointAcc => "joint_acc",
            RewardTerm::JointPower => "joint_power",
            RewardTerm::JointTorque => "joint_torque",
            RewardTerm::PowerDistribution => "power_distribution",
            RewardTerm::Collision => "collision",
            RewardTerm::ActionRate => "action_rate",
            RewardTerm::Smoothness => "smoothness",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Tabulated coefficient before multiplication by `dt`.
    pub fn base_weight(self) -> f64 {
        match self {
            RewardTerm::TrackingXy => 3.0,
            RewardTerm::TrackingYaw => 1.5,
            RewardTerm::VelocityZ => -0.1,
            RewardTerm::AngVelXy => -0.05,
            RewardTerm::JointAcc => -2.5e-7,
            RewardTerm::JointPower => -2e-5,
            RewardTerm::JointTorque => -1e-5,
            RewardTerm::PowerDistribution => -2e-7,
            RewardTerm::Collision => -1.0,
            RewardTerm::ActionRate => -0.01,
            RewardTerm::Smoothness => -0.01,
        }
    }
}

/// Term weights already multiplied by the policy step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub weights: [f64; NUM_TERMS],
}

impl RewardWeights {
    pub fn table(dt: f64) -> Self {
        Self { weights: RewardTerm::ALL.map(|t| t.base_weight() * dt) }
    }

    pub fn get(&self, term: RewardTerm) -> f64 {
        self.weights[term.index()]
    }

    /// Upper bound of the per-step total (sum of the positive weights).
    pub fn max_total(&self) -> f64 {
        self.weights.iter().filter(|w| **w > 0.0).sum()
    }
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self::table(0.02)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// `φ(x) = exp(-|x|^2 / tracking_sigma)`.
    pub tracking_sigma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { tracking_sigma: 0.25 }
    }
}

/// Everything one control step contributes to the reward.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardInputs {
    /// Base linear velocity in the base frame.
    pub lin_vel: [f64; 3],
    /// Base angular velocity in the base frame.
    pub ang_vel: [f64; 3],
    pub joint_vel: Joints,
    pub joint_acc: Joints,
    pub torques: Joints,
    pub action: Joints,
    pub prev_action: Joints,
    pub prev_prev_action: Joints,
    pub command: VelocityCommand,
    pub collisions: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// Weighted contribution of each term, in [`RewardTerm::ALL`] order.
    pub terms: [f64; NUM_TERMS],
    pub total: f64,
}

impl RewardBreakdown {
    pub fn get(&self, term: RewardTerm) -> f64 {
        self.terms[term.index()]
    }
}

#[inline]
pub fn tracking_kernel(err_sq: f64, sigma: f64) -> f64 {
    (-err_sq / sigma).exp()
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Unweighted value of each term (penalties as positive magnitudes, except
/// the collision row which is tabulated as `-n`).
pub fn raw_terms(x: &RewardInputs, cfg: &RewardConfig) -> [f64; NUM_TERMS] {
    let c = x.command;
    let xy_err = (x.lin_vel[0] - c.vx).powi(2) + (x.lin_vel[1] - c.vy).powi(2);
    let yaw_err = (x.ang_vel[2] - c.yaw_rate).powi(2);
    let power: Joints = std::array::from_fn(|j| (x.torques[j] * x.joint_vel[j]).abs());
    let mean_p = power.iter().sum::<f64>() / NUM_JOINTS as f64;
    let var_p = power.iter().map(|p| (p - mean_p).powi(2)).sum::<f64>() / NUM_JOINTS as f64;
    let rate: Joints = std::array::from_fn(|j| x.action[j] - x.prev_action[j]);
    let smooth: Joints = std::array::from_fn(|j| x.action[j] - 2.0 * x.prev_action[j] + x.prev_prev_action[j]);
    [
        tracking_kernel(xy_err, cfg.tracking_sigma),
        tracking_kernel(yaw_err, cfg.tracking_sigma),
        x.lin_vel[2] * x.lin_vel[2],
        x.ang_vel[0] * x.ang_vel[0] + x.ang_vel[1] * x.ang_vel[1],
        sq_norm(&x.joint_acc),
        power.iter().sum(),
        sq_norm(&x.torques),
        var_p,
        -(x.collisions as f64),
        sq_norm(&rate),
        sq_norm(&smooth),
    ]
}

/// Weighted terms and their sum. The collision row's tabulated weight
/// (`-1 dt`) is applied to `+n_collision`, so collisions are penalised.
pub fn compute_rewards(x: &RewardInputs, weights: &RewardWeights, cfg: &RewardConfig) -> RewardBreakdown {
    let raw = raw_terms(x, cfg);
    let mut terms = [0.0; NUM_TERMS];
    for t in RewardTerm::ALL {
        let i = t.index();
        let r = if t == RewardTerm::Collision { -raw[i] } else { raw[i] };
        terms[i] = weights.weights[i] * r;
    }
    RewardBreakdown { terms, total: terms.iter().sum() }
}
