//! Sensory streams: the 45-d proprioceptive observation, the 243-d privileged
//! critic state, depth history, domain randomisation and camera disturbances.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::simcore::{CameraOffset, ContactState, DepthFrame, Joints, RobotState, SampledDynamics, DEPTH_H, DEPTH_MAX, DEPTH_PIXELS, DEPTH_W, NUM_JOINTS};
use crate::terrain::{sample_height_scan, HeightField, SCAN_LEN};

pub const PROPRIO_DIM: usize = 45;
pub const PRIVILEGED_DIM: usize = 243;
pub const FORCE_DIM: usize = 8;
/// Proprioceptive steps kept for the estimator, including the current one.
pub const HISTORY_LEN: usize = 10;
pub const HISTORY_DIM: usize = HISTORY_LEN * PROPRIO_DIM;
pub const DEPTH_HISTORY: usize = 2;

/// Index ranges inside [`ProprioObs`].
pub mod proprio_layout {
    use std::ops::Range;
    pub const ANG_VEL: Range<usize> = 0..3;
    pub const GRAVITY: Range<usize> = 3..6;
    pub const COMMAND: Range<usize> = 6..9;
    pub const JOINT_POS: Range<usize> = 9..21;
    pub const JOINT_VEL: Range<usize> = 21..33;
    pub const PREV_ACTION: Range<usize> = 33..45;
}

/// Index ranges inside [`PrivilegedObs`].
pub mod privileged_layout {
    use std::ops::Range;
    pub const LIN_VEL: Range<usize> = 0..3;
    pub const PROPRIO: Range<usize> = 3..48;
    pub const FORCES: Range<usize> = 48..56;
    pub const SCAN: Range<usize> = 56..243;
}

/// `[ω, g, c, θ, θ̇, a_{t-1}]`. `g` is world `-z` in the base frame, so a level
/// robot reads `(0, 0, -1)` and a robot rolled +90° about x reads `(0, -1, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProprioObs(pub [f64; PROPRIO_DIM]);

impl ProprioObs {
    pub fn zeros() -> Self {
        Self([0.0; PROPRIO_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn ang_vel(&self) -> &[f64] {
        &self.0[proprio_layout::ANG_VEL]
    }

    pub fn gravity(&self) -> &[f64] {
        &self.0[proprio_layout::GRAVITY]
    }

    pub fn command(&self) -> &[f64] {
        &self.0[proprio_layout::COMMAND]
    }

    pub fn joint_pos(&self) -> &[f64] {
        &self.0[proprio_layout::JOINT_POS]
    }

    pub fn joint_vel(&self) -> &[f64] {
        &self.0[proprio_layout::JOINT_VEL]
    }

    pub fn prev_action(&self) -> &[f64] {
        &self.0[proprio_layout::PREV_ACTION]
    }
}

/// `[v, o, f^{xy,z}, m^b]`: base velocity (body frame), the proprioceptive
/// observation, `f_xy`/`f_z` per foot (FL, FR, RL, RR) and the height scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivilegedObs(pub [f64; PRIVILEGED_DIM]);

impl PrivilegedObs {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn lin_vel(&self) -> &[f64] {
        &self.0[privileged_layout::LIN_VEL]
    }

    pub fn proprio(&self) -> &[f64] {
        &self.0[privileged_layout::PROPRIO]
    }

    pub fn forces(&self) -> &[f64] {
        &self.0[privileged_layout::FORCES]
    }

    pub fn scan(&self) -> &[f64] {
        &self.0[privileged_layout::SCAN]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VelocityCommand {
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
}

impl VelocityCommand {
    pub fn as_array(&self) -> [f64; 3] {
        [self.vx, self.vy, self.yaw_rate]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommandRanges {
    pub vx: [f64; 2],
    pub vy: [f64; 2],
    pub yaw_rate: [f64; 2],
}

impl Default for CommandRanges {
    fn default() -> Self {
        Self { vx: [-1.0, 1.2], vy: [-0.5, 0.5], yaw_rate: [-1.0, 1.0] }
    }
}

impl CommandRanges {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> VelocityCommand {
        VelocityCommand { vx: draw(rng, self.vx), vy: draw(rng, self.vy), yaw_rate: draw(rng, self.yaw_rate) }
    }
}

/// Half-widths of the additive uniform noise on each proprioceptive channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseScales {
    pub ang_vel: f64,
    pub gravity: f64,
    pub joint_pos: f64,
    pub joint_vel: f64,
}

impl Default for NoiseScales {
    fn default() -> Self {
        Self { ang_vel: 0.2, gravity: 0.05, joint_pos: 0.01, joint_vel: 1.5 }
    }
}

impl NoiseScales {
    pub fn zero() -> Self {
        Self { ang_vel: 0.0, gravity: 0.0, joint_pos: 0.0, joint_vel: 0.0 }
    }
}

#[inline]
fn draw<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

#[inline]
fn jitter<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    if scale > 0.0 {
        rng.random_range(-scale..=scale)
    } else {
        0.0
    }
}

pub fn assemble_proprio<R: Rng + ?Sized>(
    state: &RobotState,
    command: &VelocityCommand,
    noise: &NoiseScales,
    rng: &mut R,
) -> ProprioObs {
    let mut o = [0.0; PROPRIO_DIM];
    let g = state.projected_gravity();
    for k in 0..3 {
        o[k] = state.ang_vel[k] + jitter(rng, noise.ang_vel);
    }
    for k in 0..3 {
        o[3 + k] = g[k] + jitter(rng, noise.gravity);
    }
    o[6..9].copy_from_slice(&command.as_array());
    for j in 0..NUM_JOINTS {
        o[9 + j] = state.joint_pos[j] + jitter(rng, noise.joint_pos);
    }
    for j in 0..NUM_JOINTS {
        o[21 + j] = state.joint_vel[j] + jitter(rng, noise.joint_vel);
    }
    o[33..45].copy_from_slice(&state.prev_action);
    ProprioObs(o)
}

pub fn assemble_privileged(
    state: &RobotState,
    proprio: &ProprioObs,
    contacts: &ContactState,
    field: &HeightField,
) -> PrivilegedObs {
    let mut s = [0.0; PRIVILEGED_DIM];
    let v = state.body_lin_vel();
    s[0..3].copy_from_slice(v.as_slice());
    s[privileged_layout::PROPRIO].copy_from_slice(&proprio.0);
    s[privileged_layout::FORCES].copy_from_slice(&contacts.force_vector());
    let (_, _, yaw) = state.euler();
    let scan = sample_height_scan(field, state.position.x, state.position.y, state.position.z, yaw);
    debug_assert_eq!(scan.len(), SCAN_LEN);
    s[privileged_layout::SCAN].copy_from_slice(&scan);
    PrivilegedObs(s)
}

/// Uniform randomisation ranges, one `[lo, hi]` pair per parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandConfig {
    pub payload_kg: [f64; 2],
    pub kp_factor: [f64; 2],
    pub kd_factor: [f64; 2],
    pub com_shift_mm: [f64; 2],
    pub static_friction: [f64; 2],
    pub dynamic_friction: [f64; 2],
    pub init_joint_factor: [f64; 2],
    pub delay_ms: [f64; 2],
    pub camera_shake_deg: [f64; 2],
    pub occlusion_ratio: [f64; 2],
}

impl Default for RandConfig {
    fn default() -> Self {
        Self {
            payload_kg: [-1.0, 3.0],
            kp_factor: [0.9, 1.1],
            kd_factor: [0.9, 1.1],
            com_shift_mm: [-50.0, 50.0],
            static_friction: [0.5, 1.25],
            dynamic_friction: [0.3, 1.1],
            init_joint_factor: [0.5, 1.5],
            delay_ms: [0.0, 20.0],
            camera_shake_deg: [-2.0, 2.0],
            occlusion_ratio: [0.0, 0.4],
        }
    }
}

impl RandConfig {
    /// Every range collapsed onto the nominal value.
    pub fn nominal() -> Self {
        let n = SampledDynamics::nominal();
        let pin = |v: f64| [v, v];
        Self {
            payload_kg: pin(n.payload_kg),
            kp_factor: pin(n.kp_factor),
            kd_factor: pin(n.kd_factor),
            com_shift_mm: pin(0.0),
            static_friction: pin(n.static_friction),
            dynamic_friction: pin(n.dynamic_friction),
            init_joint_factor: pin(n.init_joint_factor),
            delay_ms: pin(n.delay_ms),
            camera_shake_deg: pin(n.camera_shake_deg),
            occlusion_ratio: pin(n.occlusion_ratio),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ranges = [
            ("payload_kg", self.payload_kg),
            ("kp_factor", self.kp_factor),
            ("kd_factor", self.kd_factor),
            ("com_shift_mm", self.com_shift_mm),
            ("static_friction", self.static_friction),
            ("dynamic_friction", self.dynamic_friction),
            ("init_joint_factor", self.init_joint_factor),
            ("delay_ms", self.delay_ms),
            ("camera_shake_deg", self.camera_shake_deg),
            ("occlusion_ratio", self.occlusion_ratio),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(format!("randomization range {name} = [{lo}, {hi}] is invalid"));
            }
        }
        if self.kp_factor[0] <= 0.0 || self.kd_factor[0] <= 0.0 {
            return Err("gain factors must be positive".into());
        }
        if self.delay_ms[0] < 0.0 || self.occlusion_ratio[0] < 0.0 || self.occlusion_ratio[1] > 1.0 {
            return Err("delay must be >= 0 and occlusion ratio within [0, 1]".into());
        }
        Ok(())
    }
}

/// One uniform draw per parameter (the COM shift draws each axis separately).
pub fn sample_randomization<R: Rng + ?Sized>(config: &RandConfig, rng: &mut R) -> SampledDynamics {
    SampledDynamics {
        payload_kg: draw(rng, config.payload_kg),
        kp_factor: draw(rng, config.kp_factor),
        kd_factor: draw(rng, config.kd_factor),
        com_shift: std::array::from_fn(|_| draw(rng, config.com_shift_mm) / 1000.0),
        static_friction: draw(rng, config.static_friction),
        dynamic_friction: draw(rng, config.dynamic_friction),
        init_joint_factor: draw(rng, config.init_joint_factor),
        delay_ms: draw(rng, config.delay_ms),
        camera_shake_deg: draw(rng, config.camera_shake_deg),
        occlusion_ratio: draw(rng, config.occlusion_ratio),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CameraDisturbance {
    /// Random camera rotation within `±max_deg` on each axis.
    Shake { max_deg: f64 },
    /// One axis-aligned max-range rectangle covering `ratio` of the frame.
    Occlusion { ratio: f64 },
    /// Additive per-pixel noise of standard deviation `sigma` (m).
    Gaussian { sigma: f64 },
}

pub fn shake_offset<R: Rng + ?Sized>(max_deg: f64, rng: &mut R) -> CameraOffset {
    let a = max_deg.abs().to_radians();
    CameraOffset { roll: jitter(rng, a), pitch: jitter(rng, a), yaw: jitter(rng, a) }
}

/// Fills a rectangle of `round(ratio * 4096)` pixels (up to half a row or
/// column of quantisation) with max range. Returns the occluded pixel count.
pub fn occlude<R: Rng + ?Sized>(frame: &mut DepthFrame, ratio: f64, rng: &mut R) -> usize {
    let area = (ratio.clamp(0.0, 1.0) * DEPTH_PIXELS as f64).round() as usize;
    if area == 0 {
        return 0;
    }
    let min_w = area.div_ceil(DEPTH_H).max(1);
    let w = rng.random_range(min_w..=DEPTH_W);
    let h = ((area as f64 / w as f64).round() as usize).clamp(1, DEPTH_H);
    let c0 = rng.random_range(0..=DEPTH_W - w);
    let r0 = rng.random_range(0..=DEPTH_H - h);
    let px = frame.pixels_mut();
    for r in r0..r0 + h {
        px[r * DEPTH_W + c0..r * DEPTH_W + c0 + w].fill(DEPTH_MAX);
    }
    w * h
}

pub fn add_gaussian_noise<R: Rng + ?Sized>(frame: &mut DepthFrame, sigma: f64, rng: &mut R) {
    if sigma <= 0.0 {
        return;
    }
    for v in frame.pixels_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v = (*v as f64 + sigma * n) as f32;
    }
    frame.clip();
}

/// Shake acts on the camera pose before ray casting; the other kinds act on
/// the rendered frame.
pub fn apply_camera_disturbance<R: Rng + ?Sized>(
    frame: Option<&mut DepthFrame>,
    offset: Option<&mut CameraOffset>,
    kind: CameraDisturbance,
    rng: &mut R,
) {
    match kind {
        CameraDisturbance::Shake { max_deg } => {
            if let Some(o) = offset {
                let s = shake_offset(max_deg, rng);
                o.roll += s.roll;
                o.pitch += s.pitch;
                o.yaw += s.yaw;
            }
        }
        CameraDisturbance::Occlusion { ratio } => {
            if let Some(f) = frame {
                occlude(f, ratio, rng);
            }
        }
        CameraDisturbance::Gaussian { sigma } => {
            if let Some(f) = frame {
                add_gaussian_noise(f, sigma, rng);
            }
        }
    }
}

/// Physics-step lag for an actuation delay: `ceil(delay / dt)`.
pub fn delay_steps(delay_ms: f64, dt: f64) -> usize {
    let steps = delay_ms / (dt * 1000.0);
    (steps - 1e-9).ceil().max(0.0) as usize
}

/// Holds joint targets for a fixed number of physics steps before they reach
/// the PD loop.
#[derive(Debug, Clone)]
pub struct DelayQueue {
    lag: usize,
    queue: VecDeque<Joints>,
}

impl DelayQueue {
    pub fn new(delay_ms: f64, dt: f64, initial: Joints) -> Self {
        let lag = delay_steps(delay_ms, dt);
        Self { lag, queue: std::iter::repeat_n(initial, lag).collect() }
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    /// Pushes this step's command and returns the one due now.
    pub fn push(&mut self, target: Joints) -> Joints {
        self.queue.push_back(target);
        self.queue.pop_front().expect("queue holds lag + 1 entries")
    }
}

/// Free-function form of [`DelayQueue::push`].
pub fn apply_delay(queue: &mut DelayQueue, target: Joints) -> Joints {
    queue.push(target)
}

/// Last ten proprioceptive observations and last two depth frames.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    proprio: VecDeque<ProprioObs>,
    depth: VecDeque<Arc<DepthFrame>>,
}

impl Default for HistoryBuffer {
    fn default() -> Self {
        Self::new()
    }
}

impl HistoryBuffer {
    pub fn new() -> Self {
        Self { proprio: VecDeque::with_capacity(HISTORY_LEN), depth: VecDeque::with_capacity(DEPTH_HISTORY) }
    }

    pub fn reset(&mut self) {
        self.proprio.clear();
        self.depth.clear();
    }

    pub fn push_proprio(&mut self, obs: ProprioObs) {
        if self.proprio.len() == HISTORY_LEN {
            self.proprio.pop_front();
        }
        self.proprio.push_back(obs);
    }

    pub fn push_depth(&mut self, frame: Arc<DepthFrame>) {
        if self.depth.len() == DEPTH_HISTORY {
            self.depth.pop_front();
        }
        self.depth.push_back(frame);
    }

    pub fn proprio_len(&self) -> usize {
        self.proprio.len()
    }

    /// Oldest to newest, zero-filled at the front until ten steps have elapsed.
    pub fn proprio_history(&self) -> [f64; HISTORY_DIM] {
        let mut out = [0.0; HISTORY_DIM];
        let pad = HISTORY_LEN - self.proprio.len();
        for (k, o) in self.proprio.iter().enumerate() {
            out[(pad + k) * PROPRIO_DIM..(pad + k + 1) * PROPRIO_DIM].copy_from_slice(&o.0);
        }
        out
    }

    pub fn latest_proprio(&self) -> Option<&ProprioObs> {
        self.proprio.back()
    }

    /// (current, previous). Until two frames exist the previous slot repeats the
    /// current frame; `None` before any frame was pushed.
    pub fn depth_pair(&self) -> Option<(Arc<DepthFrame>, Arc<DepthFrame>)> {
        let cur = self.depth.back()?.clone();
        let prev = if self.depth.len() >= 2 { self.depth[self.depth.len() - 2].clone() } else { cur.clone() };
        Some((cur, prev))
    }
}
