//! Simplified quadruped dynamics.
//!
//! The base is a single rigid body; legs are massless kinematic chains whose
//! joints carry a reflected rotor inertia. Ground interaction is a one-sided
//! spring-damper at every contact proxy (feet, knees, base corners) with a
//! Coulomb friction cap. Contact damping is integrated linearly-implicitly over
//! the full 18-dof velocity vector so stiff contacts stay stable at the 5 ms
//! physics step; everything else is semi-implicit Euler.

mod camera;
mod kinematics;

pub use camera::{raycast, render_depth, CameraModel, CameraOffset, DepthFrame, DEPTH_H, DEPTH_MAX, DEPTH_MIN, DEPTH_PIXELS, DEPTH_W};
pub use kinematics::{compute_foot_positions, leg_joints, LegGeometry, LEG_NAMES};

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::terrain::HeightField;

pub const NUM_LEGS: usize = 4;
pub const NUM_JOINTS: usize = 12;
pub const GRAVITY: f64 = 9.81;
/// Generalised velocity: COM linear velocity (world), angular velocity (body), joints.
const NDOF: usize = 6 + NUM_JOINTS;
/// Doubles in [`RobotState::to_vec`].
pub const STATE_LEN: usize = 3 + 4 + 3 + 3 + 4 * NUM_JOINTS;

pub type Joints = [f64; NUM_JOINTS];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation diverged: non-finite state after step")]
    Divergence,
    #[error("state vector has length {0}, expected {STATE_LEN}")]
    BadStateLength(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self { kp: 30.0, kd: 1.0 }
    }
}

impl PdGains {
    pub fn scaled(&self, kp_factor: f64, kd_factor: f64) -> Self {
        Self { kp: self.kp * kp_factor, kd: self.kd * kd_factor }
    }
}

/// `Kp (target - pos) - Kd vel`, clipped elementwise to `±torque_limit`.
pub fn pd_torques(
    target: &Joints,
    pos: &Joints,
    vel: &Joints,
    gains: PdGains,
    torque_limit: f64,
) -> Joints {
    std::array::from_fn(|j| {
        (gains.kp * (target[j] - pos[j]) - gains.kd * vel[j]).clamp(-torque_limit, torque_limit)
    })
}

/// `default + scale * action`, clipped into the joint limits.
pub fn action_to_targets(action: &Joints, cfg: &SimConfig) -> Joints {
    std::array::from_fn(|j| {
        (cfg.default_pose[j] + cfg.action_scale * action[j]).clamp(cfg.joint_lower[j], cfg.joint_upper[j])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Physics step (s).
    pub dt: f64,
    /// Physics steps per policy step.
    pub decimation: usize,
    /// Policy steps per depth refresh.
    pub depth_decimation: usize,
    pub torque_limit: f64,
    pub action_scale: f64,
    pub default_pose: Joints,
    pub joint_lower: Joints,
    pub joint_upper: Joints,
    pub gains: PdGains,
}

impl Default for SimConfig {
    fn default() -> Self {
        let leg = |a: f64, b: f64, c: f64| [a, b, c, a, b, c, a, b, c, a, b, c];
        Self {
            dt: 0.005,
            decimation: 4,
            depth_decimation: 5,
            torque_limit: 30.0,
            action_scale: 0.25,
            default_pose: leg(0.0, 0.6, -1.2),
            joint_lower: leg(-0.8, -1.0, -2.6),
            joint_upper: leg(0.8, 2.2, -0.4),
            gains: PdGains::default(),
        }
    }
}

impl SimConfig {
    pub fn policy_dt(&self) -> f64 {
        self.dt * self.decimation as f64
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.dt > 0.0) || self.decimation == 0 || self.depth_decimation == 0 {
            return Err("dt must be positive and decimations at least 1".into());
        }
        if !(self.gains.kp > 0.0 && self.gains.kd > 0.0) {
            return Err("PD gains must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactParams {
    /// Normal stiffness (N/m).
    pub stiffness: f64,
    /// Normal damping (N s/m).
    pub damping: f64,
    /// Tangential viscous coefficient below the friction cap (N s/m). Large
    /// enough that, integrated implicitly, a loaded foot effectively sticks.
    pub tangential_damping: f64,
    /// Penetrations deeper than this are resolved sideways against cell walls (m).
    pub side_threshold: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        Self { stiffness: 5000.0, damping: 200.0, tangential_damping: 20000.0, side_threshold: 0.03 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub base_mass: f64,
    /// Principal inertia about the COM (kg m^2).
    pub base_inertia: Vector3<f64>,
    /// Nominal COM in the base frame. Slightly forward of the hip centre so
    /// that it sits over the feet once the knees sag under load.
    pub com_offset: Vector3<f64>,
    /// Reflected inertia of each joint (kg m^2).
    pub joint_inertia: f64,
    pub legs: LegGeometry,
    /// Base collision proxies in the base frame.
    pub base_points: [Vector3<f64>; 4],
    pub contact: ContactParams,
}

impl Default for RobotModel {
    fn default() -> Self {
        Self {
            base_mass: 12.0,
            base_inertia: Vector3::new(0.1125, 0.38, 0.45),
            com_offset: Vector3::new(0.03, 0.0, 0.0),
            joint_inertia: 0.02,
            legs: LegGeometry::default(),
            base_points: [
                Vector3::new(0.24, 0.08, -0.06),
                Vector3::new(0.24, -0.08, -0.06),
                Vector3::new(-0.24, 0.08, -0.06),
                Vector3::new(-0.24, -0.08, -0.06),
            ],
            contact: ContactParams::default(),
        }
    }
}

/// Per-episode physical parameters drawn by domain randomisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampledDynamics {
    pub payload_kg: f64,
    pub kp_factor: f64,
    pub kd_factor: f64,
    /// COM shift in the base frame (m).
    pub com_shift: [f64; 3],
    pub static_friction: f64,
    pub dynamic_friction: f64,
    /// Multiplies the default pose for the initial joint configuration.
    pub init_joint_factor: f64,
    pub delay_ms: f64,
    /// Per-frame camera jitter amplitude (deg).
    pub camera_shake_deg: f64,
    pub occlusion_ratio: f64,
}

impl Default for SampledDynamics {
    fn default() -> Self {
        Self::nominal()
    }
}

impl SampledDynamics {
    pub const fn nominal() -> Self {
        Self {
            payload_kg: 0.0,
            kp_factor: 1.0,
            kd_factor: 1.0,
            com_shift: [0.0; 3],
            static_friction: 1.0,
            dynamic_friction: 0.8,
            init_joint_factor: 1.0,
            delay_ms: 0.0,
            camera_shake_deg: 0.0,
            occlusion_ratio: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    /// Base frame origin (world, m).
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    /// Base origin linear velocity (world, m/s).
    pub lin_vel: Vector3<f64>,
    /// Angular velocity (base frame, rad/s).
    pub ang_vel: Vector3<f64>,
    pub joint_pos: Joints,
    pub joint_vel: Joints,
    pub prev_action: Joints,
    pub prev_prev_action: Joints,
}

impl RobotState {
    pub fn at_pose(position: Vector3<f64>, yaw: f64, joint_pos: Joints) -> Self {
        Self {
            position,
            orientation: UnitQuaternion::from_euler_angles(0.0, 0.0, yaw),
            lin_vel: Vector3::zeros(),
            ang_vel: Vector3::zeros(),
            joint_pos,
            joint_vel: [0.0; NUM_JOINTS],
            prev_action: [0.0; NUM_JOINTS],
            prev_prev_action: [0.0; NUM_JOINTS],
        }
    }

    /// Linear velocity in the base frame.
    pub fn body_lin_vel(&self) -> Vector3<f64> {
        self.orientation.inverse_transform_vector(&self.lin_vel)
    }

    /// World `-z` expressed in the base frame.
    pub fn projected_gravity(&self) -> Vector3<f64> {
        self.orientation.inverse_transform_vector(&Vector3::new(0.0, 0.0, -1.0))
    }

    /// (roll, pitch, yaw).
    pub fn euler(&self) -> (f64, f64, f64) {
        self.orientation.euler_angles()
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    /// Flat layout: position, quaternion (w, x, y, z), world linear velocity,
    /// body angular velocity, joint positions, joint velocities, previous and
    /// previous-previous actions.
    pub fn to_vec(&self) -> Vec<f64> {
        let q = self.orientation.quaternion();
        let mut v = Vec::with_capacity(STATE_LEN);
        v.extend_from_slice(self.position.as_slice());
        v.extend_from_slice(&[q.w, q.i, q.j, q.k]);
        v.extend_from_slice(self.lin_vel.as_slice());
        v.extend_from_slice(self.ang_vel.as_slice());
        v.extend_from_slice(&self.joint_pos);
        v.extend_from_slice(&self.joint_vel);
        v.extend_from_slice(&self.prev_action);
        v.extend_from_slice(&self.prev_prev_action);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self, SimError> {
        if v.len() != STATE_LEN {
            return Err(SimError::BadStateLength(v.len()));
        }
        let j = |o: usize| -> Joints { std::array::from_fn(|k| v[o + k]) };
        Ok(Self {
            position: Vector3::new(v[0], v[1], v[2]),
            orientation: UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(v[3], v[4], v[5], v[6])),
            lin_vel: Vector3::new(v[7], v[8], v[9]),
            ang_vel: Vector3::new(v[10], v[11], v[12]),
            joint_pos: j(13),
            joint_vel: j(25),
            prev_action: j(37),
            prev_prev_action: j(49),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FootContact {
    pub in_contact: bool,
    /// Magnitude of the horizontal contact force (N).
    pub f_xy: f64,
    /// Vertical contact force (N), never negative.
    pub f_z: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ContactState {
    pub feet: [FootContact; NUM_LEGS],
    /// Knee and base proxies touching the terrain.
    pub knee_contacts: u32,
    pub base_contact: bool,
}

impl ContactState {
    /// `[f_xy, f_z]` per foot, feet in FL, FR, RL, RR order.
    pub fn force_vector(&self) -> [f64; 8] {
        let mut out = [0.0; 8];
        for (i, f) in self.feet.iter().enumerate() {
            out[2 * i] = f.f_xy;
            out[2 * i + 1] = f.f_z;
        }
        out
    }

    /// Non-foot body contacts with the terrain.
    pub fn collision_count(&self) -> u32 {
        self.knee_contacts + u32::from(self.base_contact)
    }
}

/// Force on one contact proxy together with the velocity Jacobian of the
/// force (`-damping`) used by the implicit update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactForce {
    pub force: Vector3<f64>,
    pub damping: Matrix3<f64>,
    pub penetration: f64,
    /// Vertical spring-damper branch (false: pushed out sideways through a cell wall).
    pub vertical: bool,
}

/// One-sided spring-damper contact against the piecewise-constant field.
///
/// With penetration `d = h - z` the normal force is `k d - c v_z`, floored at
/// zero (`v_z` is the point's vertical velocity, negative while sinking). A
/// positive `dt` evaluates the spring at the end of the step instead
/// (`k (d - v_z dt)`), contributing `k dt` to the damping returned for the
/// implicit update, and activates the contact once that predicted penetration
/// is positive. The
/// horizontal force is viscous until it reaches `mu_s f_z`, then slides at
/// `mu_d f_z`. Points more than `side_threshold` below the cell top are pushed
/// horizontally out through the nearest wall whose neighbour is lower.
pub fn contact_force(
    field: &HeightField,
    p: &Vector3<f64>,
    v: &Vector3<f64>,
    params: &ContactParams,
    mu_s: f64,
    mu_d: f64,
    dt: f64,
) -> Option<ContactForce> {
    let cs = field.cell_size();
    let (cx, cy) = field.cell_coords(p.x, p.y);
    let (ix, iy) = (cx.floor() as i64, cy.floor() as i64);
    let h = field.height_at_index(ix, iy);
    let d = h - p.z;
    if d - v.z * dt <= 0.0 {
        return None;
    }
    let c_eff = params.damping + params.stiffness * dt;
    if d > params.side_threshold {
        let (fx, fy) = (cx - ix as f64, cy - iy as f64);
        let faces = [
            (fx * cs, Vector3::new(-1.0, 0.0, 0.0), (ix - 1, iy)),
            ((1.0 - fx) * cs, Vector3::new(1.0, 0.0, 0.0), (ix + 1, iy)),
            (fy * cs, Vector3::new(0.0, -1.0, 0.0), (ix, iy - 1)),
            ((1.0 - fy) * cs, Vector3::new(0.0, 1.0, 0.0), (ix, iy + 1)),
        ];
        let best = faces
            .iter()
            .filter(|(_, _, (nx, ny))| field.height_at_index(*nx, *ny) <= p.z + params.side_threshold)
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((dist, n, _)) = best {
            let fnorm = params.stiffness * dist - c_eff * v.dot(n);
            let (force, damping) = if fnorm > 0.0 {
                (n * fnorm, n * n.transpose() * c_eff)
            } else {
                (Vector3::zeros(), Matrix3::zeros())
            };
            return Some(ContactForce { force, damping, penetration: *dist, vertical: false });
        }
    }
    let fz = params.stiffness * d - c_eff * v.z;
    if fz <= 0.0 {
        return Some(ContactForce { force: Vector3::zeros(), damping: Matrix3::zeros(), penetration: d.max(0.0), vertical: true });
    }
    let mut damping = Matrix3::zeros();
    damping[(2, 2)] = c_eff;
    let vt = Vector3::new(v.x, v.y, 0.0);
    let sticky = vt * -params.tangential_damping;
    let cap = mu_s * fz;
    let ft = if sticky.norm() <= cap {
        damping[(0, 0)] = params.tangential_damping;
        damping[(1, 1)] = params.tangential_damping;
        sticky
    } else {
        -vt.normalize() * (mu_d.min(mu_s) * fz)
    };
    Some(ContactForce { force: Vector3::new(ft.x, ft.y, fz), damping, penetration: d, vertical: true })
}

#[derive(Debug, Clone, Copy)]
enum Proxy {
    Foot(usize),
    Knee(usize),
    Base(usize),
}

const PROXIES: [Proxy; 12] = [
    Proxy::Foot(0),
    Proxy::Foot(1),
    Proxy::Foot(2),
    Proxy::Foot(3),
    Proxy::Knee(0),
    Proxy::Knee(1),
    Proxy::Knee(2),
    Proxy::Knee(3),
    Proxy::Base(0),
    Proxy::Base(1),
    Proxy::Base(2),
    Proxy::Base(3),
];

#[inline]
fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Model plus timing: advances [`RobotState`] by one physics step.
#[derive(Debug, Clone, Default)]
pub struct Simulator {
    pub model: RobotModel,
    pub config: SimConfig,
}

impl Simulator {
    pub fn new(model: RobotModel, config: SimConfig) -> Self {
        Self { model, config }
    }

    fn mass(&self, dynamics: &SampledDynamics) -> f64 {
        self.model.base_mass + dynamics.payload_kg
    }

    fn inertia(&self, dynamics: &SampledDynamics) -> Vector3<f64> {
        self.model.base_inertia * (self.mass(dynamics) / self.model.base_mass)
    }

    /// Base-frame position and leg Jacobian of a contact proxy.
    fn proxy(&self, proxy: Proxy, q: &Joints) -> (Vector3<f64>, Option<(usize, Matrix3<f64>)>) {
        match proxy {
            Proxy::Foot(l) => {
                let (p, j) = self.model.legs.foot(l, leg_joints(q, l));
                (p, Some((l, j)))
            }
            Proxy::Knee(l) => {
                let (p, j) = self.model.legs.knee(l, leg_joints(q, l));
                (p, Some((l, j)))
            }
            Proxy::Base(i) => (self.model.base_points[i], None),
        }
    }

    /// Advances one physics step under joint torques `tau`.
    pub fn step(
        &self,
        state: &RobotState,
        tau: &Joints,
        field: &HeightField,
        dynamics: &SampledDynamics,
    ) -> Result<(RobotState, ContactState), SimError> {
        let dt = self.config.dt;
        let mass = self.mass(dynamics);
        let inertia = self.inertia(dynamics);
        let com = self.model.com_offset + Vector3::from(dynamics.com_shift);
        let rot = state.orientation.to_rotation_matrix();
        let r = *rot.matrix();
        let w = state.ang_vel;
        let p_com = state.position + r * com;
        let v_com = state.lin_vel + r * w.cross(&com);

        let mut f = SVector::<f64, NDOF>::zeros();
        let mut damp = SMatrix::<f64, NDOF, NDOF>::zeros();
        f[2] = -mass * GRAVITY;
        let gyro = -w.cross(&inertia.component_mul(&w));
        f.fixed_rows_mut::<3>(3).copy_from(&gyro);
        for j in 0..NUM_JOINTS {
            f[6 + j] = tau[j];
        }

        let mut contacts = ContactState::default();
        for proxy in PROXIES {
            let (pb, leg) = self.proxy(proxy, &state.joint_pos);
            let rel = pb - com;
            let p = p_com + r * rel;
            let mut v = v_com + r * w.cross(&rel);
            if let Some((l, jl)) = leg {
                let qd = Vector3::new(state.joint_vel[3 * l], state.joint_vel[3 * l + 1], state.joint_vel[3 * l + 2]);
                v += r * (jl * qd);
            }
            let Some(cf) = contact_force(
                field,
                &p,
                &v,
                &self.model.contact,
                dynamics.static_friction,
                dynamics.dynamic_friction,
                dt,
            ) else {
                continue;
            };
            match proxy {
                Proxy::Foot(l) => {
                    contacts.feet[l] = FootContact {
                        in_contact: true,
                        f_xy: cf.force.xy().norm(),
                        f_z: cf.force.z.max(0.0),
                    };
                }
                Proxy::Knee(_) => contacts.knee_contacts += 1,
                Proxy::Base(_) => contacts.base_contact = true,
            }
            let mut jc = SMatrix::<f64, 3, NDOF>::zeros();
            jc.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            jc.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r * skew(&rel)));
            if let Some((l, jl)) = leg {
                jc.fixed_view_mut::<3, 3>(0, 6 + 3 * l).copy_from(&(r * jl));
            }
            f += jc.transpose() * cf.force;
            if cf.damping != Matrix3::zeros() {
                damp += jc.transpose() * cf.damping * jc;
            }
        }

        let mut a = damp * dt;
        for k in 0..3 {
            a[(k, k)] += mass;
            a[(3 + k, 3 + k)] += inertia[k];
        }
        for j in 0..NUM_JOINTS {
            a[(6 + j, 6 + j)] += self.model.joint_inertia;
        }
        let du = a.cholesky().ok_or(SimError::Divergence)?.solve(&(f * dt));

        let v_com_next = v_com + Vector3::new(du[0], du[1], du[2]);
        let w_next = w + Vector3::new(du[3], du[4], du[5]);
        let p_com_next = p_com + v_com_next * dt;
        let dq = UnitQuaternion::from_scaled_axis(w_next * dt);
        let orientation = UnitQuaternion::new_normalize((state.orientation * dq).into_inner());
        let r_next = orientation.to_rotation_matrix();

        let mut joint_pos = state.joint_pos;
        let mut joint_vel = state.joint_vel;
        for j in 0..NUM_JOINTS {
            joint_vel[j] += du[6 + j];
            joint_pos[j] += joint_vel[j] * dt;
            let (lo, hi) = (self.config.joint_lower[j], self.config.joint_upper[j]);
            if joint_pos[j] < lo {
                joint_pos[j] = lo;
                joint_vel[j] = joint_vel[j].max(0.0);
            } else if joint_pos[j] > hi {
                joint_pos[j] = hi;
                joint_vel[j] = joint_vel[j].min(0.0);
            }
        }

        let next = RobotState {
            position: p_com_next - r_next * com,
            orientation,
            lin_vel: v_com_next - r_next * w_next.cross(&com),
            ang_vel: w_next,
            joint_pos,
            joint_vel,
            prev_action: state.prev_action,
            prev_prev_action: state.prev_prev_action,
        };
        if !next.is_finite() {
            return Err(SimError::Divergence);
        }
        Ok((next, contacts))
    }

    /// Kinetic + gravitational + contact-spring energy (J).
    pub fn mechanical_energy(&self, state: &RobotState, field: &HeightField, dynamics: &SampledDynamics) -> f64 {
        let mass = self.mass(dynamics);
        let inertia = self.inertia(dynamics);
        let com = self.model.com_offset + Vector3::from(dynamics.com_shift);
        let r = *state.orientation.to_rotation_matrix().matrix();
        let w = state.ang_vel;
        let p_com = state.position + r * com;
        let v_com = state.lin_vel + r * w.cross(&com);
        let mut e = 0.5 * mass * v_com.norm_squared()
            + 0.5 * w.dot(&inertia.component_mul(&w))
            + 0.5 * self.model.joint_inertia * state.joint_vel.iter().map(|v| v * v).sum::<f64>()
            + mass * GRAVITY * p_com.z;
        for proxy in PROXIES {
            let (pb, _) = self.proxy(proxy, &state.joint_pos);
            let p = state.position + r * pb;
            if let Some(cf) = contact_force(field, &p, &Vector3::zeros(), &self.model.contact, 0.0, 0.0, 0.0) {
                e += 0.5 * self.model.contact.stiffness * cf.penetration * cf.penetration;
            }
        }
        e
    }

    /// A level, static robot at `(x, y)` whose joints already sag into the PD
    /// equilibrium under an even weight split, feet resting on the terrain.
    pub fn standing_state(&self, field: &HeightField, x: f64, y: f64, yaw: f64, dynamics: &SampledDynamics) -> RobotState {
        let gains = self.config.gains.scaled(dynamics.kp_factor, dynamics.kd_factor);
        let fz = self.mass(dynamics) * GRAVITY / NUM_LEGS as f64;
        let mut q = self.config.default_pose.map(|v| v * dynamics.init_joint_factor);
        for j in 0..NUM_JOINTS {
            q[j] = q[j].clamp(self.config.joint_lower[j], self.config.joint_upper[j]);
        }
        let start = q;
        let fb = Vector3::new(0.0, 0.0, fz);
        for _ in 0..40 {
            for l in 0..NUM_LEGS {
                let (_, jl) = self.model.legs.foot(l, leg_joints(&q, l));
                let t = jl.transpose() * fb;
                for k in 0..3 {
                    let j = 3 * l + k;
                    q[j] = (start[j] + t[k] / gains.kp).clamp(self.config.joint_lower[j], self.config.joint_upper[j]);
                }
            }
        }
        let penetration = fz / self.model.contact.stiffness;
        let probe = RobotState::at_pose(Vector3::new(x, y, 0.0), yaw, q);
        let r = probe.orientation.to_rotation_matrix();
        let mut z = f64::NEG_INFINITY;
        for l in 0..NUM_LEGS {
            let (pb, _) = self.model.legs.foot(l, leg_joints(&q, l));
            let pw = probe.position + r * pb;
            z = z.max(field.height_clamped(pw.x, pw.y) - penetration - pw.z);
        }
        RobotState::at_pose(Vector3::new(x, y, z), yaw, q)
    }
}
