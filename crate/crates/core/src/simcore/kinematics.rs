//! Leg geometry and forward kinematics.
//!
//! Every leg is an abduction joint about body x followed by hip and knee pitch
//! joints about the (abducted) y axis. Joint order is `[abd, hip, knee]` per leg,
//! legs ordered FL, FR, RL, RR.

use nalgebra::{Matrix3, Vector3};

use super::{Joints, RobotState, NUM_LEGS};

pub const LEG_NAMES: [&str; NUM_LEGS] = ["FL", "FR", "RL", "RR"];

#[derive(Debug, Clone, PartialEq)]
pub struct LegGeometry {
    /// Abduction joint positions in the base frame.
    pub hip_offsets: [Vector3<f64>; NUM_LEGS],
    /// Lateral offset from the abduction axis to the thigh plane (m).
    pub abduction_offset: f64,
    pub thigh: f64,
    pub calf: f64,
}

impl Default for LegGeometry {
    fn default() -> Self {
        Self {
            hip_offsets: [
                Vector3::new(0.19, 0.05, 0.0),
                Vector3::new(0.19, -0.05, 0.0),
                Vector3::new(-0.19, 0.05, 0.0),
                Vector3::new(-0.19, -0.05, 0.0),
            ],
            abduction_offset: 0.08,
            thigh: 0.2,
            calf: 0.2,
        }
    }
}

impl LegGeometry {
    #[inline]
    pub fn side(leg: usize) -> f64 {
        if leg % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Foot position in the base frame and its 3x3 Jacobian w.r.t. the leg joints.
    pub fn foot(&self, leg: usize, q: [f64; 3]) -> (Vector3<f64>, Matrix3<f64>) {
        let (s0, c0) = q[0].sin_cos();
        let (s1, c1) = q[1].sin_cos();
        let (s12, c12) = (q[1] + q[2]).sin_cos();
        let (l1, l2) = (self.thigh, self.calf);
        let py0 = Self::side(leg) * self.abduction_offset;
        let px = -l1 * s1 - l2 * s12;
        let pz = -l1 * c1 - l2 * c12;
        let y = py0 * c0 - pz * s0;
        let z = py0 * s0 + pz * c0;
        let pos = self.hip_offsets[leg] + Vector3::new(px, y, z);

        let d1x = -l1 * c1 - l2 * c12;
        let d1z = l1 * s1 + l2 * s12;
        let d2x = -l2 * c12;
        let d2z = l2 * s12;
        // abduction column uses coordinates relative to the abduction axis
        let jac = Matrix3::new(
            0.0, d1x, d2x, //
            -z, -d1z * s0, -d2z * s0, //
            y, d1z * c0, d2z * c0,
        );
        (pos, jac)
    }

    /// Knee position in the base frame and its Jacobian (knee column is zero).
    pub fn knee(&self, leg: usize, q: [f64; 3]) -> (Vector3<f64>, Matrix3<f64>) {
        let (s0, c0) = q[0].sin_cos();
        let (s1, c1) = q[1].sin_cos();
        let l1 = self.thigh;
        let py0 = Self::side(leg) * self.abduction_offset;
        let px = -l1 * s1;
        let pz = -l1 * c1;
        let y = py0 * c0 - pz * s0;
        let z = py0 * s0 + pz * c0;
        let pos = self.hip_offsets[leg] + Vector3::new(px, y, z);
        let d1x = -l1 * c1;
        let d1z = l1 * s1;
        let jac = Matrix3::new(
            0.0, d1x, 0.0, //
            -z, -d1z * s0, 0.0, //
            y, d1z * c0, 0.0,
        );
        (pos, jac)
    }
}

#[inline]
pub fn leg_joints(q: &Joints, leg: usize) -> [f64; 3] {
    [q[3 * leg], q[3 * leg + 1], q[3 * leg + 2]]
}

/// World positions of the four feet.
pub fn compute_foot_positions(state: &RobotState, geom: &LegGeometry) -> [Vector3<f64>; NUM_LEGS] {
    let rot = state.orientation.to_rotation_matrix();
    std::array::from_fn(|leg| {
        let (p, _) = geom.foot(leg, leg_joints(&state.joint_pos, leg));
        state.position + rot * p
    })
}
