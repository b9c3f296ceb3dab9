//! Egocentric depth camera: exact ray casting against the piecewise-constant
//! height field.

use std::io::{self, Write};

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::RobotState;
use crate::terrain::HeightField;

pub const DEPTH_W: usize = 64;
pub const DEPTH_H: usize = 64;
pub const DEPTH_PIXELS: usize = DEPTH_W * DEPTH_H;
pub const DEPTH_MIN: f32 = 0.1;
pub const DEPTH_MAX: f32 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Mount position in the base frame (m).
    pub mount: [f64; 3],
    /// Downward pitch of the optical axis (rad).
    pub pitch: f64,
    pub hfov: f64,
    pub vfov: f64,
    pub min_range: f64,
    pub max_range: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            mount: [0.28, 0.0, 0.05],
            pitch: 0.5,
            hfov: 1.5,
            vfov: 1.0,
            min_range: DEPTH_MIN as f64,
            max_range: DEPTH_MAX as f64,
        }
    }
}

/// Extra rotation of the camera relative to its mount (rad).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CameraOffset {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

/// Row-major 64x64 range image in metres; row 0 is the top of the image.
#[derive(Clone, PartialEq)]
pub struct DepthFrame(Box<[f32; DEPTH_PIXELS]>);

impl std::fmt::Debug for DepthFrame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (lo, hi) = self.0.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        write!(f, "DepthFrame({DEPTH_W}x{DEPTH_H}, min {lo:.3}, max {hi:.3})")
    }
}

impl DepthFrame {
    pub fn filled(depth: f32) -> Self {
        Self(Box::new([depth.clamp(DEPTH_MIN, DEPTH_MAX); DEPTH_PIXELS]))
    }

    pub fn from_vec(values: Vec<f32>) -> Option<Self> {
        let arr: Box<[f32; DEPTH_PIXELS]> = values.into_boxed_slice().try_into().ok()?;
        let mut frame = Self(arr);
        frame.clip();
        Some(frame)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.0[..]
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.0[..]
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.0[row * DEPTH_W + col]
    }

    pub fn clip(&mut self) {
        for v in self.0.iter_mut() {
            *v = if v.is_nan() { DEPTH_MAX } else { v.clamp(DEPTH_MIN, DEPTH_MAX) };
        }
    }

    /// Binary PGM (P5), depth mapped linearly from [0.1, 3.0] m to [0, 255].
    pub fn write_pgm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P5\n{DEPTH_W} {DEPTH_H}\n255\n")?;
        let bytes: Vec<u8> = self
            .0
            .iter()
            .map(|&d| (((d - DEPTH_MIN) / (DEPTH_MAX - DEPTH_MIN)) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        w.write_all(&bytes)
    }
}

/// Distance along the unit direction `dir` from `origin` to the first terrain
/// surface, or `None` when nothing is hit within `max_t`.
///
/// Walks the grid cells crossed by the ray's horizontal projection; within a
/// cell the surface is either the vertical wall at the cell boundary or the
/// horizontal top face.
pub fn raycast(field: &HeightField, origin: &Vector3<f64>, dir: &Vector3<f64>, max_t: f64) -> Option<f64> {
    let cs = field.cell_size();
    let [ox, oy] = field.origin();
    let (cx, cy) = field.cell_coords(origin.x, origin.y);
    let mut ix = cx.floor() as i64;
    let mut iy = cy.floor() as i64;
    let axis = |d: f64, o: f64, grid_o: f64, i: i64| -> (i64, f64, f64) {
        if d > 0.0 {
            (1, ((i + 1) as f64 * cs + grid_o - o) / d, cs / d)
        } else if d < 0.0 {
            (-1, (i as f64 * cs + grid_o - o) / d, -cs / d)
        } else {
            (0, f64::INFINITY, f64::INFINITY)
        }
    };
    let (step_x, mut next_x, delta_x) = axis(dir.x, origin.x, ox, ix);
    let (step_y, mut next_y, delta_y) = axis(dir.y, origin.y, oy, iy);
    let mut t_enter = 0.0;
    loop {
        let t_exit = next_x.min(next_y).min(max_t);
        let h = field.height_at_index(ix, iy);
        if origin.z + t_enter * dir.z <= h {
            return Some(t_enter);
        }
        if dir.z < 0.0 {
            let t_hit = (h - origin.z) / dir.z;
            if t_hit <= t_exit {
                return Some(t_hit);
            }
        }
        if t_exit >= max_t {
            return None;
        }
        if next_x < next_y {
            ix += step_x;
            t_enter = next_x;
            next_x += delta_x;
        } else {
            iy += step_y;
            t_enter = next_y;
            next_y += delta_y;
        }
    }
}

impl CameraModel {
    /// World pose (position, rotation) of the camera under `offset`.
    pub fn world_pose(&self, state: &RobotState, offset: &CameraOffset) -> (Vector3<f64>, UnitQuaternion<f64>) {
        let mount = Vector3::from(self.mount);
        let pos = state.position + state.orientation * mount;
        let rot = state.orientation
            * UnitQuaternion::from_euler_angles(0.0, self.pitch, 0.0)
            * UnitQuaternion::from_euler_angles(offset.roll, offset.pitch, offset.yaw);
        (pos, rot)
    }

    /// Unit ray direction of pixel (row, col) in the camera frame (x forward,
    /// y left, z up).
    pub fn pixel_ray(&self, row: usize, col: usize) -> Vector3<f64> {
        let u = (col as f64 + 0.5) / DEPTH_W as f64 * 2.0 - 1.0;
        let v = (row as f64 + 0.5) / DEPTH_H as f64 * 2.0 - 1.0;
        Vector3::new(1.0, -u * (self.hfov / 2.0).tan(), -v * (self.vfov / 2.0).tan()).normalize()
    }
}

/// Ranges clipped to `[min_range, max_range]`; rays without a hit read max range.
pub fn render_depth(state: &RobotState, field: &HeightField, camera: &CameraModel, offset: &CameraOffset) -> DepthFrame {
    let (pos, rot) = camera.world_pose(state, offset);
    let mut frame = DepthFrame::filled(camera.max_range as f32);
    let px = frame.pixels_mut();
    for row in 0..DEPTH_H {
        for col in 0..DEPTH_W {
            let dir = rot * camera.pixel_ray(row, col);
            let d = raycast(field, &pos, &dir, camera.max_range)
                .map_or(camera.max_range, |t| t.clamp(camera.min_range, camera.max_range));
            px[row * DEPTH_W + col] = d as f32;
        }
    }
    frame
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::SimConfig;

    fn flat(h: f32) -> HeightField {
        HeightField::flat(200, 200, 0.05, [-5.0, -5.0], h)
    }

    fn state_at(z: f64) -> RobotState {
        RobotState::at_pose(Vector3::new(0.0, 0.0, z), 0.0, SimConfig::default().default_pose)
    }

    #[test]
    fn open_sky_reads_max_range() {
        let cam = CameraModel { pitch: -1.0, vfov: 0.8, ..CameraModel::default() };
        let f = render_depth(&state_at(0.3), &flat(0.0), &cam, &CameraOffset::default());
        assert!(f.pixels().iter().all(|&d| d == 3.0));
    }

    #[test]
    fn flat_ground_matches_plane_intersection() {
        let cam = CameraModel { mount: [0.0, 0.0, 0.0], pitch: 0.9, ..CameraModel::default() };
        let state = state_at(0.4);
        let f = render_depth(&state, &flat(0.0), &cam, &CameraOffset::default());
        let (_, rot) = cam.world_pose(&state, &CameraOffset::default());
        let mut checked = 0;
        for row in 0..DEPTH_H {
            for col in 0..DEPTH_W {
                let dir = rot * cam.pixel_ray(row, col);
                let declination = (-dir.z).asin();
                if declination <= 0.0 {
                    continue;
                }
                let want = (0.4 / declination.sin()).clamp(0.1, 3.0);
                let got = f.at(row, col) as f64;
                assert!((got - want).abs() <= 1e-6 * want.max(1.0), "({row},{col}) {got} vs {want}");
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn wall_is_hit_on_its_face() {
        let mut heights = vec![0.0f32; 200 * 200];
        for r in 0..200 {
            for c in 120..200 {
                heights[r * 200 + c] = 1.0;
            }
        }
        // wall face at x = -5 + 120 * 0.05 = 1.0
        let field = HeightField::new(200, 200, 0.05, [-5.0, -5.0], heights).unwrap();
        let t = raycast(&field, &Vector3::new(0.0, 0.0, 0.5), &Vector3::new(1.0, 0.0, 0.0), 3.0).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        let d = Vector3::new(1.0, 1.0, 0.0).normalize();
        let t = raycast(&field, &Vector3::new(0.0, 0.0, 0.5), &d, 3.0).unwrap();
        assert!((t - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let g = crate::terrain::generate_terrain(
            &crate::terrain::TerrainSpec::new(crate::terrain::TerrainKind::Boxes, 0.9, 5, 2).unwrap(),
        );
        let cam = CameraModel::default();
        let s = state_at(0.32);
        let a = render_depth(&s, &g, &cam, &CameraOffset::default());
        let b = render_depth(&s, &g, &cam, &CameraOffset::default());
        assert_eq!(a, b);
        assert!(a.pixels().iter().all(|&d| (0.1..=3.0).contains(&d)));
    }

    #[test]
    fn pgm_header_and_size() {
        let mut buf = Vec::new();
        DepthFrame::filled(3.0).write_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n64 64\n255\n"));
        assert_eq!(buf.len(), 13 + DEPTH_PIXELS);
        assert!(buf[13..].iter().all(|&b| b == 255));
    }
}
