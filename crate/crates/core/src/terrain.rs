//! Procedural terrain families, height queries, base-centric height scans and the
//! per-environment terrain curriculum.
//!
//! Heights are stored as `f32` on a regular grid and interpreted as piecewise
//! constant: every point inside a cell has that cell's elevation. This lets the
//! depth raycaster intersect the field exactly.

use std::io::{self, Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of a generated terrain tile (m).
pub const TILE_SIZE: f64 = 8.0;
/// Cell size of generated terrain (m).
pub const CELL_SIZE: f64 = 0.05;
/// Half-width of the flat spawn platform at the tile centre (m).
pub const SPAWN_HALF_WIDTH: f64 = 0.5;
/// Horizontal tread depth of one stair step (m).
pub const STEP_WIDTH: f64 = 0.3;
/// Depth of gap trenches below the platforms (m).
pub const GAP_DEPTH: f64 = 1.0;
/// Width of the platform rings separating gap trenches (m).
pub const GAP_PLATFORM_WIDTH: f64 = 1.0;
pub const MAX_OBSTACLES: u32 = 5;

/// Height scan layout: `SCAN_NX` points along the body x axis times `SCAN_NY`
/// points along body y, `SCAN_SPACING` apart and centred on the base.
pub const SCAN_NX: usize = 17;
pub const SCAN_NY: usize = 11;
pub const SCAN_SPACING: f64 = 0.1;
pub const SCAN_LEN: usize = SCAN_NX * SCAN_NY;
pub const SCAN_CLIP: f64 = 1.0;

const HF_MAGIC: &[u8; 8] = b"KIVI-HF1";

#[derive(Debug, Error)]
pub enum TerrainError {
    #[error("point ({x:.3}, {y:.3}) lies outside the height field")]
    OutOfBounds { x: f64, y: f64 },
    #[error("invalid terrain spec: {0}")]
    InvalidSpec(String),
    #[error("invalid height field: {0}")]
    InvalidField(String),
    #[error("unknown terrain kind `{0}`")]
    UnknownKind(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Regular grid of elevations. `heights[row * cols + col]`, rows run along +y and
/// columns along +x starting from `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightField {
    rows: usize,
    cols: usize,
    cell_size: f64,
    origin: [f64; 2],
    heights: Vec<f32>,
}

impl HeightField {
    pub fn new(
        rows: usize,
        cols: usize,
        cell_size: f64,
        origin: [f64; 2],
        heights: Vec<f32>,
    ) -> Result<Self, TerrainError> {
        if rows == 0 || cols == 0 {
            return Err(TerrainError::InvalidField("grid must be non-empty".into()));
        }
        if heights.len() != rows * cols {
            return Err(TerrainError::InvalidField(format!(
                "expected {} heights, got {}",
                rows * cols,
                heights.len()
            )));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(TerrainError::InvalidField("cell size must be positive".into()));
        }
        if !origin.iter().all(|v| v.is_finite()) || !heights.iter().all(|h| h.is_finite()) {
            return Err(TerrainError::InvalidField("non-finite value".into()));
        }
        Ok(Self { rows, cols, cell_size, origin, heights })
    }

    pub fn flat(rows: usize, cols: usize, cell_size: f64, origin: [f64; 2], height: f32) -> Self {
        Self::new(rows, cols, cell_size, origin, vec![height; rows * cols])
            .expect("flat field parameters are valid")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn heights(&self) -> &[f32] {
        &self.heights
    }

    /// World extent `[x_min, x_max, y_min, y_max]`.
    pub fn bounds(&self) -> [f64; 4] {
        [
            self.origin[0],
            self.origin[0] + self.cols as f64 * self.cell_size,
            self.origin[1],
            self.origin[1] + self.rows as f64 * self.cell_size,
        ]
    }

    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> f32 {
        self.heights[row * self.cols + col]
    }

    #[inline]
    fn set(&mut self, row: usize, col: usize, h: f32) {
        self.heights[row * self.cols + col] = h;
    }

    /// Continuous cell coordinates (col, row) of a world point; may be out of range.
    #[inline]
    pub fn cell_coords(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin[0]) / self.cell_size, (y - self.origin[1]) / self.cell_size)
    }

    /// World position of the centre of cell (row, col).
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin[0] + (col as f64 + 0.5) * self.cell_size,
            self.origin[1] + (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Height of the containing cell.
    pub fn height_at(&self, x: f64, y: f64) -> Result<f64, TerrainError> {
        let (cx, cy) = self.cell_coords(x, y);
        if !(cx >= 0.0 && cy >= 0.0 && cx < self.cols as f64 && cy < self.rows as f64) {
            return Err(TerrainError::OutOfBounds { x, y });
        }
        Ok(self.cell(cy as usize, cx as usize) as f64)
    }

    /// Height of the containing cell with edge clamping for out-of-range points.
    #[inline]
    pub fn height_clamped(&self, x: f64, y: f64) -> f64 {
        let (cx, cy) = self.cell_coords(x, y);
        self.height_at_index(cx.floor() as i64, cy.floor() as i64)
    }

    /// Height of cell (col, row) with indices clamped into the grid.
    #[inline]
    pub fn height_at_index(&self, col: i64, row: i64) -> f64 {
        let c = col.clamp(0, self.cols as i64 - 1) as usize;
        let r = row.clamp(0, self.rows as i64 - 1) as usize;
        self.cell(r, c) as f64
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.height_at(x, y).is_ok()
    }

    /// Serialises as `KIVI-HF1`, rows and cols as u32 LE, cell size and origin
    /// x/y as f64 LE, then row-major f32 LE heights.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TerrainError> {
        w.write_all(HF_MAGIC)?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        w.write_all(&self.cell_size.to_le_bytes())?;
        w.write_all(&self.origin[0].to_le_bytes())?;
        w.write_all(&self.origin[1].to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.heights.len() * 4);
        for h in &self.heights {
            buf.extend_from_slice(&h.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, TerrainError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != HF_MAGIC {
            return Err(TerrainError::InvalidField("bad magic".into()));
        }
        let mut u4 = [0u8; 4];
        let mut u8b = [0u8; 8];
        r.read_exact(&mut u4)?;
        let rows = u32::from_le_bytes(u4) as usize;
        r.read_exact(&mut u4)?;
        let cols = u32::from_le_bytes(u4) as usize;
        r.read_exact(&mut u8b)?;
        let cell_size = f64::from_le_bytes(u8b);
        r.read_exact(&mut u8b)?;
        let ox = f64::from_le_bytes(u8b);
        r.read_exact(&mut u8b)?;
        let oy = f64::from_le_bytes(u8b);
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| TerrainError::InvalidField("grid too large".into()))?;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let heights = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(rows, cols, cell_size, [ox, oy], heights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainKind {
    Stairs,
    Boxes,
    RandomRough,
    Slope,
    Gaps,
    HighWalls,
}

impl TerrainKind {
    pub const ALL: [TerrainKind; 6] = [
        TerrainKind::Stairs,
        TerrainKind::Boxes,
        TerrainKind::RandomRough,
        TerrainKind::Slope,
        TerrainKind::Gaps,
        TerrainKind::HighWalls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TerrainKind::Stairs => "stairs",
            TerrainKind::Boxes => "boxes",
            TerrainKind::RandomRough => "random_rough",
            TerrainKind::Slope => "slope",
            TerrainKind::Gaps => "gaps",
            TerrainKind::HighWalls => "high_walls",
        }
    }
}

impl FromStr for TerrainKind {
    type Err = TerrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        TerrainKind::ALL
            .into_iter()
            .find(|k| k.name() == norm || (norm == "rough" && *k == TerrainKind::RandomRough))
            .ok_or_else(|| TerrainError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerrainSpec {
    pub kind: TerrainKind,
    pub difficulty: f64,
    pub obstacle_count: u32,
    pub seed: u64,
}

impl TerrainSpec {
    pub fn new(
        kind: TerrainKind,
        difficulty: f64,
        obstacle_count: u32,
        seed: u64,
    ) -> Result<Self, TerrainError> {
        let spec = Self { kind, difficulty, obstacle_count, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), TerrainError> {
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(TerrainError::InvalidSpec(format!(
                "difficulty {} outside [0, 1]",
                self.difficulty
            )));
        }
        if self.obstacle_count > MAX_OBSTACLES {
            return Err(TerrainError::InvalidSpec(format!(
                "obstacle count {} outside [0, {MAX_OBSTACLES}]",
                self.obstacle_count
            )));
        }
        Ok(())
    }
}

/// Obstacle dimensions at a given difficulty, each linear between its easy and
/// hard end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerrainParams {
    pub step_rise: f64,
    pub box_height: f64,
    pub rough_amplitude: f64,
    pub slope_deg: f64,
    pub gap_width: f64,
    pub wall_height: f64,
}

impl TerrainParams {
    pub const STEP_RISE: (f64, f64) = (0.05, 0.23);
    pub const BOX_HEIGHT: (f64, f64) = (0.05, 0.30);
    pub const ROUGH_AMPLITUDE: (f64, f64) = (0.0, 0.10);
    pub const SLOPE_DEG: (f64, f64) = (0.0, 25.0);
    pub const GAP_WIDTH: (f64, f64) = (0.10, 0.60);
    pub const WALL_HEIGHT: (f64, f64) = (0.30, 1.00);

    pub fn at_difficulty(d: f64) -> Self {
        let lerp = |(lo, hi): (f64, f64)| lo + (hi - lo) * d;
        Self {
            step_rise: lerp(Self::STEP_RISE),
            box_height: lerp(Self::BOX_HEIGHT),
            rough_amplitude: lerp(Self::ROUGH_AMPLITUDE),
            slope_deg: lerp(Self::SLOPE_DEG),
            gap_width: lerp(Self::GAP_WIDTH),
            wall_height: lerp(Self::WALL_HEIGHT),
        }
    }
}

/// An axis-aligned raised block, in cell indices (`col0..col1`, `row0..row1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub col0: usize,
    pub col1: usize,
    pub row0: usize,
    pub row1: usize,
    /// Absolute top elevation (m).
    pub height: f32,
}

impl Obstacle {
    fn overlaps(&self, other: &Obstacle, margin: usize) -> bool {
        self.col0 < other.col1 + margin
            && other.col0 < self.col1 + margin
            && self.row0 < other.row1 + margin
            && other.row0 < self.row1 + margin
    }
}

/// A generated tile together with its parameters and placement log.
#[derive(Debug, Clone)]
pub struct GeneratedTerrain {
    pub spec: TerrainSpec,
    pub params: TerrainParams,
    pub field: HeightField,
    pub obstacles: Vec<Obstacle>,
}

pub fn generate_terrain(spec: &TerrainSpec) -> HeightField {
    generate_terrain_with_log(spec).field
}

/// Builds an 8 m tile centred on the world origin. The spawn platform around the
/// origin is always flat at height zero.
pub fn generate_terrain_with_log(spec: &TerrainSpec) -> GeneratedTerrain {
    let params = TerrainParams::at_difficulty(spec.difficulty.clamp(0.0, 1.0));
    let n = (TILE_SIZE / CELL_SIZE).round() as usize;
    let mut field = HeightField::flat(n, n, CELL_SIZE, [-TILE_SIZE / 2.0, -TILE_SIZE / 2.0], 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(spec.kind as u64 + 1)));
    let mut obstacles = Vec::new();

    match spec.kind {
        TerrainKind::Stairs => {
            fill_by_ring(&mut field, |d| {
                if d <= SPAWN_HALF_WIDTH {
                    0.0
                } else {
                    let k = ((d - SPAWN_HALF_WIDTH) / STEP_WIDTH).floor() + 1.0;
                    k * params.step_rise
                }
            });
        }
        TerrainKind::Slope => {
            let grad = params.slope_deg.to_radians().tan();
            fill_by_ring(&mut field, |d| grad * (d - SPAWN_HALF_WIDTH).max(0.0));
        }
        TerrainKind::Gaps => {
            let period = params.gap_width + GAP_PLATFORM_WIDTH;
            fill_by_ring(&mut field, |d| {
                if d <= SPAWN_HALF_WIDTH {
                    return 0.0;
                }
                let phase = (d - SPAWN_HALF_WIDTH) % period;
                if phase < params.gap_width {
                    -GAP_DEPTH
                } else {
                    0.0
                }
            });
        }
        TerrainKind::RandomRough => {
            // 2x2-cell blocks of uniform noise; zero amplitude leaves the tile flat.
            let half = params.rough_amplitude / 2.0;
            let blocks = n.div_ceil(2);
            let noise: Vec<f64> = (0..blocks * blocks)
                .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                .collect();
            for row in 0..n {
                for col in 0..n {
                    let (x, y) = field.cell_center(row, col);
                    if x.abs().max(y.abs()) <= SPAWN_HALF_WIDTH {
                        continue;
                    }
                    let h = half * noise[(row / 2) * blocks + col / 2];
                    field.set(row, col, h as f32);
                }
            }
        }
        TerrainKind::Boxes => {
            let u: Vec<f64> = (0..16).map(|_| 0.5 + 0.5 * rng.random::<f64>()).collect();
            for scale in u {
                let h = params.box_height * scale;
                place_block(&mut field, &mut obstacles, &mut rng, (0.4, 1.0), (0.4, 1.0), h);
            }
        }
        TerrainKind::HighWalls => {
            for _ in 0..6 {
                let long = 1.0 + rng.random::<f64>();
                let (sx, sy) = if rng.random::<bool>() {
                    ((long, long), (0.15, 0.15))
                } else {
                    ((0.15, 0.15), (long, long))
                };
                place_block(&mut field, &mut obstacles, &mut rng, sx, sy, params.wall_height);
            }
        }
    }

    for _ in 0..spec.obstacle_count {
        place_block(&mut field, &mut obstacles, &mut rng, (0.3, 0.6), (0.3, 0.6), params.box_height);
    }

    GeneratedTerrain { spec: *spec, params, field, obstacles }
}

/// Fills every cell from its Chebyshev distance to the origin.
fn fill_by_ring(field: &mut HeightField, height: impl Fn(f64) -> f64) {
    for row in 0..field.rows {
        for col in 0..field.cols {
            let (x, y) = field.cell_center(row, col);
            let h = height(x.abs().max(y.abs()));
            field.set(row, col, h as f32);
        }
    }
}

/// Places one raised block of the given size ranges (m) without overlapping
/// previously placed obstacles or the spawn platform. The block top sits `rise`
/// above the highest cell under its footprint. Gives up silently after a bounded
/// number of attempts, so crowded tiles may hold fewer blocks.
fn place_block(
    field: &mut HeightField,
    obstacles: &mut Vec<Obstacle>,
    rng: &mut ChaCha8Rng,
    size_x: (f64, f64),
    size_y: (f64, f64),
    rise: f64,
) {
    let cell = field.cell_size;
    let n_cols = field.cols;
    let n_rows = field.rows;
    let spawn_lo = ((TILE_SIZE / 2.0 - SPAWN_HALF_WIDTH - 0.5) / cell).floor() as usize;
    let spawn_hi = ((TILE_SIZE / 2.0 + SPAWN_HALF_WIDTH + 0.5) / cell).ceil() as usize;
    let spawn = Obstacle { col0: spawn_lo, col1: spawn_hi, row0: spawn_lo, row1: spawn_hi, height: 0.0 };
    for _ in 0..64 {
        let wx = size_x.0 + (size_x.1 - size_x.0) * rng.random::<f64>();
        let wy = size_y.0 + (size_y.1 - size_y.0) * rng.random::<f64>();
        let w = ((wx / cell).round() as usize).clamp(1, n_cols);
        let h = ((wy / cell).round() as usize).clamp(1, n_rows);
        let col0 = rng.random_range(0..=n_cols - w);
        let row0 = rng.random_range(0..=n_rows - h);
        let mut cand = Obstacle { col0, col1: col0 + w, row0, row1: row0 + h, height: 0.0 };
        if cand.overlaps(&spawn, 0) || obstacles.iter().any(|o| cand.overlaps(o, 1)) {
            continue;
        }
        let mut base = f32::NEG_INFINITY;
        for r in cand.row0..cand.row1 {
            for c in cand.col0..cand.col1 {
                base = base.max(field.cell(r, c));
            }
        }
        cand.height = (base as f64 + rise) as f32;
        for r in cand.row0..cand.row1 {
            for c in cand.col0..cand.col1 {
                field.set(r, c, cand.height);
            }
        }
        obstacles.push(cand);
        return;
    }
}

/// World offset of scan point `(i, j)` in the base yaw frame; `i` runs along body
/// x (rearmost first), `j` along body y (rightmost first).
#[inline]
pub fn scan_offset(i: usize, j: usize) -> (f64, f64) {
    (
        (i as f64 - (SCAN_NX as f64 - 1.0) / 2.0) * SCAN_SPACING,
        (j as f64 - (SCAN_NY as f64 - 1.0) / 2.0) * SCAN_SPACING,
    )
}

/// World positions of the 187 scan points, in scan order (`i` major).
pub fn scan_points(base_x: f64, base_y: f64, base_yaw: f64) -> Vec<(f64, f64)> {
    let (s, c) = base_yaw.sin_cos();
    let mut pts = Vec::with_capacity(SCAN_LEN);
    for i in 0..SCAN_NX {
        for j in 0..SCAN_NY {
            let (dx, dy) = scan_offset(i, j);
            pts.push((base_x + c * dx - s * dy, base_y + s * dx + c * dy));
        }
    }
    pts
}

/// `base_z - h` at each scan point (edge-clamped lookup), clipped to ±1 m.
pub fn sample_height_scan(
    field: &HeightField,
    base_x: f64,
    base_y: f64,
    base_z: f64,
    base_yaw: f64,
) -> Vec<f64> {
    scan_points(base_x, base_y, base_yaw)
        .into_iter()
        .map(|(x, y)| (base_z - field.height_clamped(x, y)).clamp(-SCAN_CLIP, SCAN_CLIP))
        .collect()
}

/// Terrain level of one environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub level: u32,
    pub max_level: u32,
    pub promotions: u64,
    pub demotions: u64,
}

impl CurriculumState {
    pub fn new(level: u32, max_level: u32) -> Self {
        Self { level: level.min(max_level), max_level, promotions: 0, demotions: 0 }
    }

    /// Difficulty in `[0, max_difficulty]` for the current level.
    pub fn difficulty(&self, max_difficulty: f64) -> f64 {
        if self.max_level == 0 {
            return 0.0;
        }
        max_difficulty * self.level as f64 / self.max_level as f64
    }
}

/// Promotes after traversing more than half the tile, demotes when the robot
/// covered less than half of the commanded distance.
pub fn update_curriculum(
    state: CurriculumState,
    traversed_fraction: f64,
    commanded_distance_fraction: f64,
) -> CurriculumState {
    let mut next = state;
    if traversed_fraction > 0.5 {
        if next.level < next.max_level {
            next.level += 1;
            next.promotions += 1;
        }
    } else if commanded_distance_fraction < 0.5 && next.level > 0 {
        next.level -= 1;
        next.demotions += 1;
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TerrainKind, d: f64) -> TerrainSpec {
        TerrainSpec::new(kind, d, 0, 7).unwrap()
    }

    /// Heights along +x from the tile centre.
    fn profile_x(field: &HeightField) -> Vec<f32> {
        let row = field.rows() / 2;
        (field.cols() / 2..field.cols()).map(|c| field.cell(row, c)).collect()
    }

    #[test]
    fn rough_zero_difficulty_is_flat() {
        let f = generate_terrain(&spec(TerrainKind::RandomRough, 0.0));
        let h0 = f.heights()[0];
        assert!(f.heights().iter().all(|&h| h == h0));
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in TerrainKind::ALL {
            let s = TerrainSpec::new(kind, 0.6, 3, 11).unwrap();
            let a = generate_terrain(&s);
            let b = generate_terrain(&s);
            assert_eq!(a, b, "{kind:?}");
        }
    }

    #[test]
    fn stairs_max_difficulty_rise_measured_from_grid() {
        let f = generate_terrain(&spec(TerrainKind::Stairs, 1.0));
        let prof = profile_x(&f);
        let rises: Vec<f64> = prof
            .windows(2)
            .map(|w| (w[1] - w[0]) as f64)
            .filter(|d| d.abs() > 1e-6)
            .collect();
        assert!(!rises.is_empty());
        for r in rises {
            assert!((r - 0.23).abs() < 1e-5, "rise {r}");
        }
    }

    #[test]
    fn spec_validation() {
        assert!(TerrainSpec::new(TerrainKind::Slope, 1.2, 0, 0).is_err());
        assert!(TerrainSpec::new(TerrainKind::Slope, -0.1, 0, 0).is_err());
        assert!(TerrainSpec::new(TerrainKind::Slope, 0.5, 6, 0).is_err());
        assert!(TerrainSpec::new(TerrainKind::Slope, 0.5, 5, 0).is_ok());
    }

    #[test]
    fn height_at_containment_and_bounds() {
        let f = HeightField::flat(4, 3, 0.5, [1.0, 2.0], 0.0);
        assert_eq!(f.height_at(1.7, 2.9).unwrap(), 0.0);
        let mut g = f.clone();
        g.set(0, 0, 0.25);
        assert_eq!(g.height_at(1.0 + 0.25, 2.0 + 0.25).unwrap(), 0.25);
        assert!(matches!(g.height_at(0.99, 2.1), Err(TerrainError::OutOfBounds { .. })));
        assert!(g.height_at(2.5, 2.1).is_err());
        assert!(g.height_at(1.2, 4.0).is_err());
    }

    #[test]
    fn boxes_match_placement_log() {
        let g = generate_terrain_with_log(&TerrainSpec::new(TerrainKind::Boxes, 0.8, 5, 3).unwrap());
        assert!(g.obstacles.len() >= 10);
        for o in &g.obstacles {
            let (x, y) = g.field.cell_center((o.row0 + o.row1) / 2, (o.col0 + o.col1) / 2);
            assert_eq!(g.field.height_at(x, y).unwrap(), o.height as f64);
        }
    }

    #[test]
    fn obstacles_do_not_overlap() {
        for kind in TerrainKind::ALL {
            let g = generate_terrain_with_log(&TerrainSpec::new(kind, 1.0, 5, 21).unwrap());
            for (i, a) in g.obstacles.iter().enumerate() {
                for b in &g.obstacles[i + 1..] {
                    assert!(!a.overlaps(b, 0), "{kind:?}: {a:?} / {b:?}");
                }
            }
        }
    }

    #[test]
    fn obstacle_count_places_extra_blocks() {
        let base = generate_terrain_with_log(&TerrainSpec::new(TerrainKind::Slope, 0.5, 0, 4).unwrap());
        let more = generate_terrain_with_log(&TerrainSpec::new(TerrainKind::Slope, 0.5, 5, 4).unwrap());
        assert_eq!(base.obstacles.len(), 0);
        assert_eq!(more.obstacles.len(), 5);
    }

    #[test]
    fn governing_dimension_monotone_in_difficulty() {
        let sweep: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let measure = |kind: TerrainKind, d: f64| -> f64 {
            let g = generate_terrain_with_log(&TerrainSpec::new(kind, d, 0, 5).unwrap());
            match kind {
                TerrainKind::Stairs => {
                    let p = profile_x(&g.field);
                    p.windows(2).map(|w| (w[1] - w[0]) as f64).fold(0.0, f64::max)
                }
                TerrainKind::Boxes | TerrainKind::HighWalls => {
                    g.obstacles.iter().map(|o| o.height as f64).fold(0.0, f64::max)
                }
                TerrainKind::Gaps => {
                    let p = profile_x(&g.field);
                    let mut best = 0usize;
                    let mut run = 0usize;
                    for h in p {
                        if h < -0.5 {
                            run += 1;
                            best = best.max(run);
                        } else {
                            run = 0;
                        }
                    }
                    best as f64 * CELL_SIZE
                }
                _ => unreachable!(),
            }
        };
        for kind in [TerrainKind::Stairs, TerrainKind::Boxes, TerrainKind::Gaps, TerrainKind::HighWalls] {
            let vals: Vec<f64> = sweep.iter().map(|&d| measure(kind, d)).collect();
            for w in vals.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "{kind:?}: {vals:?}");
            }
            assert!(vals[10] > vals[0], "{kind:?}: {vals:?}");
        }
    }

    #[test]
    fn scan_flat_ground() {
        let f = HeightField::flat(100, 100, 0.05, [-2.5, -2.5], 0.0);
        let s = sample_height_scan(&f, 0.0, 0.0, 0.30, 0.4);
        assert_eq!(s.len(), 187);
        assert!(s.iter().all(|&v| v == 0.30));
        let z = sample_height_scan(&f, 0.0, 0.0, 0.0, 0.0);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scan_beside_box_matches_pointwise_oracle() {
        let mut f = HeightField::flat(100, 100, 0.05, [-2.5, -2.5], 0.0);
        // 0.2 m box in front of the base, x in [0.3, 0.6], y in [-0.2, 0.2]
        for row in 0..100 {
            for col in 0..100 {
                let (x, y) = f.cell_center(row, col);
                if (0.3..0.6).contains(&x) && (-0.2..0.2).contains(&y) {
                    f.set(row, col, 0.2);
                }
            }
        }
        let (bx, by, bz, yaw) = (0.02, -0.03, 0.32, 0.1);
        let s = sample_height_scan(&f, bx, by, bz, yaw);
        let pts = scan_points(bx, by, yaw);
        let mut on_box = 0;
        for (v, (x, y)) in s.iter().zip(pts) {
            let h = f.height_at(x, y).unwrap();
            assert_eq!(*v, (bz - h).clamp(-1.0, 1.0));
            if h == 0.2f32 as f64 {
                on_box += 1;
                assert!((v - (bz - 0.2)).abs() < 1e-7);
            }
        }
        assert!(on_box > 0);
    }

    #[test]
    fn scan_clips_to_one_meter() {
        let f = HeightField::flat(100, 100, 0.05, [-2.5, -2.5], -3.0);
        assert!(sample_height_scan(&f, 0.0, 0.0, 0.3, 0.0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn curriculum_rules() {
        let s = CurriculumState::new(0, 9);
        assert_eq!(update_curriculum(s, 0.9, 1.0).level, 1);
        assert_eq!(update_curriculum(s, 0.1, 0.1).level, 0);
        let top = CurriculumState::new(9, 9);
        assert_eq!(update_curriculum(top, 1.0, 1.0).level, 9);
        let mid = CurriculumState::new(4, 9);
        assert_eq!(update_curriculum(mid, 0.2, 0.3).level, 3);
        assert_eq!(update_curriculum(mid, 0.2, 0.8).level, 4);
    }

    #[test]
    fn heightfield_export_round_trips() {
        let f = generate_terrain(&TerrainSpec::new(TerrainKind::Stairs, 0.7, 2, 3).unwrap());
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"KIVI-HF1");
        assert_eq!(buf.len(), 8 + 8 + 24 + 4 * f.heights().len());
        let g = HeightField::read_from(&buf[..]).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("stairs".parse::<TerrainKind>().unwrap(), TerrainKind::Stairs);
        assert_eq!("high-walls".parse::<TerrainKind>().unwrap(), TerrainKind::HighWalls);
        assert_eq!("rough".parse::<TerrainKind>().unwrap(), TerrainKind::RandomRough);
        assert!("lava".parse::<TerrainKind>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn curriculum_level_stays_in_range(
                start in 0u32..12,
                steps in proptest::collection::vec((0.0f64..1.5, 0.0f64..1.5), 0..40),
            ) {
                let mut s = CurriculumState::new(start, 9);
                for (t, p) in steps {
                    s = update_curriculum(s, t, p);
                    prop_assert!(s.level <= s.max_level);
                }
            }

            #[test]
            fn scan_entries_equal_clipped_pointwise_heights(
                x in -2.0f64..2.0, y in -2.0f64..2.0, z in -0.5f64..1.5, yaw in -3.2f64..3.2, seed in 0u64..50,
            ) {
                let g = generate_terrain(&TerrainSpec::new(TerrainKind::RandomRough, 0.7, 2, seed).unwrap());
                let s = sample_height_scan(&g, x, y, z, yaw);
                for (v, (px, py)) in s.iter().zip(scan_points(x, y, yaw)) {
                    let h = g.height_at(px, py).unwrap();
                    prop_assert_eq!(*v, (z - h).clamp(-1.0, 1.0));
                }
            }
        }
    }
}
