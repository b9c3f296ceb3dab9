//! Binary episode logs and deterministic replay.
//!
//! Layout (little endian): `b"KIVI-EP1"`, `u32` version, `u32` header length,
//! JSON header, `u32` step count, then per step a `u8` depth flag, the state
//! vector (`f64`), the action (`f64`) and, when flagged, the frame (`f32`).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::env::Env;
use super::eval::{run_batch, EvalBatch, EvalReport};
use super::exec::Executor;
use super::HarnessError;
use crate::simcore::{DepthFrame, Joints, RobotState, DEPTH_PIXELS, NUM_JOINTS, STATE_LEN};

pub const EPISODE_MAGIC: &[u8; 8] = b"KIVI-EP1";
pub const EPISODE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// State before the action was applied.
    pub state: Vec<f64>,
    pub action: Joints,
    /// Frame rendered at this step, if the camera refreshed.
    pub depth: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub version: u32,
    pub variant: String,
    pub iteration: usize,
    /// Which episode of the batch was recorded.
    pub env: usize,
    pub batch: EvalBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub header: LogHeader,
    pub steps: Vec<StepRecord>,
}

/// Collects the steps of one environment during an evaluation batch.
#[derive(Debug, Clone)]
pub struct EpisodeRecorder {
    pub env: usize,
    pub steps: Vec<StepRecord>,
}

impl EpisodeRecorder {
    pub fn new(env: usize) -> Self {
        Self { env, steps: Vec::new() }
    }

    pub fn push(&mut self, env: &Env, action: Joints) {
        self.steps.push(StepRecord {
            state: env.state.to_vec(),
            action,
            depth: env.depth.as_ref().map(|d| d.pixels().to_vec()),
        });
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, HarnessError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, HarnessError> {
    let mut b = vec![0u8; n * 8];
    r.read_exact(&mut b)?;
    Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

impl EpisodeLog {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), HarnessError> {
        w.write_all(EPISODE_MAGIC)?;
        w.write_all(&EPISODE_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.steps.len() as u32).to_le_bytes())?;
        for s in &self.steps {
            w.write_all(&[s.depth.is_some() as u8])?;
            for v in s.state.iter().chain(&s.action) {
                w.write_all(&v.to_le_bytes())?;
            }
            if let Some(d) = &s.depth {
                for v in d {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, HarnessError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != EPISODE_MAGIC {
            return Err(HarnessError::Format("not an episode log".into()));
        }
        let version = read_u32(r)?;
        if version != EPISODE_VERSION {
            return Err(HarnessError::Version { expected: EPISODE_VERSION, got: version });
        }
        let len = read_u32(r)? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: LogHeader = serde_json::from_slice(&header)?;
        if header.version != EPISODE_VERSION {
            return Err(HarnessError::Version { expected: EPISODE_VERSION, got: header.version });
        }
        let count = read_u32(r)? as usize;
        let mut steps = Vec::with_capacity(count);
        for _ in 0..count {
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let state = read_f64s(r, STATE_LEN)?;
            let a = read_f64s(r, NUM_JOINTS)?;
            let depth = if flag[0] == 1 {
                let mut b = vec![0u8; DEPTH_PIXELS * 4];
                r.read_exact(&mut b)?;
                Some(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
            } else if flag[0] == 0 {
                None
            } else {
                return Err(HarnessError::Format(format!("bad depth flag {}", flag[0])));
            };
            steps.push(StepRecord { state, action: std::array::from_fn(|j| a[j]), depth });
        }
        Ok(Self { header, steps })
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Evaluates `batch` and records episode `env` of it.
pub fn record_episode(
    checkpoint: &Checkpoint,
    batch: &EvalBatch,
    env: usize,
    executor: &Executor,
) -> Result<(EvalReport, EpisodeLog), HarnessError> {
    if env >= batch.episodes.len() {
        return Err(HarnessError::Config(format!("episode {env} outside the batch of {}", batch.episodes.len())));
    }
    let mut rec = EpisodeRecorder::new(env);
    let report = run_batch(&checkpoint.config, &checkpoint.agent, batch, executor, Some(&mut rec))?;
    let header = LogHeader {
        version: EPISODE_VERSION,
        variant: checkpoint.config.variant_label(),
        iteration: checkpoint.iteration,
        env,
        batch: batch.clone(),
    };
    Ok((report, EpisodeLog { header, steps: rec.steps }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub steps: usize,
    pub logged_steps: usize,
    pub max_state_error: f64,
    pub max_action_error: f64,
    pub depth_frames: usize,
    pub depth_bit_exact: bool,
}

impl ReplayReport {
    pub fn matches(&self, tol: f64) -> bool {
        self.steps == self.logged_steps && self.max_state_error <= tol && self.max_action_error <= tol && self.depth_bit_exact
    }
}

/// Re-simulates the logged episode with the checkpoint's policy. With an
/// output directory, writes `states.csv` (one row per logged step) and the
/// re-rendered frames as `depth_NNNN.pgm`.
pub fn replay(checkpoint: &Checkpoint, log: &EpisodeLog, out_dir: Option<&Path>) -> Result<ReplayReport, HarnessError> {
    if log.header.variant != checkpoint.config.variant_label() {
        return Err(HarnessError::Checkpoint(format!(
            "log was recorded with variant {}, checkpoint is {}",
            log.header.variant,
            checkpoint.config.variant_label()
        )));
    }
    let mut rec = EpisodeRecorder::new(log.header.env);
    run_batch(&checkpoint.config, &checkpoint.agent, &log.header.batch, &Executor::sequential(), Some(&mut rec))?;
    let mut report = ReplayReport {
        steps: rec.steps.len(),
        logged_steps: log.steps.len(),
        max_state_error: 0.0,
        max_action_error: 0.0,
        depth_frames: 0,
        depth_bit_exact: true,
    };
    for (a, b) in rec.steps.iter().zip(&log.steps) {
        for (x, y) in a.state.iter().zip(&b.state) {
            report.max_state_error = report.max_state_error.max((x - y).abs());
        }
        for (x, y) in a.action.iter().zip(&b.action) {
            report.max_action_error = report.max_action_error.max((x - y).abs());
        }
        match (&a.depth, &b.depth) {
            (Some(x), Some(y)) => {
                report.depth_frames += 1;
                if x.iter().zip(y).any(|(p, q)| p.to_bits() != q.to_bits()) {
                    report.depth_bit_exact = false;
                }
            }
            (None, None) => {}
            _ => report.depth_bit_exact = false,
        }
    }
    if rec.steps.len() != log.steps.len() {
        report.max_state_error = f64::INFINITY;
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_csv(&dir.join("states.csv"), &rec.steps, checkpoint.config.env.sim.policy_dt(), log.steps.len())?;
        for (t, s) in rec.steps.iter().enumerate() {
            if let Some(d) = &s.depth {
                let frame = DepthFrame::from_vec(d.clone()).ok_or(HarnessError::Internal("frame size"))?;
                let f = std::fs::File::create(dir.join(format!("depth_{t:04}.pgm")))?;
                frame.write_pgm(std::io::BufWriter::new(f))?;
            }
        }
    }
    Ok(report)
}

fn write_csv(path: &Path, steps: &[StepRecord], dt: f64, rows: usize) -> Result<(), HarnessError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut head = vec!["step".to_string(), "time".to_string()];
    head.extend(["x", "y", "z", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz"].map(String::from));
    for group in ["q", "dq", "prev_action", "prev_prev_action", "action"] {
        head.extend((0..NUM_JOINTS).map(|j| format!("{group}{j}")));
    }
    writeln!(w, "{}", head.join(","))?;
    for (t, s) in steps.iter().take(rows).enumerate() {
        let mut row = vec![t.to_string(), format!("{}", t as f64 * dt)];
        row.extend(s.state.iter().chain(&s.action).map(|v| format!("{v:e}")));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reconstructs the robot state of a logged step.
pub fn logged_state(step: &StepRecord) -> Result<RobotState, HarnessError> {
    Ok(RobotState::from_slice(&step.state)?)
}
