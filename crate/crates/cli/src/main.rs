use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use kivi_core::harness::{
    self, ablate, record_episode, replay, Checkpoint, EpisodeLog, EvalBatch, Executor, RunConfig, Suite, Variant,
};
use kivi_core::simcore::{render_depth, CameraModel, CameraOffset, SampledDynamics, SimConfig, Simulator};
use kivi_core::terrain::{generate_terrain, HeightField, TerrainKind, TerrainSpec};

#[derive(Parser)]
#[command(name = "kivi", version, about = "Quadruped locomotion: terrain, training, evaluation and replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a terrain tile and write it as a heightfield.
    Terrain {
        #[arg(long)]
        kind: TerrainKind,
        #[arg(long, default_value_t = 0.5)]
        difficulty: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        obstacles: u32,
        #[arg(long)]
        out: PathBuf,
        /// Also write the spawn-pose camera view as a PGM image.
        #[arg(long)]
        depth_pgm: Option<PathBuf>,
    },
    /// Train a policy; writes metrics.jsonl and checkpoints to the output directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out_dir: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Evaluate a checkpoint under one or more depth disturbance suites.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// clean, gaussian:SIGMA, occlusion:RATIO, jitter:DEG or full_occlusion.
        #[arg(long, default_value = "clean")]
        suite: Vec<Suite>,
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        /// Comma-separated evaluation seeds.
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Write the full reports as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Record one episode of the first suite for replay.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        log_episode: usize,
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Re-simulate a recorded episode; writes states.csv and depth PGMs.
    Replay {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "replay")]
        out: PathBuf,
    },
    /// Print the default run configuration.
    Config,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Terrain { kind, difficulty, seed, obstacles, out, depth_pgm } => {
            terrain(kind, difficulty, seed, obstacles, &out, depth_pgm.as_deref())
        }
        Command::Train { config, variant, iterations, out_dir, workers } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
                None => {
                    let mut c = RunConfig::default();
                    c.apply_env_overrides()?;
                    c
                }
            };
            if let Some(v) = variant {
                cfg = ablate(&cfg, v);
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            if let Some(d) = out_dir {
                cfg.out_dir = d;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            cfg.validate()?;
            eprintln!("training {} for {} iterations (seed {}) into {}", cfg.variant_label(), cfg.iterations, cfg.seed, cfg.out_dir);
            let out = cfg.out_dir.clone();
            harness::train(cfg, |r| {
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
                eprintln!(
                    "it {:5}  {:7.1}s  reward {:+.4}  tracking_xy {}  ep_len {}  level {:.2}",
                    r.iteration,
                    r.wall_time,
                    r.mean_step_reward,
                    fmt(r.tracking_xy),
                    fmt(r.episode_length),
                    r.mean_level
                );
            })?;
            eprintln!("checkpoint: {}", Path::new(&out).join("latest.kivi").display());
            Ok(())
        }
        Command::Eval { ckpt, suite, episodes, seeds, json, log, log_episode, workers } => {
            let ck = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            if episodes == 0 || seeds.is_empty() {
                bail!("need at least one episode and one seed");
            }
            let exec = Executor::new(workers);
            let mut reports = Vec::new();
            for (k, s) in suite.iter().enumerate() {
                let batch = EvalBatch::new(&ck.config, *s, episodes, &seeds)?;
                let report = match (&log, k) {
                    (Some(path), 0) => {
                        let (report, ep) = record_episode(&ck, &batch, log_episode, &exec)?;
                        ep.save(path)?;
                        eprintln!("recorded {} steps to {}", ep.steps.len(), path.display());
                        report
                    }
                    _ => harness::run_batch(&ck.config, &ck.agent, &batch, &exec, None)?,
                };
                println!(
                    "{:<16} power {:8.2} W  variance {:9.2} W^2  tracking {:.3} m/s  falls {}/{}  length {:.1}",
                    s.to_string(),
                    report.mean_power,
                    report.mean_power_variance,
                    report.mean_tracking_error,
                    report.falls,
                    report.episodes.len(),
                    report.mean_episode_length
                );
                reports.push(report);
            }
            if let Some(p) = json {
                std::fs::write(&p, serde_json::to_string_pretty(&reports)?)?;
            }
            Ok(())
        }
        Command::Replay { ckpt, log, out } => {
            let ck = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let ep = EpisodeLog::load(&log).with_context(|| format!("loading {}", log.display()))?;
            let r = replay(&ck, &ep, Some(&out))?;
            println!(
                "replayed {} of {} steps: max state error {:e}, max action error {:e}, {} depth frames {}",
                r.steps,
                r.logged_steps,
                r.max_state_error,
                r.max_action_error,
                r.depth_frames,
                if r.depth_bit_exact { "bit-exact" } else { "DIFFER" }
            );
            if !r.matches(1e-9) {
                bail!("replay diverged from the log");
            }
            Ok(())
        }
        Command::Config => {
            print!("{}", RunConfig::default().to_toml_string());
            Ok(())
        }
    }
}

fn terrain(kind: TerrainKind, difficulty: f64, seed: u64, obstacles: u32, out: &Path, depth: Option<&Path>) -> Result<()> {
    let spec = TerrainSpec::new(kind, difficulty, obstacles, seed)?;
    let field: HeightField = generate_terrain(&spec);
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    field.write_to(&mut w)?;
    eprintln!("{} {}x{} cells at {} m -> {}", kind.name(), field.rows(), field.cols(), field.cell_size(), out.display());
    if let Some(p) = depth {
        let sim = Simulator::new(Default::default(), SimConfig::default());
        let state = sim.standing_state(&field, 0.0, 0.0, 0.0, &SampledDynamics::nominal());
        let frame = render_depth(&state, &field, &CameraModel::default(), &CameraOffset::default());
        frame.write_pgm(std::io::BufWriter::new(std::fs::File::create(p)?))?;
    }
    Ok(())
}
