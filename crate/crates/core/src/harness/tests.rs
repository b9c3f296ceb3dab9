use std::sync::Arc;

use super::*;
use crate::estimator::LossWeights;
use crate::netcore::flatten_params;
use crate::simcore::{SampledDynamics, DEPTH_MAX};
use crate::terrain::{TerrainKind, TerrainSpec};

fn small_config(envs: usize) -> RunConfig {
    let mut c = RunConfig { envs, horizon: 12, iterations: 2, workers: 1, ..RunConfig::default() };
    c.eval.episode_steps = 30;
    c
}

fn flat_spec() -> TerrainSpec {
    TerrainSpec::new(TerrainKind::RandomRough, 0.0, 0, 3).unwrap()
}

#[test]
fn default_config_round_trips_through_toml() {
    let c = RunConfig::default();
    let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
    assert_eq!(back, c);
    assert_eq!(RunConfig::from_toml_str("").unwrap(), c);
}

#[test]
fn nested_sections_override_defaults() {
    let c = RunConfig::from_toml_str("seed = 9\n[ppo]\nclip = 0.1\n[terrain]\nmix = [{ kind = \"stairs\" }]\n").unwrap();
    assert_eq!(c.seed, 9);
    assert_eq!(c.ppo.clip, 0.1);
    assert_eq!(c.ppo.gamma, PpoDefaults::gamma());
    assert_eq!(c.terrain.mix, vec![MixEntry { kind: MixKind::Stairs, weight: 1.0 }]);
}

struct PpoDefaults;
impl PpoDefaults {
    fn gamma() -> f64 {
        crate::rl::PpoConfig::default().gamma
    }
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(RunConfig::from_toml_str("sead = 1").is_err());
    assert!(RunConfig::from_toml_str("[ppo]\nclipp = 0.1").is_err());
    assert!(RunConfig::from_toml_str("[estimator.attention]\nheadz = 2").is_err());
    assert!(RunConfig::from_toml_str("[env.sim.gains]\nki = 2").is_err());
}

#[test]
fn invalid_values_are_rejected() {
    assert!(RunConfig::from_toml_str("envs = 0").is_err());
    assert!(RunConfig::from_toml_str("[terrain]\nmax_difficulty = 1.5").is_err());
    assert!(RunConfig::from_toml_str("[ppo]\ngamma = 1.5").is_err());
}

#[test]
fn seed_env_var_overrides_config() {
    let mut c = RunConfig::default();
    std::env::set_var(config::SEED_ENV_VAR, "77");
    c.apply_env_overrides().unwrap();
    std::env::set_var(config::SEED_ENV_VAR, "not-a-seed");
    let bad = RunConfig::default().apply_env_overrides();
    std::env::remove_var(config::SEED_ENV_VAR);
    assert_eq!(c.seed, 77);
    assert!(bad.is_err());
}

#[test]
fn ablation_variants() {
    let c = RunConfig::default();
    assert_eq!(ablate(&c, Variant::Full), c);
    assert!(ablate(&c, Variant::NoKinesthetic).ablation.no_kinesthetic);
    assert!(ablate(&c, Variant::NoMemory).ablation.no_memory);
    assert!(ablate(&c, Variant::Blind).ablation.blind);
    let both = ablate(&ablate(&c, Variant::Blind), Variant::NoMemory);
    assert!(both.ablation.blind && both.ablation.no_memory);
    assert_eq!(both.variant_label(), "no_memory+blind");
    assert!(ablate_named(&c, "no_vision").is_err());
    assert_eq!(ablate_named(&c, "no-memory").unwrap().variant(), Variant::NoMemory);
}

#[test]
fn mix_splits_envs_by_weight() {
    let t = TerrainConfig::default();
    let kinds: Vec<MixKind> = (0..6).map(|i| t.kind_for(i, 6)).collect();
    assert_eq!(kinds, [MixKind::Flat, MixKind::Flat, MixKind::RandomRough, MixKind::RandomRough, MixKind::Stairs, MixKind::Stairs]);
}

#[test]
fn suite_parsing() {
    assert_eq!("occlusion:1.0".parse::<Suite>().unwrap(), Suite::Occlusion { ratio: 1.0 });
    assert_eq!("gaussian:0.3".parse::<Suite>().unwrap(), Suite::Gaussian { sigma: 0.3 });
    assert_eq!("jitter:5".parse::<Suite>().unwrap(), Suite::Jitter { deg: 5.0 });
    assert_eq!("clean".parse::<Suite>().unwrap(), Suite::Clean);
    assert_eq!("full_occlusion".parse::<Suite>().unwrap(), Suite::FullOcclusion);
    for s in Suite::DISTURBED {
        assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
    }
    for bad in ["occlusion", "occlusion:1.5", "gaussian:x", "fog:1", "clean:1", "jitter:-1"] {
        assert!(bad.parse::<Suite>().is_err(), "{bad}");
    }
}

#[test]
fn unit_power_on_every_joint() {
    assert_eq!(power_metrics(&[1.0; 12]), (12.0, 0.0));
    let mut p = [0.0; 12];
    p[0] = 12.0;
    let (total, var) = power_metrics(&p);
    assert_eq!(total, 12.0);
    assert!((var - (144.0 / 12.0 - 1.0)).abs() < 1e-12);
}

fn shared(cfg: &RunConfig, blind: bool, suite: Suite) -> EnvShared {
    EnvShared::new(&cfg.env, &cfg.randomization, false, blind, suite, (cfg.estimator.memory_tokens, cfg.estimator.attention.d))
}

fn fixed_env(sh: &EnvShared, spec: TerrainSpec) -> Env {
    let cmd = crate::obs::VelocityCommand::default();
    Env::fixed(0, 5, spec, SampledDynamics::nominal(), cmd, sh)
}

#[test]
fn zero_action_stands_on_flat_ground() {
    let cfg = small_config(1);
    let sh = shared(&cfg, false, Suite::Clean);
    let mut env = fixed_env(&sh, flat_spec());
    for _ in 0..100 {
        let o = env.step(&[0.0; 12], &sh);
        assert!(!o.done, "fell while standing");
        assert!(o.reward.total.is_finite());
    }
    assert!(env.state.position.z > 0.15);
}

#[test]
fn depth_refreshes_every_fifth_step() {
    let cfg = small_config(1);
    let sh = shared(&cfg, false, Suite::Clean);
    let mut env = fixed_env(&sh, flat_spec());
    let mut due = vec![env.refresh_due()];
    for _ in 0..10 {
        env.step(&[0.0; 12], &sh);
        due.push(env.refresh_due());
    }
    let want: Vec<bool> = (0..11).map(|t| t % 5 == 0).collect();
    assert_eq!(due, want);
}

#[test]
fn blind_and_fully_occluded_frames_are_max_range() {
    let cfg = small_config(1);
    for (blind, suite) in [(true, Suite::Clean), (true, Suite::Gaussian { sigma: 0.3 }), (false, Suite::FullOcclusion)] {
        let sh = shared(&cfg, blind, suite);
        let env = fixed_env(&sh, TerrainSpec::new(TerrainKind::Stairs, 0.8, 2, 1).unwrap());
        let d = env.depth.as_ref().unwrap();
        assert!(d.pixels().iter().all(|&p| p == DEPTH_MAX));
    }
    let sh = shared(&cfg, false, Suite::Clean);
    let env = fixed_env(&sh, flat_spec());
    assert!(env.depth.as_ref().unwrap().pixels().iter().any(|&p| p < DEPTH_MAX));
}

#[test]
fn time_limit_ends_with_bootstrap_state() {
    let mut cfg = small_config(1);
    cfg.env.max_episode_steps = 3;
    let sh = shared(&cfg, false, Suite::Clean);
    let mut env = fixed_env(&sh, flat_spec());
    let outs: Vec<_> = (0..3).map(|_| env.step(&[0.0; 12], &sh)).collect();
    assert!(!outs[1].done);
    assert!(outs[2].done && outs[2].timeout);
    assert!(outs[2].terminal.is_some());
    assert_eq!(outs[2].finished.unwrap().length, 3);
    assert_eq!(env.steps, 0);
}

#[test]
fn environments_are_deterministic() {
    let cfg = small_config(1);
    let sh = EnvShared::new(&cfg.env, &cfg.randomization, true, false, Suite::Clean, (8, 64));
    let src = TerrainSource::for_training(&cfg.terrain, 2, 3);
    let run = || {
        let mut e = Env::new(2, 11, src.clone(), &sh);
        for t in 0..30 {
            e.step(&[0.3 * ((t % 4) as f64 - 1.5); 12], &sh);
        }
        e.state.to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn no_memory_ignores_earlier_steps() {
    for (no_memory, expect_equal) in [(true, true), (false, false)] {
        let mut cfg = small_config(2);
        cfg.ablation.no_memory = no_memory;
        let agent = Agent::new(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
        let sh = shared(&cfg, false, Suite::Clean);
        let spec = TerrainSpec::new(TerrainKind::Stairs, 0.5, 0, 2).unwrap();
        let mut envs = vec![fixed_env(&sh, spec), fixed_env(&sh, spec)];
        // env 0 lives through a refresh with a different history first
        for _ in 0..5 {
            agent.estimate(&mut envs[..1]).unwrap();
            envs[0].step(&[0.4; 12], &sh);
        }
        for _ in 0..5 {
            envs[1].step(&[-0.2; 12], &sh);
        }
        assert!(envs[0].refresh_due() && envs[1].refresh_due());
        envs[0].history = envs[1].history.clone();
        envs[0].proprio = envs[1].proprio;
        agent.estimate(&mut envs).unwrap();
        assert_eq!(envs[0].vis_latent == envs[1].vis_latent, expect_equal, "no_memory = {no_memory}");
    }
}

fn trainer(cfg: RunConfig) -> Trainer {
    Trainer::new(cfg).unwrap()
}

use rand::SeedableRng;

#[test]
fn smoke_run_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(4);
    cfg.iterations = 10;
    cfg.checkpoint_every = 5;
    cfg.out_dir = dir.path().to_string_lossy().into_owned();
    let ck = train(cfg.clone(), |_| {}).unwrap();
    assert_eq!(ck.iteration, 10);
    let records = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(records.len(), 10);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.iteration, i + 1);
        assert_eq!(r.seed, cfg.seed);
        assert!(r.wall_time >= 0.0);
    }
    for name in ["checkpoint_00005.kivi", "checkpoint_00010.kivi", "latest.kivi"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let loaded = Checkpoint::load(&dir.path().join("latest.kivi")).unwrap();
    assert_eq!(loaded, ck);
    assert_eq!(loaded.curriculum.len(), 4);
    assert_eq!(loaded.config, cfg);
}

#[test]
fn same_seed_same_metrics() {
    let run = |workers: usize| {
        let mut cfg = small_config(3);
        cfg.workers = workers;
        let mut t = trainer(cfg);
        t.run(2, None, None, |_| {}).unwrap().iter().map(IterationRecord::timeless).collect::<Vec<_>>()
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(2));
}

#[test]
fn zero_estimator_weight_trains_only_the_policy() {
    let mut cfg = small_config(3);
    cfg.estimator.weights = LossWeights::uniform(0.0);
    let mut t = trainer(cfg);
    let est = flatten_params(&t.agent.estimator);
    let ac = flatten_params(&t.agent.ac);
    t.train_iteration().unwrap();
    let est_after = flatten_params(&t.agent.estimator);
    assert!(est.iter().zip(&est_after).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_ne!(ac, flatten_params(&t.agent.ac));
}

#[test]
fn checkpoint_refuses_other_dimensions() {
    let t = trainer(small_config(2));
    let mut store = t.checkpoint().to_store();
    store.meta["dims"]["latent"] = serde_json::json!(50);
    assert!(matches!(Checkpoint::from_store(&store), Err(HarnessError::Checkpoint(_))));
    let mut store = t.checkpoint().to_store();
    store.meta["kind"] = serde_json::json!("something-else");
    assert!(Checkpoint::from_store(&store).is_err());
}

fn eval_checkpoint(variant: Variant) -> Checkpoint {
    let cfg = ablate(&small_config(2), variant);
    trainer(cfg).checkpoint().round_trip().unwrap()
}

#[test]
fn blind_policy_ignores_depth_disturbances() {
    let ck = eval_checkpoint(Variant::Blind);
    let exec = Executor::sequential();
    let clean = evaluate(&ck, Suite::Clean, 2, &[0], &exec).unwrap();
    for s in [Suite::Gaussian { sigma: 0.3 }, Suite::Occlusion { ratio: 0.6 }, Suite::Jitter { deg: 5.0 }] {
        let r = evaluate(&ck, s, 2, &[0], &exec).unwrap();
        assert_eq!(r.episodes, clean.episodes, "{s}");
    }
}

#[test]
fn eval_powers_are_finite_and_nonnegative() {
    let ck = eval_checkpoint(Variant::Full);
    let r = evaluate(&ck, Suite::Occlusion { ratio: 0.6 }, 2, &[0, 1], &Executor::sequential()).unwrap();
    assert_eq!(r.episodes.len(), 4);
    for e in &r.episodes {
        assert!(e.mean_power.is_finite() && e.mean_power >= 0.0);
        assert!(e.mean_power_variance.is_finite() && e.mean_power_variance >= 0.0);
        assert!(e.power_series.iter().all(|p| *p >= 0.0));
        assert_eq!(e.power_series.len(), e.length);
    }
    assert_eq!(r.for_seed(1).episodes.len(), 2);
}

#[test]
fn blind_evaluation_ignores_camera_only_scene_changes() {
    let ck = eval_checkpoint(Variant::Blind);
    let cfg = &ck.config;
    let batch = EvalBatch::new(cfg, Suite::Clean, 1, &[0]).unwrap();
    let sh = batch.shared(cfg, &ck.agent);
    let run = |block: bool| {
        let mut envs = batch.build_envs(&sh);
        if block {
            envs[0].field = with_far_block(&envs[0]);
        }
        envs[0].reset(&sh);
        let out = run_envs(&ck.agent, &mut envs, &sh, 25, &Executor::sequential(), None).unwrap();
        (out, envs[0].state.to_vec())
    };
    assert_eq!(run(false), run(true));
}

/// A 1 m block 2 m ahead of `env`: in view of the camera, out of reach of the feet.
fn with_far_block(env: &Env) -> Arc<crate::terrain::HeightField> {
    let f = &env.field;
    let (x0, y0) = (env.state.position.x, env.state.position.y);
    let mut h = f.heights().to_vec();
    for row in 0..f.rows() {
        for col in 0..f.cols() {
            let (x, y) = f.cell_center(row, col);
            if (2.0..2.6).contains(&(x - x0)) && (y - y0).abs() < 0.8 {
                h[row * f.cols() + col] += 1.0;
            }
        }
    }
    Arc::new(crate::terrain::HeightField::new(f.rows(), f.cols(), f.cell_size(), f.origin(), h).unwrap())
}

#[test]
fn sighted_evaluation_does_see_the_block() {
    let ck = eval_checkpoint(Variant::Full);
    let cfg = &ck.config;
    let batch = EvalBatch::new(cfg, Suite::Clean, 1, &[0]).unwrap();
    let sh = batch.shared(cfg, &ck.agent);
    let mut a = batch.build_envs(&sh);
    let mut b = batch.build_envs(&sh);
    b[0].field = with_far_block(&b[0]);
    a[0].reset(&sh);
    b[0].reset(&sh);
    assert_ne!(a[0].depth, b[0].depth);
}

#[test]
fn episode_log_round_trip_and_replay() {
    let ck = eval_checkpoint(Variant::Full);
    let mut cfg = ck.config.clone();
    cfg.eval.episode_steps = 100;
    cfg.eval.difficulty = 0.0;
    let ck = Checkpoint { config: cfg, ..ck };
    let batch = EvalBatch::new(&ck.config, Suite::Jitter { deg: 5.0 }, 2, &[3]).unwrap();
    let (_, log) = record_episode(&ck, &batch, 1, &Executor::sequential()).unwrap();
    let mut bytes = Vec::new();
    log.write_to(&mut bytes).unwrap();
    let back = EpisodeLog::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(back, log);

    let dir = tempfile::tempdir().unwrap();
    let report = replay(&ck, &back, Some(dir.path())).unwrap();
    assert!(report.matches(1e-9), "{report:?}");
    assert_eq!(report.max_state_error, 0.0);
    let csv = std::fs::read_to_string(dir.path().join("states.csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, log.steps.len());
    let pgms = std::fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")).count();
    assert_eq!(pgms, report.depth_frames);
    assert!(report.depth_frames > 0);

    bytes[8] = 9;
    assert!(matches!(EpisodeLog::read_from(&mut bytes.as_slice()), Err(HarnessError::Version { expected: 1, got: 9 })));
}

#[test]
fn eval_batch_episodes_get_distinct_terrain() {
    let cfg = RunConfig::default();
    let batch = EvalBatch::new(&cfg, Suite::Clean, 5, &[0, 1, u64::MAX]).unwrap();
    assert_eq!(batch.episodes.len(), 15);
    let mut seeds: Vec<u64> = batch.episodes.iter().map(|e| e.terrain.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    assert_eq!(seeds.len(), 15);
    assert_eq!(batch, EvalBatch::new(&cfg, Suite::Clean, 5, &[0, 1, u64::MAX]).unwrap());
}
