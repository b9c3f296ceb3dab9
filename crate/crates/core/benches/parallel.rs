use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use kivi_core::harness::{Env, EnvShared, Executor, RunConfig, Suite, TerrainSource};

const ENVS: usize = 64;

fn envs(cfg: &RunConfig, shared: &EnvShared) -> Vec<Env> {
    (0..ENVS)
        .map(|i| Env::new(i, cfg.seed, TerrainSource::for_training(&cfg.terrain, i, ENVS), shared))
        .collect()
}

fn step_all(exec: &Executor, envs: &mut [Env], shared: &EnvShared, steps: usize) {
    for t in 0..steps {
        let a = 0.2 * ((t % 7) as f64 - 3.0) / 3.0;
        exec.map_mut(envs, |_, e| e.step(&[a; 12], shared));
    }
}

fn bench(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let shared = EnvShared::new(&cfg.env, &cfg.randomization, true, false, Suite::Clean, (cfg.estimator.memory_tokens, cfg.estimator.attention.d));
    let mut group = c.benchmark_group("step_64_envs_x10");
    group.sample_size(10);
    for (name, exec) in [("sequential", Executor::sequential()), ("parallel", Executor::new(0))] {
        group.bench_function(name, |b| {
            b.iter_batched_ref(|| envs(&cfg, &shared), |e| step_all(&exec, e, &shared, 10), BatchSize::LargeInput)
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
