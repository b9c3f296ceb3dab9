use super::*;
use crate::netcore::{finite_difference_check, flatten_params, DiagGaussian};
use crate::obs::{occlude, PRIVILEGED_DIM};
use crate::simcore::{render_depth, CameraModel, CameraOffset};
use crate::simcore::{SampledDynamics, Simulator};
use crate::terrain::{generate_terrain, TerrainKind, TerrainSpec};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small(seed: u64) -> Estimator {
    Estimator::new(EstimatorConfig::reduced(), &mut rng(seed)).unwrap()
}

fn vis_inputs(est: &Estimator, batch: usize, r: &mut ChaCha8Rng) -> (Mat, Mat, Mat) {
    let h = standard_normal(batch, HISTORY_DIM, r);
    let depth = standard_normal(batch, est.depth_input_len(), r) * 0.5;
    let mem = standard_normal(batch * est.config.memory_tokens, est.config.attention.d, r);
    (h, depth, mem)
}

#[test]
fn full_size_dimension_contract() {
    let est = Estimator::new(EstimatorConfig::default(), &mut rng(0)).unwrap();
    let mut r = rng(1);
    let h = standard_normal(2, HISTORY_DIM, &mut r);
    let k = est.kinesthetic_forward(&h, None).unwrap();
    assert_eq!((k.explicit.ncols(), k.z.ncols(), k.next_obs.ncols()), (11, 20, 45));
    let depth = Mat::zeros((2, est.depth_input_len()));
    assert_eq!(est.depth_input_len(), 2 * 64 * 64);
    let mem = est.vis.reset_memory();
    let (v, next) = est.visuospatial_forward(&h, &depth, &[&mem, &mem]).unwrap();
    assert_eq!((v.scan.ncols(), v.foot.ncols(), v.z_s.ncols(), v.z_f.ncols()), (187, 36, 12, 8));
    assert_eq!(next.len(), 2);
    assert_eq!(next[0].tokens.dim(), (8, 64));
    let bundle = LatentBundle::new(&k.explicit, &k.z, &v.z_s, &v.z_f).unwrap();
    assert_eq!(bundle.values.ncols(), 51);
    assert_eq!((bundle.kinesthetic().ncols(), bundle.visuospatial().ncols()), (31, 20));
    assert_eq!(VISUAL_TOKENS, 16);
    assert_eq!(est.config.conv.validate(), Ok(()));
}

#[test]
fn bad_widths_are_shape_errors() {
    let est = small(0);
    assert!(matches!(est.kinesthetic_forward(&Mat::zeros((1, 44)), None), Err(NetError::Shape { .. })));
    let mut r = rng(2);
    let (h, depth, mem) = vis_inputs(&est, 2, &mut r);
    assert!(est.vis.forward(&h, &depth, &mem, &[true]).is_err());
    assert!(est.vis.forward(&h, &depth.slice(s![.., 1..]).to_owned(), &mem, &[true, true]).is_err());
    assert!(LatentBundle::new(&Mat::zeros((1, 10)), &Mat::zeros((1, 20)), &Mat::zeros((1, 12)), &Mat::zeros((1, 8)))
        .is_err());
}

#[test]
fn evaluation_mode_is_deterministic_and_uses_mean() {
    let est = small(3);
    let h = standard_normal(4, HISTORY_DIM, &mut rng(4));
    let a = est.kinesthetic_forward(&h, None).unwrap();
    let b = est.kinesthetic_forward(&h, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.z, a.dist.mean);
}

#[test]
fn training_noise_determines_the_sample() {
    let est = small(3);
    let h = standard_normal(4, HISTORY_DIM, &mut rng(4));
    let e1 = standard_normal(4, KIN_LATENT_DIM, &mut rng(9));
    let e2 = standard_normal(4, KIN_LATENT_DIM, &mut rng(9));
    let a = est.kinesthetic_forward(&h, Some(&e1)).unwrap();
    let b = est.kinesthetic_forward(&h, Some(&e2)).unwrap();
    assert_eq!(a, b);
    let want = &a.dist.mean + &(&a.dist.std() * &e1);
    assert_eq!(a.z, want);
    let c = est.kinesthetic_forward(&h, Some(&standard_normal(4, KIN_LATENT_DIM, &mut rng(10)))).unwrap();
    assert_ne!(a.z, c.z);
}

fn zero_targets(kin: &KinestheticOutput, vis: &VisuospatialOutput) -> (KinTargets, VisTargets) {
    (
        KinTargets { explicit: kin.explicit.clone(), next_obs: kin.next_obs.clone() },
        VisTargets { scan: vis.scan.clone(), foot: vis.foot.clone() },
    )
}

fn crafted_outputs(rows: usize) -> (KinestheticOutput, VisuospatialOutput) {
    let kin = KinestheticOutput {
        explicit: Mat::zeros((rows, 11)),
        dist: DiagGaussian::new(Mat::zeros((rows, 20)), Mat::zeros((rows, 20))),
        z: Mat::zeros((rows, 20)),
        next_obs: Mat::from_elem((rows, 45), 0.3),
    };
    let vis = VisuospatialOutput {
        scan: Mat::from_elem((rows, 187), -0.2),
        foot: Mat::from_elem((rows, 36), 0.1),
        z_s: Mat::zeros((rows, 12)),
        z_f: Mat::zeros((rows, 8)),
    };
    (kin, vis)
}

#[test]
fn perfect_predictions_with_standard_posterior_give_zero_loss() {
    let (kin, vis) = crafted_outputs(3);
    let (kt, vt) = zero_targets(&kin, &vis);
    let l = estimator_loss(&kin, &kt, &vis, &vt, &LossWeights::default()).unwrap();
    assert_eq!(l.breakdown, LossBreakdown::default());
}

#[test]
fn unit_explicit_error_gives_unit_mse() {
    let (kin, vis) = crafted_outputs(2);
    let (mut kt, vt) = zero_targets(&kin, &vis);
    kt.explicit = Mat::ones((2, 11));
    let l = estimator_loss(&kin, &kt, &vis, &vt, &LossWeights::default()).unwrap();
    assert_eq!(l.breakdown.explicit, 1.0);
    assert_eq!(l.breakdown.total, 1.0);
    assert_eq!(l.breakdown.kl, 0.0);
}

#[test]
fn l1_and_kl_terms_by_hand() {
    let (mut kin, vis) = crafted_outputs(1);
    let (kt, mut vt) = zero_targets(&kin, &vis);
    vt.scan = &vis.scan + 0.5;
    vt.foot = &vis.foot - 0.25;
    let mut mu = Mat::zeros((1, 20));
    mu[(0, 0)] = 1.0;
    kin.dist = DiagGaussian::new(mu, Mat::zeros((1, 20)));
    let w = LossWeights { kl: 2.0, ..LossWeights::default() };
    let l = estimator_loss(&kin, &kt, &vis, &vt, &w).unwrap();
    assert_eq!(l.breakdown.kl, 0.5);
    assert!((l.breakdown.scan - 0.5).abs() < 1e-15);
    assert!((l.breakdown.foot - 0.25).abs() < 1e-15);
    assert!((l.breakdown.total - (1.0 + 0.5 + 0.25)).abs() < 1e-15);
}

#[test]
fn target_dimension_mismatch_is_an_error() {
    let (kin, vis) = crafted_outputs(2);
    let (mut kt, vt) = zero_targets(&kin, &vis);
    kt.explicit = Mat::zeros((2, 10));
    assert!(matches!(estimator_loss(&kin, &kt, &vis, &vt, &LossWeights::default()), Err(NetError::Shape { .. })));
}

fn synthetic_batch(est: &Estimator, r: &mut ChaCha8Rng, n_kin: usize, n_vis: usize) -> (KinBatch, VisBatch) {
    let (h, depth, mem) = vis_inputs(est, n_vis, r);
    let vis = VisBatch {
        history: h,
        depth,
        memory: mem,
        initial: (0..n_vis).map(|i| i % 2 == 0).collect(),
        scan: standard_normal(n_vis, SCAN_DIM, r) * 0.3,
        foot: standard_normal(n_vis, FOOT_DIM, r) * 0.3,
    };
    let kin = KinBatch {
        history: standard_normal(n_kin, HISTORY_DIM, r),
        explicit: standard_normal(n_kin, EXPLICIT_DIM, r),
        next_proprio: standard_normal(n_kin, PROPRIO_DIM, r),
    };
    (kin, vis)
}

/// Moves the reconstruction targets 0.2 to 0.5 away from the current
/// predictions so no L1 residual sits near zero during a difference check.
fn away_from_l1_kinks(est: &Estimator, vis: &mut VisBatch, r: &mut ChaCha8Rng) {
    let m = est.config.memory_tokens;
    let mems: Vec<MemoryState> = (0..vis.len())
        .map(|b| MemoryState { tokens: vis.memory.slice(s![b * m..(b + 1) * m, ..]).to_owned(), initial: vis.initial[b] })
        .collect();
    let (pred, _) = est.visuospatial_forward(&vis.history, &vis.depth, &mems.iter().collect::<Vec<_>>()).unwrap();
    let mut offset = |p: &Mat| p.mapv(|v| v + if r.random_bool(0.5) { 1.0 } else { -1.0 } * r.random_range(0.2..0.5));
    vis.scan = offset(&pred.scan);
    vis.foot = offset(&pred.foot);
}

#[test]
fn estimator_loss_gradients_match_finite_differences() {
    let mut est = small(5);
    let mut r = rng(6);
    let (kin, mut vis) = synthetic_batch(&est, &mut r, 3, 3);
    away_from_l1_kinks(&est, &mut vis, &mut r);
    let eps = standard_normal(3, KIN_LATENT_DIM, &mut r);
    let (ki, vi) = ([0, 1, 2], [0, 1, 2]);
    let worst = finite_difference_check(&mut est, 1e-4, |e, grad| {
        if grad {
            EstimatorTrainer::loss_and_grads(e, &kin, &ki, &vis, &vi, &eps).unwrap().total
        } else {
            let mut probe = e.clone();
            EstimatorTrainer::loss_and_grads(&mut probe, &kin, &ki, &vis, &vi, &eps).unwrap().total
        }
    });
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn zero_loss_weights_leave_parameters_bit_unchanged() {
    let mut est = small(7);
    est.config.weights = LossWeights::uniform(0.0);
    let mut r = rng(8);
    let (kin, vis) = synthetic_batch(&est, &mut r, 8, 4);
    let before = flatten_params(&est);
    let mut tr = EstimatorTrainer::new(&est.config);
    let stats = tr.update(&mut est, &kin, &vis, &mut r).unwrap();
    assert!(stats.updates > 0);
    let after = flatten_params(&est);
    assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));

    est.config.weights = LossWeights::default();
    tr.update(&mut est, &kin, &vis, &mut r).unwrap();
    assert_ne!(flatten_params(&est), before);
}

#[test]
fn synthetic_velocity_regression_converges() {
    // v is a fixed linear function of the (already normalized) history.
    let mut cfg = EstimatorConfig::default();
    cfg.kin_encoder = vec![64, 64];
    let mut r = rng(11);
    let mut kin = KinestheticModule::new(&cfg, &mut r).unwrap();
    let n = 256;
    let h = standard_normal(n, HISTORY_DIM, &mut r);
    let a = standard_normal(HISTORY_DIM, 3, &mut r) * (0.5 / (HISTORY_DIM as f64).sqrt());
    let v = h.dot(&a);
    let mut target = Mat::zeros((n, EXPLICIT_DIM));
    target.slice_mut(s![.., ..3]).assign(&v);
    let mut adam = Adam::new(1e-3);
    let zeros = |c| Mat::zeros((n, c));
    let mut mse_v = f64::INFINITY;
    for _ in 0..600 {
        zero_grad(&mut kin);
        let (out, cache) = kin.forward_cached(&h, None).unwrap();
        let diff = &out.explicit - &target;
        mse_v = diff.slice(s![.., ..3]).iter().map(|d| d * d).sum::<f64>() / (3 * n) as f64;
        let g = KinestheticGrads {
            explicit: diff * (2.0 / (n * EXPLICIT_DIM) as f64),
            mu: zeros(KIN_LATENT_DIM),
            log_std: zeros(KIN_LATENT_DIM),
            next_obs: zeros(PROPRIO_DIM),
        };
        kin.backward(&cache, &g);
        adam.step(&mut [&mut kin as &mut dyn Module]);
    }
    assert!(mse_v < 1e-3, "velocity MSE {mse_v}");
}

#[test]
fn fully_occluded_depth_gives_identical_outputs_on_different_terrains() {
    let est = Estimator::new(EstimatorConfig::default(), &mut rng(12)).unwrap();
    let sim = Simulator::default();
    let cam = CameraModel::default();
    let mut outputs = Vec::new();
    let mut frames = Vec::new();
    for kind in [TerrainKind::Stairs, TerrainKind::RandomRough, TerrainKind::Boxes] {
        let field = generate_terrain(&TerrainSpec::new(kind, 0.8, 0, 4).unwrap());
        let state = sim.standing_state(&field, 0.0, 0.0, 0.3, &SampledDynamics::nominal());
        let mut frame = render_depth(&state, &field, &cam, &CameraOffset::default());
        frames.push(frame.clone());
        occlude(&mut frame, 1.0, &mut rng(0));
        let depth = Array2::from_shape_vec((1, est.depth_input_len()), depth_input(&frame, &frame)).unwrap();
        let h = Mat::from_elem((1, HISTORY_DIM), 0.1);
        let mem = est.vis.reset_memory();
        outputs.push(est.visuospatial_forward(&h, &depth, &[&mem]).unwrap());
    }
    assert_ne!(frames[0], frames[1], "terrains must differ in view");
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[1], outputs[2]);
}

#[test]
fn initial_flag_ignores_stale_memory() {
    let est = small(13);
    let mut r = rng(14);
    let (h, depth, mem_a) = vis_inputs(&est, 2, &mut r);
    let mem_b = standard_normal(mem_a.nrows(), mem_a.ncols(), &mut r) * 10.0;
    let a = est.vis.forward(&h, &depth, &mem_a, &[true, true]).unwrap();
    let b = est.vis.forward(&h, &depth, &mem_b, &[true, true]).unwrap();
    assert_eq!(a, b);
    let c = est.vis.forward(&h, &depth, &mem_b, &[false, false]).unwrap();
    assert_ne!(a.0.scan, c.0.scan, "memory pathway must influence outputs");
}

#[test]
fn memory_written_by_different_histories_changes_outputs() {
    let est = Estimator::new(EstimatorConfig::default(), &mut rng(15)).unwrap();
    let mut r = rng(16);
    let depth = standard_normal(1, est.depth_input_len(), &mut r) * 0.3;
    let h1 = standard_normal(1, HISTORY_DIM, &mut r);
    let h2 = standard_normal(1, HISTORY_DIM, &mut r);
    let now = standard_normal(1, HISTORY_DIM, &mut r);
    let fresh = est.vis.reset_memory();
    let (_, m1) = est.visuospatial_forward(&h1, &depth, &[&fresh]).unwrap();
    let (_, m2) = est.visuospatial_forward(&h2, &depth, &[&fresh]).unwrap();
    let (o1, _) = est.visuospatial_forward(&now, &depth, &[&m1[0]]).unwrap();
    let (o2, _) = est.visuospatial_forward(&now, &depth, &[&m2[0]]).unwrap();
    assert_ne!(o1.scan, o2.scan);
}

#[test]
fn blocking_preserves_values() {
    let mut r = rng(17);
    let b = LatentBundle::new(
        &standard_normal(2, 11, &mut r),
        &standard_normal(2, 20, &mut r),
        &standard_normal(2, 12, &mut r),
        &standard_normal(2, 8, &mut r),
    )
    .unwrap();
    assert_eq!(blocked_latents(&b).values(), &b.values);
    let mut z = b.clone();
    z.zero_kinesthetic();
    assert!(z.kinesthetic().iter().all(|&v| v == 0.0));
    assert_eq!(z.visuospatial(), b.visuospatial());
}

#[test]
fn checkpoint_round_trip_restores_f32_weights_and_statistics() {
    let mut est = small(18);
    est.norm.update(&standard_normal(20, PROPRIO_DIM, &mut rng(19)));
    let mut store = TensorStore::new();
    est.save(&mut store, "estimator");
    let mut other = small(20);
    other.load(&store, "estimator").unwrap();
    for (a, b) in flatten_params(&est).iter().zip(flatten_params(&other)) {
        assert_eq!(*a as f32, b as f32);
    }
    assert_eq!(other.norm.count, 20.0);
    for (a, b) in est.norm.mean.iter().zip(&other.norm.mean) {
        assert_eq!(*a as f32 as f64, *b);
    }
}

#[test]
fn explicit_target_scales_forces() {
    let mut p = PrivilegedObs([0.0; PRIVILEGED_DIM]);
    p.0[0] = 0.4;
    p.0[privileged_layout::FORCES.start + 1] = 250.0;
    let e = explicit_target(&p);
    assert_eq!(e[0], 0.4);
    assert_eq!(e[4], 2.5);
}

#[test]
fn foot_heights_on_flat_ground_are_uniform_per_foot() {
    let field = HeightField::flat(80, 80, 0.05, [-2.0, -2.0], 0.2);
    let sim = Simulator::default();
    let state = sim.standing_state(&field, 0.0, 0.0, 0.7, &SampledDynamics::nominal());
    let f = foot_height_target(&field, &state, &sim.model.legs);
    let feet = compute_foot_positions(&state, &sim.model.legs);
    for (leg, foot) in feet.iter().enumerate() {
        for k in 0..9 {
            assert!((f[leg * 9 + k] - (foot.z - 0.2f32 as f64)).abs() < 1e-12);
        }
    }
}

#[test]
fn depth_input_interleaves_current_and_previous() {
    let cur = DepthFrame::filled(3.0);
    let prev = DepthFrame::filled(0.1);
    let v = depth_input(&cur, &prev);
    assert_eq!(v.len(), 8192);
    assert!((v[0] - 1.0).abs() < 1e-6 && (v[1] + 1.0).abs() < 1e-6);
}

proptest! {
    #[test]
    fn loss_terms_are_nonnegative(seed in 0u64..1000, scale in 0.01f64..3.0) {
        let mut r = rng(seed);
        let (mut kin, mut vis) = crafted_outputs(2);
        kin.dist = DiagGaussian::new(standard_normal(2, 20, &mut r) * scale, standard_normal(2, 20, &mut r) * scale);
        kin.explicit = standard_normal(2, 11, &mut r);
        vis.scan = standard_normal(2, 187, &mut r);
        let (kt, vt) = (
            KinTargets { explicit: standard_normal(2, 11, &mut r), next_obs: standard_normal(2, 45, &mut r) },
            VisTargets { scan: standard_normal(2, 187, &mut r), foot: standard_normal(2, 36, &mut r) },
        );
        let l = estimator_loss(&kin, &kt, &vis, &vt, &LossWeights::default()).unwrap().breakdown;
        prop_assert!(l.kl >= 0.0 && l.explicit >= 0.0 && l.next_obs >= 0.0 && l.scan >= 0.0 && l.foot >= 0.0);
        prop_assert!(l.total >= 0.0);
    }
}
