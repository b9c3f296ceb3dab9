use super::*;
use crate::estimator::blocked_latents;
use crate::netcore::{finite_difference_check, flatten_grads, flatten_params, zero_grad, Adam};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn weights() -> RewardWeights {
    RewardWeights::table(0.02)
}

#[test]
fn exact_tracking_earns_full_weight() {
    let mut x = RewardInputs::default();
    x.command = crate::obs::VelocityCommand { vx: 0.7, vy: -0.2, yaw_rate: 0.4 };
    x.lin_vel = [0.7, -0.2, 0.0];
    x.ang_vel = [0.0, 0.0, 0.4];
    let r = compute_rewards(&x, &weights(), &RewardConfig::default());
    assert!((r.get(RewardTerm::TrackingXy) - 0.06).abs() < 1e-15);
    assert!((r.get(RewardTerm::TrackingYaw) - 0.03).abs() < 1e-15);
    assert!((r.total - 0.09).abs() < 1e-15);
}

#[test]
fn one_collision_costs_a_fiftieth() {
    let x = RewardInputs { collisions: 1, ..RewardInputs::default() };
    let r = compute_rewards(&x, &weights(), &RewardConfig::default());
    assert!((r.get(RewardTerm::Collision) + 0.02).abs() < 1e-15);
}

#[test]
fn constant_actions_have_no_rate_or_smoothness_penalty() {
    let a = [0.3; 12];
    let x = RewardInputs { action: a, prev_action: a, prev_prev_action: a, ..RewardInputs::default() };
    let r = compute_rewards(&x, &weights(), &RewardConfig::default());
    assert_eq!(r.get(RewardTerm::ActionRate), 0.0);
    assert_eq!(r.get(RewardTerm::Smoothness), 0.0);
}

#[test]
fn power_terms_by_hand() {
    let mut x = RewardInputs::default();
    x.torques[0] = 2.0;
    x.joint_vel[0] = -3.0;
    x.torques[1] = 1.0;
    x.joint_vel[1] = 1.0;
    let r = compute_rewards(&x, &weights(), &RewardConfig::default());
    // |τ||θ̇| = 6 + 1; powers (6, 1, 0 x 10): mean 7/12, var = (36 + 1)/12 - (7/12)^2
    assert!((r.get(RewardTerm::JointPower) - (-2e-5 * 0.02 * 7.0)).abs() < 1e-18);
    assert!((r.get(RewardTerm::JointTorque) - (-1e-5 * 0.02 * 5.0)).abs() < 1e-18);
    let var = 37.0 / 12.0 - (7.0f64 / 12.0).powi(2);
    assert!((r.get(RewardTerm::PowerDistribution) - (-2e-7 * 0.02 * var)).abs() < 1e-18);
}

#[test]
fn table_has_two_objectives_and_nine_penalties() {
    let w = weights();
    assert_eq!(w.weights.iter().filter(|v| **v > 0.0).count(), 2);
    assert_eq!(w.weights.iter().filter(|v| **v < 0.0).count(), 9);
    assert!((w.max_total() - 0.09).abs() < 1e-15);
}

fn joints(r: &mut ChaCha8Rng, s: f64) -> [f64; 12] {
    std::array::from_fn(|_| r.random_range(-s..s))
}

proptest! {
    #[test]
    fn penalties_nonpositive_and_total_bounded(seed in 0u64..5000) {
        let mut r = rng(seed);
        let x = RewardInputs {
            lin_vel: [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(-2.0..2.0)],
            ang_vel: [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)],
            joint_vel: joints(&mut r, 30.0),
            joint_acc: joints(&mut r, 2000.0),
            torques: joints(&mut r, 30.0),
            action: joints(&mut r, 3.0),
            prev_action: joints(&mut r, 3.0),
            prev_prev_action: joints(&mut r, 3.0),
            command: crate::obs::VelocityCommand { vx: r.random_range(-1.0..1.2), vy: r.random_range(-0.5..0.5), yaw_rate: r.random_range(-1.0..1.0) },
            collisions: r.random_range(0..6),
        };
        let b = compute_rewards(&x, &weights(), &RewardConfig::default());
        for t in RewardTerm::ALL {
            let v = b.get(t);
            match t {
                RewardTerm::TrackingXy => prop_assert!(v > 0.0 && v <= 0.06),
                RewardTerm::TrackingYaw => prop_assert!(v > 0.0 && v <= 0.03),
                _ => prop_assert!(v <= 0.0),
            }
        }
        prop_assert!(b.total <= 0.09);
    }
}

fn gae_oracle(r: &Mat, v: &Mat, d: &Array2<bool>, boot: &[f64], g: f64, l: f64) -> Mat {
    let (t_len, n) = r.dim();
    let mut out = Mat::zeros((t_len, n));
    for e in 0..n {
        let next_v = |t: usize| if t + 1 < t_len { v[(t + 1, e)] } else { boot[e] };
        for t in 0..t_len {
            let mut acc = 0.0;
            let mut w = 1.0;
            for k in t..t_len {
                let alive = if d[(k, e)] { 0.0 } else { 1.0 };
                acc += w * (r[(k, e)] + g * alive * next_v(k) - v[(k, e)]);
                if d[(k, e)] {
                    break;
                }
                w *= g * l;
            }
            out[(t, e)] = acc;
        }
    }
    out
}

#[test]
fn gae_single_terminal_step() {
    let (a, ret) = gae(&ndarray::array![[2.0]], &ndarray::array![[0.5]], &Array2::from_elem((1, 1), true), &[9.0], 0.9, 0.8)
        .unwrap();
    assert_eq!(a[(0, 0)], 1.5);
    assert_eq!(ret[(0, 0)], 2.0);
}

#[test]
fn gae_lambda_one_is_discounted_return() {
    let mut r = rng(3);
    let rew = standard_normal(5, 1, &mut r);
    let val = standard_normal(5, 1, &mut r);
    let g = 0.93;
    let (a, _) = gae(&rew, &val, &Array2::from_elem((5, 1), false), &[0.7], g, 1.0).unwrap();
    for t in 0..5 {
        let mut s = 0.0;
        for k in t..5 {
            s += g.powi((k - t) as i32) * rew[(k, 0)];
        }
        s += g.powi((5 - t) as i32) * 0.7 - val[(t, 0)];
        assert!((a[(t, 0)] - s).abs() < 1e-12);
    }
}

#[test]
fn gae_zero_inputs_zero_advantages() {
    let (a, ret) = gae(&Mat::zeros((4, 3)), &Mat::zeros((4, 3)), &Array2::from_elem((4, 3), false), &[0.0; 3], 0.99, 0.95)
        .unwrap();
    assert!(a.iter().chain(ret.iter()).all(|v| *v == 0.0));
}

#[test]
fn gae_matches_oracle_on_every_done_pattern() {
    let mut r = rng(4);
    for t_len in 1..=4 {
        for n in 1..=2 {
            for pattern in 0u32..(1 << (t_len * n)) {
                let d = Array2::from_shape_fn((t_len, n), |(t, e)| pattern >> (t * n + e) & 1 == 1);
                let rew = standard_normal(t_len, n, &mut r);
                let val = standard_normal(t_len, n, &mut r);
                let boot: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
                let (g, l) = (r.random_range(0.5..1.0), r.random_range(0.5..1.0));
                let (a, _) = gae(&rew, &val, &d, &boot, g, l).unwrap();
                let o = gae_oracle(&rew, &val, &d, &boot, g, l);
                assert!((&a - &o).iter().all(|x| x.abs() <= 1e-12));
            }
        }
    }
}

#[test]
fn gae_rejects_shape_mismatch() {
    assert!(gae(&Mat::zeros((3, 2)), &Mat::zeros((3, 1)), &Array2::from_elem((3, 2), false), &[0.0; 2], 0.9, 0.9).is_err());
    assert!(gae(&Mat::zeros((3, 2)), &Mat::zeros((3, 2)), &Array2::from_elem((3, 2), false), &[0.0], 0.9, 0.9).is_err());
}

fn latents(rows: usize, r: &mut ChaCha8Rng) -> BlockedLatents {
    blocked_latents(&crate::estimator::LatentBundle { values: standard_normal(rows, LATENT_DIM, r) })
}

fn proprio(rows: usize, r: &mut ChaCha8Rng) -> Vec<ProprioObs> {
    (0..rows).map(|_| ProprioObs(std::array::from_fn(|_| r.random_range(-1.0..1.0)))).collect()
}

#[test]
fn actor_and_critic_widths() {
    let ac = ActorCritic::new(&PolicyConfig::default(), &mut rng(0)).unwrap();
    assert_eq!(ac.actor.net.input_dim(), 96);
    assert_eq!(ac.actor.net.output_dim(), 12);
    assert_eq!(ac.critic.net.input_dim(), 243);
    let mut r = rng(1);
    let x = ac.actor.input(&proprio(3, &mut r), &latents(3, &mut r)).unwrap();
    assert_eq!(x.dim(), (3, 96));
    let a = act(&ac.actor, &proprio(3, &mut r), &latents(3, &mut r), false, &mut r).unwrap();
    assert_eq!(a.dim(), (3, 12));
    let bad = BlockedLatents::detached(Mat::zeros((3, 50)));
    assert!(act(&ac.actor, &proprio(3, &mut r), &bad, true, &mut r).is_err());
}

#[test]
fn deterministic_act_repeats() {
    let ac = ActorCritic::new(&PolicyConfig::default(), &mut rng(0)).unwrap();
    let mut r = rng(2);
    let (p, l) = (proprio(2, &mut r), latents(2, &mut r));
    let a = act(&ac.actor, &p, &l, true, &mut rng(5)).unwrap();
    let b = act(&ac.actor, &p, &l, true, &mut rng(6)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sampled_action_std_matches_log_std() {
    let mut ac = ActorCritic::new(&PolicyConfig::default(), &mut rng(0)).unwrap();
    ac.actor.log_std.value.iter_mut().enumerate().for_each(|(j, v)| *v = -1.0 + 0.1 * j as f64);
    let mut r = rng(7);
    let p = proprio(1, &mut r);
    let l = latents(1, &mut r);
    let x = ac.actor.input(&p, &l).unwrap();
    let n = 100_000;
    let rows = x.broadcast((n, 96)).unwrap().to_owned();
    let (a, mean, _) = ac.actor.sample(&rows, &mut r).unwrap();
    for j in 0..12 {
        let col = &a.column(j) - &mean.column(j);
        let s = (col.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let want = ac.actor.log_std.value[(0, j)].exp();
        assert!((s / want - 1.0).abs() < 0.02, "joint {j}: {s} vs {want}");
    }
}

#[test]
fn log_prob_closed_form() {
    let mean = ndarray::array![[0.0, 1.0]];
    let ls = ndarray::array![[0.0, 2f64.ln()]];
    let a = ndarray::array![[1.0, 3.0]];
    let lp = gaussian_log_prob(&mean, &ls, &a)[0];
    let want = -0.5 - 0.5 * LN_2PI + (-0.5 - 2f64.ln() - 0.5 * LN_2PI);
    assert!((lp - want).abs() < 1e-14);
}

fn random_batch(ac: &ActorCritic, n: usize, r: &mut ChaCha8Rng) -> PpoBatch {
    let actor_in = standard_normal(n, ACTOR_INPUT_DIM, r);
    let (actions, mean, lp) = ac.actor.sample(&actor_in, r).unwrap();
    let critic_in = standard_normal(n, CRITIC_INPUT_DIM, r);
    let values: Vec<f64> = ac.critic.value(&critic_in).unwrap();
    // perturbed old log-probs so some ratios leave the clip range
    let old_log_prob: Vec<f64> = lp.iter().map(|v| v + r.random_range(-0.4..0.4)).collect();
    PpoBatch {
        actor_in,
        critic_in,
        actions,
        old_log_prob,
        old_mean: &mean + &(standard_normal(n, ACTION_DIM, r) * 0.1),
        old_log_std: ac.actor.log_std.value.clone(),
        old_values: values.iter().map(|v| v + r.random_range(-0.5..0.5)).collect(),
        advantages: (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
        returns: (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
    }
}

#[test]
fn ppo_loss_gradients_match_finite_differences() {
    let mut r = rng(8);
    let mut ac = ActorCritic::new(&PolicyConfig::reduced(), &mut r).unwrap();
    let batch = random_batch(&ac, 6, &mut r);
    let idx: Vec<usize> = (0..6).collect();
    let cfg = PpoConfig::default();
    let worst = finite_difference_check(&mut ac, 1e-5, |ac, _| ppo_loss_and_grads(ac, &batch, &idx, &cfg).unwrap().total);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn zero_advantages_leave_only_entropy_gradient_on_the_actor() {
    let mut r = rng(9);
    let mut ac = ActorCritic::new(&PolicyConfig::default(), &mut r).unwrap();
    let mut batch = random_batch(&ac, 8, &mut r);
    batch.advantages = vec![0.0; 8];
    let cfg = PpoConfig::default();
    zero_grad(&mut ac);
    ppo_loss_and_grads(&mut ac, &batch, &(0..8).collect::<Vec<_>>(), &cfg).unwrap();
    assert!(flatten_grads(&ac.actor.net).iter().all(|g| *g == 0.0));
    assert!(ac.actor.log_std.grad.iter().all(|g| (*g + cfg.entropy_coef).abs() < 1e-15));
}

#[test]
fn ratio_outside_clip_with_positive_advantage_is_clipped() {
    let mut r = rng(10);
    let mut ac = ActorCritic::new(&PolicyConfig::default(), &mut r).unwrap();
    let mut batch = random_batch(&ac, 1, &mut r);
    let mean = ac.actor.mean(&batch.actor_in).unwrap();
    let lp = gaussian_log_prob(&mean, &ac.actor.log_std.value, &batch.actions)[0];
    batch.old_log_prob = vec![lp - 1.0];
    batch.advantages = vec![1.0];
    let cfg = PpoConfig { entropy_coef: 0.0, ..PpoConfig::default() };
    zero_grad(&mut ac);
    let l = ppo_loss_and_grads(&mut ac, &batch, &[0], &cfg).unwrap();
    assert_eq!(l.clip_fraction, 1.0);
    assert!((l.surrogate + 1.2).abs() < 1e-12);
    assert!(flatten_grads(&ac.actor).iter().all(|g| *g == 0.0));
}

#[test]
fn ppo_update_is_bit_reproducible() {
    let run = || {
        let mut r = rng(11);
        let mut ac = ActorCritic::new(&PolicyConfig::default(), &mut r).unwrap();
        let batch = random_batch(&ac, 64, &mut r);
        let mut opt = Adam::new(1e-3);
        let stats = ppo_update(&mut ac, &mut opt, &batch, &PpoConfig::default(), &mut r).unwrap();
        (flatten_params(&ac), stats)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(sa, sb);
    assert_eq!(sa.updates, 20);
}

#[test]
fn non_finite_batch_aborts_without_touching_parameters() {
    let mut r = rng(12);
    let mut ac = ActorCritic::new(&PolicyConfig::default(), &mut r).unwrap();
    let mut batch = random_batch(&ac, 8, &mut r);
    batch.returns[3] = f64::NAN;
    let before = flatten_params(&ac);
    let mut opt = Adam::new(1e-3);
    let stats = ppo_update(&mut ac, &mut opt, &batch, &PpoConfig { minibatches: 1, ..PpoConfig::default() }, &mut r).unwrap();
    assert!(stats.aborted);
    assert_eq!(stats.updates, 0);
    assert_eq!(flatten_params(&ac), before);
}

#[test]
fn rollout_buffer_layout_and_bootstrap() {
    let mut buf = RolloutBuffer::new(2, 3, 4, 5);
    assert!(buf.store_step(0, &Mat::zeros((3, 4)), &Mat::zeros((3, 5)), &Mat::zeros((3, 12)), &Mat::zeros((3, 12)), &[0.0; 3], &[0.0; 3]).is_ok());
    assert!(buf.store_step(1, &Mat::zeros((2, 4)), &Mat::zeros((3, 5)), &Mat::zeros((3, 12)), &Mat::zeros((3, 12)), &[0.0; 3], &[0.0; 3]).is_err());
    buf.store_step(1, &Mat::ones((3, 4)), &Mat::zeros((3, 5)), &Mat::zeros((3, 12)), &Mat::zeros((3, 12)), &[0.0; 3], &[0.5; 3]).unwrap();
    buf.store_outcome(0, &[1.0; 3], &[false, true, false]);
    buf.store_outcome(1, &[0.0; 3], &[false; 3]);
    let b = buf.finish(&[2.0; 3], &Mat::zeros((1, 12)), 0.5, 1.0).unwrap();
    assert_eq!(b.len(), 6);
    assert_eq!(b.actor_in.row(3), ndarray::Array1::<f64>::ones(4));
    // env 0: A_1 = 0 + 0.5 * 2 - 0.5 = 0.5, A_0 = 1 + 0.5 * 0.5 - 0 + 0.5 * 0.5 = 1.5
    assert!((b.advantages[0] - 1.5).abs() < 1e-15);
    assert!((b.advantages[1] - 1.0).abs() < 1e-15);
    assert!((b.advantages[3] - 0.5).abs() < 1e-15);
}
