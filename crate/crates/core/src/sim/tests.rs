use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;
use crate::model::{build_liquidation, ControlSpace, GrowthParams, HSpec, LiquidationParams, RewardSpec};
use crate::optimize::PolicyForm;

fn sym2(initial: Vec<f64>) -> RegimeModel {
    RegimeModel::new(vec![vec![-1.0, 1.0], vec![1.0, -1.0]], initial).unwrap()
}

fn unit_box() -> ControlSpace {
    ControlSpace::new(vec![0.0], vec![1.0], vec![0.0]).unwrap()
}

/// Two regimes, scalar observation, regime-constant `h`.
fn two_state(h: [f64; 2], f: RewardSpec, g: RewardSpec) -> ModelSpec {
    let spec = ModelSpec {
        dim_d: 1,
        regime: sym2(vec![1.0, 0.0]),
        controls: unit_box(),
        h: HSpec::regime_constant(vec![vec![h[0]], vec![h[1]]]),
        f,
        g,
        sigma: SigmaSpec::identity(1),
        growth: GrowthParams::default(),
        y0: vec![0.0],
    };
    spec.validate().unwrap();
    spec
}

fn zero_policy(model: &ModelSpec) -> Policy {
    Policy::constant(vec![0.0], model.controls.clone(), model.n_states(), model.dim_d).unwrap()
}

fn liq_params(nu: f64) -> LiquidationParams {
    LiquidationParams {
        eps: 1.0,
        gamma_vol: 1.0,
        nu,
        eta_cost: 0.1,
        theta_pen: 0.0,
        regime_drifts: vec![-1.0, 1.0],
        i0: 1.0,
        p0_init: 10.0,
        alpha_max: 2.0,
    }
}

/// `a = clamp(0.5 + 0.3 I)` for the liquidation model.
fn inventory_policy(model: &ModelSpec) -> Policy {
    Policy::new(PolicyForm::AffineClamped, vec![0.5, 0.0, 0.0, 0.3, 0.0, 0.0], model.controls.clone(), 2, 2).unwrap()
}

#[test]
fn y_step_examples() {
    assert_eq!(y_step(&[1.0, 2.0], &[0.1, -0.2], &SigmaSpec::identity(2)), vec![1.1, 1.8]);
    assert_eq!(y_step(&[1.0, 2.0], &[0.0, 0.0], &SigmaSpec::diag(vec![2.0, 3.0])), vec![1.0, 2.0]);
    assert_eq!(y_step(&[1.0, 2.0], &[1.0, 1.0], &SigmaSpec::diag(vec![2.0, 3.0])), vec![3.0, 5.0]);
}

#[test]
fn zakai_examples() {
    let still = RegimeModel::new(vec![vec![0.0, 0.0], vec![0.0, 0.0]], vec![1.0, 0.0]).unwrap();
    let x = zakai_step(&[0.3, 0.7], &[0.0, 0.0], &[0.4], 0.01, &still).unwrap();
    assert_eq!(x, vec![0.3, 0.7]);

    let x = zakai_step(&[1.0, 0.0], &[0.0, 0.0], &[0.0], 0.1, &sym2(vec![1.0, 0.0])).unwrap();
    let decay = (-0.2f64).exp();
    assert_abs_diff_eq!(x[0], 0.5 * (1.0 + decay), epsilon = 1e-14);
    assert_abs_diff_eq!(x[1], 0.5 * (1.0 - decay), epsilon = 1e-14);
    assert_abs_diff_eq!(x[0], 0.9094, epsilon = 1e-4);

    let one = RegimeModel::new(vec![vec![0.0]], vec![1.0]).unwrap();
    let x = zakai_step(&[1.0], &[1.0], &[0.2], 0.01, &one).unwrap();
    assert_abs_diff_eq!(x[0], 0.195f64.exp(), epsilon = 1e-14);
    assert_abs_diff_eq!(x[0], 1.2153, epsilon = 1e-4);
}

#[test]
fn zakai_overflow_is_an_error() {
    let one = RegimeModel::new(vec![vec![0.0]], vec![1.0]).unwrap();
    assert!(matches!(zakai_step(&[1.0], &[1.0], &[800.0], 0.01, &one), Err(SimError::Overflow(_))));
}

proptest! {
    #[test]
    fn zakai_keeps_positivity(
        x in proptest::collection::vec(0.0f64..5.0, 2),
        h in proptest::collection::vec(-3.0f64..3.0, 2),
        dw in -2.0f64..2.0,
        dt in 1e-4f64..0.1,
    ) {
        let out = zakai_step(&x, &h, &[dw], dt, &sym2(vec![0.5, 0.5])).unwrap();
        prop_assert!(out.iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn single_particle_matches_scalar_ops() {
    let model = two_state([0.5, -1.0], RewardSpec::zero(), RewardSpec::zero());
    let policy = zero_policy(&model);
    let cfg = SimConfig::new(0.0, 0.1, 0.01, 1, 42);
    let traj = simulate_separated(&model, &policy, &cfg, &InitialCondition::Deterministic).unwrap();

    let noise = NoiseSource::new(42, Domain::Separated, 1);
    let decay = (-2.0 * 0.01f64).exp();
    let (c, s) = (0.5 * (1.0 + decay), 0.5 * (1.0 - decay));
    let (mut x, mut y) = ([1.0f64, 0.0], 0.0f64);
    let mut z = [0.0];
    for k in 0..10 {
        noise.normals(0, k, &mut z);
        let dw = 0.1 * z[0];
        let g0 = x[0] * (0.5 * dw - 0.5 * 0.25 * 0.01).exp();
        let g1 = x[1] * (-dw - 0.5 * 0.01).exp();
        x = [c * g0 + s * g1, s * g0 + c * g1];
        y += dw;
    }
    assert_abs_diff_eq!(traj.last.x[0], x[0], epsilon = 1e-13);
    assert_abs_diff_eq!(traj.last.x[1], x[1], epsilon = 1e-13);
    assert_abs_diff_eq!(traj.last.y[0], y, epsilon = 1e-13);
}

#[test]
fn liquidation_step_matches_hand_evaluation() {
    let params = liq_params(0.5);
    let model = build_liquidation(&params, sym2(vec![0.4, 0.6])).unwrap();
    let policy = inventory_policy(&model);
    let dt = 0.01;
    let cfg = SimConfig::new(0.0, 0.5, dt, 3, 9);
    let stepper = Stepper::new(&model, &policy, &cfg).unwrap();
    let start = stepper.initial_cloud(&InitialCondition::Random { y_std: vec![1.0, 0.5], mass_std: 0.4 });
    let traj = stepper.run(start.clone(), 1, FlowSource::Live).unwrap();

    let a: Vec<f64> = (0..3).map(|i| (0.5 + 0.3 * start.y_of(i)[0]).clamp(0.0, 2.0)).collect();
    let m: Vec<f64> = (0..3).map(|i| start.x_of(i).iter().sum()).collect();
    assert!(a.iter().any(|v| (v - a[0]).abs() > 1e-3), "controls should differ");
    let abar = (0..3).map(|i| m[i] * a[i]).sum::<f64>() / m.iter().sum::<f64>();

    let noise = NoiseSource::new(9, Domain::Separated, 2);
    let decay = (-2.0 * dt).exp();
    let (c, s) = (0.5 * (1.0 + decay), 0.5 * (1.0 - decay));
    let mut rate = 0.0;
    for i in 0..3 {
        let mut z = [0.0; 2];
        noise.normals(i as u64, 0, &mut z);
        let dw = [dt.sqrt() * z[0], dt.sqrt() * z[1]];
        let x = start.x_of(i);
        let y = start.y_of(i);
        let mut g = [0.0; 2];
        for (j, drift) in [-1.0, 1.0].iter().enumerate() {
            let h = [-a[i], drift - 0.5 * abar];
            let e = h[0] * dw[0] + h[1] * dw[1] - 0.5 * (h[0] * h[0] + h[1] * h[1]) * dt;
            g[j] = x[j] * e.exp();
        }
        let want = [c * g[0] + s * g[1], s * g[0] + c * g[1]];
        let got = traj.last.x_of(i);
        assert_abs_diff_eq!(got[0], want[0], epsilon = 1e-13 * want[0].abs().max(1.0));
        assert_abs_diff_eq!(got[1], want[1], epsilon = 1e-13 * want[1].abs().max(1.0));
        assert_abs_diff_eq!(traj.last.y_of(i)[0], y[0] + dw[0], epsilon = 1e-13);
        assert_abs_diff_eq!(traj.last.y_of(i)[1], y[1] + dw[1], epsilon = 1e-13);
        rate += m[i] * (a[i] * y[1] - 0.1 * a[i] * a[i]);
    }
    assert_abs_diff_eq!(traj.reward_rates[0], rate / 3.0, epsilon = 1e-12);
    // controls refreshed at the new state
    for i in 0..3 {
        assert_abs_diff_eq!(traj.last.a_of(i)[0], (0.5 + 0.3 * traj.last.y_of(i)[0]).clamp(0.0, 2.0), epsilon = 1e-15);
    }
}

#[test]
fn empty_horizon_has_one_snapshot() {
    let model = two_state([0.5, -0.5], RewardSpec::constant(1.0, 2), RewardSpec::zero());
    let cfg = SimConfig::new(0.5, 0.5, 0.01, 10, 1);
    let traj = simulate_separated(&model, &zero_policy(&model), &cfg, &InitialCondition::Deterministic).unwrap();
    assert_eq!(traj.clouds.len(), 1);
    assert_eq!(traj.running_reward, 0.0);
}

#[test]
fn reward_trivial_cases() {
    let cfg = SimConfig::new(0.0, 1.0, 0.01, 200, 5);
    let model = two_state([0.5, -0.5], RewardSpec::zero(), RewardSpec::zero());
    let r = estimate_reward(&model, &zero_policy(&model), &cfg).unwrap();
    assert_eq!((r.j_hat, r.stderr), (0.0, 0.0));

    let model = two_state([0.0, 0.0], RewardSpec::zero(), RewardSpec::constant(1.0, 2));
    let r = estimate_reward(&model, &zero_policy(&model), &cfg).unwrap();
    assert_abs_diff_eq!(r.j_hat, 1.0, epsilon = 1e-12);

    let cfg = SimConfig::new(0.25, 1.0, 0.01, 4000, 5);
    let model = two_state([0.7, -0.7], RewardSpec::constant(1.0, 2), RewardSpec::zero());
    let r = estimate_reward(&model, &zero_policy(&model), &cfg).unwrap();
    assert!((r.j_hat - 0.75).abs() <= 3.0 * r.stderr + 1e-12, "{r:?}");
}

#[test]
fn filter_mean_matches_regime_marginal() {
    let model = two_state([1.0, -1.0], RewardSpec::zero(), RewardSpec::zero());
    let mut cfg = SimConfig::new(0.0, 1.0, 0.01, 5000, 17);
    cfg.record_every = 50;
    let traj = simulate_separated(&model, &zero_policy(&model), &cfg, &InitialCondition::Deterministic).unwrap();
    assert_eq!(traj.negative_count, 0);
    for (t, cloud) in traj.times.iter().zip(&traj.clouds) {
        let p = model.regime.marginal(*t);
        for j in 0..2 {
            let (mean, se) = cloud.component_stats(j);
            assert!((mean - p[j]).abs() <= 3.0 * se + 0.01, "t={t} j={j} {mean} vs {}", p[j]);
        }
        let (mass, se) = cloud.mass_stats();
        assert!((mass - 1.0).abs() <= 5.0 * se + 1e-12);
    }
}

#[test]
fn girsanov_examples() {
    assert_eq!(girsanov_weight(&[0.0, 0.0], &[0.3, -0.1], 0.01).unwrap(), 1.0);
    assert_abs_diff_eq!(girsanov_weight(&[1.0], &[0.3], 0.01).unwrap(), 0.295f64.exp(), epsilon = 1e-14);
    assert!(matches!(girsanov_weight(&[1.0], &[701.0], 0.0), Err(SimError::Overflow(_))));

    let steps = 50;
    let dt: f64 = 0.02;
    let weights: Vec<f64> = (0..20_000u64)
        .map(|j| {
            let z = stream_normals(3, Domain::OriginalNoise, j, steps);
            let dw: Vec<f64> = z.iter().map(|v| v * dt.sqrt()).collect();
            girsanov_weight(&vec![1.0; steps], &dw, dt).unwrap()
        })
        .collect();
    let (mean, se) = mean_and_se(&weights);
    assert!((mean - 1.0).abs() <= 3.0 * se, "{mean} ± {se}");
}

#[test]
fn chain_path_marginal_matches_forward_equation() {
    let regime = RegimeModel::new(vec![vec![-2.0, 1.5, 0.5], vec![1.0, -1.0, 0.0], vec![0.0, 0.0, 0.0]], vec![1.0, 0.0, 0.0]).unwrap();
    let paths = 30_000u64;
    let t = 0.7;
    let mut counts = [0.0f64; 3];
    for j in 0..paths {
        let mut rng = stream_rng(8, Domain::OriginalChain, j);
        let path = markov_chain_path(&regime, 1.0, &mut rng);
        counts[path.state_at(t)] += 1.0;
        assert!(path.jump_times.windows(2).all(|w| w[1] > w[0]));
    }
    let p = regime.marginal(t);
    for k in 0..3 {
        let q = counts[k] / paths as f64;
        let se = (p[k] * (1.0 - p[k]) / paths as f64).sqrt();
        assert!((q - p[k]).abs() <= 3.0 * se + 1e-12, "state {k}: {q} vs {}", p[k]);
    }
}

#[test]
fn chain_path_trivial_cases() {
    let still = RegimeModel::new(vec![vec![0.0, 0.0], vec![0.0, 0.0]], vec![0.0, 1.0]).unwrap();
    let mut rng = stream_rng(1, Domain::OriginalChain, 0);
    let path = markov_chain_path(&still, 5.0, &mut rng);
    assert_eq!(path.n_jumps(), 0);
    assert_eq!(path.state_at(4.0), 1);
    let one = RegimeModel::new(vec![vec![0.0]], vec![1.0]).unwrap();
    assert_eq!(markov_chain_path(&one, 5.0, &mut rng).states, vec![0]);
}

#[test]
fn original_trivial_and_indicator_reward() {
    let model = two_state([0.5, -0.5], RewardSpec::zero(), RewardSpec::constant(1.0, 2));
    let cfg = SimConfig::new(0.0, 1.0, 0.01, 500, 2);
    let (j, se) = simulate_original(&model, &zero_policy(&model), &cfg).unwrap().estimate();
    assert_eq!((j, se), (1.0, 0.0));

    let f = RewardSpec { offset: vec![1.0, 0.0], ..RewardSpec::default() };
    let model = two_state([0.5, -0.5], f, RewardSpec::zero());
    let cfg = SimConfig::new(0.0, 1.0, 0.01, 20_000, 2);
    let (j, se) = simulate_original(&model, &zero_policy(&model), &cfg).unwrap().estimate();
    // ∫₀¹ ½(1 + e^{-2s}) ds
    let exact = 0.5 + 0.25 * (1.0 - (-2.0f64).exp());
    assert!((j - exact).abs() <= 3.0 * se + 0.01, "{j} ± {se} vs {exact}");
}

#[test]
fn original_likelihood_is_a_martingale() {
    let model = two_state([0.8, -0.4], RewardSpec::zero(), RewardSpec::zero());
    let cfg = SimConfig::new(0.0, 1.0, 0.01, 10_000, 4);
    let run = simulate_original(&model, &zero_policy(&model), &cfg).unwrap();
    // under the physical measure E[1/L] = 1
    let inv: Vec<f64> = run.log_likelihood.iter().map(|l| (-l).exp()).collect();
    let (mean, se) = mean_and_se(&inv);
    assert!((mean - 1.0).abs() <= 3.0 * se, "{mean} ± {se}");
}

#[test]
fn original_rejects_mean_field() {
    let model = build_liquidation(&liq_params(0.5), sym2(vec![0.5, 0.5])).unwrap();
    let cfg = SimConfig::new(0.0, 1.0, 0.01, 10, 4);
    assert!(matches!(simulate_original(&model, &inventory_policy(&model), &cfg), Err(SimError::MeanFieldUnsupported)));
}

#[test]
fn separated_and_original_rewards_agree() {
    let f = RewardSpec { offset: vec![1.0, -0.5], linear: vec![0.3], ..RewardSpec::default() };
    let g = RewardSpec { offset: vec![0.0, 1.0], ..RewardSpec::default() };
    let model = two_state([1.0, -1.0], f, g);
    let policy = zero_policy(&model);
    let cfg = SimConfig::new(0.0, 1.0, 0.01, 20_000, 12);
    let sep = estimate_reward(&model, &policy, &cfg).unwrap();
    let (jo, so) = simulate_original(&model, &policy, &cfg).unwrap().estimate();
    let combined = (sep.stderr.powi(2) + so * so).sqrt();
    assert!((sep.j_hat - jo).abs() <= 3.0 * combined + 0.02, "{} vs {jo}", sep.j_hat);
}

#[test]
fn flow_restart_is_exact() {
    let model = build_liquidation(&liq_params(0.5), sym2(vec![0.5, 0.5])).unwrap();
    let policy = inventory_policy(&model);
    let mut cfg = SimConfig::new(0.0, 0.2, 0.01, 64, 21);
    cfg.record_every = 3;
    for s in [0.0, 0.1, 0.2] {
        assert_eq!(flow_restart_check(&model, &policy, &cfg, s).unwrap(), 0.0, "split {s}");
    }
    assert!(matches!(flow_restart_check(&model, &policy, &cfg, 0.105), Err(SimError::OffGrid(_))));
}

#[test]
fn snapshot_round_trip() {
    let model = build_liquidation(&liq_params(0.5), sym2(vec![0.5, 0.5])).unwrap();
    let policy = inventory_policy(&model);
    let cfg = SimConfig::new(0.0, 0.05, 0.01, 7, 3);
    let traj = simulate_separated(&model, &policy, &cfg, &InitialCondition::Deterministic).unwrap();
    let mut buf = Vec::new();
    write_snapshot(&traj.last, &mut buf).unwrap();
    assert_eq!(&buf[..4], SNAPSHOT_MAGIC);
    let back = read_snapshot(&mut buf.as_slice()).unwrap();
    assert_eq!(back, traj.last);
    buf[4] = 99;
    assert!(read_snapshot(&mut buf.as_slice()).is_err());
    assert!(read_snapshot(&mut &b"ZMF"[..]).is_err());
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let model = build_liquidation(&liq_params(0.5), sym2(vec![0.5, 0.5])).unwrap();
    let policy = inventory_policy(&model);
    let mut cfg = SimConfig::new(0.0, 0.1, 0.01, 9000, 77);
    cfg.record_every = 5;
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| simulate_separated(&model, &policy, &cfg, &InitialCondition::Deterministic).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a, b);
    assert_eq!(a.running_reward.to_bits(), b.running_reward.to_bits());
}

#[test]
fn picard_non_mean_field_is_fixed_immediately() {
    let model = two_state([1.0, -1.0], RewardSpec::zero(), RewardSpec::zero());
    let cfg = SimConfig::new(0.0, 0.2, 0.01, 100, 3);
    let rep = picard_solve(&model, &zero_policy(&model), &cfg, 3, 0.0).unwrap();
    assert_eq!(rep.diffs[0], 0.0);
    let rep = picard_solve(&model, &zero_policy(&model), &cfg, 0, 0.0).unwrap();
    assert_eq!(rep.iterates.len(), 1);
    assert!(rep.diffs.is_empty());
}

#[test]
fn picard_liquidation_contracts() {
    let model = build_liquidation(&liq_params(0.5), sym2(vec![0.5, 0.5])).unwrap();
    let policy = inventory_policy(&model);
    let cfg = SimConfig::new(0.0, 1.0, 0.01, 500, 3);
    let rep = picard_solve(&model, &policy, &cfg, 3, 0.0).unwrap();
    assert_eq!(rep.diffs.len(), 3);
    assert!(rep.diffs[0] > 0.0);
    assert!(rep.diffs.windows(2).all(|w| w[1] < w[0]), "{:?}", rep.diffs);
}

#[test]
fn coarse_and_fine_grids_share_noise() {
    let model = two_state([0.0, 0.0], RewardSpec::zero(), RewardSpec::zero());
    let policy = zero_policy(&model);
    let mut coarse = SimConfig::new(0.0, 0.1, 0.02, 4, 6);
    coarse.noise_dt = Some(0.01);
    let mut fine = coarse.clone();
    fine.dt = 0.01;
    let a = simulate_separated(&model, &policy, &coarse, &InitialCondition::Deterministic).unwrap();
    let b = simulate_separated(&model, &policy, &fine, &InitialCondition::Deterministic).unwrap();
    // σ = I and h = 0: Y is the Brownian path itself on both grids
    for (u, v) in a.last.y.iter().zip(&b.last.y) {
        assert_abs_diff_eq!(u, v, epsilon = 1e-13);
    }
}

#[test]
fn config_validation() {
    assert!(SimConfig::new(0.0, 1.0, 0.3, 10, 0).validate().is_err());
    assert!(SimConfig::new(0.0, 1.0, 0.03, 10, 0).validate().is_err());
    assert!(SimConfig::new(1.0, 0.5, 0.01, 10, 0).validate().is_err());
    assert!(SimConfig::new(0.0, 1.0, 0.01, 0, 0).validate().is_err());
    assert!(SimConfig::new(0.0, 1.0, 0.01, 10, 0).validate().is_ok());
}

#[test]
fn observed_run_matches_recorded_run() {
    let model = build_liquidation(&liq_params(0.5), sym2(vec![0.5, 0.5])).unwrap();
    let policy = inventory_policy(&model);
    let cfg = SimConfig::new(0.0, 0.1, 0.01, 50, 13);
    let stepper = Stepper::new(&model, &policy, &cfg).unwrap();
    let start = stepper.initial_cloud(&InitialCondition::Deterministic);
    let traj = stepper.run(start.clone(), cfg.n_steps(), FlowSource::Live).unwrap();
    let mut seen = Vec::new();
    let (last, negatives) = stepper
        .run_observed::<SimError, _>(start, cfg.n_steps(), FlowSource::Live, |c| {
            seen.push(c.clone());
            Ok(())
        })
        .unwrap();
    assert_eq!(last, traj.last);
    assert_eq!(seen, traj.clouds);
    assert_eq!(negatives, traj.negative_count);
}
