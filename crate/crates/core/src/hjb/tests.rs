use approx::assert_abs_diff_eq;

use super::*;
use crate::model::{build_liquidation, ControlSpace, GrowthParams, HSpec, LiquidationParams, RegimeModel, RewardSpec, SigmaSpec};
use crate::optimize::{Policy, PolicyForm};
use crate::sim::{simulate_separated, InitialCondition, SimConfig};

fn sym2() -> RegimeModel {
    RegimeModel::new(vec![vec![-1.0, 1.0], vec![1.0, -1.0]], vec![0.5, 0.5]).unwrap()
}

fn two_state(h: [f64; 2], sigma: SigmaSpec, f: RewardSpec, g: RewardSpec) -> ModelSpec {
    let spec = ModelSpec {
        dim_d: 1,
        regime: sym2(),
        controls: ControlSpace::new(vec![0.0], vec![1.0], vec![0.0]).unwrap(),
        h: HSpec::regime_constant(vec![vec![h[0]], vec![h[1]]]),
        f,
        g,
        sigma,
        growth: GrowthParams::default(),
        y0: vec![0.0],
    };
    spec.validate().unwrap();
    spec
}

fn liq_params(eta: f64, theta: f64) -> LiquidationParams {
    LiquidationParams {
        eps: 1.0,
        gamma_vol: 1.0,
        nu: 0.5,
        eta_cost: eta,
        theta_pen: theta,
        regime_drifts: vec![-1.0, 1.0],
        i0: 1.0,
        p0_init: 10.0,
        alpha_max: 5.0,
    }
}

/// Three particles with distinct `(x, y)` and controls.
fn small_cloud(n: usize, d: usize) -> ParticleCloud {
    let mut c = ParticleCloud::uniform(3, &vec![0.5; n], &vec![0.0; d], &[0.0], 0.0);
    let xs = [0.2, 0.9, 1.3, 0.4, 0.05, 0.7];
    let ys = [0.3, -1.1, 0.8, 2.0, -0.4, 0.6];
    for (i, v) in c.x.iter_mut().enumerate() {
        *v = xs[i % xs.len()] + 0.1 * (i / xs.len()) as f64;
    }
    for (i, v) in c.y.iter_mut().enumerate() {
        *v = ys[i % ys.len()];
    }
    c.a = vec![0.1, 0.6, 0.9];
    c
}

fn quadratic_outer() -> OuterFn {
    // F(z) = z²
    OuterFn::Quadratic { linear: vec![0.0], quad: vec![vec![2.0]] }
}

#[test]
fn lfd_examples() {
    let cloud = small_cloud(2, 1);
    let mass = CylindricalTestFn::mass(2, 1);
    assert_abs_diff_eq!(lfd_value(&mass, 0.0, &cloud, &[0.3, 0.4], &[7.0]), 0.7, epsilon = 1e-15);

    let flat = CylindricalTestFn::new(OuterFn::Linear { constant: 3.0, coeffs: vec![0.0], time: 0.0 }, vec![Polynomial::mass(2, 1)], 2, 1).unwrap();
    assert_eq!(lfd_value(&flat, 0.0, &cloud, &[0.3, 0.4], &[7.0]), 0.0);

    // z̄ = mean y = 0.5
    let mut cloud = ParticleCloud::uniform(2, &[1.0, 0.0], &[0.0], &[0.0], 0.0);
    cloud.y = vec![0.2, 0.8];
    let v = CylindricalTestFn::new(quadratic_outer(), vec![Polynomial::y_power(2, 1, 0, 1)], 2, 1).unwrap();
    for y1 in [-2.0, 0.0, 1.5] {
        let got = lfd_value(&v, 0.0, &cloud, &[0.1, 0.2], &[y1]);
        assert_abs_diff_eq!(got, y1, epsilon = 1e-14);
        // derivative along (1-θ)μ̂ + θδ_(x,y) at θ = 0, minus its mean over μ̂
        let e = 1e-6;
        let zbar = 0.5;
        let z = |th: f64| (1.0 - th) * zbar + th * y1;
        let fd = (v.value_at(0.0, &[z(e)]) - v.value_at(0.0, &[z(-e)])) / (2.0 * e);
        let centred = got - lfd_value(&v, 0.0, &cloud, &[0.0, 0.0], &[zbar]);
        assert_abs_diff_eq!(fd, centred, epsilon = 1e-7);
    }
}

/// 16-point Gauss–Legendre nodes and weights on [0, 1].
fn gauss_legendre_16() -> Vec<(f64, f64)> {
    let n = 16;
    (0..n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            (0.5 * (x + 1.0), 0.5 * w)
        })
        .collect()
}

#[test]
fn flat_derivative_identity_on_mixtures() {
    let nodes = gauss_legendre_16();
    assert_abs_diff_eq!(nodes.iter().map(|(_, w)| w).sum::<f64>(), 1.0, epsilon = 1e-14);

    let inners = vec![
        Polynomial::weighted_y_power(2, 2, 0, 2),
        Polynomial {
            terms: vec![
                Monomial { coef: 0.7, x_pow: vec![1, 1], y_pow: vec![0, 2] },
                Monomial { coef: -1.3, x_pow: vec![0, 0], y_pow: vec![1, 0] },
            ],
        },
    ];
    let outer = OuterFn::Quadratic { linear: vec![0.4, -1.0], quad: vec![vec![1.5, 0.3], vec![0.3, -0.8]] };
    let v = CylindricalTestFn::new(outer, inners, 2, 2).unwrap();

    let mu = small_cloud(2, 2);
    let mut nu = small_cloud(2, 2);
    nu.x.iter_mut().for_each(|x| *x = 1.5 - *x);
    nu.y.iter_mut().for_each(|y| *y = 0.5 * *y - 0.3);

    let (z_mu, z_nu) = (v.inner_means(&mu), v.inner_means(&nu));
    let lhs = v.value(0.0, &nu) - v.value(0.0, &mu);
    let mut rhs = 0.0;
    for (th, w) in nodes {
        let z: Vec<f64> = z_mu.iter().zip(&z_nu).map(|(a, b)| (1.0 - th) * a + th * b).collect();
        let grad = v.outer.grad(0.0, &z);
        // mean of δ_m v over ν̂ atoms minus over μ̂ atoms
        let integrand: f64 = (0..3)
            .map(|i| v.inners.iter().zip(&grad).map(|(p, g)| g * (p.eval(nu.x_of(i), nu.y_of(i)) - p.eval(mu.x_of(i), mu.y_of(i)))).sum::<f64>())
            .sum::<f64>()
            / 3.0;
        rhs += w * integrand;
    }
    assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-6);
    assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
}

#[test]
fn lfd_jet_matches_finite_differences() {
    let inners = vec![Polynomial {
        terms: vec![
            Monomial { coef: 1.0, x_pow: vec![2, 0], y_pow: vec![1] },
            Monomial { coef: -0.5, x_pow: vec![0, 1], y_pow: vec![3] },
        ],
    }];
    let v = CylindricalTestFn::new(quadratic_outer(), inners, 2, 1).unwrap();
    let cloud = small_cloud(2, 1);
    let pt = [0.4, 0.7, -0.6];
    let jet = v.lfd_jet(0.0, &cloud, &pt[..2], &pt[2..]);
    let at = |p: &[f64]| lfd_value(&v, 0.0, &cloud, &p[..2], &p[2..]);
    assert_abs_diff_eq!(jet.value, at(&pt), epsilon = 1e-14);
    let e = 1e-5;
    for a in 0..3 {
        let mut p = pt;
        p[a] += e;
        let up = at(&p);
        p[a] -= 2.0 * e;
        let down = at(&p);
        let fd = (up - down) / (2.0 * e);
        assert!((jet.grad[a] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "grad {a}");
        for b in 0..3 {
            let g = |p: &[f64]| v.lfd_jet(0.0, &cloud, &p[..2], &p[2..]).grad[b];
            let mut p = pt;
            p[a] += e;
            let up = g(&p);
            p[a] -= 2.0 * e;
            let fd2 = (up - g(&p)) / (2.0 * e);
            assert!((jet.hess[a * 3 + b] - fd2).abs() <= 1e-6 * fd2.abs().max(1.0), "hess {a} {b}");
        }
    }
}

#[test]
fn self_test_rejects_bad_degree() {
    let p = Polynomial { terms: vec![Monomial { coef: 1.0, x_pow: vec![0, 0], y_pow: vec![5] }] };
    assert!(CylindricalTestFn::new(OuterFn::identity(), vec![p], 2, 1).is_err());
    assert!(CylindricalTestFn::new(OuterFn::identity(), vec![], 2, 1).is_err());
}

#[test]
fn generator_on_mass_vanishes() {
    let model = two_state([1.5, -0.7], SigmaSpec::identity(1), RewardSpec::zero(), RewardSpec::zero());
    let g = generator_apply(&CylindricalTestFn::mass(2, 1), 0.0, &small_cloud(2, 1), &model).unwrap();
    assert!(g.total().abs() <= 1e-12, "{g:?}");
    assert_eq!(g.xx_term, 0.0);
    assert_eq!(g.xy_term, 0.0);
    assert_eq!(g.yy_term, 0.0);
}

#[test]
fn generator_on_y_mean_vanishes() {
    let model = two_state([1.5, -0.7], SigmaSpec::diag(vec![2.0]), RewardSpec::zero(), RewardSpec::zero());
    let g = generator_apply(&CylindricalTestFn::y_moment(2, 1, 0, 1), 0.0, &small_cloud(2, 1), &model).unwrap();
    assert_eq!(g.total(), 0.0);
}

#[test]
fn generator_yy_term_of_second_moment() {
    let model = two_state([1.5, -0.7], SigmaSpec::identity(1), RewardSpec::zero(), RewardSpec::zero());
    let g = generator_apply(&CylindricalTestFn::y_moment(2, 1, 0, 2), 0.0, &small_cloud(2, 1), &model).unwrap();
    assert_abs_diff_eq!(g.yy_term, 1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(g.total(), 1.0, epsilon = 1e-15);
}

#[test]
fn generator_terms_match_hand_oracle() {
    // ψ = x₁x₂ + ⟨x,1⟩y², σ = 2, h = (1.5, -0.7), f = 1{regime 1}
    let h = [1.5, -0.7];
    let f = RewardSpec { offset: vec![1.0, 0.0], ..RewardSpec::default() };
    let model = two_state(h, SigmaSpec::diag(vec![2.0]), f, RewardSpec::zero());
    let mut terms = Polynomial::weighted_y_power(2, 1, 0, 2).terms;
    terms.push(Monomial { coef: 1.0, x_pow: vec![1, 1], y_pow: vec![0] });
    let v = CylindricalTestFn::new(OuterFn::identity(), vec![Polynomial { terms }], 2, 1).unwrap();
    let cloud = small_cloud(2, 1);
    let g = generator_apply(&v, 0.0, &cloud, &model).unwrap();

    let (mut drift, mut xx, mut xy, mut yy, mut ft) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..3 {
        let x = cloud.x_of(i);
        let y = cloud.y_of(i)[0];
        // Λᵀx for the symmetric chain
        let lx = [x[1] - x[0], x[0] - x[1]];
        let gx = [x[1] + y * y, x[0] + y * y];
        drift += gx[0] * lx[0] + gx[1] * lx[1];
        xx += x[0] * x[1] * h[0] * h[1];
        xy += (x[0] * h[0] + x[1] * h[1]) * 2.0 * 2.0 * y;
        yy += 0.5 * 4.0 * 2.0 * (x[0] + x[1]);
        ft += x[0];
    }
    assert_abs_diff_eq!(g.drift_term, drift / 3.0, epsilon = 1e-13);
    assert_abs_diff_eq!(g.xx_term, xx / 3.0, epsilon = 1e-13);
    assert_abs_diff_eq!(g.xy_term, xy / 3.0, epsilon = 1e-13);
    assert_abs_diff_eq!(g.yy_term, yy / 3.0, epsilon = 1e-13);
    assert_abs_diff_eq!(g.f_term, ft / 3.0, epsilon = 1e-13);
    assert_abs_diff_eq!(g.total(), g.total_without_f() + g.f_term, epsilon = 1e-12);
}

#[test]
fn ito_residual_basic_cases() {
    let model = two_state([1.0, -1.0], SigmaSpec::identity(1), RewardSpec::zero(), RewardSpec::zero());
    let policy = Policy::constant(vec![0.0], model.controls.clone(), 2, 1).unwrap();
    let cfg = SimConfig::new(0.0, 0.5, 0.01, 2000, 4);
    let traj = simulate_separated(&model, &policy, &cfg, &InitialCondition::Deterministic).unwrap();

    let flat = CylindricalTestFn::new(OuterFn::Linear { constant: 2.0, coeffs: vec![0.0], time: 0.0 }, vec![Polynomial::mass(2, 1)], 2, 1).unwrap();
    assert_eq!(ito_residual(&flat, &traj, &model).unwrap().residual, 0.0);

    let res = ito_residual(&CylindricalTestFn::mass(2, 1), &traj, &model).unwrap();
    let (_, se) = traj.last.mass_stats();
    assert!(res.residual <= 5.0 * se, "{} vs {se}", res.residual);
    assert_eq!(res.pathwise_series.len(), traj.clouds.len());

    let mut sparse = cfg.clone();
    sparse.record_every = 5;
    let traj = simulate_separated(&model, &policy, &sparse, &InitialCondition::Deterministic).unwrap();
    assert!(matches!(ito_residual(&flat, &traj, &model), Err(HjbError::SparseTrajectory)));
}

#[test]
fn hamiltonian_examples() {
    let flat = CylindricalTestFn::new(OuterFn::Linear { constant: 0.0, coeffs: vec![0.0], time: 0.0 }, vec![Polynomial::mass(2, 2)], 2, 2).unwrap();
    let model = build_liquidation(&liq_params(3.0, 0.0), sym2()).unwrap();
    let cloud = ParticleCloud::uniform(4, &[0.5, 0.5], &[1.0, 10.0], &[0.0], 0.0);
    let grid: Vec<Vec<f64>> = (0..=10).map(|k| vec![0.5 * k as f64]).collect();
    // a(P - ηa) peaks at P/(2η) = 5/3; nearest grid point 1.5
    let best = hamiltonian(&flat, 0.0, &cloud, &model, &grid).unwrap();
    assert_eq!(best.best_control, vec![1.5]);
    assert_abs_diff_eq!(best.best_value, 1.5 * (10.0 - 3.0 * 1.5), epsilon = 1e-12);

    let model = build_liquidation(&liq_params(0.0, 0.0), sym2()).unwrap();
    assert_eq!(hamiltonian(&flat, 0.0, &cloud, &model, &grid).unwrap().best_control, vec![5.0]);
    assert_eq!(hamiltonian(&flat, 0.0, &cloud, &model, &[vec![0.7]]).unwrap().best_control, vec![0.7]);
    assert!(matches!(hamiltonian(&flat, 0.0, &cloud, &model, &[]), Err(HjbError::EmptyGrid)));

    // P = 0 makes every control tie; the first one wins
    let still = ParticleCloud::uniform(4, &[0.5, 0.5], &[1.0, 0.0], &[0.0], 0.0);
    assert_eq!(hamiltonian(&flat, 0.0, &still, &model, &grid).unwrap().best_index, 0);
}

#[test]
fn terminal_residual_examples() {
    let cloud = small_cloud(2, 1);
    let zero = two_state([1.0, -1.0], SigmaSpec::identity(1), RewardSpec::zero(), RewardSpec::zero());
    let flat = CylindricalTestFn::new(OuterFn::Linear { constant: 0.0, coeffs: vec![0.0], time: 0.0 }, vec![Polynomial::mass(2, 1)], 2, 1).unwrap();
    assert_eq!(terminal_residual(&flat, &cloud, &zero).unwrap(), 0.0);

    let one = two_state([1.0, -1.0], SigmaSpec::identity(1), RewardSpec::zero(), RewardSpec::constant(1.0, 2));
    assert!(terminal_residual(&CylindricalTestFn::mass(2, 1), &cloud, &one).unwrap() <= 1e-15);
    assert!(terminal_residual(&matched_terminal_fn(&one).unwrap(), &cloud, &one).unwrap() <= 1e-15);

    let model = build_liquidation(&liq_params(0.1, 0.7), sym2()).unwrap();
    let policy = Policy::new(PolicyForm::AffineClamped, vec![0.5, 0.0, 0.0, 0.3, 0.0, 0.0], model.controls.clone(), 2, 2).unwrap();
    let cfg = SimConfig::new(0.0, 0.3, 0.01, 500, 8);
    let traj = simulate_separated(&model, &policy, &cfg, &InitialCondition::Deterministic).unwrap();
    let w = matched_terminal_fn(&model).unwrap();
    assert!(terminal_residual(&w, &traj.last, &model).unwrap() <= 1e-12);
}
