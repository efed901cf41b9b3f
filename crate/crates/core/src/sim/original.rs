//! The partially observed problem simulated directly under the physical
//! measure: an explicit regime path, observation drift `σ h`, and the
//! likelihood linking it to the reference measure.

use rand::Rng;
use rayon::prelude::*;

use super::{zakai_step_with, SimConfig, SimError, TransitionOperator, MAX_EXPONENT};
use crate::measures::mean_and_se;
use crate::model::{ModelSpec, RegimeModel};
use crate::optimize::Policy;
use crate::rng::{stream_rng, Domain, NoiseSource};

/// Piecewise-constant regime path on `[0, horizon]`: state `states[k]` from
/// `jump_times[k]` until the next jump.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePath {
    pub jump_times: Vec<f64>,
    pub states: Vec<usize>,
    pub horizon: f64,
}

impl RegimePath {
    pub fn state_at(&self, t: f64) -> usize {
        let idx = self.jump_times.partition_point(|&s| s <= t);
        self.states[idx.saturating_sub(1)]
    }

    pub fn n_jumps(&self) -> usize {
        self.states.len() - 1
    }
}

fn sample_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64], total: f64) -> usize {
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Exact simulation: exponential holding times with rate `-λ(i,i)`, jumps to
/// `j` with probability `λ(i,j) / -λ(i,i)`; states with zero exit rate are
/// absorbing. The initial state is drawn from `π₀`.
pub fn markov_chain_path<R: Rng + ?Sized>(regime: &RegimeModel, horizon: f64, rng: &mut R) -> RegimePath {
    let start = sample_index(rng, regime.initial(), 1.0);
    markov_chain_path_from(regime, start, horizon, rng)
}

pub fn markov_chain_path_from<R: Rng + ?Sized>(regime: &RegimeModel, start: usize, horizon: f64, rng: &mut R) -> RegimePath {
    let mut path = RegimePath { jump_times: vec![0.0], states: vec![start], horizon };
    let mut t = 0.0;
    let mut state = start;
    loop {
        let rate = regime.exit_rate(state);
        if rate <= 0.0 {
            break;
        }
        let u: f64 = 1.0 - rng.gen::<f64>();
        t += -u.ln() / rate;
        if t > horizon {
            break;
        }
        let row: Vec<f64> = regime.rates()[state].iter().enumerate().map(|(j, &v)| if j == state { 0.0 } else { v }).collect();
        state = sample_index(rng, &row, rate);
        path.jump_times.push(t);
        path.states.push(state);
    }
    path
}

/// `exp(Σ h_k·dW_k - ½ Σ |h_k|² dt)` for `h`, `dW` given step by step
/// (`d` entries per step).
pub fn girsanov_weight(hpath: &[f64], dwpath: &[f64], dt: f64) -> Result<f64, SimError> {
    assert_eq!(hpath.len(), dwpath.len(), "h and dW paths must align");
    let mut expo = 0.0;
    for (h, w) in hpath.iter().zip(dwpath) {
        expo += h * w - 0.5 * h * h * dt;
    }
    if expo > MAX_EXPONENT {
        return Err(SimError::Overflow(expo));
    }
    Ok(expo.exp())
}

/// Per-path output of [`simulate_original`].
#[derive(Debug, Clone, PartialEq)]
pub struct OriginalRun {
    /// `∫ f ds + g` per path.
    pub payoffs: Vec<f64>,
    /// `Y_T`, `d` values per path.
    pub terminal_y: Vec<f64>,
    pub terminal_regime: Vec<usize>,
    /// `log L_T` per path.
    pub log_likelihood: Vec<f64>,
    pub dim_y: usize,
}

impl OriginalRun {
    pub fn estimate(&self) -> (f64, f64) {
        mean_and_se(&self.payoffs)
    }
}

/// Payoff, terminal observation, terminal regime and log-likelihood of one path.
type PathOutcome = (f64, Vec<f64>, usize, f64);

/// Euler scheme for `dY = σ(Y) h(Y, a, M) ds + σ(Y) dB` under the physical
/// measure with an exactly simulated regime path. The policy sees the
/// unnormalized filter driven by the innovation `dW = h dt + dB`.
pub fn simulate_original(model: &ModelSpec, policy: &Policy, cfg: &SimConfig) -> Result<OriginalRun, SimError> {
    cfg.validate()?;
    if model.is_mean_field() || !model.h.stats.is_empty() || !model.f.stats.is_empty() || !model.g.stats.is_empty() {
        return Err(SimError::MeanFieldUnsupported);
    }
    let (n, d, big_d) = (model.n_states(), model.dim_d, model.control_dim());
    let chain = TransitionOperator::new(&model.regime, cfg.dt);
    let noise = NoiseSource::new(cfg.seed, Domain::OriginalNoise, d);
    let ratio = cfg.noise_ratio();
    let fine_dt = cfg.fine_dt();
    let steps = cfg.n_steps();
    let dt = cfg.dt;
    let horizon = cfg.horizon - cfg.t0;

    let per_path: Vec<Result<PathOutcome, SimError>> = (0..cfg.n_particles)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(cfg.seed, Domain::OriginalChain, j as u64);
            let path = markov_chain_path(&model.regime, horizon, &mut rng);
            let mut y = model.y0.clone();
            let mut x = model.regime.initial().to_vec();
            let mut a = vec![0.0; big_d];
            let mut hvals = vec![0.0; n * d];
            let mut db = vec![0.0; d];
            let mut dw = vec![0.0; d];
            let mut scratch = vec![0.0; d];
            let mut u = vec![0.0; d + big_d];
            let mut sdw = vec![0.0; d];
            let mut reward = 0.0;
            let mut log_l = 0.0;
            for k in 0..steps {
                let t = cfg.time_of(k);
                let regime = path.state_at(k as f64 * dt);
                policy.eval_into(t, &x, &y, &mut a);
                model.h.eval_all_regimes(&y, &a, &[], &mut hvals);
                u[..d].copy_from_slice(&y);
                u[d..].copy_from_slice(&a);
                reward += model.f.eval(&u, &[], regime) * dt;
                noise.increment(j as u64, k * ratio, ratio, fine_dt, &mut db, &mut scratch);
                let h = &hvals[regime * d..(regime + 1) * d];
                for c in 0..d {
                    dw[c] = h[c] * dt + db[c];
                    log_l += h[c] * dw[c] - 0.5 * h[c] * h[c] * dt;
                }
                zakai_step_with(&mut x, &hvals, &dw, dt, &chain)?;
                model.sigma.apply(&y, &dw, &mut sdw);
                for c in 0..d {
                    y[c] += sdw[c];
                }
            }
            let regime_t = path.state_at(horizon);
            reward += model.g.eval(&y, &[], regime_t);
            Ok((reward, y, regime_t, log_l))
        })
        .collect();

    let mut run = OriginalRun {
        payoffs: Vec::with_capacity(cfg.n_particles),
        terminal_y: Vec::with_capacity(cfg.n_particles * d),
        terminal_regime: Vec::with_capacity(cfg.n_particles),
        log_likelihood: Vec::with_capacity(cfg.n_particles),
        dim_y: d,
    };
    for r in per_path {
        let (payoff, y, regime, log_l) = r?;
        run.payoffs.push(payoff);
        run.terminal_y.extend(y);
        run.terminal_regime.push(regime);
        run.log_likelihood.push(log_l);
    }
    Ok(run)
}
