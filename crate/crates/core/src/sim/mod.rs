//! Time stepping for the separated system.
//!
//! Each particle carries an unnormalized filter `x`, an observation `y` and a
//! control `a`. One step:
//!
//! 1. controls from the policy at the left endpoint;
//! 2. `Γ` of the cloud, reduced to the statistics that `h` and `f` read;
//! 3. per particle, a geometric filter update
//!    `x̃^i = x^i exp(h^i·dW - ½|h^i|² dt)` followed by the chain semigroup
//!    `x' = exp(Λ^T dt) x̃`, and `y' = y + σ(y) dW` with the same `dW`.
//!
//! The chain factor has nonnegative entries and the geometric factor is
//! positive, so filters never leave `R^N_+`.

mod original;
mod picard;
mod snapshot;

pub use original::{girsanov_weight, markov_chain_path, simulate_original, OriginalRun, RegimePath};
pub use picard::{picard_solve, PicardReport};
pub use snapshot::{read_snapshot, write_snapshot, write_trajectory_csv, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measures::{eval_stats, gamma1_measure, gamma_measure, mean_and_se, pairwise_sum, MeasureError, ParticleCloud};
use crate::model::{ModelSpec, RegimeModel, SigmaSpec};
use crate::optimize::Policy;
use crate::rng::{stream_rng, fill_normals, Domain, NoiseSource};

/// Largest exponent accepted by the geometric filter step.
pub const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("Overflow: exponent {0} exceeds {MAX_EXPONENT}")]
    Overflow(f64),
    #[error("invalid simulation config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("MeanFieldUnsupported: the original-problem oracle needs h, f, g free of the law")]
    MeanFieldUnsupported,
    #[error("split time {0} is not on the time grid")]
    OffGrid(f64),
    #[error("frozen flow has {got} steps, run needs {needed}")]
    FlowLength { got: usize, needed: usize },
    #[error("snapshot: {0}")]
    Snapshot(String),
}

/// Grid, particle count and noise seed of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub t0: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub dt: f64,
    pub n_particles: usize,
    pub seed: u64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Width of the finest noise cell. Steps of `dt` sum `dt / noise_dt` fine
    /// increments, so runs at different `dt` share one Brownian path.
    #[serde(default)]
    pub noise_dt: Option<f64>,
}

fn default_record_every() -> usize {
    1
}

impl SimConfig {
    pub fn new(t0: f64, horizon: f64, dt: f64, n_particles: usize, seed: u64) -> Self {
        Self { t0, horizon, dt, n_particles, seed, record_every: 1, noise_dt: None }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::BadConfig(m));
        if !(self.t0 >= 0.0) || !(self.horizon >= self.t0) {
            return bad(format!("need 0 <= t0 <= T, got t0 = {}, T = {}", self.t0, self.horizon));
        }
        if !(self.dt > 0.0) || self.dt > 0.1 {
            return bad(format!("dt = {} must lie in (0, 0.1]", self.dt));
        }
        let ratio = (self.horizon - self.t0) / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return bad(format!("(T - t0) / dt = {ratio} is not an integer"));
        }
        if self.n_particles == 0 {
            return bad("need at least one particle".into());
        }
        if self.record_every == 0 {
            return bad("record_every must be positive".into());
        }
        if let Some(fine) = self.noise_dt {
            let r = self.dt / fine;
            if !(fine > 0.0) || r < 1.0 - 1e-9 || (r - r.round()).abs() > 1e-9 * r {
                return bad(format!("dt / noise_dt = {r} is not a positive integer"));
            }
        }
        Ok(())
    }

    pub fn n_steps(&self) -> u64 {
        ((self.horizon - self.t0) / self.dt).round() as u64
    }

    pub fn time_of(&self, step: u64) -> f64 {
        self.t0 + step as f64 * self.dt
    }

    pub fn noise_ratio(&self) -> u64 {
        self.noise_dt.map_or(1, |fine| (self.dt / fine).round() as u64)
    }

    pub fn fine_dt(&self) -> f64 {
        self.dt / self.noise_ratio() as f64
    }

    /// Grid index of time `s`, if `s` lies on the grid.
    pub fn step_of(&self, s: f64) -> Result<u64, SimError> {
        let k = (s - self.t0) / self.dt;
        if k < -1e-9 || k > self.n_steps() as f64 + 1e-9 || (k - k.round()).abs() > 1e-9 * k.abs().max(1.0) {
            return Err(SimError::OffGrid(s));
        }
        Ok(k.round() as u64)
    }
}

/// Initial filter/observation states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    /// Every particle at `(π₀, y₀)`.
    Deterministic,
    /// `y = y₀ + y_std ⊙ Z` and `x = π₀ · exp(mass_std Z' - mass_std²/2)`,
    /// drawn from a dedicated noise domain.
    Random { y_std: Vec<f64>, #[serde(default)] mass_std: f64 },
}

/// Statistics of `Γ` read by `h` and `f` at one step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub h: Vec<f64>,
    pub f: Vec<f64>,
}

/// Where the law-dependent inputs of a step come from.
#[derive(Debug, Clone, Copy)]
pub enum FlowSource<'a> {
    /// Recomputed from the current cloud (the interacting system).
    Live,
    /// Read from a previously recorded flow, indexed by global step.
    Frozen(&'a [StepStats]),
}

/// `y + σ(y) dW`.
pub fn y_step(y: &[f64], dw: &[f64], sigma: &SigmaSpec) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    y_step_into(y, dw, sigma, &mut out);
    out
}

fn y_step_into(y: &[f64], dw: &[f64], sigma: &SigmaSpec, out: &mut [f64]) {
    sigma.apply(y, dw, out);
    for (o, v) in out.iter_mut().zip(y) {
        *o += v;
    }
}

/// `exp(Λ^T dt)`, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionOperator {
    n: usize,
    entries: Vec<f64>,
}

impl TransitionOperator {
    pub fn new(regime: &RegimeModel, dt: f64) -> Self {
        let m = regime.transition_operator(dt);
        Self { n: m.len(), entries: m.into_iter().flatten().collect() }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            out[i] = self.entries[i * self.n..(i + 1) * self.n].iter().zip(x).map(|(e, v)| e * v).sum();
        }
    }

    pub fn min_entry(&self) -> f64 {
        self.entries.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// One filter step with a precomputed chain factor. `hvals` is `N x d`,
/// row `i` holding `h(·, i)`.
pub fn zakai_step_with(x: &mut [f64], hvals: &[f64], dw: &[f64], dt: f64, chain: &TransitionOperator) -> Result<(), SimError> {
    let d = dw.len();
    let n = x.len();
    let mut tilde = [0.0f64; 16];
    let mut heap;
    let tilde: &mut [f64] = if n <= 16 {
        &mut tilde[..n]
    } else {
        heap = vec![0.0; n];
        &mut heap
    };
    for i in 0..n {
        let h = &hvals[i * d..(i + 1) * d];
        let mut e = 0.0;
        let mut sq = 0.0;
        for k in 0..d {
            e += h[k] * dw[k];
            sq += h[k] * h[k];
        }
        let expo = e - 0.5 * sq * dt;
        if expo > MAX_EXPONENT {
            return Err(SimError::Overflow(expo));
        }
        tilde[i] = x[i] * expo.exp();
    }
    chain.apply(tilde, x);
    Ok(())
}

/// One filter step computing the chain factor on the fly.
pub fn zakai_step(x: &[f64], hvals: &[f64], dw: &[f64], dt: f64, regime: &RegimeModel) -> Result<Vec<f64>, SimError> {
    let chain = TransitionOperator::new(regime, dt);
    let mut out = x.to_vec();
    zakai_step_with(&mut out, hvals, dw, dt, &chain)?;
    Ok(out)
}

/// Recorded run of the separated system.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub clouds: Vec<ParticleCloud>,
    /// `r_k = (1/M) Σ_i ⟨x_i, f(y_i, ν̂_k, a_i)⟩` at every step.
    pub reward_rates: Vec<f64>,
    /// `Σ_k r_k dt`.
    pub running_reward: f64,
    /// Per-particle `Σ_k ⟨x_i, f_i⟩ dt`.
    pub particle_running: Vec<f64>,
    /// Step index (the noise counter) at each record point.
    pub rng_checkpoint: Vec<u64>,
    /// Statistics of `Γ` of the evolving cloud, one entry per step taken.
    pub flow: Vec<StepStats>,
    /// Negative filter components seen at any step.
    pub negative_count: usize,
    /// Cloud at the end of the run.
    pub last: ParticleCloud,
}

/// Reward estimate with a per-particle standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardEstimate {
    pub j_hat: f64,
    pub stderr: f64,
}

/// Stateless stepping context shared by all runs of one model and policy.
pub struct Stepper<'a> {
    pub model: &'a ModelSpec,
    pub policy: &'a Policy,
    pub cfg: &'a SimConfig,
    chain: TransitionOperator,
    noise: NoiseSource,
    ratio: u64,
    fine_dt: f64,
    needs_law: bool,
}

struct StepResult {
    f_contrib: Vec<f64>,
    live: StepStats,
}

impl<'a> Stepper<'a> {
    pub fn new(model: &'a ModelSpec, policy: &'a Policy, cfg: &'a SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let needs_law = !model.h.stats.is_empty() || !model.f.stats.is_empty();
        Ok(Self {
            model,
            policy,
            cfg,
            chain: TransitionOperator::new(&model.regime, cfg.dt),
            noise: NoiseSource::new(cfg.seed, Domain::Separated, model.dim_d),
            ratio: cfg.noise_ratio(),
            fine_dt: cfg.fine_dt(),
            needs_law,
        })
    }

    pub fn chain(&self) -> &TransitionOperator {
        &self.chain
    }

    /// Particles at `(π₀, y₀)` or drawn from `init`, with controls set.
    pub fn initial_cloud(&self, init: &InitialCondition) -> ParticleCloud {
        let m = self.model;
        let a0 = vec![0.0; m.control_dim()];
        let mut cloud = ParticleCloud::uniform(self.cfg.n_particles, m.regime.initial(), &m.y0, &a0, self.cfg.t0);
        if let InitialCondition::Random { y_std, mass_std } = init {
            let d = m.dim_d;
            let n = m.n_states();
            let src = NoiseSource::new(self.cfg.seed, Domain::Initial, d + 1);
            cloud
                .x
                .par_chunks_mut(n)
                .zip(cloud.y.par_chunks_mut(d))
                .enumerate()
                .for_each(|(i, (x, y))| {
                    let mut z = vec![0.0; d + 1];
                    src.normals(i as u64, 0, &mut z);
                    for k in 0..d {
                        y[k] += y_std.get(k).copied().unwrap_or(0.0) * z[k];
                    }
                    let factor = (mass_std * z[d] - 0.5 * mass_std * mass_std).exp();
                    x.iter_mut().for_each(|v| *v *= factor);
                });
        }
        self.set_controls(&mut cloud);
        cloud
    }

    fn set_controls(&self, cloud: &mut ParticleCloud) {
        let (n, d, big_d) = (cloud.n_states, cloud.dim_y, cloud.dim_a);
        let t = cloud.t;
        let policy = self.policy;
        cloud
            .a
            .par_chunks_mut(big_d)
            .zip(cloud.x.par_chunks(n).zip(cloud.y.par_chunks(d)))
            .for_each(|(a, (x, y))| policy.eval_into(t, x, y, a));
    }

    /// Statistics of `Γ(cloud)` read by `h` and `f`.
    pub fn live_stats(&self, cloud: &ParticleCloud) -> Result<StepStats, SimError> {
        if !self.needs_law {
            return Ok(StepStats::default());
        }
        let nu = gamma_measure(cloud)?;
        let a0 = &self.model.controls.reference;
        Ok(StepStats { h: eval_stats(&nu, &self.model.h.stats, a0)?, f: eval_stats(&nu, &self.model.f.stats, a0)? })
    }

    fn step(&self, cloud: &mut ParticleCloud, flow: FlowSource<'_>) -> Result<StepResult, SimError> {
        self.set_controls(cloud);
        let live = self.live_stats(cloud)?;
        let used = match flow {
            FlowSource::Live => &live,
            FlowSource::Frozen(stats) => stats.get(cloud.step as usize).ok_or(SimError::FlowLength {
                got: stats.len(),
                needed: cloud.step as usize + 1,
            })?,
        };
        let m = self.model;
        let (n, d, big_d) = (cloud.n_states, cloud.dim_y, cloud.dim_a);
        let dt = self.cfg.dt;
        let first = cloud.step * self.ratio;
        let mut f_contrib = vec![0.0; cloud.len()];
        cloud
            .x
            .par_chunks_mut(n)
            .zip(cloud.y.par_chunks_mut(d))
            .zip(cloud.a.par_chunks(big_d))
            .zip(f_contrib.par_iter_mut())
            .enumerate()
            .try_for_each(|(i, (((x, y), a), fc))| -> Result<(), SimError> {
                let mut hvals = vec![0.0; n * d];
                m.h.eval_all_regimes(y, a, &used.h, &mut hvals);
                let mut u = Vec::with_capacity(d + big_d);
                u.extend_from_slice(y);
                u.extend_from_slice(a);
                *fc = m.f.pair_with(x, &u, &used.f);
                let mut dw = vec![0.0; d];
                let mut scratch = vec![0.0; d];
                self.noise.increment(i as u64, first, self.ratio, self.fine_dt, &mut dw, &mut scratch);
                zakai_step_with(x, &hvals, &dw, dt, &self.chain)?;
                let y_old = u[..d].to_vec();
                y_step_into(&y_old, &dw, &m.sigma, y);
                Ok(())
            })?;
        cloud.step += 1;
        cloud.t = self.cfg.time_of(cloud.step);
        self.set_controls(cloud);
        Ok(StepResult { f_contrib, live })
    }

    /// Advances `cloud` to global step `end_step`, recording every
    /// `record_every` steps and at the end.
    pub fn run(&self, mut cloud: ParticleCloud, end_step: u64, flow: FlowSource<'_>) -> Result<Trajectory, SimError> {
        let every = self.cfg.record_every as u64;
        let dt = self.cfg.dt;
        let mut traj = Trajectory {
            times: vec![cloud.t],
            clouds: vec![cloud.clone()],
            reward_rates: Vec::new(),
            running_reward: 0.0,
            particle_running: vec![0.0; cloud.len()],
            rng_checkpoint: vec![cloud.step],
            flow: Vec::new(),
            negative_count: cloud.negative_count(),
            last: cloud.clone(),
        };
        while cloud.step < end_step {
            let res = self.step(&mut cloud, flow)?;
            let rate = pairwise_sum(&res.f_contrib) / cloud.len() as f64;
            traj.reward_rates.push(rate);
            traj.running_reward += rate * dt;
            traj.particle_running.par_iter_mut().zip(&res.f_contrib).for_each(|(acc, c)| *acc += c * dt);
            traj.flow.push(res.live);
            traj.negative_count += cloud.negative_count();
            if cloud.step.is_multiple_of(every) || cloud.step == end_step {
                traj.times.push(cloud.t);
                traj.clouds.push(cloud.clone());
                traj.rng_checkpoint.push(cloud.step);
            }
        }
        traj.last = cloud;
        Ok(traj)
    }

    /// Advances `cloud` to `end_step` without recording, handing the start
    /// cloud and every later one to `observe`. Returns the final cloud and the
    /// number of negative filter components seen.
    pub fn run_observed<E, F>(&self, mut cloud: ParticleCloud, end_step: u64, flow: FlowSource<'_>, mut observe: F) -> Result<(ParticleCloud, usize), E>
    where
        E: From<SimError>,
        F: FnMut(&ParticleCloud) -> Result<(), E>,
    {
        let mut negatives = cloud.negative_count();
        observe(&cloud)?;
        while cloud.step < end_step {
            self.step(&mut cloud, flow)?;
            negatives += cloud.negative_count();
            observe(&cloud)?;
        }
        Ok((cloud, negatives))
    }

    /// Per-particle `⟨x_i, g(y_i, Γ₁(μ̂))⟩`.
    pub fn terminal_contributions(&self, cloud: &ParticleCloud) -> Result<Vec<f64>, SimError> {
        let g = &self.model.g;
        let z = if g.stats.is_empty() {
            Vec::new()
        } else {
            eval_stats(&gamma1_measure(cloud)?, &g.stats, &self.model.controls.reference)?
        };
        let (n, d) = (cloud.n_states, cloud.dim_y);
        Ok(cloud.x.par_chunks(n).zip(cloud.y.par_chunks(d)).map(|(x, y)| g.pair_with(x, y, &z)).collect())
    }
}

/// Runs the separated system over the whole grid.
pub fn simulate_separated(model: &ModelSpec, policy: &Policy, cfg: &SimConfig, init: &InitialCondition) -> Result<Trajectory, SimError> {
    let stepper = Stepper::new(model, policy, cfg)?;
    let cloud = stepper.initial_cloud(init);
    stepper.run(cloud, cfg.n_steps(), FlowSource::Live)
}

/// Advances an arbitrary starting cloud (e.g. a restored snapshot) to `T`.
pub fn simulate_from(model: &ModelSpec, policy: &Policy, cfg: &SimConfig, cloud: ParticleCloud) -> Result<Trajectory, SimError> {
    let stepper = Stepper::new(model, policy, cfg)?;
    stepper.run(cloud, cfg.n_steps(), FlowSource::Live)
}

/// `J` from a finished trajectory: running integral plus terminal term.
pub fn reward_from_trajectory(model: &ModelSpec, policy: &Policy, cfg: &SimConfig, traj: &Trajectory) -> Result<RewardEstimate, SimError> {
    let stepper = Stepper::new(model, policy, cfg)?;
    let terminal = stepper.terminal_contributions(&traj.last)?;
    let terminal_mean = pairwise_sum(&terminal) / terminal.len() as f64;
    let per_particle: Vec<f64> = traj.particle_running.iter().zip(&terminal).map(|(r, g)| r + g).collect();
    let (_, stderr) = mean_and_se(&per_particle);
    Ok(RewardEstimate { j_hat: traj.running_reward + terminal_mean, stderr })
}

/// Monte Carlo estimate of the reward of `policy`. The standard error treats
/// particles as independent replicas.
pub fn estimate_reward(model: &ModelSpec, policy: &Policy, cfg: &SimConfig) -> Result<RewardEstimate, SimError> {
    let mut quiet = cfg.clone();
    quiet.record_every = usize::MAX;
    let traj = simulate_separated(model, policy, &quiet, &InitialCondition::Deterministic)?;
    reward_from_trajectory(model, policy, &quiet, &traj)
}

fn max_cloud_diff(a: &ParticleCloud, b: &ParticleCloud) -> f64 {
    let diff = |u: &[f64], v: &[f64]| {
        if u.len() != v.len() {
            return f64::INFINITY;
        }
        u.iter().zip(v).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
    };
    let mut m = diff(&a.x, &b.x).max(diff(&a.y, &b.y)).max(diff(&a.a, &b.a));
    if a.t != b.t {
        m = m.max((a.t - b.t).abs()).max(f64::MIN_POSITIVE);
    }
    m
}

/// Runs `[t0, T]` straight and again as `[t0, s]` then `[s, T]` restarted
/// from a binary snapshot; returns the largest componentwise difference over
/// all particles at the shared record points.
pub fn flow_restart_check(model: &ModelSpec, policy: &Policy, cfg: &SimConfig, split: f64) -> Result<f64, SimError> {
    let split_step = cfg.step_of(split)?;
    let stepper = Stepper::new(model, policy, cfg)?;
    let start = stepper.initial_cloud(&InitialCondition::Deterministic);
    let straight = stepper.run(start.clone(), cfg.n_steps(), FlowSource::Live)?;

    let first_leg = stepper.run(start, split_step, FlowSource::Live)?;
    let mut buf = Vec::new();
    write_snapshot(&first_leg.last, &mut buf).map_err(|e| SimError::Snapshot(e.to_string()))?;
    let restored = read_snapshot(&mut buf.as_slice())?;
    let second_leg = stepper.run(restored, cfg.n_steps(), FlowSource::Live)?;

    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for leg in [&first_leg, &second_leg] {
        for (k, cloud) in leg.rng_checkpoint.iter().zip(&leg.clouds) {
            if let Some(pos) = straight.rng_checkpoint.iter().position(|s| s == k) {
                worst = worst.max(max_cloud_diff(cloud, &straight.clouds[pos]));
                compared += 1;
            }
        }
    }
    worst = worst.max(max_cloud_diff(&second_leg.last, &straight.last));
    if compared == 0 {
        return Err(SimError::BadConfig("no shared record points".into()));
    }
    Ok(worst)
}

/// Standard normal draws for `count` values from a stream, used by tests
/// and oracles that need noise outside the particle grid.
pub fn stream_normals(seed: u64, domain: Domain, stream: u64, count: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, domain, stream);
    let mut out = vec![0.0; count];
    fill_normals(&mut rng, &mut out);
    out
}

#[cfg(test)]
mod tests;
