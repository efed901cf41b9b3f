//! Fixed-point iteration on the flow of `Γ`-statistics: each pass freezes the
//! flow produced by the previous one and re-simulates the filter with the
//! same noise.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FlowSource, InitialCondition, SimConfig, SimError, StepStats, Stepper};
use crate::measures::{pairwise_sum, ParticleCloud};
use crate::model::ModelSpec;
use crate::optimize::Policy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardReport {
    /// Flow of `Γ`-statistics per iterate, one entry per step.
    pub iterates: Vec<Vec<StepStats>>,
    /// `diffs[k-1]`: largest over the grid of the empirical `p`-norm of
    /// `X^(k+1) - X^(k)`.
    pub diffs: Vec<f64>,
    pub converged: bool,
}

fn pnorm_diff(a: &ParticleCloud, b: &ParticleCloud, p: f64) -> f64 {
    let n = a.n_states;
    let terms: Vec<f64> = a
        .x
        .par_chunks(n)
        .zip(b.x.par_chunks(n))
        .map(|(u, v)| u.iter().zip(v).map(|(s, t)| (s - t) * (s - t)).sum::<f64>().sqrt().powf(p))
        .collect();
    (pairwise_sum(&terms) / terms.len() as f64).powf(1.0 / p)
}

/// Runs two copies in lockstep, driven by `prev` and `next`; returns the
/// flow recorded from the `next` copy and the largest p-norm gap.
fn lockstep(
    stepper: &Stepper<'_>,
    start: &ParticleCloud,
    prev: &[StepStats],
    next: &[StepStats],
    p: f64,
) -> Result<(Vec<StepStats>, f64), SimError> {
    let steps = stepper.cfg.n_steps();
    let mut a = start.clone();
    let mut b = start.clone();
    let mut worst: f64 = 0.0;
    let mut flow = Vec::with_capacity(steps as usize);
    while b.step < steps {
        stepper.step(&mut a, FlowSource::Frozen(prev))?;
        let res = stepper.step(&mut b, FlowSource::Frozen(next))?;
        flow.push(res.live);
        worst = worst.max(pnorm_diff(&a, &b, p));
    }
    Ok((flow, worst))
}

/// Picard iteration for the law-dependent filter equation.
///
/// With `k_max = 0` this is one plain interacting run. Otherwise the first
/// iterate is driven by the statistics of the initial cloud held constant in
/// time, and each further iterate by the flow of the one before.
pub fn picard_solve(model: &ModelSpec, policy: &Policy, cfg: &SimConfig, k_max: usize, tol: f64) -> Result<PicardReport, SimError> {
    let mut quiet = cfg.clone();
    quiet.record_every = usize::MAX;
    let stepper = Stepper::new(model, policy, &quiet)?;
    let start = stepper.initial_cloud(&InitialCondition::Deterministic);
    let steps = quiet.n_steps();
    if k_max == 0 {
        let traj = stepper.run(start, steps, FlowSource::Live)?;
        return Ok(PicardReport { iterates: vec![traj.flow], diffs: Vec::new(), converged: true });
    }
    let constant = vec![stepper.live_stats(&start)?; steps as usize];
    let first = stepper.run(start.clone(), steps, FlowSource::Frozen(&constant))?;
    let mut iterates = vec![first.flow];
    let mut diffs = Vec::new();
    let mut driving_prev = constant;
    let p = model.growth.p;
    for _ in 0..k_max {
        let current = iterates.last().expect("at least one iterate").clone();
        let (next, diff) = lockstep(&stepper, &start, &driving_prev, &current, p)?;
        diffs.push(diff);
        iterates.push(next);
        driving_prev = current;
        if diff < tol {
            return Ok(PicardReport { iterates, diffs, converged: true });
        }
    }
    Ok(PicardReport { iterates, diffs, converged: false })
}
