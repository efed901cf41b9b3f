//! Feedback policies and derivative-free maximization of the Monte Carlo
//! reward under common random numbers.

mod liquidation;
mod policy;

pub use liquidation::{optimize_liquidation, terminal_inventory, twap_policy, LiquidationFamily, LiquidationReport, OptMethod};
pub use policy::{Policy, PolicyError, PolicyForm};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_key, fill_normals, Domain};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptError {
    #[error("objective failed: {0}")]
    Objective(String),
    #[error("bad optimizer options: {0}")]
    BadOptions(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// One objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub theta: Vec<f64>,
    pub j_hat: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    BudgetExhausted,
    SimplexCollapsed,
    IterationsDone,
    /// Sampling spread fell below `1e-12`; the result is the best so far.
    DegenerateStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub theta_star: Vec<f64>,
    pub j_star: f64,
    pub j_star_stderr: f64,
    pub history: Vec<Evaluation>,
    pub evaluations: usize,
    pub termination: Termination,
    /// Cross-entropy only: mean objective of the elite set after each
    /// iteration.
    #[serde(default)]
    pub elite_means: Vec<f64>,
}

impl OptResult {
    fn from_history(history: Vec<Evaluation>, termination: Termination, elite_means: Vec<f64>) -> Self {
        let best = history
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.j_hat.total_cmp(&b.j_hat).then(j.cmp(i)))
            .map(|(_, e)| e.clone())
            .expect("at least one evaluation");
        Self {
            theta_star: best.theta,
            j_star: best.j_hat,
            j_star_stderr: best.stderr,
            evaluations: history.len(),
            history,
            termination,
            elite_means,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadOpts {
    pub max_evals: usize,
    pub init_step: f64,
    pub shrink_tol: f64,
}

impl Default for NelderMeadOpts {
    fn default() -> Self {
        Self { max_evals: 200, init_step: 0.5, shrink_tol: 1e-6 }
    }
}

struct Budget<'a, F> {
    objective: &'a F,
    max_evals: usize,
    history: Vec<Evaluation>,
}

impl<F> Budget<'_, F>
where
    F: Fn(&[f64]) -> Result<(f64, f64), OptError>,
{
    fn eval(&mut self, theta: Vec<f64>) -> Result<Option<f64>, OptError> {
        if self.history.len() >= self.max_evals {
            return Ok(None);
        }
        let (j_hat, stderr) = (self.objective)(&theta)?;
        self.history.push(Evaluation { theta, j_hat, stderr });
        Ok(Some(j_hat))
    }
}

/// Maximizes `objective` with the reflect/expand/contract/shrink simplex
/// method. The objective returns `(J_hat, stderr)`.
pub fn nelder_mead<F>(objective: F, theta0: &[f64], opts: &NelderMeadOpts) -> Result<OptResult, OptError>
where
    F: Fn(&[f64]) -> Result<(f64, f64), OptError>,
{
    if opts.max_evals == 0 || theta0.is_empty() {
        return Err(OptError::BadOptions("need max_evals >= 1 and a non-empty start point".into()));
    }
    const REFLECT: f64 = 1.0;
    const EXPAND: f64 = 2.0;
    const CONTRACT: f64 = 0.5;
    const SHRINK: f64 = 0.5;

    let n = theta0.len();
    let mut budget = Budget { objective: &objective, max_evals: opts.max_evals, history: Vec::new() };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let mut exhausted = false;
    for k in 0..=n {
        let mut p = theta0.to_vec();
        if k > 0 {
            p[k - 1] += opts.init_step;
        }
        match budget.eval(p.clone())? {
            Some(v) => simplex.push((p, v)),
            None => {
                exhausted = true;
                break;
            }
        }
    }
    let combine = |a: &[f64], b: &[f64], s: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + s * (x - y)).collect() };

    let termination = 'outer: loop {
        if exhausted {
            break Termination::BudgetExhausted;
        }
        simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
        let diameter = simplex[1..]
            .iter()
            .map(|(p, _)| p.iter().zip(&simplex[0].0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        if diameter < opts.shrink_tol {
            break Termination::SimplexCollapsed;
        }
        let mut centroid = vec![0.0; n];
        for (p, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let (worst, f_worst) = simplex[n].clone();
        let f_best = simplex[0].1;
        let f_second_worst = simplex[n - 1.min(n)].1;

        let xr = combine(&centroid, &worst, REFLECT);
        let Some(fr) = budget.eval(xr.clone())? else { break Termination::BudgetExhausted };
        if fr > f_best {
            let xe = combine(&centroid, &worst, REFLECT * EXPAND);
            let Some(fe) = budget.eval(xe.clone())? else {
                simplex[n] = (xr, fr);
                break Termination::BudgetExhausted;
            };
            simplex[n] = if fe > fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr > f_second_worst {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, accept_above) = if fr > f_worst {
            (combine(&centroid, &worst, REFLECT * CONTRACT), fr)
        } else {
            (combine(&centroid, &worst, -CONTRACT), f_worst)
        };
        let Some(fc) = budget.eval(xc.clone())? else { break Termination::BudgetExhausted };
        if fc > accept_above || (fr > f_worst && fc >= fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for entry in simplex.iter_mut().skip(1) {
            let p: Vec<f64> = best.iter().zip(&entry.0).map(|(b, x)| b + SHRINK * (x - b)).collect();
            match budget.eval(p.clone())? {
                Some(v) => *entry = (p, v),
                None => break 'outer Termination::BudgetExhausted,
            }
        }
    };
    Ok(OptResult::from_history(budget.history, termination, Vec::new()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEntropyOpts {
    pub pop: usize,
    pub elite_frac: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for CrossEntropyOpts {
    fn default() -> Self {
        Self { pop: 16, elite_frac: 0.25, iters: 10, seed: 0 }
    }
}

/// Gaussian cross-entropy search with elitism: elites of the previous
/// iteration compete with the new samples, and the prior mean is the first
/// candidate evaluated.
pub fn cross_entropy<F>(objective: F, mean0: &[f64], std0: &[f64], opts: &CrossEntropyOpts) -> Result<OptResult, OptError>
where
    F: Fn(&[f64]) -> Result<(f64, f64), OptError> + Sync,
{
    if opts.pop == 0 || opts.iters == 0 || !(opts.elite_frac > 0.0 && opts.elite_frac <= 1.0) || mean0.len() != std0.len() || mean0.is_empty() {
        return Err(OptError::BadOptions("need pop, iters >= 1, elite_frac in (0, 1], matching mean/std".into()));
    }
    let dim = mean0.len();
    let n_elite = ((opts.elite_frac * opts.pop as f64).ceil() as usize).clamp(1, opts.pop);
    let mut mean = mean0.to_vec();
    let mut std = std0.to_vec();
    let mut history: Vec<Evaluation> = Vec::new();
    let mut elites: Vec<Evaluation> = Vec::new();
    let mut elite_means = Vec::new();
    let mut termination = Termination::IterationsDone;
    let mut rng = ChaCha8Rng::from_seed(derive_key(opts.seed, Domain::Optimizer));

    for it in 0..opts.iters {
        let mut candidates = Vec::with_capacity(opts.pop);
        let mut z = vec![0.0; dim];
        for k in 0..opts.pop {
            fill_normals(&mut rng, &mut z);
            if it == 0 && k == 0 {
                candidates.push(mean.clone());
            } else {
                candidates.push(mean.iter().zip(&std).zip(&z).map(|((m, s), e)| m + s * e).collect());
            }
        }
        let evals: Vec<Result<Evaluation, OptError>> = candidates
            .into_par_iter()
            .map(|theta| objective(&theta).map(|(j_hat, stderr)| Evaluation { theta, j_hat, stderr }))
            .collect();
        let mut fresh = Vec::with_capacity(opts.pop);
        for e in evals {
            fresh.push(e?);
        }
        history.extend(fresh.iter().cloned());
        let mut pool = elites;
        pool.extend(fresh);
        pool.sort_by(|a, b| b.j_hat.total_cmp(&a.j_hat));
        pool.truncate(n_elite);
        elites = pool;
        elite_means.push(elites.iter().map(|e| e.j_hat).sum::<f64>() / elites.len() as f64);
        for c in 0..dim {
            let m = elites.iter().map(|e| e.theta[c]).sum::<f64>() / elites.len() as f64;
            let v = elites.iter().map(|e| (e.theta[c] - m).powi(2)).sum::<f64>() / elites.len() as f64;
            mean[c] = m;
            std[c] = v.sqrt();
        }
        if it + 1 < opts.iters && std.iter().all(|s| *s < 1e-12) {
            termination = Termination::DegenerateStd;
            break;
        }
    }
    Ok(OptResult::from_history(history, termination, elite_means))
}
