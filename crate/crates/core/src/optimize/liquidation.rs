use serde::{Deserialize, Serialize};

use super::{cross_entropy, nelder_mead, CrossEntropyOpts, NelderMeadOpts, OptError, OptResult, Policy, PolicyForm};
use crate::measures::{mean_and_se, ParticleCloud};
use crate::model::{ControlSpace, LiquidationParams, ModelSpec};
use crate::sim::{estimate_reward, simulate_separated, InitialCondition, SimConfig};

/// Constant policy `a = clamp(I₀ / T)` where `T` is the length of the
/// trading window.
pub fn twap_policy(params: &LiquidationParams, horizon: f64) -> Result<Policy, OptError> {
    if !(horizon > 0.0) {
        return Err(OptError::BadOptions("TWAP needs a positive horizon".into()));
    }
    let clamp = ControlSpace::new(vec![0.0], vec![params.alpha_max], vec![0.0]).map_err(|e| OptError::BadOptions(e.to_string()))?;
    Ok(Policy::constant(vec![params.i0 / horizon], clamp, params.regime_drifts.len(), 2)?)
}

/// Search class for the liquidation problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LiquidationFamily {
    /// One parameter, the trading rate.
    ConstantRate,
    /// Piecewise-constant rates `(I₀/T)·K·softmax(θ)_k` on `K` equal slices,
    /// so the unclamped schedule always sells exactly `I₀`. `θ = 0` is TWAP.
    Schedule { buckets: usize },
}

impl LiquidationFamily {
    pub fn dim(&self) -> usize {
        match self {
            Self::ConstantRate => 1,
            Self::Schedule { buckets } => *buckets,
        }
    }

    pub fn twap_theta(&self, params: &LiquidationParams, horizon: f64) -> Vec<f64> {
        match self {
            Self::ConstantRate => vec![params.i0 / horizon],
            Self::Schedule { buckets } => vec![0.0; *buckets],
        }
    }

    pub fn policy(&self, theta: &[f64], params: &LiquidationParams, model: &ModelSpec, cfg: &SimConfig) -> Result<Policy, OptError> {
        let (n, d) = (model.n_states(), model.dim_d);
        let clamp = model.controls.clone();
        match self {
            Self::ConstantRate => Ok(Policy::constant(theta.to_vec(), clamp, n, d)?),
            Self::Schedule { buckets } => {
                let len = cfg.horizon - cfg.t0;
                let top = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = theta.iter().map(|t| (t - top).exp()).collect();
                let total: f64 = w.iter().sum();
                let k = *buckets as f64;
                let rates = w.iter().map(|v| params.i0 / len * (v * k / total)).collect();
                let form = PolicyForm::PiecewiseTime { t_start: cfg.t0, t_end: cfg.horizon, buckets: *buckets };
                Ok(Policy::new(form, rates, clamp, n, d)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum OptMethod {
    NelderMead(NelderMeadOpts),
    CrossEntropy {
        #[serde(flatten)]
        opts: CrossEntropyOpts,
        init_std: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiquidationReport {
    pub j_twap: f64,
    pub se_twap: f64,
    pub j_opt: f64,
    pub se_opt: f64,
    pub improvement: f64,
    /// `sqrt(se_twap² + se_opt²)`.
    pub combined_se: f64,
    pub theta_star: Vec<f64>,
    /// Control values of the optimized policy (the rate, or one rate per
    /// bucket).
    pub policy_params: Vec<f64>,
    /// Mass-weighted mean terminal inventory and its standard error.
    pub inventory_twap: (f64, f64),
    pub inventory_opt: (f64, f64),
    pub result: OptResult,
}

/// `(1/M) Σ ⟨x_i, 1⟩ I_i`: the estimate of `E[I_T]` under the physical
/// measure, with a per-particle standard error.
pub fn terminal_inventory(cloud: &ParticleCloud) -> (f64, f64) {
    let vals: Vec<f64> = (0..cloud.len()).map(|i| cloud.mass_of(i) * cloud.y_of(i)[0]).collect();
    mean_and_se(&vals)
}

fn inventory(model: &ModelSpec, policy: &Policy, cfg: &SimConfig) -> Result<(f64, f64), OptError> {
    let mut quiet = cfg.clone();
    quiet.record_every = usize::MAX;
    let traj = simulate_separated(model, policy, &quiet, &InitialCondition::Deterministic).map_err(|e| OptError::Objective(e.to_string()))?;
    Ok(terminal_inventory(&traj.last))
}

/// Maximizes the reward over `family` with common random numbers (every
/// evaluation reuses `cfg.seed`), starting from TWAP.
pub fn optimize_liquidation(
    params: &LiquidationParams,
    model: &ModelSpec,
    cfg: &SimConfig,
    family: &LiquidationFamily,
    method: &OptMethod,
) -> Result<LiquidationReport, OptError> {
    let len = cfg.horizon - cfg.t0;
    let twap = twap_policy(params, len)?;
    let base = estimate_reward(model, &twap, cfg).map_err(|e| OptError::Objective(e.to_string()))?;

    let objective = |theta: &[f64]| -> Result<(f64, f64), OptError> {
        let policy = family.policy(theta, params, model, cfg)?;
        let r = estimate_reward(model, &policy, cfg).map_err(|e| OptError::Objective(e.to_string()))?;
        Ok((r.j_hat, r.stderr))
    };
    let theta0 = family.twap_theta(params, len);
    let result = match method {
        OptMethod::NelderMead(opts) => nelder_mead(objective, &theta0, opts)?,
        OptMethod::CrossEntropy { opts, init_std } => cross_entropy(objective, &theta0, &vec![*init_std; theta0.len()], opts)?,
    };
    let best = family.policy(&result.theta_star, params, model, cfg)?;
    let combined_se = (base.stderr.powi(2) + result.j_star_stderr.powi(2)).sqrt();
    Ok(LiquidationReport {
        j_twap: base.j_hat,
        se_twap: base.stderr,
        j_opt: result.j_star,
        se_opt: result.j_star_stderr,
        improvement: result.j_star - base.j_hat,
        combined_se,
        theta_star: result.theta_star.clone(),
        policy_params: best.params().to_vec(),
        inventory_twap: inventory(model, &twap, cfg)?,
        inventory_opt: inventory(model, &best, cfg)?,
        result,
    })
}
