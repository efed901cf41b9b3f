use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ControlSpace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("policy expects {expected} parameters, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("policy parameters must be finite")]
    NonFinite,
    #[error("piecewise policy needs at least one bucket and t_end > t_start")]
    BadBuckets,
}

/// Shape of a feedback law `a = φ_θ(t, x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum PolicyForm {
    /// `a = clamp(θ)`.
    Constant,
    /// Per control component `c`:
    /// `a_c = clamp(θ0 + θ_x·x/⟨x,1⟩ + θ_y·y + θ_t t)`, parameters laid out as
    /// `[θ0, θ_x (N), θ_y (d), θ_t]` for each component in turn.
    AffineClamped,
    /// `a = clamp(θ_k)` on the `k`-th of `buckets` equal slices of
    /// `[t_start, t_end]`; parameters are `buckets x D`, bucket-major.
    PiecewiseTime { t_start: f64, t_end: f64, buckets: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    form: PolicyForm,
    params: Vec<f64>,
    clamp: ControlSpace,
    n_states: usize,
    dim_y: usize,
}

impl Policy {
    pub fn new(form: PolicyForm, params: Vec<f64>, clamp: ControlSpace, n_states: usize, dim_y: usize) -> Result<Self, PolicyError> {
        let expected = Self::param_len(&form, clamp.dim(), n_states, dim_y);
        if let PolicyForm::PiecewiseTime { t_start, t_end, buckets } = form {
            if buckets == 0 || !(t_end > t_start) {
                return Err(PolicyError::BadBuckets);
            }
        }
        if params.len() != expected {
            return Err(PolicyError::WrongLength { expected, got: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(PolicyError::NonFinite);
        }
        Ok(Self { form, params, clamp, n_states, dim_y })
    }

    pub fn constant(value: Vec<f64>, clamp: ControlSpace, n_states: usize, dim_y: usize) -> Result<Self, PolicyError> {
        Self::new(PolicyForm::Constant, value, clamp, n_states, dim_y)
    }

    pub fn param_len(form: &PolicyForm, dim_a: usize, n_states: usize, dim_y: usize) -> usize {
        match form {
            PolicyForm::Constant => dim_a,
            PolicyForm::AffineClamped => dim_a * (2 + n_states + dim_y),
            PolicyForm::PiecewiseTime { buckets, .. } => buckets * dim_a,
        }
    }

    pub fn form(&self) -> &PolicyForm {
        &self.form
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn controls(&self) -> &ControlSpace {
        &self.clamp
    }

    /// Same form and box, new parameters.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self, PolicyError> {
        Self::new(self.form.clone(), params, self.clamp.clone(), self.n_states, self.dim_y)
    }

    /// Writes the clamped control into `out` (length `D`).
    pub fn eval_into(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        let dim_a = self.clamp.dim();
        match &self.form {
            PolicyForm::Constant => out.copy_from_slice(&self.params),
            PolicyForm::AffineClamped => {
                let mass: f64 = x.iter().sum();
                let stride = 2 + self.n_states + self.dim_y;
                for (c, o) in out.iter_mut().enumerate() {
                    let th = &self.params[c * stride..(c + 1) * stride];
                    let mut v = th[0];
                    if mass > 0.0 {
                        v += th[1..1 + self.n_states].iter().zip(x).map(|(w, xi)| w * xi / mass).sum::<f64>();
                    }
                    v += th[1 + self.n_states..1 + self.n_states + self.dim_y].iter().zip(y).map(|(w, yi)| w * yi).sum::<f64>();
                    v += th[stride - 1] * t;
                    *o = v;
                }
            }
            PolicyForm::PiecewiseTime { t_start, t_end, buckets } => {
                let frac = (t - t_start) / (t_end - t_start);
                let k = ((frac * *buckets as f64).floor().max(0.0) as usize).min(buckets - 1);
                out.copy_from_slice(&self.params[k * dim_a..(k + 1) * dim_a]);
            }
        }
        self.clamp.clamp_in_place(out);
    }

    pub fn eval(&self, t: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.clamp.dim()];
        self.eval_into(t, x, y, &mut out);
        out
    }
}
