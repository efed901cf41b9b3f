//! Cylindrical test functions of the law of `(X, Y)`, their linear functional
//! derivatives, the controlled generator, and residual checks for the Itô
//! formula and the HJB terminal condition.

mod poly;

pub use poly::{Monomial, Polynomial};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measures::{eval_stats, gamma1_measure, gamma_measure, pairwise_sum, MeasureError, ParticleCloud};
use crate::model::ModelSpec;
use crate::sim::{SimError, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HjbError {
    #[error("EmptyGrid: no candidate controls")]
    EmptyGrid,
    #[error("derivative self-test failed for {what}: closed form {exact}, finite difference {approx}")]
    DerivativeMismatch { what: String, exact: f64, approx: f64 },
    #[error("test function inputs do not match the model: {0}")]
    DimensionMismatch(String),
    #[error("trajectory must be recorded at every step")]
    SparseTrajectory,
    #[error("terminal reward reads the law; no matching polynomial test function")]
    LawDependentTerminal,
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Outer function `F(t, z)` of a cylindrical functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum OuterFn {
    /// `c + Σ b_j z_j + c_t t`
    Linear { constant: f64, coeffs: Vec<f64>, #[serde(default)] time: f64 },
    /// `Σ b_j z_j + ½ zᵀ Q z` with `Q` symmetric.
    Quadratic { linear: Vec<f64>, quad: Vec<Vec<f64>> },
}

impl OuterFn {
    pub fn identity() -> Self {
        OuterFn::Linear { constant: 0.0, coeffs: vec![1.0], time: 0.0 }
    }

    pub fn arity(&self) -> usize {
        match self {
            OuterFn::Linear { coeffs, .. } => coeffs.len(),
            OuterFn::Quadratic { linear, .. } => linear.len(),
        }
    }

    pub fn value(&self, t: f64, z: &[f64]) -> f64 {
        match self {
            OuterFn::Linear { constant, coeffs, time } => constant + coeffs.iter().zip(z).map(|(c, v)| c * v).sum::<f64>() + time * t,
            OuterFn::Quadratic { linear, quad } => {
                let lin: f64 = linear.iter().zip(z).map(|(c, v)| c * v).sum();
                let mut q = 0.0;
                for (i, row) in quad.iter().enumerate() {
                    for (j, c) in row.iter().enumerate() {
                        q += c * z[i] * z[j];
                    }
                }
                lin + 0.5 * q
            }
        }
    }

    pub fn grad(&self, _t: f64, z: &[f64]) -> Vec<f64> {
        match self {
            OuterFn::Linear { coeffs, .. } => coeffs.clone(),
            OuterFn::Quadratic { linear, quad } => linear
                .iter()
                .enumerate()
                .map(|(i, b)| b + quad[i].iter().zip(z).map(|(c, v)| c * v).sum::<f64>())
                .collect(),
        }
    }

    pub fn time_derivative(&self, _t: f64, _z: &[f64]) -> f64 {
        match self {
            OuterFn::Linear { time, .. } => *time,
            OuterFn::Quadratic { .. } => 0.0,
        }
    }
}

/// `v(t, μ) = F(t, ∫ψ_1 dμ, .., ∫ψ_k dμ)` with polynomial inners.
#[derive(Debug, Clone, PartialEq)]
pub struct CylindricalTestFn {
    pub outer: OuterFn,
    pub inners: Vec<Polynomial>,
    n_states: usize,
    dim_y: usize,
}

/// Value, gradient and Hessian of `δ_m v(t, μ; ·)` at one `(x, y)`; the
/// gradient/Hessian index runs over `(x_1..x_N, y_1..y_d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LfdJet {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

const SELF_TEST_POINTS: usize = 8;
const SELF_TEST_TOL: f64 = 1e-6;

impl CylindricalTestFn {
    /// Builds the functional and checks every inner's closed-form gradient and
    /// Hessian against central differences at random points.
    pub fn new(outer: OuterFn, inners: Vec<Polynomial>, n_states: usize, dim_y: usize) -> Result<Self, HjbError> {
        if outer.arity() != inners.len() {
            return Err(HjbError::DimensionMismatch(format!(
                "outer function takes {} arguments, {} inners given",
                outer.arity(),
                inners.len()
            )));
        }
        for p in &inners {
            p.check_dims(n_states, dim_y).map_err(HjbError::DimensionMismatch)?;
        }
        let f = Self { outer, inners, n_states, dim_y };
        f.self_test()?;
        Ok(f)
    }

    /// `F(z) = z` with `ψ = ⟨x, 1⟩`.
    pub fn mass(n_states: usize, dim_y: usize) -> Self {
        Self::new(OuterFn::identity(), vec![Polynomial::mass(n_states, dim_y)], n_states, dim_y).expect("mass functional")
    }

    /// `F(z) = z` with `ψ = ⟨x, 1⟩ y_comp^power`.
    pub fn weighted_y_moment(n_states: usize, dim_y: usize, comp: usize, power: u32) -> Self {
        let p = Polynomial::weighted_y_power(n_states, dim_y, comp, power);
        Self::new(OuterFn::identity(), vec![p], n_states, dim_y).expect("weighted moment functional")
    }

    /// `F(z) = z` with `ψ = y_comp^power`.
    pub fn y_moment(n_states: usize, dim_y: usize, comp: usize, power: u32) -> Self {
        let p = Polynomial::y_power(n_states, dim_y, comp, power);
        Self::new(OuterFn::identity(), vec![p], n_states, dim_y).expect("moment functional")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn dim_y(&self) -> usize {
        self.dim_y
    }

    fn self_test(&self) -> Result<(), HjbError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let dim = self.n_states + self.dim_y;
        let h = 1e-4;
        for _ in 0..SELF_TEST_POINTS {
            let mut pt: Vec<f64> = (0..dim).map(|i| if i < self.n_states { rng.gen_range(0.0..1.0) } else { rng.gen_range(-1.0..1.0) }).collect();
            for (j, p) in self.inners.iter().enumerate() {
                let grad = p.grad_flat(&pt, self.n_states);
                let hess = p.hess_flat(&pt, self.n_states);
                for v in 0..dim {
                    let orig = pt[v];
                    pt[v] = orig + h;
                    let fp = p.eval_flat(&pt, self.n_states);
                    let gp = p.grad_flat(&pt, self.n_states);
                    pt[v] = orig - h;
                    let fm = p.eval_flat(&pt, self.n_states);
                    let gm = p.grad_flat(&pt, self.n_states);
                    pt[v] = orig;
                    let fd = (fp - fm) / (2.0 * h);
                    check_close(&format!("d psi_{j} / d var {v}"), grad[v], fd)?;
                    for w in 0..dim {
                        let fd2 = (gp[w] - gm[w]) / (2.0 * h);
                        check_close(&format!("d2 psi_{j} / d var {v} d var {w}"), hess[v * dim + w], fd2)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// `z̄_j = (1/M) Σ_i ψ_j(x_i, y_i)`.
    pub fn inner_means(&self, cloud: &ParticleCloud) -> Vec<f64> {
        self.inners
            .iter()
            .map(|p| {
                let vals: Vec<f64> = (0..cloud.len()).into_par_iter().map(|i| p.eval(cloud.x_of(i), cloud.y_of(i))).collect();
                pairwise_sum(&vals) / cloud.len() as f64
            })
            .collect()
    }

    /// `v(t, μ̂)`.
    pub fn value(&self, t: f64, cloud: &ParticleCloud) -> f64 {
        self.outer.value(t, &self.inner_means(cloud))
    }

    pub fn value_at(&self, t: f64, z: &[f64]) -> f64 {
        self.outer.value(t, z)
    }

    /// `δ_m v` at `(x, y)` given outer weights `∂F(z̄)`.
    fn jet(&self, weights: &[f64], x: &[f64], y: &[f64]) -> LfdJet {
        let dim = self.n_states + self.dim_y;
        let mut jet = LfdJet { value: 0.0, grad: vec![0.0; dim], hess: vec![0.0; dim * dim] };
        let mut pt = Vec::with_capacity(dim);
        pt.extend_from_slice(x);
        pt.extend_from_slice(y);
        for (w, p) in weights.iter().zip(&self.inners) {
            if *w == 0.0 {
                continue;
            }
            jet.value += w * p.eval_flat(&pt, self.n_states);
            for (g, v) in jet.grad.iter_mut().zip(p.grad_flat(&pt, self.n_states)) {
                *g += w * v;
            }
            for (h, v) in jet.hess.iter_mut().zip(p.hess_flat(&pt, self.n_states)) {
                *h += w * v;
            }
        }
        jet
    }

    /// `δ_m v(t, μ̂; x, y)` with its `(x, y)`-gradient and Hessian.
    pub fn lfd_jet(&self, t: f64, cloud: &ParticleCloud, x: &[f64], y: &[f64]) -> LfdJet {
        let weights = self.outer.grad(t, &self.inner_means(cloud));
        self.jet(&weights, x, y)
    }
}

fn check_close(what: &str, exact: f64, approx: f64) -> Result<(), HjbError> {
    if (exact - approx).abs() > SELF_TEST_TOL * exact.abs().max(1.0) {
        return Err(HjbError::DerivativeMismatch { what: what.to_string(), exact, approx });
    }
    Ok(())
}

/// `δ_m v(t, μ̂; x, y) = Σ_j ∂_j F(t, z̄) ψ_j(x, y)`.
pub fn lfd_value(v: &CylindricalTestFn, t: f64, cloud: &ParticleCloud, x: &[f64], y: &[f64]) -> f64 {
    let weights = v.outer.grad(t, &v.inner_means(cloud));
    weights.iter().zip(&v.inners).map(|(w, p)| w * p.eval(x, y)).sum()
}

/// Particle averages of the four generator terms and the running reward.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeneratorBreakdown {
    pub drift_term: f64,
    pub xx_term: f64,
    pub xy_term: f64,
    pub yy_term: f64,
    pub f_term: f64,
}

impl GeneratorBreakdown {
    pub fn total(&self) -> f64 {
        self.drift_term + self.xx_term + self.xy_term + self.yy_term + self.f_term
    }

    pub fn total_without_f(&self) -> f64 {
        self.drift_term + self.xx_term + self.xy_term + self.yy_term
    }
}

fn check_model(v: &CylindricalTestFn, model: &ModelSpec, cloud: &ParticleCloud) -> Result<(), HjbError> {
    if v.n_states != model.n_states() || v.dim_y != model.dim_d || cloud.n_states != v.n_states || cloud.dim_y != v.dim_y {
        return Err(HjbError::DimensionMismatch(format!(
            "test function on (N={}, d={}), model (N={}, d={}), cloud (N={}, d={})",
            v.n_states,
            v.dim_y,
            model.n_states(),
            model.dim_d,
            cloud.n_states,
            cloud.dim_y
        )));
    }
    Ok(())
}

/// Averages over particles of `L^a v` split into its terms, with each
/// particle's control taken from `cloud.a` and `h`, `f` evaluated at `Γ` of
/// the cloud.
pub fn generator_apply(v: &CylindricalTestFn, t: f64, cloud: &ParticleCloud, model: &ModelSpec) -> Result<GeneratorBreakdown, HjbError> {
    check_model(v, model, cloud)?;
    let (n, d, big_d) = (cloud.n_states, cloud.dim_y, cloud.dim_a);
    let a0 = &model.controls.reference;
    let (zh, zf) = if model.h.stats.is_empty() && model.f.stats.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let nu = gamma_measure(cloud)?;
        (eval_stats(&nu, &model.h.stats, a0)?, eval_stats(&nu, &model.f.stats, a0)?)
    };
    let weights = v.outer.grad(t, &v.inner_means(cloud));
    let rates = model.regime.rates();
    let dim = n + d;

    let terms: Vec<[f64; 5]> = (0..cloud.len())
        .into_par_iter()
        .map(|p| {
            let (x, y, a) = (cloud.x_of(p), cloud.y_of(p), cloud.a_of(p));
            let jet = v.jet(&weights, x, y);
            let mut hv = vec![0.0; n * d];
            model.h.eval_all_regimes(y, a, &zh, &mut hv);
            let mut sigma = vec![0.0; d * d];
            model.sigma.eval_into(y, &mut sigma);
            let hx = |i: usize, j: usize| jet.hess[i * dim + j];

            // ∂_x δ · Λ^T x
            let mut drift = 0.0;
            for i in 0..n {
                let lt_x: f64 = (0..n).map(|j| rates[j][i] * x[j]).sum();
                drift += jet.grad[i] * lt_x;
            }
            // ½ Σ x_i x_j (h^i·h^j) ∂²_{x_i x_j}
            let mut xx = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let hh: f64 = (0..d).map(|k| hv[i * d + k] * hv[j * d + k]).sum();
                    xx += x[i] * x[j] * hh * hx(i, j);
                }
            }
            xx *= 0.5;
            // Σ_i x_i Σ_k (h^i σ^T)_k ∂²_{x_i y_k}
            let mut xy = 0.0;
            for i in 0..n {
                for k in 0..d {
                    let hs: f64 = (0..d).map(|l| hv[i * d + l] * sigma[k * d + l]).sum();
                    xy += x[i] * hs * hx(i, n + k);
                }
            }
            // ½ Tr[σσ^T ∂²_y]
            let mut yy = 0.0;
            for k in 0..d {
                for m in 0..d {
                    let ss: f64 = (0..d).map(|l| sigma[k * d + l] * sigma[m * d + l]).sum();
                    yy += ss * hx(n + k, n + m);
                }
            }
            yy *= 0.5;
            let mut u = Vec::with_capacity(d + big_d);
            u.extend_from_slice(y);
            u.extend_from_slice(a);
            let f = model.f.pair_with(x, &u, &zf);
            [drift, xx, xy, yy, f]
        })
        .collect();

    let m = cloud.len() as f64;
    let column = |c: usize| {
        let col: Vec<f64> = terms.iter().map(|r| r[c]).collect();
        pairwise_sum(&col) / m
    };
    Ok(GeneratorBreakdown { drift_term: column(0), xx_term: column(1), xy_term: column(2), yy_term: column(3), f_term: column(4) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItoResidual {
    pub residual: f64,
    pub signed: f64,
    /// Signed residual accumulated up to each grid time.
    pub pathwise_series: Vec<f64>,
}

/// Streaming form of [`ito_residual`]: feed the clouds of one run in step
/// order.
#[derive(Debug, Clone)]
pub struct ItoAccumulator<'a> {
    v: &'a CylindricalTestFn,
    model: &'a ModelSpec,
    v0: f64,
    integral: f64,
    prev: Option<(u64, f64, f64)>,
    series: Vec<f64>,
    max_abs_generator: f64,
}

impl<'a> ItoAccumulator<'a> {
    pub fn new(v: &'a CylindricalTestFn, model: &'a ModelSpec) -> Self {
        Self { v, model, v0: 0.0, integral: 0.0, prev: None, series: Vec::new(), max_abs_generator: 0.0 }
    }

    pub fn observe(&mut self, cloud: &ParticleCloud) -> Result<(), HjbError> {
        let value = self.v.value(cloud.t, cloud);
        match self.prev {
            None => {
                self.v0 = value;
                self.series.push(0.0);
            }
            Some((step, t, rate)) => {
                if cloud.step != step + 1 {
                    return Err(HjbError::SparseTrajectory);
                }
                self.integral += rate * (cloud.t - t);
                self.series.push(value - self.v0 - self.integral);
            }
        }
        let gen = generator_apply(self.v, cloud.t, cloud, self.model)?.total_without_f();
        self.max_abs_generator = self.max_abs_generator.max(gen.abs());
        let rate = self.v.outer.time_derivative(cloud.t, &self.v.inner_means(cloud)) + gen;
        self.prev = Some((cloud.step, cloud.t, rate));
        Ok(())
    }

    /// Largest `|L v|` (running reward excluded) over the clouds seen.
    pub fn max_abs_generator(&self) -> f64 {
        self.max_abs_generator
    }

    pub fn finish(self) -> ItoResidual {
        let signed = self.series.last().copied().unwrap_or(0.0);
        ItoResidual { residual: signed.abs(), signed, pathwise_series: self.series }
    }
}

/// `v(T, μ̂_T) - v(t0, μ̂_{t0}) - Σ_k (∂_t v + L v)(t_k) dt`, running reward
/// excluded. Needs a trajectory recorded at every step.
pub fn ito_residual(v: &CylindricalTestFn, traj: &Trajectory, model: &ModelSpec) -> Result<ItoResidual, HjbError> {
    let mut acc = ItoAccumulator::new(v, model);
    for cloud in &traj.clouds {
        acc.observe(cloud)?;
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianChoice {
    pub best_value: f64,
    pub best_control: Vec<f64>,
    pub best_index: usize,
}

/// Maximizes the generator plus running reward over controls held constant
/// across particles; ties go to the lowest grid index.
pub fn hamiltonian(
    w: &CylindricalTestFn,
    t: f64,
    cloud: &ParticleCloud,
    model: &ModelSpec,
    control_grid: &[Vec<f64>],
) -> Result<HamiltonianChoice, HjbError> {
    if control_grid.is_empty() {
        return Err(HjbError::EmptyGrid);
    }
    let mut best: Option<HamiltonianChoice> = None;
    let mut trial = cloud.clone();
    for (idx, a) in control_grid.iter().enumerate() {
        if a.len() != cloud.dim_a {
            return Err(HjbError::DimensionMismatch(format!("grid control {idx} has {} entries", a.len())));
        }
        for chunk in trial.a.chunks_mut(cloud.dim_a) {
            chunk.copy_from_slice(a);
        }
        let value = generator_apply(w, t, &trial, model)?.total();
        if best.as_ref().is_none_or(|b| value > b.best_value) {
            best = Some(HamiltonianChoice { best_value: value, best_control: a.clone(), best_index: idx });
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// `|w(T, μ̂) - (1/M) Σ ⟨x_i, g(y_i, Γ₁(μ̂))⟩|`.
pub fn terminal_residual(w: &CylindricalTestFn, cloud: &ParticleCloud, model: &ModelSpec) -> Result<f64, HjbError> {
    check_model(w, model, cloud)?;
    let g = &model.g;
    let z = if g.stats.is_empty() {
        Vec::new()
    } else {
        eval_stats(&gamma1_measure(cloud)?, &g.stats, &model.controls.reference)?
    };
    let vals: Vec<f64> = (0..cloud.len()).into_par_iter().map(|i| g.pair_with(cloud.x_of(i), cloud.y_of(i), &z)).collect();
    let target = pairwise_sum(&vals) / cloud.len() as f64;
    Ok((w.value(cloud.t, cloud) - target).abs())
}

/// The cylindrical functional whose value is the expected terminal reward,
/// for terminal rewards that do not read the law.
pub fn matched_terminal_fn(model: &ModelSpec) -> Result<CylindricalTestFn, HjbError> {
    let g = &model.g;
    if g.reads_measure(model.dim_d) || !g.stats.is_empty() {
        return Err(HjbError::LawDependentTerminal);
    }
    let (n, d) = (model.n_states(), model.dim_d);
    let mut terms = Vec::new();
    for i in 0..n {
        let mut x_pow = vec![0u32; n];
        x_pow[i] = 1;
        let c = g.offset(i);
        if c != 0.0 {
            terms.push(Monomial { coef: c, x_pow: x_pow.clone(), y_pow: vec![0; d] });
        }
        for (k, &c) in g.linear.iter().enumerate().take(d) {
            if c != 0.0 {
                let mut y_pow = vec![0u32; d];
                y_pow[k] = 1;
                terms.push(Monomial { coef: c, x_pow: x_pow.clone(), y_pow });
            }
        }
        for q in &g.quad {
            if q.c != 0.0 {
                let mut y_pow = vec![0u32; d];
                y_pow[q.i] += 1;
                y_pow[q.j] += 1;
                terms.push(Monomial { coef: q.c, x_pow: x_pow.clone(), y_pow });
            }
        }
    }
    CylindricalTestFn::new(OuterFn::identity(), vec![Polynomial { terms }], n, d)
}

#[cfg(test)]
mod tests;
