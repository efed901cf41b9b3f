//! Particle clouds and the mass-reweighted empirical measures built from them.

use std::io::{self, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{StatSpec, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("ZeroTotalMass: filter masses sum to zero")]
    ZeroTotalMass,
    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),
}

const SEQ_BLOCK: usize = 32;
const PAR_THRESHOLD: usize = 1 << 13;

/// Sum over a fixed binary tree: the association order depends only on the
/// length of `values`, never on the number of threads.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= SEQ_BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    let (lo, hi) = values.split_at(mid);
    if values.len() >= PAR_THRESHOLD {
        let (a, b) = rayon::join(|| pairwise_sum(lo), || pairwise_sum(hi));
        a + b
    } else {
        pairwise_sum(lo) + pairwise_sum(hi)
    }
}

/// Mean and standard error of a sample, both via [`pairwise_sum`].
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// `M` particles, each with a filter state `x ∈ R^N_+`, an observation
/// `y ∈ R^d` and a control `a ∈ R^D`. Stored flat, particle-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    pub n_states: usize,
    pub dim_y: usize,
    pub dim_a: usize,
    pub t: f64,
    /// Global step index on the run's grid.
    pub step: u64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub a: Vec<f64>,
}

impl ParticleCloud {
    /// All particles at `(x0, y0)` with control `a0`.
    pub fn uniform(count: usize, x0: &[f64], y0: &[f64], a0: &[f64], t: f64) -> Self {
        assert!(count >= 1, "a cloud needs at least one particle");
        Self {
            n_states: x0.len(),
            dim_y: y0.len(),
            dim_a: a0.len(),
            t,
            step: 0,
            x: x0.repeat(count),
            y: y0.repeat(count),
            a: a0.repeat(count),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len() / self.n_states
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x_of(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_states..(i + 1) * self.n_states]
    }

    pub fn y_of(&self, i: usize) -> &[f64] {
        &self.y[i * self.dim_y..(i + 1) * self.dim_y]
    }

    pub fn a_of(&self, i: usize) -> &[f64] {
        &self.a[i * self.dim_a..(i + 1) * self.dim_a]
    }

    pub fn mass_of(&self, i: usize) -> f64 {
        self.x_of(i).iter().sum()
    }

    pub fn masses(&self) -> Vec<f64> {
        self.x.par_chunks(self.n_states).map(|x| x.iter().sum()).collect()
    }

    /// Number of negative filter components.
    pub fn negative_count(&self) -> usize {
        self.x.iter().filter(|v| **v < 0.0).count()
    }

    /// Empirical mean of `⟨x_i, 1⟩` and its standard error.
    pub fn mass_stats(&self) -> (f64, f64) {
        mean_and_se(&self.masses())
    }

    /// Per-component mean of `x^j` and its standard error.
    pub fn component_stats(&self, j: usize) -> (f64, f64) {
        let vals: Vec<f64> = self.x.iter().skip(j).step_by(self.n_states).copied().collect();
        mean_and_se(&vals)
    }

    /// Writes one CSV row per particle: `t, particle_id, x.., y.., a..`.
    pub fn write_csv_rows<W: Write>(&self, out: &mut W) -> io::Result<()> {
        for i in 0..self.len() {
            write!(out, "{},{}", self.t, i)?;
            for v in self.x_of(i).iter().chain(self.y_of(i)).chain(self.a_of(i)) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["t".to_string(), "particle_id".to_string()];
        cols.extend((1..=self.n_states).map(|j| format!("x_{j}")));
        cols.extend((1..=self.dim_y).map(|j| format!("y_{j}")));
        cols.extend((1..=self.dim_a).map(|j| format!("a_{j}")));
        cols.join(",")
    }
}

/// Atoms on `(y, a)` (or `y` alone when `dim_a == 0`) with weights summing
/// to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPointMeasure {
    pub dim_y: usize,
    pub dim_a: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl WeightedPointMeasure {
    /// Normalizes the nonnegative `masses` into weights.
    pub fn from_masses(dim_y: usize, dim_a: usize, points: Vec<f64>, masses: Vec<f64>) -> Result<Self, MeasureError> {
        let stride = dim_y + dim_a;
        if points.len() != masses.len() * stride {
            return Err(MeasureError::DimensionMismatch(format!(
                "{} coordinates for {} atoms of dimension {}",
                points.len(),
                masses.len(),
                stride
            )));
        }
        let total = pairwise_sum(&masses);
        if !(total > 0.0) {
            return Err(MeasureError::ZeroTotalMass);
        }
        let weights = masses.into_iter().map(|m| m / total).collect();
        Ok(Self { dim_y, dim_a, points, weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn stride(&self) -> usize {
        self.dim_y + self.dim_a
    }

    pub fn y_of(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.points[i * s..i * s + self.dim_y]
    }

    pub fn a_of(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.points[i * s + self.dim_y..(i + 1) * s]
    }

    /// `Σ w_i ψ(y_i, a_i)`.
    pub fn integrate<F>(&self, psi: F) -> f64
    where
        F: Fn(&[f64], &[f64]) -> f64 + Sync,
    {
        let terms: Vec<f64> = (0..self.len())
            .into_par_iter()
            .map(|i| self.weights[i] * psi(self.y_of(i), self.a_of(i)))
            .collect();
        pairwise_sum(&terms)
    }
}

/// `Γ`: atoms `(y_i, a_i)` weighted by `⟨x_i, 1⟩ / Σ_j ⟨x_j, 1⟩`.
pub fn gamma_measure(cloud: &ParticleCloud) -> Result<WeightedPointMeasure, MeasureError> {
    let stride = cloud.dim_y + cloud.dim_a;
    let mut points = vec![0.0; cloud.len() * stride];
    points.par_chunks_mut(stride).enumerate().for_each(|(i, p)| {
        p[..cloud.dim_y].copy_from_slice(cloud.y_of(i));
        p[cloud.dim_y..].copy_from_slice(cloud.a_of(i));
    });
    WeightedPointMeasure::from_masses(cloud.dim_y, cloud.dim_a, points, cloud.masses())
}

/// `Γ₁`: the `y`-marginal of [`gamma_measure`].
pub fn gamma1_measure(cloud: &ParticleCloud) -> Result<WeightedPointMeasure, MeasureError> {
    WeightedPointMeasure::from_masses(cloud.dim_y, 0, cloud.y.clone(), cloud.masses())
}

fn check_stat(measure: &WeightedPointMeasure, stat: &StatSpec, a0: &[f64]) -> Result<(), MeasureError> {
    let (d, big_d) = (measure.dim_y, measure.dim_a);
    let bad = |m: String| Err(MeasureError::DimensionMismatch(m));
    match stat {
        StatSpec::Mean { var: Var::Y(j) } if *j >= d => bad(format!("y_{j} on a {d}-dimensional measure")),
        StatSpec::Mean { var: Var::A(j) } if *j >= big_d => bad(format!("a_{j} on a measure with {big_d} control dims")),
        StatSpec::Covariance { i, j } if *i >= d || *j >= d => bad(format!("covariance ({i},{j}) with d = {d}")),
        StatSpec::Moment { .. } if big_d > 0 && a0.len() != big_d => bad("reference point has wrong dimension".into()),
        StatSpec::Psi { psi } => match psi {
            crate::model::PsiFn::AbsPower { comp, .. } | crate::model::PsiFn::Tanh { comp } if *comp >= d => {
                bad(format!("psi reads y_{comp} with d = {d}"))
            }
            _ => Ok(()),
        },
        _ => Ok(()),
    }
}

/// Evaluates a cylindrical statistic against a weighted measure.
pub fn eval_stat(measure: &WeightedPointMeasure, stat: &StatSpec, a0: &[f64]) -> Result<f64, MeasureError> {
    check_stat(measure, stat, a0)?;
    let v = match stat {
        StatSpec::Mean { var: Var::Y(j) } => measure.integrate(|y, _| y[*j]),
        StatSpec::Mean { var: Var::A(j) } => measure.integrate(|_, a| a[*j]),
        StatSpec::Moment { gamma } => measure.integrate(|y, a| {
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let na = a.iter().zip(a0).map(|(v, r)| (v - r) * (v - r)).sum::<f64>().sqrt();
            (ny + na).powf(*gamma)
        }),
        StatSpec::Covariance { i, j } => {
            let eij = measure.integrate(|y, _| y[*i] * y[*j]);
            let ei = measure.integrate(|y, _| y[*i]);
            let ej = measure.integrate(|y, _| y[*j]);
            eij - ei * ej
        }
        StatSpec::Psi { psi } => measure.integrate(|y, _| psi.eval(y)),
    };
    Ok(v)
}

/// All statistics of a coefficient, in order.
pub fn eval_stats(measure: &WeightedPointMeasure, stats: &[StatSpec], a0: &[f64]) -> Result<Vec<f64>, MeasureError> {
    stats.iter().map(|s| eval_stat(measure, s, a0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudPart {
    Filter,
    Observation,
}

/// `(mean_i |v_i|^order)^(1/order)` over the filter or observation states.
pub fn empirical_norm(cloud: &ParticleCloud, order: f64, part: CloudPart) -> f64 {
    assert!(order >= 1.0, "norm order must be at least 1");
    let (data, stride) = match part {
        CloudPart::Filter => (&cloud.x, cloud.n_states),
        CloudPart::Observation => (&cloud.y, cloud.dim_y),
    };
    let terms: Vec<f64> = data
        .par_chunks(stride)
        .map(|v| v.iter().map(|c| c * c).sum::<f64>().sqrt().powf(order))
        .collect();
    (pairwise_sum(&terms) / terms.len() as f64).powf(1.0 / order)
}
