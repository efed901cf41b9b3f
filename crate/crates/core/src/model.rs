//! Problem data: the hidden regime chain, the control box, the cylindrical
//! coefficient catalog for `h`, `f`, `g`, `sigma`, growth metadata, and
//! scenario builders.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const RATE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("NegativeRate: off-diagonal rate ({row},{col}) = {value}")]
    NegativeRate { row: usize, col: usize, value: f64 },
    #[error("RowSumNonzero: row {row} sums to {sum}")]
    RowSumNonzero { row: usize, sum: f64 },
    #[error("rate matrix must be square and non-empty")]
    NotSquare,
    #[error("initial distribution invalid: {0}")]
    BadInitialDist(String),
    #[error("GrowthIncompatible: {0}")]
    GrowthIncompatible(String),
    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),
    #[error("control space invalid: {0}")]
    BadControlSpace(String),
    #[error("h is not bounded: {0}")]
    UnboundedH(String),
    #[error("sigma is not invertible: {0}")]
    SingularSigma(String),
    #[error("invalid liquidation parameters: {0}")]
    BadLiquidation(String),
}

/// Checks that `rates` is a conservative generator: nonnegative off-diagonal
/// entries and zero row sums.
pub fn validate_rate_matrix(rates: &[Vec<f64>]) -> Result<(), ModelError> {
    let n = rates.len();
    if n == 0 || rates.iter().any(|row| row.len() != n) {
        return Err(ModelError::NotSquare);
    }
    for (i, row) in rates.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i != j && v < 0.0 {
                return Err(ModelError::NegativeRate { row: i, col: j, value: v });
            }
        }
    }
    for (i, row) in rates.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if sum.abs() > RATE_TOL || !sum.is_finite() {
            return Err(ModelError::RowSumNonzero { row: i, sum });
        }
    }
    Ok(())
}

/// Hidden continuous-time Markov chain on `{0, .., N-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RegimeModelRaw", into = "RegimeModelRaw")]
pub struct RegimeModel {
    rates: Vec<Vec<f64>>,
    initial: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RegimeModelRaw {
    rates: Vec<Vec<f64>>,
    initial: Vec<f64>,
}

impl TryFrom<RegimeModelRaw> for RegimeModel {
    type Error = ModelError;
    fn try_from(raw: RegimeModelRaw) -> Result<Self, Self::Error> {
        RegimeModel::new(raw.rates, raw.initial)
    }
}

impl From<RegimeModel> for RegimeModelRaw {
    fn from(m: RegimeModel) -> Self {
        RegimeModelRaw { rates: m.rates, initial: m.initial }
    }
}

impl RegimeModel {
    pub fn new(rates: Vec<Vec<f64>>, initial: Vec<f64>) -> Result<Self, ModelError> {
        validate_rate_matrix(&rates)?;
        if initial.len() != rates.len() {
            return Err(ModelError::BadInitialDist(format!(
                "length {} does not match {} states",
                initial.len(),
                rates.len()
            )));
        }
        if initial.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(ModelError::BadInitialDist("negative or non-finite entry".into()));
        }
        let total: f64 = initial.iter().sum();
        if (total - 1.0).abs() > RATE_TOL {
            return Err(ModelError::BadInitialDist(format!("sums to {total}")));
        }
        Ok(Self { rates, initial })
    }

    pub fn n_states(&self) -> usize {
        self.rates.len()
    }

    pub fn rates(&self) -> &[Vec<f64>] {
        &self.rates
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    /// Total jump intensity out of `state`.
    pub fn exit_rate(&self, state: usize) -> f64 {
        -self.rates[state][state]
    }

    /// `out = Λ^T p`.
    fn forward_rhs(&self, p: &[f64], out: &mut [f64]) {
        let n = self.n_states();
        for j in 0..n {
            out[j] = (0..n).map(|i| self.rates[i][j] * p[i]).sum();
        }
    }

    /// Law of the chain at time `t`: solves `dp/dt = Λ^T p` from `π₀` with
    /// classical RK4.
    pub fn marginal(&self, t: f64) -> Vec<f64> {
        self.advance_marginal(&self.initial, t)
    }

    /// Advances an arbitrary probability vector `p` by `t` under the forward
    /// equation.
    pub fn advance_marginal(&self, p0: &[f64], t: f64) -> Vec<f64> {
        assert!(t >= 0.0, "negative time {t}");
        let n = self.n_states();
        let mut p = p0.to_vec();
        if t == 0.0 {
            return p;
        }
        let max_step = 1e-3 * (1.0 + t);
        let steps = (t / max_step).ceil().max(1.0) as usize;
        let h = t / steps as f64;
        let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut tmp = vec![0.0; n];
        for _ in 0..steps {
            self.forward_rhs(&p, &mut k1);
            for j in 0..n {
                tmp[j] = p[j] + 0.5 * h * k1[j];
            }
            self.forward_rhs(&tmp, &mut k2);
            for j in 0..n {
                tmp[j] = p[j] + 0.5 * h * k2[j];
            }
            self.forward_rhs(&tmp, &mut k3);
            for j in 0..n {
                tmp[j] = p[j] + h * k3[j];
            }
            self.forward_rhs(&tmp, &mut k4);
            for j in 0..n {
                p[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
        }
        let total: f64 = p.iter().sum();
        if total > 0.0 {
            p.iter_mut().for_each(|v| *v /= total);
        }
        p
    }

    /// `exp(Λ^T dt)` by a degree-12 Taylor polynomial with scaling and
    /// squaring. Row-major `N x N`.
    pub fn transition_operator(&self, dt: f64) -> Vec<Vec<f64>> {
        let n = self.n_states();
        let mut a = vec![vec![0.0; n]; n];
        let mut norm: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                a[i][j] = self.rates[j][i] * dt;
            }
            norm = norm.max(a[i].iter().map(|v| v.abs()).sum());
        }
        // scale until the 1-step Taylor remainder is negligible
        let mut squarings = 0u32;
        while norm > 0.125 {
            norm *= 0.5;
            squarings += 1;
        }
        let scale = 0.5f64.powi(squarings as i32);
        for row in a.iter_mut() {
            row.iter_mut().for_each(|v| *v *= scale);
        }
        let mut result = identity(n);
        let mut term = identity(n);
        for k in 1..=12 {
            term = mat_mul(&term, &a);
            let inv = 1.0 / k as f64;
            for row in term.iter_mut() {
                row.iter_mut().for_each(|v| *v *= inv);
            }
            for i in 0..n {
                for j in 0..n {
                    result[i][j] += term[i][j];
                }
            }
        }
        for _ in 0..squarings {
            result = mat_mul(&result, &result);
        }
        result
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for k in 0..b.len() {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

/// Box `[lower, upper] ⊂ R^D` with a reference point `a₀`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSpace {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub reference: Vec<f64>,
}

impl ControlSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, reference: Vec<f64>) -> Result<Self, ModelError> {
        let cs = Self { lower, upper, reference };
        cs.validate()?;
        Ok(cs)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let d = self.lower.len();
        if d == 0 || self.upper.len() != d || self.reference.len() != d {
            return Err(ModelError::BadControlSpace("bounds and reference must share a positive dimension".into()));
        }
        for k in 0..d {
            if !(self.lower[k] < self.upper[k]) || !self.lower[k].is_finite() || !self.upper[k].is_finite() {
                return Err(ModelError::BadControlSpace(format!("component {k}: need lower < upper")));
            }
            if self.reference[k] < self.lower[k] || self.reference[k] > self.upper[k] {
                return Err(ModelError::BadControlSpace(format!("reference point outside box in component {k}")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn clamp_in_place(&self, a: &mut [f64]) {
        for (k, v) in a.iter_mut().enumerate() {
            *v = if v.is_nan() { self.reference[k] } else { v.clamp(self.lower[k], self.upper[k]) };
        }
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.len() == self.dim() && a.iter().enumerate().all(|(k, v)| *v >= self.lower[k] && *v <= self.upper[k])
    }

    /// Euclidean distance to the reference point.
    pub fn dist_to_reference(&self, a: &[f64]) -> f64 {
        a.iter().zip(&self.reference).map(|(x, r)| (x - r) * (x - r)).sum::<f64>().sqrt()
    }

    /// Largest absolute value component `k` can take.
    pub fn abs_bound(&self, k: usize) -> f64 {
        self.lower[k].abs().max(self.upper[k].abs())
    }

    pub fn diameter(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| (u - l) * (u - l)).sum::<f64>().sqrt()
    }
}

/// A coordinate of an atom `(y, a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Var {
    Y(usize),
    A(usize),
}

/// Catalog test function `ψ(y, a)` for generic expectations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum PsiFn {
    /// `|y_comp|^power`
    AbsPower { comp: usize, power: f64 },
    /// `tanh(y_comp)`
    Tanh { comp: usize },
}

impl PsiFn {
    pub fn order(&self) -> f64 {
        match self {
            PsiFn::AbsPower { power, .. } => *power,
            PsiFn::Tanh { .. } => 0.0,
        }
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        match self {
            PsiFn::AbsPower { comp, power } => y[*comp].abs().powf(*power),
            PsiFn::Tanh { comp } => y[*comp].tanh(),
        }
    }
}

/// Linear statistic `∫ ψ dν` of a measure on `(y, a)` (or `y`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stat", rename_all = "snake_case")]
pub enum StatSpec {
    Mean { var: Var },
    /// `∫ (|y| + |a - a₀|)^gamma dν`
    Moment { gamma: f64 },
    /// Entry `(i, j)` of the covariance of the `y`-marginal.
    Covariance { i: usize, j: usize },
    Psi { psi: PsiFn },
}

impl StatSpec {
    /// Polynomial growth order of the underlying integrand.
    pub fn order(&self) -> f64 {
        match self {
            StatSpec::Mean { .. } => 1.0,
            StatSpec::Moment { gamma } => *gamma,
            StatSpec::Covariance { .. } => 2.0,
            StatSpec::Psi { psi } => psi.order(),
        }
    }

    fn check_dims(&self, d: usize, big_d: usize, y_only: bool) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::DimensionMismatch(msg));
        match self {
            StatSpec::Mean { var: Var::Y(j) } if *j >= d => bad(format!("mean of y_{j} with d = {d}")),
            StatSpec::Mean { var: Var::A(j) } if y_only => bad(format!("mean of a_{j} on a y-only measure")),
            StatSpec::Mean { var: Var::A(j) } if *j >= big_d => bad(format!("mean of a_{j} with D = {big_d}")),
            StatSpec::Covariance { i, j } if *i >= d || *j >= d => bad(format!("covariance ({i},{j}) with d = {d}")),
            StatSpec::Psi { psi: PsiFn::AbsPower { comp, .. } | PsiFn::Tanh { comp } } if *comp >= d => {
                bad(format!("psi on y_{comp} with d = {d}"))
            }
            StatSpec::Moment { gamma } if *gamma < 1.0 => bad(format!("moment order {gamma} < 1")),
            _ => Ok(()),
        }
    }

    /// Sup of `|stat|` over measures on `R^d × A`, if finite.
    fn abs_bound(&self, controls: &ControlSpace) -> Option<f64> {
        match self {
            StatSpec::Mean { var: Var::A(j) } => Some(controls.abs_bound(*j)),
            StatSpec::Psi { psi: PsiFn::Tanh { .. } } => Some(1.0),
            StatSpec::Psi { psi: PsiFn::AbsPower { power, .. } } if *power == 0.0 => Some(1.0),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Tanh,
}

/// `h_k(y, a, z, i) = base[i][k] + scale[k] · act(Σ w_stat[k]·z + Σ w_control[k]·a + Σ w_obs[k]·y)`.
///
/// Matrices left empty are treated as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HSpec {
    pub base: Vec<Vec<f64>>,
    #[serde(default)]
    pub scale: Vec<f64>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub stats: Vec<StatSpec>,
    #[serde(default)]
    pub w_stat: Vec<Vec<f64>>,
    #[serde(default)]
    pub w_control: Vec<Vec<f64>>,
    #[serde(default)]
    pub w_obs: Vec<Vec<f64>>,
    /// Declared sup-norm bound; must dominate the derived one.
    #[serde(default)]
    pub bound: Option<f64>,
}

fn get2(m: &[Vec<f64>], i: usize, j: usize) -> f64 {
    m.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0.0)
}

fn check_shape(name: &str, m: &[Vec<f64>], rows: usize, cols: usize) -> Result<(), ModelError> {
    if m.is_empty() {
        return Ok(());
    }
    if m.len() != rows || m.iter().any(|r| r.len() != cols) {
        return Err(ModelError::DimensionMismatch(format!("{name} must be {rows}x{cols}")));
    }
    Ok(())
}

impl HSpec {
    /// Regime-only drift `h(·, i) = values[i]`.
    pub fn regime_constant(values: Vec<Vec<f64>>) -> Self {
        Self {
            base: values,
            scale: Vec::new(),
            activation: Activation::Identity,
            stats: Vec::new(),
            w_stat: Vec::new(),
            w_control: Vec::new(),
            w_obs: Vec::new(),
            bound: None,
        }
    }

    fn scale(&self, k: usize) -> f64 {
        self.scale.get(k).copied().unwrap_or(1.0)
    }

    fn validate(&self, n: usize, d: usize, controls: &ControlSpace) -> Result<(), ModelError> {
        check_shape("h.base", &self.base, n, d)?;
        if self.base.is_empty() {
            return Err(ModelError::DimensionMismatch("h.base is required".into()));
        }
        if !self.scale.is_empty() && self.scale.len() != d {
            return Err(ModelError::DimensionMismatch(format!("h.scale must have length {d}")));
        }
        check_shape("h.w_stat", &self.w_stat, d, self.stats.len())?;
        check_shape("h.w_control", &self.w_control, d, controls.dim())?;
        check_shape("h.w_obs", &self.w_obs, d, d)?;
        for s in &self.stats {
            s.check_dims(d, controls.dim(), false)?;
        }
        let derived = self.derived_bound(controls)?;
        if let Some(b) = self.bound {
            if b + 1e-12 < derived {
                return Err(ModelError::UnboundedH(format!("declared bound {b} below derived bound {derived}")));
            }
        }
        Ok(())
    }

    /// Sup of `|h|` over all inputs, derived from the catalog form.
    pub fn derived_bound(&self, controls: &ControlSpace) -> Result<f64, ModelError> {
        let d = self.base.first().map_or(0, Vec::len);
        let mut sq = 0.0;
        for k in 0..d {
            let base_max = self.base.iter().map(|r| r[k].abs()).fold(0.0, f64::max);
            let inner = match self.activation {
                Activation::Tanh => 1.0,
                Activation::Identity => {
                    if (0..d).any(|m| get2(&self.w_obs, k, m) != 0.0) {
                        return Err(ModelError::UnboundedH(format!("component {k} is linear in y")));
                    }
                    let mut acc = 0.0;
                    for (j, s) in self.stats.iter().enumerate() {
                        let w = get2(&self.w_stat, k, j);
                        if w != 0.0 {
                            let b = s.abs_bound(controls).ok_or_else(|| {
                                ModelError::UnboundedH(format!("component {k} is linear in unbounded statistic {j}"))
                            })?;
                            acc += w.abs() * b;
                        }
                    }
                    for l in 0..controls.dim() {
                        acc += get2(&self.w_control, k, l).abs() * controls.abs_bound(l);
                    }
                    acc
                }
            };
            let bk = base_max + self.scale(k).abs() * inner;
            sq += bk * bk;
        }
        Ok(sq.sqrt())
    }

    pub fn bound(&self, controls: &ControlSpace) -> f64 {
        self.bound.unwrap_or_else(|| self.derived_bound(controls).unwrap_or(f64::INFINITY))
    }

    pub fn reads_measure(&self) -> bool {
        self.w_stat.iter().any(|r| r.iter().any(|&w| w != 0.0))
    }

    /// Writes `h(y, a, z, regime)` into `out` (length `d`).
    pub fn eval_into(&self, y: &[f64], a: &[f64], z: &[f64], regime: usize, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let mut lin = 0.0;
            if let Some(row) = self.w_stat.get(k) {
                lin += row.iter().zip(z).map(|(w, v)| w * v).sum::<f64>();
            }
            if let Some(row) = self.w_control.get(k) {
                lin += row.iter().zip(a).map(|(w, v)| w * v).sum::<f64>();
            }
            if let Some(row) = self.w_obs.get(k) {
                lin += row.iter().zip(y).map(|(w, v)| w * v).sum::<f64>();
            }
            let act = match self.activation {
                Activation::Identity => lin,
                Activation::Tanh => lin.tanh(),
            };
            *o = self.base[regime][k] + self.scale(k) * act;
        }
    }

    /// All regimes at once: `out[i*d + k] = h_k(.., i)`.
    pub fn eval_all_regimes(&self, y: &[f64], a: &[f64], z: &[f64], out: &mut [f64]) {
        let d = y.len();
        for i in 0..self.base.len() {
            self.eval_into(y, a, z, i, &mut out[i * d..(i + 1) * d]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadTerm {
    pub i: usize,
    pub j: usize,
    pub c: f64,
}

/// Scalar polynomial-growth coefficient
/// `F(u, i) = offset[i] + linear·u + Σ c u_i u_j`, where `u = (y, a, z)` for
/// the running reward and `u = (y, z)` for the terminal reward.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardSpec {
    #[serde(default)]
    pub offset: Vec<f64>,
    #[serde(default)]
    pub linear: Vec<f64>,
    #[serde(default)]
    pub quad: Vec<QuadTerm>,
    #[serde(default)]
    pub stats: Vec<StatSpec>,
}

impl RewardSpec {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Same value `c` in every regime, no other dependence.
    pub fn constant(c: f64, n_states: usize) -> Self {
        Self { offset: vec![c; n_states], ..Self::default() }
    }

    fn validate(&self, name: &str, n: usize, u_len: usize, y_only: bool, d: usize, big_d: usize) -> Result<(), ModelError> {
        if !self.offset.is_empty() && self.offset.len() != n {
            return Err(ModelError::DimensionMismatch(format!("{name}.offset must have length {n}")));
        }
        let total = u_len + self.stats.len();
        if self.linear.len() > total {
            return Err(ModelError::DimensionMismatch(format!("{name}.linear longer than {total} inputs")));
        }
        if self.quad.iter().any(|q| q.i >= total || q.j >= total) {
            return Err(ModelError::DimensionMismatch(format!("{name}.quad index beyond {total} inputs")));
        }
        for s in &self.stats {
            s.check_dims(d, big_d, y_only)?;
        }
        Ok(())
    }

    fn stat_offset(&self, u_len: usize) -> usize {
        u_len
    }

    pub fn reads_measure(&self, u_len: usize) -> bool {
        let off = self.stat_offset(u_len);
        self.linear.iter().skip(off).any(|&c| c != 0.0) || self.quad.iter().any(|q| q.c != 0.0 && (q.i >= off || q.j >= off))
    }

    pub fn is_zero(&self) -> bool {
        self.offset.iter().all(|&c| c == 0.0) && self.linear.iter().all(|&c| c == 0.0) && self.quad.iter().all(|q| q.c == 0.0)
    }

    fn input(u: &[f64], z: &[f64], idx: usize) -> f64 {
        if idx < u.len() {
            u[idx]
        } else {
            z[idx - u.len()]
        }
    }

    /// Part of the value that does not depend on the regime.
    pub fn eval_shared(&self, u: &[f64], z: &[f64]) -> f64 {
        let mut v = 0.0;
        for (idx, c) in self.linear.iter().enumerate() {
            if *c != 0.0 {
                v += c * Self::input(u, z, idx);
            }
        }
        for q in &self.quad {
            v += q.c * Self::input(u, z, q.i) * Self::input(u, z, q.j);
        }
        v
    }

    pub fn offset(&self, regime: usize) -> f64 {
        self.offset.get(regime).copied().unwrap_or(0.0)
    }

    pub fn eval(&self, u: &[f64], z: &[f64], regime: usize) -> f64 {
        self.offset(regime) + self.eval_shared(u, z)
    }

    /// `⟨x, F(u, z, ·)⟩`.
    pub fn pair_with(&self, x: &[f64], u: &[f64], z: &[f64]) -> f64 {
        let shared = self.eval_shared(u, z);
        x.iter().enumerate().map(|(i, xi)| xi * (self.offset(i) + shared)).sum()
    }

    /// Highest polynomial degree in the first `d` inputs (the `y` block).
    pub fn y_degree(&self, d: usize) -> u32 {
        let lin = self.linear.iter().take(d).any(|&c| c != 0.0) as u32;
        let quad = self
            .quad
            .iter()
            .filter(|q| q.c != 0.0)
            .map(|q| (q.i < d) as u32 + (q.j < d) as u32)
            .max()
            .unwrap_or(0);
        lin.max(quad)
    }
}

/// Observation volatility, invertible for every `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum SigmaSpec {
    Constant { matrix: Vec<Vec<f64>> },
    /// `diag(base_k + amp_k · tanh(y_k))` with `base_k > |amp_k|`.
    Diagonal { base: Vec<f64>, #[serde(default)] amp: Vec<f64> },
}

impl SigmaSpec {
    pub fn identity(d: usize) -> Self {
        SigmaSpec::Constant { matrix: identity(d) }
    }

    pub fn diag(values: Vec<f64>) -> Self {
        SigmaSpec::Diagonal { base: values, amp: Vec::new() }
    }

    fn validate(&self, d: usize) -> Result<(), ModelError> {
        match self {
            SigmaSpec::Constant { matrix } => {
                check_shape("sigma.matrix", matrix, d, d)?;
                if matrix.is_empty() {
                    return Err(ModelError::DimensionMismatch("sigma.matrix is required".into()));
                }
                let m = DMatrix::from_fn(d, d, |i, j| matrix[i][j]);
                let det = m.determinant();
                if !det.is_finite() || det.abs() < 1e-14 {
                    return Err(ModelError::SingularSigma(format!("determinant {det}")));
                }
            }
            SigmaSpec::Diagonal { base, amp } => {
                if base.len() != d || (!amp.is_empty() && amp.len() != d) {
                    return Err(ModelError::DimensionMismatch(format!("sigma diagonal must have length {d}")));
                }
                for k in 0..d {
                    let a = amp.get(k).copied().unwrap_or(0.0);
                    if !(base[k].abs() > a.abs()) {
                        return Err(ModelError::SingularSigma(format!("entry {k} can vanish")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn is_constant(&self) -> bool {
        match self {
            SigmaSpec::Constant { .. } => true,
            SigmaSpec::Diagonal { amp, .. } => amp.iter().all(|&a| a == 0.0),
        }
    }

    /// `σ(y)` as a row-major `d x d` buffer.
    pub fn eval_into(&self, y: &[f64], out: &mut [f64]) {
        let d = y.len();
        match self {
            SigmaSpec::Constant { matrix } => {
                for i in 0..d {
                    out[i * d..(i + 1) * d].copy_from_slice(&matrix[i]);
                }
            }
            SigmaSpec::Diagonal { base, amp } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..d {
                    out[k * d + k] = base[k] + amp.get(k).copied().unwrap_or(0.0) * y[k].tanh();
                }
            }
        }
    }

    /// `out = σ(y) v`.
    pub fn apply(&self, y: &[f64], v: &[f64], out: &mut [f64]) {
        let d = y.len();
        match self {
            SigmaSpec::Constant { matrix } => {
                for i in 0..d {
                    out[i] = matrix[i].iter().zip(v).map(|(m, x)| m * x).sum();
                }
            }
            SigmaSpec::Diagonal { base, amp } => {
                for k in 0..d {
                    out[k] = (base[k] + amp.get(k).copied().unwrap_or(0.0) * y[k].tanh()) * v[k];
                }
            }
        }
    }
}

/// Growth exponents `p, r, q, ℓ` and `χ(z) = z^chi_exponent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthParams {
    pub p: f64,
    pub r: f64,
    pub q: f64,
    pub ell: f64,
    #[serde(default = "default_chi")]
    pub chi_exponent: f64,
}

fn default_chi() -> f64 {
    1.0
}

impl Default for GrowthParams {
    fn default() -> Self {
        Self { p: 2.0, r: 4.0, q: 2.0, ell: 2.0, chi_exponent: 2.0 }
    }
}

/// Full problem description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub dim_d: usize,
    pub regime: RegimeModel,
    pub controls: ControlSpace,
    pub h: HSpec,
    pub f: RewardSpec,
    pub g: RewardSpec,
    pub sigma: SigmaSpec,
    pub growth: GrowthParams,
    pub y0: Vec<f64>,
}

impl ModelSpec {
    pub fn n_states(&self) -> usize {
        self.regime.n_states()
    }

    pub fn control_dim(&self) -> usize {
        self.controls.dim()
    }

    /// Length of the non-statistic input block of `f`: `(y, a)`.
    pub fn f_input_len(&self) -> usize {
        self.dim_d + self.control_dim()
    }

    /// True iff `h`, `f` or `g` reads a statistic of the `(y, a)`-law.
    pub fn is_mean_field(&self) -> bool {
        self.h.reads_measure() || self.f.reads_measure(self.f_input_len()) || self.g.reads_measure(self.dim_d)
    }

    /// Dimension checks, boundedness of `h`, invertibility of `σ`.
    pub fn validate(&self) -> Result<(), ModelError> {
        let (n, d, big_d) = (self.n_states(), self.dim_d, self.control_dim());
        if d == 0 {
            return Err(ModelError::DimensionMismatch("observation dimension must be positive".into()));
        }
        self.controls.validate()?;
        if self.y0.len() != d || self.y0.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::DimensionMismatch(format!("y0 must be {d} finite values")));
        }
        self.h.validate(n, d, &self.controls)?;
        self.f.validate("f", n, d + big_d, false, d, big_d)?;
        self.g.validate("g", n, d, true, d, big_d)?;
        self.sigma.validate(d)?;
        Ok(())
    }
}

/// Checks the growth exponents and the statistic orders used by `h`.
pub fn validate_growth(spec: &ModelSpec) -> Result<(), ModelError> {
    let g = &spec.growth;
    let fail = |msg: String| Err(ModelError::GrowthIncompatible(msg));
    if g.p < 2.0 {
        return fail(format!("p = {} < 2", g.p));
    }
    if g.r < 2.0 {
        return fail(format!("r = {} < 2", g.r));
    }
    if g.q < 1.0 {
        return fail(format!("q = {} < 1", g.q));
    }
    if g.ell < 0.0 || g.chi_exponent < 0.0 {
        return fail("ell and chi_exponent must be nonnegative".into());
    }
    let cap = g.r * (1.0 - 1.0 / g.p);
    if g.q > cap + 1e-12 {
        return fail(format!("q = {} > r(1 - 1/p) = {}", g.q, cap));
    }
    if g.ell > cap + 1e-12 {
        return fail(format!("ell = {} > r(1 - 1/p) = {}", g.ell, cap));
    }
    for s in &spec.h.stats {
        let m = s.order();
        if g.q < m {
            return fail(format!("q = {} < statistic order {}", g.q, m));
        }
        if g.r < 2.0 * m {
            return fail(format!("r = {} < 2 x statistic order {}", g.r, m));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiquidationParams {
    pub eps: f64,
    pub gamma_vol: f64,
    pub nu: f64,
    pub eta_cost: f64,
    pub theta_pen: f64,
    pub regime_drifts: Vec<f64>,
    #[serde(rename = "I0")]
    pub i0: f64,
    #[serde(rename = "P0_init")]
    pub p0_init: f64,
    pub alpha_max: f64,
}

impl LiquidationParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::BadLiquidation(m.into()));
        if !(self.eps > 0.0) || !(self.gamma_vol > 0.0) {
            return bad("eps and gamma_vol must be positive");
        }
        if !(self.alpha_max > 0.0) {
            return bad("alpha_max must be positive");
        }
        if self.nu < 0.0 || self.eta_cost < 0.0 || self.theta_pen < 0.0 {
            return bad("nu, eta_cost, theta_pen must be nonnegative");
        }
        if self.regime_drifts.is_empty() {
            return bad("regime_drifts must be non-empty");
        }
        Ok(())
    }
}

/// Optimal liquidation with permanent crowd impact. `Y = (I, P)`, one
/// control (trading rate) in `[0, alpha_max]`.
pub fn build_liquidation(params: &LiquidationParams, regime: RegimeModel) -> Result<ModelSpec, ModelError> {
    params.validate()?;
    let n = regime.n_states();
    if params.regime_drifts.len() != n {
        return Err(ModelError::DimensionMismatch(format!(
            "{} regime drifts for {} states",
            params.regime_drifts.len(),
            n
        )));
    }
    let (eps, gam) = (params.eps, params.gamma_vol);
    let base = params.regime_drifts.iter().map(|m| vec![0.0, m / gam]).collect();
    let (stats, w_stat) = if params.nu > 0.0 {
        (vec![StatSpec::Mean { var: Var::A(0) }], vec![vec![0.0], vec![-params.nu / gam]])
    } else {
        (Vec::new(), Vec::new())
    };
    let h = HSpec {
        base,
        scale: vec![1.0, 1.0],
        activation: Activation::Identity,
        stats,
        w_stat,
        w_control: vec![vec![-1.0 / eps], vec![0.0]],
        w_obs: Vec::new(),
        bound: None,
    };
    // u = (I, P, a)
    let mut f_quad = vec![QuadTerm { i: 1, j: 2, c: 1.0 }];
    if params.eta_cost != 0.0 {
        f_quad.push(QuadTerm { i: 2, j: 2, c: -params.eta_cost });
    }
    let f = RewardSpec { quad: f_quad, ..RewardSpec::default() };
    let g = if params.theta_pen != 0.0 {
        RewardSpec { quad: vec![QuadTerm { i: 0, j: 0, c: -params.theta_pen }], ..RewardSpec::default() }
    } else {
        RewardSpec::zero()
    };
    let spec = ModelSpec {
        dim_d: 2,
        regime,
        controls: ControlSpace::new(vec![0.0], vec![params.alpha_max], vec![0.0])?,
        h,
        f,
        g,
        sigma: SigmaSpec::diag(vec![eps, gam]),
        growth: GrowthParams { p: 2.0, r: 4.0, q: 2.0, ell: 2.0, chi_exponent: 1.0 },
        y0: vec![params.i0, params.p0_init],
    };
    spec.validate()?;
    Ok(spec)
}
