use serde::{Deserialize, Serialize};

pub const MAX_DEGREE: u32 = 4;

/// `coef · Π x_i^{x_pow[i]} · Π y_k^{y_pow[k]}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub x_pow: Vec<u32>,
    pub y_pow: Vec<u32>,
}

impl Monomial {
    fn degree(&self) -> u32 {
        self.x_pow.iter().chain(&self.y_pow).sum()
    }

    fn pow_at(&self, v: usize, n: usize) -> u32 {
        if v < n {
            self.x_pow[v]
        } else {
            self.y_pow[v - n]
        }
    }

    /// Value with the exponent of variable `v` lowered by `k` and the falling
    /// factorial folded in (so `k = 1` gives `∂_v`).
    fn eval_lowered(&self, pt: &[f64], n: usize, lowered: &[(usize, u32)]) -> f64 {
        let mut val = self.coef;
        for (v, &z) in pt.iter().enumerate() {
            let mut e = self.pow_at(v, n);
            for &(lv, k) in lowered {
                if lv == v {
                    for _ in 0..k {
                        if e == 0 {
                            return 0.0;
                        }
                        val *= e as f64;
                        e -= 1;
                    }
                }
            }
            if e > 0 {
                val *= z.powi(e as i32);
            }
        }
        val
    }
}

/// Polynomial in `(x, y)` of degree at most four.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    /// `⟨x, 1⟩`
    pub fn mass(n: usize, d: usize) -> Self {
        let terms = (0..n)
            .map(|i| {
                let mut x_pow = vec![0; n];
                x_pow[i] = 1;
                Monomial { coef: 1.0, x_pow, y_pow: vec![0; d] }
            })
            .collect();
        Self { terms }
    }

    /// `⟨x, 1⟩ y_comp^power`
    pub fn weighted_y_power(n: usize, d: usize, comp: usize, power: u32) -> Self {
        let mut p = Self::mass(n, d);
        for t in &mut p.terms {
            t.y_pow[comp] = power;
        }
        p
    }

    /// `y_comp^power`
    pub fn y_power(n: usize, d: usize, comp: usize, power: u32) -> Self {
        let mut y_pow = vec![0; d];
        y_pow[comp] = power;
        Self { terms: vec![Monomial { coef: 1.0, x_pow: vec![0; n], y_pow }] }
    }

    pub fn check_dims(&self, n: usize, d: usize) -> Result<(), String> {
        for (k, t) in self.terms.iter().enumerate() {
            if t.x_pow.len() != n || t.y_pow.len() != d {
                return Err(format!("monomial {k} has exponents for ({}, {}) variables", t.x_pow.len(), t.y_pow.len()));
            }
            if t.degree() > MAX_DEGREE {
                return Err(format!("monomial {k} has degree {} > {MAX_DEGREE}", t.degree()));
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut pt = Vec::with_capacity(x.len() + y.len());
        pt.extend_from_slice(x);
        pt.extend_from_slice(y);
        self.eval_flat(&pt, x.len())
    }

    /// `pt = (x, y)` with `x` of length `n`.
    pub fn eval_flat(&self, pt: &[f64], n: usize) -> f64 {
        self.terms.iter().map(|t| t.eval_lowered(pt, n, &[])).sum()
    }

    pub fn grad_flat(&self, pt: &[f64], n: usize) -> Vec<f64> {
        (0..pt.len()).map(|v| self.terms.iter().map(|t| t.eval_lowered(pt, n, &[(v, 1)])).sum()).collect()
    }

    /// Row-major `(n+d) x (n+d)`.
    pub fn hess_flat(&self, pt: &[f64], n: usize) -> Vec<f64> {
        let dim = pt.len();
        let mut h = vec![0.0; dim * dim];
        for v in 0..dim {
            for w in v..dim {
                let lowered: &[(usize, u32)] = if v == w { &[(v, 2)] } else { &[(v, 1), (w, 1)] };
                let val: f64 = self.terms.iter().map(|t| t.eval_lowered(pt, n, lowered)).sum();
                h[v * dim + w] = val;
                h[w * dim + v] = val;
            }
        }
        h
    }
}
