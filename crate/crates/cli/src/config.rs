//! Experiment configuration: parsing, overrides, canonical form and hash.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use zmfc_core::model::{
    build_liquidation, validate_growth, ControlSpace, GrowthParams, HSpec, LiquidationParams, ModelSpec, RegimeModel, RewardSpec, SigmaSpec,
};
use zmfc_core::optimize::{twap_policy, LiquidationFamily, NelderMeadOpts, OptMethod, Policy, PolicyForm};
use zmfc_core::sim::{InitialCondition, SimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub regime: RegimeModel,
    pub scenario: Scenario,
    #[serde(default)]
    pub growth: Option<GrowthParams>,
    pub simulation: SimConfig,
    #[serde(default = "deterministic")]
    pub initial: InitialCondition,
    #[serde(default)]
    pub policy: Option<PolicySpec>,
    #[serde(default)]
    pub checks: Checks,
    #[serde(default)]
    pub optimize: OptimizeSpec,
}

fn deterministic() -> InitialCondition {
    InitialCondition::Deterministic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum Scenario {
    Custom(CustomScenario),
    Liquidation(LiquidationParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomScenario {
    pub dim_d: usize,
    pub controls: ControlSpace,
    pub h: HSpec,
    #[serde(default)]
    pub f: RewardSpec,
    #[serde(default)]
    pub g: RewardSpec,
    pub sigma: SigmaSpec,
    pub y0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    #[serde(flatten)]
    pub form: PolicyForm,
    pub params: Vec<f64>,
}

/// Tolerances and study sizes used by the check commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Checks {
    /// Standard errors allowed for the mean filter mass.
    pub mass_z: f64,
    /// Standard errors allowed for filter means against the regime marginal.
    pub marginal_z: f64,
    /// Coupled step sizes used to bound the discretization bias of the
    /// filter means, coarsest first.
    pub dt_ladder: Vec<f64>,
    /// Standard errors allowed between separated and original rewards.
    pub equivalence_z: f64,
    /// Add a bias allowance estimated from a coupled run at `2 dt`.
    pub equivalence_bias: bool,
    /// Step sizes compared by the Itô residual study, coarsest first.
    pub ito_dt_ladder: Vec<f64>,
    /// Independent seeds (starting at the simulation seed) in the study.
    pub ito_seeds: usize,
    /// Particle count for the study; defaults to the simulation's.
    pub ito_particles: Option<usize>,
    /// Observation component used by the moment test functions.
    pub ito_component: usize,
    pub mass_generator_tol: f64,
    pub terminal_tol: f64,
    /// Split times for the restart check; defaults to `t0`, the grid
    /// midpoint and `T`.
    pub split_points: Option<Vec<f64>>,
    pub picard_k_max: usize,
    pub picard_tol: f64,
}

impl Default for Checks {
    fn default() -> Self {
        Self {
            mass_z: 5.0,
            marginal_z: 3.0,
            dt_ladder: vec![4e-3, 2e-3, 1e-3],
            equivalence_z: 3.0,
            equivalence_bias: true,
            ito_dt_ladder: vec![2e-3, 1e-3],
            ito_seeds: 8,
            ito_particles: None,
            ito_component: 0,
            mass_generator_tol: 1e-12,
            terminal_tol: 1e-12,
            split_points: None,
            picard_k_max: 3,
            picard_tol: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeSpec {
    pub method: OptMethod,
    /// Search class for the liquidation scenario. Custom scenarios optimize
    /// the parameters of `policy` directly.
    pub family: LiquidationFamily,
}

impl Default for OptimizeSpec {
    fn default() -> Self {
        Self { method: OptMethod::NelderMead(NelderMeadOpts::default()), family: LiquidationFamily::Schedule { buckets: 4 } }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub particles: Option<usize>,
    pub dt: Option<f64>,
}

impl Config {
    /// Reads a config file, or the `config_echo` of a run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        if let Some(echo) = value.get("config_echo") {
            return Ok(serde_json::from_value(echo.clone())?);
        }
        Ok(serde_json::from_str(text)?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.simulation.seed = s;
        }
        if let Some(m) = o.particles {
            self.simulation.n_particles = m;
        }
        if let Some(dt) = o.dt {
            self.simulation.dt = dt;
        }
    }

    /// Resolved config as JSON with sorted keys.
    pub fn canonical(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn canonical_string(&self) -> String {
        serde_json::to_string(&self.canonical()).expect("value serializes")
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical_string().as_bytes())
    }

    /// Builds and validates the model, growth conditions included.
    pub fn model(&self) -> Result<ModelSpec> {
        let mut model = match &self.scenario {
            Scenario::Custom(c) => ModelSpec {
                dim_d: c.dim_d,
                regime: self.regime.clone(),
                controls: c.controls.clone(),
                h: c.h.clone(),
                f: c.f.clone(),
                g: c.g.clone(),
                sigma: c.sigma.clone(),
                growth: GrowthParams::default(),
                y0: c.y0.clone(),
            },
            Scenario::Liquidation(p) => build_liquidation(p, self.regime.clone())?,
        };
        if let Some(g) = &self.growth {
            model.growth = g.clone();
        }
        model.validate()?;
        validate_growth(&model)?;
        Ok(model)
    }

    /// The configured policy; TWAP for liquidation and the reference control
    /// otherwise when none is given.
    pub fn policy(&self, model: &ModelSpec) -> Result<Policy> {
        let (n, d) = (model.n_states(), model.dim_d);
        if let Some(spec) = &self.policy {
            return Ok(Policy::new(spec.form.clone(), spec.params.clone(), model.controls.clone(), n, d)?);
        }
        match &self.scenario {
            Scenario::Liquidation(p) => Ok(twap_policy(p, self.simulation.horizon - self.simulation.t0)?),
            Scenario::Custom(_) => Ok(Policy::constant(model.controls.reference.clone(), model.controls.clone(), n, d)?),
        }
    }

    pub fn sim(&self) -> Result<SimConfig> {
        let cfg = self.simulation.clone();
        if let Err(e) = cfg.validate() {
            bail!(e);
        }
        Ok(cfg)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "regime": {"rates": [[-1, 1], [1, -1]], "initial": [1, 0]},
        "scenario": {"kind": "custom", "dim_d": 1,
            "controls": {"lower": [0], "upper": [1], "reference": [0]},
            "h": {"base": [[1], [-1]]},
            "sigma": {"form": "constant", "matrix": [[1]]},
            "y0": [0]},
        "simulation": {"t0": 0, "T": 1, "dt": 0.01, "n_particles": 10, "seed": 1}
    }"#;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = Config::parse(MINIMAL).unwrap();
        let permuted = r#"{
            "simulation": {"seed": 1, "n_particles": 10, "dt": 0.01, "T": 1, "t0": 0},
            "scenario": {"y0": [0], "sigma": {"matrix": [[1]], "form": "constant"},
                "h": {"base": [[1], [-1]]},
                "controls": {"reference": [0], "upper": [1], "lower": [0]},
                "dim_d": 1, "kind": "custom"},
            "regime": {"initial": [1, 0], "rates": [[-1, 1], [1, -1]]}
        }"#;
        let b = Config::parse(permuted).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.apply(&Overrides { seed: Some(2), ..Default::default() });
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn canonical_round_trip() {
        let a = Config::parse(MINIMAL).unwrap();
        let b = Config::parse(&a.canonical_string()).unwrap();
        assert_eq!(a, b);
        let manifest = format!(r#"{{"config_echo": {}, "seed": 1}}"#, a.canonical_string());
        assert_eq!(Config::parse(&manifest).unwrap(), a);
    }

    #[test]
    fn bad_rates_are_named() {
        let bad = MINIMAL.replace("[[-1, 1], [1, -1]]", "[[1, -1], [1, -1]]");
        let err = format!("{:#}", Config::parse(&bad).unwrap_err());
        assert!(err.contains("NegativeRate"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn growth_is_checked() {
        let mut cfg = Config::parse(MINIMAL).unwrap();
        cfg.model().unwrap();
        cfg.growth = Some(GrowthParams { p: 2.0, r: 4.0, q: 3.0, ell: 2.0, chi_exponent: 1.0 });
        let err = cfg.model().unwrap_err().to_string();
        assert!(err.contains("GrowthIncompatible"), "{err}");
    }
}
