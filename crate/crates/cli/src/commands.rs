//! One function per subcommand. Each returns a [`Report`] and never
//! touches the filesystem.

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use zmfc_core::hjb::{matched_terminal_fn, terminal_residual, CylindricalTestFn, HjbError, ItoAccumulator};
use zmfc_core::measures::{mean_and_se, ParticleCloud};
use zmfc_core::model::ModelSpec;
use zmfc_core::optimize::{cross_entropy, nelder_mead, optimize_liquidation, OptError, OptMethod, OptResult, Policy};
use zmfc_core::sim::{
    estimate_reward, flow_restart_check, picard_solve, simulate_original, simulate_separated, write_trajectory_csv, FlowSource, InitialCondition,
    SimConfig, Stepper,
};

use crate::config::{Config, Scenario};
use crate::{Cell, Report, Table};

/// Levels below this are treated as already converged by the ladder test.
const LADDER_FLOOR: f64 = 1e-12;

/// Absolute slack for rounding when a filter mean is exact, as with `h = 0`
/// where many chain steps are compared with one closed-form marginal.
const ROUNDING_FLOOR: f64 = 1e-10;

fn descending(ladder: &[f64]) -> Vec<f64> {
    let mut v = ladder.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v.dedup();
    v
}

fn quiet(cfg: &SimConfig) -> SimConfig {
    let mut c = cfg.clone();
    c.record_every = usize::MAX;
    c
}

pub fn validate(cfg: &Config) -> Result<Report> {
    let model = cfg.model()?;
    let policy = cfg.policy(&model)?;
    let sim = cfg.sim()?;
    let summary = json!({
        "n_states": model.n_states(),
        "d": model.dim_d,
        "D": model.control_dim(),
        "mean_field": model.is_mean_field(),
        "h_bound": model.h.bound(&model.controls),
        "policy_params": policy.params(),
        "n_steps": sim.n_steps(),
        "config_hash": format!("{:016x}", cfg.hash()),
    });
    Ok(Report { command: "validate".into(), tables: Vec::new(), summary, pass: true, files: Vec::new() })
}

/// Mean absolute level differences of the filter components on a coupled
/// ladder. They bound the change in the filter means between levels.
struct Ladder {
    table: Table,
    /// Per component, `max_k 2 S_k / dt_k`.
    constants: Vec<f64>,
    decreasing: bool,
}

fn marginal_ladder(model: &ModelSpec, policy: &Policy, sim: &SimConfig, init: &InitialCondition, ladder: &[f64]) -> Result<Ladder> {
    let n = model.n_states();
    let mut table = Table::new("filter_ladder", &["dt_coarse", "dt_fine", "j", "strong_diff"]);
    let mut constants = vec![0.0; n];
    let mut decreasing = true;
    if ladder.len() < 2 {
        return Ok(Ladder { table, constants, decreasing });
    }
    let finest = *ladder.last().unwrap();
    let mut finals = Vec::with_capacity(ladder.len());
    for &dt in ladder {
        let mut c = quiet(sim);
        c.dt = dt;
        c.noise_dt = Some(finest);
        c.validate().with_context(|| format!("ladder level dt = {dt}"))?;
        finals.push(simulate_separated(model, policy, &c, init)?.last);
    }
    let mut prev: Option<Vec<f64>> = None;
    for k in 0..ladder.len() - 1 {
        let (a, b) = (&finals[k].x, &finals[k + 1].x);
        let m = finals[k].len() as f64;
        let s: Vec<f64> = (0..n)
            .map(|j| {
                let abs: f64 = a.iter().zip(b).skip(j).step_by(n).map(|(u, v)| (u - v).abs()).sum();
                abs / m
            })
            .collect();
        for j in 0..n {
            table.push(vec![ladder[k].into(), ladder[k + 1].into(), j.into(), s[j].into()]);
            constants[j] = f64::max(constants[j], 2.0 * s[j] / ladder[k]);
            if let Some(p) = &prev {
                if !(s[j] < p[j] || p[j] <= LADDER_FLOOR) {
                    decreasing = false;
                }
            }
        }
        prev = Some(s);
    }
    Ok(Ladder { table, constants, decreasing })
}

pub fn filter_check(cfg: &Config) -> Result<Report> {
    let model = cfg.model()?;
    let policy = cfg.policy(&model)?;
    let sim = cfg.sim()?;
    let checks = &cfg.checks;
    let n = model.n_states();

    let traj = simulate_separated(&model, &policy, &sim, &cfg.initial)?;
    let ladder = marginal_ladder(&model, &policy, &sim, &cfg.initial, &descending(&checks.dt_ladder))?;

    let mut filter = Table::new("filter", &["t", "j", "mean_xj", "regime_marginal_j", "se", "pass"]);
    let mut mass = Table::new("mass", &["t", "mean_mass", "se", "pass"]);
    let mut all_rows = true;
    let mut worst_marginal: f64 = 0.0;
    let mut worst_mass: f64 = 0.0;
    for cloud in &traj.clouds {
        let p = model.regime.marginal(cloud.t - sim.t0);
        for (j, pj) in p.iter().enumerate() {
            let (mean, se) = cloud.component_stats(j);
            let err = (mean - pj).abs();
            let ok = err <= checks.marginal_z * se + ladder.constants[j] * sim.dt + ROUNDING_FLOOR;
            worst_marginal = worst_marginal.max(err);
            all_rows &= ok;
            filter.push(vec![cloud.t.into(), j.into(), mean.into(), (*pj).into(), se.into(), ok.into()]);
        }
        let (m, se) = cloud.mass_stats();
        let ok = (m - 1.0).abs() <= checks.mass_z * se + ROUNDING_FLOOR;
        worst_mass = worst_mass.max((m - 1.0).abs());
        all_rows &= ok;
        mass.push(vec![cloud.t.into(), m.into(), se.into(), ok.into()]);
    }
    let pass = all_rows && traj.negative_count == 0 && ladder.decreasing;
    let summary = json!({
        "pass": pass,
        "negative_count": traj.negative_count,
        "n_states": n,
        "max_marginal_error": worst_marginal,
        "max_mass_error": worst_mass,
        "bias_constants": ladder.constants,
        "bias_allowance": ladder.constants.iter().map(|c| c * sim.dt).collect::<Vec<_>>(),
        "ladder_decreasing": ladder.decreasing,
    });
    Ok(Report { command: "filter-check".into(), tables: vec![filter, mass, ladder.table], summary, pass, files: Vec::new() })
}

pub fn equivalence_check(cfg: &Config) -> Result<Report> {
    let model = cfg.model()?;
    let policy = cfg.policy(&model)?;
    let sim = cfg.sim()?;
    let checks = &cfg.checks;

    let sep = estimate_reward(&model, &policy, &sim)?;
    let (j_o, se_o) = simulate_original(&model, &policy, &sim)?.estimate();

    let mut bias = 0.0;
    let mut coarse_values = Value::Null;
    if checks.equivalence_bias {
        let mut coarse = sim.clone();
        coarse.noise_dt = Some(sim.fine_dt());
        coarse.dt = 2.0 * sim.dt;
        if coarse.validate().is_ok() {
            let sep_c = estimate_reward(&model, &policy, &coarse)?;
            let (j_oc, _) = simulate_original(&model, &policy, &coarse)?.estimate();
            bias = (sep_c.j_hat - sep.j_hat).abs() + (j_oc - j_o).abs();
            coarse_values = json!({"J_separated": sep_c.j_hat, "J_original": j_oc});
        }
    }
    let combined = (sep.stderr.powi(2) + se_o.powi(2)).sqrt();
    let diff = (sep.j_hat - j_o).abs();
    let z = if combined > 0.0 { diff / combined } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
    let pass = diff <= checks.equivalence_z * combined + bias;

    let mut table = Table::new("equivalence", &["J_separated", "se_s", "J_original", "se_o", "z_score", "pass"]);
    table.push(vec![sep.j_hat.into(), sep.stderr.into(), j_o.into(), se_o.into(), z.into(), pass.into()]);
    let summary = json!({
        "pass": pass,
        "J_separated": sep.j_hat,
        "se_s": sep.stderr,
        "J_original": j_o,
        "se_o": se_o,
        "z_score": z,
        "bias_allowance": bias,
        "tolerance": checks.equivalence_z * combined + bias,
        "coarse": coarse_values,
    });
    Ok(Report { command: "equivalence-check".into(), tables: vec![table], summary, pass, files: Vec::new() })
}

/// One seed of the Itô study at one level.
struct ItoRun {
    signed: Vec<f64>,
    max_mass_generator: f64,
    terminal: Option<f64>,
    negatives: usize,
}

fn ito_run(model: &ModelSpec, policy: &Policy, c: &SimConfig, init: &InitialCondition, fns: &[CylindricalTestFn], terminal: Option<&CylindricalTestFn>) -> Result<ItoRun> {
    let stepper = Stepper::new(model, policy, c)?;
    let start = stepper.initial_cloud(init);
    let mut accs: Vec<ItoAccumulator> = fns.iter().map(|v| ItoAccumulator::new(v, model)).collect();
    let (last, negatives) = stepper.run_observed(start, c.n_steps(), FlowSource::Live, |cloud: &ParticleCloud| -> Result<(), HjbError> {
        for a in accs.iter_mut() {
            a.observe(cloud)?;
        }
        Ok(())
    })?;
    let max_mass_generator = accs[0].max_abs_generator();
    let signed = accs.into_iter().map(|a| a.finish().signed).collect();
    let terminal = terminal.map(|w| terminal_residual(w, &last, model)).transpose()?;
    Ok(ItoRun { signed, max_mass_generator, terminal, negatives })
}

pub fn ito_check(cfg: &Config) -> Result<Report> {
    let model = cfg.model()?;
    let policy = cfg.policy(&model)?;
    let sim = cfg.sim()?;
    let checks = &cfg.checks;
    let (n, d) = (model.n_states(), model.dim_d);
    if checks.ito_component >= d {
        bail!("ito_component {} out of range for d = {d}", checks.ito_component);
    }
    if checks.ito_seeds == 0 {
        bail!("ito_seeds must be positive");
    }
    let ladder = descending(&checks.ito_dt_ladder);
    if ladder.is_empty() {
        bail!("ito_dt_ladder is empty");
    }
    let reference = ladder.last().unwrap() / 2.0;
    let mut levels = ladder.clone();
    levels.push(reference);

    let names = ["mass", "weighted_y_moment_1", "weighted_y_moment_2"];
    let fns = [
        CylindricalTestFn::mass(n, d),
        CylindricalTestFn::weighted_y_moment(n, d, checks.ito_component, 1),
        CylindricalTestFn::weighted_y_moment(n, d, checks.ito_component, 2),
    ];
    let terminal_fn = matched_terminal_fn(&model).ok();
    let m = checks.ito_particles.unwrap_or(sim.n_particles);

    // signed[level][fn][seed]
    let mut signed = vec![vec![Vec::with_capacity(checks.ito_seeds); fns.len()]; levels.len()];
    let mut mass_generator: f64 = 0.0;
    let mut terminal: Option<f64> = None;
    let mut negatives = 0;
    for s in 0..checks.ito_seeds {
        for (li, &dt) in levels.iter().enumerate() {
            let mut c = quiet(&sim);
            c.seed = sim.seed.wrapping_add(s as u64);
            c.n_particles = m;
            c.dt = dt;
            c.noise_dt = Some(reference);
            c.validate().with_context(|| format!("Itô level dt = {dt}"))?;
            let wants_terminal = li == levels.len() - 1;
            let run = ito_run(&model, &policy, &c, &cfg.initial, &fns, terminal_fn.as_ref().filter(|_| wants_terminal))?;
            for (f, r) in run.signed.into_iter().enumerate() {
                signed[li][f].push(r);
            }
            mass_generator = mass_generator.max(run.max_mass_generator);
            if let Some(t) = run.terminal {
                terminal = Some(terminal.unwrap_or(0.0).max(t));
            }
            negatives += run.negatives;
        }
    }

    let refs = &signed[levels.len() - 1];
    let mut table = Table::new("ito", &["test_fn_id", "dt", "M", "residual", "stderr"]);
    let mut errors = vec![Vec::new(); fns.len()];
    for (li, &dt) in ladder.iter().enumerate() {
        for (f, name) in names.iter().enumerate() {
            let r = &signed[li][f];
            let sq: f64 = r.iter().zip(&refs[f]).map(|(a, b)| (a - b) * (a - b)).sum();
            let e = (sq / r.len() as f64).sqrt();
            let (_, se) = mean_and_se(r);
            errors[f].push(e);
            table.push(vec![(*name).into(), dt.into(), m.into(), e.into(), se.into()]);
        }
    }
    let finest = *ladder.last().unwrap();
    table.push(vec!["mass_generator".into(), finest.into(), m.into(), mass_generator.into(), 0.0.into()]);
    if let Some(t) = terminal {
        table.push(vec!["terminal".into(), reference.into(), m.into(), t.into(), 0.0.into()]);
    }

    let decreasing: Vec<bool> = errors.iter().map(|e| e.windows(2).all(|w| w[1] < w[0])).collect();
    let pass = decreasing.iter().all(|b| *b)
        && mass_generator <= checks.mass_generator_tol
        && terminal.is_none_or(|t| t <= checks.terminal_tol)
        && negatives == 0;
    let means: Vec<Vec<f64>> = signed.iter().map(|per_fn| per_fn.iter().map(|r| mean_and_se(r).0).collect()).collect();
    let summary = json!({
        "pass": pass,
        "test_fns": names,
        "levels": levels,
        "reference_dt": reference,
        "seeds": checks.ito_seeds,
        "particles": m,
        "level_errors": errors,
        "decreasing": decreasing,
        "mean_signed_residuals": means,
        "max_abs_mass_generator": mass_generator,
        "terminal_residual": terminal,
        "negative_count": negatives,
    });
    Ok(Report { command: "ito-check".into(), tables: vec![table], summary, pass, files: Vec::new() })
}

pub fn flow_check(cfg: &Config) -> Result<Report> {
    let model = cfg.model()?;
    let policy = cfg.policy(&model)?;
    let sim = cfg.sim()?;
    let splits = match &cfg.checks.split_points {
        Some(s) => s.clone(),
        None => vec![sim.t0, sim.time_of(sim.n_steps() / 2), sim.horizon],
    };
    let mut table = Table::new("flow", &["split", "max_abs_diff", "pass"]);
    let mut pass = true;
    for s in &splits {
        let diff = flow_restart_check(&model, &policy, &quiet(&sim), *s)?;
        let ok = diff == 0.0;
        pass &= ok;
        table.push(vec![(*s).into(), diff.into(), ok.into()]);
    }
    let summary = json!({"pass": pass, "splits": splits});
    Ok(Report { command: "flow-check".into(), tables: vec![table], summary, pass, files: Vec::new() })
}

pub fn picard(cfg: &Config) -> Result<Report> {
    let model = cfg.model()?;
    let policy = cfg.policy(&model)?;
    let sim = cfg.sim()?;
    let rep = picard_solve(&model, &policy, &sim, cfg.checks.picard_k_max, cfg.checks.picard_tol)?;
    let mut table = Table::new("picard", &["iteration", "diff"]);
    for (k, d) in rep.diffs.iter().enumerate() {
        table.push(vec![(k + 1).into(), (*d).into()]);
    }
    let mean_field = model.is_mean_field();
    let pass = if !mean_field {
        rep.diffs.first().is_none_or(|d| *d == 0.0)
    } else {
        let head = &rep.diffs[..rep.diffs.len().min(3)];
        head.windows(2).all(|w| w[1] < w[0] || w[0] < cfg.checks.picard_tol)
    };
    let summary = json!({"pass": pass, "mean_field": mean_field, "diffs": rep.diffs, "converged": rep.converged});
    Ok(Report { command: "picard".into(), tables: vec![table], summary, pass, files: Vec::new() })
}

fn history_table(result: &OptResult, dim: usize) -> Table {
    let mut header = vec!["eval_id".to_string()];
    header.extend((0..dim).map(|k| format!("theta_{k}")));
    header.extend(["J_hat".to_string(), "stderr".to_string()]);
    let mut table = Table { name: "optimize".into(), header, rows: Vec::new() };
    for (i, e) in result.history.iter().enumerate() {
        let mut row: Vec<Cell> = vec![i.into()];
        row.extend(e.theta.iter().map(|v| Cell::from(*v)));
        row.extend([e.j_hat.into(), e.stderr.into()]);
        table.push(row);
    }
    table
}

fn result_summary(result: &OptResult) -> Value {
    json!({
        "theta_star": result.theta_star,
        "j_star": result.j_star,
        "j_star_stderr": result.j_star_stderr,
        "evaluations": result.evaluations,
        "termination": result.termination,
        "elite_means": result.elite_means,
    })
}

pub fn optimize(cfg: &Config) -> Result<Report> {
    let model = cfg.model()?;
    let sim = quiet(&cfg.sim()?);
    let method = &cfg.optimize.method;
    match &cfg.scenario {
        Scenario::Liquidation(params) => {
            let family = &cfg.optimize.family;
            let rep = optimize_liquidation(params, &model, &sim, family, method)?;
            let table = history_table(&rep.result, family.dim());
            let pass = rep.j_opt >= rep.j_twap;
            let summary = json!({
                "pass": pass,
                "family": family,
                "j_twap": rep.j_twap,
                "se_twap": rep.se_twap,
                "j_opt": rep.j_opt,
                "se_opt": rep.se_opt,
                "improvement": rep.improvement,
                "combined_se": rep.combined_se,
                "theta_star": rep.theta_star,
                "policy_params": rep.policy_params,
                "inventory_twap": [rep.inventory_twap.0, rep.inventory_twap.1],
                "inventory_opt": [rep.inventory_opt.0, rep.inventory_opt.1],
                "search": result_summary(&rep.result),
            });
            Ok(Report { command: "optimize".into(), tables: vec![table], summary, pass, files: Vec::new() })
        }
        Scenario::Custom(_) => {
            let base = cfg.policy(&model)?;
            let baseline = estimate_reward(&model, &base, &sim)?;
            let objective = |theta: &[f64]| -> Result<(f64, f64), OptError> {
                let p = base.with_params(theta.to_vec())?;
                let r = estimate_reward(&model, &p, &sim).map_err(|e| OptError::Objective(e.to_string()))?;
                Ok((r.j_hat, r.stderr))
            };
            let theta0 = base.params().to_vec();
            let result = match method {
                OptMethod::NelderMead(opts) => nelder_mead(objective, &theta0, opts)?,
                OptMethod::CrossEntropy { opts, init_std } => cross_entropy(objective, &theta0, &vec![*init_std; theta0.len()], opts)?,
            };
            let table = history_table(&result, theta0.len());
            let pass = result.j_star >= baseline.j_hat;
            let summary = json!({
                "pass": pass,
                "j_baseline": baseline.j_hat,
                "se_baseline": baseline.stderr,
                "j_opt": result.j_star,
                "se_opt": result.j_star_stderr,
                "improvement": result.j_star - baseline.j_hat,
                "search": result_summary(&result),
            });
            Ok(Report { command: "optimize".into(), tables: vec![table], summary, pass, files: Vec::new() })
        }
    }
}

/// Reward estimate, optionally with the recorded particle trajectory.
pub fn reward(cfg: &Config, trajectory: bool) -> Result<Report> {
    let model = cfg.model()?;
    let policy = cfg.policy(&model)?;
    let sim = cfg.sim()?;
    let est = estimate_reward(&model, &policy, &sim)?;
    let mut table = Table::new("reward", &["J_hat", "stderr"]);
    table.push(vec![est.j_hat.into(), est.stderr.into()]);
    let mut files = Vec::new();
    if trajectory {
        let traj = simulate_separated(&model, &policy, &sim, &cfg.initial)?;
        let mut buf = Vec::new();
        write_trajectory_csv(&traj, &mut buf)?;
        files.push(("trajectory.csv".to_string(), String::from_utf8(buf)?));
    }
    let summary = json!({"pass": true, "J_hat": est.j_hat, "stderr": est.stderr});
    Ok(Report { command: "reward".into(), tables: vec![table], summary, pass: true, files })
}
