//! Subcommand drivers. Every driver is deterministic in `(config, seed)`.

use std::fs;
use std::path::{Path, PathBuf};

use ope_lab::instances::{gap_radius, perturbation_delta, value_gap_lower_bound};
use ope_lab::io::{fmt_f64, write_json};
use ope_lab::{
    cme_value, confidence_bound, default_omega, detect_value_sets, discounted_confidence_bound,
    discounted_exact_value, discounted_value, exact_policy_value, fit_embeddings, likelihood_ratio, mismatch_terms,
    optimal_perturbation_direction, perturb_instance, population_profile, sample_episodes, theoretical_bound_rhs,
    BoundRhs, Instance, OmegaMethod, PerturbationSpec, PopulationProfile, TabularMdp,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Direction, ExperimentConfig};
use crate::error::{CliError, Result};

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Overrides the base seed of the config.
    pub seed: Option<u64>,
    /// Worker threads; `0` lets the pool pick.
    pub threads: usize,
}

/// Shared, immutable inputs of the seeded runs.
struct Context {
    inst: Instance,
    truth: f64,
    omega: f64,
    /// `None` when the config overrides omega.
    omega_method: Option<OmegaMethod>,
    omega_lower_estimate: bool,
    config: ExperimentConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRow {
    pub n: usize,
    pub seed: u64,
    pub v_hat: f64,
    pub v_true: f64,
    pub abs_error: f64,
    /// `None` when no bound is available (zero ridge or an unbounded feature class).
    pub bound: Option<f64>,
}

impl RunRow {
    pub fn covered(&self) -> Option<bool> {
        self.bound.map(|b| self.abs_error <= b)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvaluationReport {
    pub instance: String,
    pub setting: &'static str,
    pub horizon: Option<usize>,
    pub gamma: Option<f64>,
    pub lambda: f64,
    pub delta: f64,
    pub episodes: usize,
    pub episode_length: usize,
    pub n: usize,
    pub seed: u64,
    pub v_hat: f64,
    pub bound: Option<f64>,
    pub bound_unavailable: Option<String>,
    pub omega: f64,
    pub omega_method: Option<OmegaMethod>,
    pub omega_lower_estimate: bool,
    pub v_true: f64,
    pub abs_error: f64,
    pub covered: Option<bool>,
}

fn instance_label(config: &ExperimentConfig) -> String {
    match &config.instance {
        crate::config::InstanceSource::Builtin { builtin } => builtin.clone(),
        crate::config::InstanceSource::Files { model, .. } => {
            model.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        }
    }
}

impl Context {
    fn new(config: &ExperimentConfig) -> Result<Self> {
        let inst = config.build_instance()?;
        let truth = match config.estimator.gamma {
            Some(g) => discounted_exact_value(&inst.model, &inst.target, &inst.target_init, g)?,
            None => exact_policy_value(&inst.model, &inst.target, &inst.target_init, config.estimator.horizon)?,
        };
        let (omega, omega_method, omega_lower_estimate) = match config.estimator.omega {
            Some(omega) => (omega, None, false),
            None => {
                let est = default_omega(&inst.features);
                (est.omega, Some(est.method), est.lower_estimate)
            }
        };
        Ok(Context {
            inst,
            truth,
            omega,
            omega_method,
            omega_lower_estimate,
            config: config.clone(),
        })
    }

    /// Reason the confidence bound cannot be computed, if any.
    fn bound_unavailable(&self) -> Option<String> {
        if self.config.estimator.lambda <= 0.0 {
            Some("confidence bound needs lambda > 0".into())
        } else if !self.omega.is_finite() {
            Some("feature class radius omega is unbounded; set estimator.omega".into())
        } else {
            None
        }
    }

    fn run(&self, episodes: usize, seed: u64) -> Result<RunRow> {
        let inst = &self.inst;
        let est = &self.config.estimator;
        let len = self.config.episode_len();
        let data = sample_episodes(&inst.model, &inst.behavior, &inst.behavior_init, episodes, len, seed)?;
        let fit = fit_embeddings(&data, &inst.features, &inst.target, &inst.target_init, est.lambda)?;
        let v_hat = match est.gamma {
            Some(g) => discounted_value(&fit, g)?.value,
            None => cme_value(&fit, est.horizon).value,
        };
        let bound = match self.bound_unavailable() {
            Some(_) => None,
            None => Some(match est.gamma {
                Some(g) => discounted_confidence_bound(&fit, g, est.delta, self.omega)?.bound,
                None => confidence_bound(&fit, est.horizon, est.delta, self.omega)?.bound,
            }),
        };
        Ok(RunRow {
            n: data.len(),
            seed,
            v_hat,
            v_true: self.truth,
            abs_error: (v_hat - self.truth).abs(),
            bound,
        })
    }
}

fn base_seed(config: &ExperimentConfig, opts: &RunOptions) -> u64 {
    opts.seed.unwrap_or(config.seeds.base)
}

fn seeds(config: &ExperimentConfig, opts: &RunOptions) -> Vec<u64> {
    let base = base_seed(config, opts);
    (0..config.seeds.count).map(|i| base.wrapping_add(i)).collect()
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn opt_bool(x: Option<bool>) -> String {
    x.map(|b| b.to_string()).unwrap_or_default()
}

pub fn run_evaluate(config: &ExperimentConfig, opts: &RunOptions) -> Result<EvaluationReport> {
    prepare_out(&opts.out)?;
    let ctx = Context::new(config)?;
    let seed = base_seed(config, opts);
    let row = ctx.run(config.episodes, seed)?;
    let report = EvaluationReport {
        instance: instance_label(config),
        setting: if config.estimator.gamma.is_some() { "discounted" } else { "finite-horizon" },
        horizon: config.estimator.gamma.is_none().then_some(config.estimator.horizon),
        gamma: config.estimator.gamma,
        lambda: config.estimator.lambda,
        delta: config.estimator.delta,
        episodes: config.episodes,
        episode_length: config.episode_len(),
        n: row.n,
        seed,
        v_hat: row.v_hat,
        bound: row.bound,
        bound_unavailable: ctx.bound_unavailable(),
        omega: ctx.omega,
        omega_method: ctx.omega_method,
        omega_lower_estimate: ctx.omega_lower_estimate,
        v_true: row.v_true,
        abs_error: row.abs_error,
        covered: row.covered(),
    };
    write_json(&opts.out.join("evaluation.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepSummaryRow {
    pub n: usize,
    pub rmse: f64,
    pub mean_bound: Option<f64>,
    pub coverage: Option<f64>,
}

/// Run every `(n, seed)` pair on the pool. Results come back sorted by `(n, seed)`.
fn run_grid(ctx: &Context, grid: &[usize], seeds: &[u64], threads: usize) -> Result<Vec<Result<RunRow>>> {
    let len = ctx.config.episode_len();
    let mut sizes = grid.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let mut tasks: Vec<(usize, u64)> = sizes.iter().flat_map(|&n| seeds.iter().map(move |&s| (n, s))).collect();
    tasks.sort_unstable();
    let pool = pool(threads)?;
    Ok(pool.install(|| {
        tasks
            .par_iter()
            .map(|&(n, seed)| ctx.run(n / len, seed).map(|row| RunRow { n, ..row }))
            .collect()
    }))
}

/// Write the successful rows, then surface the first failure.
fn write_rows(path: &Path, results: Vec<Result<RunRow>>) -> Result<Vec<RunRow>> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n", "seed", "v_hat", "v_true", "abs_error", "bound", "covered"])?;
    let mut rows = Vec::new();
    let mut first_error = None;
    for r in results {
        match r {
            Ok(row) => {
                w.write_record([
                    row.n.to_string(),
                    row.seed.to_string(),
                    fmt_f64(row.v_hat),
                    fmt_f64(row.v_true),
                    fmt_f64(row.abs_error),
                    opt_f64(row.bound),
                    opt_bool(row.covered()),
                ])?;
                rows.push(row);
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    w.flush()?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(rows),
    }
}

pub fn summarize(rows: &[RunRow]) -> Vec<SweepSummaryRow> {
    let mut out: Vec<SweepSummaryRow> = Vec::new();
    for chunk in rows.chunk_by(|a, b| a.n == b.n) {
        let k = chunk.len() as f64;
        let rmse = (chunk.iter().map(|r| r.abs_error * r.abs_error).sum::<f64>() / k).sqrt();
        let bounds: Option<Vec<f64>> = chunk.iter().map(|r| r.bound).collect();
        let mean_bound = bounds.as_ref().map(|b| b.iter().sum::<f64>() / k);
        let coverage = bounds.map(|_| chunk.iter().filter(|r| r.covered() == Some(true)).count() as f64 / k);
        out.push(SweepSummaryRow {
            n: chunk[0].n,
            rmse,
            mean_bound,
            coverage,
        });
    }
    out
}

pub fn run_sweep(config: &ExperimentConfig, opts: &RunOptions) -> Result<(Vec<RunRow>, Vec<SweepSummaryRow>)> {
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("sweep needs a \"sweep\": {\"grid\": [...]} section".into()))?;
    prepare_out(&opts.out)?;
    let ctx = Context::new(config)?;
    let results = run_grid(&ctx, &sweep.grid, &seeds(config, opts), opts.threads)?;
    let rows = write_rows(&opts.out.join("sweep.csv"), results)?;
    let summary = summarize(&rows);
    let mut w = csv::Writer::from_path(opts.out.join("sweep_summary.csv"))?;
    w.write_record(["n", "rmse", "mean_bound", "coverage"])?;
    for s in &summary {
        w.write_record([s.n.to_string(), fmt_f64(s.rmse), opt_f64(s.mean_bound), opt_f64(s.coverage)])?;
    }
    w.flush()?;
    Ok((rows, summary))
}

pub fn run_confidence(config: &ExperimentConfig, opts: &RunOptions) -> Result<SweepSummaryRow> {
    prepare_out(&opts.out)?;
    let ctx = Context::new(config)?;
    if let Some(reason) = ctx.bound_unavailable() {
        return Err(CliError::Config(reason));
    }
    let n = config.episodes * config.episode_len();
    let results = run_grid(&ctx, &[n], &seeds(config, opts), opts.threads)?;
    let rows = write_rows(&opts.out.join("coverage.csv"), results)?;
    Ok(summarize(&rows).remove(0))
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnosisReport {
    pub instance: String,
    pub horizon: usize,
    pub n: usize,
    pub lambda: f64,
    pub delta: f64,
    pub profile: ope_lab::diagnostics::ProfileDump,
    pub mismatch_per_h: Vec<f64>,
    pub mismatch_weighted: f64,
    pub bound_rhs: Option<BoundRhs>,
    pub bound_rhs_unavailable: Option<String>,
    pub improved_bound_rhs: Option<BoundRhs>,
    pub omega: f64,
    pub omega_method: OmegaMethod,
}

fn profile_of(inst: &Instance, model: &TabularMdp, horizon: usize) -> Result<PopulationProfile> {
    Ok(population_profile(
        model,
        &inst.behavior,
        &inst.behavior_init,
        &inst.target,
        &inst.target_init,
        &inst.features,
        horizon,
    )?)
}

pub fn run_diagnose(config: &ExperimentConfig, opts: &RunOptions) -> Result<DiagnosisReport> {
    prepare_out(&opts.out)?;
    let inst = config.build_instance()?;
    let est = &config.estimator;
    let h = est.horizon;
    let profile = profile_of(&inst, &inst.model, h)?;
    let terms = mismatch_terms(&profile, h)?;
    let n = config.episodes * config.episode_len();
    let (bound_rhs, bound_rhs_unavailable) = match theoretical_bound_rhs(&profile, h, n, est.delta, est.lambda, false) {
        Ok(b) => (Some(b), None),
        Err(e) => (None, Some(format!("{}: {e}", e.name()))),
    };
    let improved_bound_rhs = theoretical_bound_rhs(&profile, h, n, est.delta, est.lambda, true).ok();
    let omega = default_omega(&inst.features);
    let report = DiagnosisReport {
        instance: instance_label(config),
        horizon: h,
        n,
        lambda: est.lambda,
        delta: est.delta,
        profile: profile.dump(),
        mismatch_per_h: terms.per_h.clone(),
        mismatch_weighted: terms.weighted,
        bound_rhs,
        bound_rhs_unavailable,
        improved_bound_rhs,
        omega: omega.omega,
        omega_method: omega.method,
    };
    write_json(&opts.out.join("profile.json"), &report)?;
    let mut w = csv::Writer::from_path(opts.out.join("mismatch.csv"))?;
    w.write_record(["h", "mismatch_per_h"])?;
    for (i, v) in terms.per_h.iter().enumerate() {
        w.write_record([i.to_string(), fmt_f64(*v)])?;
    }
    w.flush()?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct HardInstanceRow {
    pub seed: u64,
    pub n: usize,
    pub log_ratio: f64,
    pub ratio_ge_half: bool,
    pub v_gap: f64,
    pub rho: f64,
    pub rho_tilde: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct HardInstanceSummary {
    pub instance: String,
    pub horizon: usize,
    pub n: usize,
    pub datasets: usize,
    pub direction: Vec<f64>,
    pub high_set: Vec<usize>,
    pub low_set: Vec<usize>,
    pub p_bar: f64,
    pub p_under: f64,
    pub max_pair_tv: f64,
    pub v_gap: f64,
    pub v_gap_lower_bound: f64,
    pub rho: f64,
    pub rho_tilde: f64,
    pub frequency_ratio_ge_half: f64,
}

pub fn run_hard_instance(config: &ExperimentConfig, opts: &RunOptions) -> Result<HardInstanceSummary> {
    prepare_out(&opts.out)?;
    let inst = config.build_instance()?;
    let h = config.estimator.horizon;
    let n = config.hard_instance.n;
    let len = config.episode_len();
    if n < len {
        return Err(CliError::Config(format!("hard_instance.n = {n} holds no episode of length {len}")));
    }
    detect_value_sets(&inst.model, &inst.target, h)?;
    let profile = profile_of(&inst, &inst.model, h)?;
    let base = PerturbationSpec::for_instance(
        &inst.model,
        &inst.behavior,
        &inst.target,
        h,
        vec![0.0; inst.features.dim()],
        config.hard_instance.epsilon,
    )?;
    let direction: Vec<f64> = match &config.hard_instance.direction {
        Direction::Named(name) if name == "optimal" => {
            optimal_perturbation_direction(&profile, &base, n, h)?.iter().cloned().collect()
        }
        Direction::Named(_) => vec![0.0; inst.features.dim()],
        Direction::Explicit(x) => x.clone(),
    };
    let spec = base.with_direction(direction.clone());
    let p_tilde = perturb_instance(&inst.model, &inst.behavior, &inst.features, &spec)?;
    let delta = perturbation_delta(&inst.model, &inst.behavior, &inst.features, &spec)?;
    let max_pair_tv = delta
        .row_iter()
        .map(|r| 0.5 * r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let value = |m: &TabularMdp| exact_policy_value(m, &inst.target, &inst.target_init, h);
    let v_gap = value(&inst.model)? - value(&p_tilde)?;
    let v_gap_lower_bound = value_gap_lower_bound(&p_tilde, &inst, &spec, h)?;
    let rho = gap_radius(&profile, &spec, n, h)?;
    let rho_tilde = gap_radius(&profile_of(&inst, &p_tilde, h)?, &spec, n, h)?;

    let seeds = seeds(config, opts);
    let pool = pool(opts.threads)?;
    let results: Vec<Result<HardInstanceRow>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let data = sample_episodes(&inst.model, &inst.behavior, &inst.behavior_init, n / len, len, seed)?;
                let lr = likelihood_ratio(&data, &inst.model, &p_tilde)?;
                Ok(HardInstanceRow {
                    seed,
                    n: data.len(),
                    log_ratio: lr.log_ratio,
                    ratio_ge_half: lr.ratio >= 0.5,
                    v_gap,
                    rho,
                    rho_tilde,
                })
            })
            .collect()
    });
    let mut w = csv::Writer::from_path(opts.out.join("hard_instance.csv"))?;
    w.write_record(["seed", "N", "log_ratio", "ratio_ge_half", "v_gap", "rho", "rho_tilde"])?;
    let mut hits = 0usize;
    let mut first_error = None;
    for r in results {
        match r {
            Ok(row) => {
                hits += row.ratio_ge_half as usize;
                w.write_record([
                    row.seed.to_string(),
                    row.n.to_string(),
                    fmt_f64(row.log_ratio),
                    row.ratio_ge_half.to_string(),
                    fmt_f64(row.v_gap),
                    fmt_f64(row.rho),
                    fmt_f64(row.rho_tilde),
                ])?;
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    w.flush()?;
    if let Some(e) = first_error {
        return Err(e);
    }
    let summary = HardInstanceSummary {
        instance: instance_label(config),
        horizon: h,
        n,
        datasets: seeds.len(),
        direction,
        high_set: spec.high_set.clone(),
        low_set: spec.low_set.clone(),
        p_bar: spec.p_bar,
        p_under: spec.p_under,
        max_pair_tv,
        v_gap,
        v_gap_lower_bound,
        rho,
        rho_tilde,
        frequency_ratio_ge_half: hits as f64 / seeds.len() as f64,
    };
    write_json(&opts.out.join("hard_instance_summary.json"), &summary)?;
    Ok(summary)
}
