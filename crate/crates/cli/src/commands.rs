//! Command implementations. Each returns the process exit code on
//! success-shaped outcomes (0, or 2 for non-convergence with outputs
//! written); hard failures return [`CliError`].

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use mrglmm_core::mcem::{fit, fit_from, refine_symmetric, FitReport, Mode};
use mrglmm_core::model::{DiagonalPolicy, LongitudinalNetworkDataset};
use mrglmm_core::sim::{evaluate, generate, run_table, TableFit};
use mrglmm_core::tuning::tune;

use crate::config::{
    self, config_hash, load_config, EvalConfig, FitConfig, ModeSpec, ReplicateConfig,
    SimulateConfig, TableFitSpec, TuneConfig,
};
use crate::dataio::{
    load_dataset, load_params, load_truth, save_dataset, save_params, save_truth, CliError,
    TruthMeta,
};

/// Effective flag overrides applied on top of the config file.
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub force: bool,
    pub mode: Option<ModeSpec>,
    pub threads: usize,
}

fn apply_policy_override(
    dataset: LongitudinalNetworkDataset,
    manifest_policy: DiagonalPolicy,
    requested: Option<DiagonalPolicy>,
) -> Result<LongitudinalNetworkDataset, CliError> {
    let Some(policy) = requested else { return Ok(dataset) };
    if policy == manifest_policy {
        return Ok(dataset);
    }
    if manifest_policy == DiagonalPolicy::Exclude && policy == DiagonalPolicy::Include {
        return Err(CliError::invalid(
            "cannot include diagonals: the dataset was written without them",
        ));
    }
    LongitudinalNetworkDataset::new(
        dataset.n(),
        dataset.p(),
        dataset.subjects().to_vec(),
        policy,
    )
    .map_err(CliError::from)
}

pub fn cmd_simulate(config_path: &Path, ov: &Overrides) -> Result<i32, CliError> {
    let mut config: SimulateConfig = load_config(config_path)?;
    config::validate_version(config.version)?;
    if let Some(seed) = ov.seed {
        config.seed = seed;
    }
    if let Some(out) = &ov.out {
        config.out_dir = out.clone();
    }
    let hash = config_hash(&config)?;

    let design = config.design.to_core(1, config.seed);
    let (dataset, truth) = generate(&design, config.replicate_index)?;
    let dataset = if config.diagonal_policy == DiagonalPolicy::Exclude {
        LongitudinalNetworkDataset::new(
            dataset.n(),
            dataset.p(),
            dataset.subjects().to_vec(),
            DiagonalPolicy::Exclude,
        )?
    } else {
        dataset
    };
    save_dataset(&dataset, design.family, &config.out_dir, &hash, config.seed)?;
    let truth_meta = TruthMeta {
        version: config::SCHEMA_VERSION,
        n: design.n,
        r: design.r,
        p: design.p,
        family: design.family,
        s: design.s,
        b_value: design.b_value,
        theta_var: design.theta_var,
        noise_var: design.noise_var,
        replicate_index: config.replicate_index,
        seed: config.seed,
        config_hash: hash,
    };
    save_truth(&truth, &truth_meta, &config.out_dir)?;
    println!(
        "simulated {} subjects (n = {}, p = {}) into {}",
        design.n_subjects,
        design.n,
        design.p,
        config.out_dir.display()
    );
    Ok(0)
}

#[derive(Serialize)]
struct FitReportJson<'a> {
    version: u32,
    command: &'static str,
    config: &'a FitConfig,
    config_hash: &'a str,
    seed: u64,
    threads: usize,
    converged: bool,
    iterations: usize,
    loglik_hat: f64,
    objective_trace: &'a [mrglmm_core::mcem::ObjectivePoint],
    acceptance: Acceptance,
    wall_time_s: f64,
}

#[derive(Serialize)]
struct Acceptance {
    mean: f64,
    min: f64,
    max: f64,
}

fn write_fit_report(
    config: &FitConfig,
    hash: &str,
    threads: usize,
    report: &FitReport,
    out_dir: &Path,
) -> Result<(), CliError> {
    let (mean, min, max) = report.acceptance_summary;
    let json = FitReportJson {
        version: config::SCHEMA_VERSION,
        command: "fit",
        config,
        config_hash: hash,
        seed: config.seed,
        threads,
        converged: report.converged,
        iterations: report.iterations,
        loglik_hat: report.loglik_hat,
        objective_trace: &report.objective_trace,
        acceptance: Acceptance { mean, min, max },
        wall_time_s: report.wall_time,
    };
    let text =
        serde_json::to_string_pretty(&json).map_err(|e| CliError::invalid(e.to_string()))?;
    fs::write(out_dir.join("report.json"), text + "\n")?;
    Ok(())
}

pub fn cmd_fit(config_path: &Path, ov: &Overrides) -> Result<i32, CliError> {
    let mut config: FitConfig = load_config(config_path)?;
    config::validate_version(config.version)?;
    if let Some(seed) = ov.seed {
        config.seed = seed;
    }
    if let Some(out) = &ov.out {
        config.out_dir = out.clone();
    }
    if let Some(mode) = ov.mode {
        config.mode = mode;
    }
    if config.mode == ModeSpec::SymmetricRefine && config.asym_params_dir.is_none() {
        return Err(CliError::invalid(
            "mode symmetric_refine requires `asym_params_dir` (a prior asymmetric fit)",
        ));
    }
    let hash = config_hash(&config)?;

    let (dataset, family) = load_dataset(&config.dataset_dir)?;
    let manifest_policy = dataset.diagonal_policy();
    let dataset = apply_policy_override(dataset, manifest_policy, config.diagonal_policy)?;

    let mcem = config.mcem.to_core(config.r, config.seed, config.mode.to_core())?;
    let report = match config.mode {
        ModeSpec::Asymmetric => match &config.init_params_dir {
            Some(dir) => {
                let init = load_params(dir)?;
                fit_from(&dataset, family, &mcem, init)?
            }
            None => fit(&dataset, family, &mcem)?,
        },
        ModeSpec::SymmetricRefine => {
            let asym = load_params(config.asym_params_dir.as_ref().expect("checked"))?;
            refine_symmetric(&dataset, family, &mcem, &asym)?
        }
    };

    fs::create_dir_all(&config.out_dir)?;
    save_params(&report.params, &config.out_dir, &hash, config.seed)?;
    write_fit_report(&config, &hash, ov.threads, &report, &config.out_dir)?;
    println!(
        "fit {} in {} EM iterations (converged: {}), loglik_hat = {}",
        if report.converged { "completed" } else { "stopped" },
        report.iterations,
        report.converged,
        report.loglik_hat
    );
    Ok(if report.converged { 0 } else { 2 })
}

#[derive(Serialize)]
struct SelectedJson<'a> {
    version: u32,
    command: &'static str,
    config_hash: &'a str,
    seed: u64,
    r_star: usize,
    s_star: f64,
    cells_evaluated: usize,
}

pub fn cmd_tune(config_path: &Path, ov: &Overrides) -> Result<i32, CliError> {
    let mut config: TuneConfig = load_config(config_path)?;
    config::validate_version(config.version)?;
    if let Some(seed) = ov.seed {
        config.seed = seed;
    }
    if let Some(out) = &ov.out {
        config.out_dir = out.clone();
    }
    let hash = config_hash(&config)?;

    let (dataset, family) = load_dataset(&config.dataset_dir)?;
    let manifest_policy = dataset.diagonal_policy();
    let dataset = apply_policy_override(dataset, manifest_policy, config.diagonal_policy)?;

    let grid = config.grid.to_core();
    grid.validate()?;
    let base =
        config.mcem.to_core(grid.r_candidates[0], config.seed, Mode::Asymmetric)?;
    let outcome = tune(&dataset, family, &grid, &base)?;

    fs::create_dir_all(&config.out_dir)?;
    {
        let mut w = BufWriter::new(fs::File::create(config.out_dir.join("tuning.csv"))?);
        writeln!(w, "# config_hash={hash}")?;
        writeln!(w, "# seed={}", config.seed)?;
        writeln!(w, "stage,r,s,s_realized,ebic,loglik_hat,converged,status")?;
        for cell in &outcome.cells {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                cell.stage,
                cell.r,
                cell.s,
                cell.s_realized,
                cell.ebic,
                cell.loglik_hat,
                cell.converged,
                cell.status
            )?;
        }
        w.flush()?;
    }
    let selected = SelectedJson {
        version: config::SCHEMA_VERSION,
        command: "tune",
        config_hash: &hash,
        seed: config.seed,
        r_star: outcome.r_star,
        s_star: outcome.s_star,
        cells_evaluated: outcome.cells.len(),
    };
    let text =
        serde_json::to_string_pretty(&selected).map_err(|e| CliError::invalid(e.to_string()))?;
    fs::write(config.out_dir.join("selected.json"), text + "\n")?;
    save_params(
        &outcome.selected_fit,
        &config.out_dir.join("selected_params"),
        &hash,
        config.seed,
    )?;
    println!("selected r = {}, s = {}", outcome.r_star, outcome.s_star);
    Ok(0)
}

#[derive(Serialize)]
struct EnvironmentStamp<'a> {
    version: u32,
    command: &'static str,
    config_hash: &'a str,
    seed: u64,
    threads: usize,
    package_version: &'static str,
    os: &'static str,
    mode: &'a str,
}

pub fn cmd_replicate(config_path: &Path, ov: &Overrides) -> Result<i32, CliError> {
    let mut config: ReplicateConfig = load_config(config_path)?;
    config::validate_version(config.version)?;
    if let Some(seed) = ov.seed {
        config.seed = seed;
    }
    if let Some(out) = &ov.out {
        config.out_dir = out.clone();
    }
    let hash = config_hash(&config)?;

    let design = config.design.to_core(config.replicates, config.seed);
    let base = config.mcem.to_core(design.r, config.seed, Mode::Asymmetric)?;
    let table_fit = match &config.fit {
        TableFitSpec::Oracle => TableFit::Oracle,
        TableFitSpec::Tuned { grid } => TableFit::Tuned(grid.to_core()),
    };

    fs::create_dir_all(&config.out_dir)?;
    let stamp = EnvironmentStamp {
        version: config::SCHEMA_VERSION,
        command: "replicate",
        config_hash: &hash,
        seed: config.seed,
        threads: ov.threads,
        package_version: env!("CARGO_PKG_VERSION"),
        os: std::env::consts::OS,
        mode: match &config.fit {
            TableFitSpec::Oracle => "oracle",
            TableFitSpec::Tuned { .. } => "tuned",
        },
    };
    let text =
        serde_json::to_string_pretty(&stamp).map_err(|e| CliError::invalid(e.to_string()))?;
    fs::write(config.out_dir.join("environment.json"), text + "\n")?;

    let summary = run_table(&design, &base, &table_fit, &config.out_dir, &hash, ov.force)?;
    println!(
        "replicates: {} ok, {} failed; theta_err {}({}), b_err {}({}), \
         sensitivity {}({}), specificity {}({})",
        summary.replicates_ok,
        summary.replicates_failed,
        summary.theta_err_mean,
        summary.theta_err_sd,
        summary.b_err_mean,
        summary.b_err_sd,
        summary.sensitivity_mean,
        summary.sensitivity_sd,
        summary.specificity_mean,
        summary.specificity_sd
    );
    Ok(0)
}

#[derive(Serialize)]
struct MetricsJson<'a> {
    version: u32,
    command: &'static str,
    config_hash: &'a str,
    theta_err: f64,
    b_err: f64,
    sensitivity: f64,
    specificity: f64,
    sensitivity_by_convention: bool,
}

pub fn cmd_eval(config_path: &Path, ov: &Overrides) -> Result<i32, CliError> {
    let mut config: EvalConfig = load_config(config_path)?;
    config::validate_version(config.version)?;
    if let Some(out) = &ov.out {
        config.out_dir = out.clone();
    }
    let hash = config_hash(&config)?;

    let fitted = load_params(&config.fitted_dir)?;
    let truth = load_truth(&config.truth_dir)?;
    let m = evaluate(&fitted, &truth)?;

    fs::create_dir_all(&config.out_dir)?;
    let json = MetricsJson {
        version: config::SCHEMA_VERSION,
        command: "eval",
        config_hash: &hash,
        theta_err: m.theta_err,
        b_err: m.b_err,
        sensitivity: m.sensitivity,
        specificity: m.specificity,
        sensitivity_by_convention: m.sensitivity_by_convention,
    };
    let text =
        serde_json::to_string_pretty(&json).map_err(|e| CliError::invalid(e.to_string()))?;
    fs::write(config.out_dir.join("metrics.json"), text + "\n")?;
    println!(
        "theta_err = {}, b_err = {}, sensitivity = {}, specificity = {}",
        m.theta_err, m.b_err, m.sensitivity, m.specificity
    );
    Ok(0)
}
