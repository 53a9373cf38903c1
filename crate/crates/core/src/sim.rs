//! Synthetic-data generators, evaluation metrics and the replicated
//! benchmark harness.
//!
//! Model 1 (linear): `A_it = Theta + theta_i + B x3 x_it + eps_it`;
//! Model 2 (logistic): `logit P(A_it = 1) = Theta + theta_i + B x3 x_it`
//! with `Theta = U U^T`, standard-normal `U` and covariates, `N(0, 4)`
//! random intercepts, coefficient entries equal to `b_value` with
//! probability `s`, and `N(0, 0.25)` noise in the linear model.
//!
//! Every replicate draws from its own sub-streams of the master seed,
//! so replicate `k` is identical whether or not the others ran.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::mpsc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcem::{fit, fit_from, FitReport, McemConfig};
use crate::model::{
    sigmoid, CoefTensor, DiagonalPolicy, Family, InterceptFactor, LongitudinalNetworkDataset,
    ModelParams, SubjectRecord,
};
use crate::rng::{derive_rng, mix_key, purpose};
use crate::tuning::{tune, TuningGrid};

/// Synthetic experiment design.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimDesign {
    pub n: usize,
    pub p: usize,
    pub n_subjects: usize,
    pub t_obs: usize,
    pub r: usize,
    /// Probability that a coefficient entry is nonzero.
    pub s: f64,
    pub family: Family,
    /// Random-intercept variance.
    pub theta_var: f64,
    /// Residual variance (linear model only).
    pub noise_var: f64,
    /// Value of the nonzero coefficient entries.
    pub b_value: f64,
    pub replicates: usize,
    pub master_seed: u64,
}

impl Default for SimDesign {
    fn default() -> Self {
        SimDesign {
            n: 30,
            p: 5,
            n_subjects: 200,
            t_obs: 5,
            r: 2,
            s: 0.1,
            family: Family::GaussianIdentity,
            theta_var: 4.0,
            noise_var: 0.25,
            b_value: 2.0,
            replicates: 100,
            master_seed: 0,
        }
    }
}

impl SimDesign {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n_subjects == 0 || self.t_obs == 0 || self.replicates == 0 {
            return Err(Error::invalid("design counts must be positive"));
        }
        if self.r == 0 || self.r > self.n {
            return Err(Error::invalid("design rank must satisfy 1 <= r <= n"));
        }
        if !(0.0..=1.0).contains(&self.s) {
            return Err(Error::invalid("design sparsity must lie in [0, 1]"));
        }
        if !(self.theta_var >= 0.0) || !(self.noise_var >= 0.0) {
            return Err(Error::invalid("variances must be nonnegative"));
        }
        Ok(())
    }
}

/// Draw one replicate: the dataset plus the generating parameters.
/// Diagonals are included (the generators draw every entry).
pub fn generate(
    design: &SimDesign,
    replicate: usize,
) -> Result<(LongitudinalNetworkDataset, ModelParams)> {
    design.validate()?;
    let (n, p) = (design.n, design.p);
    let rep = replicate as u64;
    let seed = design.master_seed;

    let mut u = DMatrix::zeros(n, design.r);
    {
        let mut rng = derive_rng(seed, &[rep, purpose::SIM_INTERCEPT]);
        for j in 0..n {
            for c in 0..design.r {
                u[(j, c)] = crate::rng::std_normal(&mut rng);
            }
        }
    }

    let mut coef = CoefTensor::zeros(n, p);
    {
        let mut rng = derive_rng(seed, &[rep, purpose::SIM_COEF]);
        for j in 0..n {
            for k in 0..n {
                for l in 0..p {
                    if rng.random::<f64>() < design.s {
                        coef.set(j, k, l, design.b_value);
                    }
                }
            }
        }
    }

    let truth = ModelParams::new(
        InterceptFactor::Factored { u: u.clone(), v: u.clone() },
        coef.clone(),
        match design.family {
            Family::GaussianIdentity => design.noise_var.max(1e-300),
            Family::BernoulliLogit => 1.0,
        },
        DMatrix::from_element(n, n, design.theta_var),
    )?;
    let theta_mat = truth.theta_matrix();
    let theta_sd = design.theta_var.sqrt();
    let noise_sd = design.noise_var.sqrt();

    let mut cov_rng = derive_rng(seed, &[rep, purpose::SIM_COVARIATES]);
    let mut re_rng = derive_rng(seed, &[rep, purpose::SIM_RANDOM_EFFECTS]);
    let mut resp_rng = derive_rng(seed, &[rep, purpose::SIM_RESPONSE]);

    let mut subjects = Vec::with_capacity(design.n_subjects);
    for id in 0..design.n_subjects as u64 {
        let theta_i = DMatrix::from_fn(n, n, |_, _| {
            theta_sd * crate::rng::std_normal(&mut re_rng)
        });
        let covariates: Vec<DVector<f64>> = (0..design.t_obs)
            .map(|_| DVector::from_fn(p, |_, _| crate::rng::std_normal(&mut cov_rng)))
            .collect();
        let responses: Vec<DMatrix<f64>> = covariates
            .iter()
            .map(|x| {
                let mut eta = &theta_mat + &theta_i;
                eta += coef.contract(x);
                match design.family {
                    Family::GaussianIdentity => eta.map(|e| {
                        e + noise_sd * crate::rng::std_normal(&mut resp_rng)
                    }),
                    Family::BernoulliLogit => {
                        eta.map(|e| f64::from(resp_rng.random::<f64>() < sigmoid(e)))
                    }
                }
            })
            .collect();
        subjects.push(SubjectRecord::new(id, responses, covariates)?);
    }
    let dataset =
        LongitudinalNetworkDataset::new(n, p, subjects, DiagonalPolicy::Include)?;
    Ok((dataset, truth))
}

/// Estimation-quality metrics of one fit against the generating truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// `||Theta_hat - Theta||_F`.
    pub theta_err: f64,
    /// `||B_hat - B||_F`.
    pub b_err: f64,
    /// True nonzeros of `B` estimated nonzero; 1 by convention when the
    /// truth has no nonzeros (see `sensitivity_by_convention`).
    pub sensitivity: f64,
    /// True zeros of `B` estimated zero.
    pub specificity: f64,
    pub sensitivity_by_convention: bool,
}

/// Compare fitted parameters against the truth. Support comparisons use
/// exact-zero tests (hard thresholding produces exact zeros).
pub fn evaluate(fitted: &ModelParams, truth: &ModelParams) -> Result<MetricRow> {
    if fitted.n() != truth.n() || fitted.p() != truth.p() {
        return Err(Error::invalid("fitted and true parameter dimensions differ"));
    }
    let theta_err = (fitted.theta_matrix() - truth.theta_matrix()).norm();
    let b_err = fitted.coef().frob_norm_sq_diff(truth.coef()).sqrt();

    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (j, k, l, tv) in truth.coef().iter_lex() {
        let fitted_nz = fitted.coef().get(j, k, l) != 0.0;
        match (tv != 0.0, fitted_nz) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    let sensitivity_by_convention = tp + fn_ == 0;
    let sensitivity = if sensitivity_by_convention {
        1.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let specificity = if tn + fp == 0 { 1.0 } else { tn as f64 / (tn + fp) as f64 };
    Ok(MetricRow { theta_err, b_err, sensitivity, specificity, sensitivity_by_convention })
}

/// How the harness picks `(r, s)` per replicate.
#[derive(Debug, Clone)]
pub enum TableFit {
    /// Use the design's generating values.
    Oracle,
    /// Two-stage EBIC selection per replicate.
    Tuned(TuningGrid),
}

impl TableFit {
    fn label(&self) -> &'static str {
        match self {
            TableFit::Oracle => "oracle",
            TableFit::Tuned(_) => "tuned",
        }
    }
}

/// One per-replicate output row.
#[derive(Debug, Clone)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub status: String,
    pub metrics: Option<MetricRow>,
    pub wall_time_s: f64,
}

/// Aggregated mean(sd) summary over successful replicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableSummary {
    pub replicates_total: usize,
    pub replicates_ok: usize,
    pub replicates_failed: usize,
    pub theta_err_mean: f64,
    pub theta_err_sd: f64,
    pub b_err_mean: f64,
    pub b_err_sd: f64,
    pub sensitivity_mean: f64,
    pub sensitivity_sd: f64,
    pub specificity_mean: f64,
    pub specificity_sd: f64,
}

const METRICS_HEADER: &str =
    "replicate,status,theta_err,b_err,sensitivity,specificity,wall_time_s";

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    // Sample standard deviation (divisor n - 1).
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregate rows (failed replicates are excluded and counted).
pub fn summarize(rows: &[ReplicateRow]) -> TableSummary {
    let ok: Vec<&MetricRow> = rows.iter().filter_map(|r| r.metrics.as_ref()).collect();
    let col = |f: fn(&MetricRow) -> f64| -> Vec<f64> { ok.iter().map(|m| f(m)).collect() };
    let (theta_err_mean, theta_err_sd) = mean_sd(&col(|m| m.theta_err));
    let (b_err_mean, b_err_sd) = mean_sd(&col(|m| m.b_err));
    let (sensitivity_mean, sensitivity_sd) = mean_sd(&col(|m| m.sensitivity));
    let (specificity_mean, specificity_sd) = mean_sd(&col(|m| m.specificity));
    TableSummary {
        replicates_total: rows.len(),
        replicates_ok: ok.len(),
        replicates_failed: rows.len() - ok.len(),
        theta_err_mean,
        theta_err_sd,
        b_err_mean,
        b_err_sd,
        sensitivity_mean,
        sensitivity_sd,
        specificity_mean,
        specificity_sd,
    }
}

fn fit_one_replicate(
    design: &SimDesign,
    base: &McemConfig,
    table_fit: &TableFit,
    replicate: usize,
) -> Result<(FitReport, ModelParams)> {
    let (dataset, truth) = generate(design, replicate)?;
    let mut config = base.clone();
    config.mwg.seed = mix_key(design.master_seed, &[replicate as u64, purpose::EM_ITERATION]);
    match table_fit {
        TableFit::Oracle => {
            config.r = design.r;
            config.mstep.s = design.s;
            Ok((fit(&dataset, design.family, &config)?, truth))
        }
        TableFit::Tuned(grid) => {
            let outcome = tune(&dataset, design.family, grid, &config)?;
            config.r = outcome.r_star;
            config.mstep.s = outcome.s_star;
            Ok((
                fit_from(&dataset, design.family, &config, outcome.selected_fit)?,
                truth,
            ))
        }
    }
}

fn run_replicate(
    design: &SimDesign,
    base: &McemConfig,
    table_fit: &TableFit,
    replicate: usize,
) -> ReplicateRow {
    let start = Instant::now();
    match fit_one_replicate(design, base, table_fit, replicate)
        .and_then(|(report, truth)| evaluate(&report.params, &truth))
    {
        Ok(metrics) => ReplicateRow {
            replicate,
            status: "ok".to_string(),
            metrics: Some(metrics),
            wall_time_s: start.elapsed().as_secs_f64(),
        },
        Err(e) => {
            log::warn!("replicate {replicate} failed: {e}");
            ReplicateRow {
                replicate,
                status: "failed".to_string(),
                metrics: None,
                wall_time_s: start.elapsed().as_secs_f64(),
            }
        }
    }
}

fn format_row(row: &ReplicateRow) -> String {
    match &row.metrics {
        Some(m) => format!(
            "{},{},{},{},{},{},{}\n",
            row.replicate,
            row.status,
            m.theta_err,
            m.b_err,
            m.sensitivity,
            m.specificity,
            row.wall_time_s
        ),
        None => format!("{},{},,,,,{}\n", row.replicate, row.status, row.wall_time_s),
    }
}

fn parse_existing_rows(path: &Path, config_hash: &str) -> Result<Vec<ReplicateRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut hash_seen = false;
    for (lineno, line) in text.lines().enumerate() {
        if let Some(meta) = line.strip_prefix('#') {
            if let Some(h) = meta.trim().strip_prefix("config_hash=") {
                hash_seen = true;
                if h != config_hash {
                    return Err(Error::invalid(format!(
                        "{} was produced by a different configuration (hash {h}); \
                         pass force to regenerate",
                        path.display()
                    )));
                }
            }
            continue;
        }
        if line == METRICS_HEADER || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::invalid(format!(
                "{}:{}: expected 7 fields, found {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let replicate: usize = fields[0].parse().map_err(|_| {
            Error::invalid(format!("{}:{}: bad replicate index", path.display(), lineno + 1))
        })?;
        if replicate != rows.len() {
            return Err(Error::invalid(format!(
                "{}:{}: replicate rows out of order",
                path.display(),
                lineno + 1
            )));
        }
        let status = fields[1].to_string();
        let metrics = if status == "ok" {
            let get = |i: usize| -> Result<f64> {
                fields[i].parse().map_err(|_| {
                    Error::invalid(format!(
                        "{}:{}: bad numeric field {}",
                        path.display(),
                        lineno + 1,
                        i
                    ))
                })
            };
            Some(MetricRow {
                theta_err: get(2)?,
                b_err: get(3)?,
                sensitivity: get(4)?,
                specificity: get(5)?,
                sensitivity_by_convention: false,
            })
        } else {
            None
        };
        let wall_time_s = fields[6].parse().unwrap_or(0.0);
        rows.push(ReplicateRow { replicate, status, metrics, wall_time_s });
    }
    if !hash_seen {
        return Err(Error::invalid(format!(
            "{} carries no config hash; pass force to regenerate",
            path.display()
        )));
    }
    Ok(rows)
}

/// Run the replicated experiment, writing `metrics.csv` (one row per
/// replicate, appended in replicate order as results complete) and
/// `summary.csv` under `out_dir`.
///
/// A complete existing output is left untouched unless `force`; a
/// partial one (interrupted run) is resumed from the first missing
/// replicate, which yields identical rows thanks to per-replicate
/// seed streams.
pub fn run_table(
    design: &SimDesign,
    base: &McemConfig,
    table_fit: &TableFit,
    out_dir: &Path,
    config_hash: &str,
    force: bool,
) -> Result<TableSummary> {
    design.validate()?;
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");

    let mut existing: Vec<ReplicateRow> = Vec::new();
    if metrics_path.exists() && !force {
        existing = parse_existing_rows(&metrics_path, config_hash)?;
        existing.truncate(design.replicates);
    }
    let start_at = existing.len();

    let mut rows = existing;
    if start_at < design.replicates || force {
        let file = if start_at > 0 {
            fs::OpenOptions::new().append(true).open(&metrics_path)?
        } else {
            let mut f = BufWriter::new(fs::File::create(&metrics_path)?);
            writeln!(f, "# config_hash={config_hash}")?;
            writeln!(f, "# seed={}", design.master_seed)?;
            writeln!(f, "# mode={}", table_fit.label())?;
            writeln!(f, "# sd_convention=sample (n-1)")?;
            writeln!(f, "{METRICS_HEADER}")?;
            f.into_inner().map_err(|e| Error::invalid(e.to_string()))?
        };
        let mut writer = BufWriter::new(file);

        let (tx, rx) = mpsc::channel::<(usize, ReplicateRow)>();
        let new_rows = std::thread::scope(
            |scope| -> Result<Vec<ReplicateRow>> {
                let writer_handle = scope.spawn(move || -> Result<Vec<ReplicateRow>> {
                    // Buffer out-of-order completions; write rows in
                    // replicate order, flushing each so an interrupted
                    // run keeps its completed prefix.
                    let mut pending = std::collections::BTreeMap::new();
                    let mut next = start_at;
                    let mut done = Vec::new();
                    while let Ok((k, row)) = rx.recv() {
                        pending.insert(k, row);
                        while let Some(row) = pending.remove(&next) {
                            writer.write_all(format_row(&row).as_bytes())?;
                            writer.flush()?;
                            done.push(row);
                            next += 1;
                        }
                    }
                    Ok(done)
                });
                (start_at..design.replicates).into_par_iter().for_each_with(
                    tx,
                    |tx, k| {
                        let row = run_replicate(design, base, table_fit, k);
                        let _ = tx.send((k, row));
                    },
                );
                writer_handle.join().expect("writer thread panicked")
            },
        )?;
        rows.extend(new_rows);
    }

    let summary = summarize(&rows);
    write_summary(design, table_fit, &summary, out_dir, config_hash)?;
    Ok(summary)
}

fn write_summary(
    design: &SimDesign,
    table_fit: &TableFit,
    summary: &TableSummary,
    out_dir: &Path,
    config_hash: &str,
) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(out_dir.join("summary.csv"))?);
    writeln!(f, "# config_hash={config_hash}")?;
    writeln!(f, "# seed={}", design.master_seed)?;
    writeln!(f, "# sd_convention=sample (n-1)")?;
    writeln!(
        f,
        "n,p,n_subjects,t_obs,r,s,family,mode,replicates_total,replicates_ok,\
         replicates_failed,theta_err_mean,theta_err_sd,b_err_mean,b_err_sd,\
         sensitivity_mean,sensitivity_sd,specificity_mean,specificity_sd"
    )?;
    let family = match design.family {
        Family::GaussianIdentity => "gaussian_identity",
        Family::BernoulliLogit => "bernoulli_logit",
    };
    writeln!(
        f,
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        design.n,
        design.p,
        design.n_subjects,
        design.t_obs,
        design.r,
        design.s,
        family,
        table_fit.label(),
        summary.replicates_total,
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
    )?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_design() -> SimDesign {
        SimDesign {
            n: 4,
            p: 2,
            n_subjects: 3,
            t_obs: 2,
            r: 2,
            s: 0.2,
            replicates: 2,
            master_seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_sparsity_and_zero_noise_reproduce_theta() {
        let design = SimDesign {
            s: 0.0,
            theta_var: 0.0,
            noise_var: 1e-12,
            ..micro_design()
        };
        let (dataset, truth) = generate(&design, 0).unwrap();
        assert_eq!(truth.coef().nnz(), 0);
        let theta = truth.theta_matrix();
        for subj in dataset.subjects() {
            for a in subj.responses() {
                assert!((a - &theta).abs().max() < 1e-4);
            }
        }
    }

    #[test]
    fn generated_theta_is_symmetric_psd_low_rank() {
        let (_, truth) = generate(&micro_design(), 1).unwrap();
        let theta = truth.theta_matrix();
        assert_eq!((&theta - theta.transpose()).abs().max(), 0.0);
        let eig = theta.symmetric_eigen();
        for v in eig.eigenvalues.iter() {
            assert!(*v > -1e-10);
        }
        let nonzero = eig.eigenvalues.iter().filter(|v| v.abs() > 1e-10).count();
        assert!(nonzero <= 2);
    }

    #[test]
    fn coefficient_count_matches_binomial_moments() {
        // Mean nonzero count over replicates ~ Binomial(n^2 p, s).
        let design = SimDesign {
            n: 30,
            p: 5,
            s: 0.1,
            n_subjects: 1,
            t_obs: 1,
            replicates: 100,
            master_seed: 2,
            ..Default::default()
        };
        let total = (design.n * design.n * design.p) as f64;
        let mut counts = Vec::new();
        for rep in 0..100 {
            let (_, truth) = generate(&design, rep).unwrap();
            counts.push(truth.coef().nnz() as f64);
        }
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        let expect = total * design.s;
        let sd = (total * design.s * (1.0 - design.s)).sqrt();
        let se = sd / (counts.len() as f64).sqrt();
        assert!(
            (mean - expect).abs() < 3.0 * se + 1e-9,
            "mean count {mean} vs {expect} (se {se})"
        );
    }

    #[test]
    fn generator_is_deterministic_and_replicate_independent() {
        let design = micro_design();
        let (d1, t1) = generate(&design, 1).unwrap();
        let (d2, t2) = generate(&design, 1).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(t1, t2);
        let (d0, _) = generate(&design, 0).unwrap();
        assert_ne!(d0, d1);
    }

    #[test]
    fn logistic_generator_matches_sigmoid_probabilities() {
        let design = SimDesign {
            n: 2,
            p: 1,
            n_subjects: 2000,
            t_obs: 1,
            r: 1,
            s: 0.0,
            family: Family::BernoulliLogit,
            theta_var: 0.0,
            master_seed: 7,
            replicates: 1,
            ..Default::default()
        };
        let (dataset, truth) = generate(&design, 0).unwrap();
        let theta = truth.theta_matrix();
        for j in 0..2 {
            for k in 0..2 {
                let p = sigmoid(theta[(j, k)]);
                let mut ones = 0.0;
                for subj in dataset.subjects() {
                    ones += subj.responses()[0][(j, k)];
                }
                let n = dataset.n_subjects() as f64;
                let phat = ones / n;
                let sd = (p * (1.0 - p) / n).sqrt();
                assert!(
                    (phat - p).abs() < 3.0 * sd + 1e-9,
                    "empirical {phat} vs sigmoid {p}"
                );
            }
        }
    }

    #[test]
    fn evaluate_known_cases() {
        let (_, truth) = generate(&micro_design(), 0).unwrap();

        // Identical parameters: perfect metrics.
        let m = evaluate(&truth, &truth).unwrap();
        assert_eq!(
            (m.theta_err, m.b_err, m.sensitivity, m.specificity),
            (0.0, 0.0, 1.0, 1.0)
        );

        // Zero coefficient estimate: sensitivity 0, specificity 1.
        let mut zeroed = truth.clone();
        zeroed.set_coef(CoefTensor::zeros(truth.n(), truth.p()));
        let m = evaluate(&zeroed, &truth).unwrap();
        assert!(truth.coef().nnz() > 0);
        assert_eq!(m.sensitivity, 0.0);
        assert_eq!(m.specificity, 1.0);
        assert!(!m.sensitivity_by_convention);

        // All-zero truth: sensitivity 1 by convention, flagged.
        let m = evaluate(&truth, &zeroed).unwrap();
        assert_eq!(m.sensitivity, 1.0);
        assert!(m.sensitivity_by_convention);
        assert!(m.specificity < 1.0);

        // Dimension mismatch rejected.
        let (_, other) = generate(&SimDesign { n: 5, ..micro_design() }, 0).unwrap();
        assert!(evaluate(&other, &truth).is_err());
    }

    #[test]
    fn evaluate_matches_confusion_loop_oracle() {
        let (_, truth) = generate(&micro_design(), 3).unwrap();
        let (_, fitted) = generate(&micro_design(), 4).unwrap();
        let m = evaluate(&fitted, &truth).unwrap();

        let (mut tp, mut fn_, mut tn, mut fp) = (0.0, 0.0, 0.0, 0.0);
        let mut dt = 0.0;
        let mut db = 0.0;
        for j in 0..truth.n() {
            for k in 0..truth.n() {
                let d = fitted.theta_matrix()[(j, k)] - truth.theta_matrix()[(j, k)];
                dt += d * d;
                for l in 0..truth.p() {
                    let t = truth.coef().get(j, k, l);
                    let f = fitted.coef().get(j, k, l);
                    let d = f - t;
                    db += d * d;
                    match (t != 0.0, f != 0.0) {
                        (true, true) => tp += 1.0,
                        (true, false) => fn_ += 1.0,
                        (false, false) => tn += 1.0,
                        (false, true) => fp += 1.0,
                    }
                }
            }
        }
        assert!((m.theta_err - dt.sqrt()).abs() < 1e-12);
        assert!((m.b_err - db.sqrt()).abs() < 1e-12);
        assert!((m.sensitivity - tp / (tp + fn_)).abs() < 1e-12);
        assert!((m.specificity - tn / (tn + fp)).abs() < 1e-12);
    }

    #[test]
    fn summarize_matches_hand_computed_mean_sd() {
        let rows: Vec<ReplicateRow> = [(1.0, 2.0), (2.0, 4.0), (3.0, 6.0)]
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| ReplicateRow {
                replicate: i,
                status: "ok".to_string(),
                metrics: Some(MetricRow {
                    theta_err: a,
                    b_err: b,
                    sensitivity: 1.0,
                    specificity: 1.0,
                    sensitivity_by_convention: false,
                }),
                wall_time_s: 0.0,
            })
            .collect();
        let s = summarize(&rows);
        assert_eq!(s.replicates_ok, 3);
        assert!((s.theta_err_mean - 2.0).abs() < 1e-15);
        assert!((s.theta_err_sd - 1.0).abs() < 1e-15);
        assert!((s.b_err_mean - 4.0).abs() < 1e-15);
        assert!((s.b_err_sd - 2.0).abs() < 1e-15);

        // Single row: sd reported as 0.
        let single = summarize(&rows[..1]);
        assert_eq!(single.theta_err_sd, 0.0);
        assert_eq!(single.theta_err_mean, 1.0);
    }
}
