//! EBIC-based two-stage rank and sparsity selection.
//!
//! Stage 1 fixes `s = 0` and scans the rank grid; stage 2 fixes the
//! selected rank and scans the sparsity grid, warm-starting each fit
//! from the stage-1 winner. The criterion is
//!
//! ```text
//! EBIC = -2 l(params) + [log(n^2 N) + C log(n^2 (p+1))] (2 n r + s p n^2)
//! ```
//!
//! evaluated with the deterministic quadrature likelihood, so the
//! argmin is reproducible across the grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcem::{fit, fit_from, McemConfig};
use crate::model::{Family, LongitudinalNetworkDataset, ModelParams};

/// Candidate grids and the EBIC constant.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningGrid {
    pub r_candidates: Vec<usize>,
    pub s_candidates: Vec<f64>,
    /// EBIC model-space constant `C`.
    pub c: f64,
}

impl Default for TuningGrid {
    fn default() -> Self {
        TuningGrid {
            r_candidates: vec![1, 2, 3, 4],
            s_candidates: vec![0.01, 0.02, 0.05, 0.08, 0.1],
            c: 0.5,
        }
    }
}

impl TuningGrid {
    pub fn validate(&self) -> Result<()> {
        if self.r_candidates.is_empty() || self.s_candidates.is_empty() {
            return Err(Error::invalid("tuning grids must be non-empty"));
        }
        if self.r_candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("r candidates must be strictly ascending"));
        }
        if self.s_candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("s candidates must be strictly ascending"));
        }
        if self.s_candidates.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid("s candidates must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One evaluated grid cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneCell {
    pub stage: u8,
    pub r: usize,
    /// Grid value of `s`.
    pub s: f64,
    /// Realized nonzero fraction of the fitted tensor (the EBIC dof
    /// uses this, so degenerate fits are not over-penalized).
    pub s_realized: f64,
    pub ebic: f64,
    pub loglik_hat: f64,
    pub converged: bool,
    /// `"ok"` or `"failed"` (fit divergence makes a cell infeasible
    /// instead of aborting the search).
    pub status: String,
}

/// Two-stage search outcome.
#[derive(Debug, Clone)]
pub struct TuningReport {
    pub cells: Vec<TuneCell>,
    pub r_star: usize,
    pub s_star: f64,
    /// Fitted parameters of the selected stage-2 cell.
    pub selected_fit: ModelParams,
}

/// Extended Bayesian Information Criterion,
/// `-2 l + [log(n^2 N) + C log(n^2 (p+1))] (2 n r + s p n^2)`.
pub fn ebic(
    loglik_hat: f64,
    n: usize,
    n_subjects: usize,
    p: usize,
    r: usize,
    s: f64,
    c: f64,
) -> f64 {
    let n2 = (n * n) as f64;
    let scale = (n2 * n_subjects as f64).ln() + c * (n2 * (p as f64 + 1.0)).ln();
    let dof = 2.0 * (n * r) as f64 + s * p as f64 * n2;
    -2.0 * loglik_hat + scale * dof
}

fn realized_fraction(params: &ModelParams) -> f64 {
    let total = params.coef().total_entries();
    if total == 0 {
        0.0
    } else {
        params.coef().nnz() as f64 / total as f64
    }
}

fn cell_from_fit(
    stage: u8,
    r: usize,
    s: f64,
    grid: &TuningGrid,
    dataset: &LongitudinalNetworkDataset,
    result: Result<crate::mcem::FitReport>,
) -> (TuneCell, Option<ModelParams>) {
    match result {
        Ok(report) => {
            let s_realized = realized_fraction(&report.params);
            let val = ebic(
                report.loglik_hat,
                dataset.n(),
                dataset.n_subjects(),
                dataset.p(),
                r,
                s_realized,
                grid.c,
            );
            (
                TuneCell {
                    stage,
                    r,
                    s,
                    s_realized,
                    ebic: val,
                    loglik_hat: report.loglik_hat,
                    converged: report.converged,
                    status: "ok".to_string(),
                },
                Some(report.params),
            )
        }
        Err(e) => {
            log::warn!("tuning cell (stage {stage}, r = {r}, s = {s}) failed: {e}");
            (
                TuneCell {
                    stage,
                    r,
                    s,
                    s_realized: 0.0,
                    ebic: f64::INFINITY,
                    loglik_hat: f64::NEG_INFINITY,
                    converged: false,
                    status: "failed".to_string(),
                },
                None,
            )
        }
    }
}

/// Stage 1: scan the rank grid at `s = 0` (the coefficient tensor is
/// forced to zero). Ties break toward the smaller rank. Returns the
/// winning rank, the stage trace, and the winning fit for warm starts.
pub fn select_rank(
    dataset: &LongitudinalNetworkDataset,
    family: Family,
    grid: &TuningGrid,
    base: &McemConfig,
) -> Result<(usize, Vec<TuneCell>, ModelParams)> {
    grid.validate()?;
    let mut cells = Vec::with_capacity(grid.r_candidates.len());
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for &r in &grid.r_candidates {
        let mut config = base.clone();
        config.r = r;
        config.mstep.s = 0.0;
        let (cell, params) = cell_from_fit(1, r, 0.0, grid, dataset, fit(dataset, family, &config));
        if let Some(params) = params {
            if best.as_ref().is_none_or(|(b, ..)| cell.ebic < *b) {
                best = Some((cell.ebic, r, params));
            }
        }
        cells.push(cell);
    }
    let (_, r_star, warm) =
        best.ok_or_else(|| Error::numerical(0, "every rank candidate failed to fit"))?;
    Ok((r_star, cells, warm))
}

/// Stage 2: scan the sparsity grid at the selected rank, warm-starting
/// every fit from the stage-1 winner. Ties break toward smaller `s`.
pub fn select_sparsity(
    dataset: &LongitudinalNetworkDataset,
    family: Family,
    r_star: usize,
    warm: &ModelParams,
    grid: &TuningGrid,
    base: &McemConfig,
) -> Result<(f64, Vec<TuneCell>, ModelParams)> {
    grid.validate()?;
    if warm.rank() != r_star {
        return Err(Error::invalid("warm start rank does not match r_star"));
    }
    let mut cells = Vec::with_capacity(grid.s_candidates.len());
    let mut best: Option<(f64, f64, ModelParams)> = None;
    for &s in &grid.s_candidates {
        let mut config = base.clone();
        config.r = r_star;
        config.mstep.s = s;
        let (cell, params) = cell_from_fit(
            2,
            r_star,
            s,
            grid,
            dataset,
            fit_from(dataset, family, &config, warm.clone()),
        );
        if let Some(params) = params {
            if best.as_ref().is_none_or(|(b, ..)| cell.ebic < *b) {
                best = Some((cell.ebic, s, params));
            }
        }
        cells.push(cell);
    }
    let (_, s_star, selected) =
        best.ok_or_else(|| Error::numerical(0, "every sparsity candidate failed to fit"))?;
    Ok((s_star, cells, selected))
}

/// Full two-stage search: `|r_candidates| + |s_candidates|` fits.
pub fn tune(
    dataset: &LongitudinalNetworkDataset,
    family: Family,
    grid: &TuningGrid,
    base: &McemConfig,
) -> Result<TuningReport> {
    let (r_star, mut cells, warm) = select_rank(dataset, family, grid, base)?;
    let (s_star, stage2, selected_fit) =
        select_sparsity(dataset, family, r_star, &warm, grid, base)?;
    cells.extend(stage2);
    Ok(TuningReport { cells, r_star, s_star, selected_fit })
}
