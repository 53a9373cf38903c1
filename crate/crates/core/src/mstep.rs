//! M-step: proximal gradient descent with hard thresholding.
//!
//! Minimizes `F(params) = Q1(params) + gamma * ||U^T U - V^T V||_F^2`
//! subject to an L0 budget on the coefficient tensor, with the Monte
//! Carlo sample bank held fixed. Blocks are updated sequentially with
//! fresh gradients between blocks: `U` first, then `V` at the updated
//! `U`, then `B` at the updated `(U, V)` followed by the
//! hard-threshold projection. A rejected step doubles the curvature
//! constant `c` and retries.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    sigmoid, CoefTensor, EntryMask, Family, InterceptFactor, LongitudinalNetworkDataset,
    ModelParams, SubjectRecord,
};
use crate::sampler::{q1, MwgState, SubjectSamples};

/// Hard cap for the backtracking curvature constant.
const C_MAX: f64 = (1u64 << 60) as f64;

/// Inner-loop configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MstepConfig {
    /// Weight of the factor-balance regularizer (asymmetric mode only).
    pub gamma: f64,
    /// Sparsity fraction: the budget keeps `round(s * n^2 * p)` entries.
    pub s: f64,
    /// Initial curvature constant `c`.
    pub c0: f64,
    /// Termination threshold on the max squared block change.
    pub eps_m: f64,
    pub max_inner_iters: usize,
    /// Per-block learning-rate scales for `U`, `V`, `B`.
    pub step_multipliers: [f64; 3],
}

impl Default for MstepConfig {
    fn default() -> Self {
        MstepConfig {
            gamma: 1.0,
            s: 0.0,
            c0: 1.0,
            eps_m: 1e-6,
            max_inner_iters: 500,
            step_multipliers: [1.0, 1.0, 1.0],
        }
    }
}

impl MstepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid("gamma must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.s) {
            return Err(Error::invalid("sparsity fraction s must lie in [0, 1]"));
        }
        if !(self.c0 > 0.0) {
            return Err(Error::invalid("c0 must be positive"));
        }
        if !(self.eps_m > 0.0) {
            return Err(Error::invalid("eps_m must be positive"));
        }
        if self.step_multipliers.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::invalid("step multipliers must be positive"));
        }
        Ok(())
    }
}

/// Analytic gradients of `F` with respect to each block.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub du: DMatrix<f64>,
    /// `None` in symmetric mode.
    pub dv: Option<DMatrix<f64>>,
    pub db: CoefTensor,
}

/// L0 budget: `round(s * n^2 * p)` tensor entries, clamped to the
/// total entry count.
pub fn sparsity_budget(s: f64, n: usize, p: usize) -> usize {
    let total = n * n * p;
    ((s * total as f64).round() as usize).min(total)
}

/// Sigmoid of `base + shift` via the cached `exp(base)`.
#[inline]
fn sigmoid_shifted(base: f64, base_exp: f64, shift_exp: f64, shift: f64) -> f64 {
    let w = base_exp * shift_exp;
    if w.is_nan() {
        sigmoid(base + shift)
    } else if w.is_infinite() {
        1.0
    } else {
        w / (1.0 + w)
    }
}

/// Per-observation entry weights `d Q1 / d eta_it = (1/M) sum_m (psi'(eta^m) - a)`,
/// reduced to the per-subject total and (optionally) the covariate
/// contraction needed for the `B` gradient.
fn weight_pass(
    params: &ModelParams,
    family: Family,
    dataset: &LongitudinalNetworkDataset,
    state: &MwgState,
    mask: EntryMask,
    want_db: bool,
) -> (DMatrix<f64>, Option<Vec<DMatrix<f64>>>) {
    assert_eq!(
        state.subjects().len(),
        dataset.n_subjects(),
        "state was generated against a different dataset"
    );
    let n = params.n();
    let p = params.p();
    let theta_mat = params.theta_matrix();

    let partials: Vec<(DMatrix<f64>, Option<Vec<DMatrix<f64>>>)> = dataset
        .subjects()
        .par_iter()
        .zip(state.subjects())
        .map(|(subj, bank)| {
            weight_pass_subject(params, family, subj, bank, &theta_mat, mask, state.m(), want_db)
        })
        .collect();

    // Fixed-order reduction: bitwise reproducible across thread counts.
    let mut w_total = DMatrix::zeros(n, n);
    let mut db = if want_db { Some(vec![DMatrix::zeros(n, n); p]) } else { None };
    for (w, d) in partials {
        w_total += w;
        if let (Some(acc), Some(part)) = (&mut db, d) {
            for (a, b) in acc.iter_mut().zip(part) {
                *a += b;
            }
        }
    }
    (w_total, db)
}

#[allow(clippy::too_many_arguments)]
fn weight_pass_subject(
    params: &ModelParams,
    family: Family,
    subject: &SubjectRecord,
    bank: &SubjectSamples,
    theta_mat: &DMatrix<f64>,
    mask: EntryMask,
    m: usize,
    want_db: bool,
) -> (DMatrix<f64>, Option<Vec<DMatrix<f64>>>) {
    let n = params.n();
    let nn = n * n;
    let p = params.p();
    let mf = m as f64;
    let t_count = subject.n_obs();

    let mut mask_flat = vec![false; nn];
    for j in 0..n {
        for k in 0..n {
            if mask.includes(j, k) {
                mask_flat[k * n + j] = true;
            }
        }
    }

    let mut w_total = DMatrix::zeros(n, n);
    let mut db = if want_db { Some(vec![DMatrix::zeros(n, n); p]) } else { None };
    let mut ct = DMatrix::zeros(n, n);
    let mut w_it = vec![0.0; nn];

    match family {
        Family::GaussianIdentity => {
            let s2 = params.sigma_e2();
            let mean = bank.mean.as_slice();
            for (a, x) in subject.responses().iter().zip(subject.covariates()) {
                params.coef().contract_into(x, &mut ct);
                let av = a.as_slice();
                let tv = theta_mat.as_slice();
                let cv = ct.as_slice();
                for e in 0..nn {
                    w_it[e] = if mask_flat[e] {
                        (tv[e] + mean[e] + cv[e] - av[e]) / s2
                    } else {
                        0.0
                    };
                }
                accumulate(&mut w_total, db.as_mut(), &w_it, x.as_slice());
            }
        }
        Family::BernoulliLogit => {
            // Mean response probability over the sample bank, per (t, e).
            let mut base = vec![0.0; t_count * nn];
            let mut base_exp = vec![0.0; t_count * nn];
            let mut cts = Vec::with_capacity(t_count);
            for (t, x) in subject.covariates().iter().enumerate() {
                params.coef().contract_into(x, &mut ct);
                let tv = theta_mat.as_slice();
                let cv = ct.as_slice();
                for e in 0..nn {
                    let b = tv[e] + cv[e];
                    base[t * nn + e] = b;
                    base_exp[t * nn + e] = b.exp();
                }
                cts.push(ct.clone());
            }
            let mut pi_sum = vec![0.0; t_count * nn];
            let mut th_exp = vec![0.0; nn];
            for sample in &bank.samples {
                let sv = sample.as_slice();
                for e in 0..nn {
                    if mask_flat[e] {
                        th_exp[e] = sv[e].exp();
                    }
                }
                for t in 0..t_count {
                    let off = t * nn;
                    for e in 0..nn {
                        if mask_flat[e] {
                            pi_sum[off + e] += sigmoid_shifted(
                                base[off + e],
                                base_exp[off + e],
                                th_exp[e],
                                sv[e],
                            );
                        }
                    }
                }
            }
            for (t, (a, x)) in
                subject.responses().iter().zip(subject.covariates()).enumerate()
            {
                let av = a.as_slice();
                let off = t * nn;
                for e in 0..nn {
                    w_it[e] =
                        if mask_flat[e] { pi_sum[off + e] / mf - av[e] } else { 0.0 };
                }
                accumulate(&mut w_total, db.as_mut(), &w_it, x.as_slice());
            }
        }
    }
    (w_total, db)
}

#[inline]
fn accumulate(
    w_total: &mut DMatrix<f64>,
    db: Option<&mut Vec<DMatrix<f64>>>,
    w_it: &[f64],
    x: &[f64],
) {
    for (acc, w) in w_total.as_mut_slice().iter_mut().zip(w_it) {
        *acc += w;
    }
    if let Some(db) = db {
        for (slice, &xl) in db.iter_mut().zip(x) {
            if xl != 0.0 {
                for (acc, w) in slice.as_mut_slice().iter_mut().zip(w_it) {
                    *acc += xl * w;
                }
            }
        }
    }
}

/// Factor imbalance `S = U^T U - V^T V`.
fn balance_matrix(u: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    u.transpose() * u - v.transpose() * v
}

/// The M-step objective `Q1 + gamma ||U^T U - V^T V||_F^2` (the
/// regularizer is absent in symmetric mode).
pub fn objective_f(
    params: &ModelParams,
    family: Family,
    dataset: &LongitudinalNetworkDataset,
    state: &MwgState,
    gamma: f64,
    mask: EntryMask,
) -> f64 {
    let base = q1(params, family, dataset, state, mask);
    match params.intercept() {
        InterceptFactor::Factored { u, v } => {
            base + gamma * balance_matrix(u, v).norm_squared()
        }
        InterceptFactor::SymmetricFactored { .. } => base,
    }
}

fn grad_v(
    params: &ModelParams,
    family: Family,
    dataset: &LongitudinalNetworkDataset,
    state: &MwgState,
    gamma: f64,
    mask: EntryMask,
) -> DMatrix<f64> {
    let (w_total, _) = weight_pass(params, family, dataset, state, mask, false);
    match params.intercept() {
        InterceptFactor::Factored { u, v } => {
            w_total.transpose() * u - 4.0 * gamma * v * balance_matrix(u, v)
        }
        InterceptFactor::SymmetricFactored { .. } => {
            unreachable!("symmetric mode has no V block")
        }
    }
}

fn grad_b(
    params: &ModelParams,
    family: Family,
    dataset: &LongitudinalNetworkDataset,
    state: &MwgState,
    mask: EntryMask,
) -> CoefTensor {
    let (_, db) = weight_pass(params, family, dataset, state, mask, true);
    CoefTensor::from_slices(db.expect("db requested")).expect("consistent shapes")
}

/// Full gradient bundle of `F` at `params` (all blocks at the same
/// point; the sequential updates of [`proximal_step`] re-evaluate
/// between blocks).
pub fn gradient(
    params: &ModelParams,
    family: Family,
    dataset: &LongitudinalNetworkDataset,
    state: &MwgState,
    gamma: f64,
    mask: EntryMask,
) -> GradientBundle {
    let (w_total, db) = weight_pass(params, family, dataset, state, mask, true);
    let db = CoefTensor::from_slices(db.expect("db requested")).expect("consistent shapes");
    match params.intercept() {
        InterceptFactor::Factored { u, v } => {
            let s_mat = balance_matrix(u, v);
            GradientBundle {
                du: &w_total * v + 4.0 * gamma * u * &s_mat,
                dv: Some(w_total.transpose() * u - 4.0 * gamma * v * &s_mat),
                db,
            }
        }
        InterceptFactor::SymmetricFactored { u, lambda } => {
            let mut ul = u.clone();
            for (c, s) in lambda.iter().enumerate() {
                ul.column_mut(c).scale_mut(*s);
            }
            GradientBundle { du: (&w_total + w_total.transpose()) * ul, dv: None, db }
        }
    }
}

/// Keep the `k` largest-magnitude entries of `b`, zeroing the rest.
/// Ties at the cutoff magnitude keep the lexicographically earliest
/// `(j, j', l)` indices.
pub fn hard_threshold(b: &CoefTensor, k: usize) -> CoefTensor {
    let total = b.total_entries();
    if k >= total {
        return b.clone();
    }
    let mut out = CoefTensor::zeros(b.n(), b.p());
    if k == 0 {
        return out;
    }
    let mut entries: Vec<(f64, usize, usize, usize, f64)> = b
        .iter_lex()
        .map(|(j, jp, l, v)| (v.abs(), j, jp, l, v))
        .collect();
    entries.sort_unstable_by(|a, b| {
        b.0.total_cmp(&a.0).then_with(|| (a.1, a.2, a.3).cmp(&(b.1, b.2, b.3)))
    });
    for &(_, j, jp, l, v) in entries.iter().take(k) {
        out.set(j, jp, l, v);
    }
    out
}

/// One sequential proximal step at curvature `c`.
///
/// `grads` must hold the gradient of `F` at `params`; only its `du`
/// block is consumed (it does not depend on `c`, so callers reuse it
/// across backtracking retries). `V` and `B` gradients are re-evaluated
/// at the updated blocks.
#[allow(clippy::too_many_arguments)]
pub fn proximal_step(
    params: &ModelParams,
    grads: &GradientBundle,
    family: Family,
    dataset: &LongitudinalNetworkDataset,
    state: &MwgState,
    c: f64,
    config: &MstepConfig,
    mask: EntryMask,
) -> ModelParams {
    assert!(c > 0.0);
    let n = params.n();
    let p = params.p();
    let k = sparsity_budget(config.s, n, p);
    let [mu, mv, mb] = config.step_multipliers;
    let mut current = params.clone();

    match params.intercept() {
        InterceptFactor::Factored { u, v } => {
            let u_new = u - (mu / c) * &grads.du;
            current.set_intercept(InterceptFactor::Factored { u: u_new.clone(), v: v.clone() });
            let dv = grad_v(&current, family, dataset, state, config.gamma, mask);
            let v_new = v - (mv / c) * dv;
            current.set_intercept(InterceptFactor::Factored { u: u_new, v: v_new });
        }
        InterceptFactor::SymmetricFactored { u, lambda } => {
            let u_new = u - (mu / c) * &grads.du;
            current.set_intercept(InterceptFactor::SymmetricFactored {
                u: u_new,
                lambda: lambda.clone(),
            });
        }
    }

    if k == 0 {
        current.set_coef(CoefTensor::zeros(n, p));
    } else {
        let db = grad_b(&current, family, dataset, state, mask);
        let stepped: Vec<DMatrix<f64>> = current
            .coef()
            .slices()
            .iter()
            .zip(db.slices())
            .map(|(b, g)| b - (mb / c) * g)
            .collect();
        let stepped = CoefTensor::from_slices(stepped).expect("consistent shapes");
        current.set_coef(hard_threshold(&stepped, k));
    }
    current
}

/// Outcome of [`run_mstep`].
#[derive(Debug, Clone)]
pub struct MstepOutcome {
    pub params: ModelParams,
    /// Objective values: `trace[0]` at entry, one value per accepted
    /// iteration after that.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Iterate proximal steps with backtracking until the squared block
/// changes drop below `eps_m` or `max_inner_iters` is hit. A candidate
/// is accepted when the objective does not increase; otherwise `c`
/// doubles and the step is retried, so the accepted trace is
/// non-increasing by construction.
pub fn run_mstep(
    params_init: ModelParams,
    family: Family,
    dataset: &LongitudinalNetworkDataset,
    state: &MwgState,
    config: &MstepConfig,
    mask: EntryMask,
) -> Result<MstepOutcome> {
    config.validate()?;
    let mut params = params_init;
    let mut c = config.c0;
    let mut f_cur = objective_f(&params, family, dataset, state, config.gamma, mask);
    if !f_cur.is_finite() {
        return Err(Error::numerical(0, "non-finite objective entering the M-step"));
    }
    let mut trace = vec![f_cur];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..config.max_inner_iters {
        let grads = gradient(&params, family, dataset, state, config.gamma, mask);
        let candidate = loop {
            let candidate =
                proximal_step(&params, &grads, family, dataset, state, c, config, mask);
            let f_new = objective_f(&candidate, family, dataset, state, config.gamma, mask);
            if f_new <= f_cur {
                f_cur = f_new;
                break candidate;
            }
            c *= 2.0;
            if c > C_MAX {
                return Err(Error::numerical(
                    0,
                    "backtracking exceeded the curvature cap; objective cannot decrease",
                ));
            }
        };
        iterations += 1;
        trace.push(f_cur);

        let delta = block_delta(&params, &candidate);
        params = candidate;
        if delta < config.eps_m {
            converged = true;
            break;
        }
    }
    Ok(MstepOutcome { params, trace, converged, iterations })
}

/// `max(||dU||_F^2, ||dV||_F^2, ||dB||_F^2)` between two iterates.
fn block_delta(a: &ModelParams, b: &ModelParams) -> f64 {
    let d_factor = match (a.intercept(), b.intercept()) {
        (
            InterceptFactor::Factored { u: ua, v: va },
            InterceptFactor::Factored { u: ub, v: vb },
        ) => {
            let du = (ua - ub).norm_squared();
            let dv = (va - vb).norm_squared();
            du.max(dv)
        }
        (
            InterceptFactor::SymmetricFactored { u: ua, .. },
            InterceptFactor::SymmetricFactored { u: ub, .. },
        ) => (ua - ub).norm_squared(),
        _ => unreachable!("modes cannot change inside the M-step"),
    };
    d_factor.max(a.coef().frob_norm_sq_diff(b.coef()))
}

/// Closed-form complete-data maximizer of the Gaussian dispersion:
/// the mean squared residual over samples, subjects, times and masked
/// entries. Callers floor the result before storing it.
pub fn update_sigma_e2(
    params: &ModelParams,
    family: Family,
    dataset: &LongitudinalNetworkDataset,
    state: &MwgState,
    mask: EntryMask,
) -> Result<f64> {
    if family != Family::GaussianIdentity {
        return Err(Error::unsupported("sigma_e2 is a Gaussian-family parameter"));
    }
    let n = params.n();
    let nn = n * n;
    let theta_mat = params.theta_matrix();
    let mf = state.m() as f64;
    let mut mask_flat = vec![false; nn];
    for j in 0..n {
        for k in 0..n {
            if mask.includes(j, k) {
                mask_flat[k * n + j] = true;
            }
        }
    }
    let per_subject: Vec<(f64, usize)> = dataset
        .subjects()
        .par_iter()
        .zip(state.subjects())
        .map(|(subj, bank)| {
            let mut acc = 0.0;
            let mut count = 0usize;
            let mut ct = DMatrix::zeros(n, n);
            let mean = bank.mean.as_slice();
            let ss = bank.ss.as_slice();
            for (a, x) in subj.responses().iter().zip(subj.covariates()) {
                params.coef().contract_into(x, &mut ct);
                let av = a.as_slice();
                let tv = theta_mat.as_slice();
                let cv = ct.as_slice();
                for e in 0..nn {
                    if mask_flat[e] {
                        let d = av[e] - tv[e] - cv[e] - mean[e];
                        acc += d * d + ss[e] / mf;
                        count += 1;
                    }
                }
            }
            (acc, count)
        })
        .collect();
    let total: f64 = per_subject.iter().map(|p| p.0).sum();
    let count: usize = per_subject.iter().map(|p| p.1).sum();
    if count == 0 {
        return Err(Error::invalid("no masked observations"));
    }
    Ok(total / count as f64)
}
