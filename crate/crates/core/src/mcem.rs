//! Monte Carlo EM driver.
//!
//! Alternates the Metropolis-within-Gibbs E-step with the proximal
//! gradient M-step from a truncated-SVD initialization, monitors the
//! stochastic objective for convergence, and estimates the observed
//! log-likelihood by entrywise adaptive Gauss-Hermite quadrature.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    sigmoid, CoefTensor, EntryMask, Family, InterceptFactor, LongitudinalNetworkDataset,
    ModelParams,
};
use crate::mstep::{run_mstep, update_sigma_e2, MstepConfig};
use crate::quad::{newton_concave_max, GaussHermite};
use crate::rng::{mix_key, purpose};
use crate::sampler::{draw_samples_warm, q1, q2, MwgConfig, MwgState};

const LN_2PI: f64 = 1.8378770664093453;
const SIGMA_FLOOR: f64 = 1e-8;
/// Consecutive sub-tolerance relative changes required to declare
/// convergence (smooths over Monte Carlo noise between E-steps).
const CONVERGENCE_STREAK: usize = 3;

/// Intercept handling of the EM loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Asymmetric,
    SymmetricRefine,
}

/// Random-intercept variance handling.
#[derive(Debug, Clone)]
pub enum SigmaThetaPolicy {
    /// One shared variance for every entry, fixed during estimation.
    FixedScalar(f64),
    /// Full variance matrix, fixed during estimation.
    FixedMatrix(DMatrix<f64>),
    /// Start from a shared value, refresh by the Monte Carlo second
    /// moment after each E-step.
    MomentRefresh { init: f64 },
}

impl SigmaThetaPolicy {
    fn initial_matrix(&self, n: usize) -> Result<DMatrix<f64>> {
        match self {
            SigmaThetaPolicy::FixedScalar(v) | SigmaThetaPolicy::MomentRefresh { init: v } => {
                if !(*v >= 0.0) {
                    return Err(Error::invalid("sigma_theta must be nonnegative"));
                }
                Ok(DMatrix::from_element(n, n, *v))
            }
            SigmaThetaPolicy::FixedMatrix(m) => {
                if m.nrows() != n || m.ncols() != n {
                    return Err(Error::invalid("sigma_theta matrix must be n x n"));
                }
                Ok(m.clone())
            }
        }
    }

    fn refreshes(&self) -> bool {
        matches!(self, SigmaThetaPolicy::MomentRefresh { .. })
    }
}

/// Outer-loop configuration.
#[derive(Debug, Clone)]
pub struct McemConfig {
    pub r: usize,
    pub mwg: MwgConfig,
    pub mstep: MstepConfig,
    /// Relative-objective tolerance of the outer loop.
    pub eps_em: f64,
    pub max_outer_iters: usize,
    pub mode: Mode,
    /// Re-estimate the Gaussian dispersion once per outer iteration.
    pub sigma_e2_update: bool,
    pub sigma_theta: SigmaThetaPolicy,
    /// Gauss-Hermite nodes for the observed-likelihood estimate.
    pub quad_points: usize,
}

impl McemConfig {
    pub fn new(r: usize) -> Self {
        McemConfig {
            r,
            mwg: MwgConfig::default(),
            mstep: MstepConfig::default(),
            eps_em: 1e-4,
            max_outer_iters: 100,
            mode: Mode::Asymmetric,
            sigma_e2_update: true,
            sigma_theta: SigmaThetaPolicy::FixedScalar(1.0),
            quad_points: 20,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.r == 0 || self.r > n {
            return Err(Error::invalid(format!(
                "rank r = {} must satisfy 1 <= r <= n = {n}",
                self.r
            )));
        }
        if !(self.eps_em > 0.0) {
            return Err(Error::invalid("eps_em must be positive"));
        }
        if self.quad_points < 1 {
            return Err(Error::invalid("quad_points must be >= 1"));
        }
        self.mwg.validate()?;
        self.mstep.validate()
    }
}

/// Objective decomposition of one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ObjectivePoint {
    pub q1: f64,
    pub q2: f64,
    /// `q1 + q2 + gamma ||U^T U - V^T V||_F^2`.
    pub penalized: f64,
}

/// Fit outcome: best-objective iterate with diagnostics.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: ModelParams,
    pub objective_trace: Vec<ObjectivePoint>,
    pub loglik_hat: f64,
    pub converged: bool,
    pub iterations: usize,
    pub wall_time: f64,
    /// Post-burn-in acceptance (mean, min, max) of the final E-step.
    pub acceptance_summary: (f64, f64, f64),
}

/// Rank-`r` initialization from the truncated SVD of `g(Abar)`, where
/// `Abar` averages every response over subjects and time. `U` and `V`
/// take the symmetric split `Ubar S^{1/2}`, `Vbar S^{1/2}`, so the
/// factors start exactly balanced; `B` starts at zero.
pub fn initialize(
    dataset: &LongitudinalNetworkDataset,
    family: Family,
    r: usize,
    sigma_theta: DMatrix<f64>,
) -> Result<ModelParams> {
    let n = dataset.n();
    if r == 0 || r > n {
        return Err(Error::invalid(format!("rank r = {r} must satisfy 1 <= r <= n = {n}")));
    }
    let total_obs = dataset.total_obs();
    if total_obs == 0 {
        return Err(Error::invalid("initialization needs at least one observation"));
    }
    let mut abar = DMatrix::zeros(n, n);
    for s in dataset.subjects() {
        for a in s.responses() {
            abar += a;
        }
    }
    abar /= total_obs as f64;

    let g_abar = match family {
        Family::GaussianIdentity => abar,
        Family::BernoulliLogit => {
            // Empirical-logit clamp keeps cells at 0 or 1 finite.
            let delta = 1.0 / (2.0 * total_obs as f64);
            abar.map(|v| {
                let p = v.clamp(delta, 1.0 - delta);
                (p / (1.0 - p)).ln()
            })
        }
    };
    if g_abar.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite link-transformed mean response"));
    }

    let svd = g_abar.clone().svd(true, true);
    let u_full = svd.u.as_ref().expect("requested U");
    let vt_full = svd.v_t.as_ref().expect("requested V^T");
    let mut u0 = DMatrix::zeros(n, r);
    let mut v0 = DMatrix::zeros(n, r);
    for c in 0..r {
        let s_sqrt = svd.singular_values[c].max(0.0).sqrt();
        for j in 0..n {
            u0[(j, c)] = u_full[(j, c)] * s_sqrt;
            v0[(j, c)] = vt_full[(c, j)] * s_sqrt;
        }
    }

    let sigma_e2 = match family {
        Family::GaussianIdentity => {
            let theta0 = &u0 * v0.transpose();
            let mask = dataset.mask();
            let mut acc = 0.0;
            let mut count = 0usize;
            for s in dataset.subjects() {
                for a in s.responses() {
                    for j in 0..n {
                        for k in 0..n {
                            if mask.includes(j, k) {
                                let d = a[(j, k)] - theta0[(j, k)];
                                acc += d * d;
                                count += 1;
                            }
                        }
                    }
                }
            }
            (acc / count.max(1) as f64).max(SIGMA_FLOOR)
        }
        Family::BernoulliLogit => 1.0,
    };

    ModelParams::new(
        InterceptFactor::Factored { u: u0, v: v0 },
        CoefTensor::zeros(n, dataset.p()),
        sigma_e2,
        sigma_theta,
    )
}

/// Fit by Monte Carlo EM from the truncated-SVD initialization.
pub fn fit(
    dataset: &LongitudinalNetworkDataset,
    family: Family,
    config: &McemConfig,
) -> Result<FitReport> {
    if config.mode != Mode::Asymmetric {
        return Err(Error::invalid(
            "symmetric refinement needs a prior asymmetric fit; call refine_symmetric",
        ));
    }
    config.validate(dataset.n())?;
    let sigma_theta = config.sigma_theta.initial_matrix(dataset.n())?;
    let params0 = initialize(dataset, family, config.r, sigma_theta)?;
    fit_from(dataset, family, config, params0)
}

/// Fit by Monte Carlo EM from explicit starting parameters (warm
/// starts across a tuning grid, or restarts from saved fits).
pub fn fit_from(
    dataset: &LongitudinalNetworkDataset,
    family: Family,
    config: &McemConfig,
    params0: ModelParams,
) -> Result<FitReport> {
    config.validate(dataset.n())?;
    dataset.validate_for_family(family)?;
    if params0.n() != dataset.n() || params0.p() != dataset.p() {
        return Err(Error::invalid("starting parameters do not match the dataset"));
    }
    if params0.rank() != config.r {
        return Err(Error::invalid(format!(
            "starting parameters have rank {}, config expects {}",
            params0.rank(),
            config.r
        )));
    }
    run_em(dataset, family, config, params0)
}

/// Symmetric refinement: seed `Lambda` from the column-wise sign
/// agreement of the asymmetric factors, start `U` at `(U + V Lambda)/2`
/// and `B` at the asymmetric estimate, then run the EM loop with
/// symmetric updates. The fitted `Theta = U Lambda U^T` is symmetric by
/// construction.
pub fn refine_symmetric(
    dataset: &LongitudinalNetworkDataset,
    family: Family,
    config: &McemConfig,
    asym_fit: &ModelParams,
) -> Result<FitReport> {
    config.validate(dataset.n())?;
    if asym_fit.rank() != config.r {
        return Err(Error::invalid(format!(
            "asymmetric fit has rank {}, config expects {}",
            asym_fit.rank(),
            config.r
        )));
    }
    let (u_tilde, v_tilde) = match asym_fit.intercept() {
        InterceptFactor::Factored { u, v } => (u, v),
        InterceptFactor::SymmetricFactored { .. } => {
            return Err(Error::invalid("refinement expects an asymmetric fit"))
        }
    };
    let r = u_tilde.ncols();
    let mut lambda = DVector::zeros(r);
    for c in 0..r {
        let dot = u_tilde.column(c).dot(&v_tilde.column(c));
        lambda[c] = if dot > 0.0 {
            1.0
        } else if dot < 0.0 {
            -1.0
        } else {
            log::warn!("zero column inner product at column {c}; lambda defaults to +1");
            1.0
        };
    }
    let mut u0 = u_tilde.clone();
    for c in 0..r {
        let l = lambda[c];
        for j in 0..u0.nrows() {
            u0[(j, c)] = 0.5 * (u_tilde[(j, c)] + l * v_tilde[(j, c)]);
        }
    }
    let params0 = ModelParams::new(
        InterceptFactor::SymmetricFactored { u: u0, lambda },
        asym_fit.coef().clone(),
        asym_fit.sigma_e2(),
        asym_fit.sigma_theta().clone(),
    )?;
    run_em(dataset, family, config, params0)
}

fn run_em(
    dataset: &LongitudinalNetworkDataset,
    family: Family,
    config: &McemConfig,
    params0: ModelParams,
) -> Result<FitReport> {
    let start = Instant::now();
    let mask = dataset.mask();
    let mut params = params0;

    let mut trace = Vec::new();
    let mut state: Option<MwgState> = None;
    let mut best: Option<(f64, ModelParams)> = None;
    let mut prev_obj: Option<f64> = None;
    let mut streak = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;
    let mut acceptance = (0.0, 0.0, 0.0);

    for h in 1..=config.max_outer_iters {
        iterations = h;

        // E-step: fresh sub-streams per iteration, chains warm-started
        // from the previous iteration's final state.
        let mut iter_mwg = config.mwg.clone();
        iter_mwg.seed = mix_key(config.mwg.seed, &[purpose::EM_ITERATION, h as u64]);
        let new_state =
            draw_samples_warm(&params, family, dataset, &iter_mwg, mask, state.as_ref())
                .map_err(|e| tag_iteration(e, h))?;
        acceptance = new_state.acceptance_summary(mask);

        if config.sigma_theta.refreshes() {
            params
                .set_sigma_theta(moment_refresh(&new_state, params.sigma_theta(), mask))
                .map_err(|e| tag_iteration(e, h))?;
        }

        // M-step with the samples frozen.
        let outcome = run_mstep(params, family, dataset, &new_state, &config.mstep, mask)
            .map_err(|e| tag_iteration(e, h))?;
        params = outcome.params;

        if config.sigma_e2_update && family == Family::GaussianIdentity {
            let s2 = update_sigma_e2(&params, family, dataset, &new_state, mask)?;
            params.set_sigma_e2(s2.max(SIGMA_FLOOR))?;
        }

        let q1_val = q1(&params, family, dataset, &new_state, mask);
        let q2_val = q2(&new_state, params.sigma_theta(), mask)?;
        let reg = match params.intercept() {
            InterceptFactor::Factored { u, v } => {
                let s = u.transpose() * u - v.transpose() * v;
                config.mstep.gamma * s.norm_squared()
            }
            InterceptFactor::SymmetricFactored { .. } => 0.0,
        };
        let obj = q1_val + q2_val + reg;
        if !obj.is_finite() {
            return Err(Error::numerical(h, format!("objective diverged to {obj}")));
        }
        log::debug!(
            "EM iteration {h}: penalized objective {obj:.6e} (q1 {q1_val:.6e}), \
             {} inner steps (converged: {}), acceptance {:.3}",
            outcome.iterations,
            outcome.converged,
            acceptance.0
        );
        trace.push(ObjectivePoint { q1: q1_val, q2: q2_val, penalized: obj });

        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, params.clone()));
        }
        if let Some(prev) = prev_obj {
            let rel = (obj - prev).abs() / (prev.abs() + 1.0);
            streak = if rel < config.eps_em { streak + 1 } else { 0 };
            if streak >= CONVERGENCE_STREAK {
                converged = true;
                state = Some(new_state);
                break;
            }
        }
        prev_obj = Some(obj);
        state = Some(new_state);
    }

    let (_, best_params) = best.unwrap_or((f64::INFINITY, params));
    let loglik_hat =
        estimate_loglik(&best_params, family, dataset, config.quad_points, mask);
    let _ = state;
    Ok(FitReport {
        params: best_params,
        objective_trace: trace,
        loglik_hat,
        converged,
        iterations,
        wall_time: start.elapsed().as_secs_f64(),
        acceptance_summary: acceptance,
    })
}

fn tag_iteration(e: Error, h: usize) -> Error {
    match e {
        Error::Numerical { iteration: 0, message } => Error::Numerical { iteration: h, message },
        other => other,
    }
}

/// Monte Carlo second-moment refresh of the random-intercept variances
/// over masked entries, floored away from zero.
fn moment_refresh(
    state: &MwgState,
    current: &DMatrix<f64>,
    mask: EntryMask,
) -> DMatrix<f64> {
    let n = current.nrows();
    let n_subj = state.subjects().len().max(1) as f64;
    let mf = state.m() as f64;
    DMatrix::from_fn(n, n, |j, k| {
        if !mask.includes(j, k) {
            return current[(j, k)];
        }
        let mut acc = 0.0;
        for bank in state.subjects() {
            let mean = bank.mean[(j, k)];
            acc += mean * mean + bank.ss[(j, k)] / mf;
        }
        (acc / n_subj).max(SIGMA_FLOOR)
    })
}

/// Observed log-likelihood by entrywise adaptive Gauss-Hermite
/// quadrature.
///
/// The marginal factorizes over subjects and masked entries into
/// one-dimensional integrals `∫ prod_t f(a_t | eta0_t + t) phi(t) dt`;
/// each is integrated with `quad_points` nodes centered at the mode of
/// the integrand and scaled by its curvature, which keeps the estimate
/// deterministic and exact for the Gaussian family. Entries with zero
/// prior variance contribute the degenerate limit `t = 0`.
pub fn estimate_loglik(
    params: &ModelParams,
    family: Family,
    dataset: &LongitudinalNetworkDataset,
    quad_points: usize,
    mask: EntryMask,
) -> f64 {
    assert!(quad_points >= 1);
    assert_eq!(params.n(), dataset.n());
    assert_eq!(params.p(), dataset.p());
    let n = params.n();
    let gh = GaussHermite::new(quad_points);
    let theta_mat = params.theta_matrix();
    let se2 = params.sigma_e2();
    let sigma_theta = params.sigma_theta();

    let per_subject: Vec<f64> = dataset
        .subjects()
        .par_iter()
        .map(|subj| {
            let t_count = subj.n_obs();
            // Base predictors per time.
            let etas: Vec<DMatrix<f64>> = subj
                .covariates()
                .iter()
                .map(|x| &theta_mat + params.coef().contract(x))
                .collect();
            let mut total = 0.0;
            let mut d = vec![0.0; t_count];
            let mut e0 = vec![0.0; t_count];
            for j in 0..n {
                for k in 0..n {
                    if !mask.includes(j, k) {
                        continue;
                    }
                    for t in 0..t_count {
                        d[t] = subj.responses()[t][(j, k)];
                        e0[t] = etas[t][(j, k)];
                    }
                    let st2 = sigma_theta[(j, k)];
                    total += entry_log_marginal(family, &d, &e0, se2, st2, &gh);
                }
            }
            total
        })
        .collect();
    per_subject.iter().sum()
}

fn entry_log_marginal(
    family: Family,
    a: &[f64],
    eta0: &[f64],
    se2: f64,
    st2: f64,
    gh: &GaussHermite,
) -> f64 {
    let logf = |th: f64| -> f64 {
        let mut acc = 0.0;
        for (&at, &et) in a.iter().zip(eta0) {
            acc += family.log_density_unchecked(at, et + th, se2);
        }
        acc
    };
    if st2 == 0.0 {
        // Degenerate prior: point mass at zero.
        return logf(0.0);
    }
    let log_target = |th: f64| logf(th) - th * th / (2.0 * st2) - 0.5 * (LN_2PI + st2.ln());
    let deriv = |th: f64| -> (f64, f64) {
        let mut g = -th / st2;
        let mut h = -1.0 / st2;
        match family {
            Family::GaussianIdentity => {
                for (&at, &et) in a.iter().zip(eta0) {
                    g += (at - et - th) / se2;
                    h -= 1.0 / se2;
                }
            }
            Family::BernoulliLogit => {
                for (&at, &et) in a.iter().zip(eta0) {
                    let p = sigmoid(et + th);
                    g += at - p;
                    h -= p * (1.0 - p);
                }
            }
        }
        (g, h)
    };
    let (mode, curvature) = newton_concave_max(0.0, deriv);
    gh.log_integral(mode, curvature.sqrt().recip(), log_target)
}
