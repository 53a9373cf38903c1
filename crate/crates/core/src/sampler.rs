//! Metropolis-within-Gibbs E-step.
//!
//! For each subject the target is the unnormalized conditional
//! posterior `f(A_i | x_i, theta_i; params) * phi(theta_i)`, which
//! factorizes exactly across matrix entries because both the
//! likelihood and the prior are entrywise products. Entries are
//! therefore updated one at a time with scalar random-walk proposals;
//! a whole-matrix proposal mode is available behind a switch.
//!
//! Reproducibility: every entry owns an independent counter-derived
//! RNG stream keyed by `(seed, subject id, entry, purpose)`, so chains
//! are bitwise identical regardless of thread scheduling, and freezing
//! any subset of entries leaves the remaining chains unchanged.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    log1p_exp, EntryMask, Family, LongitudinalNetworkDataset, ModelParams, SubjectRecord,
};
use crate::rng::{derive_rng, purpose};

const LN_2PI: f64 = 1.8378770664093453;

/// Random-walk acceptance targets (scalar and joint proposals).
const TARGET_ACCEPT_ENTRY: f64 = 0.44;
const TARGET_ACCEPT_MATRIX: f64 = 0.234;

/// Sampler configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MwgConfig {
    /// Recorded samples per subject per E-step.
    pub m: usize,
    /// Discarded initial sweeps.
    pub burn_in: usize,
    /// Proposal scale multiplier. Each entry starts from an
    /// information-based scale `2.4 / sqrt(T * i + 1/sigma_theta2)`
    /// (`i = 1/sigma_e2` Gaussian, `1/4` logit bound) times this value.
    pub proposal_sd: f64,
    /// Master seed for all chains.
    pub seed: u64,
    /// Robbins-Monro scale adaptation during burn-in.
    pub adapt: bool,
    /// Propose the whole matrix at once instead of entry by entry.
    /// Statistically equivalent in stationarity, much lower acceptance
    /// for large `n`; kept for fidelity experiments.
    pub whole_matrix: bool,
}

impl Default for MwgConfig {
    fn default() -> Self {
        MwgConfig {
            m: 100,
            burn_in: 50,
            proposal_sd: 1.0,
            seed: 0,
            adapt: true,
            whole_matrix: false,
        }
    }
}

impl MwgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::invalid("sample count M must be >= 1"));
        }
        if !(self.proposal_sd > 0.0) || !self.proposal_sd.is_finite() {
            return Err(Error::invalid("proposal_sd must be positive and finite"));
        }
        Ok(())
    }
}

/// Monte Carlo bank for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSamples {
    /// The `M` recorded random-intercept matrices.
    pub samples: Vec<DMatrix<f64>>,
    /// Per-entry sample mean over the bank.
    pub mean: DMatrix<f64>,
    /// Per-entry centered sum of squares over the bank.
    pub ss: DMatrix<f64>,
    /// Final chain state (warm start for the next E-step).
    pub last: DMatrix<f64>,
    /// Final per-entry proposal scales (warm start).
    pub scales: DMatrix<f64>,
    /// Post-burn-in acceptance rate per entry.
    pub acceptance: DMatrix<f64>,
}

impl SubjectSamples {
    /// Build a bank directly from recorded samples; the mean and
    /// centered sum of squares are derived, warm-start fields default.
    pub fn from_samples(samples: Vec<DMatrix<f64>>) -> Result<Self> {
        let m = samples.len();
        if m == 0 {
            return Err(Error::invalid("a sample bank needs at least one sample"));
        }
        let (nr, nc) = samples[0].shape();
        if samples.iter().any(|s| s.shape() != (nr, nc)) {
            return Err(Error::invalid("samples must share one shape"));
        }
        let mut mean = DMatrix::zeros(nr, nc);
        for s in &samples {
            mean += s;
        }
        mean /= m as f64;
        let mut ss = DMatrix::zeros(nr, nc);
        for s in &samples {
            let d = s - &mean;
            ss.zip_apply(&d, |acc, x| *acc += x * x);
        }
        let last = samples[m - 1].clone();
        Ok(SubjectSamples {
            samples,
            mean,
            ss,
            last,
            scales: DMatrix::from_element(nr, nc, 1.0),
            acceptance: DMatrix::zeros(nr, nc),
        })
    }
}

/// Monte Carlo sample bank for every subject of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MwgState {
    m: usize,
    subjects: Vec<SubjectSamples>,
}

impl MwgState {
    /// Assemble a state from per-subject banks sharing one sample count.
    pub fn from_banks(subjects: Vec<SubjectSamples>) -> Result<Self> {
        let m = subjects.first().map_or(0, |b| b.samples.len());
        if m == 0 {
            return Err(Error::invalid("state needs at least one subject with samples"));
        }
        if subjects.iter().any(|b| b.samples.len() != m) {
            return Err(Error::invalid("all banks must hold the same sample count"));
        }
        Ok(MwgState { m, subjects })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn subjects(&self) -> &[SubjectSamples] {
        &self.subjects
    }

    /// Mean / min / max post-burn-in acceptance over masked entries.
    pub fn acceptance_summary(&self, mask: EntryMask) -> (f64, f64, f64) {
        let (mut sum, mut count) = (0.0, 0usize);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.subjects {
            let n = s.acceptance.nrows();
            for j in 0..n {
                for k in 0..n {
                    if mask.includes(j, k) {
                        let a = s.acceptance[(j, k)];
                        sum += a;
                        count += 1;
                        lo = lo.min(a);
                        hi = hi.max(a);
                    }
                }
            }
        }
        if count == 0 {
            (0.0, 0.0, 0.0)
        } else {
            (sum / count as f64, lo, hi)
        }
    }
}

#[inline]
fn efl(j: usize, k: usize, n: usize) -> usize {
    // Column-major flat index, matching DMatrix storage.
    k * n + j
}

/// Softplus of `base + shift` using the cached `exp(base)`; falls back
/// to the direct form when the product over/underflows.
#[inline]
fn softplus_shifted(base: f64, base_exp: f64, shift_exp: f64, shift: f64) -> f64 {
    let w = base_exp * shift_exp;
    if w.is_finite() && w > 0.0 {
        w.ln_1p()
    } else {
        log1p_exp(base + shift)
    }
}

/// Random-walk Metropolis chain over one subject's random intercept.
pub struct SubjectChain {
    family: Family,
    sigma_e2: f64,
    n: usize,
    t_count: usize,
    whole_matrix: bool,
    masked: Vec<bool>,
    prior_var: Vec<f64>,
    /// Gaussian: per-entry residual sums `sum_t (a_t - eta0_t)`.
    sum_d: Vec<f64>,
    /// Logit: per-entry response sums `sum_t a_t`.
    sum_a: Vec<f64>,
    /// Logit: base predictors `eta0_t` laid out `[t * n^2 + e]`.
    base_eta: Vec<f64>,
    base_exp: Vec<f64>,
    /// Logit cache: `sum_t softplus(eta0_t + theta_e)` at the current state.
    cur_sp: Vec<f64>,
    theta: Vec<f64>,
    scales: Vec<f64>,
    log_scales: Vec<f64>,
    shared_log_scale: f64,
    entry_rngs: Vec<ChaCha8Rng>,
    subject_rng: ChaCha8Rng,
    accepts: Vec<bool>,
    adapt_steps: u64,
}

impl SubjectChain {
    /// Fresh chain: the state is drawn entrywise from a standard
    /// normal, proposal scales start at the information-based default.
    pub fn new(
        params: &ModelParams,
        family: Family,
        subject: &SubjectRecord,
        config: &MwgConfig,
        mask: EntryMask,
    ) -> Result<Self> {
        Self::with_state(params, family, subject, config, mask, None)
    }

    /// Chain warm-started from a previous state and scale set.
    pub fn with_state(
        params: &ModelParams,
        family: Family,
        subject: &SubjectRecord,
        config: &MwgConfig,
        mask: EntryMask,
        warm: Option<(&DMatrix<f64>, &DMatrix<f64>)>,
    ) -> Result<Self> {
        config.validate()?;
        let n = params.n();
        let nn = n * n;
        let t_count = subject.n_obs();
        let theta_mat = params.theta_matrix();

        let mut masked = vec![false; nn];
        let mut prior_var = vec![0.0; nn];
        for j in 0..n {
            for k in 0..n {
                let e = efl(j, k, n);
                masked[e] = mask.includes(j, k);
                prior_var[e] = params.sigma_theta()[(j, k)];
                if masked[e] && !(prior_var[e] > 0.0) {
                    return Err(Error::invalid(format!(
                        "sampling needs sigma_theta[({j},{k})] > 0 on masked entries"
                    )));
                }
            }
        }

        // Base predictors without the random intercept.
        let mut sum_d = vec![0.0; nn];
        let mut sum_a = vec![0.0; nn];
        let mut base_eta = Vec::new();
        let mut base_exp = Vec::new();
        if family == Family::BernoulliLogit {
            base_eta = vec![0.0; t_count * nn];
            base_exp = vec![0.0; t_count * nn];
        }
        let mut ct = DMatrix::zeros(n, n);
        for (t, (a, x)) in subject.responses().iter().zip(subject.covariates()).enumerate() {
            if x.len() != params.p() {
                return Err(Error::invalid("covariate length does not match params"));
            }
            params.coef().contract_into(x, &mut ct);
            let av = a.as_slice();
            let tv = theta_mat.as_slice();
            let cv = ct.as_slice();
            for e in 0..nn {
                let eta0 = tv[e] + cv[e];
                if !eta0.is_finite() {
                    return Err(Error::numerical(
                        0,
                        "non-finite linear predictor entering the sampler",
                    ));
                }
                match family {
                    Family::GaussianIdentity => sum_d[e] += av[e] - eta0,
                    Family::BernoulliLogit => {
                        sum_a[e] += av[e];
                        base_eta[t * nn + e] = eta0;
                        base_exp[t * nn + e] = eta0.exp();
                    }
                }
            }
        }

        let sid = subject.id();
        let mut entry_rngs = Vec::with_capacity(nn);
        for e in 0..nn {
            entry_rngs.push(derive_rng(config.seed, &[sid, e as u64, purpose::THETA_CHAIN]));
        }
        let subject_rng = derive_rng(config.seed, &[sid, purpose::SUBJECT_ACCEPT]);

        let mut theta = vec![0.0; nn];
        let mut scales = vec![1.0; nn];
        match warm {
            Some((last, sc)) => {
                for j in 0..n {
                    for k in 0..n {
                        let e = efl(j, k, n);
                        theta[e] = last[(j, k)];
                        scales[e] = sc[(j, k)];
                        if !theta[e].is_finite() {
                            return Err(Error::numerical(0, "non-finite warm-start state"));
                        }
                    }
                }
            }
            None => {
                let info = match family {
                    Family::GaussianIdentity => 1.0 / params.sigma_e2(),
                    Family::BernoulliLogit => 0.25,
                };
                for e in 0..nn {
                    let mut init_rng = derive_rng(
                        config.seed,
                        &[sid, e as u64, purpose::THETA_INIT],
                    );
                    theta[e] = crate::rng::std_normal(&mut init_rng);
                    if masked[e] {
                        let post_info = t_count as f64 * info + 1.0 / prior_var[e];
                        scales[e] = config.proposal_sd * 2.4 / post_info.sqrt();
                    }
                }
            }
        }

        let mut cur_sp = Vec::new();
        if family == Family::BernoulliLogit {
            cur_sp = vec![0.0; nn];
            for e in 0..nn {
                if !masked[e] {
                    continue;
                }
                let se = theta[e].exp();
                let mut acc = 0.0;
                for t in 0..t_count {
                    let i = t * nn + e;
                    acc += softplus_shifted(base_eta[i], base_exp[i], se, theta[e]);
                }
                cur_sp[e] = acc;
            }
        }

        let shared_log_scale = {
            // Whole-matrix mode shares one scale; start from the mean of
            // the per-entry scales over masked entries.
            let (mut s, mut c) = (0.0, 0usize);
            for e in 0..nn {
                if masked[e] {
                    s += scales[e].ln();
                    c += 1;
                }
            }
            if c > 0 {
                s / c as f64
            } else {
                0.0
            }
        };

        let log_scales = scales.iter().map(|s| s.ln()).collect();
        Ok(SubjectChain {
            family,
            sigma_e2: params.sigma_e2(),
            n,
            t_count,
            whole_matrix: config.whole_matrix,
            masked,
            prior_var,
            sum_d,
            sum_a,
            base_eta,
            base_exp,
            cur_sp,
            theta,
            scales,
            log_scales,
            shared_log_scale,
            entry_rngs,
            subject_rng,
            accepts: vec![false; nn],
            adapt_steps: 0,
        })
    }

    /// Log-likelihood change of entry `e` moving `cur -> prop`,
    /// excluding the prior.
    #[inline]
    fn lik_delta(&self, e: usize, cur: f64, prop: f64, prop_exp: f64) -> f64 {
        match self.family {
            Family::GaussianIdentity => {
                (2.0 * (prop - cur) * self.sum_d[e]
                    - self.t_count as f64 * (prop * prop - cur * cur))
                    / (2.0 * self.sigma_e2)
            }
            Family::BernoulliLogit => {
                let nn = self.n * self.n;
                let mut sp = 0.0;
                for t in 0..self.t_count {
                    let i = t * nn + e;
                    sp += softplus_shifted(self.base_eta[i], self.base_exp[i], prop_exp, prop);
                }
                (prop - cur) * self.sum_a[e] - (sp - self.cur_sp[e])
            }
        }
    }

    #[inline]
    fn commit(&mut self, e: usize, prop: f64, prop_exp: f64) {
        if self.family == Family::BernoulliLogit {
            let nn = self.n * self.n;
            let mut sp = 0.0;
            for t in 0..self.t_count {
                let i = t * nn + e;
                sp += softplus_shifted(self.base_eta[i], self.base_exp[i], prop_exp, prop);
            }
            self.cur_sp[e] = sp;
        }
        self.theta[e] = prop;
    }

    /// One full sweep over the masked entries.
    pub fn sweep(&mut self, adapt: bool) -> Result<()> {
        self.sweep_filtered(adapt, |_, _| true)
    }

    /// Sweep updating only entries selected by `filter` (row, col).
    /// Entry streams are independent, so the marginal chain of any
    /// entry is bit-identical whether or not the others are frozen.
    pub fn sweep_filtered(
        &mut self,
        adapt: bool,
        filter: impl Fn(usize, usize) -> bool,
    ) -> Result<()> {
        if self.whole_matrix {
            return self.sweep_whole_matrix(adapt, filter);
        }
        let n = self.n;
        if adapt {
            self.adapt_steps += 1;
        }
        let step = adapt_step(self.adapt_steps);
        for j in 0..n {
            for k in 0..n {
                let e = efl(j, k, n);
                if !self.masked[e] || !filter(j, k) {
                    continue;
                }
                let (z, u): (f64, f64) = {
                    let rng = &mut self.entry_rngs[e];
                    (crate::rng::std_normal(rng), rng.random())
                };
                let cur = self.theta[e];
                let prop = cur + self.scales[e] * z;
                let prop_exp = if self.family == Family::BernoulliLogit {
                    prop.exp()
                } else {
                    0.0
                };
                let delta = self.lik_delta(e, cur, prop, prop_exp)
                    + (cur * cur - prop * prop) / (2.0 * self.prior_var[e]);
                if delta.is_nan() {
                    return Err(Error::numerical(
                        0,
                        "non-finite log-density in Metropolis step (parameter blow-up?)",
                    ));
                }
                let accept = delta >= 0.0 || u.ln() < delta;
                if accept {
                    self.commit(e, prop, prop_exp);
                }
                self.accepts[e] = accept;
                if adapt {
                    let a = if accept { 1.0 } else { 0.0 };
                    self.log_scales[e] += step * (a - TARGET_ACCEPT_ENTRY);
                    self.scales[e] = self.log_scales[e].exp();
                }
            }
        }
        Ok(())
    }

    fn sweep_whole_matrix(
        &mut self,
        adapt: bool,
        filter: impl Fn(usize, usize) -> bool,
    ) -> Result<()> {
        let n = self.n;
        if adapt {
            self.adapt_steps += 1;
        }
        let scale = self.shared_log_scale.exp();
        let mut proposals: Vec<(usize, f64, f64)> = Vec::new();
        let mut delta = 0.0;
        for j in 0..n {
            for k in 0..n {
                let e = efl(j, k, n);
                if !self.masked[e] || !filter(j, k) {
                    continue;
                }
                let z: f64 = crate::rng::std_normal(&mut self.entry_rngs[e]);
                let cur = self.theta[e];
                let prop = cur + scale * z;
                let prop_exp = if self.family == Family::BernoulliLogit {
                    prop.exp()
                } else {
                    0.0
                };
                delta += self.lik_delta(e, cur, prop, prop_exp)
                    + (cur * cur - prop * prop) / (2.0 * self.prior_var[e]);
                proposals.push((e, prop, prop_exp));
            }
        }
        if delta.is_nan() {
            return Err(Error::numerical(
                0,
                "non-finite log-density in Metropolis step (parameter blow-up?)",
            ));
        }
        let u: f64 = self.subject_rng.random();
        let accept = delta >= 0.0 || u.ln() < delta;
        if accept {
            for &(e, prop, prop_exp) in &proposals {
                self.commit(e, prop, prop_exp);
            }
        }
        for &(e, ..) in &proposals {
            self.accepts[e] = accept;
        }
        if adapt {
            let a = if accept { 1.0 } else { 0.0 };
            self.shared_log_scale += adapt_step(self.adapt_steps) * (a - TARGET_ACCEPT_MATRIX);
        }
        Ok(())
    }

    pub fn theta_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n, self.n, &self.theta)
    }

    /// Accept flags of the most recent sweep.
    pub fn accept_matrix(&self) -> DMatrix<bool> {
        DMatrix::from_fn(self.n, self.n, |j, k| self.accepts[efl(j, k, self.n)])
    }

    fn scales_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n, self.n, &self.scales)
    }
}

#[inline]
fn adapt_step(step_count: u64) -> f64 {
    (2.0 / (step_count.max(1) as f64).sqrt()).min(0.25)
}

/// One Metropolis-within-Gibbs sweep from `current_theta`, as a
/// standalone operation. The chain draws are derived from
/// `config.seed`; [`draw_samples`] is the batch path.
pub fn mwg_sweep(
    params: &ModelParams,
    family: Family,
    subject: &SubjectRecord,
    current_theta: &DMatrix<f64>,
    config: &MwgConfig,
    mask: EntryMask,
) -> Result<(DMatrix<f64>, DMatrix<bool>)> {
    let n = params.n();
    if current_theta.nrows() != n || current_theta.ncols() != n {
        return Err(Error::invalid("current_theta must be n x n"));
    }
    let scales = default_scales(params, family, subject.n_obs(), config, mask);
    let mut chain =
        SubjectChain::with_state(params, family, subject, config, mask, Some((current_theta, &scales)))?;
    chain.sweep(false)?;
    Ok((chain.theta_matrix(), chain.accept_matrix()))
}

fn default_scales(
    params: &ModelParams,
    family: Family,
    t_count: usize,
    config: &MwgConfig,
    mask: EntryMask,
) -> DMatrix<f64> {
    let n = params.n();
    let info = match family {
        Family::GaussianIdentity => 1.0 / params.sigma_e2(),
        Family::BernoulliLogit => 0.25,
    };
    DMatrix::from_fn(n, n, |j, k| {
        let pv = params.sigma_theta()[(j, k)];
        if mask.includes(j, k) && pv > 0.0 {
            config.proposal_sd * 2.4 / (t_count as f64 * info + 1.0 / pv).sqrt()
        } else {
            config.proposal_sd
        }
    })
}

fn sample_subject(
    params: &ModelParams,
    family: Family,
    subject: &SubjectRecord,
    config: &MwgConfig,
    mask: EntryMask,
    warm: Option<(&DMatrix<f64>, &DMatrix<f64>)>,
) -> Result<SubjectSamples> {
    let mut chain = SubjectChain::with_state(params, family, subject, config, mask, warm)?;
    for _ in 0..config.burn_in {
        chain.sweep(config.adapt)?;
    }
    let n = params.n();
    let nn = n * n;
    let mut samples = Vec::with_capacity(config.m);
    let mut accept_counts = vec![0u32; nn];
    for _ in 0..config.m {
        chain.sweep(false)?;
        for (c, a) in accept_counts.iter_mut().zip(&chain.accepts) {
            *c += u32::from(*a);
        }
        samples.push(chain.theta_matrix());
    }

    let m = config.m as f64;
    let mut mean = DMatrix::zeros(n, n);
    for s in &samples {
        mean += s;
    }
    mean /= m;
    let mut ss = DMatrix::zeros(n, n);
    for s in &samples {
        let d = s - &mean;
        ss.zip_apply(&d, |acc, x| *acc += x * x);
    }
    let acceptance =
        DMatrix::from_fn(n, n, |j, k| f64::from(accept_counts[efl(j, k, n)]) / m);
    Ok(SubjectSamples {
        samples,
        mean,
        ss,
        last: chain.theta_matrix(),
        scales: chain.scales_matrix(),
        acceptance,
    })
}

/// Draw `M` Metropolis-within-Gibbs samples per subject with fresh
/// standard-normal initialization. Deterministic given `config.seed`.
pub fn draw_samples(
    params: &ModelParams,
    family: Family,
    dataset: &LongitudinalNetworkDataset,
    config: &MwgConfig,
    mask: EntryMask,
) -> Result<MwgState> {
    draw_samples_warm(params, family, dataset, config, mask, None)
}

/// As [`draw_samples`], optionally warm-starting every subject's chain
/// from the final state and proposal scales of a previous E-step.
pub fn draw_samples_warm(
    params: &ModelParams,
    family: Family,
    dataset: &LongitudinalNetworkDataset,
    config: &MwgConfig,
    mask: EntryMask,
    warm: Option<&MwgState>,
) -> Result<MwgState> {
    config.validate()?;
    if dataset.n() != params.n() || dataset.p() != params.p() {
        return Err(Error::invalid("dataset dimensions do not match params"));
    }
    if let Some(w) = warm {
        if w.subjects.len() != dataset.n_subjects() {
            return Err(Error::invalid("warm-start state has a different subject count"));
        }
    }
    let subjects: Result<Vec<SubjectSamples>> = dataset
        .subjects()
        .par_iter()
        .enumerate()
        .map(|(idx, subj)| {
            let warm_pair = warm.map(|w| (&w.subjects[idx].last, &w.subjects[idx].scales));
            sample_subject(params, family, subj, config, mask, warm_pair)
        })
        .collect();
    Ok(MwgState { m: config.m, subjects: subjects? })
}

/// Monte Carlo Q1: the negative expected complete-data log-likelihood
/// `-(1/M) sum_m sum_i log f(A_i | x_i, theta_i^(m); params)` with the
/// sample bank held fixed and candidate parameters varying.
pub fn q1(
    params: &ModelParams,
    family: Family,
    dataset: &LongitudinalNetworkDataset,
    state: &MwgState,
    mask: EntryMask,
) -> f64 {
    assert_eq!(
        state.subjects.len(),
        dataset.n_subjects(),
        "state was generated against a different dataset"
    );
    let theta_mat = params.theta_matrix();
    let per_subject: Vec<f64> = dataset
        .subjects()
        .par_iter()
        .zip(&state.subjects)
        .map(|(subj, bank)| q1_subject(params, family, subj, bank, &theta_mat, mask, state.m))
        .collect();
    // Fixed-order reduction keeps results identical across thread counts.
    per_subject.iter().sum()
}

fn q1_subject(
    params: &ModelParams,
    family: Family,
    subject: &SubjectRecord,
    bank: &SubjectSamples,
    theta_mat: &DMatrix<f64>,
    mask: EntryMask,
    m: usize,
) -> f64 {
    let n = params.n();
    let nn = n * n;
    let mf = m as f64;
    let mut mask_flat = vec![false; nn];
    for j in 0..n {
        for k in 0..n {
            mask_flat[efl(j, k, n)] = mask.includes(j, k);
        }
    }
    let mut ct = DMatrix::zeros(n, n);
    match family {
        Family::GaussianIdentity => {
            // sum_m (a - eta0 - theta_m)^2 = M (a - eta0 - mean)^2 + ss,
            // so the bank enters only through its mean and centered SS.
            let s2 = params.sigma_e2();
            let mut acc = 0.0;
            let mut terms = 0usize;
            let mean = bank.mean.as_slice();
            let ss = bank.ss.as_slice();
            for (a, x) in subject.responses().iter().zip(subject.covariates()) {
                params.coef().contract_into(x, &mut ct);
                let av = a.as_slice();
                let tv = theta_mat.as_slice();
                let cv = ct.as_slice();
                for e in 0..nn {
                    if mask_flat[e] {
                        let d = av[e] - tv[e] - cv[e] - mean[e];
                        acc += d * d + ss[e] / mf;
                        terms += 1;
                    }
                }
            }
            acc / (2.0 * s2) + 0.5 * terms as f64 * (LN_2PI + s2.ln())
        }
        Family::BernoulliLogit => {
            // Linear part collapses over samples; only the softplus term
            // needs the full bank.
            let mut linear = 0.0;
            let t_count = subject.n_obs();
            let mut base = vec![0.0; t_count * nn];
            let mean = bank.mean.as_slice();
            for (t, (a, x)) in subject.responses().iter().zip(subject.covariates()).enumerate()
            {
                params.coef().contract_into(x, &mut ct);
                let av = a.as_slice();
                let tv = theta_mat.as_slice();
                let cv = ct.as_slice();
                for e in 0..nn {
                    let eta0 = tv[e] + cv[e];
                    base[t * nn + e] = eta0;
                    if mask_flat[e] {
                        linear += av[e] * (eta0 + mean[e]);
                    }
                }
            }
            let base_exp: Vec<f64> = base.iter().map(|b| b.exp()).collect();
            let mut sp_total = 0.0;
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
                            sp_total += softplus_shifted(
                                base[off + e],
                                base_exp[off + e],
                                th_exp[e],
                                sv[e],
                            );
                        }
                    }
                }
            }
            sp_total / mf - linear
        }
    }
}

/// Monte Carlo Q2: `-(1/M) sum_m sum_i log phi(theta_i^(m))`. Constant
/// in the candidate parameters; used for objective reporting.
pub fn q2(state: &MwgState, sigma_theta: &DMatrix<f64>, mask: EntryMask) -> Result<f64> {
    let mf = state.m as f64;
    let n = sigma_theta.nrows();
    let mut total = 0.0;
    for bank in &state.subjects {
        if bank.mean.nrows() != n {
            return Err(Error::invalid("sigma_theta does not match the sample bank"));
        }
        for j in 0..n {
            for k in 0..n {
                if !mask.includes(j, k) {
                    continue;
                }
                let s2 = sigma_theta[(j, k)];
                if !(s2 > 0.0) {
                    return Err(Error::invalid(format!(
                        "degenerate prior: sigma_theta[({j},{k})] = {s2} on a masked entry"
                    )));
                }
                // sum_m theta^2 = M mean^2 + ss.
                let mean = bank.mean[(j, k)];
                let second_moment = mean * mean + bank.ss[(j, k)] / mf;
                total += second_moment / (2.0 * s2) + 0.5 * (LN_2PI + s2.ln());
            }
        }
    }
    Ok(total)
}

/// Closed-form per-entry conjugate posterior of the random intercept
/// under the Gaussian family: variance `(T/sigma_e2 + 1/sigma_theta2)^-1`
/// and mean `v * sum_t (a_t - eta0_t) / sigma_e2`. Unmasked entries
/// report the prior. Used as an oracle and Gaussian fast path.
pub fn exact_gaussian_posterior(
    params: &ModelParams,
    family: Family,
    dataset: &LongitudinalNetworkDataset,
    sigma_theta: &DMatrix<f64>,
    mask: EntryMask,
) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    if family != Family::GaussianIdentity {
        return Err(Error::unsupported(
            "exact posterior is only available for the Gaussian family",
        ));
    }
    let n = params.n();
    if sigma_theta.nrows() != n || sigma_theta.ncols() != n {
        return Err(Error::invalid("sigma_theta must be n x n"));
    }
    let theta_mat = params.theta_matrix();
    let mut out = Vec::with_capacity(dataset.n_subjects());
    let s2 = params.sigma_e2();
    for subj in dataset.subjects() {
        let t_count = subj.n_obs() as f64;
        let mut sum_d = DMatrix::zeros(n, n);
        let mut ct = DMatrix::zeros(n, n);
        for (a, x) in subj.responses().iter().zip(subj.covariates()) {
            params.coef().contract_into(x, &mut ct);
            sum_d += a - &theta_mat - &ct;
        }
        let mut mean = DMatrix::zeros(n, n);
        let mut var = DMatrix::zeros(n, n);
        for j in 0..n {
            for k in 0..n {
                let pv = sigma_theta[(j, k)];
                if mask.includes(j, k) && pv > 0.0 {
                    let v = 1.0 / (t_count / s2 + 1.0 / pv);
                    var[(j, k)] = v;
                    mean[(j, k)] = v * sum_d[(j, k)] / s2;
                } else {
                    var[(j, k)] = pv;
                }
            }
        }
        out.push((mean, var));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoefTensor, DiagonalPolicy, InterceptFactor};
    use crate::model::{subject_loglik, theta_logprior};
    use nalgebra::DVector;

    fn single_entry_setup(
        family: Family,
        responses: &[f64],
        sigma_e2: f64,
        sigma_theta2: f64,
    ) -> (ModelParams, LongitudinalNetworkDataset) {
        // n = 1 with diagonal included: exactly one masked entry.
        let params = ModelParams::new(
            InterceptFactor::Factored { u: DMatrix::zeros(1, 1), v: DMatrix::zeros(1, 1) },
            CoefTensor::zeros(1, 1),
            sigma_e2,
            DMatrix::from_element(1, 1, sigma_theta2),
        )
        .unwrap();
        let subject = SubjectRecord::new(
            0,
            responses.iter().map(|&a| DMatrix::from_element(1, 1, a)).collect(),
            responses.iter().map(|_| DVector::zeros(1)).collect(),
        )
        .unwrap();
        let dataset =
            LongitudinalNetworkDataset::new(1, 1, vec![subject], DiagonalPolicy::Include)
                .unwrap();
        (params, dataset)
    }

    #[test]
    fn tiny_proposal_keeps_chain_at_init() {
        let (params, dataset) = single_entry_setup(Family::GaussianIdentity, &[0.5, 1.0], 1.0, 1.0);
        let config = MwgConfig {
            m: 5,
            burn_in: 0,
            proposal_sd: 1e-300,
            seed: 42,
            adapt: false,
            ..Default::default()
        };
        let mask = DiagonalPolicy::Include.mask();
        let state = draw_samples(&params, Family::GaussianIdentity, &dataset, &config, mask)
            .unwrap();

        // All samples stay within a hair of the init draw.
        let mut init_rng = derive_rng(42, &[0, 0, purpose::THETA_INIT]);
        let init: f64 = crate::rng::std_normal(&mut init_rng);
        for s in &state.subjects()[0].samples {
            assert!((s[(0, 0)] - init).abs() < 1e-250);
        }
    }

    #[test]
    fn m1_no_burnin_equals_init_draw() {
        let (params, dataset) = single_entry_setup(Family::GaussianIdentity, &[0.3], 1.0, 1.0);
        let config = MwgConfig {
            m: 1,
            burn_in: 0,
            proposal_sd: 1e-300,
            seed: 7,
            adapt: false,
            ..Default::default()
        };
        let mask = DiagonalPolicy::Include.mask();
        let state =
            draw_samples(&params, Family::GaussianIdentity, &dataset, &config, mask).unwrap();
        let mut init_rng = derive_rng(7, &[0, 0, purpose::THETA_INIT]);
        let init: f64 = crate::rng::std_normal(&mut init_rng);
        assert!((state.subjects()[0].samples[0][(0, 0)] - init).abs() < 1e-250);
    }

    #[test]
    fn same_seed_bit_identical() {
        let (params, dataset) = single_entry_setup(Family::GaussianIdentity, &[0.5, 2.0], 0.5, 2.0);
        let config = MwgConfig { m: 20, burn_in: 10, seed: 11, ..Default::default() };
        let mask = DiagonalPolicy::Include.mask();
        let a = draw_samples(&params, Family::GaussianIdentity, &dataset, &config, mask).unwrap();
        let b = draw_samples(&params, Family::GaussianIdentity, &dataset, &config, mask).unwrap();
        assert_eq!(a, b);
    }

    fn gaussian_desk() -> (ModelParams, LongitudinalNetworkDataset) {
        let mut rng = derive_rng(3, &[100]);
        let n = 3;
        let p = 2;
        let u = DMatrix::from_fn(n, 1, |_, _| crate::rng::std_normal(&mut rng));
        let v = DMatrix::from_fn(n, 1, |_, _| crate::rng::std_normal(&mut rng));
        let params = ModelParams::new(
            InterceptFactor::Factored { u, v },
            CoefTensor::from_slices(
                (0..p)
                    .map(|_| DMatrix::from_fn(n, n, |_, _| crate::rng::std_normal(&mut rng)))
                    .collect(),
            )
            .unwrap(),
            0.8,
            DMatrix::from_element(n, n, 1.5),
        )
        .unwrap();
        let subjects = (0..2)
            .map(|id| {
                SubjectRecord::new(
                    id,
                    (0..2)
                        .map(|_| DMatrix::from_fn(n, n, |_, _| crate::rng::std_normal(&mut rng)))
                        .collect(),
                    (0..2)
                        .map(|_| DVector::from_fn(p, |_, _| crate::rng::std_normal(&mut rng)))
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let dataset =
            LongitudinalNetworkDataset::new(n, p, subjects, DiagonalPolicy::Exclude).unwrap();
        (params, dataset)
    }

    #[test]
    fn q1_m1_equals_negative_subject_loglik() {
        let (params, dataset) = gaussian_desk();
        let mask = dataset.mask();
        let config = MwgConfig { m: 1, burn_in: 3, seed: 5, ..Default::default() };
        let state =
            draw_samples(&params, Family::GaussianIdentity, &dataset, &config, mask).unwrap();
        let got = q1(&params, Family::GaussianIdentity, &dataset, &state, mask);
        let mut expect = 0.0;
        for (subj, bank) in dataset.subjects().iter().zip(state.subjects()) {
            expect -= subject_loglik(
                &params,
                Family::GaussianIdentity,
                subj,
                &bank.samples[0],
                mask,
            )
            .unwrap();
        }
        assert!((got - expect).abs() < 1e-10 * expect.abs().max(1.0));
    }

    #[test]
    fn q1_unchanged_by_duplicating_samples() {
        let (params, dataset) = gaussian_desk();
        let mask = dataset.mask();
        let config = MwgConfig { m: 4, burn_in: 2, seed: 6, ..Default::default() };
        let state =
            draw_samples(&params, Family::GaussianIdentity, &dataset, &config, mask).unwrap();

        let doubled = MwgState {
            m: state.m * 2,
            subjects: state
                .subjects
                .iter()
                .map(|b| {
                    let samples: Vec<DMatrix<f64>> =
                        b.samples.iter().chain(&b.samples).cloned().collect();
                    let mf = samples.len() as f64;
                    let mut mean = DMatrix::zeros(3, 3);
                    for s in &samples {
                        mean += s;
                    }
                    mean /= mf;
                    let mut ss = DMatrix::zeros(3, 3);
                    for s in &samples {
                        let d = s - &mean;
                        ss.zip_apply(&d, |acc, x| *acc += x * x);
                    }
                    SubjectSamples {
                        samples,
                        mean,
                        ss,
                        last: b.last.clone(),
                        scales: b.scales.clone(),
                        acceptance: b.acceptance.clone(),
                    }
                })
                .collect(),
        };

        let a = q1(&params, Family::GaussianIdentity, &dataset, &state, mask);
        let b = q1(&params, Family::GaussianIdentity, &dataset, &doubled, mask);
        assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn q1_matches_double_loop_oracle_both_families() {
        let (params, dataset) = gaussian_desk();
        let mask = dataset.mask();
        let config = MwgConfig { m: 3, burn_in: 2, seed: 9, ..Default::default() };

        for family in [Family::GaussianIdentity, Family::BernoulliLogit] {
            // For the logit family rebuild the dataset with 0/1 entries.
            let dataset = if family == Family::BernoulliLogit {
                let subjects = dataset
                    .subjects()
                    .iter()
                    .map(|s| {
                        SubjectRecord::new(
                            s.id(),
                            s.responses()
                                .iter()
                                .map(|a| a.map(|v| f64::from(v > 0.0)))
                                .collect(),
                            s.covariates().to_vec(),
                        )
                        .unwrap()
                    })
                    .collect();
                LongitudinalNetworkDataset::new(3, 2, subjects, DiagonalPolicy::Exclude).unwrap()
            } else {
                dataset.clone()
            };
            let state = draw_samples(&params, family, &dataset, &config, mask).unwrap();
            let got = q1(&params, family, &dataset, &state, mask);

            let mut expect = 0.0;
            for (subj, bank) in dataset.subjects().iter().zip(state.subjects()) {
                for sample in &bank.samples {
                    expect -= subject_loglik(&params, family, subj, sample, mask).unwrap();
                }
            }
            expect /= config.m as f64;
            assert!(
                (got - expect).abs() < 1e-9 * expect.abs().max(1.0),
                "family {family:?}: got {got}, expected {expect}"
            );
        }
    }

    #[test]
    fn q2_known_value_and_oracle() {
        let (params, dataset) = gaussian_desk();
        let mask = dataset.mask();
        let n = dataset.n();

        // All-zero bank: q2 = N * m_entries/2 * log(2 pi).
        let zero_bank = SubjectSamples {
            samples: vec![DMatrix::zeros(n, n); 2],
            mean: DMatrix::zeros(n, n),
            ss: DMatrix::zeros(n, n),
            last: DMatrix::zeros(n, n),
            scales: DMatrix::from_element(n, n, 1.0),
            acceptance: DMatrix::zeros(n, n),
        };
        let state = MwgState { m: 2, subjects: vec![zero_bank.clone(), zero_bank] };
        let ones = DMatrix::from_element(n, n, 1.0);
        let got = q2(&state, &ones, mask).unwrap();
        let m_entries = mask.count(n) as f64;
        assert!((got - 2.0 * m_entries / 2.0 * LN_2PI).abs() < 1e-12);

        // Random bank matches -(1/M) sum theta_logprior.
        let config = MwgConfig { m: 4, burn_in: 1, seed: 13, ..Default::default() };
        let state =
            draw_samples(&params, Family::GaussianIdentity, &dataset, &config, mask).unwrap();
        let got = q2(&state, params.sigma_theta(), mask).unwrap();
        let mut expect = 0.0;
        for bank in state.subjects() {
            for s in &bank.samples {
                expect -= theta_logprior(s, params.sigma_theta(), mask).unwrap();
            }
        }
        expect /= config.m as f64;
        assert!((got - expect).abs() < 1e-9 * expect.abs().max(1.0));
    }

    #[test]
    fn q1_plus_q2_matches_complete_loglik_at_current_params() {
        let (params, dataset) = gaussian_desk();
        let mask = dataset.mask();
        let config = MwgConfig { m: 6, burn_in: 4, seed: 21, ..Default::default() };
        let state =
            draw_samples(&params, Family::GaussianIdentity, &dataset, &config, mask).unwrap();

        let lhs = q1(&params, Family::GaussianIdentity, &dataset, &state, mask)
            + q2(&state, params.sigma_theta(), mask).unwrap();
        let mut rhs = 0.0;
        for (subj, bank) in dataset.subjects().iter().zip(state.subjects()) {
            for s in &bank.samples {
                rhs -= subject_loglik(&params, Family::GaussianIdentity, subj, s, mask).unwrap();
                rhs -= theta_logprior(s, params.sigma_theta(), mask).unwrap();
            }
        }
        rhs /= config.m as f64;
        assert!((lhs - rhs).abs() < 1e-10 * rhs.abs().max(1.0));
    }

    #[test]
    fn entry_chains_are_independent_bit_exact() {
        let (params, dataset) = gaussian_desk();
        let mask = dataset.mask();
        let config = MwgConfig { m: 1, burn_in: 0, seed: 33, adapt: false, ..Default::default() };
        let subject = &dataset.subjects()[0];

        let mut full = SubjectChain::new(&params, Family::GaussianIdentity, subject, &config, mask)
            .unwrap();
        let mut frozen =
            SubjectChain::new(&params, Family::GaussianIdentity, subject, &config, mask).unwrap();

        let target = (0, 1);
        for _ in 0..25 {
            full.sweep(false).unwrap();
            frozen
                .sweep_filtered(false, |j, k| (j, k) == target)
                .unwrap();
            assert_eq!(
                full.theta_matrix()[target],
                frozen.theta_matrix()[target],
                "marginal chain must not depend on other entries' updates"
            );
        }
    }

    #[test]
    fn gaussian_chain_matches_conjugate_posterior() {
        // Single entry, T = 3 observations.
        let responses = [1.2, 0.8, 1.5];
        let (se2, st2) = (0.5, 2.0);
        let (params, dataset) =
            single_entry_setup(Family::GaussianIdentity, &responses, se2, st2);
        let mask = DiagonalPolicy::Include.mask();
        let config =
            MwgConfig { m: 20_000, burn_in: 200, seed: 99, ..Default::default() };
        let state =
            draw_samples(&params, Family::GaussianIdentity, &dataset, &config, mask).unwrap();

        let post = exact_gaussian_posterior(
            &params,
            Family::GaussianIdentity,
            &dataset,
            params.sigma_theta(),
            mask,
        )
        .unwrap();
        let (m_star, v_star) = (post[0].0[(0, 0)], post[0].1[(0, 0)]);
        let t = responses.len() as f64;
        assert!((v_star - 1.0 / (t / se2 + 1.0 / st2)).abs() < 1e-12);
        assert!(
            (m_star - v_star * responses.iter().sum::<f64>() / se2).abs() < 1e-12
        );

        let draws: Vec<f64> =
            state.subjects()[0].samples.iter().map(|s| s[(0, 0)]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / (draws.len() - 1) as f64;

        // Batch-means MC standard errors (autocorrelated chain).
        let se_mean = batch_means_se(&draws);
        let sq: Vec<f64> = draws.iter().map(|d| (d - mean) * (d - mean)).collect();
        let se_var = batch_means_se(&sq);
        assert!(
            (mean - m_star).abs() < 3.0 * se_mean,
            "mean {mean} vs {m_star} (3 se = {})",
            3.0 * se_mean
        );
        assert!(
            (var - v_star).abs() < 3.0 * se_var,
            "var {var} vs {v_star} (3 se = {})",
            3.0 * se_var
        );
    }

    pub(crate) fn batch_means_se(x: &[f64]) -> f64 {
        let b = 50;
        let len = x.len() / b;
        let means: Vec<f64> = (0..b)
            .map(|i| x[i * len..(i + 1) * len].iter().sum::<f64>() / len as f64)
            .collect();
        let grand = means.iter().sum::<f64>() / b as f64;
        let var_b =
            means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>() / (b - 1) as f64;
        (var_b / b as f64).sqrt()
    }

    #[test]
    fn logit_chain_matches_quadrature_posterior_mean() {
        let responses = [1.0, 1.0, 0.0, 1.0];
        let (params, dataset) =
            single_entry_setup(Family::BernoulliLogit, &responses, 1.0, 2.25);
        let mask = DiagonalPolicy::Include.mask();
        let config =
            MwgConfig { m: 20_000, burn_in: 200, seed: 123, ..Default::default() };
        let state =
            draw_samples(&params, Family::BernoulliLogit, &dataset, &config, mask).unwrap();

        // Posterior mean by mode-centered quadrature of the 1-D target.
        let st2 = 2.25;
        let sum_a: f64 = responses.iter().sum();
        let t = responses.len() as f64;
        let logpost = |th: f64| sum_a * th - t * log1p_exp(th) - th * th / (2.0 * st2);
        let deriv = |th: f64| {
            let s = crate::model::sigmoid(th);
            (sum_a - t * s - th / st2, -t * s * (1.0 - s) - 1.0 / st2)
        };
        let (mode, curv) = crate::quad::newton_concave_max(0.0, deriv);
        let gh = crate::quad::GaussHermite::new(40);
        let log_z = gh.log_integral(mode, curv.sqrt().recip(), logpost);
        let log_m1 = gh.log_integral(mode, curv.sqrt().recip(), |th| {
            // first moment of the shifted-positive integrand: integrate
            // (th + 100) * posterior to keep the integrand positive.
            logpost(th) + (th + 100.0).ln()
        });
        let post_mean = (log_m1 - log_z).exp() - 100.0;

        let draws: Vec<f64> =
            state.subjects()[0].samples.iter().map(|s| s[(0, 0)]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let se = batch_means_se(&draws);
        assert!(
            (mean - post_mean).abs() < 3.0 * se,
            "mean {mean} vs quadrature {post_mean} (3 se = {})",
            3.0 * se
        );
    }

    #[test]
    fn exact_posterior_limits() {
        let responses = [2.0, 2.6];
        let (params, dataset) =
            single_entry_setup(Family::GaussianIdentity, &responses, 1.0, 1.0);
        let mask = DiagonalPolicy::Include.mask();

        // Flat prior: posterior mean -> sample mean of residuals.
        let flat = DMatrix::from_element(1, 1, 1e8);
        let post = exact_gaussian_posterior(
            &params,
            Family::GaussianIdentity,
            &dataset,
            &flat,
            mask,
        )
        .unwrap();
        assert!((post[0].0[(0, 0)] - 2.3).abs() < 1e-6);

        // Point-mass prior: posterior mean -> 0.
        let point = DMatrix::from_element(1, 1, 1e-8);
        let post = exact_gaussian_posterior(
            &params,
            Family::GaussianIdentity,
            &dataset,
            &point,
            mask,
        )
        .unwrap();
        assert!(post[0].0[(0, 0)].abs() < 1e-6);

        // Non-Gaussian family unsupported.
        assert!(matches!(
            exact_gaussian_posterior(
                &params,
                Family::BernoulliLogit,
                &dataset,
                &point,
                mask
            ),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn non_finite_state_is_an_internal_error() {
        let (params, dataset) = single_entry_setup(Family::GaussianIdentity, &[1.0], 1.0, 1.0);
        let mask = DiagonalPolicy::Include.mask();
        let bad = DMatrix::from_element(1, 1, f64::NAN);
        let scales = DMatrix::from_element(1, 1, 1.0);
        let res = SubjectChain::with_state(
            &params,
            Family::GaussianIdentity,
            &dataset.subjects()[0],
            &MwgConfig::default(),
            mask,
            Some((&bad, &scales)),
        );
        assert!(matches!(res, Err(Error::Numerical { .. })));
    }

    #[test]
    fn whole_matrix_mode_runs_and_targets_same_posterior() {
        let responses = [1.2, 0.8, 1.5];
        let (params, dataset) =
            single_entry_setup(Family::GaussianIdentity, &responses, 0.5, 2.0);
        let mask = DiagonalPolicy::Include.mask();
        let config = MwgConfig {
            m: 20_000,
            burn_in: 200,
            seed: 77,
            whole_matrix: true,
            ..Default::default()
        };
        let state =
            draw_samples(&params, Family::GaussianIdentity, &dataset, &config, mask).unwrap();
        let post = exact_gaussian_posterior(
            &params,
            Family::GaussianIdentity,
            &dataset,
            params.sigma_theta(),
            mask,
        )
        .unwrap();
        let draws: Vec<f64> =
            state.subjects()[0].samples.iter().map(|s| s[(0, 0)]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let se = batch_means_se(&draws);
        assert!((mean - post[0].0[(0, 0)]).abs() < 3.0 * se);
    }

    #[test]
    fn mwg_sweep_moves_from_given_state() {
        let (params, dataset) = gaussian_desk();
        let mask = dataset.mask();
        let config = MwgConfig { seed: 3, ..Default::default() };
        let theta0 = DMatrix::zeros(3, 3);
        let (theta1, flags) = mwg_sweep(
            &params,
            Family::GaussianIdentity,
            &dataset.subjects()[0],
            &theta0,
            &config,
            mask,
        )
        .unwrap();
        assert_eq!(theta1.nrows(), 3);
        // Diagonal is unmasked: never proposed, never accepted.
        for j in 0..3 {
            assert_eq!(theta1[(j, j)], 0.0);
            assert!(!flags[(j, j)]);
        }
    }
}
