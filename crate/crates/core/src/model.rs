//! Data model: longitudinal network datasets, parameter containers,
//! exponential-family machinery and the linear predictor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Response distribution / canonical link pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Gaussian responses, identity link, dispersion `sigma_e2`.
    GaussianIdentity,
    /// Bernoulli responses, logit link.
    BernoulliLogit,
}

/// Overflow-safe `log(1 + exp(x))`.
#[inline]
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const LN_2PI: f64 = 1.8378770664093453;

impl Family {
    /// Per-entry log density at natural parameter `eta`, no validation.
    #[inline]
    pub(crate) fn log_density_unchecked(self, a: f64, eta: f64, sigma_e2: f64) -> f64 {
        match self {
            Family::GaussianIdentity => {
                let d = a - eta;
                -d * d / (2.0 * sigma_e2) - 0.5 * (LN_2PI + sigma_e2.ln())
            }
            Family::BernoulliLogit => a * eta - log1p_exp(eta),
        }
    }
}

/// Whether diagonal entries take part in the likelihood.
///
/// The model density multiplies over off-diagonal pairs only, so
/// `Exclude` is the default for fitting; the synthetic-data generators
/// draw every entry, so the replication harness uses `Include`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagonalPolicy {
    Exclude,
    Include,
}

impl DiagonalPolicy {
    pub fn mask(self) -> EntryMask {
        EntryMask { policy: self }
    }
}

/// Entry filter derived from a [`DiagonalPolicy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryMask {
    policy: DiagonalPolicy,
}

impl EntryMask {
    #[inline]
    pub fn includes(&self, j: usize, k: usize) -> bool {
        match self.policy {
            DiagonalPolicy::Exclude => j != k,
            DiagonalPolicy::Include => true,
        }
    }

    pub fn policy(&self) -> DiagonalPolicy {
        self.policy
    }

    /// Number of masked-in entries of an `n x n` matrix.
    pub fn count(&self, n: usize) -> usize {
        match self.policy {
            DiagonalPolicy::Exclude => n * n - n,
            DiagonalPolicy::Include => n * n,
        }
    }
}

/// One subject's observation sequence: `T_i` response matrices with the
/// matching covariate vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    id: u64,
    responses: Vec<DMatrix<f64>>,
    covariates: Vec<DVector<f64>>,
}

impl SubjectRecord {
    pub fn new(
        id: u64,
        responses: Vec<DMatrix<f64>>,
        covariates: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if responses.is_empty() {
            return Err(Error::invalid(format!(
                "subject {id}: needs at least one observation"
            )));
        }
        if responses.len() != covariates.len() {
            return Err(Error::invalid(format!(
                "subject {id}: {} responses but {} covariate vectors",
                responses.len(),
                covariates.len()
            )));
        }
        Ok(SubjectRecord { id, responses, covariates })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Number of observations `T_i`.
    pub fn n_obs(&self) -> usize {
        self.responses.len()
    }

    pub fn responses(&self) -> &[DMatrix<f64>] {
        &self.responses
    }

    pub fn covariates(&self) -> &[DVector<f64>] {
        &self.covariates
    }
}

/// Per-subject sequences of `n x n` responses with `p` time-varying
/// covariates. Subjects are stored sorted by id, so any input ordering
/// yields the same in-memory dataset (and therefore identical fits).
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalNetworkDataset {
    n: usize,
    p: usize,
    subjects: Vec<SubjectRecord>,
    diagonal_policy: DiagonalPolicy,
}

impl LongitudinalNetworkDataset {
    pub fn new(
        n: usize,
        p: usize,
        mut subjects: Vec<SubjectRecord>,
        diagonal_policy: DiagonalPolicy,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("node count n must be positive"));
        }
        subjects.sort_by_key(|s| s.id);
        for pair in subjects.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::invalid(format!("duplicate subject id {}", pair[0].id)));
            }
        }
        for s in &subjects {
            for (t, a) in s.responses.iter().enumerate() {
                if a.nrows() != n || a.ncols() != n {
                    return Err(Error::invalid(format!(
                        "subject {} time {t}: response is {}x{}, expected {n}x{n}",
                        s.id,
                        a.nrows(),
                        a.ncols()
                    )));
                }
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!(
                        "subject {} time {t}: non-finite response entry",
                        s.id
                    )));
                }
            }
            for (t, x) in s.covariates.iter().enumerate() {
                if x.len() != p {
                    return Err(Error::invalid(format!(
                        "subject {} time {t}: covariate length {} != p = {p}",
                        s.id,
                        x.len()
                    )));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!(
                        "subject {} time {t}: non-finite covariate",
                        s.id
                    )));
                }
            }
        }
        Ok(LongitudinalNetworkDataset { n, p, subjects, diagonal_policy })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn diagonal_policy(&self) -> DiagonalPolicy {
        self.diagonal_policy
    }

    pub fn mask(&self) -> EntryMask {
        self.diagonal_policy.mask()
    }

    /// Total observation count over subjects and time.
    pub fn total_obs(&self) -> usize {
        self.subjects.iter().map(|s| s.n_obs()).sum()
    }

    /// Check that responses are valid for `family` (masked entries must
    /// be 0/1 for Bernoulli).
    pub fn validate_for_family(&self, family: Family) -> Result<()> {
        if family != Family::BernoulliLogit {
            return Ok(());
        }
        let mask = self.mask();
        for s in &self.subjects {
            for (t, a) in s.responses.iter().enumerate() {
                for j in 0..self.n {
                    for k in 0..self.n {
                        let v = a[(j, k)];
                        if mask.includes(j, k) && v != 0.0 && v != 1.0 {
                            return Err(Error::invalid(format!(
                                "subject {} time {t} entry ({j},{k}): \
                                 Bernoulli response must be 0 or 1, got {v}",
                                s.id
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Coefficient tensor `B` of shape `n x n x p`, stored as `p` frontal
/// slices. Entry order for tie-breaking is lexicographic `(j, k, l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefTensor {
    n: usize,
    p: usize,
    slices: Vec<DMatrix<f64>>,
}

impl CoefTensor {
    pub fn zeros(n: usize, p: usize) -> Self {
        CoefTensor { n, p, slices: vec![DMatrix::zeros(n, n); p] }
    }

    pub fn from_slices(slices: Vec<DMatrix<f64>>) -> Result<Self> {
        let p = slices.len();
        let n = slices.first().map_or(0, |s| s.nrows());
        for s in &slices {
            if s.nrows() != n || s.ncols() != n {
                return Err(Error::invalid("coefficient slices must share an n x n shape"));
            }
        }
        Ok(CoefTensor { n, p, slices })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn slices(&self) -> &[DMatrix<f64>] {
        &self.slices
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize, l: usize) -> f64 {
        self.slices[l][(j, k)]
    }

    #[inline]
    pub fn set(&mut self, j: usize, k: usize, l: usize, v: f64) {
        self.slices[l][(j, k)] = v;
    }

    pub fn total_entries(&self) -> usize {
        self.n * self.n * self.p
    }

    pub fn nnz(&self) -> usize {
        self.slices.iter().map(|s| s.iter().filter(|v| **v != 0.0).count()).sum()
    }

    /// Mode-3 contraction `sum_l x_l B[:,:,l]`.
    pub fn contract(&self, x: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(x.len(), self.p, "covariate length mismatch");
        let mut out = DMatrix::zeros(self.n, self.n);
        for (l, slice) in self.slices.iter().enumerate() {
            let xl = x[l];
            if xl != 0.0 {
                out.zip_apply(slice, |o, s| *o += xl * s);
            }
        }
        out
    }

    /// In-place contraction into a reusable buffer.
    pub(crate) fn contract_into(&self, x: &DVector<f64>, out: &mut DMatrix<f64>) {
        out.fill(0.0);
        for (l, slice) in self.slices.iter().enumerate() {
            let xl = x[l];
            if xl != 0.0 {
                let o = out.as_mut_slice();
                let s = slice.as_slice();
                for (oi, si) in o.iter_mut().zip(s) {
                    *oi += xl * si;
                }
            }
        }
    }

    /// Iterate entries in lexicographic `(j, k, l)` order.
    pub fn iter_lex(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        let n = self.n;
        let p = self.p;
        (0..n).flat_map(move |j| {
            (0..n).flat_map(move |k| (0..p).map(move |l| (j, k, l, self.get(j, k, l))))
        })
    }

    pub fn frob_norm_sq_diff(&self, other: &CoefTensor) -> f64 {
        assert_eq!((self.n, self.p), (other.n, other.p));
        self.slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| {
                a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            })
            .sum()
    }
}

/// Low-rank intercept factorization.
#[derive(Debug, Clone, PartialEq)]
pub enum InterceptFactor {
    /// `Theta = U V^T` with `U, V` of shape `n x r`.
    Factored { u: DMatrix<f64>, v: DMatrix<f64> },
    /// `Theta = U diag(lambda) U^T` with `lambda` entries in {-1, +1},
    /// fixed after initialization.
    SymmetricFactored { u: DMatrix<f64>, lambda: DVector<f64> },
}

/// Full parameter container: factored intercept, coefficient tensor,
/// Gaussian dispersion and the random-intercept variance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    intercept: InterceptFactor,
    coef: CoefTensor,
    sigma_e2: f64,
    sigma_theta: DMatrix<f64>,
}

impl ModelParams {
    pub fn new(
        intercept: InterceptFactor,
        coef: CoefTensor,
        sigma_e2: f64,
        sigma_theta: DMatrix<f64>,
    ) -> Result<Self> {
        let (n, r) = match &intercept {
            InterceptFactor::Factored { u, v } => {
                if u.shape() != v.shape() {
                    return Err(Error::invalid("U and V must share the same shape"));
                }
                u.shape()
            }
            InterceptFactor::SymmetricFactored { u, lambda } => {
                if lambda.len() != u.ncols() {
                    return Err(Error::invalid("lambda length must equal the rank"));
                }
                if lambda.iter().any(|v| *v != 1.0 && *v != -1.0) {
                    return Err(Error::invalid("lambda entries must be -1 or +1"));
                }
                u.shape()
            }
        };
        if r == 0 || r > n {
            return Err(Error::invalid(format!("rank r = {r} must satisfy 1 <= r <= n = {n}")));
        }
        if coef.n() != n {
            return Err(Error::invalid("coefficient tensor node count mismatch"));
        }
        if !(sigma_e2 > 0.0) {
            return Err(Error::invalid(format!("sigma_e2 = {sigma_e2} must be positive")));
        }
        if sigma_theta.nrows() != n || sigma_theta.ncols() != n {
            return Err(Error::invalid("sigma_theta must be n x n"));
        }
        if sigma_theta.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("sigma_theta entries must be nonnegative"));
        }
        Ok(ModelParams { intercept, coef, sigma_e2, sigma_theta })
    }

    pub fn n(&self) -> usize {
        match &self.intercept {
            InterceptFactor::Factored { u, .. } => u.nrows(),
            InterceptFactor::SymmetricFactored { u, .. } => u.nrows(),
        }
    }

    pub fn rank(&self) -> usize {
        match &self.intercept {
            InterceptFactor::Factored { u, .. } => u.ncols(),
            InterceptFactor::SymmetricFactored { u, .. } => u.ncols(),
        }
    }

    pub fn p(&self) -> usize {
        self.coef.p()
    }

    pub fn intercept(&self) -> &InterceptFactor {
        &self.intercept
    }

    pub fn is_symmetric_mode(&self) -> bool {
        matches!(self.intercept, InterceptFactor::SymmetricFactored { .. })
    }

    pub fn coef(&self) -> &CoefTensor {
        &self.coef
    }

    pub fn sigma_e2(&self) -> f64 {
        self.sigma_e2
    }

    pub fn sigma_theta(&self) -> &DMatrix<f64> {
        &self.sigma_theta
    }

    pub fn set_sigma_e2(&mut self, v: f64) -> Result<()> {
        if !(v > 0.0) {
            return Err(Error::invalid(format!("sigma_e2 = {v} must be positive")));
        }
        self.sigma_e2 = v;
        Ok(())
    }

    pub fn set_sigma_theta(&mut self, m: DMatrix<f64>) -> Result<()> {
        if m.shape() != (self.n(), self.n()) {
            return Err(Error::invalid("sigma_theta must be n x n"));
        }
        if m.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("sigma_theta entries must be nonnegative"));
        }
        self.sigma_theta = m;
        Ok(())
    }

    pub(crate) fn set_intercept(&mut self, intercept: InterceptFactor) {
        self.intercept = intercept;
    }

    pub(crate) fn set_coef(&mut self, coef: CoefTensor) {
        self.coef = coef;
    }

    /// Materialize the fixed intercept `Theta`.
    pub fn theta_matrix(&self) -> DMatrix<f64> {
        match &self.intercept {
            InterceptFactor::Factored { u, v } => u * v.transpose(),
            InterceptFactor::SymmetricFactored { u, lambda } => {
                let mut ul = u.clone();
                for (c, s) in lambda.iter().enumerate() {
                    ul.column_mut(c).scale_mut(*s);
                }
                &ul * u.transpose()
            }
        }
    }
}

/// Linear predictor `eta_it = Theta + theta_i + sum_l x_l B[:,:,l]`.
pub fn linear_predictor(
    params: &ModelParams,
    theta_i: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = params.n();
    if theta_i.nrows() != n || theta_i.ncols() != n {
        return Err(Error::invalid(format!(
            "theta_i is {}x{}, expected {n}x{n}",
            theta_i.nrows(),
            theta_i.ncols()
        )));
    }
    if x.len() != params.p() {
        return Err(Error::invalid(format!(
            "covariate length {} != p = {}",
            x.len(),
            params.p()
        )));
    }
    let mut eta = params.theta_matrix();
    eta += theta_i;
    eta += params.coef().contract(x);
    Ok(eta)
}

/// Per-entry exponential-family log density.
///
/// Gaussian: `-(a - eta)^2 / (2 sigma_e2) - log(2 pi sigma_e2)/2`;
/// logit: `a*eta - log(1 + exp(eta))`, overflow-safe for large `|eta|`.
pub fn entry_logdensity(family: Family, a: f64, eta: f64, sigma_e2: f64) -> Result<f64> {
    if !(sigma_e2 > 0.0) {
        return Err(Error::invalid(format!("sigma_e2 = {sigma_e2} must be positive")));
    }
    if family == Family::BernoulliLogit && a != 0.0 && a != 1.0 {
        return Err(Error::invalid(format!("Bernoulli response must be 0 or 1, got {a}")));
    }
    Ok(family.log_density_unchecked(a, eta, sigma_e2))
}

/// Complete-data log-likelihood of one subject at a fixed random
/// intercept: sum over time and masked entries of the entry densities.
pub fn subject_loglik(
    params: &ModelParams,
    family: Family,
    subject: &SubjectRecord,
    theta_i: &DMatrix<f64>,
    mask: EntryMask,
) -> Result<f64> {
    let n = params.n();
    let mut total = 0.0;
    for (a, x) in subject.responses().iter().zip(subject.covariates()) {
        let eta = linear_predictor(params, theta_i, x)?;
        for j in 0..n {
            for k in 0..n {
                if mask.includes(j, k) {
                    total += family.log_density_unchecked(a[(j, k)], eta[(j, k)], params.sigma_e2);
                }
            }
        }
    }
    Ok(total)
}

/// Log of the entrywise normal prior of a random intercept matrix over
/// the masked entries.
pub fn theta_logprior(
    theta_i: &DMatrix<f64>,
    sigma_theta: &DMatrix<f64>,
    mask: EntryMask,
) -> Result<f64> {
    if theta_i.shape() != sigma_theta.shape() {
        return Err(Error::invalid("theta and sigma_theta shapes differ"));
    }
    let n = theta_i.nrows();
    let mut total = 0.0;
    for j in 0..n {
        for k in 0..theta_i.ncols() {
            if !mask.includes(j, k) {
                continue;
            }
            let s2 = sigma_theta[(j, k)];
            if !(s2 > 0.0) {
                return Err(Error::invalid(format!(
                    "degenerate prior: sigma_theta[({j},{k})] = {s2} on a masked entry"
                )));
            }
            let t = theta_i[(j, k)];
            total += -t * t / (2.0 * s2) - 0.5 * (LN_2PI + s2.ln());
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    pub(crate) fn random_matrix(n: usize, m: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| crate::rng::std_normal(rng))
    }

    fn random_params(n: usize, r: usize, p: usize, rng: &mut impl Rng) -> ModelParams {
        ModelParams::new(
            InterceptFactor::Factored {
                u: random_matrix(n, r, rng),
                v: random_matrix(n, r, rng),
            },
            CoefTensor::from_slices((0..p).map(|_| random_matrix(n, n, rng)).collect()).unwrap(),
            1.0,
            DMatrix::from_element(n, n, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn linear_predictor_zero_params_is_zero() {
        let params = ModelParams::new(
            InterceptFactor::Factored { u: DMatrix::zeros(3, 2), v: DMatrix::zeros(3, 2) },
            CoefTensor::zeros(3, 2),
            1.0,
            DMatrix::from_element(3, 3, 1.0),
        )
        .unwrap();
        let eta = linear_predictor(
            &params,
            &DMatrix::zeros(3, 3),
            &DVector::from_vec(vec![1.5, -2.0]),
        )
        .unwrap();
        assert_eq!(eta, DMatrix::zeros(3, 3));
    }

    #[test]
    fn linear_predictor_rank_one_outer_product() {
        let u = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let params = ModelParams::new(
            InterceptFactor::Factored { u: u.clone(), v: u },
            CoefTensor::zeros(2, 1),
            1.0,
            DMatrix::from_element(2, 2, 1.0),
        )
        .unwrap();
        let eta =
            linear_predictor(&params, &DMatrix::zeros(2, 2), &DVector::from_vec(vec![0.0]))
                .unwrap();
        assert_eq!(eta, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn linear_predictor_matches_triple_loop() {
        let mut rng = derive_rng(11, &[1]);
        let (n, r, p) = (3, 2, 2);
        let params = random_params(n, r, p, &mut rng);
        let theta_i = random_matrix(n, n, &mut rng);
        let x = DVector::from_fn(p, |_, _| crate::rng::std_normal(&mut rng));

        let eta = linear_predictor(&params, &theta_i, &x).unwrap();

        // Independent entry-by-entry evaluation.
        let (u, v) = match params.intercept() {
            InterceptFactor::Factored { u, v } => (u, v),
            _ => unreachable!(),
        };
        for j in 0..n {
            for k in 0..n {
                let mut expect = theta_i[(j, k)];
                for s in 0..r {
                    expect += u[(j, s)] * v[(k, s)];
                }
                for l in 0..p {
                    expect += x[l] * params.coef().get(j, k, l);
                }
                assert!((eta[(j, k)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_predictor_is_affine_in_x() {
        let mut rng = derive_rng(12, &[2]);
        let (n, r, p) = (4, 2, 3);
        let params = random_params(n, r, p, &mut rng);
        let theta_i = random_matrix(n, n, &mut rng);
        for _ in 0..20 {
            let x1 = DVector::from_fn(p, |_, _| crate::rng::std_normal(&mut rng));
            let x2 = DVector::from_fn(p, |_, _| crate::rng::std_normal(&mut rng));
            let lhs = linear_predictor(&params, &theta_i, &x1).unwrap()
                + linear_predictor(&params, &theta_i, &x2).unwrap()
                - linear_predictor(&params, &theta_i, &DVector::zeros(p)).unwrap();
            let rhs = linear_predictor(&params, &theta_i, &(x1 + x2)).unwrap();
            assert!((lhs - rhs).abs().max() < 1e-12);
        }
    }

    #[test]
    fn linear_predictor_rejects_dimension_mismatch() {
        let mut rng = derive_rng(13, &[3]);
        let params = random_params(3, 1, 2, &mut rng);
        assert!(matches!(
            linear_predictor(&params, &DMatrix::zeros(2, 2), &DVector::zeros(2)),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            linear_predictor(&params, &DMatrix::zeros(3, 3), &DVector::zeros(1)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn entry_logdensity_known_values() {
        // Symmetric logistic point.
        let v = entry_logdensity(Family::BernoulliLogit, 1.0, 0.0, 1.0).unwrap();
        assert!((v - (-(2.0f64.ln()))).abs() < 1e-15);

        // Zero residual Gaussian.
        let v = entry_logdensity(Family::GaussianIdentity, 0.7, 0.7, 1.0).unwrap();
        assert!((v - (-0.5 * LN_2PI)).abs() < 1e-15);

        // Large eta without overflow: -log(1 + e^30) = -(30 + log1p(e^-30)).
        let v = entry_logdensity(Family::BernoulliLogit, 0.0, 30.0, 1.0).unwrap();
        assert!((v - (-30.000000000000094)).abs() < 1e-12);
        assert!(v.is_finite());
        let v = entry_logdensity(Family::BernoulliLogit, 0.0, 800.0, 1.0).unwrap();
        assert!((v + 800.0).abs() < 1e-9);
    }

    #[test]
    fn entry_logdensity_rejects_bad_arguments() {
        assert!(entry_logdensity(Family::GaussianIdentity, 0.0, 0.0, 0.0).is_err());
        assert!(entry_logdensity(Family::GaussianIdentity, 0.0, 0.0, -1.0).is_err());
        assert!(entry_logdensity(Family::BernoulliLogit, 0.5, 0.0, 1.0).is_err());
    }

    #[test]
    fn logit_density_difference_is_eta() {
        // d1 - d0 = (eta - softplus) + softplus: exact up to the one
        // rounding of the intermediate subtraction.
        let mut rng = derive_rng(14, &[4]);
        for _ in 0..500 {
            let eta: f64 = 40.0 * (rng.random::<f64>() - 0.5);
            let d1 = Family::BernoulliLogit.log_density_unchecked(1.0, eta, 1.0);
            let d0 = Family::BernoulliLogit.log_density_unchecked(0.0, eta, 1.0);
            let tol = 4.0 * f64::EPSILON * (1.0 + eta.abs() + d0.abs());
            assert!((d1 - d0 - eta).abs() <= tol, "eta {eta}: {} vs {eta}", d1 - d0);
        }
    }

    fn random_subject(
        id: u64,
        n: usize,
        p: usize,
        t: usize,
        rng: &mut impl Rng,
    ) -> SubjectRecord {
        SubjectRecord::new(
            id,
            (0..t).map(|_| random_matrix(n, n, rng)).collect(),
            (0..t)
                .map(|_| DVector::from_fn(p, |_, _| crate::rng::std_normal(rng)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn subject_loglik_matches_nested_loop_oracle() {
        let mut rng = derive_rng(15, &[5]);
        let (n, r, p, t) = (3, 2, 2, 2);
        let params = random_params(n, r, p, &mut rng);
        let subject = random_subject(0, n, p, t, &mut rng);
        let theta_i = random_matrix(n, n, &mut rng);
        let mask = DiagonalPolicy::Exclude.mask();

        let got = subject_loglik(&params, Family::GaussianIdentity, &subject, &theta_i, mask)
            .unwrap();

        let mut expect = 0.0;
        for ti in 0..t {
            for j in 0..n {
                for k in 0..n {
                    if j == k {
                        continue;
                    }
                    let mut eta = theta_i[(j, k)];
                    let (u, v) = match params.intercept() {
                        InterceptFactor::Factored { u, v } => (u, v),
                        _ => unreachable!(),
                    };
                    for s in 0..r {
                        eta += u[(j, s)] * v[(k, s)];
                    }
                    for l in 0..p {
                        eta += subject.covariates()[ti][l] * params.coef().get(j, k, l);
                    }
                    let d = subject.responses()[ti][(j, k)] - eta;
                    expect += -d * d / 2.0 - 0.5 * LN_2PI;
                }
            }
        }
        assert!((got - expect).abs() < 1e-10);
    }

    #[test]
    fn subject_loglik_additive_over_time() {
        let mut rng = derive_rng(16, &[6]);
        let (n, p) = (3, 2);
        let params = random_params(n, 1, p, &mut rng);
        let theta_i = random_matrix(n, n, &mut rng);
        let mask = DiagonalPolicy::Exclude.mask();

        let single = random_subject(0, n, p, 1, &mut rng);
        let doubled = SubjectRecord::new(
            0,
            vec![single.responses()[0].clone(), single.responses()[0].clone()],
            vec![single.covariates()[0].clone(), single.covariates()[0].clone()],
        )
        .unwrap();

        let one =
            subject_loglik(&params, Family::GaussianIdentity, &single, &theta_i, mask).unwrap();
        let two =
            subject_loglik(&params, Family::GaussianIdentity, &doubled, &theta_i, mask).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn subject_loglik_invariant_under_orthogonal_rotation() {
        let mut rng = derive_rng(17, &[7]);
        let (n, r, p) = (4, 2, 2);
        let params = random_params(n, r, p, &mut rng);
        let subject = random_subject(0, n, p, 2, &mut rng);
        let theta_i = random_matrix(n, n, &mut rng);
        let mask = DiagonalPolicy::Exclude.mask();

        // Orthogonal Q from QR of a random matrix.
        let q = random_matrix(r, r, &mut rng).qr().q();
        let (u, v) = match params.intercept() {
            InterceptFactor::Factored { u, v } => (u.clone(), v.clone()),
            _ => unreachable!(),
        };
        let rotated = ModelParams::new(
            InterceptFactor::Factored { u: &u * &q, v: &v * &q },
            params.coef().clone(),
            params.sigma_e2(),
            params.sigma_theta().clone(),
        )
        .unwrap();

        let a =
            subject_loglik(&params, Family::GaussianIdentity, &subject, &theta_i, mask).unwrap();
        let b =
            subject_loglik(&rotated, Family::GaussianIdentity, &subject, &theta_i, mask).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn excluded_diagonal_never_contributes() {
        let mut rng = derive_rng(18, &[8]);
        let (n, p) = (3, 1);
        let params = random_params(n, 1, p, &mut rng);
        let theta_i = random_matrix(n, n, &mut rng);
        let mask = DiagonalPolicy::Exclude.mask();
        let subject = random_subject(0, n, p, 1, &mut rng);

        let mut perturbed_resp = subject.responses()[0].clone();
        perturbed_resp[(1, 1)] += 1e6;
        let perturbed = SubjectRecord::new(
            0,
            vec![perturbed_resp],
            vec![subject.covariates()[0].clone()],
        )
        .unwrap();

        let a =
            subject_loglik(&params, Family::GaussianIdentity, &subject, &theta_i, mask).unwrap();
        let b = subject_loglik(&params, Family::GaussianIdentity, &perturbed, &theta_i, mask)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn theta_logprior_known_values() {
        let mask = DiagonalPolicy::Exclude.mask();
        // Zero matrix, unit variances, m = n^2 - n masked entries.
        let n = 3;
        let v = theta_logprior(
            &DMatrix::zeros(n, n),
            &DMatrix::from_element(n, n, 1.0),
            mask,
        )
        .unwrap();
        let m = (n * n - n) as f64;
        assert!((v - (-0.5 * m * LN_2PI)).abs() < 1e-12);

        // Single entry theta = 2, variance 4: -1/2 - log(8 pi)/2.
        let mut theta = DMatrix::zeros(2, 2);
        theta[(0, 1)] = 2.0;
        let mut s2 = DMatrix::zeros(2, 2);
        s2[(0, 1)] = 4.0;
        s2[(1, 0)] = 1.0;
        let v = theta_logprior(&theta, &s2, mask).unwrap();
        let expect = -0.5 - 0.5 * (8.0 * std::f64::consts::PI).ln() - 0.5 * LN_2PI;
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn theta_logprior_matches_scalar_oracle() {
        let mut rng = derive_rng(19, &[9]);
        let n = 4;
        let theta = random_matrix(n, n, &mut rng);
        let s2 = DMatrix::from_fn(n, n, |_, _| 0.5 + rng.random::<f64>());
        let mask = DiagonalPolicy::Include.mask();

        let got = theta_logprior(&theta, &s2, mask).unwrap();
        let mut expect = 0.0;
        for j in 0..n {
            for k in 0..n {
                let var = s2[(j, k)];
                let x = theta[(j, k)];
                expect += -(x * x) / (2.0 * var) - 0.5 * (LN_2PI + var.ln());
            }
        }
        assert!((got - expect).abs() < 1e-11);
    }

    #[test]
    fn theta_logprior_rejects_zero_variance_on_masked_entry() {
        let mask = DiagonalPolicy::Include.mask();
        let res = theta_logprior(&DMatrix::zeros(2, 2), &DMatrix::zeros(2, 2), mask);
        assert!(matches!(res, Err(Error::InvalidArgument(_))));

        // Excluded diagonal may carry zero variance.
        let mut s2 = DMatrix::from_element(2, 2, 1.0);
        s2[(0, 0)] = 0.0;
        s2[(1, 1)] = 0.0;
        assert!(theta_logprior(&DMatrix::zeros(2, 2), &s2, DiagonalPolicy::Exclude.mask()).is_ok());
    }

    #[test]
    fn dataset_validation() {
        let good = SubjectRecord::new(
            0,
            vec![DMatrix::zeros(2, 2)],
            vec![DVector::zeros(1)],
        )
        .unwrap();
        assert!(LongitudinalNetworkDataset::new(
            2,
            1,
            vec![good.clone()],
            DiagonalPolicy::Exclude
        )
        .is_ok());

        // T_i = 0 rejected at construction.
        assert!(SubjectRecord::new(0, vec![], vec![]).is_err());

        // Mismatched lengths rejected.
        assert!(SubjectRecord::new(0, vec![DMatrix::zeros(2, 2)], vec![]).is_err());

        // Wrong matrix size rejected.
        assert!(LongitudinalNetworkDataset::new(
            3,
            1,
            vec![good.clone()],
            DiagonalPolicy::Exclude
        )
        .is_err());

        // Duplicate ids rejected.
        assert!(LongitudinalNetworkDataset::new(
            2,
            1,
            vec![good.clone(), good],
            DiagonalPolicy::Exclude
        )
        .is_err());
    }

    #[test]
    fn bernoulli_family_validation() {
        let mut a = DMatrix::zeros(2, 2);
        a[(0, 1)] = 1.0;
        a[(1, 1)] = 0.5; // diagonal: tolerated when excluded
        let s = SubjectRecord::new(0, vec![a], vec![DVector::zeros(1)]).unwrap();
        let d = LongitudinalNetworkDataset::new(2, 1, vec![s.clone()], DiagonalPolicy::Exclude)
            .unwrap();
        assert!(d.validate_for_family(Family::BernoulliLogit).is_ok());
        let d =
            LongitudinalNetworkDataset::new(2, 1, vec![s], DiagonalPolicy::Include).unwrap();
        assert!(d.validate_for_family(Family::BernoulliLogit).is_err());
    }

    #[test]
    fn params_invariants() {
        let ok = ModelParams::new(
            InterceptFactor::SymmetricFactored {
                u: DMatrix::zeros(3, 2),
                lambda: DVector::from_vec(vec![1.0, -1.0]),
            },
            CoefTensor::zeros(3, 1),
            1.0,
            DMatrix::zeros(3, 3),
        );
        assert!(ok.is_ok());

        let bad_lambda = ModelParams::new(
            InterceptFactor::SymmetricFactored {
                u: DMatrix::zeros(3, 2),
                lambda: DVector::from_vec(vec![1.0, 0.5]),
            },
            CoefTensor::zeros(3, 1),
            1.0,
            DMatrix::zeros(3, 3),
        );
        assert!(bad_lambda.is_err());

        let bad_rank = ModelParams::new(
            InterceptFactor::Factored { u: DMatrix::zeros(2, 3), v: DMatrix::zeros(2, 3) },
            CoefTensor::zeros(2, 1),
            1.0,
            DMatrix::zeros(2, 2),
        );
        assert!(bad_rank.is_err());
    }

    #[test]
    fn symmetric_theta_matrix_is_symmetric() {
        let mut rng = derive_rng(20, &[10]);
        let u = random_matrix(4, 2, &mut rng);
        let params = ModelParams::new(
            InterceptFactor::SymmetricFactored {
                u,
                lambda: DVector::from_vec(vec![1.0, -1.0]),
            },
            CoefTensor::zeros(4, 1),
            1.0,
            DMatrix::zeros(4, 4),
        )
        .unwrap();
        let t = params.theta_matrix();
        assert_eq!((&t - t.transpose()).abs().max(), 0.0);
    }
}
