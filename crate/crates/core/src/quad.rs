//! Gauss-Hermite quadrature with mode-centered rescaling.
//!
//! The one-dimensional integrals needed here have the form
//! `I = ∫ exp(L(t)) dt` with `L` strictly concave (log-likelihood plus
//! log-prior of a scalar random intercept). Raw Gauss-Hermite nodes
//! scaled by the prior are badly placed when the posterior is much
//! narrower than the prior, so nodes are centered at the mode of `L`
//! and scaled by the curvature there. For a Gaussian integrand the
//! rescaled rule is exact with any node count.

use nalgebra::DMatrix;

/// Nodes and weights of the (physicists') Gauss-Hermite rule:
/// `∫ f(x) exp(-x^2) dx ≈ sum_k w_k f(x_k)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Build a `k`-point rule via Golub-Welsch on the Jacobi matrix.
    pub fn new(k: usize) -> Self {
        assert!(k >= 1, "quadrature needs at least one node");
        if k == 1 {
            return GaussHermite { nodes: vec![0.0], weights: vec![std::f64::consts::PI.sqrt()] };
        }
        let mut jacobi = DMatrix::zeros(k, k);
        for i in 1..k {
            let b = (i as f64 / 2.0).sqrt();
            jacobi[(i - 1, i)] = b;
            jacobi[(i, i - 1)] = b;
        }
        let eig = jacobi.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = (0..k)
            .map(|j| {
                let node = eig.eigenvalues[j];
                let w = std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, j)].powi(2);
                (node, w)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `log ∫ exp(L(t)) dt` with nodes centered at `mode` and scaled by
    /// `scale` (the approximate posterior standard deviation).
    ///
    /// Evaluated in log space: the substitution `t = mode + sqrt(2) scale z`
    /// gives `log I = log(sqrt(2) scale) + LSE_k[log w_k + z_k^2 + L(t_k)]`.
    pub fn log_integral(&self, mode: f64, scale: f64, logf: impl Fn(f64) -> f64) -> f64 {
        debug_assert!(scale > 0.0 && scale.is_finite());
        let c = std::f64::consts::SQRT_2 * scale;
        let mut terms = Vec::with_capacity(self.nodes.len());
        let mut max_term = f64::NEG_INFINITY;
        for (&z, &w) in self.nodes.iter().zip(&self.weights) {
            let t = w.ln() + z * z + logf(mode + c * z);
            if t > max_term {
                max_term = t;
            }
            terms.push(t);
        }
        if !max_term.is_finite() {
            return max_term + c.ln();
        }
        let sum: f64 = terms.iter().map(|t| (t - max_term).exp()).sum();
        c.ln() + max_term + sum.ln()
    }
}

/// Maximize a strictly concave `L` by Newton's method.
///
/// `deriv` returns `(L'(t), L''(t))` with `L'' < 0`. Returns the mode
/// and the curvature `-L''` at the mode.
pub fn newton_concave_max(start: f64, deriv: impl Fn(f64) -> (f64, f64)) -> (f64, f64) {
    let mut t = start;
    for _ in 0..100 {
        let (g, h) = deriv(t);
        debug_assert!(h < 0.0, "target must be strictly concave");
        let step = g / h;
        t -= step;
        if step.abs() <= 1e-13 * (1.0 + t.abs()) {
            break;
        }
    }
    let (_, h) = deriv(t);
    (t, -h)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_2PI: f64 = 1.8378770664093453;

    #[test]
    fn moments_of_standard_weight() {
        let gh = GaussHermite::new(12);
        let total: f64 = gh.weights().iter().sum();
        assert!((total - std::f64::consts::PI.sqrt()).abs() < 1e-12);

        let m2: f64 = gh
            .nodes()
            .iter()
            .zip(gh.weights())
            .map(|(x, w)| w * x * x)
            .sum();
        assert!((m2 - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-11);

        let m4: f64 = gh
            .nodes()
            .iter()
            .zip(gh.weights())
            .map(|(x, w)| w * x.powi(4))
            .sum();
        assert!((m4 - 0.75 * std::f64::consts::PI.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn normal_density_integrates_to_one() {
        let gh = GaussHermite::new(5);
        let (m, s2) = (1.3, 0.07);
        let logf = |t: f64| -(t - m) * (t - m) / (2.0 * s2) - 0.5 * (LN_2PI + s2.ln());
        let v = gh.log_integral(m, s2.sqrt(), logf);
        assert!(v.abs() < 1e-12, "got {v}");
    }

    #[test]
    fn gaussian_marginal_matches_closed_form() {
        // ∫ N(a; t, se2) N(t; 0, st2) dt = N(a; 0, se2 + st2), with the
        // quadrature centered at the exact posterior mode/scale.
        let gh = GaussHermite::new(20);
        let (a, se2, st2) = (0.8, 0.25, 4.0);
        let prec = 1.0 / se2 + 1.0 / st2;
        let mode = (a / se2) / prec;
        let logf = |t: f64| {
            let d = a - t;
            -d * d / (2.0 * se2) - 0.5 * (LN_2PI + se2.ln()) - t * t / (2.0 * st2)
                - 0.5 * (LN_2PI + st2.ln())
        };
        let v = gh.log_integral(mode, prec.sqrt().recip(), logf);
        let var = se2 + st2;
        let expect = -a * a / (2.0 * var) - 0.5 * (LN_2PI + var.ln());
        assert!((v - expect).abs() < 1e-12, "got {v}, expected {expect}");
    }

    #[test]
    fn newton_finds_quadratic_max() {
        let (mode, curv) = newton_concave_max(5.0, |t| (-(t - 2.0) * 3.0, -3.0));
        assert!((mode - 2.0).abs() < 1e-12);
        assert!((curv - 3.0).abs() < 1e-12);
    }
}
