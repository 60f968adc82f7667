//! Normal-Inverse-Gamma hyperparameters, the constraint activations that
//! produce them from raw head outputs, and the Student-t predictive they
//! induce.

use std::f64::consts::PI;

use thiserror::Error;

use crate::numerics::special::{ln_gamma, softplus};

/// Floor added to ν, β and to α − 1 so the constraints hold strictly.
pub const EVIDENCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NigError {
    #[error("raw head output has length {0}, expected a multiple of 4")]
    RawLength(usize),
    #[error("non-finite raw value at index {0}")]
    NonFiniteRaw(usize),
    #[error("NIG parameter vectors have mismatched lengths")]
    LengthMismatch,
    #[error("invalid NIG parameter {name}[{index}] = {value}")]
    Constraint {
        name: &'static str,
        index: usize,
        value: f64,
    },
    #[error("sigma2 must be positive, got {0}")]
    NonPositiveVariance(f64),
}

/// Per-dimension evidential hyperparameters (γ, ν, α, β) for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct NigParams {
    pub gamma: Vec<f64>,
    pub nu: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl NigParams {
    /// Validates ν > 0, α > 1, β > 0 and finiteness element-wise.
    pub fn new(gamma: Vec<f64>, nu: Vec<f64>, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self, NigError> {
        let d = gamma.len();
        if nu.len() != d || alpha.len() != d || beta.len() != d {
            return Err(NigError::LengthMismatch);
        }
        let p = Self { gamma, nu, alpha, beta };
        p.validate()?;
        Ok(p)
    }

    /// One-dimensional parameters.
    pub fn scalar(gamma: f64, nu: f64, alpha: f64, beta: f64) -> Result<Self, NigError> {
        Self::new(vec![gamma], vec![nu], vec![alpha], vec![beta])
    }

    pub fn validate(&self) -> Result<(), NigError> {
        let checks: [(&'static str, &Vec<f64>, fn(f64) -> bool); 4] = [
            ("gamma", &self.gamma, |v| v.is_finite()),
            ("nu", &self.nu, |v| v.is_finite() && v > 0.0),
            ("alpha", &self.alpha, |v| v.is_finite() && v > 1.0),
            ("beta", &self.beta, |v| v.is_finite() && v > 0.0),
        ];
        for (name, values, ok) in checks {
            if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !ok(**v)) {
                return Err(NigError::Constraint { name, index, value });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Same parameters with β multiplied by `factor`.
    pub fn with_beta_scaled(&self, factor: f64) -> Self {
        Self {
            beta: self.beta.iter().map(|b| b * factor).collect(),
            ..self.clone()
        }
    }
}

/// Maps a raw `[γ | ν | α | β]` head output of length 4D onto valid
/// parameters: identity, `softplus + ε`, `1 + ε + softplus`, `softplus + ε`.
pub fn constrain_raw(raw: &[f64]) -> Result<NigParams, NigError> {
    if raw.len() % 4 != 0 {
        return Err(NigError::RawLength(raw.len()));
    }
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(NigError::NonFiniteRaw(i));
    }
    let d = raw.len() / 4;
    let block = |k: usize| &raw[k * d..(k + 1) * d];
    Ok(NigParams {
        gamma: block(0).to_vec(),
        nu: block(1).iter().map(|&x| softplus(x) + EVIDENCE_FLOOR).collect(),
        alpha: block(2).iter().map(|&x| 1.0 + EVIDENCE_FLOOR + softplus(x)).collect(),
        beta: block(3).iter().map(|&x| softplus(x) + EVIDENCE_FLOOR).collect(),
    })
}

/// Diagonal Student-t with squared scale `scale_sq` and `dof` degrees of
/// freedom per dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentTParams {
    pub loc: Vec<f64>,
    pub scale_sq: Vec<f64>,
    pub dof: Vec<f64>,
}

impl StudentTParams {
    /// Variance per dimension, `scale_sq · dof / (dof − 2)`.
    pub fn variance(&self) -> Vec<f64> {
        self.scale_sq
            .iter()
            .zip(&self.dof)
            .map(|(s, d)| s * d / (d - 2.0))
            .collect()
    }
}

/// Marginal of an observation under the NIG prior:
/// `St(γ, β(1+ν)/(να), 2α)`.
pub fn predictive(p: &NigParams) -> StudentTParams {
    let scale_sq = (0..p.dim())
        .map(|d| p.beta[d] * (1.0 + p.nu[d]) / (p.nu[d] * p.alpha[d]))
        .collect();
    StudentTParams {
        loc: p.gamma.clone(),
        scale_sq,
        dof: p.alpha.iter().map(|a| 2.0 * a).collect(),
    }
}

/// Sum over dimensions of the Student-t log density.
pub fn student_t_log_pdf(y: &[f64], st: &StudentTParams) -> f64 {
    y.iter()
        .enumerate()
        .map(|(d, &yd)| {
            let dof = st.dof[d];
            let s2 = st.scale_sq[d];
            let r = yd - st.loc[d];
            ln_gamma(0.5 * (dof + 1.0)) - ln_gamma(0.5 * dof) - 0.5 * (dof * PI * s2).ln()
                - 0.5 * (dof + 1.0) * (r * r / (dof * s2)).ln_1p()
        })
        .sum()
}

/// Log of the joint NIG density `p(μ, σ² | γ, ν, α, β)` for one dimension.
pub fn nig_log_density(mu: f64, sigma2: f64, gamma: f64, nu: f64, alpha: f64, beta: f64) -> Result<f64, NigError> {
    if !(sigma2 > 0.0) {
        return Err(NigError::NonPositiveVariance(sigma2));
    }
    let d = gamma - mu;
    Ok(alpha * beta.ln() + 0.5 * nu.ln() - ln_gamma(alpha) - 0.5 * (2.0 * PI * sigma2).ln()
        - (alpha + 1.0) * sigma2.ln()
        - (2.0 * beta + nu * d * d) / (2.0 * sigma2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constrain_zero_raw() {
        let p = constrain_raw(&[0.0; 4]).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert_eq!(p.gamma, vec![0.0]);
        assert!((p.nu[0] - (ln2 + 1e-6)).abs() < 1e-15);
        assert!((p.alpha[0] - (1.0 + ln2 + 1e-6)).abs() < 1e-15);
        assert!((p.beta[0] - (ln2 + 1e-6)).abs() < 1e-15);
        assert!((p.nu[0] - 0.693_148).abs() < 1e-6);
    }

    #[test]
    fn constrain_large_raw_follows_asymptote() {
        let p = constrain_raw(&[0.0, 20.0, 0.0, 0.0]).unwrap();
        assert!((p.nu[0] - 20.0).abs() < 2e-6);
    }

    #[test]
    fn constrain_rejects_bad_input() {
        assert_eq!(constrain_raw(&[0.0; 3]), Err(NigError::RawLength(3)));
        assert_eq!(constrain_raw(&[0.0, f64::NAN, 0.0, 0.0]), Err(NigError::NonFiniteRaw(1)));
    }

    #[test]
    fn constrain_holds_over_random_raws() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let raw: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
            constrain_raw(&raw).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn predictive_fixtures() {
        let st = predictive(&NigParams::scalar(0.0, 1.0, 2.0, 1.0).unwrap());
        assert_eq!((st.loc[0], st.scale_sq[0], st.dof[0]), (0.0, 1.0, 4.0));
        let st = predictive(&NigParams::scalar(1.0, 2.0, 3.0, 6.0).unwrap());
        assert!((st.scale_sq[0] - 3.0).abs() < 1e-15);
        assert_eq!(st.dof[0], 6.0);
        let st = predictive(&NigParams::scalar(0.0, 1e12, 2.0, 3.0).unwrap());
        assert!((st.scale_sq[0] - 1.5).abs() < 1e-9);
    }

    #[test]
    fn student_t_fixtures() {
        let st = predictive(&NigParams::scalar(0.0, 1.0, 2.0, 1.0).unwrap());
        assert!((student_t_log_pdf(&[0.0], &st) - 0.375f64.ln()).abs() < 1e-12);
        assert!((0.375f64.ln() + 0.980_829).abs() < 1e-6);
        let gaussian = StudentTParams {
            loc: vec![0.0],
            scale_sq: vec![1.0],
            dof: vec![1e6],
        };
        let limit = -0.5 * (2.0 * PI).ln();
        assert!((student_t_log_pdf(&[0.0], &gaussian) - limit).abs() < 1e-6);
    }

    #[test]
    fn nig_density_rejects_nonpositive_variance() {
        assert!(nig_log_density(0.0, 0.0, 0.0, 1.0, 2.0, 1.0).is_err());
        assert!(nig_log_density(0.0, -1.0, 0.0, 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn nig_density_peaks_at_location() {
        for &s2 in &[0.1, 1.0, 7.0] {
            let at = nig_log_density(0.7, s2, 0.7, 2.0, 3.0, 1.5).unwrap();
            for &mu in &[0.69, 0.71, 0.0, 2.0] {
                assert!(nig_log_density(mu, s2, 0.7, 2.0, 3.0, 1.5).unwrap() < at);
            }
        }
    }

    /// Composite Simpson rule on `[lo, hi]` with `n` (even) intervals.
    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        let inner: f64 = (1..n)
            .map(|i| f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 })
            .sum();
        (f(lo) + f(hi) + inner) * h / 3.0
    }

    /// ∫∫ w(μ, σ²) NIG(μ, σ²) dμ dσ², with the outer integral taken over
    /// ln σ² and the inner over a ±12 sd window around `center(σ²)`.
    fn nig_expectation(
        g: f64,
        n: f64,
        a: f64,
        b: f64,
        weight: impl Fn(f64, f64) -> f64,
        center: impl Fn(f64) -> (f64, f64),
    ) -> f64 {
        simpson(
            |u| {
                let s2 = u.exp();
                let (c, sd) = center(s2);
                let inner = simpson(
                    |mu| weight(mu, s2) * nig_log_density(mu, s2, g, n, a, b).unwrap().exp(),
                    c - 12.0 * sd,
                    c + 12.0 * sd,
                    400,
                );
                inner * s2
            },
            -40.0,
            40.0,
            8000,
        )
    }

    #[test]
    fn nig_density_integrates_to_one() {
        for &(g, n, a, b) in &[(0.0, 1.0, 2.0, 1.0), (1.5, 0.3, 4.0, 2.5), (-2.0, 5.0, 1.3, 0.2)] {
            let total = nig_expectation(g, n, a, b, |_, _| 1.0, |s2| (g, (s2 / n).sqrt()));
            assert!((total - 1.0).abs() < 1e-6, "{total}");
        }
    }

    #[test]
    fn student_t_matches_quadrature_marginal() {
        for &(g, n, a, b, y) in &[(0.0, 1.0, 2.0, 1.0, 0.0), (0.0, 1.0, 2.0, 1.0, 1.0), (0.5, 3.0, 2.5, 0.7, -1.2)] {
            let marginal = nig_expectation(
                g,
                n,
                a,
                b,
                |mu, s2| (-(y - mu) * (y - mu) / (2.0 * s2)).exp() / (2.0 * PI * s2).sqrt(),
                |s2| ((n * g + y) / (n + 1.0), (s2 / (n + 1.0)).sqrt()),
            );
            let st = predictive(&NigParams::scalar(g, n, a, b).unwrap());
            assert!((student_t_log_pdf(&[y], &st) - marginal.ln()).abs() < 1e-8);
        }
        assert!((0.375f64.ln() + 0.980_829_253).abs() < 1e-9);
    }

    fn valid_params() -> impl Strategy<Value = (f64, f64, f64, f64)> {
        (-5.0..5.0f64, 1e-3..50.0f64, 1.001..30.0f64, 1e-3..50.0f64)
    }

    proptest! {
        #[test]
        fn constrain_never_violates(raw in prop::collection::vec(-30.0..30.0f64, 4..=16usize).prop_filter("mult of 4", |v| v.len() % 4 == 0)) {
            let p = constrain_raw(&raw).unwrap();
            prop_assert!(p.validate().is_ok());
        }

        #[test]
        fn student_t_symmetric((g, n, a, b) in valid_params(), off in 0.0..20.0f64) {
            let st = predictive(&NigParams::scalar(g, n, a, b).unwrap());
            let up = student_t_log_pdf(&[g + off], &st);
            let down = student_t_log_pdf(&[g - off], &st);
            prop_assert!((up - down).abs() <= 1e-12 * up.abs().max(1.0));
        }

        #[test]
        fn scale_strictly_increasing_in_beta((g, n, a, b) in valid_params(), factor in 1.0001..10.0f64) {
            let p = NigParams::scalar(g, n, a, b).unwrap();
            let lo = predictive(&p).scale_sq[0];
            let hi = predictive(&p.with_beta_scaled(factor)).scale_sq[0];
            prop_assert!(hi > lo);
        }
    }
}
