//! Evidential regression loss: the negative log marginal likelihood of an
//! NIG prior plus an evidence penalty scaled by the residual, with
//! closed-form gradients.

use std::f64::consts::PI;

use serde::Serialize;

use crate::nig::NigParams;
use crate::numerics::special::{digamma, ln_gamma, sign};

/// Default weight of the evidence regularizer.
pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EdlLossBreakdown {
    pub nll: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Gradient of the combined loss with respect to each parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct EdlGrad {
    pub gamma: Vec<f64>,
    pub nu: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// NLL for a single dimension.
pub fn nll_scalar(y: f64, gamma: f64, nu: f64, alpha: f64, beta: f64) -> f64 {
    let omega = 2.0 * beta * (1.0 + nu);
    let r = y - gamma;
    0.5 * (PI / nu).ln() - alpha * omega.ln() + (alpha + 0.5) * (nu * r * r + omega).ln() + ln_gamma(alpha)
        - ln_gamma(alpha + 0.5)
}

/// Evidence penalty `|y − γ| (2ν + α)` for a single dimension.
pub fn reg_scalar(y: f64, gamma: f64, nu: f64, alpha: f64) -> f64 {
    (y - gamma).abs() * (2.0 * nu + alpha)
}

/// Partial derivatives of `nll + λ·reg` for one dimension, in the order
/// (γ, ν, α, β). The penalty's γ-derivative is 0 at `y = γ`.
pub fn grad_scalar(y: f64, gamma: f64, nu: f64, alpha: f64, beta: f64, lambda: f64) -> [f64; 4] {
    let r = y - gamma;
    let omega = 2.0 * beta * (1.0 + nu);
    let q = nu * r * r + omega;
    let a_half = alpha + 0.5;
    let d_gamma = -(2.0 * alpha + 1.0) * nu * r / q;
    let d_nu = -0.5 / nu - 2.0 * alpha * beta / omega + a_half * (r * r + 2.0 * beta) / q;
    let d_alpha = -omega.ln() + q.ln() + digamma(alpha) - digamma(a_half);
    let d_beta = -alpha / beta + a_half * 2.0 * (1.0 + nu) / q;
    let abs_r = r.abs();
    [
        d_gamma - lambda * sign(r) * (2.0 * nu + alpha),
        d_nu + lambda * 2.0 * abs_r,
        d_alpha + lambda * abs_r,
        d_beta,
    ]
}

/// Summed over dimensions.
pub fn nll(y: &[f64], p: &NigParams) -> f64 {
    (0..p.dim())
        .map(|d| nll_scalar(y[d], p.gamma[d], p.nu[d], p.alpha[d], p.beta[d]))
        .sum()
}

/// Summed over dimensions.
pub fn evidence_regularizer(y: &[f64], p: &NigParams) -> f64 {
    (0..p.dim())
        .map(|d| reg_scalar(y[d], p.gamma[d], p.nu[d], p.alpha[d]))
        .sum()
}

pub fn edl_loss(y: &[f64], p: &NigParams, lambda: f64) -> EdlLossBreakdown {
    let nll = nll(y, p);
    let reg = evidence_regularizer(y, p);
    EdlLossBreakdown {
        nll,
        reg,
        total: nll + lambda * reg,
        lambda,
    }
}

pub fn edl_grad(y: &[f64], p: &NigParams, lambda: f64) -> EdlGrad {
    let d = p.dim();
    let mut g = EdlGrad {
        gamma: vec![0.0; d],
        nu: vec![0.0; d],
        alpha: vec![0.0; d],
        beta: vec![0.0; d],
    };
    for i in 0..d {
        let [a, b, c, e] = grad_scalar(y[i], p.gamma[i], p.nu[i], p.alpha[i], p.beta[i], lambda);
        g.gamma[i] = a;
        g.nu[i] = b;
        g.alpha[i] = c;
        g.beta[i] = e;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nig::{predictive, student_t_log_pdf};
    use crate::numerics::{finite_difference_check, Tensor};
    use crate::sampler::RngStream;
    use proptest::prelude::*;

    fn unit() -> NigParams {
        NigParams::scalar(0.0, 1.0, 2.0, 1.0).unwrap()
    }

    #[test]
    fn nll_fixtures_match_quadrature_values() {
        // −ln of the NIG marginal by numerical double integration.
        assert!((nll(&[0.0], &unit()) - 0.980_829_253_0).abs() < 1e-9);
        assert!((nll(&[1.0], &unit()) - 1.538_688_131_3).abs() < 1e-9);
    }

    #[test]
    fn regularizer_fixtures() {
        let p = unit();
        assert_eq!(evidence_regularizer(&[0.0], &p), 0.0);
        assert_eq!(evidence_regularizer(&[1.0], &p), 4.0);
        assert_eq!(evidence_regularizer(&[2.0], &p), 8.0);
    }

    #[test]
    fn combined_fixtures() {
        let p = unit();
        let at0 = edl_loss(&[0.0], &p, DEFAULT_LAMBDA);
        assert_eq!(at0.reg, 0.0);
        assert!((at0.total - 0.980_829_253).abs() < 1e-8);
        let at1 = edl_loss(&[1.0], &p, DEFAULT_LAMBDA);
        assert_eq!(at1.total, at1.nll + 2.0);
        let plain = edl_loss(&[1.0], &p, 0.0);
        assert_eq!(plain.total, plain.nll);
    }

    #[test]
    fn nll_minimized_at_location() {
        let p = NigParams::scalar(0.4, 2.0, 3.0, 0.5).unwrap();
        let at = nll(&[0.4], &p);
        for y in [-1.0, 0.3, 0.39, 0.41, 2.0] {
            assert!(nll(&[y], &p) > at);
        }
    }

    #[test]
    fn gradient_sign_conventions() {
        let p = unit();
        let g = edl_grad(&[1.0], &p, 1.0);
        let nll_only = edl_grad(&[1.0], &p, 0.0);
        assert!((g.gamma[0] - nll_only.gamma[0] + 4.0).abs() < 1e-12);
        let at = edl_grad(&[0.0], &p, 1.0);
        assert_eq!(at.gamma[0], 0.0);
    }

    #[test]
    fn consistent_with_student_t() {
        let mut rng = RngStream::new(2024, 0);
        for _ in 0..10_000 {
            let g = rng.uniform() * 10.0 - 5.0;
            let n = (rng.uniform() * 8.0 - 4.0).exp();
            let a = 1.0 + (rng.uniform() * 6.0 - 3.0).exp();
            let b = (rng.uniform() * 8.0 - 4.0).exp();
            let y = g + rng.standard_normal() * 3.0;
            let p = NigParams::scalar(g, n, a, b).unwrap();
            let gap = nll(&[y], &p) + student_t_log_pdf(&[y], &predictive(&p));
            assert!(gap.abs() < 1e-8, "{gap} at {p:?}, y={y}");
        }
    }

    fn loss_at(flat: &[f64], y: &[f64], lambda: f64) -> f64 {
        let d = y.len();
        (0..d)
            .map(|i| {
                let (g, n, a, b) = (flat[i], flat[d + i], flat[2 * d + i], flat[3 * d + i]);
                nll_scalar(y[i], g, n, a, b) + lambda * reg_scalar(y[i], g, n, a)
            })
            .sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = RngStream::new(99, 0);
        let d = 3;
        for _ in 0..1000 {
            let lambda = rng.uniform();
            let mut flat = Vec::with_capacity(4 * d);
            flat.extend((0..d).map(|_| rng.uniform() * 4.0 - 2.0));
            flat.extend((0..d).map(|_| (rng.uniform() * 6.0 - 3.0).exp()));
            flat.extend((0..d).map(|_| 1.05 + (rng.uniform() * 5.0 - 2.0).exp()));
            flat.extend((0..d).map(|_| (rng.uniform() * 6.0 - 3.0).exp()));
            // Residuals bounded away from the |·| kink.
            let y: Vec<f64> = (0..d)
                .map(|i| {
                    let r = rng.uniform() * 3.0 + 0.05;
                    flat[i] + if rng.uniform() < 0.5 { r } else { -r }
                })
                .collect();
            let p = NigParams::new(
                flat[..d].to_vec(),
                flat[d..2 * d].to_vec(),
                flat[2 * d..3 * d].to_vec(),
                flat[3 * d..].to_vec(),
            )
            .unwrap();
            let g = edl_grad(&y, &p, lambda);
            let analytic = [g.gamma, g.nu, g.alpha, g.beta].concat();
            let report = finite_difference_check(
                |t: &Tensor| loss_at(t.data(), &y, lambda),
                &Tensor::vector(flat.clone()),
                &Tensor::vector(analytic),
                1e-5,
                1e-4,
            )
            .unwrap();
            let bad: Vec<_> = report
                .failures()
                .filter(|c| (c.analytic - c.numeric).abs() > 1e-9)
                .collect();
            assert!(bad.is_empty(), "{bad:?} at {flat:?} y={y:?}");
        }
    }

    #[test]
    fn gradients_finite_at_domain_floor() {
        let eps = 1e-6;
        for &(g, n, a, b, y) in &[
            (0.0, eps, 1.0 + eps, eps, 0.0),
            (0.0, eps, 1.0 + eps, eps, 50.0),
            (3.0, 1e6, 1e3, 1e6, -3.0),
            (0.0, eps, 1e3, eps, 1e-3),
        ] {
            let p = NigParams::scalar(g, n, a, b).unwrap();
            let gr = edl_grad(&[y], &p, DEFAULT_LAMBDA);
            for v in [gr.gamma[0], gr.nu[0], gr.alpha[0], gr.beta[0]] {
                assert!(v.is_finite());
            }
            assert!(edl_loss(&[y], &p, DEFAULT_LAMBDA).total.is_finite());
        }
    }

    #[test]
    fn regularizer_outgrows_nll() {
        let p = unit();
        let ratio = |r: f64| evidence_regularizer(&[r], &p) / nll(&[r], &p);
        assert!(ratio(1e2) > ratio(1e1));
        assert!(ratio(1e4) > ratio(1e2));
        assert!(ratio(1e6) > 1e4);
    }

    proptest! {
        #[test]
        fn translation_equivariant(
            g in -3.0..3.0f64, n in 0.01..20.0f64, a in 1.01..10.0f64, b in 0.01..20.0f64,
            y in -3.0..3.0f64, c in -50.0..50.0f64, lambda in 0.0..2.0f64,
        ) {
            let p = NigParams::scalar(g, n, a, b).unwrap();
            let shifted = NigParams::scalar(g + c, n, a, b).unwrap();
            let base = edl_loss(&[y], &p, lambda).total;
            let moved = edl_loss(&[y + c], &shifted, lambda).total;
            prop_assert!((base - moved).abs() < 1e-9 * base.abs().max(1.0));
        }

        #[test]
        fn breakdown_is_consistent(
            g in -3.0..3.0f64, n in 0.01..20.0f64, a in 1.01..10.0f64, b in 0.01..20.0f64,
            y in -3.0..3.0f64, lambda in 0.0..2.0f64,
        ) {
            let l = edl_loss(&[y], &NigParams::scalar(g, n, a, b).unwrap(), lambda);
            prop_assert!(l.reg >= 0.0);
            prop_assert_eq!(l.total, l.nll + lambda * l.reg);
        }
    }
}
