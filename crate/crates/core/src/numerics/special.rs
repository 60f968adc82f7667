//! Scalar special functions shared by the kernels, the evidential loss and the
//! samplers.

use std::f64::consts::PI;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Natural log of the gamma function for `x > 0`.
///
/// Lanczos (g = 7, 9 terms) away from the zeros at 1 and 2; near those the
/// Taylor series of `ln Γ(1 + e)` keeps the relative error small.
pub fn ln_gamma(x: f64) -> f64 {
    if x.is_nan() || x <= 0.0 {
        return f64::NAN;
    }
    if (x - 1.0).abs() < 0.2 {
        return ln_gamma_one_plus(x - 1.0);
    }
    if (x - 2.0).abs() < 0.2 {
        let e = x - 2.0;
        return ln_gamma_one_plus(e) + e.ln_1p();
    }
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1-x) = π / sin(πx)
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `ln Γ(1 + e)` for `|e| < 0.2` via `-γe + Σ_{k≥2} (-1)^k ζ(k) e^k / k`.
fn ln_gamma_one_plus(e: f64) -> f64 {
    let mut sum = -EULER_GAMMA * e;
    let mut power = e;
    for k in 2..=40 {
        power *= e;
        let term = zeta(k) * power / k as f64;
        sum += if k % 2 == 0 { term } else { -term };
        if term.abs() < 1e-19 * sum.abs().max(1e-300) {
            break;
        }
    }
    sum
}

/// Riemann zeta for integer `k ≥ 2`, Euler–Maclaurin with N = 16.
fn zeta(k: u32) -> f64 {
    const N: f64 = 16.0;
    let s = k as f64;
    let mut sum: f64 = (1..16).map(|n| (n as f64).powf(-s)).sum();
    sum += N.powf(1.0 - s) / (s - 1.0) + 0.5 * N.powf(-s);
    // Bernoulli corrections B2/2!, B4/4!, B6/6!, B8/8!
    let mut rising = s;
    let mut npow = N.powf(-s - 1.0);
    sum += rising * npow / 12.0;
    rising *= (s + 1.0) * (s + 2.0);
    npow /= N * N;
    sum -= rising * npow / 720.0;
    rising *= (s + 3.0) * (s + 4.0);
    npow /= N * N;
    sum += rising * npow / 30_240.0;
    rising *= (s + 5.0) * (s + 6.0);
    npow /= N * N;
    sum -= rising * npow / 1_209_600.0;
    sum
}

/// Digamma ψ(x) = d/dx ln Γ(x) for `x > 0`.
pub fn digamma(x: f64) -> f64 {
    if x.is_nan() || x <= 0.0 {
        return f64::NAN;
    }
    let mut x = x;
    let mut shift = 0.0;
    while x < 10.0 {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * 691.0 / 32_760.0)))));
    shift + x.ln() - 0.5 * inv - series
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Subgradient of `|x|` with the convention `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn ln_gamma_exact_points() {
        // Γ(n) = (n-1)!, Γ(n + 1/2) = (2n)! √π / (4^n n!)
        let mut fact = 1.0f64;
        for n in 1..30u32 {
            if n > 1 {
                fact *= (n - 1) as f64;
            }
            let v = ln_gamma(n as f64);
            if n > 2 {
                assert!(rel(v, fact.ln()) < 1e-13, "n={n}");
            } else {
                assert!(v.abs() < 1e-15);
            }
        }
        let sqrt_pi = PI.sqrt();
        assert!(rel(ln_gamma(0.5), sqrt_pi.ln()) < 1e-13);
        assert!(rel(ln_gamma(2.5), (0.75 * sqrt_pi).ln()) < 1e-13);
        assert!((ln_gamma(2.5) - 0.284_682_870_472_919_2).abs() < 1e-12);
    }

    #[test]
    fn ln_gamma_matches_reference_library() {
        let mut x = 0.5;
        while x <= 50.0 {
            let ours = ln_gamma(x);
            let reference = statrs::function::gamma::ln_gamma(x);
            let scale = reference.abs().max(1e-3);
            assert!((ours - reference).abs() / scale < 1e-10, "x={x} ours={ours} ref={reference}");
            x += 0.0137;
        }
    }

    #[test]
    fn ln_gamma_recurrence_near_roots() {
        // ln Γ(x + 1) - ln Γ(x) = ln x holds to full relative precision
        for &x in &[0.81, 0.95, 0.999, 1.0001, 1.05, 1.19, 1.81, 1.9999, 2.1] {
            let lhs = ln_gamma(x + 1.0) - ln_gamma(x);
            assert!((lhs - f64::ln(x)).abs() < 1e-14, "x={x}");
        }
    }

    #[test]
    fn digamma_matches_derivative_of_ln_gamma() {
        let mut x = 0.5;
        while x < 50.0 {
            let h = 1e-5 * x;
            let fd = (ln_gamma(x + h) - ln_gamma(x - h)) / (2.0 * h);
            assert!((digamma(x) - fd).abs() < 1e-8 * fd.abs().max(1.0), "x={x}");
            let reference = statrs::function::gamma::digamma(x);
            assert!((digamma(x) - reference).abs() < 1e-10 * reference.abs().max(1.0), "x={x}");
            x += 0.173;
        }
        assert!((digamma(1.0) + EULER_GAMMA).abs() < 1e-14);
    }

    #[test]
    fn softplus_and_sigmoid() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(40.0) - 40.0).abs() < 1e-15);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
        assert_eq!(sign(0.0), 0.0);
    }
}
