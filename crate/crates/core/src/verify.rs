//! Self-checks against independent oracles: likelihood consistency, gradient
//! gates, and sampler distribution tests.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::backbone::{Model, ModelConfig};
use crate::corpus::{Corpus, CorpusSpec};
use crate::edl::{edl_grad, edl_loss, nll, DEFAULT_LAMBDA};
use crate::nig::{predictive, student_t_log_pdf, NigParams};
use crate::numerics::{check_coordinates, Tensor};
use crate::sampler::{kl_gaussian_to_prior, sample_hierarchical, sample_inverse_gamma, GaussianHead, RngStream};
use crate::trainer::{weighted_batch, LossSettings, RowNoise, TrainingExample};

/// Outcome of one named check.
#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckLine {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

impl std::fmt::Display for CheckLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub const SUITES: [&str; 3] = ["consistency", "gradcheck", "sampler"];

/// Runs a named suite; `None` for an unknown name.
pub fn run_suite(name: &str, seed: u64) -> Option<Vec<CheckLine>> {
    match name {
        "consistency" => Some(vec![nll_student_t_consistency(10_000, seed)]),
        "gradcheck" => Some(vec![edl_gradient_gate(1000, seed), model_gradient_gate(&ModelConfig::desk(), 20, seed)]),
        "sampler" => Some(vec![
            hierarchical_marginal(1_000_000, seed),
            inverse_gamma_moments(1_000_000, seed),
            beta_scale_variance(1_000_000, seed),
            gaussian_kl_monte_carlo(100, 1_000_000, seed),
        ]),
        _ => None,
    }
}

fn random_nig(rng: &mut RngStream) -> NigParams {
    let u = |rng: &mut RngStream, lo: f64, hi: f64| lo + (hi - lo) * rng.uniform();
    NigParams::scalar(
        u(rng, -3.0, 3.0),
        u(rng, 0.1, 10.0),
        u(rng, 1.1, 10.0),
        u(rng, 0.1, 10.0),
    )
    .expect("valid ranges")
}

/// `|nll(y, p) + log t(y; predictive(p))|` over random points.
pub fn nll_student_t_consistency(points: usize, seed: u64) -> CheckLine {
    let mut rng = RngStream::new(seed, 0x301);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let p = random_nig(&mut rng);
        let y = [p.gamma[0] + 6.0 * (rng.uniform() - 0.5)];
        worst = worst.max((nll(&y, &p) + student_t_log_pdf(&y, &predictive(&p))).abs());
    }
    CheckLine::new(
        "nll_student_t_consistency",
        worst < 1e-8,
        format!("max gap {worst:.3e} over {points} points (tolerance 1e-8)"),
    )
}

/// Analytic evidential-loss gradients against central differences.
pub fn edl_gradient_gate(points: usize, seed: u64) -> CheckLine {
    let mut rng = RngStream::new(seed, 0x302);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..points {
        let p = random_nig(&mut rng);
        let y = [p.gamma[0] + 6.0 * (rng.uniform() - 0.5)];
        let g = edl_grad(&y, &p, DEFAULT_LAMBDA);
        let point = Tensor::vector(vec![p.gamma[0], p.nu[0], p.alpha[0], p.beta[0]]);
        let analytic = Tensor::vector(vec![g.gamma[0], g.nu[0], g.alpha[0], g.beta[0]]);
        let f = |x: &Tensor| {
            let d = x.data();
            match NigParams::scalar(d[0], d[1], d[2], d[3]) {
                Ok(q) => edl_loss(&y, &q, DEFAULT_LAMBDA).total,
                Err(_) => f64::NAN,
            }
        };
        match check_coordinates(f, &point, &analytic, &[0, 1, 2, 3], 1e-5, 1e-4) {
            Ok(r) => {
                worst = worst.max(r.max_rel_error);
                failures += usize::from(!r.passed);
            }
            Err(_) => failures += 1,
        }
    }
    CheckLine::new(
        "edl_gradient_gate",
        failures == 0,
        format!("{failures} of {points} points failed, max relative error {worst:.3e} (tolerance 1e-4)"),
    )
}

fn flatten(model: &Model) -> Vec<f64> {
    model.params.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn with_offset(model: &Model, direction: &[f64], t: f64) -> Model {
    let mut m = model.clone();
    let mut k = 0;
    for p in m.params.tensors_mut() {
        for w in p.data_mut() {
            *w += t * direction[k];
            k += 1;
        }
    }
    m
}

/// End-to-end gradient of the composite training loss along random
/// directions in parameter space, each checked by central differences.
///
/// Dropout masks and sampling noise are frozen per batch. The model is
/// evaluated at a randomly perturbed point so that zero-initialised layers
/// carry gradient.
pub fn model_gradient_gate(config: &ModelConfig, batches: usize, seed: u64) -> CheckLine {
    let result = (|| -> Result<(usize, usize, f64), String> {
        let spec = CorpusSpec {
            vocab_size: config.vocab_size,
            mel_dim: config.mel_dim,
            num_utterances: 2 * batches,
            max_tokens: 6,
            ..CorpusSpec::desk()
        };
        let corpus = Corpus::generate(&spec).map_err(|e| e.to_string())?;
        let mut model = Model::new(config.clone(), seed).map_err(|e| e.to_string())?;
        let mut rng = RngStream::new(seed, 0x303);
        for p in model.params.tensors_mut() {
            for w in p.data_mut() {
                *w += 0.02 * rng.standard_normal();
            }
        }
        let settings = LossSettings::default();
        let (mut checked, mut kinks, mut worst) = (0, 0, 0.0f64);
        for b in 0..batches {
            let rows: Vec<TrainingExample> = (0..2)
                .map(|r| {
                    let idx = 2 * b + r;
                    let u = corpus.rendition(idx, idx % (spec.num_teachers + 1))?;
                    Ok(TrainingExample::new(u.text, u.mel, u.teacher_id, 1.0))
                })
                .collect::<Result<_, crate::corpus::CorpusError>>()
                .map_err(|e| e.to_string())?;
            let scales = [0.5, 0.5];
            let seeds = [rng.next_u64(), rng.next_u64()];
            let base = weighted_batch(&model, &rows, &scales, &settings, &seeds, None, true).map_err(|e| e.to_string())?;
            let noise: Vec<RowNoise> = base.noise;
            let grad: Vec<f64> = base.grads.unwrap_or_default().into_iter().flatten().collect();
            let n = flatten(&model).len();
            let dir = rng.normals(n);
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dir: Vec<f64> = dir.iter().map(|x| x / norm).collect();
            let analytic = grad.iter().zip(&dir).map(|(g, v)| g * v).sum::<f64>();
            let f = |x: &Tensor| {
                let m = with_offset(&model, &dir, x.data()[0]);
                weighted_batch(&m, &rows, &scales, &settings, &seeds, Some(&noise), false)
                    .map(|r| r.report.total)
                    .unwrap_or(f64::NAN)
            };
            let report = check_coordinates(f, &Tensor::vector(vec![0.0]), &Tensor::vector(vec![analytic]), &[0], 1e-5, 1e-4)
                .map_err(|e| e.to_string())?;
            let c = &report.coords[0];
            if c.kink {
                kinks += 1;
                continue;
            }
            if !c.finite || c.rel_error >= 1e-4 {
                return Err(format!(
                    "batch {b}: directional derivative {} vs numeric {} (relative error {:.3e})",
                    c.analytic, c.numeric, c.rel_error
                ));
            }
            worst = worst.max(c.rel_error);
            checked += 1;
        }
        Ok((checked, kinks, worst))
    })();
    match result {
        Ok((checked, kinks, worst)) => CheckLine::new(
            "model_gradient_gate",
            checked > 0,
            format!("{checked} batches passed, {kinks} skipped at kinks, max relative error {worst:.3e} (tolerance 1e-4)"),
        ),
        Err(e) => CheckLine::new("model_gradient_gate", false, e),
    }
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Kolmogorov–Smirnov distance between samples and a CDF.
pub fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = cdf(x);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max)
}

/// Hierarchical draws at (γ, ν, α, β) = (0, 1, 2, 1) against the Student-t
/// marginal with 4 degrees of freedom and unit squared scale.
pub fn hierarchical_marginal(draws: usize, seed: u64) -> CheckLine {
    let p = NigParams::scalar(0.0, 1.0, 2.0, 1.0).expect("valid");
    let mut rng = RngStream::new(seed, 0x304);
    let xs: Vec<f64> = (0..draws)
        .map(|_| sample_hierarchical(&p, &mut rng, 1.0).expect("valid")[0])
        .collect();
    let (mean, var) = moments(&xs);
    let se = (2.0 / draws as f64).sqrt();
    let st = predictive(&p);
    let t = StudentsT::new(st.loc[0], st.scale_sq[0].sqrt(), st.dof[0]).expect("valid");
    let ks = ks_statistic(xs, |x| t.cdf(x));
    let ok = mean.abs() < 4.0 * se && (var / 2.0 - 1.0).abs() < 0.02 && ks < 0.002;
    CheckLine::new(
        "hierarchical_marginal",
        ok,
        format!("mean {mean:.5} (4 SE = {:.5}), variance {var:.5} (target 2), KS {ks:.5} (limit 0.002)", 4.0 * se),
    )
}

/// Inverse-Gamma(3, 4): mean 2, variance 4.
pub fn inverse_gamma_moments(draws: usize, seed: u64) -> CheckLine {
    let mut rng = RngStream::new(seed, 0x305);
    let xs: Vec<f64> = (0..draws)
        .map(|_| sample_inverse_gamma(&[3.0], &[4.0], &mut rng).expect("valid")[0])
        .collect();
    let (mean, var) = moments(&xs);
    let ok = (mean / 2.0 - 1.0).abs() < 0.01 && (var / 4.0 - 1.0).abs() < 0.03;
    CheckLine::new(
        "inverse_gamma_moments",
        ok,
        format!("mean {mean:.5} (target 2 ±1%), variance {var:.5} (target 4 ±3%)"),
    )
}

/// Doubling β doubles the variance of hierarchical draws.
pub fn beta_scale_variance(draws: usize, seed: u64) -> CheckLine {
    let p = NigParams::scalar(0.0, 1.0, 2.0, 1.0).expect("valid");
    let mut rng = RngStream::new(seed, 0x306);
    let xs: Vec<f64> = (0..draws)
        .map(|_| sample_hierarchical(&p, &mut rng, 2.0).expect("valid")[0])
        .collect();
    let (_, var) = moments(&xs);
    CheckLine::new(
        "beta_scale_variance",
        (var / 4.0 - 1.0).abs() < 0.03,
        format!("variance at beta_scale 2: {var:.5} (target 4 ±3%)"),
    )
}

/// Closed-form Gaussian KL against a Monte-Carlo log-ratio estimate.
pub fn gaussian_kl_monte_carlo(heads: usize, draws: usize, seed: u64) -> CheckLine {
    const D: usize = 4;
    let mut rng = RngStream::new(seed, 0x307);
    let mut worst: f64 = 0.0;
    for _ in 0..heads {
        let y = rng.normals(D);
        let mu: Vec<f64> = y.iter().map(|v| v + rng.standard_normal()).collect();
        let log_sigma2: Vec<f64> = (0..D).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        let h = GaussianHead { mu, log_sigma2 };
        let exact = kl_gaussian_to_prior(&h, &y);
        let sd: Vec<f64> = h.log_sigma2.iter().map(|l| (0.5 * l).exp()).collect();
        let mut acc = 0.0;
        for _ in 0..draws {
            for d in 0..D {
                let e = rng.standard_normal();
                let z = h.mu[d] + sd[d] * e;
                // log q(z) − log p(z), constants cancel.
                acc += -0.5 * e * e - sd[d].ln() + 0.5 * (z - y[d]).powi(2);
            }
        }
        let mc = acc / draws as f64;
        worst = worst.max((mc - exact).abs() / exact);
    }
    CheckLine::new(
        "gaussian_kl_monte_carlo",
        worst < 0.01,
        format!("max relative deviation {worst:.5} over {heads} heads (limit 0.01)"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(nll_student_t_consistency(500, 1).passed);
        assert!(edl_gradient_gate(100, 1).passed);
        assert!(gaussian_kl_monte_carlo(3, 20_000, 1).passed);
    }

    #[test]
    fn ks_of_exact_quantiles_is_small() {
        let n = 1000;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        assert!(ks_statistic(xs, |x| x.clamp(0.0, 1.0)) <= 0.5 / n as f64 + 1e-12);
        let shifted: Vec<f64> = (0..n).map(|i| 0.5 + 0.5 * i as f64 / n as f64).collect();
        assert!(ks_statistic(shifted, |x| x.clamp(0.0, 1.0)) > 0.49);
    }

    #[test]
    fn model_gate_on_tiny_model() {
        let mut c = ModelConfig::desk();
        c.hidden_dim = 16;
        c.ffn_dim = 32;
        c.num_heads = 2;
        c.mel_dim = 4;
        c.prenet_dims = vec![8, 8];
        c.denoiser_hidden = 8;
        c.postnet_channels = 4;
        let line = model_gradient_gate(&c, 3, 2);
        assert!(line.passed, "{line}");
    }

    #[test]
    fn unknown_suite() {
        assert!(run_suite("nope", 0).is_none());
    }
}
