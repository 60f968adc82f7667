//! Reproducible random streams, the hierarchical NIG frame sampler and the
//! Gaussian reparameterized baseline.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::nig::NigParams;

/// Lower clamp on a baseline log-variance.
pub const LOG_SIGMA2_FLOOR: f64 = -30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("inverse-gamma shape must exceed 1, got alpha[{index}] = {value}")]
    Shape { index: usize, value: f64 },
    #[error("inverse-gamma scale must be positive, got beta[{index}] = {value}")]
    Scale { index: usize, value: f64 },
    #[error("beta_scale must be positive and finite, got {0}")]
    BetaScale(f64),
    #[error("parameter vectors have lengths {0} and {1}")]
    Length(usize, usize),
}

/// A deterministic random stream keyed by `(seed, stream_id)`.
///
/// Streams with the same seed and different ids are ChaCha streams of the
/// same key and do not overlap.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Fresh stream with the same seed and another id.
    pub fn fork(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }
}

/// Gamma(shape, 1) by Marsaglia and Tsang's squeeze method. Shapes below 1
/// use the `u^(1/shape)` boost.
pub fn sample_gamma(shape: f64, rng: &mut RngStream) -> f64 {
    if shape < 1.0 {
        let boost = rng.uniform().powf(1.0 / shape);
        return sample_gamma(shape + 1.0, rng) * boost;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.standard_normal();
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u = rng.uniform();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Element-wise Inverse-Gamma(α, β) draws as `β / Gamma(α, 1)`.
pub fn sample_inverse_gamma(alpha: &[f64], beta: &[f64], rng: &mut RngStream) -> Result<Vec<f64>, SamplerError> {
    if alpha.len() != beta.len() {
        return Err(SamplerError::Length(alpha.len(), beta.len()));
    }
    for (index, (&a, &b)) in alpha.iter().zip(beta).enumerate() {
        if !(a > 1.0 && a.is_finite()) {
            return Err(SamplerError::Shape { index, value: a });
        }
        if !(b > 0.0 && b.is_finite()) {
            return Err(SamplerError::Scale { index, value: b });
        }
    }
    Ok(alpha
        .iter()
        .zip(beta)
        .map(|(&a, &b)| b / sample_gamma(a, rng))
        .collect())
}

/// The random part of one hierarchical draw. Given these, the frame is a
/// deterministic, differentiable function of γ and ν:
/// `z = γ + σ (ε_mean / √ν + ε_obs)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalNoise {
    pub sigma2: Vec<f64>,
    pub eps_mean: Vec<f64>,
    pub eps_obs: Vec<f64>,
}

impl HierarchicalNoise {
    pub fn draw(p: &NigParams, rng: &mut RngStream, beta_scale: f64) -> Result<Self, SamplerError> {
        if !(beta_scale > 0.0 && beta_scale.is_finite()) {
            return Err(SamplerError::BetaScale(beta_scale));
        }
        let scaled: Vec<f64> = p.beta.iter().map(|b| b * beta_scale).collect();
        let sigma2 = sample_inverse_gamma(&p.alpha, &scaled, rng)?;
        let d = p.dim();
        let eps_mean = rng.normals(d);
        let eps_obs = rng.normals(d);
        Ok(Self { sigma2, eps_mean, eps_obs })
    }

    /// Applies the noise to a location and mean-evidence vector.
    pub fn apply(&self, gamma: &[f64], nu: &[f64]) -> Vec<f64> {
        (0..gamma.len())
            .map(|d| gamma[d] + self.sigma2[d].sqrt() * (self.eps_mean[d] / nu[d].sqrt() + self.eps_obs[d]))
            .collect()
    }
}

/// σ² ~ IG(α, s·β), μ ~ N(γ, σ²/ν), z ~ N(μ, σ²).
pub fn sample_hierarchical(p: &NigParams, rng: &mut RngStream, beta_scale: f64) -> Result<Vec<f64>, SamplerError> {
    Ok(HierarchicalNoise::draw(p, rng, beta_scale)?.apply(&p.gamma, &p.nu))
}

/// Mean and log-variance head of the diagonal-Gaussian baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub mu: Vec<f64>,
    pub log_sigma2: Vec<f64>,
}

impl GaussianHead {
    fn clamped_log_var(&self, d: usize) -> f64 {
        self.log_sigma2[d].max(LOG_SIGMA2_FLOOR)
    }
}

/// `z = μ + exp(½ log σ²) ε`, with the log-variance clamped from below.
pub fn sample_gaussian_baseline(h: &GaussianHead, rng: &mut RngStream) -> Vec<f64> {
    (0..h.mu.len())
        .map(|d| h.mu[d] + (0.5 * h.clamped_log_var(d)).exp() * rng.standard_normal())
        .collect()
}

/// `KL(N(μ, σ²) ‖ N(y, I))`, summed over dimensions.
pub fn kl_gaussian_to_prior(h: &GaussianHead, y: &[f64]) -> f64 {
    (0..h.mu.len())
        .map(|d| {
            let lv = h.clamped_log_var(d);
            let r = h.mu[d] - y[d];
            0.5 * (lv.exp() + r * r - 1.0 - lv)
        })
        .sum()
}
