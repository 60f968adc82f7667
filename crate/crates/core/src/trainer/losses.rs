//! Reference loss functions on plain values. The training graph uses the
//! fused tape ops in [`super::ops`]; these are what they are checked against.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{Result, TrainError};
use crate::backbone::MelSequence;
use crate::edl::{edl_loss, DEFAULT_LAMBDA};
use crate::nig::NigParams;
use crate::numerics::Tensor;
use crate::sampler::{kl_gaussian_to_prior, GaussianHead};

/// Extra weight on the positive stop frame.
pub const STOP_POSITIVE_WEIGHT: f64 = 500.0;
const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossWeights {
    pub samp: f64,
    pub flux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { samp: 0.2, flux: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub reg: f64,
    pub samp: f64,
    pub flux: f64,
    pub stop: f64,
}

impl LossParts {
    pub fn scaled(&self, w: f64) -> Self {
        Self {
            reg: w * self.reg,
            samp: w * self.samp,
            flux: w * self.flux,
            stop: w * self.stop,
        }
    }

    pub fn add(&mut self, o: &Self) {
        self.reg += o.reg;
        self.samp += o.samp;
        self.flux += o.flux;
        self.stop += o.stop;
    }

    /// Name of the first non-finite component.
    pub fn non_finite(&self) -> Option<&'static str> {
        [("reg", self.reg), ("samp", self.samp), ("flux", self.flux), ("stop", self.stop)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub reg: f64,
    pub samp: f64,
    pub flux: f64,
    pub stop: f64,
    pub total: f64,
    pub weights: Option<LossWeights>,
    /// Mean unweighted total of the rows from each source.
    pub per_source: BTreeMap<usize, f64>,
}

pub fn combine(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.reg + w.samp * parts.samp + w.flux * parts.flux + parts.stop
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> LossReport {
    LossReport {
        reg: parts.reg,
        samp: parts.samp,
        flux: parts.flux,
        stop: parts.stop,
        total: combine(parts, w),
        weights: Some(*w),
        per_source: BTreeMap::new(),
    }
}

fn same_shape(a: &MelSequence, b: &MelSequence) -> Result<()> {
    if a.len() != b.len() || a.dim() != b.dim() {
        return Err(TrainError::Shape(format!(
            "{}×{} vs {}×{}",
            a.len(),
            a.dim(),
            b.len(),
            b.dim()
        )));
    }
    Ok(())
}

/// `Σ_j (‖y − ŷ_j‖₁ + ‖y − ŷ_j‖₂²)` summed over dimensions, averaged over
/// frames.
pub fn regression_loss(y_gt: &MelSequence, y1: &MelSequence, y2: &MelSequence) -> Result<f64> {
    same_shape(y_gt, y1)?;
    same_shape(y_gt, y2)?;
    let t = y_gt.len().max(1) as f64;
    let mut s = 0.0;
    for y in [y1, y2] {
        for (a, b) in y_gt.data().iter().zip(y.data()) {
            let r = a - b;
            s += r.abs() + r * r;
        }
    }
    Ok(s / t)
}

/// Negated L1 distance between each location and the previous target frame,
/// averaged over the `T − 1` transitions. Zero when `T < 2`.
pub fn flux_loss(gammas: &Tensor, y_gt: &MelSequence) -> Result<f64> {
    if gammas.rows() != y_gt.len() || gammas.cols() != y_gt.dim() {
        return Err(TrainError::Shape(format!(
            "locations {:?} vs target {}×{}",
            gammas.shape(),
            y_gt.len(),
            y_gt.dim()
        )));
    }
    let t = y_gt.len();
    if t < 2 {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for k in 1..t {
        s += gammas.row(k).iter().zip(y_gt.frame(k - 1)).map(|(g, y)| (g - y).abs()).sum::<f64>();
    }
    Ok(-s / (t - 1) as f64)
}

/// Binary cross-entropy with target 1 at `stop_index`, that term weighted by
/// `positive_weight`, averaged over frames.
pub fn stop_loss(scores: &[f64], stop_index: usize, positive_weight: f64) -> Result<f64> {
    if stop_index >= scores.len() {
        return Err(TrainError::Shape(format!(
            "stop index {stop_index} outside {} frames",
            scores.len()
        )));
    }
    let s: f64 = scores
        .iter()
        .enumerate()
        .map(|(t, &p)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if t == stop_index {
                -positive_weight * p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(s / scores.len() as f64)
}

/// Mean over frames of the evidential loss with λ = 0.5.
pub fn sampling_loss(y_gt: &MelSequence, nigs: &[NigParams]) -> Result<f64> {
    if nigs.len() != y_gt.len() {
        return Err(TrainError::Shape(format!("{} heads for {} frames", nigs.len(), y_gt.len())));
    }
    let s: f64 = nigs
        .iter()
        .enumerate()
        .map(|(t, p)| edl_loss(y_gt.frame(t), p, DEFAULT_LAMBDA).total)
        .sum();
    Ok(s / nigs.len().max(1) as f64)
}

/// Mean over frames of `KL(N(μ, σ²) ‖ N(y, I))`.
pub fn kl_sampling_loss(y_gt: &MelSequence, heads: &[GaussianHead]) -> Result<f64> {
    if heads.len() != y_gt.len() {
        return Err(TrainError::Shape(format!("{} heads for {} frames", heads.len(), y_gt.len())));
    }
    let s: f64 = heads
        .iter()
        .enumerate()
        .map(|(t, h)| kl_gaussian_to_prior(h, y_gt.frame(t)))
        .sum();
    Ok(s / heads.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nig::NigParams;

    fn mel(rows: &[Vec<f64>]) -> MelSequence {
        MelSequence::from_tensor(Tensor::from_rows(rows).unwrap(), 62.5).unwrap()
    }

    #[test]
    fn regression_examples() {
        let gt = mel(&[vec![0.5, -0.5]]);
        assert_eq!(regression_loss(&gt, &gt, &gt).unwrap(), 0.0);
        let y1 = mel(&[vec![1.5, -1.5]]);
        assert!((regression_loss(&gt, &y1, &gt).unwrap() - 4.0).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for k in (0..10).rev() {
            let a = k as f64 / 10.0;
            let y = mel(&[vec![0.5 + a, -0.5 - a]]);
            let l = regression_loss(&gt, &y, &gt).unwrap();
            assert!(l < last || k == 9);
            last = l;
        }
        assert!(regression_loss(&gt, &mel(&[vec![0.0]]), &gt).is_err());
    }

    #[test]
    fn flux_examples() {
        let y = mel(&[vec![1.0], vec![0.0]]);
        let g = Tensor::from_rows(&[vec![9.0], vec![3.0]]).unwrap();
        assert!((flux_loss(&g, &y).unwrap() + 2.0).abs() < 1e-12);
        let g = Tensor::from_rows(&[vec![9.0], vec![1.0]]).unwrap();
        assert_eq!(flux_loss(&g, &y).unwrap(), 0.0);
        let g = Tensor::from_rows(&[vec![9.0], vec![4.0]]).unwrap();
        assert!(flux_loss(&g, &y).unwrap() < -2.0);
        let one = mel(&[vec![1.0]]);
        assert_eq!(flux_loss(&Tensor::from_rows(&[vec![5.0]]).unwrap(), &one).unwrap(), 0.0);
    }

    #[test]
    fn stop_examples() {
        let perfect = stop_loss(&[0.0, 0.0, 1.0], 2, 500.0).unwrap();
        assert!(perfect < 1e-4);
        let half = stop_loss(&[0.5, 0.5], 1, 500.0).unwrap();
        assert!((half - 501.0 * 2f64.ln() / 2.0).abs() < 1e-9);
        assert!((half - 173.64).abs() < 0.01);
        assert!(stop_loss(&[0.5], 1, 500.0).is_err());
    }

    #[test]
    fn sampling_examples() {
        let gt = mel(&[vec![0.0]]);
        let p = NigParams::scalar(0.0, 1.0, 2.0, 1.0).unwrap();
        let s = sampling_loss(&gt, &[p]).unwrap();
        assert!((s - 0.9808292530).abs() < 1e-9);
        assert!(sampling_loss(&gt, &[]).is_err());
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossParts::default(), &w).total, 0.0);
        let p = LossParts {
            reg: 1.0,
            samp: 1.0,
            flux: -1.0,
            stop: 1.0,
        };
        assert!((total_loss(&p, &w).total - 1.7).abs() < 1e-12);
        let melle = LossWeights { samp: 0.1, flux: 0.5 };
        assert!((total_loss(&p, &melle).total - 1.6).abs() < 1e-12);
    }
}
