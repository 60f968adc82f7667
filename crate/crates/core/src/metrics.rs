//! Token error rate, frame error, repeated-sampling diversity and stop
//! timing.

use serde::Serialize;
use thiserror::Error;

use crate::backbone::{MelSequence, TokenSequence};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("reference sequence is empty")]
    EmptyReference,
    #[error("group {0} has fewer than two members")]
    SmallGroup(usize),
    #[error("frame width {got} differs from {expected}")]
    Width { got: usize, expected: usize },
    #[error("no groups given")]
    NoGroups,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Levenshtein distance with unit costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn token_error_rate(reference: &TokenSequence, hypothesis: &TokenSequence) -> Result<f64> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    Ok(edit_distance(&reference.ids, &hypothesis.ids) as f64 / reference.len() as f64)
}

/// Mean squared error over frames and dims. A shorter hypothesis is padded
/// with zero frames and a longer one truncated; the flag reports either.
pub fn frame_mse(reference: &MelSequence, hypothesis: &MelSequence) -> Result<(f64, bool)> {
    let d = reference.dim();
    if hypothesis.dim() != d {
        return Err(MetricsError::Width {
            got: hypothesis.dim(),
            expected: d,
        });
    }
    if reference.is_empty() {
        return Ok((0.0, !hypothesis.is_empty()));
    }
    let h = hypothesis.data();
    let sum: f64 = reference
        .data()
        .iter()
        .enumerate()
        .map(|(i, r)| (r - h.get(i).copied().unwrap_or(0.0)).powi(2))
        .sum();
    Ok((sum / reference.data().len() as f64, hypothesis.len() != reference.len()))
}

/// Signed frame offset of the predicted end.
pub fn stop_timing(ref_len: usize, hyp_len: usize) -> i64 {
    hyp_len as i64 - ref_len as i64
}

#[derive(Clone, Copy, Debug, Default, Serialize, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, PartialEq)]
pub struct DiversityReport {
    pub cosine: MeanStd,
    pub l1: MeanStd,
    pub l2: MeanStd,
    pub pairs: usize,
}

/// Time-averaged frame scaled to unit length (zero stays zero).
pub fn pooled_embedding(mel: &MelSequence) -> Vec<f64> {
    let d = mel.dim();
    let mut v = vec![0.0; d];
    for t in 0..mel.len() {
        for (a, x) in v.iter_mut().zip(mel.frame(t)) {
            *a += x;
        }
    }
    let n = mel.len().max(1) as f64;
    v.iter_mut().for_each(|x| *x /= n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Within-group pairwise distances between pooled embeddings.
pub fn diversity(groups: &[Vec<MelSequence>]) -> Result<DiversityReport> {
    if groups.is_empty() {
        return Err(MetricsError::NoGroups);
    }
    let (mut cos, mut l1, mut l2) = (Vec::new(), Vec::new(), Vec::new());
    for (g, group) in groups.iter().enumerate() {
        if group.len() < 2 {
            return Err(MetricsError::SmallGroup(g));
        }
        let emb: Vec<Vec<f64>> = group.iter().map(pooled_embedding).collect();
        for i in 0..emb.len() {
            for j in i + 1..emb.len() {
                let (a, b) = (&emb[i], &emb[j]);
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                cos.push((1.0 - dot).max(0.0));
                l1.push(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum());
                l2.push(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt());
            }
        }
    }
    Ok(DiversityReport {
        cosine: MeanStd::of(&cos),
        l1: MeanStd::of(&l1),
        l2: MeanStd::of(&l2),
        pairs: cos.len(),
    })
}

/// Aggregate stop accuracy over non-truncated generations.
#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct StopSummary {
    pub within_tolerance: f64,
    pub mean_abs_offset: f64,
    pub truncation_rate: f64,
    pub count: usize,
}

/// `(ref_len, hyp_len, truncated)` triples; truncated items only count
/// towards the truncation rate.
pub fn stop_summary(items: &[(usize, usize, bool)], tolerance: i64) -> StopSummary {
    if items.is_empty() {
        return StopSummary::default();
    }
    let kept: Vec<i64> = items.iter().filter(|i| !i.2).map(|&(r, h, _)| stop_timing(r, h)).collect();
    let within = kept.iter().filter(|o| o.abs() <= tolerance).count();
    StopSummary {
        within_tolerance: within as f64 / items.len() as f64,
        mean_abs_offset: kept.iter().map(|o| o.abs() as f64).fold(0.0, |a, b| a + b) / kept.len().max(1) as f64,
        truncation_rate: (items.len() - kept.len()) as f64 / items.len() as f64,
        count: items.len(),
    }
}
