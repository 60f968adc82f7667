use std::collections::BTreeMap;

use super::losses::{combine, LossParts, LossReport, LossWeights};
use super::ops;
use super::{Result, TrainError};
use crate::backbone::{whole, ChunkSpan, HeadKind, MelSequence, Model, Net, TokenSequence};
use crate::nig::constrain_raw;
use crate::numerics::{Backend, Tape, Tensor, Var};
use crate::sampler::{HierarchicalNoise, RngStream};

/// One teacher-forced training row.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub text: TokenSequence,
    /// Target frames; the last one is the stop frame.
    pub target: MelSequence,
    /// 0 for the original rendering, `k` for teacher `k`.
    pub source_id: usize,
    pub weight: f64,
    /// Interleaved chunk layout; `None` means one chunk.
    pub chunks: Option<Vec<ChunkSpan>>,
}

impl TrainingExample {
    pub fn new(text: TokenSequence, target: MelSequence, source_id: usize, weight: f64) -> Self {
        Self {
            text,
            target,
            source_id,
            weight,
            chunks: None,
        }
    }
}

/// Everything about the objective that is not a model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub edl_lambda: f64,
    pub stop_weight: f64,
    pub flux_clamp: Option<f64>,
    pub residual_dropout: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            edl_lambda: crate::edl::DEFAULT_LAMBDA,
            stop_weight: super::losses::STOP_POSITIVE_WEIGHT,
            flux_clamp: None,
            residual_dropout: true,
        }
    }
}

/// The random draws behind the sampled frames of one row. Fixing them makes
/// the row loss a deterministic function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum RowNoise {
    Hierarchical(Vec<HierarchicalNoise>),
    Gaussian(Tensor),
    Deterministic,
}

pub struct RowOutput {
    pub parts: LossParts,
    pub total: f64,
    /// Gradient of `total` for every parameter, in store order.
    pub grads: Option<Vec<Tensor>>,
    pub noise: RowNoise,
}

fn row_streams(seed: u64) -> (RngStream, RngStream, RngStream) {
    (RngStream::new(seed, 11), RngStream::new(seed, 12), RngStream::new(seed, 13))
}

/// Forward (and optionally backward) pass of one row. Dropout masks and
/// sampling noise come from `seed`; passing `noise` overrides the latter.
pub fn row_forward(
    model: &Model,
    ex: &TrainingExample,
    settings: &LossSettings,
    seed: u64,
    noise: Option<&RowNoise>,
    want_grads: bool,
) -> Result<RowOutput> {
    let cfg = &model.config;
    let t_len = ex.target.len();
    if t_len == 0 {
        return Err(TrainError::Shape("empty target".into()));
    }
    let d = cfg.mel_dim;
    let target = ex.target.tensor();
    let chunks = ex.chunks.clone().unwrap_or_else(|| whole(ex.text.len(), t_len));
    let (mut prenet_rng, mut residual_rng, mut sample_rng) = row_streams(seed);

    let mut tape = Tape::new();
    let net = Net::bind(&mut tape, model);
    let residual = settings.residual_dropout.then_some(&mut residual_rng);
    let e = net.teacher_forced(&mut tape, &ex.text, target, &chunks, &mut prenet_rng, residual)?;
    let raw = net.head(&mut tape, &e)?;

    let (z, used_noise) = sample_path(&mut tape, raw, cfg.head, cfg.sampling, d, noise, &mut sample_rng)?;
    let y1 = net.denoise(&mut tape, &z)?;
    let y2 = net.postnet(&mut tape, &y1)?;
    let reg1 = ops::regression(&mut tape, y1, target);
    let reg2 = ops::regression(&mut tape, y2, target);
    let reg = tape.add(&reg1, &reg2)?;
    let samp = match cfg.head {
        HeadKind::Evidential => ops::evidential_loss(&mut tape, raw, target, settings.edl_lambda),
        HeadKind::Gaussian => ops::kl_to_target(&mut tape, raw, target),
    };
    let flux = ops::flux(&mut tape, raw, target, settings.flux_clamp);
    let logits = net.stop_logits(&mut tape, &e)?;
    let stop = ops::stop_bce(&mut tape, logits, t_len - 1, settings.stop_weight);

    let w = settings.weights;
    let s = tape.scale(&samp, w.samp);
    let f = tape.scale(&flux, w.flux);
    let total = tape.add(&reg, &s)?;
    let total = tape.add(&total, &f)?;
    let total = tape.add(&total, &stop)?;

    let parts = LossParts {
        reg: tape.get(reg).item(),
        samp: tape.get(samp).item(),
        flux: tape.get(flux).item(),
        stop: tape.get(stop).item(),
    };
    let total_value = combine(&parts, &w);
    let grads = if want_grads {
        let g = tape.backward(total)?;
        Some(net.vars().iter().map(|v| g.wrt(*v)).collect())
    } else {
        None
    };
    Ok(RowOutput {
        parts,
        total: total_value,
        grads,
        noise: used_noise,
    })
}

fn sample_path(
    tape: &mut Tape,
    raw: Var,
    head: HeadKind,
    sampling: bool,
    d: usize,
    fixed: Option<&RowNoise>,
    rng: &mut RngStream,
) -> Result<(Var, RowNoise)> {
    if !sampling {
        return Ok((tape.slice_cols(&raw, 0, d)?, RowNoise::Deterministic));
    }
    let rows = tape.get(raw).rows();
    match head {
        HeadKind::Evidential => {
            let noise = match fixed {
                Some(RowNoise::Hierarchical(n)) => n.clone(),
                Some(other) => return Err(TrainError::Shape(format!("noise kind {other:?} for evidential head"))),
                None => {
                    let r = tape.get(raw).clone();
                    (0..rows)
                        .map(|t| Ok(HierarchicalNoise::draw(&constrain_raw(r.row(t))?, rng, 1.0)?))
                        .collect::<Result<Vec<_>>>()?
                }
            };
            Ok((ops::pathwise_sample(tape, raw, noise.clone()), RowNoise::Hierarchical(noise)))
        }
        HeadKind::Gaussian => {
            let eps = match fixed {
                Some(RowNoise::Gaussian(e)) => e.clone(),
                Some(other) => return Err(TrainError::Shape(format!("noise kind {other:?} for gaussian head"))),
                None => Tensor::new(&[rows, d], rng.normals(rows * d))?,
            };
            Ok((ops::gaussian_sample(tape, raw, eps.clone()), RowNoise::Gaussian(eps)))
        }
    }
}

/// Weighted losses and summed gradients over a batch.
pub struct BatchResult {
    pub report: LossReport,
    pub grads: Option<Vec<Vec<f64>>>,
    pub noise: Vec<RowNoise>,
}

/// `Σ_i scale_i · ℒ_i` with one independent forward pass per example.
pub fn weighted_batch(
    model: &Model,
    examples: &[TrainingExample],
    scales: &[f64],
    settings: &LossSettings,
    seeds: &[u64],
    noise: Option<&[RowNoise]>,
    want_grads: bool,
) -> Result<BatchResult> {
    let mut parts = LossParts::default();
    let mut per_source: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut grads: Option<Vec<Vec<f64>>> =
        want_grads.then(|| model.params.tensors().iter().map(|t| vec![0.0; t.len()]).collect());
    let mut used = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let out = row_forward(model, ex, settings, seeds[i], noise.map(|n| &n[i]), want_grads)?;
        if let Some(name) = out.parts.non_finite() {
            return Err(TrainError::NonFinite { step: None, component: name });
        }
        parts.add(&out.parts.scaled(scales[i]));
        let e = per_source.entry(ex.source_id).or_insert((0.0, 0));
        e.0 += out.total;
        e.1 += 1;
        if let (Some(acc), Some(g)) = (grads.as_mut(), out.grads.as_ref()) {
            for (a, t) in acc.iter_mut().zip(g) {
                for (x, y) in a.iter_mut().zip(t.data()) {
                    *x += scales[i] * y;
                }
            }
        }
        used.push(out.noise);
    }
    let mut report = super::losses::total_loss(&parts, &settings.weights);
    report.per_source = per_source.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    Ok(BatchResult {
        report,
        grads,
        noise: used,
    })
}

/// Weights normalised to sum to one.
pub fn normalized_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(TrainError::Weights(format!("weights must be finite and non-negative: {weights:?}")));
    }
    let s: f64 = weights.iter().sum();
    if s <= 0.0 {
        return Err(TrainError::Weights("all example weights are zero".into()));
    }
    Ok(weights.iter().map(|w| w / s).collect())
}

/// `ℒ = Σ_i w_i ℒ(y_i)` over separate teacher-forced passes, weights
/// normalised to sum to one.
pub fn multi_teacher_loss(model: &Model, examples: &[TrainingExample], settings: &LossSettings, seed: u64) -> Result<LossReport> {
    let w = normalized_weights(&examples.iter().map(|e| e.weight).collect::<Vec<_>>())?;
    let seeds = vec![seed; examples.len()];
    Ok(weighted_batch(model, examples, &w, settings, &seeds, None, false)?.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::corpus::{CorpusSpec, Templates};

    pub(crate) fn tiny_model(head: HeadKind, sampling: bool) -> Model {
        let mut c = ModelConfig::desk();
        c.hidden_dim = 16;
        c.ffn_dim = 32;
        c.num_heads = 2;
        c.mel_dim = 4;
        c.prenet_dims = vec![8, 8];
        c.denoiser_hidden = 8;
        c.postnet_channels = 4;
        c.postnet_kernel = 3;
        c.postnet_blocks = 2;
        c.head = head;
        c.sampling = sampling;
        Model::new(c, 3).unwrap()
    }

    fn example(seed: u64) -> TrainingExample {
        let spec = CorpusSpec {
            mel_dim: 4,
            frames_per_token: 8,
            ..CorpusSpec::desk()
        };
        let t = Templates::build(&spec).unwrap();
        let mut r = RngStream::new(seed, 0);
        let ids = (0..3).map(|_| r.below(16)).collect();
        let u = t.render(&TokenSequence::new(ids), 0, 1, seed).unwrap();
        TrainingExample::new(u.text, u.mel, 1, 1.0)
    }

    #[test]
    fn row_total_is_weighted_sum_of_parts() {
        let m = tiny_model(HeadKind::Evidential, true);
        let out = row_forward(&m, &example(1), &LossSettings::default(), 5, None, false).unwrap();
        let p = out.parts;
        let direct = p.reg + 0.2 * p.samp + 0.5 * p.flux + p.stop;
        assert!((out.total - direct).abs() < 1e-12);
        assert!(p.flux <= 0.0);
    }

    #[test]
    fn fixed_seed_rows_are_reproducible() {
        let m = tiny_model(HeadKind::Evidential, true);
        let a = row_forward(&m, &example(2), &LossSettings::default(), 9, None, true).unwrap();
        let b = row_forward(&m, &example(2), &LossSettings::default(), 9, None, true).unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(a.grads, b.grads);
        let c = row_forward(&m, &example(2), &LossSettings::default(), 9, Some(&a.noise), false).unwrap();
        assert_eq!(a.total, c.total);
    }

    #[test]
    fn multi_teacher_weighting() {
        let m = tiny_model(HeadKind::Evidential, false);
        let s = LossSettings {
            residual_dropout: false,
            ..LossSettings::default()
        };
        let single = multi_teacher_loss(&m, &[example(3)], &s, 1).unwrap();
        let row = row_forward(&m, &example(3), &s, 1, None, false).unwrap();
        assert!((single.total - row.total).abs() < 1e-12);

        let mut a = example(3);
        a.weight = 0.3;
        let mut b = example(3);
        b.weight = 0.7;
        let pair = multi_teacher_loss(&m, &[a.clone(), b], &s, 1).unwrap();
        assert!((pair.total - single.total).abs() < 1e-9);

        a.weight = 0.0;
        assert!(multi_teacher_loss(&m, &[a], &s, 1).is_err());
        let w = normalized_weights(&[0.22, 0.13, 0.13, 0.13, 0.13, 0.13, 0.13]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[0] - 0.22).abs() < 1e-15);
    }

    #[test]
    fn gaussian_and_deterministic_paths_run() {
        for (head, sampling) in [(HeadKind::Gaussian, true), (HeadKind::Gaussian, false), (HeadKind::Evidential, false)] {
            let m = tiny_model(head, sampling);
            let out = row_forward(&m, &example(4), &LossSettings::default(), 1, None, true).unwrap();
            assert!(out.total.is_finite());
            assert!(out.grads.unwrap().iter().all(|g| g.all_finite()));
        }
    }

    #[test]
    fn streamed_layout_row_runs() {
        let m = tiny_model(HeadKind::Evidential, true);
        let mut ex = example(5);
        ex.chunks = Some(vec![
            ChunkSpan { text: 0..2, audio: 0..5 },
            ChunkSpan { text: 2..3, audio: 5..25 },
        ]);
        let out = row_forward(&m, &ex, &LossSettings::default(), 1, None, true).unwrap();
        assert!(out.total.is_finite());
    }
}
