use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::losses::LossWeights;
use super::optim::{clip_global_norm, AdamW, AdamWConfig, Schedule};
use super::step::{normalized_weights, weighted_batch, LossSettings, TrainingExample};
use super::{Result, TrainError};
use crate::backbone::{Model, ModelConfig};
use crate::config::{join_list, parse_list, parse_value, ConfigError, KvConfig};
use crate::corpus::Corpus;
use crate::sampler::RngStream;
use crate::streaming::{partition, ratio_keep};

/// Optimisation and data settings of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub lambda_samp: f64,
    pub lambda_flux: f64,
    pub edl_lambda: f64,
    pub stop_weight: f64,
    /// Clamp the per-frame flux term at `10·D`.
    pub flux_clamp: bool,
    /// Fraction of training before the flux term is switched on.
    pub flux_start: f64,
    /// Fraction of training over which its weight then ramps up linearly.
    pub flux_ramp: f64,
    pub residual_dropout: bool,
    /// Active sources: the original plus `teachers − 1` simulated teachers.
    pub teachers: usize,
    /// Weight of each source id, original first.
    pub teacher_weights: Vec<f64>,
    pub seed: u64,
    pub eval_holdout: usize,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Share of rows trained in the chunked streaming layout.
    pub stream_fraction: f64,
    pub chunk_text: usize,
    pub chunk_audio: usize,
    pub min_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            lambda_samp: 0.2,
            lambda_flux: 0.5,
            edl_lambda: crate::edl::DEFAULT_LAMBDA,
            stop_weight: super::losses::STOP_POSITIVE_WEIGHT,
            flux_clamp: false,
            flux_start: 0.3,
            flux_ramp: 0.2,
            residual_dropout: true,
            teachers: 7,
            teacher_weights: vec![0.22, 0.13, 0.13, 0.13, 0.13, 0.13, 0.13],
            seed: 0,
            eval_holdout: 200,
            checkpoint_every: 0,
            stream_fraction: 0.0,
            chunk_text: 2,
            chunk_audio: 16,
            min_ratio: 8.0,
        }
    }
}

impl TrainConfig {
    pub fn loss_settings(&self, mel_dim: usize) -> LossSettings {
        LossSettings {
            weights: LossWeights {
                samp: self.lambda_samp,
                flux: self.lambda_flux,
            },
            edl_lambda: self.edl_lambda,
            stop_weight: self.stop_weight,
            flux_clamp: self.flux_clamp.then_some(10.0 * mel_dim as f64),
            residual_dropout: self.residual_dropout,
        }
    }

    /// Flux weight at `step`: zero before `flux_start`, then a linear ramp
    /// to `lambda_flux`.
    pub fn flux_weight(&self, step: usize) -> f64 {
        let at = step as f64 / self.steps.max(1) as f64;
        let ramp = if self.flux_ramp > 0.0 {
            ((at - self.flux_start) / self.flux_ramp).clamp(0.0, 1.0)
        } else if at >= self.flux_start {
            1.0
        } else {
            0.0
        };
        self.lambda_flux * ramp
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Setup(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        let unit = [self.warmup_fraction, self.stream_fraction, self.flux_start, self.flux_ramp];
        if !unit.iter().all(|f| (0.0..=1.0).contains(f)) {
            return bad("warmup_fraction, stream_fraction, flux_start and flux_ramp must lie in [0, 1]");
        }
        if self.teachers == 0 || self.teachers > self.teacher_weights.len() {
            return Err(TrainError::Setup(format!(
                "teachers = {} needs between 1 and {} sources",
                self.teachers,
                self.teacher_weights.len()
            )));
        }
        if self.chunk_text == 0 || self.chunk_audio == 0 {
            return bad("chunk sizes must be positive");
        }
        normalized_weights(&self.teacher_weights[..self.teachers])?;
        Ok(())
    }
}

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<bool, ConfigError> {
        match key {
            "steps" => self.steps = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "peak_lr" => self.peak_lr = parse_value(key, v)?,
            "warmup_fraction" => self.warmup_fraction = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, v)?,
            "adam_eps" => self.adam_eps = parse_value(key, v)?,
            "clip_norm" => self.clip_norm = parse_value(key, v)?,
            "lambda_samp" => self.lambda_samp = parse_value(key, v)?,
            "lambda_flux" => self.lambda_flux = parse_value(key, v)?,
            "edl_lambda" => self.edl_lambda = parse_value(key, v)?,
            "stop_weight" => self.stop_weight = parse_value(key, v)?,
            "flux_clamp" => self.flux_clamp = parse_value(key, v)?,
            "flux_start" => self.flux_start = parse_value(key, v)?,
            "flux_ramp" => self.flux_ramp = parse_value(key, v)?,
            "residual_dropout" => self.residual_dropout = parse_value(key, v)?,
            "teachers" => self.teachers = parse_value(key, v)?,
            "teacher_weights" => self.teacher_weights = parse_list(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "eval_holdout" => self.eval_holdout = parse_value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "stream_fraction" => self.stream_fraction = parse_value(key, v)?,
            "chunk_text" => self.chunk_text = parse_value(key, v)?,
            "chunk_audio" => self.chunk_audio = parse_value(key, v)?,
            "min_ratio" => self.min_ratio = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let e = |k: &str, v: String| (k.to_string(), v);
        vec![
            e("steps", self.steps.to_string()),
            e("batch_size", self.batch_size.to_string()),
            e("peak_lr", self.peak_lr.to_string()),
            e("warmup_fraction", self.warmup_fraction.to_string()),
            e("weight_decay", self.weight_decay.to_string()),
            e("adam_beta1", self.adam_beta1.to_string()),
            e("adam_beta2", self.adam_beta2.to_string()),
            e("adam_eps", self.adam_eps.to_string()),
            e("clip_norm", self.clip_norm.to_string()),
            e("lambda_samp", self.lambda_samp.to_string()),
            e("lambda_flux", self.lambda_flux.to_string()),
            e("edl_lambda", self.edl_lambda.to_string()),
            e("stop_weight", self.stop_weight.to_string()),
            e("flux_clamp", self.flux_clamp.to_string()),
            e("flux_start", self.flux_start.to_string()),
            e("flux_ramp", self.flux_ramp.to_string()),
            e("residual_dropout", self.residual_dropout.to_string()),
            e("teachers", self.teachers.to_string()),
            e("teacher_weights", join_list(&self.teacher_weights)),
            e("seed", self.seed.to_string()),
            e("eval_holdout", self.eval_holdout.to_string()),
            e("checkpoint_every", self.checkpoint_every.to_string()),
            e("stream_fraction", self.stream_fraction.to_string()),
            e("chunk_text", self.chunk_text.to_string()),
            e("chunk_audio", self.chunk_audio.to_string()),
            e("min_ratio", self.min_ratio.to_string()),
        ]
    }
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub reg: f64,
    pub samp: f64,
    pub flux: f64,
    pub stop: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub per_source: BTreeMap<usize, f64>,
}

/// Optional side channels of a run.
#[derive(Default)]
pub struct TrainRun<'a> {
    /// Receives one JSON object per step.
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<&'a Path>,
    pub on_step: Option<&'a mut dyn FnMut(&StepRecord)>,
    /// Starting weights; a fresh model is initialised from the seed if absent.
    pub init: Option<Model>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<StepRecord>,
}

fn decays(model: &Model) -> Vec<bool> {
    model
        .params
        .tensors()
        .iter()
        .map(|t| t.shape().len() == 2 && t.shape()[0] > 1)
        .collect()
}

fn draw_batch(
    corpus: &Corpus,
    train: &std::ops::Range<usize>,
    cfg: &TrainConfig,
    weights: &[f64],
    rng: &mut RngStream,
) -> Result<(Vec<TrainingExample>, Vec<f64>)> {
    let k = cfg.teachers;
    let mut rows = Vec::with_capacity(cfg.batch_size);
    let mut scales = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let index = train.start + rng.below(train.len());
        let source = rng.below(k);
        let u = corpus.rendition(index, source)?;
        let mut ex = TrainingExample::new(u.text, u.mel, source, weights[source]);
        if cfg.stream_fraction > 0.0 && rng.uniform() < cfg.stream_fraction {
            let (n, t) = (ex.text.len(), ex.target.len());
            if ratio_keep(n, t, cfg.min_ratio) {
                if let Ok(plan) = partition(n, t, cfg.chunk_text, cfg.chunk_audio) {
                    ex.chunks = Some(plan.spans());
                }
            }
        }
        scales.push(weights[source] * k as f64 / cfg.batch_size as f64);
        rows.push(ex);
    }
    Ok((rows, scales))
}

/// Trains a fresh model on the training split of `corpus`.
pub fn train(model_cfg: ModelConfig, corpus: &Corpus, cfg: &TrainConfig, mut run: TrainRun<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = corpus.spec();
    if spec.vocab_size != model_cfg.vocab_size || spec.mel_dim != model_cfg.mel_dim {
        return Err(TrainError::Setup(format!(
            "corpus has vocab {} and mel_dim {}, model expects {} and {}",
            spec.vocab_size, spec.mel_dim, model_cfg.vocab_size, model_cfg.mel_dim
        )));
    }
    if cfg.teachers > spec.num_teachers + 1 {
        return Err(TrainError::Setup(format!(
            "{} sources requested but the corpus has {} teachers",
            cfg.teachers, spec.num_teachers
        )));
    }
    let (train_range, _) = corpus.split(cfg.eval_holdout);
    if train_range.is_empty() {
        return Err(TrainError::Setup("no training utterances left after the holdout".into()));
    }
    let weights = normalized_weights(&cfg.teacher_weights[..cfg.teachers])?;
    let mut settings = cfg.loss_settings(model_cfg.mel_dim);

    let mut model = match run.init.take() {
        Some(m) if m.config == model_cfg => m,
        Some(_) => return Err(TrainError::Setup("initial model does not match the model config".into())),
        None => Model::new(model_cfg, cfg.seed)?,
    };
    let adam = AdamWConfig {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    };
    let mut opt = AdamW::new(adam, model.params.tensors(), decays(&model));
    let schedule = Schedule::new(cfg.peak_lr, cfg.steps, cfg.warmup_fraction);
    let mut batch_rng = RngStream::new(cfg.seed, 21);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let (rows, scales) = draw_batch(corpus, &train_range, cfg, &weights, &mut batch_rng)?;
        let seeds: Vec<u64> = rows.iter().map(|_| batch_rng.next_u64()).collect();
        settings.weights.flux = cfg.flux_weight(step);
        let batch = weighted_batch(&model, &rows, &scales, &settings, &seeds, None, true).map_err(|e| match e {
            TrainError::NonFinite { component, .. } => TrainError::NonFinite {
                step: Some(step),
                component,
            },
            other => other,
        })?;
        let mut grads = batch.grads.unwrap_or_default();
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite {
                step: Some(step),
                component: "gradient",
            });
        }
        let grad_norm = if cfg.clip_norm > 0.0 {
            clip_global_norm(&mut grads, cfg.clip_norm)
        } else {
            grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
        };
        let lr = schedule.lr(step + 1);
        opt.step(model.params.tensors_mut(), &grads, lr);

        let r = &batch.report;
        let record = StepRecord {
            step,
            lr,
            reg: r.reg,
            samp: r.samp,
            flux: r.flux,
            stop: r.stop,
            total: r.total,
            grad_norm,
            per_source: r.per_source.clone(),
        };
        if let Some(w) = run.log.as_mut() {
            serde_json::to_writer(&mut **w, &record)?;
            w.write_all(b"\n")?;
        }
        if let Some(f) = run.on_step.as_mut() {
            f(&record);
        }
        history.push(record);
        if let Some(dir) = run.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
                model.save(&dir.join(format!("step_{:06}.ckpt", step + 1)))?;
            }
        }
    }
    if let Some(dir) = run.checkpoint_dir {
        model.save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusSpec;

    fn setup(n: usize) -> (ModelConfig, Corpus) {
        let spec = CorpusSpec {
            mel_dim: 4,
            frames_per_token: 8,
            num_utterances: n,
            min_tokens: 2,
            max_tokens: 4,
            ..CorpusSpec::desk()
        };
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
        (c, Corpus::generate(&spec).unwrap())
    }

    fn short(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            peak_lr: 3e-3,
            eval_holdout: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_goes_down() {
        let (mc, corpus) = setup(64);
        let cfg = TrainConfig {
            lambda_flux: 0.0,
            ..short(200)
        };
        let out = train(mc, &corpus, &cfg, TrainRun::default()).unwrap();
        let mean = |r: &[StepRecord]| r.iter().map(|s| s.total).sum::<f64>() / r.len() as f64;
        let h = &out.history;
        assert_eq!(h.len(), 200);
        assert!(mean(&h[180..]) < 0.5 * mean(&h[..20]), "{} vs {}", mean(&h[180..]), mean(&h[..20]));
        assert!(h.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn identical_seeds_give_identical_checkpoints() {
        let (mc, corpus) = setup(24);
        let mut cfg = short(4);
        cfg.stream_fraction = 0.5;
        cfg.min_ratio = 1.0;
        let a = train(mc.clone(), &corpus, &cfg, TrainRun::default()).unwrap();
        let b = train(mc.clone(), &corpus, &cfg, TrainRun::default()).unwrap();
        assert_eq!(a.model.to_bytes(), b.model.to_bytes());
        cfg.seed = 1;
        let c = train(mc, &corpus, &cfg, TrainRun::default()).unwrap();
        assert_ne!(a.model.to_bytes(), c.model.to_bytes());
    }

    #[test]
    fn writes_log_and_checkpoints() {
        let (mc, corpus) = setup(24);
        let dir = tempfile::tempdir().unwrap();
        let mut log = Vec::new();
        let mut cfg = short(4);
        cfg.checkpoint_every = 2;
        let run = TrainRun {
            log: Some(&mut log),
            checkpoint_dir: Some(dir.path()),
            ..TrainRun::default()
        };
        let out = train(mc, &corpus, &cfg, run).unwrap();
        let lines: Vec<&str> = std::str::from_utf8(&log).unwrap().lines().collect();
        assert_eq!(lines.len(), 4);
        let v: serde_json::Value = serde_json::from_str(lines[3]).unwrap();
        assert_eq!(v["step"], 3);
        assert!(dir.path().join("step_000002.ckpt").exists());
        let loaded = Model::load(&dir.path().join("final.ckpt")).unwrap();
        assert_eq!(loaded.to_bytes(), out.model.to_bytes());
    }

    #[test]
    fn rejects_bad_setups() {
        let (mut mc, corpus) = setup(24);
        let mut cfg = short(1);
        cfg.teachers = 8;
        assert!(train(mc.clone(), &corpus, &cfg, TrainRun::default()).is_err());
        cfg.teachers = 3;
        cfg.eval_holdout = 24;
        assert!(train(mc.clone(), &corpus, &cfg, TrainRun::default()).is_err());
        mc.mel_dim = 5;
        assert!(train(mc, &corpus, &short(1), TrainRun::default()).is_err());
    }

    #[test]
    fn flux_schedule() {
        let c = TrainConfig {
            steps: 100,
            ..TrainConfig::default()
        };
        assert_eq!(c.flux_weight(0), 0.0);
        assert_eq!(c.flux_weight(30), 0.0);
        assert!((c.flux_weight(40) - 0.25).abs() < 1e-12);
        assert_eq!(c.flux_weight(50), 0.5);
        assert_eq!(c.flux_weight(99), 0.5);
        let on = TrainConfig {
            flux_start: 0.0,
            flux_ramp: 0.0,
            ..c
        };
        assert_eq!(on.flux_weight(0), 0.5);
    }

    #[test]
    fn kv_roundtrip() {
        let mut c = TrainConfig::default();
        c.teachers = 3;
        c.flux_clamp = true;
        let mut d = TrainConfig::default();
        d.apply_all(&c.entries().into_iter().collect()).unwrap();
        assert_eq!(c, d);
        assert!(!d.set("nope", "1").unwrap());
    }
}
