//! Held-out evaluation in continuation mode: the model hears the first
//! tokens of an utterance (text and frames) and must speak the rest.

use serde::Serialize;
use thiserror::Error;

use crate::backbone::{generate, BackboneError, MelSequence, Model, Prompt, TokenSequence};
use crate::config::{join_list, parse_list, parse_value, ConfigError, KvConfig};
use crate::corpus::{Corpus, CorpusError};
use crate::metrics::{diversity, frame_mse, stop_summary, token_error_rate, DiversityReport, MetricsError, StopSummary};
use crate::sampler::RngStream;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalConfig {
    /// Held-out utterances at the end of the corpus.
    pub holdout: usize,
    /// Number of held-out utterances scored.
    pub utterances: usize,
    /// Tokens given as prompt.
    pub prompt_tokens: usize,
    /// Sources cycled over the evaluated utterances.
    pub sources: Vec<usize>,
    pub beta_scale: f64,
    /// Generation budget as a multiple of the reference length.
    pub max_length_factor: f64,
    pub stop_tolerance: i64,
    /// Prompts used for diversity; 0 skips it.
    pub diversity_prompts: usize,
    pub diversity_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            holdout: 200,
            utterances: 200,
            prompt_tokens: 2,
            sources: vec![0],
            beta_scale: 1.0,
            max_length_factor: 2.0,
            stop_tolerance: 2,
            diversity_prompts: 0,
            diversity_samples: 3,
            seed: 0,
        }
    }
}

impl KvConfig for EvalConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<bool, ConfigError> {
        match key {
            "holdout" => self.holdout = parse_value(key, v)?,
            "utterances" => self.utterances = parse_value(key, v)?,
            "prompt_tokens" => self.prompt_tokens = parse_value(key, v)?,
            "sources" => self.sources = parse_list(key, v)?,
            "beta_scale" => self.beta_scale = parse_value(key, v)?,
            "max_length_factor" => self.max_length_factor = parse_value(key, v)?,
            "stop_tolerance" => self.stop_tolerance = parse_value(key, v)?,
            "diversity_prompts" => self.diversity_prompts = parse_value(key, v)?,
            "diversity_samples" => self.diversity_samples = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let e = |k: &str, v: String| (k.to_string(), v);
        vec![
            e("holdout", self.holdout.to_string()),
            e("utterances", self.utterances.to_string()),
            e("prompt_tokens", self.prompt_tokens.to_string()),
            e("sources", join_list(&self.sources)),
            e("beta_scale", self.beta_scale.to_string()),
            e("max_length_factor", self.max_length_factor.to_string()),
            e("stop_tolerance", self.stop_tolerance.to_string()),
            e("diversity_prompts", self.diversity_prompts.to_string()),
            e("diversity_samples", self.diversity_samples.to_string()),
            e("seed", self.seed.to_string()),
        ]
    }
}

/// One scored continuation.
#[derive(Clone, Debug, Serialize)]
pub struct ItemResult {
    pub index: usize,
    pub source: usize,
    pub reference: Vec<usize>,
    pub decoded: Vec<usize>,
    pub ter: f64,
    pub mse: f64,
    pub ref_frames: usize,
    pub hyp_frames: usize,
    pub truncated: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    /// Mean token error rate over non-truncated items.
    pub ter: f64,
    /// Mean frame MSE over non-truncated items.
    pub mse: f64,
    pub stop: StopSummary,
    pub diversity: Option<DiversityReport>,
    pub items: Vec<ItemResult>,
}

/// A held-out utterance split into prompt and continuation.
pub struct Continuation {
    pub index: usize,
    pub source: usize,
    pub speaker: usize,
    pub prompt: Prompt,
    pub text: TokenSequence,
    pub reference: MelSequence,
}

fn continuation(corpus: &Corpus, index: usize, source: usize, prompt_tokens: usize) -> Result<Continuation> {
    let u = corpus.rendition(index, source)?;
    let f = corpus.spec().frames_per_token;
    let k = prompt_tokens.min(u.text.len().saturating_sub(1));
    Ok(Continuation {
        index,
        source,
        speaker: u.speaker_id,
        prompt: Prompt {
            text: TokenSequence::new(u.text.ids[..k].to_vec()),
            mel: u.mel.slice(0..k * f),
        },
        text: TokenSequence::new(u.text.ids[k..].to_vec()),
        reference: u.mel.slice(k * f..u.mel.len()),
    })
}

/// Prompt/continuation pairs for the scored utterances.
pub fn continuations(corpus: &Corpus, cfg: &EvalConfig) -> Result<Vec<Continuation>> {
    if cfg.sources.is_empty() {
        return Err(EvalError::Setup("no evaluation sources".into()));
    }
    if let Some(&s) = cfg.sources.iter().find(|&&s| s > corpus.spec().num_teachers) {
        return Err(EvalError::Setup(format!("source {s} beyond the corpus teachers")));
    }
    let (_, held) = corpus.split(cfg.holdout);
    if held.is_empty() {
        return Err(EvalError::Setup("no held-out utterances".into()));
    }
    held.take(cfg.utterances)
        .enumerate()
        .map(|(k, index)| continuation(corpus, index, cfg.sources[k % cfg.sources.len()], cfg.prompt_tokens))
        .collect()
}

fn budget(reference: usize, factor: f64) -> usize {
    ((reference as f64 * factor).ceil() as usize).max(reference + 4)
}

/// Scores continuations and, optionally, repeated-sampling diversity.
pub fn evaluate(model: &Model, corpus: &Corpus, cfg: &EvalConfig) -> Result<EvalReport> {
    let spec = corpus.spec();
    if spec.mel_dim != model.config.mel_dim || spec.vocab_size != model.config.vocab_size {
        return Err(EvalError::Setup("corpus and model disagree on vocab or mel_dim".into()));
    }
    let items = continuations(corpus, cfg)?;
    let mut results = Vec::with_capacity(items.len());
    for (k, c) in items.iter().enumerate() {
        let mut rng = RngStream::new(cfg.seed, 0x5000 + k as u64);
        let max = budget(c.reference.len(), cfg.max_length_factor);
        let g = generate(model, &c.text, Some(&c.prompt), &mut rng, cfg.beta_scale, max)?;
        let hyp = g.generated();
        let decoded = corpus.templates.decode_nearest(&hyp, c.speaker)?;
        results.push(ItemResult {
            index: c.index,
            source: c.source,
            reference: c.text.ids.clone(),
            ter: token_error_rate(&c.text, &decoded)?,
            decoded: decoded.ids,
            mse: frame_mse(&c.reference, &hyp)?.0,
            ref_frames: c.reference.len(),
            hyp_frames: hyp.len(),
            truncated: g.truncated,
        });
    }
    let kept: Vec<&ItemResult> = results.iter().filter(|r| !r.truncated).collect();
    let mean = |f: fn(&ItemResult) -> f64| kept.iter().map(|r| f(r)).sum::<f64>() / kept.len().max(1) as f64;
    let stop = stop_summary(
        &results.iter().map(|r| (r.ref_frames, r.hyp_frames, r.truncated)).collect::<Vec<_>>(),
        cfg.stop_tolerance,
    );
    let diversity = if cfg.diversity_prompts > 0 {
        Some(sample_diversity(model, &items[..cfg.diversity_prompts.min(items.len())], cfg)?)
    } else {
        None
    };
    Ok(EvalReport {
        ter: if kept.is_empty() { 1.0 } else { mean(|r| r.ter) },
        mse: if kept.is_empty() { f64::INFINITY } else { mean(|r| r.mse) },
        stop,
        diversity,
        items: results,
    })
}

/// Generates each continuation `diversity_samples` times and measures the
/// spread within each group.
pub fn sample_diversity(model: &Model, items: &[Continuation], cfg: &EvalConfig) -> Result<DiversityReport> {
    let mut groups = Vec::with_capacity(items.len());
    for (k, c) in items.iter().enumerate() {
        let max = budget(c.reference.len(), cfg.max_length_factor);
        let group = (0..cfg.diversity_samples)
            .map(|s| {
                let mut rng = RngStream::new(cfg.seed, 0x9000 + (k * 64 + s) as u64);
                Ok(generate(model, &c.text, Some(&c.prompt), &mut rng, cfg.beta_scale, max)?.generated())
            })
            .collect::<Result<Vec<_>>>()?;
        groups.push(group);
    }
    Ok(diversity(&groups)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::corpus::CorpusSpec;

    fn setup() -> (Model, Corpus) {
        let spec = CorpusSpec {
            mel_dim: 4,
            num_utterances: 12,
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
        (Model::new(c, 1).unwrap(), Corpus::generate(&spec).unwrap())
    }

    #[test]
    fn continuation_split_covers_utterance() {
        let (_, corpus) = setup();
        let cfg = EvalConfig {
            holdout: 4,
            utterances: 4,
            sources: vec![0, 2],
            ..EvalConfig::default()
        };
        let items = continuations(&corpus, &cfg).unwrap();
        assert_eq!(items.len(), 4);
        assert_eq!(items[1].source, 2);
        for c in &items {
            let u = corpus.rendition(c.index, c.source).unwrap();
            assert_eq!(c.prompt.mel.concat(&c.reference), u.mel);
            assert_eq!([c.prompt.text.ids.clone(), c.text.ids.clone()].concat(), u.text.ids);
            assert_eq!(c.reference.len(), 8 * c.text.len() + 1);
        }
    }

    #[test]
    fn evaluation_is_seeded() {
        let (model, corpus) = setup();
        let cfg = EvalConfig {
            holdout: 3,
            utterances: 3,
            diversity_prompts: 2,
            max_length_factor: 1.0,
            ..EvalConfig::default()
        };
        let a = evaluate(&model, &corpus, &cfg).unwrap();
        let b = evaluate(&model, &corpus, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.items.len(), 3);
        assert!(a.diversity.unwrap().cosine.mean >= 0.0);
        let bad = EvalConfig {
            sources: vec![9],
            ..cfg
        };
        assert!(evaluate(&model, &corpus, &bad).is_err());
    }
}
