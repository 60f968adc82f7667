use std::sync::Arc;

use super::{BackboneError, HeadKind, KvCache, MelSequence, Model, ModelConfig, Net, Result, TokenSequence};
use crate::nig::constrain_raw;
use crate::numerics::special::sigmoid;
use crate::numerics::{AttentionMask, Eager, Tensor};
use crate::sampler::{sample_gaussian_baseline, sample_hierarchical, GaussianHead, RngStream};

/// Context the model continues from: its text precedes the target text and
/// its frames are fed as already-generated audio.
#[derive(Clone, Debug)]
pub struct Prompt {
    pub text: TokenSequence,
    pub mel: MelSequence,
}

/// Output of [`generate`].
#[derive(Clone, Debug)]
pub struct Generated {
    /// Postnet output over prompt and generated frames; the prompt region
    /// holds the prompt frames unchanged.
    pub mel: MelSequence,
    /// Denoiser output before the postnet.
    pub y1: MelSequence,
    pub prompt_frames: usize,
    /// Stop probability of every generated frame.
    pub stop_scores: Vec<f64>,
    /// Generation hit `max_frames` (or the position table) without stopping.
    pub truncated: bool,
}

impl Generated {
    /// The newly generated frames only.
    pub fn generated(&self) -> MelSequence {
        self.mel.slice(self.prompt_frames..self.mel.len())
    }
}

/// Draws the frame fed to the denoiser from one row of raw head outputs.
pub fn sample_frame(cfg: &ModelConfig, raw: &[f64], rng: &mut RngStream, beta_scale: f64) -> Result<Vec<f64>> {
    let d = cfg.mel_dim;
    match cfg.head {
        HeadKind::Evidential => {
            let p = constrain_raw(raw)?;
            if cfg.sampling {
                Ok(sample_hierarchical(&p, rng, beta_scale)?)
            } else {
                Ok(p.gamma)
            }
        }
        HeadKind::Gaussian => {
            if !cfg.sampling {
                return Ok(raw[..d].to_vec());
            }
            let shift = beta_scale.ln();
            let head = GaussianHead {
                mu: raw[..d].to_vec(),
                log_sigma2: raw[d..2 * d].iter().map(|v| v + shift).collect(),
            };
            Ok(sample_gaussian_baseline(&head, rng))
        }
    }
}

enum Pending {
    Start,
    Frame(Vec<f64>),
}

/// Incremental KV-cached decoder state. Text and audio are appended in
/// interleaved order; each audio input is held until the next frame is
/// requested so later text can be inserted before it.
pub struct Generator<'m> {
    net: Net<'m, Eager>,
    cache: KvCache<Tensor>,
    prenet_rng: RngStream,
    sample_rng: RngStream,
    beta_scale: f64,
    pending: Pending,
    y1: Vec<f64>,
    stop_scores: Vec<f64>,
}

impl<'m> Generator<'m> {
    pub fn new(model: &'m Model, rng: &mut RngStream, beta_scale: f64) -> Result<Self> {
        if !(beta_scale > 0.0 && beta_scale.is_finite()) {
            return Err(BackboneError::Invalid(format!("beta_scale must be positive, got {beta_scale}")));
        }
        let prenet_rng = RngStream::new(rng.next_u64(), 1);
        let sample_rng = RngStream::new(rng.next_u64(), 2);
        Ok(Self {
            net: Net::bind(&mut Eager, model),
            cache: KvCache::new(model.config.num_blocks),
            prenet_rng,
            sample_rng,
            beta_scale,
            pending: Pending::Start,
            y1: Vec::new(),
            stop_scores: Vec::new(),
        })
    }

    fn cfg(&self) -> &'m ModelConfig {
        &self.net.model.config
    }

    fn run(&mut self, x: &Tensor) -> Result<Tensor> {
        let mask = Arc::new(AttentionMask::causal_with_past(x.rows(), self.cache.len()));
        self.net.decoder(&mut Eager, x, &mask, Some(&mut self.cache), None)
    }

    /// Appends text-table ids at text positions `first_pos..`.
    pub fn feed_text(&mut self, ids: &[usize], first_pos: usize) -> Result<()> {
        if ids.is_empty() {
            return Ok(());
        }
        let x = self.net.embed_text(&mut Eager, ids, first_pos)?;
        self.run(&x)?;
        Ok(())
    }

    /// Frames produced so far (prompt included).
    pub fn frames(&self) -> usize {
        self.y1.len() / self.cfg().mel_dim
    }

    pub fn y1(&self) -> &[f64] {
        &self.y1
    }

    pub fn stop_scores(&self) -> &[f64] {
        &self.stop_scores
    }

    /// Whether the next frame would fall outside the audio position table.
    pub fn out_of_positions(&self) -> bool {
        self.frames() >= self.cfg().max_audio_positions
    }

    fn pending_inputs(&self, frames: &[f64]) -> (bool, Tensor) {
        let d = self.cfg().mel_dim;
        let (with_start, mut data) = match &self.pending {
            Pending::Start => (true, Vec::new()),
            Pending::Frame(f) => (false, f.clone()),
        };
        data.extend_from_slice(frames);
        (with_start, Tensor::new(&[data.len() / d, d], data).expect("whole frames"))
    }

    /// Feeds known frames as if they had been generated.
    pub fn feed_frames(&mut self, mel: &MelSequence) -> Result<()> {
        let d = self.cfg().mel_dim;
        if mel.dim() != d {
            return Err(BackboneError::MelWidth { got: mel.dim(), expected: d });
        }
        if mel.is_empty() {
            return Ok(());
        }
        let n = mel.len();
        let (with_start, inputs) = self.pending_inputs(&mel.data()[..(n - 1) * d]);
        let first = self.frames();
        let x = self
            .net
            .embed_audio(&mut Eager, with_start, Some(&inputs), first, &mut self.prenet_rng)?;
        self.run(&x)?;
        self.pending = Pending::Frame(mel.frame(n - 1).to_vec());
        self.y1.extend_from_slice(mel.data());
        Ok(())
    }

    /// Generates one frame and returns its stop probability.
    pub fn step(&mut self) -> Result<f64> {
        let (with_start, inputs) = self.pending_inputs(&[]);
        let first = self.frames();
        let x = self
            .net
            .embed_audio(&mut Eager, with_start, Some(&inputs), first, &mut self.prenet_rng)?;
        let e = self.run(&x)?;
        let raw = self.net.head(&mut Eager, &e)?;
        let z = sample_frame(self.cfg(), raw.data(), &mut self.sample_rng, self.beta_scale)?;
        let z = Tensor::new(&[1, z.len()], z)?;
        let y1 = self.net.denoise(&mut Eager, &z)?;
        if !y1.all_finite() {
            return Err(BackboneError::NonFinite("generated frame"));
        }
        let stop = sigmoid(self.net.stop_logits(&mut Eager, &e)?.data()[0]);
        self.y1.extend_from_slice(y1.data());
        self.stop_scores.push(stop);
        self.pending = Pending::Frame(y1.into_vec());
        Ok(stop)
    }

    /// Postnet over frames `range` of the accumulated sequence.
    pub fn refine(&self, range: std::ops::Range<usize>) -> Result<Tensor> {
        let d = self.cfg().mel_dim;
        let y1 = Tensor::new(&[range.len(), d], self.y1[range.start * d..range.end * d].to_vec())?;
        self.net.postnet(&mut Eager, &y1)
    }
}

/// Autoregressive generation: text (after the prompt text) is consumed up
/// front, then frames are produced until the stop probability exceeds the
/// threshold or `max_frames` new frames exist.
pub fn generate(
    model: &Model,
    text: &TokenSequence,
    prompt: Option<&Prompt>,
    rng: &mut RngStream,
    beta_scale: f64,
    max_frames: usize,
) -> Result<Generated> {
    let cfg = &model.config;
    if max_frames == 0 {
        return Err(BackboneError::Invalid("max_frames must be at least 1".into()));
    }
    let mut tokens = prompt.map(|p| p.text.ids.clone()).unwrap_or_default();
    tokens.extend_from_slice(&text.ids);
    let tokens = TokenSequence::new(tokens);
    tokens.check(cfg.vocab_size)?;

    let mut g = Generator::new(model, rng, beta_scale)?;
    g.feed_text(&tokens.wrapped(cfg.vocab_size), 0)?;
    let prompt_frames = prompt.map_or(0, |p| p.mel.len());
    if let Some(p) = prompt {
        g.feed_frames(&p.mel)?;
    }
    let mut truncated = true;
    for _ in 0..max_frames {
        if g.out_of_positions() {
            break;
        }
        if g.step()? > cfg.stop_threshold {
            truncated = false;
            break;
        }
    }
    finish(&g, prompt, prompt_frames, truncated)
}

fn finish(g: &Generator<'_>, prompt: Option<&Prompt>, prompt_frames: usize, truncated: bool) -> Result<Generated> {
    let cfg = g.cfg();
    let d = cfg.mel_dim;
    let total = g.frames();
    let mut y2 = g.refine(0..total)?.into_vec();
    if let Some(p) = prompt {
        y2[..prompt_frames * d].copy_from_slice(p.mel.data());
    }
    Ok(Generated {
        mel: MelSequence::new(d, y2, cfg.frame_rate)?,
        y1: MelSequence::new(d, g.y1().to_vec(), cfg.frame_rate)?,
        prompt_frames,
        stop_scores: g.stop_scores().to_vec(),
        truncated,
    })
}
