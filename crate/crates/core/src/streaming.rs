//! Chunked streaming: text and audio split into `M` interleaved chunks
//! `[x⁽¹⁾ y⁽¹⁾ x⁽²⁾ y⁽²⁾ …]`, with audio emitted chunk by chunk as text
//! arrives.

use std::ops::Range;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::backbone::{BackboneError, ChunkSpan, Generator, MelSequence, Model};
use crate::numerics::AttentionMask;
use crate::sampler::RngStream;
use crate::trainer::TrainingExample;

pub const DEFAULT_TEXT_CHUNK: usize = 20;
pub const DEFAULT_AUDIO_CHUNK: usize = 50;
pub const DEFAULT_MIN_RATIO: f64 = 2.5;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("chunk sizes must be positive")]
    ChunkSize,
    #[error("text must contain at least one token")]
    EmptyText,
    #[error("{chunks} chunks need more than {required} audio frames, got {got}")]
    Infeasible { chunks: usize, required: usize, got: usize },
    #[error("stream ended after {0} chunks without a final chunk")]
    Unterminated(usize),
    #[error("chunk {0} arrived after the final chunk")]
    AfterFinal(usize),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

pub type Result<T> = std::result::Result<T, StreamError>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkPlan {
    pub text_chunks: Vec<Range<usize>>,
    pub audio_chunks: Vec<Range<usize>>,
}

impl ChunkPlan {
    pub fn len(&self) -> usize {
        self.text_chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text_chunks.is_empty()
    }

    pub fn spans(&self) -> Vec<ChunkSpan> {
        self.text_chunks
            .iter()
            .zip(&self.audio_chunks)
            .map(|(t, a)| ChunkSpan {
                text: t.clone(),
                audio: a.clone(),
            })
            .collect()
    }

    /// Role of every position of the interleaved sequence. BOS opens the
    /// first text chunk and EOS closes the last.
    pub fn roles(&self) -> Vec<Role> {
        let m = self.len();
        let mut out = Vec::new();
        for (k, (t, a)) in self.text_chunks.iter().zip(&self.audio_chunks).enumerate() {
            let extra = usize::from(k == 0) + usize::from(k + 1 == m);
            out.extend(std::iter::repeat_n(Role::Text(k), t.len() + extra));
            out.extend(std::iter::repeat_n(Role::Audio(k), a.len()));
        }
        out
    }
}

/// Which chunk a sequence position belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Text(usize),
    Audio(usize),
}

/// Splits text into chunks of `s_text` tokens and audio into `M − 1` chunks
/// of `s_audio` frames plus a remainder of at least one frame.
pub fn partition(text_len: usize, audio_len: usize, s_text: usize, s_audio: usize) -> Result<ChunkPlan> {
    if s_text == 0 || s_audio == 0 {
        return Err(StreamError::ChunkSize);
    }
    if text_len == 0 {
        return Err(StreamError::EmptyText);
    }
    let m = text_len.div_ceil(s_text);
    let required = (m - 1) * s_audio;
    if audio_len <= required {
        return Err(StreamError::Infeasible {
            chunks: m,
            required,
            got: audio_len,
        });
    }
    let text_chunks = (0..m).map(|k| k * s_text..((k + 1) * s_text).min(text_len)).collect();
    let audio_chunks = (0..m)
        .map(|k| if k + 1 == m { k * s_audio..audio_len } else { k * s_audio..(k + 1) * s_audio })
        .collect();
    Ok(ChunkPlan {
        text_chunks,
        audio_chunks,
    })
}

/// Keeps lengths whose audio-to-text ratio is at least `min_ratio`.
pub fn ratio_keep(text_len: usize, audio_len: usize, min_ratio: f64) -> bool {
    text_len > 0 && audio_len as f64 >= min_ratio * text_len as f64
}

pub fn ratio_filter(example: &TrainingExample, min_ratio: f64) -> bool {
    ratio_keep(example.text.len(), example.target.len(), min_ratio)
}

/// Attention pattern over the interleaved sequence: position `i` sees `j`
/// iff `j ≤ i`.
pub fn build_chunk_mask(plan: &ChunkPlan) -> AttentionMask {
    let n = plan.roles().len();
    AttentionMask::from_fn(n, n, |i, j| j <= i)
}

/// One piece of text delivered to [`stream_generate`].
#[derive(Clone, Debug)]
pub struct TextChunk {
    pub tokens: Vec<usize>,
    pub is_final: bool,
}

/// Splits `tokens` into `s_text`-sized chunks, the last flagged final.
pub fn text_chunks(tokens: &[usize], s_text: usize) -> Vec<TextChunk> {
    let n = tokens.len().div_ceil(s_text.max(1)).max(1);
    (0..n)
        .map(|k| TextChunk {
            tokens: tokens[(k * s_text).min(tokens.len())..((k + 1) * s_text).min(tokens.len())].to_vec(),
            is_final: k + 1 == n,
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct EmittedChunk {
    pub index: usize,
    #[serde(skip)]
    pub frames: MelSequence,
    pub num_frames: usize,
    pub is_final: bool,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug)]
pub struct StreamOutput {
    pub chunks: Vec<EmittedChunk>,
    pub mel: MelSequence,
    pub y1: MelSequence,
    pub truncated: bool,
    pub first_packet_ms: f64,
    pub total_ms: f64,
}

impl StreamOutput {
    /// Compute time over nominal audio duration.
    pub fn real_time_factor(&self) -> f64 {
        self.total_ms / 1000.0 / self.mel.duration().max(f64::MIN_POSITIVE)
    }
}

/// Generates audio chunk by chunk as text chunks arrive. Every non-final
/// chunk yields exactly `s_audio` frames; the final chunk runs until the stop
/// probability exceeds the threshold or `max_final_frames` frames. The
/// postnet is applied to each chunk's frames on their own.
pub fn stream_generate<I, F>(
    model: &Model,
    chunks: I,
    rng: &mut RngStream,
    beta_scale: f64,
    s_audio: usize,
    max_final_frames: usize,
    mut on_chunk: F,
) -> Result<StreamOutput>
where
    I: IntoIterator<Item = TextChunk>,
    F: FnMut(&EmittedChunk),
{
    if s_audio == 0 || max_final_frames == 0 {
        return Err(StreamError::ChunkSize);
    }
    let cfg = &model.config;
    let start = Instant::now();
    let mut g = Generator::new(model, rng, beta_scale)?;
    let mut emitted: Vec<EmittedChunk> = Vec::new();
    let mut refined = Vec::new();
    let mut tokens_seen = 0;
    let mut truncated = false;
    let mut finished = false;
    for (index, chunk) in chunks.into_iter().enumerate() {
        if finished {
            return Err(StreamError::AfterFinal(index));
        }
        if let Some(&id) = chunk.tokens.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(BackboneError::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            }
            .into());
        }
        let mut ids = Vec::with_capacity(chunk.tokens.len() + 2);
        if index == 0 {
            ids.push(cfg.bos());
        }
        ids.extend_from_slice(&chunk.tokens);
        if chunk.is_final {
            ids.push(cfg.eos());
        }
        let first_pos = if index == 0 { 0 } else { tokens_seen + 1 };
        g.feed_text(&ids, first_pos)?;
        tokens_seen += chunk.tokens.len();

        let begin = g.frames();
        if chunk.is_final {
            truncated = true;
            for _ in 0..max_final_frames {
                if g.out_of_positions() {
                    break;
                }
                if g.step()? > cfg.stop_threshold {
                    truncated = false;
                    break;
                }
            }
            finished = true;
        } else {
            for _ in 0..s_audio {
                if g.out_of_positions() {
                    return Err(BackboneError::TooLong {
                        what: "audio",
                        needed: g.frames() + 1,
                        available: cfg.max_audio_positions,
                    }
                    .into());
                }
                g.step()?;
            }
        }
        let end = g.frames();
        let y2 = g.refine(begin..end)?;
        refined.extend_from_slice(y2.data());
        let frames = MelSequence::from_tensor(y2, cfg.frame_rate)?;
        let out = EmittedChunk {
            index,
            num_frames: frames.len(),
            frames,
            is_final: chunk.is_final,
            elapsed_ms: start.elapsed().as_secs_f64() * 1000.0,
        };
        on_chunk(&out);
        emitted.push(out);
    }
    if !finished {
        return Err(StreamError::Unterminated(emitted.len()));
    }
    let d = cfg.mel_dim;
    Ok(StreamOutput {
        first_packet_ms: emitted[0].elapsed_ms,
        total_ms: start.elapsed().as_secs_f64() * 1000.0,
        mel: MelSequence::new(d, refined, cfg.frame_rate)?,
        y1: MelSequence::new(d, g.y1().to_vec(), cfg.frame_rate)?,
        chunks: emitted,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{generate, ModelConfig, TokenSequence};

    fn model(seed: u64) -> Model {
        let mut c = ModelConfig::desk();
        c.hidden_dim = 32;
        c.ffn_dim = 64;
        c.num_heads = 2;
        c.mel_dim = 4;
        c.prenet_dims = vec![8, 8];
        c.denoiser_hidden = 8;
        c.postnet_channels = 4;
        Model::new(c, seed).unwrap()
    }

    fn sizes(r: &[Range<usize>]) -> Vec<usize> {
        r.iter().map(|s| s.len()).collect()
    }

    #[test]
    fn partition_examples() {
        let p = partition(45, 230, 20, 50).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(sizes(&p.text_chunks), vec![20, 20, 5]);
        assert_eq!(sizes(&p.audio_chunks), vec![50, 50, 130]);
        match partition(45, 100, 20, 50) {
            Err(StreamError::Infeasible { required: 100, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(partition(45, 101, 20, 50).is_ok());
        assert!(partition(0, 10, 20, 50).is_err());
    }

    #[test]
    fn ratio_filter_boundary_and_feasibility() {
        assert!(ratio_keep(40, 100, 2.5));
        assert!(!ratio_keep(40, 99, 2.5));
        let mut r = RngStream::new(1, 0);
        for _ in 0..10_000 {
            let t = 1 + r.below(200);
            let a = 1 + r.below(600);
            if ratio_keep(t, a, 50.0 / 20.0) {
                let p = partition(t, a, 20, 50).unwrap();
                assert_eq!(p.text_chunks.last().unwrap().end, t);
                assert_eq!(p.audio_chunks.last().unwrap().end, a);
                assert!(!p.audio_chunks.last().unwrap().is_empty());
            }
        }
    }

    #[test]
    fn mask_respects_interleaving() {
        let p = partition(45, 230, 20, 50).unwrap();
        let mask = build_chunk_mask(&p);
        assert!(mask.is_lower_triangular());
        let roles = p.roles();
        assert_eq!(roles.len(), 45 + 2 + 230);
        for (i, ri) in roles.iter().enumerate() {
            for (j, rj) in roles.iter().enumerate() {
                if let (Role::Audio(0), Role::Text(1)) = (ri, rj) {
                    assert!(!mask.allowed(i, j));
                }
                if let (Role::Audio(1), Role::Text(0)) = (ri, rj) {
                    assert!(mask.allowed(i, j));
                }
            }
        }
    }

    #[test]
    fn single_chunk_matches_generate() {
        let m = model(1);
        let text = vec![1, 2, 3, 4];
        let a = stream_generate(&m, text_chunks(&text, 20), &mut RngStream::new(4, 0), 1.0, 50, 30, |_| {}).unwrap();
        let b = generate(&m, &TokenSequence::new(text), None, &mut RngStream::new(4, 0), 1.0, 30).unwrap();
        assert_eq!(a.mel, b.mel);
        assert_eq!(a.truncated, b.truncated);
        assert_eq!(a.chunks.len(), 1);
    }

    #[test]
    fn chunks_emit_fixed_sizes_and_reassemble() {
        let m = model(2);
        let text: Vec<usize> = (0..45).map(|i| i % 16).collect();
        let mut seen = Vec::new();
        let out = stream_generate(&m, text_chunks(&text, 20), &mut RngStream::new(5, 0), 1.0, 50, 12, |c| {
            seen.push((c.index, c.num_frames, c.is_final))
        })
        .unwrap();
        assert_eq!(seen.len(), 3);
        assert_eq!(seen[0], (0, 50, false));
        assert_eq!(seen[1], (1, 50, false));
        assert!(seen[2].2);
        let last = out.chunks[2].num_frames;
        assert_eq!(out.mel.len(), 2 * 50 + last);
        assert!(out.first_packet_ms <= out.total_ms);
    }

    #[test]
    fn earlier_chunks_ignore_later_text() {
        let m = model(3);
        let a: Vec<usize> = (0..45).map(|i| i % 16).collect();
        let mut b = a.clone();
        for t in &mut b[40..] {
            *t = (*t + 5) % 16;
        }
        let run = |text: &[usize]| {
            stream_generate(&m, text_chunks(text, 20), &mut RngStream::new(6, 0), 1.0, 50, 10, |_| {}).unwrap()
        };
        let (x, y) = (run(&a), run(&b));
        assert_eq!(x.chunks[0].frames, y.chunks[0].frames);
        assert_eq!(x.chunks[1].frames, y.chunks[1].frames);
        assert_ne!(x.chunks[2].frames.data()[..4], y.chunks[2].frames.data()[..4]);
    }

    #[test]
    fn first_chunk_is_emitted_before_later_text_is_read() {
        let m = model(4);
        let log = std::cell::RefCell::new(Vec::new());
        let text: Vec<usize> = (0..30).map(|i| i % 16).collect();
        let chunks = text_chunks(&text, 10).into_iter().map(|c| {
            log.borrow_mut().push(format!("read {}", c.tokens.len()));
            c
        });
        stream_generate(&m, chunks, &mut RngStream::new(1, 0), 1.0, 8, 5, |c| {
            log.borrow_mut().push(format!("emit {}", c.index))
        })
        .unwrap();
        let log = log.into_inner();
        assert_eq!(log[..3], ["read 10", "emit 0", "read 10"]);
    }

    #[test]
    fn unterminated_stream_is_an_error() {
        let m = model(5);
        let chunks = vec![TextChunk {
            tokens: vec![1, 2],
            is_final: false,
        }];
        assert!(matches!(
            stream_generate(&m, chunks, &mut RngStream::new(1, 0), 1.0, 4, 4, |_| {}),
            Err(StreamError::Unterminated(1))
        ));
    }
}
