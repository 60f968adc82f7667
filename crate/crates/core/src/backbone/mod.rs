//! The autoregressive frame generator: text embedding, mel prenet, causal
//! transformer decoder, distribution head, denoiser, postnet and stop head,
//! plus the generation loop.

mod config;
mod generate;
mod net;
mod params;

use std::ops::Range;
use std::path::Path;

use thiserror::Error;

pub use config::{HeadKind, ModelConfig};
pub use generate::{generate, sample_frame, Generated, Generator, Prompt};
pub use net::{whole, KvCache, Net};
pub use params::{
    decode_checkpoint, encode_checkpoint, init_params, layout_from_store, param_shapes, read_checkpoint,
    write_checkpoint, Block, Layout, Linear, ParamId, ParamStore,
};

use crate::config::ConfigError;
use crate::nig::NigError;
use crate::numerics::{NumericsError, Tensor};
use crate::sampler::SamplerError;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("{what} needs {needed} positions but the table has {available}")]
    TooLong {
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("mel frames have width {got}, model expects {expected}")]
    MelWidth { got: usize, expected: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Nig(#[from] NigError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BackboneError>;

/// Content token ids in `[0, V)`. BOS and EOS are added by [`wrapped`].
///
/// [`wrapped`]: TokenSequence::wrapped
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn check(&self, vocab: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id >= vocab) {
            Some(&id) => Err(BackboneError::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    /// `[BOS, ids.., EOS]` with BOS = V and EOS = V + 1.
    pub fn wrapped(&self, vocab: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.ids.len() + 2);
        out.push(vocab);
        out.extend_from_slice(&self.ids);
        out.push(vocab + 1);
        out
    }
}

/// A `T × D` frame sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSequence {
    frames: Tensor,
    pub frame_rate: f64,
}

impl MelSequence {
    pub fn new(dim: usize, data: Vec<f64>, frame_rate: f64) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(BackboneError::Invalid(format!(
                "{} values do not form frames of width {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(BackboneError::NonFinite("mel frames"));
        }
        let frames = Tensor::new(&[data.len() / dim, dim], data)?;
        Ok(Self { frames, frame_rate })
    }

    pub fn empty(dim: usize, frame_rate: f64) -> Self {
        Self {
            frames: Tensor::zeros(&[0, dim]),
            frame_rate,
        }
    }

    pub fn from_tensor(frames: Tensor, frame_rate: f64) -> Result<Self> {
        if frames.shape().len() != 2 {
            return Err(BackboneError::Invalid(format!("frames must be T×D, got {:?}", frames.shape())));
        }
        Self::new(frames.shape()[1], frames.into_vec(), frame_rate)
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let d = self.dim();
        &self.frames.data()[t * d..(t + 1) * d]
    }

    pub fn data(&self) -> &[f64] {
        self.frames.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }

    /// Frames `range` as a new sequence.
    pub fn slice(&self, range: Range<usize>) -> MelSequence {
        let d = self.dim();
        MelSequence {
            frames: Tensor::new(&[range.len(), d], self.frames.data()[range.start * d..range.end * d].to_vec())
                .expect("in-range slice"),
            frame_rate: self.frame_rate,
        }
    }

    pub fn concat(&self, other: &MelSequence) -> MelSequence {
        let mut data = self.data().to_vec();
        data.extend_from_slice(other.data());
        MelSequence {
            frames: Tensor::new(&[self.len() + other.len(), self.dim()], data).expect("same width"),
            frame_rate: self.frame_rate,
        }
    }

    /// Duration in seconds at the nominal frame rate.
    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.frame_rate
    }
}

/// One chunk of the interleaved training/inference layout: a span of text
/// tokens followed by a span of audio frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkSpan {
    pub text: Range<usize>,
    pub audio: Range<usize>,
}

/// A model: configuration, parameters and where each component lives.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = init_params(&config, seed);
        Ok(Self { config, params, layout })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = layout_from_store(&config, &params)?;
        Ok(Self { config, params, layout })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, params) = read_checkpoint(path)?;
        Self::from_parts(config, params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_checkpoint(&self.config, &self.params)
    }
}
