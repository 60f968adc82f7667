use std::fmt;
use std::str::FromStr;

use crate::config::{join_list, parse_list, parse_value, ConfigError, KvConfig};

/// Which distribution the frame head parameterizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Normal-Inverse-Gamma head with hierarchical sampling.
    Evidential,
    /// Diagonal Gaussian head with the reparameterization trick.
    Gaussian,
}

impl HeadKind {
    /// Raw output columns per mel dimension.
    pub fn width_per_dim(self) -> usize {
        match self {
            HeadKind::Evidential => 4,
            HeadKind::Gaussian => 2,
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Evidential => "evidential",
            HeadKind::Gaussian => "gaussian",
        })
    }
}

impl FromStr for HeadKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "evidential" => Ok(HeadKind::Evidential),
            "gaussian" => Ok(HeadKind::Gaussian),
            other => Err(format!("expected evidential or gaussian, got {other}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: String,
    /// Content vocabulary; BOS and EOS are appended as ids `V` and `V + 1`.
    pub vocab_size: usize,
    pub mel_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Hidden widths of the prenet; a final projection maps to `hidden_dim`.
    pub prenet_dims: Vec<usize>,
    pub prenet_dropout: f64,
    pub denoiser_hidden: usize,
    pub denoiser_layers: usize,
    pub postnet_blocks: usize,
    pub postnet_kernel: usize,
    pub postnet_channels: usize,
    pub stop_threshold: f64,
    pub max_text_positions: usize,
    pub max_audio_positions: usize,
    /// Text-position units per audio frame used to initialise the audio
    /// position table. Only affects initialisation.
    pub audio_position_rate: f64,
    pub head: HeadKind,
    /// When false the frame fed to the denoiser is the predicted location
    /// itself, with no sampling.
    pub sampling: bool,
    /// Nominal frames per second, for real-time-factor reporting.
    pub frame_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small model that trains on one CPU core.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            vocab_size: 16,
            mel_dim: 16,
            num_blocks: 2,
            num_heads: 4,
            hidden_dim: 128,
            ffn_dim: 512,
            dropout: 0.1,
            prenet_dims: vec![64, 64],
            prenet_dropout: 0.5,
            denoiser_hidden: 64,
            denoiser_layers: 3,
            postnet_blocks: 5,
            postnet_kernel: 5,
            postnet_channels: 32,
            stop_threshold: 0.5,
            max_text_positions: 128,
            max_audio_positions: 512,
            audio_position_rate: 0.125,
            head: HeadKind::Evidential,
            sampling: true,
            frame_rate: 62.5,
        }
    }

    /// Full-size architecture.
    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            vocab_size: 256,
            mel_dim: 80,
            num_blocks: 12,
            num_heads: 16,
            hidden_dim: 1024,
            ffn_dim: 4096,
            dropout: 0.1,
            prenet_dims: vec![256, 256],
            prenet_dropout: 0.5,
            denoiser_hidden: 1024,
            denoiser_layers: 3,
            postnet_blocks: 5,
            postnet_kernel: 5,
            postnet_channels: 256,
            stop_threshold: 0.5,
            max_text_positions: 1024,
            max_audio_positions: 4096,
            audio_position_rate: 0.3,
            head: HeadKind::Evidential,
            sampling: true,
            frame_rate: 62.5,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    /// Text table rows: content tokens plus BOS and EOS.
    pub fn text_table_rows(&self) -> usize {
        self.vocab_size + 2
    }

    pub fn bos(&self) -> usize {
        self.vocab_size
    }

    pub fn eos(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn head_width(&self) -> usize {
        self.mel_dim * self.head.width_per_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Frames on each side that can influence one postnet output frame.
    pub fn postnet_receptive_field(&self) -> usize {
        1 + self.postnet_blocks * (self.postnet_kernel - 1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, value: String, reason: &str| ConfigError::Value {
            key: key.into(),
            value,
            reason: reason.into(),
        };
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(bad("num_heads", self.num_heads.to_string(), "must divide hidden_dim"));
        }
        if self.mel_dim == 0 || self.vocab_size == 0 || self.ffn_dim == 0 {
            return Err(bad("mel_dim", self.mel_dim.to_string(), "dimensions must be positive"));
        }
        for (key, p) in [("dropout", self.dropout), ("prenet_dropout", self.prenet_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(bad(key, p.to_string(), "must lie in [0, 1)"));
            }
        }
        if !(self.stop_threshold > 0.0 && self.stop_threshold < 1.0) {
            return Err(bad("stop_threshold", self.stop_threshold.to_string(), "must lie in (0, 1)"));
        }
        if self.postnet_kernel % 2 == 0 || self.postnet_blocks < 2 {
            return Err(bad(
                "postnet_kernel",
                self.postnet_kernel.to_string(),
                "kernel must be odd and blocks at least 2",
            ));
        }
        if self.denoiser_layers < 2 {
            return Err(bad("denoiser_layers", self.denoiser_layers.to_string(), "need at least 2 layers"));
        }
        if self.prenet_dims.is_empty() {
            return Err(bad("prenet_dims", String::new(), "need at least one hidden layer"));
        }
        if self.max_text_positions < 3 || self.max_audio_positions < 2 {
            return Err(bad("max_text_positions", self.max_text_positions.to_string(), "too small"));
        }
        Ok(())
    }
}

impl KvConfig for ModelConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool, ConfigError> {
        match key {
            "preset" => self.preset = v.to_string(),
            "vocab_size" => self.vocab_size = parse_value(key, v)?,
            "mel_dim" => self.mel_dim = parse_value(key, v)?,
            "num_blocks" => self.num_blocks = parse_value(key, v)?,
            "num_heads" => self.num_heads = parse_value(key, v)?,
            "hidden_dim" => self.hidden_dim = parse_value(key, v)?,
            "ffn_dim" => self.ffn_dim = parse_value(key, v)?,
            "dropout" => self.dropout = parse_value(key, v)?,
            "prenet_dims" => self.prenet_dims = parse_list(key, v)?,
            "prenet_dropout" => self.prenet_dropout = parse_value(key, v)?,
            "denoiser_hidden" => self.denoiser_hidden = parse_value(key, v)?,
            "denoiser_layers" => self.denoiser_layers = parse_value(key, v)?,
            "postnet_blocks" => self.postnet_blocks = parse_value(key, v)?,
            "postnet_kernel" => self.postnet_kernel = parse_value(key, v)?,
            "postnet_channels" => self.postnet_channels = parse_value(key, v)?,
            "stop_threshold" => self.stop_threshold = parse_value(key, v)?,
            "max_text_positions" => self.max_text_positions = parse_value(key, v)?,
            "max_audio_positions" => self.max_audio_positions = parse_value(key, v)?,
            "audio_position_rate" => self.audio_position_rate = parse_value(key, v)?,
            "head" => self.head = parse_value(key, v)?,
            "sampling" => self.sampling = parse_value(key, v)?,
            "frame_rate" => self.frame_rate = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        [
            ("preset", self.preset.clone()),
            ("vocab_size", self.vocab_size.to_string()),
            ("mel_dim", self.mel_dim.to_string()),
            ("num_blocks", self.num_blocks.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("dropout", self.dropout.to_string()),
            ("prenet_dims", join_list(&self.prenet_dims)),
            ("prenet_dropout", self.prenet_dropout.to_string()),
            ("denoiser_hidden", self.denoiser_hidden.to_string()),
            ("denoiser_layers", self.denoiser_layers.to_string()),
            ("postnet_blocks", self.postnet_blocks.to_string()),
            ("postnet_kernel", self.postnet_kernel.to_string()),
            ("postnet_channels", self.postnet_channels.to_string()),
            ("stop_threshold", self.stop_threshold.to_string()),
            ("max_text_positions", self.max_text_positions.to_string()),
            ("max_audio_positions", self.max_audio_positions.to_string()),
            ("audio_position_rate", self.audio_position_rate.to_string()),
            ("head", self.head.to_string()),
            ("sampling", self.sampling.to_string()),
            ("frame_rate", self.frame_rate.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{parse_kv, render_kv};

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        assert_eq!(ModelConfig::paper().postnet_receptive_field(), 21);
    }

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::desk();
        c.head = HeadKind::Gaussian;
        c.sampling = false;
        c.prenet_dims = vec![32, 48];
        let text = render_kv(&c.entries());
        let mut back = ModelConfig::paper();
        back.apply_all(&parse_kv(&text).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut c = ModelConfig::desk();
        let m = parse_kv("hidden=3").unwrap();
        assert_eq!(c.apply_all(&m), Err(ConfigError::UnknownKey("hidden".into())));
    }

    #[test]
    fn heads_must_divide_hidden() {
        let mut c = ModelConfig::desk();
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }
}
