//! Effective run configuration: defaults, then the config file, then flags.

use std::collections::BTreeMap;
use std::path::Path;

use belle::backbone::ModelConfig;
use belle::config::{parse_kv, parse_value, render_kv, ConfigError, KvConfig};
use belle::corpus::CorpusSpec;
use belle::evaluate::EvalConfig;
use belle::streaming::{DEFAULT_AUDIO_CHUNK, DEFAULT_TEXT_CHUNK};
use belle::trainer::TrainConfig;

use crate::error::CliError;

/// Parameters of `generate` and `stream-generate`.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    pub beta_scale: f64,
    pub max_frames: usize,
    pub prompt_tokens: usize,
    pub source: usize,
    pub chunk_text: usize,
    pub chunk_audio: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            beta_scale: 1.0,
            max_frames: 400,
            prompt_tokens: 2,
            source: 0,
            chunk_text: DEFAULT_TEXT_CHUNK,
            chunk_audio: DEFAULT_AUDIO_CHUNK,
            seed: 0,
        }
    }
}

impl KvConfig for GenerateConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool, ConfigError> {
        match key {
            "beta_scale" => self.beta_scale = parse_value(key, v)?,
            "max_frames" => self.max_frames = parse_value(key, v)?,
            "prompt_tokens" => self.prompt_tokens = parse_value(key, v)?,
            "source" => self.source = parse_value(key, v)?,
            "chunk_text" => self.chunk_text = parse_value(key, v)?,
            "chunk_audio" => self.chunk_audio = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        [
            ("beta_scale", self.beta_scale.to_string()),
            ("max_frames", self.max_frames.to_string()),
            ("prompt_tokens", self.prompt_tokens.to_string()),
            ("source", self.source.to_string()),
            ("chunk_text", self.chunk_text.to_string()),
            ("chunk_audio", self.chunk_audio.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Every parameter set a command may read, addressed as `namespace.key`.
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub generate: GenerateConfig,
    explicit: Vec<String>,
}

impl RunConfig {
    /// Reads the optional file, then applies `overrides` in order. A
    /// `model.preset` entry resets the model before its other keys apply.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut merged = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                parse_kv(&text)?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in overrides {
            merged.insert(k.clone(), v.clone());
        }
        let mut cfg = Self::default();
        if let Some(name) = merged.remove("model.preset") {
            cfg.model = ModelConfig::preset(&name).ok_or_else(|| {
                CliError::from(ConfigError::Value {
                    key: "model.preset".into(),
                    value: name.clone(),
                    reason: "expected desk or paper".into(),
                })
            })?;
            cfg.explicit.push("model.preset".into());
        }
        for (k, v) in &merged {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (ns, field) = key.split_once('.').ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
        let known = match ns {
            "model" => self.model.set(field, value)?,
            "corpus" => self.corpus.set(field, value)?,
            "train" => self.train.set(field, value)?,
            "eval" => self.eval.set(field, value)?,
            "generate" => self.generate.set(field, value)?,
            _ => false,
        };
        if !known {
            return Err(ConfigError::UnknownKey(key.into()));
        }
        self.explicit.push(key.into());
        Ok(())
    }

    /// Whether the file or a flag gave `key` a value.
    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.iter().any(|k| k == key)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let spaced = |ns: &str, items: Vec<(String, String)>| {
            items.into_iter().map(move |(k, v)| (format!("{ns}.{k}"), v)).collect::<Vec<_>>()
        };
        [
            spaced("model", self.model.entries()),
            spaced("corpus", self.corpus.entries()),
            spaced("train", self.train.entries()),
            spaced("eval", self.eval.entries()),
            spaced("generate", self.generate.entries()),
        ]
        .concat()
    }

    pub fn render(&self) -> String {
        render_kv(&self.entries())
    }

    pub fn as_map(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().collect()
    }
}

/// Text listing every key with its default, shown by `--help`.
pub fn defaults_help() -> String {
    let mut out = String::from("Config keys (file entries and --set overrides) with their defaults:\n");
    for (k, v) in RunConfig::default().entries() {
        out.push_str(&format!("  {k} = {v}\n"));
    }
    out.push_str("Setting model.preset (desk or paper) first resets every model.* key to that preset.\n");
    out.push_str("\nExit codes: 0 ok, 1 usage or invalid configuration, 2 data error, 3 numerical failure.");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# run\ntrain.steps = 10\nmodel.preset = paper\nmodel.hidden_dim = 32\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &[("train.steps".into(), "20".into())]).unwrap();
        assert_eq!(cfg.train.steps, 20);
        assert_eq!(cfg.model.hidden_dim, 32);
        assert_eq!(cfg.model.preset, "paper");
        assert!(cfg.is_explicit("train.steps"));
        assert!(!cfg.is_explicit("train.batch_size"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for key in ["train.nope", "nope.steps", "steps"] {
            let err = RunConfig::load(None, &[(key.into(), "1".into())]).unwrap_err();
            assert!(matches!(err, CliError::Usage(_)), "{key}");
        }
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("eval.sources", "0,1,2").unwrap();
        cfg.set("generate.beta_scale", "2").unwrap();
        let back = RunConfig::load(None, &parse_kv(&cfg.render()).unwrap().into_iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(back.as_map(), cfg.as_map());
        assert!(defaults_help().contains("train.lambda_flux = 0.5"));
    }
}
