use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{BackboneError, HeadKind, ModelConfig};
use crate::config::{parse_kv, render_kv, KvConfig};
use crate::numerics::Tensor;
use crate::sampler::RngStream;

/// Index of a named tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        let id = self.tensors.len();
        let previous = self.by_name.insert(name.clone(), id);
        assert!(previous.is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: (ParamId, ParamId),
    pub qkv: Linear,
    pub out: Linear,
    pub ln2: (ParamId, ParamId),
    pub ff1: Linear,
    pub ff2: Linear,
}

/// Where every network component lives in the store.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub text_embed: ParamId,
    pub text_pos: ParamId,
    pub audio_pos: ParamId,
    pub start_of_audio: ParamId,
    pub prenet: Vec<Linear>,
    pub blocks: Vec<Block>,
    pub final_ln: (ParamId, ParamId),
    pub head: Linear,
    pub denoiser: Vec<Linear>,
    /// Convolution weights are `(kernel·c_in) × c_out`.
    pub postnet: Vec<Linear>,
    pub stop: Linear,
}

/// Sinusoidal table evaluated at `rate · position`.
fn sinusoid_table(rows: usize, dim: usize, rate: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * dim];
    for p in 0..rows {
        let x = p as f64 * rate;
        for i in 0..dim / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = x * freq;
            out[p * dim + 2 * i] = angle.sin();
            out[p * dim + 2 * i + 1] = angle.cos();
        }
    }
    out
}

enum Init {
    Normal(f64),
    Constant(f64),
    Sinusoid(f64),
    /// Equal-width blocks, each filled with one constant.
    Blocks(Vec<f64>),
}

/// Creates parameters in a fixed order. Without an rng it only records
/// shapes, so large presets can be sized without allocating them.
struct Builder<'a> {
    store: ParamStore,
    shapes: Vec<(String, Vec<usize>)>,
    rng: Option<&'a mut RngStream>,
}

impl Builder<'_> {
    fn make(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        self.shapes.push((name.clone(), shape.to_vec()));
        let Some(rng) = self.rng.as_deref_mut() else {
            return ParamId(self.shapes.len() - 1);
        };
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Normal(std) => (0..n).map(|_| rng.standard_normal() * std).collect(),
            Init::Constant(v) => vec![v; n],
            Init::Sinusoid(rate) => sinusoid_table(shape[0], shape[1], rate),
            Init::Blocks(values) => {
                let w = n / values.len();
                values.iter().flat_map(|&v| std::iter::repeat_n(v, w)).collect()
            }
        };
        self.store.push(name, Tensor::new(shape, data).expect("shape"))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Linear {
        let std = gain / (fan_in as f64).sqrt();
        Linear {
            w: self.make(format!("{name}.w"), &[fan_in, fan_out], Init::Normal(std)),
            b: self.make(format!("{name}.b"), &[fan_out], Init::Constant(0.0)),
        }
    }

    fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.make(format!("{name}.w"), &[fan_in, fan_out], Init::Constant(0.0)),
            b: self.make(format!("{name}.b"), &[fan_out], Init::Constant(0.0)),
        }
    }

    fn layer_norm(&mut self, name: &str, dim: usize) -> (ParamId, ParamId) {
        (
            self.make(format!("{name}.gain"), &[dim], Init::Constant(1.0)),
            self.make(format!("{name}.bias"), &[dim], Init::Constant(0.0)),
        )
    }
}

/// Initial logit of the stop head, so early rollouts do not halt at once.
const STOP_BIAS_INIT: f64 = -4.0;

/// Initial variance of sampled frames.
const INITIAL_SPREAD: f64 = 0.025;

fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

/// Head bias giving a tight initial spread: for the evidential head
/// ν = 1, α = 3, β = 0.05; for the Gaussian head log σ² = ln 0.025.
fn head_bias(head: HeadKind) -> Vec<f64> {
    match head {
        HeadKind::Evidential => vec![
            0.0,
            inverse_softplus(1.0),
            inverse_softplus(2.0),
            inverse_softplus(2.0 * INITIAL_SPREAD),
        ],
        HeadKind::Gaussian => vec![0.0, INITIAL_SPREAD.ln()],
    }
}

fn build(cfg: &ModelConfig, b: &mut Builder<'_>) -> Layout {
    let h = cfg.hidden_dim;
    let d = cfg.mel_dim;

    let text_embed = b.make("text_embed".into(), &[cfg.text_table_rows(), h], Init::Normal(0.5));
    let text_pos = b.make("text_pos".into(), &[cfg.max_text_positions, h], Init::Sinusoid(1.0));
    let audio_pos = b.make(
        "audio_pos".into(),
        &[cfg.max_audio_positions, h],
        Init::Sinusoid(cfg.audio_position_rate),
    );
    let start_of_audio = b.make("start_of_audio".into(), &[1, h], Init::Normal(0.5));

    let mut prenet = Vec::new();
    let mut fan_in = d;
    for (i, &width) in cfg.prenet_dims.iter().enumerate() {
        prenet.push(b.linear(&format!("prenet.{i}"), fan_in, width, 2f64.sqrt()));
        fan_in = width;
    }
    prenet.push(b.linear(&format!("prenet.{}", cfg.prenet_dims.len()), fan_in, h, 1.0));

    let branch_gain = 1.0 / (2.0 * cfg.num_blocks as f64).sqrt();
    let blocks = (0..cfg.num_blocks)
        .map(|i| Block {
            ln1: b.layer_norm(&format!("blocks.{i}.ln1"), h),
            qkv: b.linear(&format!("blocks.{i}.qkv"), h, 3 * h, 1.0),
            out: b.linear(&format!("blocks.{i}.out"), h, h, branch_gain),
            ln2: b.layer_norm(&format!("blocks.{i}.ln2"), h),
            ff1: b.linear(&format!("blocks.{i}.ff1"), h, cfg.ffn_dim, 2f64.sqrt()),
            ff2: b.linear(&format!("blocks.{i}.ff2"), cfg.ffn_dim, h, branch_gain),
        })
        .collect();
    let final_ln = b.layer_norm("final_ln", h);
    let head = Linear {
        w: b.make("head.w".into(), &[h, cfg.head_width()], Init::Normal(0.1 / (h as f64).sqrt())),
        b: b.make("head.b".into(), &[cfg.head_width()], Init::Blocks(head_bias(cfg.head))),
    };

    let mut denoiser = Vec::new();
    let mut fan_in = d;
    for i in 0..cfg.denoiser_layers {
        if i + 1 == cfg.denoiser_layers {
            denoiser.push(b.zero_linear(&format!("denoiser.{i}"), fan_in, d));
        } else {
            denoiser.push(b.linear(&format!("denoiser.{i}"), fan_in, cfg.denoiser_hidden, 2f64.sqrt()));
            fan_in = cfg.denoiser_hidden;
        }
    }

    let k = cfg.postnet_kernel;
    let c = cfg.postnet_channels;
    let mut postnet = Vec::new();
    for i in 0..cfg.postnet_blocks {
        let c_in = if i == 0 { d } else { c };
        if i + 1 == cfg.postnet_blocks {
            postnet.push(b.zero_linear(&format!("postnet.{i}"), k * c_in, d));
        } else {
            postnet.push(b.linear(&format!("postnet.{i}"), k * c_in, c, 1.0));
        }
    }
    let stop = Linear {
        w: b.make("stop.w".into(), &[h, 1], Init::Normal(0.1 / (h as f64).sqrt())),
        b: b.make("stop.b".into(), &[1], Init::Constant(STOP_BIAS_INIT)),
    };

    Layout {
        text_embed,
        text_pos,
        audio_pos,
        start_of_audio,
        prenet,
        blocks,
        final_ln,
        head,
        denoiser,
        postnet,
        stop,
    }
}

/// Initial parameters. Residual branches that must start as the identity
/// (denoiser output, final postnet convolution) are zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> (ParamStore, Layout) {
    let mut rng = RngStream::new(seed, 0x1417);
    let mut b = Builder {
        store: ParamStore::default(),
        shapes: Vec::new(),
        rng: Some(&mut rng),
    };
    let layout = build(cfg, &mut b);
    (b.store, layout)
}

/// Names and shapes of every parameter, without allocating them.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut b = Builder {
        store: ParamStore::default(),
        shapes: Vec::new(),
        rng: None,
    };
    build(cfg, &mut b);
    b.shapes
}

/// Rebuilds the layout for a store whose names follow [`init_params`].
pub fn layout_from_store(cfg: &ModelConfig, store: &ParamStore) -> Result<Layout, BackboneError> {
    let expected = param_shapes(cfg);
    if expected.len() != store.len() {
        return Err(BackboneError::Checkpoint(format!(
            "{} tensors, the configured architecture has {}",
            store.len(),
            expected.len()
        )));
    }
    for (id, (name, shape)) in store.ids().zip(&expected) {
        if store.name(id) != name || store.get(id).shape() != shape.as_slice() {
            return Err(BackboneError::Checkpoint(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                store.name(id),
                store.get(id).shape()
            )));
        }
    }
    let mut b = Builder {
        store: ParamStore::default(),
        shapes: Vec::new(),
        rng: None,
    };
    Ok(build(cfg, &mut b))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"BELC";
const CHECKPOINT_VERSION: u16 = 1;

/// Serialises config and parameters. Identical inputs give identical bytes.
pub fn encode_checkpoint(cfg: &ModelConfig, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = render_kv(&cfg.entries());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let t = store.get(id);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.shape().len() as u8);
        for &s in t.shape() {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BackboneError> {
        if self.pos + n > self.bytes.len() {
            return Err(BackboneError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, BackboneError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, BackboneError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("len")))
    }
    fn u32(&mut self) -> Result<u32, BackboneError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("len")))
    }
    fn f64(&mut self) -> Result<f64, BackboneError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("len")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParamStore), BackboneError> {
    if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(BackboneError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("len"));
    let mut c = Cursor { bytes: body, pos: 4 };
    let version = c.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(BackboneError::Checkpoint(format!("unsupported version {version}")));
    }
    if crc32fast::hash(body) != stored {
        return Err(BackboneError::Checkpoint("checksum mismatch".into()));
    }
    let config_len = c.u32()? as usize;
    let text = std::str::from_utf8(c.take(config_len)?)
        .map_err(|_| BackboneError::Checkpoint("config block is not UTF-8".into()))?;
    let mut cfg = ModelConfig::desk();
    cfg.apply_all(&parse_kv(text)?)?;
    cfg.validate()?;
    let count = c.u32()? as usize;
    let mut store = ParamStore::default();
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| BackboneError::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = c.u8()? as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>, _>>()?;
        store.push(name, Tensor::new(&shape, data)?);
    }
    if c.pos != body.len() {
        return Err(BackboneError::Checkpoint(format!("{} trailing bytes", body.len() - c.pos)));
    }
    Ok((cfg, store))
}

pub fn write_checkpoint(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<(), BackboneError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(cfg, store))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore), BackboneError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
