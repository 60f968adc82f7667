//! Procedural mel-like corpus: per-token frame templates, simulated teacher
//! renditions, an exact nearest-template decoder and the `BELM` file format.

use std::f64::consts::PI;
use std::path::Path;

use thiserror::Error;

use crate::backbone::{MelSequence, TokenSequence};
use crate::config::{join_list, parse_kv, parse_list, parse_value, render_kv, ConfigError, KvConfig};
use crate::sampler::RngStream;

const MAGIC: &[u8; 4] = b"BELM";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    Spec(String),
    #[error("{what} id {id} out of range (limit {limit})")]
    OutOfRange { what: &'static str, id: usize, limit: usize },
    #[error("template margin {margin:.4} below required {required}")]
    Margin { margin: f64, required: f64 },
    #[error("not a corpus file (bad magic)")]
    Magic,
    #[error("unsupported corpus version {0}")]
    Version(u16),
    #[error("file truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("record {index}: {reason}")]
    Record { index: usize, reason: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub frames_per_token: usize,
    pub mel_dim: usize,
    pub num_speakers: usize,
    pub num_teachers: usize,
    pub seed: u64,
    /// Jitter standard deviation of each teacher, `num_teachers` entries.
    pub teacher_noise: Vec<f64>,
    pub amplitude: f64,
    /// Standard deviation of the per-speaker, per-dimension offset.
    pub speaker_offset: f64,
    /// Templates are redrawn until every pair of distinct tokens is at
    /// least this far apart.
    pub min_margin: f64,
    pub num_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub frame_rate: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl CorpusSpec {
    pub fn desk() -> Self {
        Self {
            vocab_size: 16,
            frames_per_token: 8,
            mel_dim: 16,
            num_speakers: 2,
            num_teachers: 6,
            seed: 1234,
            teacher_noise: vec![0.05; 6],
            amplitude: 2.0,
            speaker_offset: 0.3,
            min_margin: 4.0,
            num_utterances: 2000,
            min_tokens: 4,
            max_tokens: 12,
            frame_rate: 62.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CorpusError::Spec(m));
        if self.vocab_size < 4 {
            return bad(format!("vocab_size must be at least 4, got {}", self.vocab_size));
        }
        if self.vocab_size > u16::MAX as usize || self.num_speakers > u16::MAX as usize {
            return bad("ids must fit in 16 bits".into());
        }
        if self.frames_per_token < 2 {
            return bad(format!("frames_per_token must be at least 2, got {}", self.frames_per_token));
        }
        if self.mel_dim == 0 || self.num_speakers == 0 {
            return bad("mel_dim and num_speakers must be positive".into());
        }
        if self.teacher_noise.len() != self.num_teachers {
            return bad(format!(
                "teacher_noise has {} entries for {} teachers",
                self.teacher_noise.len(),
                self.num_teachers
            ));
        }
        if self.teacher_noise.iter().any(|n| !(*n >= 0.0 && n.is_finite())) {
            return bad("teacher_noise entries must be finite and non-negative".into());
        }
        if !(self.amplitude > 0.0) || !(self.speaker_offset >= 0.0) || !(self.min_margin > 0.0) {
            return bad("amplitude and min_margin must be positive, speaker_offset non-negative".into());
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad(format!("token range {}..={} is empty", self.min_tokens, self.max_tokens));
        }
        if !(self.frame_rate > 0.0) {
            return bad("frame_rate must be positive".into());
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut s = Self::desk();
        s.apply_all(&parse_kv(text)?)?;
        s.validate()?;
        Ok(s)
    }
}

impl KvConfig for CorpusSpec {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<bool, ConfigError> {
        match key {
            "vocab_size" => self.vocab_size = parse_value(key, v)?,
            "frames_per_token" => self.frames_per_token = parse_value(key, v)?,
            "mel_dim" => self.mel_dim = parse_value(key, v)?,
            "num_speakers" => self.num_speakers = parse_value(key, v)?,
            "num_teachers" => {
                let n: usize = parse_value(key, v)?;
                let level = self.teacher_noise.first().copied().unwrap_or(0.05);
                self.teacher_noise.resize(n, level);
                self.num_teachers = n;
            }
            "seed" => self.seed = parse_value(key, v)?,
            "teacher_noise" => self.teacher_noise = parse_list(key, v)?,
            "amplitude" => self.amplitude = parse_value(key, v)?,
            "speaker_offset" => self.speaker_offset = parse_value(key, v)?,
            "min_margin" => self.min_margin = parse_value(key, v)?,
            "num_utterances" => self.num_utterances = parse_value(key, v)?,
            "min_tokens" => self.min_tokens = parse_value(key, v)?,
            "max_tokens" => self.max_tokens = parse_value(key, v)?,
            "frame_rate" => self.frame_rate = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        [
            ("vocab_size", self.vocab_size.to_string()),
            ("frames_per_token", self.frames_per_token.to_string()),
            ("mel_dim", self.mel_dim.to_string()),
            ("num_speakers", self.num_speakers.to_string()),
            ("num_teachers", self.num_teachers.to_string()),
            ("seed", self.seed.to_string()),
            ("teacher_noise", join_list(&self.teacher_noise)),
            ("amplitude", self.amplitude.to_string()),
            ("speaker_offset", self.speaker_offset.to_string()),
            ("min_margin", self.min_margin.to_string()),
            ("num_utterances", self.num_utterances.to_string()),
            ("min_tokens", self.min_tokens.to_string()),
            ("max_tokens", self.max_tokens.to_string()),
            ("frame_rate", self.frame_rate.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub text: TokenSequence,
    pub mel: MelSequence,
    pub speaker_id: usize,
    /// 0 is the original rendering, `1..=N` the simulated teachers.
    pub teacher_id: usize,
    pub seed: u64,
}

/// Per-teacher affine transform applied to every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTransform {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Everything drawn once from the master seed.
#[derive(Clone, Debug)]
pub struct Templates {
    pub spec: CorpusSpec,
    /// Unit-norm direction of each token, `V × D`.
    basis: Vec<Vec<f64>>,
    /// `num_speakers × D`.
    offsets: Vec<Vec<f64>>,
    teachers: Vec<TeacherTransform>,
    /// Minimum L2 distance between templates of distinct tokens.
    pub margin: f64,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of utterance `index` as rendered by `teacher`.
pub fn derive_seed(master: u64, index: usize, teacher: usize) -> u64 {
    mix64(mix64(master ^ mix64(index as u64)) ^ (teacher as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl Templates {
    pub fn build(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.mel_dim;
        let mut rng = RngStream::new(spec.seed, 0xB0);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.vocab_size);
        let mut shapes = Self {
            spec: spec.clone(),
            basis: Vec::new(),
            offsets: Vec::new(),
            teachers: Vec::new(),
            margin: f64::INFINITY,
        };
        for token in 0..spec.vocab_size {
            let mut best = f64::NEG_INFINITY;
            for _ in 0..10_000 {
                let cand = unit(rng.normals(d));
                shapes.basis = basis.clone();
                shapes.basis.push(cand.clone());
                let t = shapes.shape(token);
                let margin = (0..token).map(|o| l2(&t, &shapes.shape(o))).fold(f64::INFINITY, f64::min);
                if margin >= spec.min_margin {
                    basis.push(cand);
                    break;
                }
                best = best.max(margin);
            }
            if basis.len() == token {
                return Err(CorpusError::Margin {
                    margin: best,
                    required: spec.min_margin,
                });
            }
        }
        shapes.basis = basis;

        let mut rng = RngStream::new(spec.seed, 0xB1);
        shapes.offsets = (0..spec.num_speakers)
            .map(|_| rng.normals(d).into_iter().map(|x| x * spec.speaker_offset).collect())
            .collect();
        let mut rng = RngStream::new(spec.seed, 0xB2);
        shapes.teachers = (0..spec.num_teachers)
            .map(|_| TeacherTransform {
                scale: (0..d).map(|_| 0.8 + 0.4 * rng.uniform()).collect(),
                bias: (0..d).map(|_| -0.1 + 0.2 * rng.uniform()).collect(),
            })
            .collect();
        shapes.margin = shapes.compute_margin();
        if shapes.margin < spec.min_margin {
            return Err(CorpusError::Margin {
                margin: shapes.margin,
                required: spec.min_margin,
            });
        }
        Ok(shapes)
    }

    /// Speaker-free template of `token`, flattened `F × D`.
    fn shape(&self, token: usize) -> Vec<f64> {
        let f_len = self.spec.frames_per_token;
        let cycles = (1 + token % 7) as f64;
        let mut out = Vec::with_capacity(f_len * self.spec.mel_dim);
        for f in 0..f_len {
            // Frame centres avoid the all-zero waveform at four cycles.
            let s = self.spec.amplitude * (2.0 * PI * ((f as f64 + 0.5) / f_len as f64) * cycles).sin();
            out.extend(self.basis[token].iter().map(|b| s * b));
        }
        out
    }

    /// Recomputes the minimum distance between distinct token templates.
    pub fn compute_margin(&self) -> f64 {
        let shapes: Vec<Vec<f64>> = (0..self.spec.vocab_size).map(|t| self.shape(t)).collect();
        let mut m = f64::INFINITY;
        for i in 0..shapes.len() {
            for j in i + 1..shapes.len() {
                m = m.min(l2(&shapes[i], &shapes[j]));
            }
        }
        m
    }

    pub fn teacher(&self, teacher_id: usize) -> Option<&TeacherTransform> {
        teacher_id.checked_sub(1).and_then(|k| self.teachers.get(k))
    }

    fn check_ids(&self, token: Option<usize>, speaker: usize, teacher: usize) -> Result<()> {
        if let Some(t) = token.filter(|&t| t >= self.spec.vocab_size) {
            return Err(CorpusError::OutOfRange {
                what: "token",
                id: t,
                limit: self.spec.vocab_size,
            });
        }
        if speaker >= self.spec.num_speakers {
            return Err(CorpusError::OutOfRange {
                what: "speaker",
                id: speaker,
                limit: self.spec.num_speakers,
            });
        }
        if teacher > self.spec.num_teachers {
            return Err(CorpusError::OutOfRange {
                what: "teacher",
                id: teacher,
                limit: self.spec.num_teachers + 1,
            });
        }
        Ok(())
    }

    /// `F × D` frames of `token` for `speaker`, flattened row-major.
    pub fn template(&self, token: usize, speaker: usize) -> Result<Vec<f64>> {
        self.check_ids(Some(token), speaker, 0)?;
        let d = self.spec.mel_dim;
        let off = &self.offsets[speaker];
        Ok(self
            .shape(token)
            .into_iter()
            .enumerate()
            .map(|(i, v)| v + off[i % d])
            .collect())
    }

    /// Concatenated templates plus one all-zero terminal frame, then the
    /// teacher's transform and jitter. Values are rounded to `f32`.
    pub fn render(&self, text: &TokenSequence, speaker: usize, teacher: usize, seed: u64) -> Result<Utterance> {
        self.check_ids(None, speaker, teacher)?;
        let d = self.spec.mel_dim;
        let mut data = Vec::with_capacity((text.len() * self.spec.frames_per_token + 1) * d);
        for &tok in &text.ids {
            data.extend(self.template(tok, speaker)?);
        }
        data.extend(std::iter::repeat_n(0.0, d));
        if let Some(tr) = self.teacher(teacher) {
            let noise = self.spec.teacher_noise[teacher - 1];
            let mut rng = RngStream::new(seed, 0xB3);
            for (i, v) in data.iter_mut().enumerate() {
                *v = tr.scale[i % d] * *v + tr.bias[i % d] + noise * rng.standard_normal();
            }
        }
        for v in &mut data {
            *v = round_f32(*v);
        }
        Ok(Utterance {
            text: text.clone(),
            mel: MelSequence::new(d, data, self.spec.frame_rate).expect("finite render"),
            speaker_id: speaker,
            teacher_id: teacher,
            seed,
        })
    }

    /// Greedy decoding of whole `F`-frame windows against the speaker's
    /// original templates; a trailing partial window is ignored.
    pub fn decode_nearest(&self, mel: &MelSequence, speaker: usize) -> Result<TokenSequence> {
        self.check_ids(None, speaker, 0)?;
        let d = self.spec.mel_dim;
        if mel.dim() != d {
            return Err(CorpusError::Spec(format!("mel width {} differs from corpus {}", mel.dim(), d)));
        }
        let w = self.spec.frames_per_token * d;
        let templates: Vec<Vec<f64>> = (0..self.spec.vocab_size)
            .map(|t| self.template(t, speaker))
            .collect::<Result<_>>()?;
        let ids = mel
            .data()
            .chunks_exact(w)
            .map(|win| {
                let mut best = (f64::INFINITY, 0);
                for (t, tpl) in templates.iter().enumerate() {
                    let dist: f64 = win.iter().zip(tpl).map(|(a, b)| (a - b).powi(2)).sum();
                    if dist < best.0 {
                        best = (dist, t);
                    }
                }
                best.1
            })
            .collect();
        Ok(TokenSequence::new(ids))
    }
}

/// Spec-level convenience over [`Templates::template`].
pub fn make_template(token: usize, speaker: usize, spec: &CorpusSpec) -> Result<Vec<f64>> {
    Templates::build(spec)?.template(token, speaker)
}

pub fn render_utterance(text: &TokenSequence, speaker: usize, teacher: usize, seed: u64, spec: &CorpusSpec) -> Result<Utterance> {
    Templates::build(spec)?.render(text, speaker, teacher, seed)
}

pub fn decode_nearest(mel: &MelSequence, spec: &CorpusSpec, speaker: usize) -> Result<TokenSequence> {
    Templates::build(spec)?.decode_nearest(mel, speaker)
}

/// Original renderings plus the means to render any teacher version.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub templates: Templates,
    pub utterances: Vec<Utterance>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.templates.spec == other.templates.spec && self.utterances == other.utterances
    }
}

impl Corpus {
    /// `num_utterances` original renderings, a pure function of the spec.
    pub fn generate(spec: &CorpusSpec) -> Result<Self> {
        let templates = Templates::build(spec)?;
        let mut rng = RngStream::new(spec.seed, 0xB4);
        let mut utterances = Vec::with_capacity(spec.num_utterances);
        for index in 0..spec.num_utterances {
            let n = spec.min_tokens + rng.below(spec.max_tokens - spec.min_tokens + 1);
            let ids = (0..n).map(|_| rng.below(spec.vocab_size)).collect();
            let speaker = rng.below(spec.num_speakers);
            let seed = derive_seed(spec.seed, index, 0);
            utterances.push(templates.render(&TokenSequence::new(ids), speaker, 0, seed)?);
        }
        Ok(Self { templates, utterances })
    }

    pub fn spec(&self) -> &CorpusSpec {
        &self.templates.spec
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Utterance `index` as rendered by `teacher` (0 returns the stored
    /// original).
    pub fn rendition(&self, index: usize, teacher: usize) -> Result<Utterance> {
        let u = &self.utterances[index];
        if teacher == 0 {
            return Ok(u.clone());
        }
        self.templates
            .render(&u.text, u.speaker_id, teacher, derive_seed(self.spec().seed, index, teacher))
    }

    /// Index ranges of the training and evaluation splits: the last
    /// `eval` utterances are held out.
    pub fn split(&self, eval: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let cut = self.len().saturating_sub(eval);
        (0..cut, cut..self.len())
    }
}

pub fn encode_corpus(corpus: &Corpus) -> Result<Vec<u8>> {
    let d = corpus.spec().mel_dim;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let spec_text = render_kv(&corpus.spec().entries());
    out.extend_from_slice(&(spec_text.len() as u32).to_le_bytes());
    out.extend_from_slice(spec_text.as_bytes());
    out.extend_from_slice(&(corpus.len() as u32).to_le_bytes());
    for (index, u) in corpus.utterances.iter().enumerate() {
        let rec = |reason: String| CorpusError::Record { index, reason };
        if u.mel.dim() != d {
            return Err(rec(format!("width {} differs from corpus width {d}", u.mel.dim())));
        }
        if u.text.len() > u16::MAX as usize {
            return Err(rec("too many tokens".into()));
        }
        out.extend_from_slice(&(u.speaker_id as u16).to_le_bytes());
        out.extend_from_slice(&(u.teacher_id as u16).to_le_bytes());
        out.extend_from_slice(&(u.text.len() as u16).to_le_bytes());
        for &t in &u.text.ids {
            out.extend_from_slice(&(t as u16).to_le_bytes());
        }
        out.extend_from_slice(&(u.mel.len() as u32).to_le_bytes());
        for &v in u.mel.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(CorpusError::Truncated {
                offset: self.at,
                needed: self.at + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(CorpusError::Magic);
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(CorpusError::Version(version));
    }
    if bytes.len() < 4 + 2 + 4 {
        return Err(CorpusError::Truncated {
            offset: bytes.len(),
            needed: 4,
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CorpusError::Checksum { stored, computed });
    }
    let mut c = Cursor { bytes: body, at: 6 };
    let spec_len = c.u32()? as usize;
    let spec_text = std::str::from_utf8(c.take(spec_len)?).map_err(|e| CorpusError::Spec(e.to_string()))?;
    let spec = CorpusSpec::from_kv_text(spec_text)?;
    let templates = Templates::build(&spec)?;
    let d = spec.mel_dim;
    let count = c.u32()? as usize;
    let mut utterances = Vec::with_capacity(count.min(1 << 20));
    for index in 0..count {
        let speaker_id = c.u16()? as usize;
        let teacher_id = c.u16()? as usize;
        let n = c.u16()? as usize;
        let ids = (0..n).map(|_| c.u16().map(usize::from)).collect::<Result<Vec<_>>>()?;
        let frames = c.u32()? as usize;
        let raw = c.take(frames * d * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let mel = MelSequence::new(d, data, spec.frame_rate).map_err(|e| CorpusError::Record {
            index,
            reason: e.to_string(),
        })?;
        utterances.push(Utterance {
            text: TokenSequence::new(ids),
            mel,
            speaker_id,
            teacher_id,
            seed: derive_seed(spec.seed, index, teacher_id),
        });
    }
    if c.at != body.len() {
        return Err(CorpusError::Record {
            index: count,
            reason: format!("{} trailing bytes", body.len() - c.at),
        });
    }
    Ok(Corpus { templates, utterances })
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    std::fs::write(path, encode_corpus(corpus)?)?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    decode_corpus(&std::fs::read(path)?)
}

/// Per-dimension least-squares fit `b ≈ s·a + c`; returns `(s, c, rms residual)`.
pub fn fit_affine(a: &MelSequence, b: &MelSequence) -> (Vec<f64>, Vec<f64>, f64) {
    let d = a.dim();
    let n = a.len() as f64;
    let mut scale = vec![0.0; d];
    let mut bias = vec![0.0; d];
    let mut sse = 0.0;
    for j in 0..d {
        let xs: Vec<f64> = (0..a.len()).map(|t| a.frame(t)[j]).collect();
        let ys: Vec<f64> = (0..b.len()).map(|t| b.frame(t)[j]).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        scale[j] = sxy / sxx;
        bias[j] = my - scale[j] * mx;
        sse += xs.iter().zip(&ys).map(|(x, y)| (y - scale[j] * x - bias[j]).powi(2)).sum::<f64>();
    }
    (scale, bias, (sse / (n * d as f64)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(n: usize) -> CorpusSpec {
        CorpusSpec {
            num_utterances: n,
            ..CorpusSpec::desk()
        }
    }

    #[test]
    fn templates_are_deterministic_and_separated() {
        let spec = CorpusSpec::desk();
        let a = make_template(3, 1, &spec).unwrap();
        assert_eq!(a, make_template(3, 1, &spec).unwrap());
        let t = Templates::build(&spec).unwrap();
        for i in 0..spec.vocab_size {
            for j in i + 1..spec.vocab_size {
                let d = l2(&t.template(i, 0).unwrap(), &t.template(j, 0).unwrap());
                assert!(d >= t.margin - 1e-12 && d >= spec.min_margin);
            }
        }
        assert!(make_template(16, 0, &spec).is_err());
        assert!(make_template(0, 2, &spec).is_err());
    }

    #[test]
    fn template_values_are_bounded() {
        let spec = CorpusSpec::desk();
        let t = Templates::build(&spec).unwrap();
        for s in 0..spec.num_speakers {
            let max_off = t.offsets[s].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for tok in 0..spec.vocab_size {
                for v in t.template(tok, s).unwrap() {
                    assert!(v.abs() <= spec.amplitude + max_off + 1e-12);
                }
            }
        }
    }

    #[test]
    fn original_render_is_template_concatenation() {
        let spec = CorpusSpec::desk();
        let t = Templates::build(&spec).unwrap();
        let text = TokenSequence::new(vec![1, 5, 2]);
        let u = t.render(&text, 1, 0, 9).unwrap();
        assert_eq!(u.mel.len(), 3 * 8 + 1);
        for (k, &tok) in text.ids.iter().enumerate() {
            let tpl = t.template(tok, 1).unwrap();
            for (a, b) in u.mel.data()[k * 128..(k + 1) * 128].iter().zip(&tpl) {
                assert_eq!(*a, round_f32(*b));
            }
        }
        assert!(u.mel.frame(24).iter().all(|&v| v == 0.0));
        assert_eq!(u, t.render(&text, 1, 0, 9).unwrap());
    }

    #[test]
    fn teacher_render_is_affine_in_original() {
        let spec = CorpusSpec::desk();
        let t = Templates::build(&spec).unwrap();
        let text = TokenSequence::new(vec![0, 3, 7, 9, 12, 15, 4, 4, 1, 8, 2, 11]);
        let orig = t.render(&text, 0, 0, 1).unwrap();
        for k in 1..=spec.num_teachers {
            let tr = t.render(&text, 0, k, 77).unwrap();
            let (scale, bias, rms) = fit_affine(&orig.mel, &tr.mel);
            let truth = t.teacher(k).unwrap();
            assert!(rms < spec.teacher_noise[k - 1] * 1.2, "teacher {k} residual {rms}");
            for j in 0..spec.mel_dim {
                assert!((scale[j] - truth.scale[j]).abs() < 0.05);
                assert!((0.8..=1.2).contains(&truth.scale[j]));
                assert!((-0.1..=0.1).contains(&truth.bias[j]));
                assert!((bias[j] - truth.bias[j]).abs() < 0.05);
            }
        }
    }

    #[test]
    fn decode_is_exact_on_clean_and_noisy_renders() {
        let spec = CorpusSpec::desk();
        let t = Templates::build(&spec).unwrap();
        let mut rng = RngStream::new(4, 0);
        let sigma = t.margin / (4.0 * ((spec.frames_per_token * spec.mel_dim) as f64).sqrt());
        for _ in 0..200 {
            let ids: Vec<usize> = (0..8).map(|_| rng.below(16)).collect();
            let text = TokenSequence::new(ids);
            let s = rng.below(2);
            let u = t.render(&text, s, 0, 0).unwrap();
            assert_eq!(t.decode_nearest(&u.mel, s).unwrap(), text);
            let noisy: Vec<f64> = u.mel.data().iter().map(|v| v + sigma * rng.standard_normal()).collect();
            let noisy = MelSequence::new(16, noisy, 62.5).unwrap();
            assert_eq!(t.decode_nearest(&noisy, s).unwrap(), text);
        }
    }

    #[test]
    fn zero_mel_decodes_to_smallest_template() {
        let spec = CorpusSpec::desk();
        let t = Templates::build(&spec).unwrap();
        let norms: Vec<f64> = (0..16).map(|k| l2(&t.template(k, 0).unwrap(), &vec![0.0; 128])).collect();
        let smallest = (0..16).min_by(|&a, &b| norms[a].total_cmp(&norms[b])).unwrap();
        let zero = MelSequence::new(16, vec![0.0; 2 * 128], 62.5).unwrap();
        assert_eq!(t.decode_nearest(&zero, 0).unwrap().ids, vec![smallest; 2]);
    }

    #[test]
    fn teacher_renders_stay_decodable() {
        let corpus = Corpus::generate(&small_spec(100)).unwrap();
        for i in 0..corpus.len() {
            for k in 0..=corpus.spec().num_teachers {
                let u = corpus.rendition(i, k).unwrap();
                let s = u.speaker_id;
                assert_eq!(corpus.templates.decode_nearest(&u.mel, s).unwrap(), u.text, "utt {i} teacher {k}");
            }
        }
    }

    #[test]
    fn corpus_round_trips_and_detects_damage() {
        let corpus = Corpus::generate(&small_spec(30)).unwrap();
        let bytes = encode_corpus(&corpus).unwrap();
        let back = decode_corpus(&bytes).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(encode_corpus(&back).unwrap(), bytes);

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x10;
        assert!(matches!(decode_corpus(&flipped), Err(CorpusError::Checksum { .. })));
        assert!(matches!(decode_corpus(b"NOPE\x01\x00"), Err(CorpusError::Magic)));
        let mut v2 = bytes.clone();
        v2[4] = 9;
        assert!(matches!(decode_corpus(&v2), Err(CorpusError::Version(9))));
        assert!(matches!(decode_corpus(&bytes[..3]), Err(CorpusError::Truncated { offset: 0, .. })));
    }

    #[test]
    fn truncated_body_reports_offset() {
        let corpus = Corpus::generate(&small_spec(3)).unwrap();
        let mut bytes = encode_corpus(&corpus).unwrap();
        bytes.truncate(bytes.len() - 4 - 40);
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        match decode_corpus(&bytes) {
            Err(CorpusError::Truncated { offset, .. }) => assert!(offset > 0),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn empty_corpus_is_valid() {
        let corpus = Corpus::generate(&small_spec(0)).unwrap();
        let back = decode_corpus(&encode_corpus(&corpus).unwrap()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn corpus_is_pure_function_of_spec() {
        let a = Corpus::generate(&small_spec(50)).unwrap();
        let b = Corpus::generate(&small_spec(50)).unwrap();
        assert_eq!(a, b);
        let c = Corpus::generate(&CorpusSpec {
            seed: 99,
            ..small_spec(50)
        })
        .unwrap();
        assert_ne!(a, c);
        for u in &a.utterances {
            assert!((4..=12).contains(&u.text.len()));
            assert_eq!(u.mel.len(), 8 * u.text.len() + 1);
        }
    }

    #[test]
    fn spec_validation() {
        let bad = CorpusSpec {
            vocab_size: 3,
            ..CorpusSpec::desk()
        };
        assert!(bad.validate().is_err());
        let mut s = CorpusSpec::desk();
        s.apply_all(&parse_kv("num_teachers=2\nseed=5").unwrap()).unwrap();
        assert_eq!(s.teacher_noise.len(), 2);
        let text = render_kv(&s.entries());
        assert_eq!(CorpusSpec::from_kv_text(&text).unwrap(), s);
        assert!(CorpusSpec::from_kv_text("colour=blue").is_err());
    }
}
