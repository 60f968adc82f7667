use std::sync::Arc;

use super::{BackboneError, ChunkSpan, Linear, Model, ModelConfig, ParamId, Result, TokenSequence};
use crate::numerics::{AttentionMask, Backend, Tensor};
use crate::sampler::RngStream;

/// Keys and values of every decoder block for the positions processed so
/// far.
#[derive(Clone)]
pub struct KvCache<V> {
    layers: Vec<Option<(V, V)>>,
    len: usize,
}

impl<V: Clone> KvCache<V> {
    pub fn new(blocks: usize) -> Self {
        Self {
            layers: vec![None; blocks],
            len: 0,
        }
    }

    /// Positions already cached.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Model parameters bound to a backend. On a [`crate::numerics::Tape`] every
/// parameter is a differentiable leaf, in store order.
pub struct Net<'m, B: Backend> {
    pub model: &'m Model,
    vars: Vec<B::V>,
}

impl<'m, B: Backend> Net<'m, B> {
    pub fn bind(b: &mut B, model: &'m Model) -> Self {
        let vars = model
            .params
            .tensors()
            .iter()
            .map(|t| b.input(t.clone().with_grad()))
            .collect();
        Self { model, vars }
    }

    pub fn vars(&self) -> &[B::V] {
        &self.vars
    }

    pub fn var(&self, id: ParamId) -> &B::V {
        &self.vars[id.index()]
    }

    fn cfg(&self) -> &'m ModelConfig {
        &self.model.config
    }

    pub fn linear(&self, b: &mut B, x: &B::V, l: &Linear) -> Result<B::V> {
        Ok(b.linear(x, self.var(l.w), self.var(l.b))?)
    }

    fn positions(&self, b: &mut B, table: ParamId, first: usize, n: usize, what: &'static str) -> Result<B::V> {
        let available = self.model.params.get(table).rows();
        if first + n > available {
            return Err(BackboneError::TooLong {
                what,
                needed: first + n,
                available,
            });
        }
        let ids: Vec<usize> = (first..first + n).collect();
        Ok(b.gather_rows(self.var(table), &ids)?)
    }

    /// Token rows (table ids, BOS/EOS included) plus text positions.
    pub fn embed_text(&self, b: &mut B, ids: &[usize], first_pos: usize) -> Result<B::V> {
        let rows = self.cfg().text_table_rows();
        if let Some(&id) = ids.iter().find(|&&id| id >= rows) {
            return Err(BackboneError::TokenOutOfRange { id, vocab: rows });
        }
        let tok = b.gather_rows(self.var(self.model.layout.text_embed), ids)?;
        let pos = self.positions(b, self.model.layout.text_pos, first_pos, ids.len(), "text")?;
        Ok(b.add(&tok, &pos)?)
    }

    /// ReLU layers with dropout, then a projection to the model width.
    /// Dropout is applied whenever this runs, inference included.
    pub fn prenet(&self, b: &mut B, frames: &B::V, rng: &mut RngStream) -> Result<B::V> {
        let width = b.value(frames).cols();
        if width != self.cfg().mel_dim {
            return Err(BackboneError::MelWidth {
                got: width,
                expected: self.cfg().mel_dim,
            });
        }
        let layers = &self.model.layout.prenet;
        let mut h = frames.clone();
        for l in &layers[..layers.len() - 1] {
            let a = self.linear(b, &h, l)?;
            let a = b.relu(&a);
            h = b.dropout(&a, self.cfg().prenet_dropout, rng)?;
        }
        self.linear(b, &h, &layers[layers.len() - 1])
    }

    /// Audio-side inputs: an optional start-of-audio row followed by
    /// prenet(frames), plus audio positions from `first_pos`.
    pub fn embed_audio(
        &self,
        b: &mut B,
        with_start: bool,
        frames: Option<&B::V>,
        first_pos: usize,
        rng: &mut RngStream,
    ) -> Result<B::V> {
        let mut parts = Vec::new();
        if with_start {
            parts.push(self.var(self.model.layout.start_of_audio).clone());
        }
        if let Some(f) = frames {
            if b.value(f).rows() > 0 {
                parts.push(self.prenet(b, f, rng)?);
            }
        }
        if parts.is_empty() {
            return Err(BackboneError::Invalid("empty audio segment".into()));
        }
        let x = if parts.len() == 1 {
            parts.pop().expect("one part")
        } else {
            b.concat_rows(&parts)?
        };
        let n = b.value(&x).rows();
        let pos = self.positions(b, self.model.layout.audio_pos, first_pos, n, "audio")?;
        Ok(b.add(&x, &pos)?)
    }

    /// `[BOS text EOS | prenet(mel)]` at positions starting from zero.
    pub fn embed_inputs(&self, b: &mut B, text: &TokenSequence, mel: &Tensor, rng: &mut RngStream) -> Result<B::V> {
        text.check(self.cfg().vocab_size)?;
        let t = self.embed_text(b, &text.wrapped(self.cfg().vocab_size), 0)?;
        if mel.rows() == 0 || mel.is_empty() {
            return Ok(t);
        }
        let m = b.input(mel.clone());
        let a = self.embed_audio(b, false, Some(&m), 0, rng)?;
        Ok(b.concat_rows(&[t, a])?)
    }

    fn residual_dropout(&self, b: &mut B, x: B::V, rng: &mut Option<&mut RngStream>) -> Result<B::V> {
        match rng {
            Some(r) if self.cfg().dropout > 0.0 => Ok(b.dropout(&x, self.cfg().dropout, r)?),
            _ => Ok(x),
        }
    }

    /// Pre-norm transformer over `x`. `mask` has one row per new position and
    /// one column per cached-plus-new position. Residual dropout is active
    /// iff `rng` is given.
    pub fn decoder(
        &self,
        b: &mut B,
        x: &B::V,
        mask: &Arc<AttentionMask>,
        mut cache: Option<&mut KvCache<B::V>>,
        mut rng: Option<&mut RngStream>,
    ) -> Result<B::V> {
        let cfg = self.cfg();
        let n = b.value(x).rows();
        let past = cache.as_ref().map_or(0, |c| c.len);
        if mask.rows() != n || mask.cols() != past + n {
            return Err(BackboneError::Invalid(format!(
                "mask is {}×{}, sequence needs {}×{}",
                mask.rows(),
                mask.cols(),
                n,
                past + n
            )));
        }
        let h = cfg.hidden_dim;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = x.clone();
        for (li, blk) in self.model.layout.blocks.iter().enumerate() {
            let xn = b.layer_norm(&x, self.var(blk.ln1.0), self.var(blk.ln1.1))?;
            let qkv = self.linear(b, &xn, &blk.qkv)?;
            let q = b.slice_cols(&qkv, 0, h)?;
            let mut k = b.slice_cols(&qkv, h, h)?;
            let mut v = b.slice_cols(&qkv, 2 * h, h)?;
            if let Some(c) = cache.as_deref_mut() {
                if let Some((pk, pv)) = &c.layers[li] {
                    k = b.concat_rows(&[pk.clone(), k])?;
                    v = b.concat_rows(&[pv.clone(), v])?;
                }
                c.layers[li] = Some((k.clone(), v.clone()));
            }
            let mut heads = Vec::with_capacity(cfg.num_heads);
            for hd in 0..cfg.num_heads {
                let qh = b.slice_cols(&q, hd * dh, dh)?;
                let kh = b.slice_cols(&k, hd * dh, dh)?;
                let vh = b.slice_cols(&v, hd * dh, dh)?;
                let s = b.masked_scores(&qh, &kh, mask, scale)?;
                let p = b.softmax(&s);
                heads.push(b.matmul(&p, &vh)?);
            }
            let o = if heads.len() == 1 {
                heads.pop().expect("one head")
            } else {
                b.concat_cols(&heads)?
            };
            let a = self.linear(b, &o, &blk.out)?;
            let a = self.residual_dropout(b, a, &mut rng)?;
            x = b.add(&x, &a)?;

            let xn = b.layer_norm(&x, self.var(blk.ln2.0), self.var(blk.ln2.1))?;
            let f = self.linear(b, &xn, &blk.ff1)?;
            let f = b.relu(&f);
            let f = self.linear(b, &f, &blk.ff2)?;
            let f = self.residual_dropout(b, f, &mut rng)?;
            x = b.add(&x, &f)?;
        }
        if let Some(c) = cache {
            c.len += n;
        }
        let (g, bias) = self.model.layout.final_ln;
        Ok(b.layer_norm(&x, self.var(g), self.var(bias))?)
    }

    /// Raw distribution-head outputs, `n × (4D)` or `n × (2D)`.
    pub fn head(&self, b: &mut B, e: &B::V) -> Result<B::V> {
        self.linear(b, e, &self.model.layout.head)
    }

    /// `z + MLP(z)`.
    pub fn denoise(&self, b: &mut B, z: &B::V) -> Result<B::V> {
        let layers = &self.model.layout.denoiser;
        let mut h = z.clone();
        for (i, l) in layers.iter().enumerate() {
            h = self.linear(b, &h, l)?;
            if i + 1 < layers.len() {
                h = b.relu(&h);
            }
        }
        Ok(b.add(z, &h)?)
    }

    /// `y1 + convstack(y1)` over time.
    pub fn postnet(&self, b: &mut B, y1: &B::V) -> Result<B::V> {
        if b.value(y1).rows() == 0 {
            return Err(BackboneError::Invalid("postnet needs at least one frame".into()));
        }
        let layers = &self.model.layout.postnet;
        let k = self.cfg().postnet_kernel;
        let mut h = y1.clone();
        for (i, l) in layers.iter().enumerate() {
            h = b.conv1d(&h, self.var(l.w), self.var(l.b), k)?;
            if i + 1 < layers.len() {
                h = b.tanh(&h);
            }
        }
        Ok(b.add(y1, &h)?)
    }

    /// Stop logits, `n × 1`.
    pub fn stop_logits(&self, b: &mut B, e: &B::V) -> Result<B::V> {
        self.linear(b, e, &self.model.layout.stop)
    }

    /// Runs the teacher-forced interleaved layout
    /// `[x⁽¹⁾ a⁽¹⁾ x⁽²⁾ a⁽²⁾ …]` and returns decoder states at the audio
    /// positions in frame order, `T × hidden`. The audio input for frame `j`
    /// is the start-of-audio row when `j = 0` and the target frame `j − 1`
    /// otherwise.
    pub fn teacher_forced(
        &self,
        b: &mut B,
        tokens: &TokenSequence,
        target: &Tensor,
        chunks: &[ChunkSpan],
        prenet_rng: &mut RngStream,
        residual_rng: Option<&mut RngStream>,
    ) -> Result<B::V> {
        let cfg = self.cfg();
        tokens.check(cfg.vocab_size)?;
        let t_len = target.rows();
        let n_tok = tokens.len();
        validate_chunks(chunks, n_tok, t_len)?;
        let d = cfg.mel_dim;
        if target.cols() != d {
            return Err(BackboneError::MelWidth {
                got: target.cols(),
                expected: d,
            });
        }
        let last = chunks.len() - 1;
        let mut parts = Vec::with_capacity(2 * chunks.len());
        let mut audio_rows = Vec::with_capacity(t_len);
        let mut offset = 0;
        for (m, span) in chunks.iter().enumerate() {
            let mut ids = Vec::with_capacity(span.text.len() + 2);
            if m == 0 {
                ids.push(cfg.bos());
            }
            ids.extend_from_slice(&tokens.ids[span.text.clone()]);
            if m == last {
                ids.push(cfg.eos());
            }
            let first_text_pos = if m == 0 { 0 } else { span.text.start + 1 };
            if !ids.is_empty() {
                parts.push(self.embed_text(b, &ids, first_text_pos)?);
                offset += ids.len();
            }

            let with_start = span.audio.start == 0;
            let from = span.audio.start.saturating_sub(1);
            let to = span.audio.end - 1;
            let frames = (to > from).then(|| {
                let slice = Tensor::new(&[to - from, d], target.data()[from * d..to * d].to_vec()).expect("slice");
                b.input(slice)
            });
            parts.push(self.embed_audio(b, with_start, frames.as_ref(), span.audio.start, prenet_rng)?);
            audio_rows.extend(offset..offset + span.audio.len());
            offset += span.audio.len();
        }
        let x = b.concat_rows(&parts)?;
        let mask = Arc::new(AttentionMask::causal(offset));
        let e = self.decoder(b, &x, &mask, None, residual_rng)?;
        Ok(b.gather_rows(&e, &audio_rows)?)
    }
}

fn validate_chunks(chunks: &[ChunkSpan], n_tok: usize, t_len: usize) -> Result<()> {
    let bad = |msg: String| Err(BackboneError::Invalid(msg));
    if chunks.is_empty() || t_len == 0 {
        return bad("need at least one chunk and one target frame".into());
    }
    let (mut text_at, mut audio_at) = (0, 0);
    for c in chunks {
        if c.text.start != text_at || c.audio.start != audio_at || c.audio.is_empty() {
            return bad(format!("chunks must tile text and audio in order, got {chunks:?}"));
        }
        text_at = c.text.end;
        audio_at = c.audio.end;
    }
    if text_at != n_tok || audio_at != t_len {
        return bad(format!("chunks cover {text_at} tokens and {audio_at} frames, expected {n_tok} and {t_len}"));
    }
    Ok(())
}

/// The single chunk covering everything.
pub fn whole(n_tok: usize, t_len: usize) -> Vec<ChunkSpan> {
    vec![ChunkSpan {
        text: 0..n_tok,
        audio: 0..t_len,
    }]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Eager, Tape};

    fn small() -> Model {
        let mut c = ModelConfig::desk();
        c.hidden_dim = 32;
        c.ffn_dim = 64;
        c.num_heads = 2;
        c.mel_dim = 4;
        c.prenet_dims = vec![8, 8];
        c.denoiser_hidden = 8;
        c.postnet_channels = 6;
        c.postnet_kernel = 3;
        c.postnet_blocks = 3;
        Model::new(c, 7).unwrap()
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = RngStream::new(seed, 0);
        let n = shape.iter().product();
        Tensor::new(shape, r.normals(n)).unwrap()
    }

    #[test]
    fn embed_inputs_lengths_and_dropout() {
        let m = small();
        let mut e = Eager;
        let net = Net::bind(&mut e, &m);
        let text = TokenSequence::new(vec![1, 2, 3]);
        let empty = Tensor::zeros(&[0, 4]);
        let x = net.embed_inputs(&mut e, &text, &empty, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(x.shape(), &[5, 32]);
        let mel = rand_tensor(&[6, 4], 1);
        let a = net.embed_inputs(&mut e, &text, &mel, &mut RngStream::new(0, 0)).unwrap();
        let b = net.embed_inputs(&mut e, &text, &mel, &mut RngStream::new(0, 0)).unwrap();
        let c = net.embed_inputs(&mut e, &text, &mel, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(a.shape(), &[11, 32]);
        assert_eq!(a, b);
        assert_ne!(a.data()[5 * 32..], c.data()[5 * 32..]);
        assert!(net
            .embed_inputs(&mut e, &TokenSequence::new(vec![16]), &empty, &mut RngStream::new(0, 0))
            .is_err());
    }

    #[test]
    fn decoder_is_causal() {
        let m = small();
        let mut e = Eager;
        let net = Net::bind(&mut e, &m);
        let x = rand_tensor(&[9, 32], 2);
        let mask = Arc::new(AttentionMask::causal(9));
        let base = net.decoder(&mut e, &x, &mask, None, None).unwrap();
        for t in 0..8 {
            let mut y = x.clone();
            for v in &mut y.data_mut()[(t + 1) * 32..] {
                *v += 0.7;
            }
            let out = net.decoder(&mut e, &y, &mask, None, None).unwrap();
            assert_eq!(out.data()[..(t + 1) * 32], base.data()[..(t + 1) * 32]);
        }
        let one = net.decoder(&mut e, &rand_tensor(&[1, 32], 3), &Arc::new(AttentionMask::causal(1)), None, None);
        assert_eq!(one.unwrap().shape(), &[1, 32]);
        let zeros = net
            .decoder(&mut e, &Tensor::zeros(&[4, 32]), &Arc::new(AttentionMask::causal(4)), None, None)
            .unwrap();
        assert!(zeros.all_finite());
        assert!(net.decoder(&mut e, &x, &Arc::new(AttentionMask::causal(4)), None, None).is_err());
    }

    #[test]
    fn cached_decoding_matches_full_pass() {
        let m = small();
        let mut e = Eager;
        let net = Net::bind(&mut e, &m);
        let x = rand_tensor(&[7, 32], 4);
        let full = net.decoder(&mut e, &x, &Arc::new(AttentionMask::causal(7)), None, None).unwrap();
        let mut cache = KvCache::new(m.config.num_blocks);
        let head = x.to_rows()[..3].to_vec();
        let first = net
            .decoder(&mut e, &Tensor::from_rows(&head).unwrap(), &Arc::new(AttentionMask::causal(3)), Some(&mut cache), None)
            .unwrap();
        let mut rows = first.to_rows();
        for t in 3..7 {
            let xt = Tensor::from_rows(&[x.row(t).to_vec()]).unwrap();
            let mask = Arc::new(AttentionMask::causal_with_past(1, cache.len()));
            let out = net.decoder(&mut e, &xt, &mask, Some(&mut cache), None).unwrap();
            rows.push(out.row(0).to_vec());
        }
        for (a, b) in rows.concat().iter().zip(full.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_initialised_residuals_are_identity() {
        let m = small();
        let mut e = Eager;
        let net = Net::bind(&mut e, &m);
        let z = rand_tensor(&[5, 4], 5);
        assert_eq!(net.denoise(&mut e, &z).unwrap(), z);
        assert_eq!(net.postnet(&mut e, &z).unwrap(), z);
        assert!(net.postnet(&mut e, &Tensor::zeros(&[0, 4])).is_err());
        let wide = z.map(|v| v * 100.0);
        let mut mm = m.clone();
        for l in &m.layout.denoiser {
            let w = mm.params.get_mut(l.w);
            *w = rand_tensor(w.shape(), 6);
        }
        let mut e2 = Eager;
        let net2 = Net::bind(&mut e2, &mm);
        assert!(net2.denoise(&mut e2, &wide).unwrap().all_finite());
    }

    #[test]
    fn postnet_receptive_field() {
        let mut m = small();
        for l in m.layout.postnet.clone() {
            let w = m.params.get_mut(l.w);
            *w = rand_tensor(w.shape(), 8);
        }
        let mut e = Eager;
        let net = Net::bind(&mut e, &m);
        let y = rand_tensor(&[30, 4], 9);
        let base = net.postnet(&mut e, &y).unwrap();
        // Three kernel-3 blocks: each side reaches three frames.
        let reach = (m.config.postnet_receptive_field() - 1) / 2;
        let t = 15;
        for s in 0..30 {
            let mut p = y.clone();
            p.data_mut()[s * 4] += 1.0;
            let out = net.postnet(&mut e, &p).unwrap();
            let changed = out.row(t) != base.row(t);
            assert_eq!(changed, s.abs_diff(t) <= reach, "source {s}");
        }
    }

    #[test]
    fn teacher_forced_rows_follow_frames() {
        let m = small();
        let tokens = TokenSequence::new(vec![0, 5, 9, 2]);
        let target = rand_tensor(&[12, 4], 10);
        let mut e = Eager;
        let net = Net::bind(&mut e, &m);
        let run = |net: &Net<'_, Eager>, e: &mut Eager, target: &Tensor| {
            net.teacher_forced(e, &tokens, target, &whole(4, 12), &mut RngStream::new(3, 0), None)
                .unwrap()
        };
        let base = run(&net, &mut e, &target);
        assert_eq!(base.shape(), &[12, 32]);
        // Output j sees target frames < j only.
        let mut later = target.clone();
        for v in &mut later.data_mut()[7 * 4..] {
            *v -= 1.0;
        }
        let out = run(&net, &mut e, &later);
        assert_eq!(out.data()[..8 * 32], base.data()[..8 * 32]);
        assert_ne!(out.data()[8 * 32..], base.data()[8 * 32..]);
        let split = [
            ChunkSpan { text: 0..2, audio: 0..5 },
            ChunkSpan { text: 2..4, audio: 5..12 },
        ];
        let streamed = net
            .teacher_forced(&mut e, &tokens, &target, &split, &mut RngStream::new(3, 0), None)
            .unwrap();
        assert_eq!(streamed.shape(), &[12, 32]);
        let bad = [ChunkSpan { text: 0..3, audio: 0..12 }];
        assert!(net
            .teacher_forced(&mut e, &tokens, &target, &bad, &mut RngStream::new(3, 0), None)
            .is_err());
    }

    #[test]
    fn tape_and_eager_agree() {
        let m = small();
        let tokens = TokenSequence::new(vec![1, 2]);
        let target = rand_tensor(&[5, 4], 11);
        let mut e = Eager;
        let net = Net::bind(&mut e, &m);
        let a = net
            .teacher_forced(&mut e, &tokens, &target, &whole(2, 5), &mut RngStream::new(1, 1), Some(&mut RngStream::new(1, 2)))
            .unwrap();
        let mut tape = Tape::new();
        let tnet = Net::bind(&mut tape, &m);
        let v = tnet
            .teacher_forced(&mut tape, &tokens, &target, &whole(2, 5), &mut RngStream::new(1, 1), Some(&mut RngStream::new(1, 2)))
            .unwrap();
        assert_eq!(tape.value(&v), &a);
    }
}
