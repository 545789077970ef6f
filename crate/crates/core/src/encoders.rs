//! Word-level tokenizer, transformer text encoders and a convolutional image
//! encoder, plus symmetric InfoNCE pretraining on (caption, middle frame)
//! pairs.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::ArrayView3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, Conv2d, Embedding, Group, Groups, Init, LayerNorm, Linear, ParamId, ParamStore, Session};
use crate::optim::{clip_grad_norm, Adam};
use crate::synthdata::{corpus_words, VideoClip};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOT: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["[pad]", "[bos]", "[eot]", "[unk]"];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Vocab {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref();
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Vocabulary of the synthetic caption grammar.
    pub fn corpus() -> Vocab {
        Vocab::new(&corpus_words())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(|s| s.as_str()).unwrap_or("[unk]")
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.tokens.join("\n") + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < 4 || tokens[..4] != RESERVED {
            return Err(Error::corrupt(path, "reserved tokens missing"));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocab { tokens, index })
    }

    /// `[bos] words.. [eot] [pad]..`, fixed length `seq_len`. Unknown words
    /// map to `[unk]`.
    pub fn tokenize(&self, caption: &str, seq_len: usize) -> Result<TokenSequence> {
        let words: Vec<&str> = caption.split_whitespace().collect();
        if words.len() + 2 > seq_len {
            return Err(Error::Config(format!("caption of {} words exceeds {} tokens", words.len(), seq_len - 2)));
        }
        let mut ids = Vec::with_capacity(seq_len);
        ids.push(BOS);
        ids.extend(words.iter().map(|w| self.id(w)));
        let eot_index = ids.len();
        ids.push(EOT);
        ids.resize(seq_len, PAD);
        let pad_mask = ids.iter().map(|&i| i == PAD).collect();
        Ok(TokenSequence { ids, eot_index, pad_mask })
    }

    pub fn detokenize(&self, t: &TokenSequence) -> String {
        t.ids[1..t.eot_index].iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub eot_index: usize,
    /// `true` at padding positions.
    pub pad_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub causal: bool,
    /// Channel widths of the image tower.
    pub image_channels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { d: 64, layers: 2, heads: 4, seq_len: 16, causal: false, image_channels: vec![16, 32, 64] }
    }
}

#[derive(Debug, Clone)]
struct TextBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Pre-LN transformer over token embeddings; the `[eot]` row is the pooled
/// sentence embedding.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    tok: Embedding,
    pos: ParamId,
    blocks: Vec<TextBlock>,
    ln_f: LayerNorm,
    cfg: EncoderConfig,
}

/// Batch of encoded sentences.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    /// `[B, S, d]`
    pub tokens: Tensor,
    /// `[B, d]`, the `[eot]` rows.
    pub pooled: Tensor,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, group: Group, vocab: usize, cfg: &EncoderConfig) -> Self {
        let d = cfg.d;
        let tok = Embedding::new(store, rng, &format!("{prefix}.tok"), group, vocab, d);
        let pos = store.add(&format!("{prefix}.pos"), group, &[cfg.seq_len, d], Init::Normal(0.02), rng);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("{prefix}.block{i}");
                TextBlock {
                    ln1: LayerNorm::new(store, rng, &format!("{p}.ln1"), group, d),
                    attn: Attention::new(store, rng, &format!("{p}.attn"), group, d, d, d, cfg.heads),
                    ln2: LayerNorm::new(store, rng, &format!("{p}.ln2"), group, d),
                    fc1: Linear::new(store, rng, &format!("{p}.fc1"), group, d, 4 * d, true),
                    fc2: Linear::new(store, rng, &format!("{p}.fc2"), group, 4 * d, d, true),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(store, rng, &format!("{prefix}.ln_f"), group, d);
        TextEncoder { tok, pos, blocks, ln_f, cfg: cfg.clone() }
    }

    pub fn forward(&self, s: &Session, seqs: &[TokenSequence]) -> Result<TextEmbedding> {
        let (b, n, d) = (seqs.len(), self.cfg.seq_len, self.cfg.d);
        if b == 0 {
            return Err(Error::Shape("empty token batch".into()));
        }
        let mut ids = Vec::with_capacity(b * n);
        let mut mask = vec![0.0; b * n * n];
        for (bi, t) in seqs.iter().enumerate() {
            if t.ids.len() != n {
                return Err(Error::Shape(format!("sequence of {} tokens, expected {n}", t.ids.len())));
            }
            ids.extend_from_slice(&t.ids);
            for q in 0..n {
                for k in 0..n {
                    if t.pad_mask[k] || (self.cfg.causal && k > q) {
                        mask[(bi * n + q) * n + k] = -1e9;
                    }
                }
            }
        }
        let mask = Tensor::new(mask, &[b, 1, n, n])?;
        let mut x = self.tok.forward(s, &ids)?.reshape(&[b, n, d])?.add(&s.param(self.pos))?;
        for blk in &self.blocks {
            let (a, _) = blk.attn.forward(s, &blk.ln1.forward(s, &x)?, None, Some(&mask), false)?;
            x = x.add(&a)?;
            let h = blk.fc2.forward(s, &blk.fc1.forward(s, &blk.ln2.forward(s, &x)?)?.gelu())?;
            x = x.add(&h)?;
        }
        let tokens = self.ln_f.forward(s, &x)?;
        let rows: Vec<usize> = seqs.iter().enumerate().map(|(i, t)| i * n + t.eot_index).collect();
        let pooled = tokens.reshape(&[b * n, d])?.index_select(&rows)?;
        Ok(TextEmbedding { tokens, pooled })
    }
}

/// Small conv tower, global average pool, linear projection.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    convs: Vec<Conv2d>,
    proj: Linear,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, group: Group, cfg: &EncoderConfig) -> Self {
        let mut cin = 3;
        let convs = cfg
            .image_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(store, rng, &format!("{prefix}.conv{i}"), group, cin, c, 3);
                cin = c;
                conv
            })
            .collect();
        let proj = Linear::new(store, rng, &format!("{prefix}.proj"), group, cin, cfg.d, true);
        ImageEncoder { convs, proj }
    }

    /// `frames [N, 3, H, W]` in `[0, 1]` to `[N, d]`.
    pub fn forward(&self, s: &Session, frames: &Tensor) -> Result<Tensor> {
        if frames.rank() != 4 || frames.dim(1) != 3 {
            return Err(Error::Shape(format!("image encoder expects [N, 3, H, W], got {:?}", frames.shape())));
        }
        let mut x = frames.affine(2.0, -1.0);
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(s, &x)?.silu();
            let (h, w) = (x.dim(2), x.dim(3));
            if i + 1 < self.convs.len() && h % 2 == 0 && w % 2 == 0 && h > 4 {
                x = x.avg_pool(2)?;
            }
        }
        let (n, c) = (x.dim(0), x.dim(1));
        let pooled = x.reshape(&[n, c, x.dim(2) * x.dim(3)])?.mean_keepdim(2)?.reshape(&[n, c])?;
        self.proj.forward(s, &pooled)
    }
}

/// Content, motion and image towers sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub cfg: EncoderConfig,
    pub vocab: Vocab,
    pub content: TextEncoder,
    pub motion: TextEncoder,
    pub image: ImageEncoder,
    /// Learnable log inverse temperature of the contrastive objective.
    pub logit_scale: ParamId,
}

pub const CONTENT_PREFIX: &str = "content_encoder";
pub const MOTION_PREFIX: &str = "motion_encoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Content,
    Motion,
}

impl Encoders {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &EncoderConfig, vocab: Vocab) -> Self {
        let content = TextEncoder::new(store, rng, CONTENT_PREFIX, Group::ContentEncoder, vocab.len(), cfg);
        let motion = TextEncoder::new(store, rng, MOTION_PREFIX, Group::MotionEncoder, vocab.len(), cfg);
        let image = ImageEncoder::new(store, rng, "image_encoder", Group::ImageEncoder, cfg);
        let logit_scale = store.add("image_encoder.logit_scale", Group::ImageEncoder, &[1], Init::Zeros, rng);
        store.value_mut(logit_scale)[0] = (1.0f64 / 0.07).ln();
        Encoders { cfg: cfg.clone(), vocab, content, motion, image, logit_scale }
    }

    /// Overwrites the motion encoder with the content encoder's weights.
    pub fn init_motion_from_content(&self, store: &mut ParamStore) -> Result<()> {
        let n = store.copy_prefix(CONTENT_PREFIX, MOTION_PREFIX)?;
        if n == 0 {
            return Err(Error::Missing("content encoder parameters".into()));
        }
        Ok(())
    }

    pub fn tokenize(&self, caption: &str) -> Result<TokenSequence> {
        self.vocab.tokenize(caption, self.cfg.seq_len)
    }

    pub fn tokenize_all<S: AsRef<str>>(&self, captions: &[S]) -> Result<Vec<TokenSequence>> {
        captions.iter().map(|c| self.tokenize(c.as_ref())).collect()
    }

    pub fn encode_text(&self, s: &Session, seqs: &[TokenSequence], which: Which) -> Result<TextEmbedding> {
        match which {
            Which::Content => self.content.forward(s, seqs),
            Which::Motion => self.motion.forward(s, seqs),
        }
    }

    pub fn encode_image(&self, s: &Session, frames: &Tensor) -> Result<Tensor> {
        self.image.forward(s, frames)
    }

    /// Pooled embeddings of `captions` in evaluation mode, one row each.
    pub fn pooled(&self, store: &ParamStore, captions: &[String], which: Which) -> Result<Vec<Vec<f64>>> {
        let s = Session::eval(store);
        let mut out = Vec::with_capacity(captions.len());
        for chunk in captions.chunks(256) {
            let e = self.encode_text(&s, &self.tokenize_all(chunk)?, which)?;
            out.extend(e.pooled.data().chunks(self.cfg.d).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    /// Image embeddings of single frames in evaluation mode.
    pub fn image_embeddings(&self, store: &ParamStore, frames: &[ArrayView3<f32>]) -> Result<Vec<Vec<f64>>> {
        let s = Session::eval(store);
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(64) {
            let e = self.encode_image(&s, &stack_frames(chunk)?)?;
            out.extend(e.data().chunks(self.cfg.d).map(|r| r.to_vec()));
        }
        Ok(out)
    }
}

/// Stacks `[C, H, W]` frames into an `[N, C, H, W]` tensor.
pub fn stack_frames(frames: &[ArrayView3<f32>]) -> Result<Tensor> {
    let first = frames.first().ok_or_else(|| Error::Shape("no frames".into()))?;
    let (c, h, w) = first.dim();
    let mut data = Vec::with_capacity(frames.len() * c * h * w);
    for f in frames {
        if f.dim() != (c, h, w) {
            return Err(Error::Shape(format!("frame {:?} vs {:?}", f.dim(), (c, h, w))));
        }
        data.extend(f.iter().map(|&v| v as f64));
    }
    Tensor::new(data, &[frames.len(), c, h, w])
}

/// Rows scaled to unit L2 norm.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    x.div(&x.sqr().sum_keepdim(1)?.affine(1.0, 1e-12).sqrt())
}

/// Symmetric InfoNCE over matched rows of `text [B, d]` and `image [B, d]`.
pub fn info_nce(text: &Tensor, image: &Tensor, logit_scale: &Tensor) -> Result<Tensor> {
    let b = text.dim(0);
    if b < 2 {
        return Err(Error::Config(format!("contrastive batch needs at least 2 pairs, got {b}")));
    }
    let t = l2_normalize_rows(text)?;
    let i = l2_normalize_rows(image)?;
    let scale = logit_scale.clamp(0.0, 100f64.ln()).exp();
    let logits = t.matmul(&i.transpose(0, 1)?)?.mul(&scale)?;
    let eye = Tensor::new((0..b * b).map(|k| if k / b == k % b { 1.0 } else { 0.0 }).collect(), &[b, b])?;
    let l_t = logits.log_softmax_last()?.mul(&eye)?.sum_all();
    let l_i = logits.transpose(0, 1)?.log_softmax_last()?.mul(&eye)?.sum_all();
    Ok(l_t.add(&l_i)?.scale(-0.5 / b as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    /// Seeds both weight initialization and batch order.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 1500, batch_size: 32, lr: 1e-3, grad_clip: 1.0, seed: 0 }
    }
}

/// Trains the content text tower and the image tower contrastively on
/// (caption, middle frame) pairs. Returns the loss per step.
pub fn pretrain_contrastive<R: Rng + ?Sized>(
    enc: &Encoders,
    store: &mut ParamStore,
    clips: &[VideoClip],
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if cfg.batch_size < 2 {
        return Err(Error::Config(format!("contrastive batch needs at least 2 pairs, got {}", cfg.batch_size)));
    }
    if clips.len() < cfg.batch_size {
        return Err(Error::Config(format!("{} clips for batch size {}", clips.len(), cfg.batch_size)));
    }
    let seqs = enc.tokenize_all(&clips.iter().map(|c| c.caption.as_str()).collect::<Vec<_>>())?;
    let trainable = Groups::of(&[Group::ContentEncoder, Group::ImageEncoder]);
    let mut opt = Adam::default();
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let s = Session::new(store, trainable);
        let batch_seqs: Vec<TokenSequence> = idx.iter().map(|&i| seqs[i].clone()).collect();
        let frames: Vec<ArrayView3<f32>> = idx.iter().map(|&i| clips[i].middle_frame()).collect();
        let text = enc.content.forward(&s, &batch_seqs)?.pooled;
        let image = enc.image.forward(&s, &stack_frames(&frames)?)?;
        let loss = info_nce(&text, &image, &s.param(enc.logit_scale))?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Numerical("non-finite contrastive loss".into()));
        }
        let mut grads = s.grads(&loss.backward()?);
        drop(s);
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.step(store, &grads, cfg.lr);
        losses.push(value);
    }
    Ok(losses)
}

/// Top-1 caption-to-image retrieval. A hit is counted when the retrieved
/// image is the caption's own pair (`exact`) or shows the same content as it
/// (`content`, judged by `same_content(i, j)`).
pub fn retrieval_accuracy(
    text: &[Vec<f64>],
    image: &[Vec<f64>],
    same_content: impl Fn(usize, usize) -> bool,
) -> Result<(f64, f64)> {
    if text.len() != image.len() || text.is_empty() {
        return Err(Error::Shape(format!("{} captions vs {} images", text.len(), image.len())));
    }
    let norm = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let t: Vec<Vec<f64>> = text.iter().map(norm).collect();
    let im: Vec<Vec<f64>> = image.iter().map(norm).collect();
    let (mut exact, mut content) = (0usize, 0usize);
    for (i, tv) in t.iter().enumerate() {
        let best = im
            .iter()
            .enumerate()
            .map(|(j, iv)| (j, tv.iter().zip(iv).map(|(a, b)| a * b).sum::<f64>()))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
            .0;
        exact += (best == i) as usize;
        content += same_content(i, best) as usize;
    }
    let n = t.len() as f64;
    Ok((exact as f64 / n, content as f64 / n))
}
