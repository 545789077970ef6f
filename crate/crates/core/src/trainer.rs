//! Model assembly, base denoiser pretraining, joint fine-tuning of the motion
//! encoder and motion blocks, and sampling.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::denoiser::{eot_maps, Conditioning, Denoiser, DenoiserConfig};
use crate::diffusion::{ddim_sample, decode_latent, encode_latent, DdimConfig, EpsModel, NoiseSchedule};
use crate::encoders::{EncoderConfig, Encoders, TextEmbedding, TokenSequence, Vocab, Which};
use crate::error::{Error, Result};
use crate::losses::{
    loss_diffusion, loss_reg, loss_text_motion, loss_total, loss_video_motion, reference_flows, LossBreakdown,
    LossLog, LossWeights,
};
use crate::motionfeat::HornSchunck;
use crate::nn::{Group, Groups, ParamStore, Session};
use crate::optim::{clip_grad_norm, Adam, OneCycle};
use crate::synthdata::VideoClip;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            denoiser: DenoiserConfig::default(),
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if self.denoiser.text_dim != self.encoder.d {
            return Err(Error::Config(format!(
                "denoiser text_dim {} must equal encoder width {}",
                self.denoiser.text_dim, self.encoder.d
            )));
        }
        if self.encoder.d % self.encoder.heads != 0 {
            return Err(Error::Config(format!("encoder width {} not divisible by {} heads", self.encoder.d, self.encoder.heads)));
        }
        Ok(())
    }
}

/// Encoders, denoiser and noise schedule sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub enc: Encoders,
    pub unet: Denoiser,
    pub sched: NoiseSchedule,
}

impl Model {
    pub fn new(cfg: &ModelConfig, vocab: Vocab, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = Encoders::new(&mut store, &mut rng, &cfg.encoder, vocab);
        let unet = Denoiser::new(&mut store, &mut rng, &cfg.denoiser)?;
        let sched = NoiseSchedule::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?;
        Ok(Model { cfg: cfg.clone(), store, enc, unet, sched })
    }

    /// Loads the listed groups (every stored group when empty).
    pub fn load_groups(&mut self, ckpt: &Checkpoint, groups: &[Group]) -> Result<()> {
        ckpt.apply(&mut self.store, groups)
    }

    /// Embeddings used to condition sampling of `captions`.
    pub fn condition(&self, captions: &[String], use_motion: bool) -> Result<SampleCond> {
        let seqs = self.enc.tokenize_all(captions)?;
        let s = Session::eval(&self.store);
        let content = self.enc.encode_text(&s, &seqs, Which::Content)?;
        let motion = if use_motion { Some(self.enc.encode_text(&s, &seqs, Which::Motion)?) } else { None };
        Ok(SampleCond { content, seqs, motion })
    }

    /// DDIM samples for `captions`, decoded to `[F, C, H, W]` frames in
    /// `[0, 1]`. All captions share one noise draw from `seed`. With
    /// `use_motion` false the motion blocks are bypassed.
    pub fn sample(&self, captions: &[String], use_motion: bool, ddim: &DdimConfig, seed: u64) -> Result<Vec<Array4<f32>>> {
        if captions.is_empty() {
            return Ok(Vec::new());
        }
        let cond = self.condition(captions, use_motion)?;
        let empty = vec![String::new(); captions.len()];
        let uncond = self.condition(&empty, use_motion)?;
        let d = &self.cfg.denoiser;
        let shape = [captions.len(), d.frames, d.in_channels, d.height, d.width];
        let z = ddim_sample(self, &self.sched, &cond, &uncond, ddim, &shape, seed)?;
        let per = d.frames * d.in_channels * d.height * d.width;
        z.data()
            .chunks(per)
            .map(|c| {
                let a = Array4::from_shape_vec(
                    (d.frames, d.in_channels, d.height, d.width),
                    c.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect(),
                )
                .map_err(|e| Error::Shape(e.to_string()))?;
                decode_latent(a.view())
            })
            .collect()
    }
}

pub struct SampleCond {
    pub content: TextEmbedding,
    pub seqs: Vec<TokenSequence>,
    pub motion: Option<TextEmbedding>,
}

impl EpsModel for Model {
    type Cond = SampleCond;

    fn eps(&self, z_t: &Tensor, t: usize, cond: &SampleCond) -> Result<Tensor> {
        let s = Session::eval(&self.store);
        let c = Conditioning {
            content: &cond.content,
            content_seqs: &cond.seqs,
            motion: cond.motion.as_ref().map(|m| (m, cond.seqs.as_slice())),
        };
        Ok(self.unet.forward(&s, z_t, &vec![t; z_t.dim(0)], &c, false)?.eps)
    }
}

/// Per-clip tensors that stay fixed during training: latents, tokens, frozen
/// content-encoder outputs, middle-frame image embeddings and reference flows
/// at every motion-block resolution.
pub struct TrainData {
    pub captions: Vec<String>,
    pub latents: Vec<Tensor>,
    pub seqs: Vec<TokenSequence>,
    pub content: Vec<Tensor>,
    pub content_pooled: Vec<Tensor>,
    pub image_emb: Vec<Tensor>,
    pub refs: Vec<Vec<Tensor>>,
    pub empty_seq: TokenSequence,
    pub empty_content: TextEmbedding,
}

impl TrainData {
    /// Must be rebuilt whenever the content or image encoder changes.
    pub fn prepare(model: &Model, clips: &[VideoClip]) -> Result<TrainData> {
        if clips.is_empty() {
            return Err(Error::Missing("training clips".into()));
        }
        let d = &model.cfg.denoiser;
        let res = model.unet.motion_block_resolutions();
        let s = Session::eval(&model.store);
        let mut out = TrainData {
            captions: Vec::new(),
            latents: Vec::new(),
            seqs: Vec::new(),
            content: Vec::new(),
            content_pooled: Vec::new(),
            image_emb: Vec::new(),
            refs: Vec::new(),
            empty_seq: model.enc.tokenize("")?,
            empty_content: model.enc.encode_text(&s, &[model.enc.tokenize("")?], Which::Content)?,
        };
        for chunk in clips.chunks(64) {
            for c in chunk {
                let (f, ch, h, w) = c.frames.dim();
                if (f, ch, h, w) != (d.frames, d.in_channels, d.height, d.width) {
                    return Err(Error::Shape(format!(
                        "clip {} is {:?}, model expects {:?}",
                        c.clip_id,
                        (f, ch, h, w),
                        (d.frames, d.in_channels, d.height, d.width)
                    )));
                }
                let z = encode_latent(c.frames.view())?;
                out.latents.push(Tensor::new(z.iter().map(|&v| v as f64).collect(), &[1, f, ch, h, w])?);
                let flow = c.flow_gt.as_ref().ok_or_else(|| Error::Missing(format!("ground-truth flow of {}", c.clip_id)))?;
                out.refs.push(reference_flows(flow.view(), &res)?);
                out.captions.push(c.caption.clone());
            }
            let seqs = model.enc.tokenize_all(&chunk.iter().map(|c| c.caption.as_str()).collect::<Vec<_>>())?;
            let emb = model.enc.encode_text(&s, &seqs, Which::Content)?;
            for i in 0..chunk.len() {
                out.content.push(emb.tokens.narrow(0, i, 1)?.detach());
                out.content_pooled.push(emb.pooled.narrow(0, i, 1)?.detach());
            }
            out.seqs.extend(seqs);
            let frames: Vec<_> = chunk.iter().map(|c| c.middle_frame()).collect();
            let img = model.enc.encode_image(&s, &crate::encoders::stack_frames(&frames)?)?;
            for i in 0..chunk.len() {
                out.image_emb.push(img.select(0, i)?.detach());
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

/// Random draws for one step, taken from the RNG in a fixed order.
struct Batch {
    idx: Vec<usize>,
    ts: Vec<usize>,
    drop: Vec<bool>,
    eps: Tensor,
}

fn draw_batch(rng: &mut ChaCha8Rng, data: &TrainData, b: usize, steps: usize, drop_prob: f64) -> Batch {
    let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.len())).collect();
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(0..steps)).collect();
    let drop: Vec<bool> = (0..b).map(|_| rng.random::<f64>() < drop_prob).collect();
    let mut shape = data.latents[0].shape().to_vec();
    shape[0] = b;
    let eps = Tensor::randn(&shape, rng);
    Batch { idx, ts, drop, eps }
}

impl Batch {
    fn z0(&self, data: &TrainData) -> Result<Tensor> {
        Tensor::cat(&self.idx.iter().map(|&i| data.latents[i].clone()).collect::<Vec<_>>(), 0)
    }

    fn seqs(&self, data: &TrainData) -> Vec<TokenSequence> {
        self.idx
            .iter()
            .zip(&self.drop)
            .map(|(&i, &d)| if d { data.empty_seq.clone() } else { data.seqs[i].clone() })
            .collect()
    }

    /// Frozen content embedding `[B, S, d]` for the (possibly dropped) captions.
    fn content(&self, data: &TrainData) -> Result<TextEmbedding> {
        let pick = |own: &[Tensor], empty: &Tensor| -> Result<Tensor> {
            let rows: Vec<Tensor> =
                self.idx.iter().zip(&self.drop).map(|(&i, &d)| if d { empty.clone() } else { own[i].clone() }).collect();
            Tensor::cat(&rows, 0)
        };
        Ok(TextEmbedding {
            tokens: pick(&data.content, &data.empty_content.tokens)?,
            pooled: pick(&data.content_pooled, &data.empty_content.pooled)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub pct_start: f64,
    pub text_drop_prob: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig {
            steps: 2000,
            batch_size: 4,
            lr_min: 1e-4,
            lr_max: 2e-3,
            pct_start: 0.1,
            text_drop_prob: 0.1,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// Trains the base denoiser (motion blocks bypassed) on noise regression
/// conditioned on the frozen content encoder. Returns the loss per step.
pub fn pretrain_base(model: &mut Model, data: &TrainData, cfg: &BaseConfig) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 || !(0.0..=1.0).contains(&cfg.text_drop_prob) {
        return Err(Error::Config("base pretraining needs batch_size >= 1 and text_drop_prob in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::default();
    let sched = OneCycle { lr_min: cfg.lr_min, lr_max: cfg.lr_max, total_steps: cfg.steps, pct_start: cfg.pct_start };
    let trainable = Groups::of(&[Group::UnetBase]);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let b = draw_batch(&mut rng, data, cfg.batch_size, model.sched.steps(), cfg.text_drop_prob);
        let z0 = b.z0(data)?;
        let seqs = b.seqs(data);
        let content = b.content(data)?;
        let zt = model.sched.forward_diffuse_t(&z0, &b.ts, &b.eps)?;
        let s = Session::new(&model.store, trainable);
        let cond = Conditioning { content: &content, content_seqs: &seqs, motion: None };
        let out = model.unet.forward(&s, &zt, &b.ts, &cond, false)?;
        let loss = loss_diffusion(&b.eps, &out.eps)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("base pretraining loss {value} at step {step}")));
        }
        let mut grads = s.grads(&loss.backward()?);
        drop(s);
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.step(&mut model.store, &grads, sched.lr(step));
        losses.push(value);
    }
    Ok(losses)
}

/// Components that can be switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    TextMotion,
    Reg,
    VideoMotion,
    /// Keeps the motion encoder frozen at its content-encoder copy.
    MotionEncoder,
    /// Bypasses the motion blocks entirely.
    MotionBlocks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr_min: f64,
    pub lr_max: f64,
    pub pct_start: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub text_drop_prob: f64,
    pub seed: u64,
    pub ablation: BTreeSet<Component>,
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub horn_schunck: HornSchunck,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            lr_min: 1e-5,
            lr_max: 5e-5,
            pct_start: 0.3,
            batch_size: 4,
            steps: 2000,
            text_drop_prob: 0.1,
            seed: 0,
            ablation: BTreeSet::new(),
            grad_clip: 1.0,
            checkpoint_every: 500,
            horn_schunck: HornSchunck::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let checks = [
            ((0.0..=1.0).contains(&self.text_drop_prob), "text_drop_prob must lie in [0, 1]"),
            (self.batch_size > 0, "batch_size must be positive"),
            (self.lr_min > 0.0 && self.lr_min <= self.lr_max, "need 0 < lr_min <= lr_max"),
            ((0.0..=1.0).contains(&self.pct_start), "pct_start must lie in [0, 1]"),
            ([w.alpha, w.beta, w.gamma].iter().all(|v| v.is_finite() && *v >= 0.0), "loss weights must be >= 0"),
            (self.grad_clip >= 0.0, "grad_clip must be >= 0"),
            (self.horn_schunck.iters > 0 && self.horn_schunck.lambda > 0.0, "horn_schunck needs iters > 0, lambda > 0"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config(msg.to_string())),
            None => Ok(()),
        }
    }

    pub fn enabled(&self, c: Component) -> bool {
        !self.ablation.contains(&c)
    }

    pub fn trainable(&self) -> Groups {
        let mut g = Vec::new();
        if self.enabled(Component::MotionEncoder) {
            g.push(Group::MotionEncoder);
        }
        if self.enabled(Component::MotionBlocks) {
            g.push(Group::MotionBlocks);
        }
        Groups::of(&g)
    }
}

/// Joint fine-tuning state. Only the motion encoder and motion blocks are
/// ever updated.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub config_hash: String,
    pub opt: Adam,
    pub step: usize,
    pub samples_seen: u64,
    pub samples_dropped: u64,
    pub last_checkpoint: Option<PathBuf>,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerMeta {
    samples_seen: u64,
    samples_dropped: u64,
    train: TrainConfig,
    model: ModelConfig,
}

impl Trainer {
    /// Starts fine-tuning from a model whose content encoder, image encoder
    /// and base denoiser are already trained. The motion encoder becomes a
    /// copy of the content encoder.
    pub fn new(mut model: Model, cfg: TrainConfig, config_hash: &str) -> Result<Trainer> {
        cfg.validate()?;
        model.enc.init_motion_from_content(&mut model.store)?;
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            config_hash: config_hash.to_string(),
            opt: Adam::default(),
            step: 0,
            samples_seen: 0,
            samples_dropped: 0,
            last_checkpoint: None,
        })
    }

    /// Restores weights, optimizer, RNG and counters from a checkpoint
    /// written by [`Trainer::checkpoint`].
    pub fn resume(mut model: Model, cfg: TrainConfig, config_hash: &str, ckpt: &Checkpoint) -> Result<Trainer> {
        cfg.validate()?;
        if ckpt.config_hash != config_hash {
            return Err(Error::Mismatch(format!("config hash {} vs checkpoint {}", config_hash, ckpt.config_hash)));
        }
        ckpt.apply(&mut model.store, &Group::ALL)?;
        let rng = ckpt.rng.as_ref().ok_or_else(|| Error::Missing("rng state in checkpoint".into()))?.restore()?;
        let opt = ckpt.optimizer.clone().ok_or_else(|| Error::Missing("optimizer state in checkpoint".into()))?;
        let meta: TrainerMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Mismatch(format!("trainer metadata: {e}")))?;
        Ok(Trainer {
            model,
            cfg,
            config_hash: config_hash.to_string(),
            opt,
            step: ckpt.step,
            samples_seen: meta.samples_seen,
            samples_dropped: meta.samples_dropped,
            last_checkpoint: None,
            rng,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::capture(&self.model.store, &Group::ALL, self.step, &self.config_hash);
        ck.optimizer = Some(self.opt.clone());
        ck.rng = Some(RngState::capture(&self.rng));
        ck.meta = serde_json::to_value(TrainerMeta {
            samples_seen: self.samples_seen,
            samples_dropped: self.samples_dropped,
            train: self.cfg.clone(),
            model: self.model.cfg.clone(),
        })?;
        Ok(ck)
    }

    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    fn numerical(&self, what: String) -> Error {
        let last = match &self.last_checkpoint {
            Some(p) => format!("last good checkpoint: {}", p.display()),
            None => "no checkpoint written yet".to_string(),
        };
        Error::Numerical(format!("{what} at step {}; {last}", self.step))
    }

    /// One optimization step on a random batch.
    pub fn train_step(&mut self, data: &TrainData) -> Result<LossBreakdown> {
        let cfg = &self.cfg;
        let model = &self.model;
        let b = draw_batch(&mut self.rng, data, cfg.batch_size, model.sched.steps(), cfg.text_drop_prob);
        let bs = cfg.batch_size;
        let z0 = b.z0(data)?;
        let seqs = b.seqs(data);
        let content = b.content(data)?;
        let zt = model.sched.forward_diffuse_t(&z0, &b.ts, &b.eps)?;

        let use_blocks = cfg.enabled(Component::MotionBlocks);
        let use_tm = cfg.enabled(Component::TextMotion) && use_blocks;
        let use_reg = cfg.enabled(Component::Reg);
        let use_vm = cfg.enabled(Component::VideoMotion);

        let s = Session::new(&model.store, cfg.trainable());
        let motion = if use_blocks || use_reg { Some(model.enc.encode_text(&s, &seqs, Which::Motion)?) } else { None };
        let cond = Conditioning {
            content: &content,
            content_seqs: &seqs,
            motion: if use_blocks { motion.as_ref().map(|m| (m, seqs.as_slice())) } else { None },
        };
        let out = model.unet.forward(&s, &zt, &b.ts, &cond, use_tm)?;
        let l_diff = loss_diffusion(&b.eps, &out.eps)?;

        let kept: Vec<usize> = (0..bs).filter(|&i| !b.drop[i]).collect();
        let mean_over_kept = |parts: Vec<Tensor>| -> Result<Option<Tensor>> {
            if parts.is_empty() {
                return Ok(None);
            }
            let n = parts.len() as f64;
            let mut acc = parts[0].clone();
            for p in &parts[1..] {
                acc = acc.add(p)?;
            }
            Ok(Some(acc.scale(1.0 / n)))
        };

        let l_tm = if use_tm && !kept.is_empty() {
            let eot: Vec<usize> = seqs.iter().map(|q| q.eot_index).collect();
            let maps = eot_maps(&out.maps, &eot)?;
            let mut parts = Vec::with_capacity(kept.len());
            for &i in &kept {
                let per: Vec<Tensor> = maps.iter().map(|m| m.select(0, i)).collect::<Result<_>>()?;
                parts.push(loss_text_motion(&per, &data.refs[b.idx[i]], &cfg.horn_schunck)?);
            }
            mean_over_kept(parts)?
        } else {
            None
        };
        let l_reg = match (&motion, use_reg && !kept.is_empty()) {
            (Some(m), true) => {
                let parts = kept
                    .iter()
                    .map(|&i| loss_reg(&m.pooled.select(0, i)?, &data.image_emb[b.idx[i]]))
                    .collect::<Result<Vec<_>>>()?;
                mean_over_kept(parts)?
            }
            _ => None,
        };
        let l_vm = if use_vm {
            let z0_hat = model.sched.predict_x0_t(&zt, &b.ts, &out.eps)?;
            Some(loss_video_motion(&z0, &z0_hat, 1)?)
        } else {
            None
        };

        let w = cfg.weights;
        let mut total = l_diff.clone();
        for (term, weight) in [(&l_tm, w.alpha), (&l_reg, w.beta), (&l_vm, w.gamma)] {
            if let Some(t) = term {
                total = total.add(&t.scale(weight))?;
            }
        }
        let val = |t: &Option<Tensor>| -> Result<f64> { t.as_ref().map_or(Ok(0.0), |t| t.item()) };
        let parts = (l_diff.item()?, val(&l_tm)?, val(&l_reg)?, val(&l_vm)?);
        let breakdown = match loss_total(parts.0, parts.1, parts.2, parts.3, w) {
            Ok(bd) => bd,
            Err(Error::Numerical(m)) => return Err(self.numerical(m)),
            Err(e) => return Err(e),
        };
        for (name, v) in [("text_motion", breakdown.text_motion), ("reg", breakdown.reg)] {
            if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&v) {
                return Err(self.numerical(format!("{name} loss {v} outside [-1, 1]")));
            }
        }

        let mut grads = s.grads(&total.backward()?);
        drop(s);
        if grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(self.numerical("non-finite gradient".into()));
        }
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        let lr = OneCycle {
            lr_min: self.cfg.lr_min,
            lr_max: self.cfg.lr_max,
            total_steps: self.cfg.steps,
            pct_start: self.cfg.pct_start,
        }
        .lr(self.step);
        self.opt.step(&mut self.model.store, &grads, lr);
        self.step += 1;
        self.samples_seen += bs as u64;
        self.samples_dropped += b.drop.iter().filter(|d| **d).count() as u64;
        Ok(breakdown)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// `(step, losses)` for every step run by this call.
    pub losses: Vec<(usize, LossBreakdown)>,
    pub final_checkpoint: Option<PathBuf>,
}

pub fn checkpoint_name(step: usize) -> String {
    format!("step_{step:06}.ckpt")
}

/// Runs the trainer up to `cfg.steps`. With an output directory, writes a
/// checkpoint every `checkpoint_every` steps, a final `final.ckpt`, and
/// `losses.csv`.
pub fn run_training(trainer: &mut Trainer, data: &TrainData, out_dir: Option<&Path>) -> Result<TrainReport> {
    let mut log = match out_dir {
        Some(d) => Some(LossLog::create(&d.join("losses.csv"))?),
        None => None,
    };
    let mut losses = Vec::new();
    while trainer.step < trainer.cfg.steps {
        let lb = trainer.train_step(data)?;
        let step = trainer.step;
        if let Some(l) = log.as_mut() {
            l.push(step, &lb)?;
        }
        losses.push((step, lb));
        if let Some(d) = out_dir {
            let k = trainer.cfg.checkpoint_every;
            if k > 0 && step % k == 0 && step < trainer.cfg.steps {
                if let Some(l) = log.as_mut() {
                    l.flush()?;
                }
                trainer.save_checkpoint(&d.join(checkpoint_name(step)))?;
            }
        }
    }
    let final_checkpoint = match out_dir {
        Some(d) => {
            let p = d.join("final.ckpt");
            trainer.save_checkpoint(&p)?;
            Some(p)
        }
        None => None,
    };
    if let Some(mut l) = log {
        l.flush()?;
    }
    Ok(TrainReport { losses, final_checkpoint })
}
