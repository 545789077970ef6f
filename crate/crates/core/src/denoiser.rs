//! Factorized spatio-temporal U-Net noise predictor.
//!
//! Features are kept as `[B*F, C, H, W]` (frames of one sample contiguous).
//! Spatial transformers attend within each frame and cross-attend to the
//! content text tokens. Temporal transformers attend across frames at each
//! location. Motion blocks are temporal transformers whose cross-attention
//! keys come from the motion text tokens; their attention maps can be
//! captured.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{TextEmbedding, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal, Attention, Conv2d, GegluFf, Group, GroupNorm, LayerNorm, Linear, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub heads: usize,
    /// Spatial sizes at which transformer stacks run.
    pub attn_resolutions: Vec<usize>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub text_dim: usize,
    pub norm_groups: usize,
    /// Hidden width of transformer feed-forward layers, as a multiple of the
    /// channel count.
    pub ff_mult: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            in_channels: 3,
            base_channels: 32,
            channel_mult: vec![1, 2],
            heads: 4,
            attn_resolutions: vec![16],
            frames: 16,
            height: 32,
            width: 32,
            text_dim: 64,
            norm_groups: 8,
            ff_mult: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mult.len();
        if levels == 0 {
            return Err(Error::Config("channel_mult must not be empty".into()));
        }
        let scale = 1 << (levels - 1);
        if self.height % scale != 0 || self.width % scale != 0 {
            return Err(Error::Config(format!("{}x{} not divisible by {scale}", self.height, self.width)));
        }
        let sizes: Vec<usize> = (0..levels).map(|l| self.height >> l).collect();
        for r in &self.attn_resolutions {
            if !sizes.contains(r) {
                return Err(Error::Config(format!("attention resolution {r} not among feature sizes {sizes:?}")));
            }
        }
        for m in &self.channel_mult {
            let c = self.base_channels * m;
            if c % self.heads != 0 || c % self.norm_groups != 0 {
                return Err(Error::Config(format!("width {c} must divide by heads {} and groups {}", self.heads, self.norm_groups)));
            }
        }
        if self.frames < 2 {
            return Err(Error::Config("need at least 2 frames".into()));
        }
        if self.ff_mult == 0 {
            return Err(Error::Config("ff_mult must be positive".into()));
        }
        Ok(())
    }

    fn time_dim(&self) -> usize {
        4 * self.base_channels
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    n1: GroupNorm,
    c1: Conv2d,
    temb: Linear,
    n2: GroupNorm,
    c2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize, tdim: usize, groups: usize) -> Self {
        let g = Group::UnetBase;
        let gin = if cin % groups == 0 { groups } else { 1 };
        ResBlock {
            n1: GroupNorm::new(store, rng, &format!("{name}.norm1"), g, gin, cin),
            c1: Conv2d::new(store, rng, &format!("{name}.conv1"), g, cin, cout, 3),
            temb: Linear::new(store, rng, &format!("{name}.temb"), g, tdim, cout, true),
            n2: GroupNorm::new(store, rng, &format!("{name}.norm2"), g, groups, cout),
            c2: Conv2d::zeros(store, rng, &format!("{name}.conv2"), g, cout, cout, 3),
            skip: (cin != cout).then(|| Conv2d::new(store, rng, &format!("{name}.skip"), g, cin, cout, 1)),
        }
    }

    /// `temb` is `[B*F, tdim]`.
    fn forward(&self, s: &Session, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(s, &self.n1.forward(s, x)?.silu())?;
        let t = self.temb.forward(s, &temb.silu())?;
        let t = t.reshape(&[t.dim(0), t.dim(1), 1, 1])?;
        let h = h.add(&t)?;
        let h = self.c2.forward(s, &self.n2.forward(s, &h)?.silu())?;
        let skip = match &self.skip {
            Some(c) => c.forward(s, x)?,
            None => x.clone(),
        };
        skip.add(&h)
    }
}

/// Key-padding mask as an additive bias `[rows, 1, 1, S]`, each sample's row
/// repeated `repeat` times.
fn key_mask(seqs: &[TokenSequence], repeat: usize) -> Result<Tensor> {
    let s = seqs.first().map_or(0, |t| t.ids.len());
    let mut data = Vec::with_capacity(seqs.len() * repeat * s);
    for t in seqs {
        let row: Vec<f64> = t.pad_mask.iter().map(|&p| if p { -1e9 } else { 0.0 }).collect();
        for _ in 0..repeat {
            data.extend_from_slice(&row);
        }
    }
    Tensor::new(data, &[seqs.len() * repeat, 1, 1, s])
}

fn repeat_rows(x: &Tensor, times: usize) -> Result<Tensor> {
    if times == 1 {
        Ok(x.clone())
    } else {
        x.repeat_interleave0(times)
    }
}

#[derive(Debug, Clone)]
struct SpatialTransformer {
    norm: GroupNorm,
    proj_in: Linear,
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ff: GegluFf,
    proj_out: Linear,
}

impl SpatialTransformer {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, c: usize, cfg: &DenoiserConfig) -> Self {
        let g = Group::UnetBase;
        SpatialTransformer {
            norm: GroupNorm::new(store, rng, &format!("{name}.norm"), g, cfg.norm_groups, c),
            proj_in: Linear::new(store, rng, &format!("{name}.proj_in"), g, c, c, true),
            ln1: LayerNorm::new(store, rng, &format!("{name}.ln1"), g, c),
            self_attn: Attention::new(store, rng, &format!("{name}.attn1"), g, c, c, c, cfg.heads),
            ln2: LayerNorm::new(store, rng, &format!("{name}.ln2"), g, c),
            cross_attn: Attention::new(store, rng, &format!("{name}.attn2"), g, c, cfg.text_dim, c, cfg.heads),
            ln3: LayerNorm::new(store, rng, &format!("{name}.ln3"), g, c),
            ff: GegluFf::new(store, rng, &format!("{name}.ff"), g, c, cfg.ff_mult),
            proj_out: Linear::zeros(store, rng, &format!("{name}.proj_out"), g, c, c),
        }
    }

    /// `ctx` is `[B*F, S, d]`, `mask` `[B*F, 1, 1, S]`.
    fn forward(&self, s: &Session, x: &Tensor, ctx: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let tok = self.norm.forward(s, x)?.reshape(&[n, c, h * w])?.transpose(1, 2)?;
        let mut t = self.proj_in.forward(s, &tok)?;
        t = t.add(&self.self_attn.forward(s, &self.ln1.forward(s, &t)?, None, None, false)?.0)?;
        t = t.add(&self.cross_attn.forward(s, &self.ln2.forward(s, &t)?, Some(ctx), Some(mask), false)?.0)?;
        t = t.add(&self.ff.forward(s, &self.ln3.forward(s, &t)?)?)?;
        let out = self.proj_out.forward(s, &t)?.transpose(1, 2)?.reshape(&[n, c, h, w])?;
        x.add(&out)
    }
}

/// Temporal transformer at one resolution. With `cross` set it is a motion
/// block: frames at each location cross-attend to the motion text tokens.
#[derive(Debug, Clone)]
struct TemporalTransformer {
    norm: GroupNorm,
    proj_in: Linear,
    ln1: LayerNorm,
    self_attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ln3: LayerNorm,
    ff: GegluFf,
    proj_out: Linear,
    /// Sinusoidal encodings: `[F, C]` over frames, `[HW, 1, C]` over space.
    pe_time: Tensor,
    pe_space: Option<Tensor>,
}

impl TemporalTransformer {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: Group,
        c: usize,
        res: (usize, usize),
        motion: bool,
        cfg: &DenoiserConfig,
    ) -> Self {
        let frames: Vec<f64> = (0..cfg.frames).map(|f| f as f64).collect();
        let pe_time = Tensor::new(sinusoidal(&frames, c), &[cfg.frames, c]).expect("sized");
        let pe_space = motion.then(|| {
            let (h, w) = res;
            let half = c / 2;
            let ys: Vec<f64> = (0..h).map(|v| v as f64).collect();
            let xs: Vec<f64> = (0..w).map(|v| v as f64).collect();
            let (ey, ex) = (sinusoidal(&ys, half), sinusoidal(&xs, c - half));
            let mut pe = Vec::with_capacity(h * w * c);
            for y in 0..h {
                for x in 0..w {
                    pe.extend_from_slice(&ey[y * half..(y + 1) * half]);
                    pe.extend_from_slice(&ex[x * (c - half)..(x + 1) * (c - half)]);
                }
            }
            Tensor::new(pe, &[h * w, 1, c]).expect("sized")
        });
        TemporalTransformer {
            norm: GroupNorm::new(store, rng, &format!("{name}.norm"), group, cfg.norm_groups, c),
            proj_in: Linear::new(store, rng, &format!("{name}.proj_in"), group, c, c, true),
            ln1: LayerNorm::new(store, rng, &format!("{name}.ln1"), group, c),
            self_attn: Attention::new(store, rng, &format!("{name}.attn1"), group, c, c, c, cfg.heads),
            cross: motion.then(|| {
                (
                    LayerNorm::new(store, rng, &format!("{name}.ln2"), group, c),
                    Attention::new(store, rng, &format!("{name}.attn2"), group, c, cfg.text_dim, c, cfg.heads),
                )
            }),
            ln3: LayerNorm::new(store, rng, &format!("{name}.ln3"), group, c),
            ff: GegluFf::new(store, rng, &format!("{name}.ff"), group, c, cfg.ff_mult),
            proj_out: Linear::zeros(store, rng, &format!("{name}.proj_out"), group, c, c),
            pe_time,
            pe_space,
        }
    }

    /// Returns the new features and, when `capture` is set, the head-averaged
    /// cross-attention map `[B, H, W, F, S]`.
    fn forward(
        &self,
        s: &Session,
        x: &Tensor,
        b: usize,
        ctx: Option<(&Tensor, &Tensor)>,
        capture: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let f = n / b;
        let hw = h * w;
        // [B*F, C, H, W] -> [B, HW, F, C]
        let tok = self.norm.forward(s, x)?.reshape(&[b, f, c, hw])?.permute(&[0, 3, 1, 2])?;
        let mut t = self.proj_in.forward(s, &tok)?.add(&self.pe_time)?;
        if let Some(pe) = &self.pe_space {
            t = t.add(pe)?;
        }
        let mut t = t.reshape(&[b * hw, f, c])?;
        t = t.add(&self.self_attn.forward(s, &self.ln1.forward(s, &t)?, None, None, false)?.0)?;
        let mut map = None;
        if let Some((ln, attn)) = &self.cross {
            let (tokens, mask) = ctx.ok_or_else(|| Error::Shape("motion block without motion tokens".into()))?;
            let (a, p) = attn.forward(s, &ln.forward(s, &t)?, Some(tokens), Some(mask), capture)?;
            t = t.add(&a)?;
            if let Some(p) = p {
                let sl = p.dim(2);
                map = Some(p.reshape(&[b, h, w, f, sl])?);
            }
        }
        t = t.add(&self.ff.forward(s, &self.ln3.forward(s, &t)?)?)?;
        let out = self.proj_out.forward(s, &t)?.reshape(&[b, hw, f, c])?.permute(&[0, 2, 3, 1])?.reshape(&[n, c, h, w])?;
        Ok((x.add(&out)?, map))
    }
}

#[derive(Debug, Clone)]
struct AttnStack {
    spatial: SpatialTransformer,
    temporal: TemporalTransformer,
    motion: TemporalTransformer,
}

#[derive(Debug, Clone)]
struct Level {
    res: ResBlock,
    attn: Option<AttnStack>,
}

/// Conditioning for one denoiser pass.
pub struct Conditioning<'a> {
    pub content: &'a TextEmbedding,
    pub content_seqs: &'a [TokenSequence],
    /// `None` skips the motion blocks entirely.
    pub motion: Option<(&'a TextEmbedding, &'a [TokenSequence])>,
}

pub struct DenoiserOutput {
    /// `[B, F, C, H, W]`
    pub eps: Tensor,
    /// One `[B, Hi, Wi, F, S]` map per motion block, in network order.
    pub maps: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    t_proj1: Linear,
    t_proj2: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    downsample: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: Option<AttnStack>,
    mid2: ResBlock,
    up: Vec<Level>,
    upsample: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let g = Group::UnetBase;
        let c0 = cfg.base_channels;
        let tdim = cfg.time_dim();
        let widths: Vec<usize> = cfg.channel_mult.iter().map(|m| m * c0).collect();
        let levels = widths.len();
        let stack = |store: &mut ParamStore, rng: &mut R, name: &str, c: usize, res: usize| -> Option<AttnStack> {
            cfg.attn_resolutions.contains(&res).then(|| {
                let hw = (res, cfg.width * res / cfg.height);
                AttnStack {
                    spatial: SpatialTransformer::new(store, rng, &format!("unet.{name}.spatial"), c, cfg),
                    temporal: TemporalTransformer::new(store, rng, &format!("unet.{name}.temporal"), g, c, hw, false, cfg),
                    motion: TemporalTransformer::new(
                        store,
                        rng,
                        &format!("motion_blocks.{name}"),
                        Group::MotionBlocks,
                        c,
                        hw,
                        true,
                        cfg,
                    ),
                }
            })
        };
        let t_proj1 = Linear::new(store, rng, "unet.time.fc1", g, c0, tdim, true);
        let t_proj2 = Linear::new(store, rng, "unet.time.fc2", g, tdim, tdim, true);
        let conv_in = Conv2d::new(store, rng, "unet.conv_in", g, cfg.in_channels, c0, 3);
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut cin = c0;
        for (l, &c) in widths.iter().enumerate() {
            let res = cfg.height >> l;
            let name = format!("down{l}");
            down.push(Level {
                res: ResBlock::new(store, rng, &format!("unet.{name}.res"), cin, c, tdim, cfg.norm_groups),
                attn: stack(store, rng, &name, c, res),
            });
            if l + 1 < levels {
                downsample.push(Conv2d::new(store, rng, &format!("unet.{name}.downsample"), g, c, c, 3));
            }
            cin = c;
        }
        let cm = *widths.last().unwrap();
        let mid_res = cfg.height >> (levels - 1);
        let mid1 = ResBlock::new(store, rng, "unet.mid.res1", cm, cm, tdim, cfg.norm_groups);
        let mid_attn = stack(store, rng, "mid", cm, mid_res);
        let mid2 = ResBlock::new(store, rng, "unet.mid.res2", cm, cm, tdim, cfg.norm_groups);
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        let mut cur = cm;
        for l in (0..levels).rev() {
            let c = widths[l];
            let res = cfg.height >> l;
            let name = format!("up{l}");
            up.push(Level {
                res: ResBlock::new(store, rng, &format!("unet.{name}.res"), cur + c, c, tdim, cfg.norm_groups),
                attn: stack(store, rng, &name, c, res),
            });
            if l > 0 {
                upsample.push(Conv2d::new(store, rng, &format!("unet.{name}.upsample"), g, c, c, 3));
            }
            cur = c;
        }
        let norm_out = GroupNorm::new(store, rng, "unet.norm_out", g, cfg.norm_groups, c0);
        let conv_out = Conv2d::new(store, rng, "unet.conv_out", g, c0, cfg.in_channels, 3);
        Ok(Denoiser { cfg: cfg.clone(), t_proj1, t_proj2, conv_in, down, downsample, mid1, mid_attn, mid2, up, upsample, norm_out, conv_out })
    }

    /// Number of motion blocks (captured maps per pass).
    pub fn motion_block_count(&self) -> usize {
        self.down.iter().chain(&self.up).filter(|l| l.attn.is_some()).count() + self.mid_attn.is_some() as usize
    }

    /// Spatial size of every motion block, in capture order.
    pub fn motion_block_resolutions(&self) -> Vec<(usize, usize)> {
        let cfg = &self.cfg;
        let levels = cfg.channel_mult.len();
        let mut out = Vec::new();
        let hw = |l: usize| (cfg.height >> l, cfg.width >> l);
        for (l, lv) in self.down.iter().enumerate() {
            if lv.attn.is_some() {
                out.push(hw(l));
            }
        }
        if self.mid_attn.is_some() {
            out.push(hw(levels - 1));
        }
        for (i, lv) in self.up.iter().enumerate() {
            if lv.attn.is_some() {
                out.push(hw(levels - 1 - i));
            }
        }
        out
    }

    /// Predicts noise for `z [B, F, C, H, W]` at per-sample steps `ts`.
    pub fn forward(&self, s: &Session, z: &Tensor, ts: &[usize], cond: &Conditioning, capture: bool) -> Result<DenoiserOutput> {
        let cfg = &self.cfg;
        let zs = z.shape();
        if zs.len() != 5 || zs[1] != cfg.frames || zs[2] != cfg.in_channels || zs[3] != cfg.height || zs[4] != cfg.width {
            return Err(Error::Shape(format!(
                "denoiser expects [B, {}, {}, {}, {}], got {zs:?}",
                cfg.frames, cfg.in_channels, cfg.height, cfg.width
            )));
        }
        let (b, f) = (zs[0], zs[1]);
        if ts.len() != b || cond.content_seqs.len() != b || cond.content.tokens.dim(0) != b {
            return Err(Error::Shape(format!("batch {b} with {} timesteps / {} captions", ts.len(), cond.content_seqs.len())));
        }
        if cond.content.tokens.dim(2) != cfg.text_dim {
            return Err(Error::Shape(format!("text dim {} vs {}", cond.content.tokens.dim(2), cfg.text_dim)));
        }

        let tsf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let temb = Tensor::new(sinusoidal(&tsf, cfg.base_channels), &[b, cfg.base_channels])?;
        let temb = self.t_proj2.forward(s, &self.t_proj1.forward(s, &temb)?.silu())?;
        let temb = repeat_rows(&temb, f)?;

        let content_ctx = repeat_rows(&cond.content.tokens, f)?;
        let content_mask = key_mask(cond.content_seqs, f)?;
        let mut motion_ctx: Vec<(usize, Tensor, Tensor)> = Vec::new();
        let mut motion_for = |hw: usize| -> Result<Option<(Tensor, Tensor)>> {
            let Some((emb, seqs)) = cond.motion else { return Ok(None) };
            if let Some((_, t, m)) = motion_ctx.iter().find(|(k, _, _)| *k == hw) {
                return Ok(Some((t.clone(), m.clone())));
            }
            let t = repeat_rows(&emb.tokens, hw)?;
            let m = key_mask(seqs, hw)?;
            motion_ctx.push((hw, t.clone(), m.clone()));
            Ok(Some((t, m)))
        };
        let mut maps = Vec::new();
        let mut run_stack = |stack: &AttnStack, x: Tensor, maps: &mut Vec<Tensor>| -> Result<Tensor> {
            let x = stack.spatial.forward(s, &x, &content_ctx, &content_mask)?;
            let (x, _) = stack.temporal.forward(s, &x, b, None, false)?;
            match motion_for(x.dim(2) * x.dim(3))? {
                Some((tok, mask)) => {
                    let (x, map) = stack.motion.forward(s, &x, b, Some((&tok, &mask)), capture)?;
                    maps.extend(map);
                    Ok(x)
                }
                None => Ok(x),
            }
        };

        let mut h = self.conv_in.forward(s, &z.reshape(&[b * f, cfg.in_channels, cfg.height, cfg.width])?)?;
        let mut skips = Vec::new();
        for (l, lv) in self.down.iter().enumerate() {
            h = lv.res.forward(s, &h, &temb)?;
            if let Some(st) = &lv.attn {
                h = run_stack(st, h, &mut maps)?;
            }
            skips.push(h.clone());
            if let Some(ds) = self.downsample.get(l) {
                h = ds.forward(s, &h.avg_pool(2)?)?;
            }
        }
        h = self.mid1.forward(s, &h, &temb)?;
        if let Some(st) = &self.mid_attn {
            h = run_stack(st, h, &mut maps)?;
        }
        h = self.mid2.forward(s, &h, &temb)?;
        for (i, lv) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = lv.res.forward(s, &Tensor::cat(&[h, skip], 1)?, &temb)?;
            if let Some(st) = &lv.attn {
                h = run_stack(st, h, &mut maps)?;
            }
            if let Some(us) = self.upsample.get(i) {
                h = us.forward(s, &h.upsample_nearest(2)?)?;
            }
        }
        let out = self.conv_out.forward(s, &self.norm_out.forward(s, &h)?.silu())?;
        let eps = out.reshape(&[b, f, cfg.in_channels, cfg.height, cfg.width])?;
        Ok(DenoiserOutput { eps, maps })
    }
}

/// The `[eot]` slice `[B, Hi, Wi, F]` of every captured map.
pub fn eot_maps(maps: &[Tensor], eot_index: &[usize]) -> Result<Vec<Tensor>> {
    maps.iter()
        .map(|m| {
            let sh = m.shape();
            if sh.len() != 5 || sh[0] != eot_index.len() {
                return Err(Error::Shape(format!("map {sh:?} with {} eot indices", eot_index.len())));
            }
            let (b, h, w, f, sl) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
            if let Some(&bad) = eot_index.iter().find(|&&e| e >= sl) {
                return Err(Error::Shape(format!("eot index {bad} outside {sl} keys")));
            }
            let rows: Vec<usize> = (0..b)
                .flat_map(|bi| (0..h * w * f).map(move |r| (bi * h * w * f + r) * sl + eot_index[bi]))
                .collect();
            m.reshape(&[b * h * w * f * sl, 1])?.index_select(&rows)?.reshape(&[b, h, w, f])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderConfig, Encoders, Vocab, Which};
    use crate::nn::Groups;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 8,
            frames: 3,
            height: 8,
            width: 8,
            attn_resolutions: vec![4],
            text_dim: 8,
            heads: 2,
            norm_groups: 4,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = DenoiserConfig { attn_resolutions: vec![5], ..small() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn eot_slice_matches_indexing() {
        let data: Vec<f64> = (0..2 * 2 * 2 * 3).map(|v| v as f64).collect();
        let m = Tensor::new(data.clone(), &[1, 2, 2, 2, 3]).unwrap();
        let e = eot_maps(&[m], &[1]).unwrap();
        assert_eq!(e[0].shape(), &[1, 2, 2, 2]);
        for (k, v) in e[0].data().iter().enumerate() {
            assert_eq!(*v, data[k * 3 + 1]);
        }
        assert!(eot_maps(&[Tensor::zeros(&[1, 2, 2, 2, 3])], &[3]).is_err());
    }

    #[test]
    fn shapes_and_capture_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let ecfg = EncoderConfig { d: 8, heads: 2, ..Default::default() };
        let enc = Encoders::new(&mut store, &mut rng, &ecfg, Vocab::corpus());
        let unet = Denoiser::new(&mut store, &mut rng, &small()).unwrap();
        assert_eq!(unet.motion_block_count(), 3);
        let s = Session::new(&store, Groups::NONE);
        let seqs = enc.tokenize_all(&["a big red circle", ""]).unwrap();
        let c = enc.encode_text(&s, &seqs, Which::Content).unwrap();
        let m = enc.encode_text(&s, &seqs, Which::Motion).unwrap();
        let z = Tensor::randn(&[2, 3, 3, 8, 8], &mut rng);
        let cond = Conditioning { content: &c, content_seqs: &seqs, motion: Some((&m, &seqs)) };
        let out = unet.forward(&s, &z, &[5, 900], &cond, true).unwrap();
        assert_eq!(out.eps.shape(), z.shape());
        assert_eq!(out.maps.len(), 3);
        for map in &out.maps {
            assert_eq!(map.shape(), &[2, 4, 4, 3, 16]);
            for row in map.data().chunks(16) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
