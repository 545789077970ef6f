//! Training objectives: noise regression, attention-flow alignment, motion
//! embedding regularization and frame-difference matching.

use std::fs::File;
use std::path::Path;

use ndarray::ArrayView4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motionfeat::{flow_reference, frame_difference_t, safe_cosine_t, HornSchunck};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.1, beta: 0.3, gamma: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub diffusion: f64,
    pub text_motion: f64,
    pub reg: f64,
    pub video_motion: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [self.diffusion, self.text_motion, self.reg, self.video_motion, self.total].iter().all(|v| v.is_finite())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared error between true and predicted noise.
pub fn loss_diffusion(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    same_shape(eps, eps_hat)?;
    Ok(eps.sub(eps_hat)?.sqr().mean_all())
}

/// Mean squared error between frame differences of `z0` and `z0_hat` along
/// `frame_axis`.
pub fn loss_video_motion(z0: &Tensor, z0_hat: &Tensor, frame_axis: usize) -> Result<Tensor> {
    same_shape(z0, z0_hat)?;
    let d = frame_difference_t(z0, frame_axis)?.sub(&frame_difference_t(z0_hat, frame_axis)?)?;
    Ok(d.sqr().mean_all())
}

/// Negative cosine between a pooled motion embedding and an image embedding.
pub fn loss_reg(motion_pooled: &Tensor, image_emb: &Tensor) -> Result<Tensor> {
    if motion_pooled.numel() != image_emb.numel() {
        return Err(Error::Shape(format!("embedding sizes {} vs {}", motion_pooled.numel(), image_emb.numel())));
    }
    Ok(safe_cosine_t(motion_pooled, image_emb)?.neg())
}

/// Reference flow of a clip at every map resolution, as constant tensors
/// `[F-1, 2, Hi, Wi]`.
pub fn reference_flows(flow_gt: ArrayView4<f32>, resolutions: &[(usize, usize)]) -> Result<Vec<Tensor>> {
    resolutions
        .iter()
        .map(|&r| {
            let f = flow_reference(flow_gt, r)?;
            let sh = f.shape().to_vec();
            Tensor::new(f.iter().map(|&v| v as f64).collect(), &sh)
        })
        .collect()
}

/// Attention map `[Hi, Wi, F]` as a single-channel video `[F, Hi, Wi]`,
/// scaled so its maximum is 1.
pub fn map_video(eot_map: &Tensor) -> Result<Tensor> {
    if eot_map.rank() != 3 {
        return Err(Error::Shape(format!("eot map must be [H, W, F], got {:?}", eot_map.shape())));
    }
    let v = eot_map.permute(&[2, 0, 1])?;
    let m = v.max_all()?.affine(1.0, 1e-12);
    v.div(&m)
}

/// `-(1/M) sum_i cos(flow(map_i), ref_i)` for one sample. `eot_maps[i]` is
/// `[Hi, Wi, F]` and `refs[i]` is `[F-1, 2, Hi, Wi]`.
pub fn loss_text_motion(eot_maps: &[Tensor], refs: &[Tensor], hs: &HornSchunck) -> Result<Tensor> {
    if eot_maps.is_empty() {
        return Err(Error::Shape("text-motion loss needs at least one map".into()));
    }
    if eot_maps.len() != refs.len() {
        return Err(Error::Shape(format!("{} maps vs {} reference flows", eot_maps.len(), refs.len())));
    }
    let mut acc = Tensor::scalar(0.0);
    for (m, r) in eot_maps.iter().zip(refs) {
        let flow = hs.flow(&map_video(m)?)?;
        same_shape(&flow, r)?;
        acc = acc.add(&safe_cosine_t(&flow, r)?)?;
    }
    Ok(acc.scale(-1.0 / eot_maps.len() as f64))
}

/// Weighted total `diffusion + alpha*text_motion + beta*reg + gamma*video_motion`.
pub fn loss_total(diffusion: f64, text_motion: f64, reg: f64, video_motion: f64, w: LossWeights) -> Result<LossBreakdown> {
    if [w.alpha, w.beta, w.gamma].iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::Config(format!("loss weights must be finite and non-negative: {w:?}")));
    }
    let parts = [("diffusion", diffusion), ("text_motion", text_motion), ("reg", reg), ("video_motion", video_motion)];
    if let Some((name, v)) = parts.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numerical(format!("{name} loss is {v}")));
    }
    let total = diffusion + w.alpha * text_motion + w.beta * reg + w.gamma * video_motion;
    Ok(LossBreakdown { diffusion, text_motion, reg, video_motion, total, weights: w })
}

/// Per-step loss rows: `step, diffusion, text_motion, reg, video_motion, total`.
pub struct LossLog {
    path: std::path::PathBuf,
    w: csv::Writer<File>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["step", "diffusion", "text_motion", "reg", "video_motion", "total"])?;
        Ok(LossLog { path: path.to_path_buf(), w })
    }

    pub fn push(&mut self, step: usize, b: &LossBreakdown) -> Result<()> {
        let row = [b.diffusion, b.text_motion, b.reg, b.video_motion, b.total];
        let mut rec = vec![step.to_string()];
        rec.extend(row.iter().map(|v| format!("{v:e}")));
        Ok(self.w.write_record(&rec)?)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}
