//! Motion and alignment metrics on sampled clips, and variant comparison.

use std::fs;
use std::path::Path;

use ndarray::{s, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::diffusion::DdimConfig;
use crate::encoders::{stack_frames, Encoders, Which};
use crate::error::{Error, Result};
use crate::motionfeat::{frame_difference, safe_cosine, HornSchunck};
use crate::nn::{ParamStore, Session};
use crate::synthdata::Direction;
use crate::trainer::Model;

/// Below this mean signed flow no direction is considered dominant.
pub const DIRECTION_TIE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionDynamics {
    /// Mean Horn–Schunck flow magnitude, pixels per frame.
    pub flow: f64,
    /// Mean absolute frame difference.
    pub frame_diff: f64,
}

/// Flow and frame-difference magnitude of a `[F, C, H, W]` clip.
pub fn motion_dynamics(clip: ArrayView4<f32>, hs: &HornSchunck) -> Result<MotionDynamics> {
    let flow = hs.estimate(clip)?;
    let u = flow.index_axis(Axis(1), 0);
    let v = flow.index_axis(Axis(1), 1);
    let mag: f64 = u.iter().zip(v.iter()).map(|(&a, &b)| ((a as f64).powi(2) + (b as f64).powi(2)).sqrt()).sum();
    let d = frame_difference(clip)?;
    Ok(MotionDynamics {
        flow: mag / u.len() as f64,
        frame_diff: d.iter().map(|v| v.abs() as f64).sum::<f64>() / d.len() as f64,
    })
}

/// The direction word of a caption, if any.
pub fn caption_direction(caption: &str) -> Option<Direction> {
    caption.split_whitespace().find_map(Direction::from_word)
}

/// Direction with the largest mean signed flow, or `None` when every
/// candidate is below [`DIRECTION_TIE`].
pub fn dominant_direction(clip: ArrayView4<f32>, hs: &HornSchunck) -> Result<Option<Direction>> {
    let flow = hs.estimate(clip)?;
    let mean = |c: usize| {
        let a = flow.slice(s![.., c, .., ..]);
        a.iter().map(|&x| x as f64).sum::<f64>() / a.len() as f64
    };
    let (u, v) = (mean(0), mean(1));
    // y grows downward
    let cands = [(Direction::Right, u), (Direction::Left, -u), (Direction::Down, v), (Direction::Up, -v)];
    let best = cands.iter().fold(cands[0], |acc, c| if c.1 > acc.1 { *c } else { acc });
    Ok((best.1 >= DIRECTION_TIE).then_some(best.0))
}

/// 1 when the clip's dominant flow direction matches the caption, else 0.
pub fn direction_agreement(clip: ArrayView4<f32>, caption: &str, hs: &HornSchunck) -> Result<f64> {
    let want = caption_direction(caption).ok_or_else(|| Error::Config(format!("no direction word in '{caption}'")))?;
    Ok((dominant_direction(clip, hs)? == Some(want)) as u8 as f64)
}

/// Mean over frames of the cosine between the caption's content embedding
/// and each frame's image embedding.
pub fn alignment_score(clip: ArrayView4<f32>, caption: &str, enc: &Encoders, store: &ParamStore) -> Result<f64> {
    let s = Session::eval(store);
    let text = enc.encode_text(&s, &[enc.tokenize(caption)?], Which::Content)?.pooled;
    let frames: Vec<_> = clip.axis_iter(Axis(0)).collect();
    let img = enc.encode_image(&s, &stack_frames(&frames)?)?;
    let d = enc.cfg.d;
    let mut sum = 0.0;
    for row in img.data().chunks(d) {
        sum += safe_cosine(text.data(), row)?;
    }
    Ok(sum / frames.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub variant: String,
    /// Mean absolute frame difference.
    pub motion_dynamics: f64,
    /// Mean flow magnitude, pixels per frame.
    pub flow_score: f64,
    pub direction_agreement: f64,
    pub alignment: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl VariantMetrics {
    pub const METRICS: [&'static str; 4] = ["motion_dynamics", "flow_score", "direction_agreement", "alignment"];

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "motion_dynamics" => Some(self.motion_dynamics),
            "flow_score" => Some(self.flow_score),
            "direction_agreement" => Some(self.direction_agreement),
            "alignment" => Some(self.alignment),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variants: Vec<VariantMetrics>,
    pub config_hash: String,
}

impl EvalReport {
    pub fn get(&self, variant: &str) -> Option<&VariantMetrics> {
        self.variants.iter().find(|v| v.variant == variant)
    }

    /// Long format: one row per (variant, metric).
    pub fn rows(&self) -> Vec<(String, &'static str, f64)> {
        self.variants
            .iter()
            .flat_map(|v| VariantMetrics::METRICS.iter().map(move |m| (v.variant.clone(), *m, v.metric(m).unwrap())))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variant", "metric", "value", "n_samples", "seed", "config_hash"])?;
        for (variant, metric, value) in self.rows() {
            let v = self.get(&variant).unwrap();
            w.write_record([
                variant.as_str(),
                metric,
                &format!("{value:.6e}"),
                &v.n_samples.to_string(),
                &v.seed.to_string(),
                &self.config_hash,
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// CSV plus one bar chart per metric, named `<stem>_<metric>.png`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_csv(&dir.join(format!("{stem}.csv")))?;
        const PALETTE: [[u8; 3]; 6] =
            [[70, 110, 200], [230, 140, 40], [80, 170, 90], [200, 70, 70], [140, 100, 190], [120, 120, 120]];
        for m in VariantMetrics::METRICS {
            let bars: Vec<(f64, [u8; 3])> =
                self.variants.iter().enumerate().map(|(i, v)| (v.metric(m).unwrap(), PALETTE[i % 6])).collect();
            crate::chart::bar_chart(&bars, &dir.join(format!("{stem}_{m}.png")))?;
        }
        Ok(())
    }
}

/// A model to evaluate; `use_motion` false bypasses its motion blocks.
pub struct Variant<'a> {
    pub name: String,
    pub model: &'a Model,
    pub use_motion: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub ddim: DdimConfig,
    pub horn_schunck: HornSchunck,
    /// Captions sampled together in one batch.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ddim: DdimConfig::default(), horn_schunck: HornSchunck::default(), chunk: 16 }
    }
}

/// Samples `n_samples` clips per prompt from every variant with identical
/// seeds and aggregates all metrics. Alignment uses `judge`, a fixed pair of
/// pretrained encoders shared by every variant.
pub fn compare_variants(
    variants: &[Variant],
    prompts: &[String],
    n_samples: usize,
    seed: u64,
    judge: (&Encoders, &ParamStore),
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if variants.is_empty() {
        return Err(Error::Config("no variants to compare".into()));
    }
    if prompts.is_empty() || n_samples == 0 {
        return Err(Error::Config("need at least one prompt and one sample".into()));
    }
    let mut out = Vec::new();
    for v in variants {
        let (mut md, mut fl, mut da, mut al) = (0.0, 0.0, 0.0, 0.0);
        let mut n = 0usize;
        for k in 0..n_samples {
            for (ci, chunk) in prompts.chunks(cfg.chunk.max(1)).enumerate() {
                let s = seed.wrapping_add((k * 1_000_003 + ci) as u64);
                let clips = v.model.sample(chunk, v.use_motion, &cfg.ddim, s)?;
                for (clip, cap) in clips.iter().zip(chunk) {
                    let dynm = motion_dynamics(clip.view(), &cfg.horn_schunck)?;
                    md += dynm.frame_diff;
                    fl += dynm.flow;
                    da += direction_agreement(clip.view(), cap, &cfg.horn_schunck)?;
                    al += alignment_score(clip.view(), cap, judge.0, judge.1)?;
                    n += 1;
                }
            }
        }
        let nf = n as f64;
        let m = VariantMetrics {
            variant: v.name.clone(),
            motion_dynamics: md / nf,
            flow_score: fl / nf,
            direction_agreement: da / nf,
            alignment: al / nf,
            n_samples: n,
            seed,
        };
        if ![m.motion_dynamics, m.flow_score, m.direction_agreement, m.alignment].iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite metric for variant {}", m.variant)));
        }
        out.push(m);
    }
    Ok(EvalReport { variants: out, config_hash: String::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{render_clip_with_speed, Background, Color, Motion, SceneSpec, ShapeKind, Size, Speed};

    fn spec(dir: Direction) -> SceneSpec {
        SceneSpec {
            shape: ShapeKind::Square,
            color: Color::Red,
            size: Size::Big,
            motion: Motion::Moves,
            direction: dir,
            speed: Speed::Slowly,
            background: Background::Plain,
        }
    }

    #[test]
    fn static_clip_has_no_motion_and_no_direction() {
        let hs = HornSchunck::default();
        let c = render_clip_with_speed(&spec(Direction::Right), 6, 16, 16, 1, 0).unwrap();
        let m = motion_dynamics(c.frames.view(), &hs).unwrap();
        assert!(m.flow < 1e-4 && m.frame_diff < 1e-4);
        assert_eq!(direction_agreement(c.frames.view(), &c.caption, &hs).unwrap(), 0.0);
    }

    #[test]
    fn rightward_clip_agrees_only_with_right() {
        let hs = HornSchunck::default();
        let c = render_clip_with_speed(&spec(Direction::Right), 6, 16, 16, 1, 1).unwrap();
        assert_eq!(direction_agreement(c.frames.view(), &c.caption, &hs).unwrap(), 1.0);
        let left = c.caption.replace("right", "left");
        assert_eq!(direction_agreement(c.frames.view(), &left, &hs).unwrap(), 0.0);
        assert!(direction_agreement(c.frames.view(), "a red square", &hs).is_err());
    }

    #[test]
    fn dynamics_ignore_brightness_offset() {
        let hs = HornSchunck::default();
        let c = render_clip_with_speed(&spec(Direction::Down), 6, 16, 16, 1, 1).unwrap();
        let a = motion_dynamics(c.frames.view(), &hs).unwrap();
        let shifted = c.frames.mapv(|v| v + 0.05);
        let b = motion_dynamics(shifted.view(), &hs).unwrap();
        assert!((a.flow - b.flow).abs() < 1e-6 && (a.frame_diff - b.frame_diff).abs() < 1e-6);
    }
}
