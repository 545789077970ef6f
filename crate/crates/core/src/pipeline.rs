//! Pretraining stages shared by the command line and the test fixtures.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::encoders::{pretrain_contrastive, Vocab};
use crate::error::{Error, Result};
use crate::nn::Group;
use crate::synthdata::VideoClip;
use crate::trainer::{pretrain_base, Model, TrainData};

/// Groups produced by pretraining and required by fine-tuning.
pub const PRETRAINED_GROUPS: [Group; 3] = [Group::ContentEncoder, Group::ImageEncoder, Group::UnetBase];

/// A freshly initialized model for `cfg`, seeded by `cfg.pretrain.seed`.
pub fn init_model(cfg: &RunConfig) -> Result<Model> {
    Model::new(&cfg.model, Vocab::corpus(), cfg.pretrain.seed)
}

fn check_clips(cfg: &RunConfig, clips: &[VideoClip]) -> Result<()> {
    let d = &cfg.model.denoiser;
    match clips.iter().find(|c| c.frames.dim() != (d.frames, d.in_channels, d.height, d.width)) {
        Some(c) => Err(Error::Config(format!(
            "clip {} has shape {:?}, model expects ({}, {}, {}, {})",
            c.clip_id,
            c.frames.dim(),
            d.frames,
            d.in_channels,
            d.height,
            d.width
        ))),
        None => Ok(()),
    }
}

/// Contrastive pretraining of the content text and image encoders.
/// Returns the model and the loss per step.
pub fn pretrain_encoders(cfg: &RunConfig, clips: &[VideoClip]) -> Result<(Model, Vec<f64>)> {
    check_clips(cfg, clips)?;
    let mut model = init_model(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pretrain.seed.wrapping_add(0x5eed));
    let losses = pretrain_contrastive(&model.enc, &mut model.store, clips, &cfg.pretrain, &mut rng)?;
    Ok((model, losses))
}

/// Base denoiser pretraining on top of trained encoders. Returns the
/// training data (valid for the now-frozen encoders) and the loss per step.
pub fn pretrain_denoiser(cfg: &RunConfig, model: &mut Model, clips: &[VideoClip]) -> Result<(TrainData, Vec<f64>)> {
    check_clips(cfg, clips)?;
    let data = TrainData::prepare(model, clips)?;
    let losses = pretrain_base(model, &data, &cfg.base)?;
    Ok((data, losses))
}
