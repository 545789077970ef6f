//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Peak signal-to-noise ratio for signals in `[0, 1]`.
pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64;
    10.0 * (1.0 / mse.max(1e-20)).log10()
}

use decomo_core::config::RunConfig;
use decomo_core::denoiser::DenoiserConfig;
use decomo_core::encoders::EncoderConfig;
use decomo_core::synthdata::{generate_clips, VideoClip};

/// A model small enough for tests that train for hundreds of steps.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.n_clips = 64;
    c.data.frames = 4;
    c.data.height = 8;
    c.data.width = 8;
    c.model.encoder = EncoderConfig { d: 16, layers: 1, heads: 2, image_channels: vec![8, 16], ..EncoderConfig::default() };
    c.model.denoiser = DenoiserConfig {
        base_channels: 8,
        channel_mult: vec![1, 1],
        heads: 2,
        attn_resolutions: vec![4],
        frames: 4,
        height: 8,
        width: 8,
        text_dim: 16,
        norm_groups: 4,
        ff_mult: 2,
        ..DenoiserConfig::default()
    };
    c.pretrain.steps = 60;
    c.pretrain.batch_size = 16;
    c.base.steps = 60;
    c.train.steps = 40;
    c.train.checkpoint_every = 20;
    c.eval.n_prompts = 4;
    c.eval.ddim.steps = 4;
    c.validate().expect("tiny config is valid");
    c
}

pub fn clips_for(cfg: &RunConfig, n: usize, seed: u64) -> Vec<VideoClip> {
    let d = &cfg.data;
    generate_clips(n, d.frames, d.height, d.width, seed).unwrap().into_iter().map(|(_, c)| c).collect()
}
