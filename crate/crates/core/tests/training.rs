mod common;

use std::collections::BTreeSet;

use decomo_core::config::RunConfig;
use decomo_core::denoiser::Conditioning;
use decomo_core::nn::{Group, Session};
use decomo_core::pipeline::{init_model, pretrain_denoiser, pretrain_encoders};
use decomo_core::trainer::{run_training, Component, Model, TrainConfig, TrainData, Trainer};
use decomo_core::Tensor;

fn base(cfg: &RunConfig) -> (Model, TrainData) {
    let clips = common::clips_for(cfg, cfg.data.n_clips, cfg.data.seed);
    let (mut model, _) = pretrain_encoders(cfg, &clips).unwrap();
    let (data, _) = pretrain_denoiser(cfg, &mut model, &clips).unwrap();
    (model, data)
}

fn trainer(model: &Model, cfg: &RunConfig, tc: TrainConfig) -> Trainer {
    Trainer::new(model.clone(), tc, &cfg.hash()).unwrap()
}

#[test]
fn caption_drop_frequency_concentrates() {
    let cfg = common::tiny_config();
    let model = init_model(&cfg).unwrap();
    let data = TrainData::prepare(&model, &common::clips_for(&cfg, 16, 3)).unwrap();
    let ablate = [Component::TextMotion, Component::VideoMotion, Component::Reg];
    let tc = TrainConfig { steps: 1000, batch_size: 1, ablation: ablate.into(), ..cfg.train.clone() };
    let mut tr = trainer(&model, &cfg, tc);
    for _ in 0..1000 {
        tr.train_step(&data).unwrap();
    }
    let freq = tr.samples_dropped as f64 / tr.samples_seen as f64;
    assert_eq!(tr.samples_seen, 1000);
    assert!((0.07..=0.13).contains(&freq), "drop frequency {freq}");
}

#[test]
fn frozen_groups_stay_bit_identical_and_copy_starts_equal() {
    let cfg = common::tiny_config();
    let (model, data) = base(&cfg);
    let frozen = [Group::ContentEncoder, Group::ImageEncoder, Group::UnetBase];
    let before: Vec<_> = frozen.iter().map(|&g| model.store.snapshot(g)).collect();
    let mut tr = trainer(&model, &cfg, cfg.train.clone());

    let content = tr.model.store.snapshot(Group::ContentEncoder);
    let motion = tr.model.store.snapshot(Group::MotionEncoder);
    assert_eq!(content.len(), motion.len());
    for ((_, c), (_, m)) in content.iter().zip(&motion) {
        assert_eq!(c, m);
    }

    let motion_before = tr.model.store.snapshot(Group::MotionBlocks);
    run_training(&mut tr, &data, None).unwrap();
    for (g, b) in frozen.iter().zip(&before) {
        assert_eq!(&tr.model.store.snapshot(*g), b, "{g:?} changed");
    }
    assert_ne!(tr.model.store.snapshot(Group::MotionBlocks), motion_before);
}

#[test]
fn all_auxiliary_losses_ablated_leaves_the_diffusion_loss() {
    let cfg = common::tiny_config();
    let (model, data) = base(&cfg);
    let ablate = [Component::TextMotion, Component::Reg, Component::VideoMotion];
    let mut tr = trainer(&model, &cfg, TrainConfig { ablation: ablate.into(), ..cfg.train.clone() });
    for _ in 0..5 {
        let b = tr.train_step(&data).unwrap();
        assert_eq!(b.total, b.diffusion);
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let cfg = common::tiny_config();
    let (model, data) = base(&cfg);
    let tmp = tempfile::tempdir().unwrap();
    let mut full = trainer(&model, &cfg, cfg.train.clone());
    let rep = run_training(&mut full, &data, Some(tmp.path())).unwrap();
    let ck = decomo_core::checkpoint::Checkpoint::load(&tmp.path().join("step_000020.ckpt")).unwrap();
    let mut resumed = Trainer::resume(init_model(&cfg).unwrap(), cfg.train.clone(), &cfg.hash(), &ck).unwrap();
    assert_eq!(resumed.step, 20);
    let next = resumed.train_step(&data).unwrap();
    assert_eq!(next, rep.losses[20].1, "step 21 differs after resume");
    let rest = run_training(&mut resumed, &data, None).unwrap();
    assert_eq!(rest.losses.last().unwrap().1, rep.losses.last().unwrap().1);
    let a = full.checkpoint().unwrap();
    let b = resumed.checkpoint().unwrap();
    assert_eq!(a.groups, b.groups);
}

#[test]
fn smoke_run_on_desk_model_stays_finite() {
    let cfg = RunConfig::default();
    let clips = common::clips_for(&cfg, 64, 11);
    let model = init_model(&cfg).unwrap();
    let data = TrainData::prepare(&model, &clips).unwrap();
    let mut tr = trainer(&model, &cfg, TrainConfig { steps: 200, ..cfg.train.clone() });
    let rep = run_training(&mut tr, &data, None).unwrap();
    assert_eq!(rep.losses.len(), 200);
    for (step, b) in &rep.losses {
        assert!(b.all_finite(), "step {step}: {b:?}");
        assert!((-1.0..=1.0).contains(&b.text_motion) && (-1.0..=1.0).contains(&b.reg), "step {step}: {b:?}");
    }
}

#[test]
fn diffusion_loss_falls_during_fine_tuning() {
    let cfg = common::tiny_config();
    let clips = common::clips_for(&cfg, 64, 1);
    let model = init_model(&cfg).unwrap();
    let data = TrainData::prepare(&model, &clips).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mut first, mut last) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let tc = TrainConfig { steps: 2000, seed, lr_min: 1e-4, lr_max: 1e-3, ..cfg.train.clone() };
        let mut tr = trainer(&model, &cfg, tc);
        let d: Vec<f64> = run_training(&mut tr, &data, None).unwrap().losses.iter().map(|l| l.1.diffusion).collect();
        first.push(mean(&d[..100]));
        last.push(mean(&d[d.len() - 100..]));
    }
    assert!(mean(&last) < mean(&first), "first {first:?} last {last:?}");
}

#[test]
fn motion_blocks_ablated_samples_match_content_only_model() {
    let cfg = common::tiny_config();
    let (model, data) = base(&cfg);
    let tc = TrainConfig { ablation: BTreeSet::from([Component::MotionBlocks]), ..cfg.train.clone() };
    let mut tr = trainer(&model, &cfg, tc);
    run_training(&mut tr, &data, None).unwrap();
    let prompts = decomo_core::suite::eval_prompts(3, 5);
    let a = tr.model.sample(&prompts, true, &cfg.eval.ddim, 9).unwrap();
    let b = model.sample(&prompts, false, &cfg.eval.ddim, 9).unwrap();
    assert_eq!(a, b);
}

#[test]
fn motion_blocks_are_identity_at_init_and_maps_are_row_stochastic() {
    let cfg = common::tiny_config();
    let model = init_model(&cfg).unwrap();
    let prompts = decomo_core::suite::eval_prompts(2, 1);
    let cond = model.condition(&prompts, true).unwrap();
    let d = &cfg.model.denoiser;
    let z = Tensor::randn(&[2, d.frames, d.in_channels, d.height, d.width], &mut common::rng(4));
    let s = Session::eval(&model.store);
    let with = Conditioning { content: &cond.content, content_seqs: &cond.seqs, motion: Some((cond.motion.as_ref().unwrap(), &cond.seqs)) };
    let without = Conditioning { content: &cond.content, content_seqs: &cond.seqs, motion: None };
    let a = model.unet.forward(&s, &z, &[10, 700], &with, true).unwrap();
    let b = model.unet.forward(&s, &z, &[10, 700], &without, false).unwrap();
    assert_eq!(a.eps.data(), b.eps.data());
    assert_eq!(a.maps.len(), model.unet.motion_block_count());
    for m in &a.maps {
        let sl = *m.shape().last().unwrap();
        for row in m.data().chunks(sl) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn zeroed_cross_attention_ignores_the_text() {
    let cfg = common::tiny_config();
    let mut model = init_model(&cfg).unwrap();
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.contains("attn2.to_k") || p.name.contains("attn2.to_v"))
        .map(|(id, _)| id)
        .collect();
    assert!(!ids.is_empty());
    for id in ids {
        let n = model.store.get(id).value().len();
        model.store.set(id, vec![0.0; n]).unwrap();
    }
    // make the zero-initialized output projections live so text could leak
    let outs: Vec<_> = model.store.iter().filter(|(_, p)| p.name.contains("proj_out.weight")).map(|(id, _)| id).collect();
    for id in outs {
        let n = model.store.get(id).value().len();
        model.store.set(id, (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect()).unwrap();
    }
    let d = &cfg.model.denoiser;
    let z = Tensor::randn(&[1, d.frames, d.in_channels, d.height, d.width], &mut common::rng(2));
    let eps = |caption: &str| {
        let cond = model.condition(&[caption.to_string()], true).unwrap();
        let s = Session::eval(&model.store);
        let c = Conditioning { content: &cond.content, content_seqs: &cond.seqs, motion: Some((cond.motion.as_ref().unwrap(), &cond.seqs)) };
        model.unet.forward(&s, &z, &[300], &c, false).unwrap().eps.to_vec()
    };
    let a = eps("a big red circle moves slowly toward the left on the plain background");
    let b = eps("a small blue star bounces quickly toward the up on the striped background");
    assert_eq!(a, b);
}
