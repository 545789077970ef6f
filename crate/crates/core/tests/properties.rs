mod common;

use decomo_core::diffusion::{cfg_noise, NoiseSchedule};
use decomo_core::encoders::{Encoders, EncoderConfig, Vocab, Which};
use decomo_core::losses::{loss_total, loss_video_motion, LossWeights};
use decomo_core::motionfeat::{downsample_video, frame_difference, safe_cosine};
use decomo_core::nn::{ParamStore, Session};
use decomo_core::pilot::group_sensitivity;
use decomo_core::synthdata::{render_clip, render_clip_with_speed, Background, Color, Direction, Motion, SceneSpec, ShapeKind, Size, Speed};
use decomo_core::Tensor;
use ndarray::Array4;
use proptest::prelude::*;
use proptest::sample::select;

fn spec() -> impl Strategy<Value = SceneSpec> {
    (
        select(ShapeKind::ALL),
        select(Color::ALL),
        select(Size::ALL),
        select(Motion::ALL),
        select(Direction::ALL),
        select(Speed::ALL),
        select(Background::ALL),
    )
        .prop_map(|(shape, color, size, motion, direction, speed, background)| SceneSpec {
            shape,
            color,
            size,
            motion,
            direction,
            speed,
            background,
        })
}

fn video(max_f: usize) -> impl Strategy<Value = Array4<f32>> {
    (2..=max_f, 1..=3usize, 1..=5usize, 1..=5usize).prop_flat_map(|(f, c, h, w)| {
        proptest::collection::vec(-2.0f32..2.0, f * c * h * w)
            .prop_map(move |v| Array4::from_shape_vec((f, c, h, w), v).unwrap())
    })
}

fn vector(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn schedule_is_monotone_and_a_cumulative_product(t in 2usize..1500, lo in 1e-5f64..1e-3, span in 1e-4f64..0.5) {
        let s = NoiseSchedule::linear(t, lo, lo + span).unwrap();
        let mut prod = 1.0;
        for i in 0..t {
            prop_assert!(s.betas[i] > 0.0 && s.betas[i] < 1.0);
            prod *= 1.0 - s.betas[i];
            prop_assert!((s.alphas_cumprod[i] - prod).abs() < 1e-12);
            prop_assert!(s.alphas_cumprod[i] > 0.0 && s.alphas_cumprod[i] < 1.0);
            if i > 0 {
                prop_assert!(s.betas[i] > s.betas[i - 1]);
                prop_assert!(s.alphas_cumprod[i] < s.alphas_cumprod[i - 1]);
            }
        }
    }

    #[test]
    fn clean_estimate_inverts_forward_diffusion(z in video(4), seed in any::<u64>(), t in 0usize..1000) {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let sh: Vec<usize> = std::iter::once(1).chain(z.shape().iter().copied()).collect();
        let mut r = common::rng(seed);
        let z0 = Tensor::new(z.iter().map(|&v| v as f64).collect(), &sh).unwrap();
        let eps = Tensor::randn(&sh, &mut r);
        let zt = s.forward_diffuse_t(&z0, &[t], &eps).unwrap();
        let back = s.predict_x0_t(&zt, &[t], &eps).unwrap();
        let err = back.data().iter().zip(z0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-5, "t={t} err={err:e}");
    }

    #[test]
    fn frame_difference_drops_global_offsets_and_scales_linearly(z in video(5), a in -3.0f32..3.0, c in -3.0f32..3.0) {
        let base = frame_difference(z.view()).unwrap();
        let moved = frame_difference(z.mapv(|v| a * v + c).view()).unwrap();
        for (m, b) in moved.iter().zip(base.iter()) {
            prop_assert!((m - a * b).abs() <= 1e-4 * (1.0 + (a * b).abs()), "{m} vs {}", a * b);
        }
    }

    #[test]
    fn video_motion_loss_ignores_one_offset_but_not_per_frame_offsets(z in video(5), c in 0.1f64..2.0, seed in any::<u64>()) {
        let sh: Vec<usize> = z.shape().to_vec();
        let z0 = Tensor::new(z.iter().map(|&v| v as f64).collect(), &sh).unwrap();
        let mut r = common::rng(seed);
        let hat = z0.add(&Tensor::randn(&sh, &mut r).scale(0.3)).unwrap();
        let base = loss_video_motion(&z0, &hat, 0).unwrap().item().unwrap();
        let shifted = loss_video_motion(&z0.affine(1.0, c), &hat.affine(1.0, c), 0).unwrap().item().unwrap();
        prop_assert!((base - shifted).abs() < 1e-9 * (1.0 + base));
        let per = frame_difference(z.view()).unwrap().len() / (sh[0] - 1);
        let ramp: Vec<f64> = (0..sh[0]).flat_map(|f| std::iter::repeat_n(c * f as f64, per)).collect();
        let frame_offsets = Tensor::new(ramp, &sh).unwrap();
        let z_only = loss_video_motion(&z0.add(&frame_offsets).unwrap(), &hat, 0).unwrap().item().unwrap();
        prop_assert!((z_only - base).abs() > 1e-6, "per-frame offsets must change the loss");
    }

    #[test]
    fn cosine_is_symmetric_and_scale_invariant(a in vector(9), b in vector(9), l in 0.01f64..100.0) {
        let ab = safe_cosine(&a, &b).unwrap();
        prop_assert_eq!(ab, safe_cosine(&b, &a).unwrap());
        prop_assert!((-1.0..=1.0).contains(&ab));
        let la: Vec<f64> = a.iter().map(|v| v * l).collect();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na * l.min(1.0) > 1e-3 && nb > 1e-3 {
            prop_assert!((safe_cosine(&la, &b).unwrap() - ab).abs() < 1e-6);
        }
    }

    #[test]
    fn sensitivity_ignores_scaling_and_order(embs in proptest::collection::vec(vector(6), 2..9), scales in proptest::collection::vec(0.1f64..10.0, 9), rot in 0usize..9) {
        prop_assume!(embs.iter().all(|e| e.iter().map(|v| v * v).sum::<f64>() > 1e-2));
        let refs: Vec<&[f64]> = embs.iter().map(|e| e.as_slice()).collect();
        let s = group_sensitivity(&refs).unwrap();
        prop_assert!((0.0..=2.0).contains(&s));
        let scaled: Vec<Vec<f64>> = embs.iter().zip(&scales).map(|(e, k)| e.iter().map(|v| v * k).collect()).collect();
        let mut order: Vec<&[f64]> = scaled.iter().map(|e| e.as_slice()).collect();
        let n = order.len();
        order.rotate_left(rot % n);
        order.reverse();
        prop_assert!((group_sensitivity(&order).unwrap() - s).abs() < 1e-9);
    }

    #[test]
    fn loss_total_is_the_weighted_sum(p in vector(4), w in proptest::collection::vec(0.0f64..2.0, 3)) {
        let weights = LossWeights { alpha: w[0], beta: w[1], gamma: w[2] };
        let b = loss_total(p[0].abs(), p[1] / 3.0, p[2] / 3.0, p[3].abs(), weights).unwrap();
        let want = b.diffusion + w[0] * b.text_motion + w[1] * b.reg + w[2] * b.video_motion;
        prop_assert!((b.total - want).abs() < 1e-6);
        prop_assert!(b.all_finite());
    }

    #[test]
    fn guidance_interpolates_between_predictions(c in vector(5), u in vector(5), k in -2.0f64..12.0) {
        let tc = Tensor::new(c.clone(), &[5]).unwrap();
        let tu = Tensor::new(u.clone(), &[5]).unwrap();
        let g = cfg_noise(&tc, &tu, k).unwrap();
        for i in 0..5 {
            prop_assert!((g.data()[i] - (u[i] + k * (c[i] - u[i]))).abs() < 1e-12);
        }
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(a, b)| (a - b).abs() < 1e-12);
        prop_assert!(close(cfg_noise(&tc, &tu, 1.0).unwrap().data(), &c));
        prop_assert!(close(cfg_noise(&tc, &tu, 0.0).unwrap().data(), &u));
    }

    #[test]
    fn average_pooling_preserves_the_mean(f in 1usize..3, c in 1usize..3, k in 1usize..4, n in 1usize..4, seed in any::<u64>()) {
        let (h, w) = (k * n, k * n + k);
        let mut r = common::rng(seed);
        let v = common::uniform(&mut r, f * c * h * w, 0.0, 1.0);
        let a = Array4::from_shape_vec((f, c, h, w), v.iter().map(|&x| x as f32).collect()).unwrap();
        let p = downsample_video(a.view(), (n, n + 1)).unwrap();
        let mean = |x: &Array4<f32>| x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
        prop_assert!((mean(&a) - mean(&p)).abs() < 1e-5);
    }

    #[test]
    fn captions_round_trip_and_differ_in_one_word_per_slot(s in spec(), other in spec()) {
        let cap = s.caption();
        prop_assert_eq!(SceneSpec::from_caption(&cap), Some(s));
        prop_assert_eq!(&cap, &s.caption());
        let t = SceneSpec { shape: other.shape, ..s };
        let diff = cap.split(' ').zip(t.caption().split(' ')).filter(|(a, b)| a != b).count();
        prop_assert_eq!(diff, usize::from(other.shape != s.shape));
    }

    #[test]
    fn tokenizer_round_trips_corpus_captions(s in spec()) {
        let v = Vocab::corpus();
        let cap = s.caption();
        let t = v.tokenize(&cap, 16).unwrap();
        prop_assert_eq!(v.detokenize(&t), cap.clone());
        prop_assert_eq!(v.tokenize(&v.detokenize(&t), 16).unwrap(), t.clone());
        prop_assert_eq!(t.eot_index, cap.split(' ').count() + 1);
        prop_assert!(t.ids.iter().all(|&id| id != decomo_core::encoders::UNK));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn rendering_is_reproducible_and_flow_warps_frames(s in spec(), seed in any::<u64>()) {
        let a = render_clip(&s, 6, 16, 16, seed).unwrap();
        let b = render_clip(&s, 6, 16, 16, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let flow = a.flow_gt.as_ref().unwrap();
        prop_assert_eq!(flow.dim().0, 5);
        let (h, w) = (16i64, 16i64);
        for t in 0..5 {
            let (mut err, mut n) = (0.0f64, 0usize);
            for y in 0..16 {
                for x in 0..16 {
                    let (dx, dy) = (flow[[t, 0, y, x]], flow[[t, 1, y, x]]);
                    if dx == 0.0 && dy == 0.0 {
                        continue;
                    }
                    let tx = (x as i64 + dx as i64).rem_euclid(w) as usize;
                    let ty = (y as i64 + dy as i64).rem_euclid(h) as usize;
                    for c in 0..3 {
                        err += (a.frames[[t + 1, c, ty, tx]] - a.frames[[t, c, y, x]]).abs() as f64;
                        n += 1;
                    }
                }
            }
            if n > 0 {
                prop_assert!(err / (n as f64) < 0.05, "frame {t}: {}", err / n as f64);
            }
        }
    }

    #[test]
    fn static_clips_have_zero_flow(s in spec(), seed in any::<u64>()) {
        let c = render_clip_with_speed(&s, 4, 16, 16, seed, 0).unwrap();
        prop_assert!(c.flow_gt.unwrap().iter().all(|&v| v == 0.0));
        let f0 = c.frames.index_axis(ndarray::Axis(0), 0).to_owned();
        for t in 1..4 {
            prop_assert_eq!(&c.frames.index_axis(ndarray::Axis(0), t), &f0);
        }
    }

    #[test]
    fn pooled_embedding_is_the_eot_row(specs in proptest::collection::vec(spec(), 1..4), seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let mut r = common::rng(seed);
        let cfg = EncoderConfig { d: 16, heads: 2, ..EncoderConfig::default() };
        let enc = Encoders::new(&mut store, &mut r, &cfg, Vocab::corpus());
        let caps: Vec<String> = specs.iter().map(|s| s.caption()).collect();
        let seqs = enc.tokenize_all(&caps).unwrap();
        let s = Session::eval(&store);
        let e = enc.encode_text(&s, &seqs, Which::Content).unwrap();
        let (sl, d) = (e.tokens.dim(1), e.tokens.dim(2));
        for (b, q) in seqs.iter().enumerate() {
            let row = &e.tokens.data()[(b * sl + q.eot_index) * d..(b * sl + q.eot_index + 1) * d];
            prop_assert_eq!(row, &e.pooled.data()[b * d..(b + 1) * d]);
            prop_assert!(row.iter().all(|v| v.is_finite()));
        }
    }
}
