//! Central finite-difference checks of the four training losses on a toy
//! model whose parameters feed every loss through the same code paths the
//! trainer uses.

use decomo_core::denoiser::eot_maps;
use decomo_core::diffusion::NoiseSchedule;
use decomo_core::losses::{loss_diffusion, loss_reg, loss_text_motion, loss_video_motion, LossWeights};
use decomo_core::motionfeat::HornSchunck;
use decomo_core::{Result, Tensor};

use super::{rng, uniform};

const F: usize = 3;
const H: usize = 4;
const W: usize = 4;
const S: usize = 3;
const D: usize = 8;
const EOT: usize = 1;
const T: usize = 400;

/// Sizes of the parameter blocks: eps scale, eps bias, embedding
/// projection, attention logits.
const BLOCKS: [usize; 4] = [H * W, H * W, D * D, H * W * F * S];

pub const LOSSES: [&str; 5] = ["diffusion", "text_motion", "reg", "video_motion", "total"];

pub struct Toy {
    sched: NoiseSchedule,
    z0: Tensor,
    eps: Tensor,
    text: Tensor,
    image: Tensor,
    flow_ref: Tensor,
    hs: HornSchunck,
    weights: LossWeights,
    pub theta: Vec<f64>,
}

impl Toy {
    pub fn new(seed: u64) -> Toy {
        let mut r = rng(seed);
        let lat = F * H * W;
        Toy {
            sched: NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap(),
            z0: Tensor::new(uniform(&mut r, lat, -1.0, 1.0), &[1, F, 1, H, W]).unwrap(),
            eps: Tensor::new(uniform(&mut r, lat, -1.5, 1.5), &[1, F, 1, H, W]).unwrap(),
            text: Tensor::new(uniform(&mut r, D, -1.0, 1.0), &[1, D]).unwrap(),
            image: Tensor::new(uniform(&mut r, D, -1.0, 1.0), &[1, D]).unwrap(),
            flow_ref: Tensor::new(uniform(&mut r, (F - 1) * 2 * H * W, -1.0, 1.0), &[F - 1, 2, H, W]).unwrap(),
            hs: HornSchunck { iters: 8, lambda: 0.1 },
            weights: LossWeights::default(),
            theta: uniform(&mut r, BLOCKS.iter().sum(), -0.8, 0.8),
        }
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    fn leaves(theta: &[f64]) -> Vec<Tensor> {
        let shapes: [&[usize]; 4] = [&[1, 1, 1, H, W], &[1, 1, 1, H, W], &[D, D], &[1, H, W, F, S]];
        let mut off = 0;
        shapes
            .iter()
            .zip(BLOCKS)
            .map(|(sh, n)| {
                let t = Tensor::var(theta[off..off + n].to_vec(), sh).unwrap();
                off += n;
                t
            })
            .collect()
    }

    /// The five losses (four parts and their weighted total) at `theta`.
    fn losses(&self, p: &[Tensor]) -> Result<[Tensor; 5]> {
        let zt = self.sched.forward_diffuse_t(&self.z0, &[T], &self.eps)?;
        let eps_hat = zt.mul(&p[0])?.add(&p[1])?.tanh();
        let diffusion = loss_diffusion(&self.eps, &eps_hat)?;
        let z0_hat = self.sched.predict_x0_t(&zt, &[T], &eps_hat)?;
        let video = loss_video_motion(&self.z0, &z0_hat, 1)?;
        let pooled = self.text.matmul(&p[2])?.tanh();
        let reg = loss_reg(&pooled, &self.image)?;
        let maps = p[3].softmax_last()?;
        let eot = eot_maps(&[maps], &[EOT])?.remove(0).reshape(&[H, W, F])?;
        let text = loss_text_motion(&[eot], &[self.flow_ref.clone()], &self.hs)?;
        let w = self.weights;
        let total = diffusion
            .add(&text.scale(w.alpha))?
            .add(&reg.scale(w.beta))?
            .add(&video.scale(w.gamma))?;
        Ok([diffusion, text, reg, video, total])
    }

    fn values(&self, theta: &[f64]) -> [f64; 5] {
        let l = self.losses(&Self::leaves(theta)).unwrap();
        l.map(|t| t.item().unwrap())
    }

    /// Analytic gradient of every loss with respect to `theta`.
    pub fn analytic(&self) -> [Vec<f64>; 5] {
        let leaves = Self::leaves(&self.theta);
        let losses = self.losses(&leaves).unwrap();
        losses.map(|l| {
            let g = l.backward().unwrap();
            leaves
                .iter()
                .flat_map(|p| g.get(p).map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
                .collect()
        })
    }

    /// Central differences with step `h`.
    pub fn numeric(&self, h: f64) -> [Vec<f64>; 5] {
        let mut out: [Vec<f64>; 5] = Default::default();
        let mut th = self.theta.clone();
        for i in 0..th.len() {
            let x = th[i];
            th[i] = x + h;
            let up = self.values(&th);
            th[i] = x - h;
            let dn = self.values(&th);
            th[i] = x;
            for k in 0..5 {
                out[k].push((up[k] - dn[k]) / (2.0 * h));
            }
        }
        out
    }
}

/// `|a - n| / max(|a|, |n|)` over whole gradient vectors.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Relative error of each loss's gradient; all four parts must be nonzero.
pub fn check(seed: u64) -> [(&'static str, f64, f64); 5] {
    let toy = Toy::new(seed);
    assert!(toy.n_params() <= 500, "{} parameters", toy.n_params());
    let a = toy.analytic();
    let n = toy.numeric(1e-5);
    std::array::from_fn(|k| {
        let norm = a[k].iter().map(|x| x * x).sum::<f64>().sqrt();
        (LOSSES[k], relative_error(&a[k], &n[k]), norm)
    })
}
