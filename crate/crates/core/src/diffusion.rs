//! Noise schedule, forward process, clean-sample inversion, guidance and DDIM.

use ndarray::{Array4, ArrayView4, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard below which `predict_x0` refuses to divide.
pub const MIN_ALPHA_BAR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linear in `[beta_start, beta_end]` over `t` steps.
    pub fn linear(t: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!("bad schedule T={t} beta=[{beta_start}, {beta_end}]")));
        }
        let betas: Vec<f64> =
            (0..t).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64).collect();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule { betas, alphas_cumprod })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or_else(|| Error::Shape(format!("timestep {t} outside [0, {})", self.steps())))
    }

    /// Coefficients `(sqrt(abar), sqrt(1 - abar))` at `t`.
    pub fn coeffs(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    fn x0_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        if ab < MIN_ALPHA_BAR {
            return Err(Error::Numerical(format!("alpha_bar {ab:e} at t={t} too small to invert")));
        }
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    pub fn forward_diffuse(&self, z0: ArrayView4<f32>, t: usize, eps: ArrayView4<f32>) -> Result<Array4<f32>> {
        same_shape(z0.shape(), eps.shape())?;
        let (a, b) = self.coeffs(t)?;
        Ok(Zip::from(&z0).and(&eps).map_collect(|&z, &e| (a * z as f64 + b * e as f64) as f32))
    }

    pub fn predict_x0(&self, zt: ArrayView4<f32>, t: usize, eps_hat: ArrayView4<f32>) -> Result<Array4<f32>> {
        same_shape(zt.shape(), eps_hat.shape())?;
        let (a, b) = self.x0_coeffs(t)?;
        Ok(Zip::from(&zt).and(&eps_hat).map_collect(|&z, &e| ((z as f64 - b * e as f64) / a) as f32))
    }

    /// Forward diffusion with a per-sample timestep; the leading axis of `z0`
    /// is the batch.
    pub fn forward_diffuse_t(&self, z0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        let (a, b) = self.per_sample(z0, ts, |t| self.coeffs(t))?;
        z0.mul(&a)?.add(&eps.mul(&b)?)
    }

    /// Differentiable clean-sample estimate with a per-sample timestep.
    pub fn predict_x0_t(&self, zt: &Tensor, ts: &[usize], eps_hat: &Tensor) -> Result<Tensor> {
        let (a, b) = self.per_sample(zt, ts, |t| self.x0_coeffs(t))?;
        zt.sub(&eps_hat.mul(&b)?)?.div(&a)
    }

    fn per_sample(&self, z: &Tensor, ts: &[usize], f: impl Fn(usize) -> Result<(f64, f64)>) -> Result<(Tensor, Tensor)> {
        if z.rank() == 0 || z.dim(0) != ts.len() {
            return Err(Error::Shape(format!("{} timesteps for batch {:?}", ts.len(), z.shape())));
        }
        let mut shape = vec![1; z.rank()];
        shape[0] = ts.len();
        let (mut a, mut b) = (Vec::with_capacity(ts.len()), Vec::with_capacity(ts.len()));
        for &t in ts {
            let (x, y) = f(t)?;
            a.push(x);
            b.push(y);
        }
        Ok((Tensor::new(a, &shape)?, Tensor::new(b, &shape)?))
    }

    /// Descending timesteps visited by a `steps`-step DDIM run.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if steps == 0 || steps > t {
            return Err(Error::Config(format!("DDIM steps {steps} must be in [1, {t}]")));
        }
        Ok((0..steps).rev().map(|i| i * t / steps).collect())
    }
}

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Pixel values in `[0, 1]` to latents in `[-1, 1]`.
pub fn encode_latent(frames: ArrayView4<f32>) -> Result<Array4<f32>> {
    if let Some(v) = frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Numerical(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(frames.mapv(|v| 2.0 * v - 1.0))
}

/// Latents back to pixel values. Values must be finite; they are clamped to
/// `[0, 1]`.
pub fn decode_latent(z: ArrayView4<f32>) -> Result<Array4<f32>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite latent".into()));
    }
    Ok(z.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)))
}

/// Classifier-free guidance: `uncond + scale * (cond - uncond)`.
pub fn cfg_noise(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    eps_uncond.add(&eps_cond.sub(eps_uncond)?.scale(scale))
}

/// A noise-prediction network.
pub trait EpsModel {
    type Cond;

    /// Predicts the noise in `z_t` (batch of one, `[1, ...]`) at step `t`.
    fn eps(&self, z_t: &Tensor, t: usize, cond: &Self::Cond) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdimConfig {
    pub steps: usize,
    pub guidance: f64,
    /// Clamp each clean-sample estimate to the latent range `[-1, 1]`.
    pub clip_x0: bool,
}

impl Default for DdimConfig {
    fn default() -> Self {
        DdimConfig { steps: 50, guidance: 9.0, clip_x0: true }
    }
}

/// Deterministic (eta = 0) DDIM sampling with classifier-free guidance.
/// Returns the final clean-sample estimate with the shape `shape`.
pub fn ddim_sample<M: EpsModel>(
    model: &M,
    sched: &NoiseSchedule,
    cond: &M::Cond,
    uncond: &M::Cond,
    cfg: &DdimConfig,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Tensor::randn(shape, &mut rng);
    let ts = sched.ddim_timesteps(cfg.steps)?;
    let mut x0 = z.clone();
    for (i, &t) in ts.iter().enumerate() {
        let e_c = model.eps(&z, t, cond)?;
        let eps = if cfg.guidance == 1.0 {
            e_c
        } else {
            let e_u = model.eps(&z, t, uncond)?;
            cfg_noise(&e_c, &e_u, cfg.guidance)?
        };
        let (a, b) = sched.x0_coeffs(t)?;
        x0 = z.sub(&eps.scale(b))?.scale(1.0 / a);
        if cfg.clip_x0 {
            x0 = x0.clamp(-1.0, 1.0);
        }
        let ab_prev = match ts.get(i + 1) {
            Some(&tp) => sched.alpha_bar(tp)?,
            None => 1.0,
        };
        // Re-derive the noise from the (possibly clamped) estimate so the
        // trajectory stays consistent with it.
        let eps_used = if cfg.clip_x0 { z.sub(&x0.scale(a))?.scale(1.0 / b) } else { eps };
        z = x0.scale(ab_prev.sqrt()).add(&eps_used.scale((1.0 - ab_prev).sqrt()))?;
        if !z.all_finite() {
            return Err(Error::Numerical(format!("non-finite sample at t={t}")));
        }
    }
    Ok(x0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn schedule_is_monotone_and_consistent() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let mut prod = 1.0;
        for t in 0..1000 {
            prod *= 1.0 - s.betas[t];
            assert!((s.alphas_cumprod[t] - prod).abs() < 1e-12);
            if t > 0 {
                assert!(s.betas[t] > s.betas[t - 1]);
                assert!(s.alphas_cumprod[t] < s.alphas_cumprod[t - 1]);
            }
        }
        assert!(s.alpha_bar(1000).is_err());
    }

    #[test]
    fn zero_signal_quarter_alpha_bar() {
        let s = NoiseSchedule { betas: vec![0.75], alphas_cumprod: vec![0.25] };
        let z0 = Array4::<f32>::zeros((1, 1, 1, 2));
        let eps = Array::from_shape_vec((1, 1, 1, 2), vec![1.0f32, -2.0]).unwrap();
        let zt = s.forward_diffuse(z0.view(), 0, eps.view()).unwrap();
        assert!((zt[[0, 0, 0, 0]] - 0.8660254).abs() < 1e-6);
        let x0 = s.predict_x0(zt.view(), 0, eps.view()).unwrap();
        assert!(x0.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn tiny_alpha_bar_is_rejected() {
        let s = NoiseSchedule { betas: vec![0.5], alphas_cumprod: vec![1e-9] };
        let z = Array4::<f32>::zeros((1, 1, 1, 1));
        assert!(s.predict_x0(z.view(), 0, z.view()).is_err());
    }

    #[test]
    fn latent_round_trip() {
        let x = Array::from_shape_fn((2, 3, 4, 4), |(a, b, c, d)| ((a + b * 3 + c * 5 + d * 7) % 11) as f32 / 10.0);
        let z = encode_latent(x.view()).unwrap();
        let back = decode_latent(z.view()).unwrap();
        assert!(x.iter().zip(back.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(encode_latent(Array4::from_elem((1, 1, 1, 1), 0.5f32).view()).unwrap()[[0, 0, 0, 0]] == 0.0);
        assert!(encode_latent(Array4::from_elem((1, 1, 1, 1), 1.5f32).view()).is_err());
    }

    #[test]
    fn guidance_arithmetic() {
        let c = Tensor::full(2.0, &[3]);
        let u = Tensor::full(1.0, &[3]);
        assert_eq!(cfg_noise(&c, &u, 9.0).unwrap().to_vec(), vec![10.0; 3]);
        assert_eq!(cfg_noise(&c, &u, 1.0).unwrap().to_vec(), vec![2.0; 3]);
        assert_eq!(cfg_noise(&c, &u, 0.0).unwrap().to_vec(), vec![1.0; 3]);
    }

    #[test]
    fn ddim_timesteps_cover_range() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let ts = s.ddim_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (980, 0));
        assert_eq!(s.ddim_timesteps(1000).unwrap().len(), 1000);
        assert!(s.ddim_timesteps(1001).is_err());
    }
}
