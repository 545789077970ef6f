//! Motion features: Horn–Schunck flow, frame differences, flow downsampling
//! and a cosine similarity that tolerates near-zero vectors.

use std::rc::Rc;

use ndarray::{s, Array4, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SparseMap, Tensor};

/// Norm threshold below which a cosine is defined as 0.
pub const COS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HornSchunck {
    pub iters: usize,
    /// Smoothness weight added to the gradient magnitude in the update.
    pub lambda: f64,
}

impl Default for HornSchunck {
    fn default() -> Self {
        HornSchunck { iters: 50, lambda: 0.1 }
    }
}

struct Stencils {
    dx: Rc<SparseMap>,
    dy: Rc<SparseMap>,
    avg: Rc<SparseMap>,
}

impl Stencils {
    fn new(h: usize, w: usize) -> Self {
        let (a, b) = (1.0 / 12.0, 1.0 / 6.0);
        Stencils {
            dx: SparseMap::stencil3(h, w, [[0.0, 0.0, 0.0], [-0.5, 0.0, 0.5], [0.0, 0.0, 0.0]]),
            dy: SparseMap::stencil3(h, w, [[0.0, -0.5, 0.0], [0.0, 0.0, 0.0], [0.0, 0.5, 0.0]]),
            avg: SparseMap::stencil3(h, w, [[a, b, a], [b, 0.0, b], [a, b, a]]),
        }
    }
}

impl HornSchunck {
    /// Differentiable flow of `video` (`[F, H, W]` or `[F, C, H, W]`, channels
    /// averaged first). Returns `[F-1, 2, H, W]`, x component first.
    pub fn flow(&self, video: &Tensor) -> Result<Tensor> {
        Ok(self.run(video, false)?.0)
    }

    /// Flow plus the mean squared brightness-constancy residual after every
    /// iteration.
    pub fn flow_with_trace(&self, video: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.run(video, true)
    }

    fn run(&self, video: &Tensor, trace: bool) -> Result<(Tensor, Vec<f64>)> {
        let gray = match video.rank() {
            3 => video.clone(),
            4 => video.mean_keepdim(1)?.reshape(&[video.dim(0), video.dim(2), video.dim(3)])?,
            _ => return Err(Error::Shape(format!("flow of {:?}", video.shape()))),
        };
        let (f, h, w) = (gray.dim(0), gray.dim(1), gray.dim(2));
        if f < 2 {
            return Err(Error::Shape(format!("flow needs at least 2 frames, got {f}")));
        }
        let st = Stencils::new(h, w);
        let i1 = gray.narrow(0, 0, f - 1)?;
        let i2 = gray.narrow(0, 1, f - 1)?;
        let both = i1.add(&i2)?;
        let ix = both.apply_map(&st.dx)?.scale(0.5);
        let iy = both.apply_map(&st.dy)?.scale(0.5);
        let it = i2.sub(&i1)?;
        let denom = ix.sqr().add(&iy.sqr())?.affine(1.0, self.lambda);
        let mut u = Tensor::zeros(&[f - 1, h, w]);
        let mut v = Tensor::zeros(&[f - 1, h, w]);
        let mut residuals = Vec::new();
        for _ in 0..self.iters {
            let ua = u.apply_map(&st.avg)?;
            let va = v.apply_map(&st.avg)?;
            let r = ix.mul(&ua)?.add(&iy.mul(&va)?)?.add(&it)?.div(&denom)?;
            u = ua.sub(&ix.mul(&r)?)?;
            v = va.sub(&iy.mul(&r)?)?;
            if trace {
                let res = ix.mul(&u)?.add(&iy.mul(&v)?)?.add(&it)?;
                residuals.push(res.data().iter().map(|x| x * x).sum::<f64>() / res.numel() as f64);
            }
        }
        let flow = Tensor::cat(&[u.reshape(&[f - 1, 1, h, w])?, v.reshape(&[f - 1, 1, h, w])?], 1)?;
        Ok((flow, residuals))
    }

    /// Flow of an `[F, C, H, W]` video as an array.
    pub fn estimate(&self, video: ArrayView4<f32>) -> Result<Array4<f32>> {
        let t = array_to_tensor(video);
        tensor_to_array(&self.flow(&t)?)
    }
}

pub fn array_to_tensor(a: ArrayView4<f32>) -> Tensor {
    let shape = a.shape().to_vec();
    Tensor::new(a.iter().map(|&v| v as f64).collect(), &shape).expect("shape matches")
}

pub fn tensor_to_array(t: &Tensor) -> Result<Array4<f32>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected rank 4, got {s:?}")));
    }
    Array4::from_shape_vec((s[0], s[1], s[2], s[3]), t.data().iter().map(|&v| v as f32).collect())
        .map_err(|e| Error::Shape(e.to_string()))
}

fn pool_factors(h: usize, w: usize, target: (usize, usize)) -> Result<(usize, usize)> {
    let (th, tw) = target;
    if th == 0 || tw == 0 || th > h || tw > w || h % th != 0 || w % tw != 0 {
        return Err(Error::Shape(format!("cannot pool {h}x{w} to {th}x{tw}")));
    }
    Ok((h / th, w / tw))
}

/// Average-pools every frame of `[F, C, H, W]` to `target`.
pub fn downsample_video(video: ArrayView4<f32>, target: (usize, usize)) -> Result<Array4<f32>> {
    let (f, c, h, w) = video.dim();
    let (fy, fx) = pool_factors(h, w, target)?;
    let mut out = Array4::<f32>::zeros((f, c, target.0, target.1));
    let norm = 1.0 / (fy * fx) as f64;
    for ((fi, ci, y, x), o) in out.indexed_iter_mut() {
        let win = video.slice(s![fi, ci, y * fy..(y + 1) * fy, x * fx..(x + 1) * fx]);
        *o = (win.iter().map(|&v| v as f64).sum::<f64>() * norm) as f32;
    }
    Ok(out)
}

/// Area-averaged flow at `target` resolution, with x and y components scaled
/// by the width and height ratios.
pub fn flow_reference(flow_gt: ArrayView4<f32>, target: (usize, usize)) -> Result<Array4<f32>> {
    let (_, two, h, w) = flow_gt.dim();
    if two != 2 {
        return Err(Error::Shape(format!("flow must have 2 components, got {two}")));
    }
    let mut out = downsample_video(flow_gt, target)?;
    let sx = target.1 as f32 / w as f32;
    let sy = target.0 as f32 / h as f32;
    out.slice_mut(s![.., 0, .., ..]).mapv_inplace(|v| v * sx);
    out.slice_mut(s![.., 1, .., ..]).mapv_inplace(|v| v * sy);
    Ok(out)
}

/// `z[1..] - z[..F-1]` along the first axis.
pub fn frame_difference(z: ArrayView4<f32>) -> Result<Array4<f32>> {
    let f = z.len_of(Axis(0));
    if f < 2 {
        return Err(Error::Shape(format!("frame difference needs 2 frames, got {f}")));
    }
    Ok(&z.slice(s![1.., .., .., ..]) - &z.slice(s![..f - 1, .., .., ..]))
}

/// Differentiable frame difference along `axis`.
pub fn frame_difference_t(z: &Tensor, axis: usize) -> Result<Tensor> {
    let f = z.dim(axis);
    if f < 2 {
        return Err(Error::Shape(format!("frame difference needs 2 frames, got {f}")));
    }
    z.narrow(axis, 1, f - 1)?.sub(&z.narrow(axis, 0, f - 1)?)
}

/// `a.b / (|a||b| + eps)`, or 0 if either norm is below `eps`.
pub fn safe_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < COS_EPS || nb < COS_EPS {
        return Ok(0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb + COS_EPS))
}

/// Differentiable [`safe_cosine`] of two tensors viewed as flat vectors.
pub fn safe_cosine_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.numel() != b.numel() {
        return Err(Error::Shape(format!("cosine of {:?} and {:?}", a.shape(), b.shape())));
    }
    let na = a.dot(a)?.sqrt();
    let nb = b.dot(b)?.sqrt();
    if na.item()? < COS_EPS || nb.item()? < COS_EPS {
        return Ok(Tensor::scalar(0.0));
    }
    a.dot(b)?.div(&na.mul(&nb)?.affine(1.0, COS_EPS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn blob_video(f: usize, n: usize, dx: f64, dy: f64) -> Array4<f32> {
        Array::from_shape_fn((f, 1, n, n), |(t, _, y, x)| {
            let cx = n as f64 / 2.0 - 2.0 + dx * t as f64;
            let cy = n as f64 / 2.0 + dy * t as f64;
            let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            (-r2 / 8.0).exp() as f32
        })
    }

    #[test]
    fn static_video_has_zero_flow() {
        let v = blob_video(4, 16, 0.0, 0.0);
        let flow = HornSchunck::default().estimate(v.view()).unwrap();
        assert!(flow.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn blob_translation_recovered() {
        let v = blob_video(3, 24, 1.0, 0.0);
        let flow = HornSchunck::default().estimate(v.view()).unwrap();
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..24 {
            for x in 0..24 {
                if v[[0, 0, y, x]] > 0.3 {
                    sx += flow[[0, 0, y, x]] as f64;
                    sy += flow[[0, 1, y, x]] as f64;
                    n += 1.0;
                }
            }
        }
        let (mx, my) = (sx / n, sy / n);
        assert!((mx - 1.0).abs() < 0.25, "mean flow ({mx}, {my})");
        assert!(my.abs() < 0.25);
    }

    #[test]
    fn reversed_video_negates_flow() {
        let v = blob_video(4, 20, 0.0, 1.0);
        let mut rev = v.clone();
        rev.invert_axis(Axis(0));
        let hs = HornSchunck::default();
        let fwd = hs.estimate(v.view()).unwrap();
        let mut bwd = hs.estimate(rev.view()).unwrap();
        bwd.invert_axis(Axis(0));
        let a: Vec<f64> = fwd.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = bwd.iter().map(|&v| v as f64).collect();
        assert!(safe_cosine(&a, &b).unwrap() < -0.8);
    }

    #[test]
    fn flow_reference_scales_components() {
        let mut flow = Array4::<f32>::zeros((2, 2, 32, 32));
        flow.slice_mut(s![.., 0, .., ..]).fill(3.0);
        let r = flow_reference(flow.view(), (8, 8)).unwrap();
        assert!(r.slice(s![.., 0, .., ..]).iter().all(|&v| (v - 0.75).abs() < 1e-6));
        assert!(r.slice(s![.., 1, .., ..]).iter().all(|&v| v == 0.0));
        assert_eq!(flow_reference(flow.view(), (32, 32)).unwrap(), flow);
    }

    #[test]
    fn checkerboard_pools_to_half() {
        let v = Array::from_shape_fn((1, 1, 2, 2), |(_, _, y, x)| ((x + y) % 2) as f32);
        assert_eq!(downsample_video(v.view(), (1, 1)).unwrap()[[0, 0, 0, 0]], 0.5);
        assert!(downsample_video(v.view(), (3, 3)).is_err());
    }

    #[test]
    fn frame_difference_scalar_frames() {
        let z = Array::from_shape_vec((3, 1, 1, 1), vec![1.0f32, 3.0, 6.0]).unwrap();
        let d = frame_difference(z.view()).unwrap();
        assert_eq!(d.iter().copied().collect::<Vec<_>>(), vec![2.0, 3.0]);
    }

    #[test]
    fn cosine_edge_cases() {
        assert!((safe_cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-7);
        assert_eq!(safe_cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((safe_cosine(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-7);
        assert_eq!(safe_cosine(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(safe_cosine(&[1.0], &[1.0, 2.0]).is_err());
    }
}
