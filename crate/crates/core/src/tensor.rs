//! Dense f64 tensors with tape-free reverse-mode differentiation.
//!
//! Every tensor is an immutable, row-major buffer plus an optional link to the
//! operation that produced it. Gradients are computed by [`Tensor::backward`],
//! which walks the graph in reverse topological order. Operations only record
//! a backward closure when at least one input requires a gradient, so
//! evaluation-mode passes allocate no graph.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(1) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Inputs handed to a backward closure.
pub(crate) struct BackCtx<'a> {
    pub grad: &'a [f64],
    pub parents: &'a [Tensor],
    pub out: &'a [f64],
}

type BackwardFn = Box<dyn Fn(&BackCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

impl Drop for Node {
    // Long chains (iterative solvers, deep networks) would otherwise drop
    // recursively and overflow small thread stacks.
    fn drop(&mut self) {
        let mut stack = std::mem::take(&mut self.parents);
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.0) {
                stack.append(&mut node.parents);
            }
        }
    }
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape())?;
        let n = self.numel().min(8);
        write!(f, " {:?}", &self.data()[..n])?;
        if self.numel() > n {
            write!(f, "...")?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Strides of `shape` viewed inside `out_shape` (right-aligned), with 0 on
/// broadcast dimensions.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

/// Visits every output position with the matching offsets into two strided
/// inputs. The innermost dimension runs as a tight loop.
fn for_each_pair(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = out_shape.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let inner = out_shape[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    loop {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        if o >= total {
            break;
        }
        let mut d = nd - 1;
        loop {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, backward: Option<BackwardFn>) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad { (parents, backward) } else { (Vec::new(), None) };
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: Rc::new(data),
            requires_grad,
            parents,
            backward,
        }))
    }

    fn build_shared(data: Rc<Vec<f64>>, shape: Vec<usize>, parents: Vec<Tensor>, backward: Option<BackwardFn>) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad { (parents, backward) } else { (Vec::new(), None) };
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            parents,
            backward,
        }))
    }

    /// Constant tensor; never receives a gradient.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(Error::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self::build(data, shape.to_vec(), Vec::new(), None))
    }

    /// Leaf tensor that accumulates a gradient during [`Tensor::backward`].
    pub fn var(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(Error::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Tensor(Rc::new(Node {
            id: next_id(),
            shape: shape.to_vec(),
            data: Rc::new(data),
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        })))
    }

    pub(crate) fn leaf_shared(data: Rc<Vec<f64>>, shape: &[usize], requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            shape: shape.to_vec(),
            data,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::build(vec![v], vec![], Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::build(vec![0.0; numel(shape)], shape.to_vec(), Vec::new(), None)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Self::full(1.0, shape)
    }

    pub fn full(v: f64, shape: &[usize]) -> Tensor {
        Self::build(vec![v; numel(shape)], shape.to_vec(), Vec::new(), None)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
        let data = (0..numel(shape)).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self::build(data, shape.to_vec(), Vec::new(), None)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        self.0.data.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!("item() on shape {:?}", self.shape())));
        }
        Ok(self.data()[0])
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build_shared(self.data_rc(), self.shape().to_vec(), Vec::new(), None)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let backward: Option<BackwardFn> = if self.requires_grad() {
            Some(Box::new(move |ctx: &BackCtx<'_>| {
                let x = ctx.parents[0].data();
                let g = ctx.grad.iter().zip(x).zip(ctx.out).map(|((g, &x), &y)| g * df(x, y)).collect();
                vec![Some(g)]
            }))
        } else {
            None
        };
        Self::build(data, self.shape().to_vec(), vec![self.clone()], backward)
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    /// `mul * x + add`
    pub fn affine(&self, mul: f64, add: f64) -> Tensor {
        self.unary(move |x| mul * x + add, move |_, _| mul)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.affine(s, 0.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn sqr(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn recip(&self) -> Tensor {
        self.unary(|x| 1.0 / x, |_, y| -y * y)
    }

    pub fn powf(&self, p: f64) -> Tensor {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn silu(&self) -> Tensor {
        self.unary(
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = C * (x + 0.044715 * x * x * x);
                let th = u.tanh();
                let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
            },
        )
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(move |x| x.clamp(lo, hi), move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 })
    }

    fn binary(
        &self,
        rhs: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let out_shape = broadcast_shape(self.shape(), rhs.shape())?;
        let n = numel(&out_shape);
        let a = self.data();
        let b = rhs.data();
        let data: Vec<f64> = if self.shape() == rhs.shape() {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        } else if b.len() == 1 && a.len() == n {
            let bv = b[0];
            a.iter().map(|&x| f(x, bv)).collect()
        } else {
            let mut data = vec![0.0; n];
            let sa = broadcast_strides(self.shape(), &out_shape);
            let sb = broadcast_strides(rhs.shape(), &out_shape);
            for_each_pair(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(a[ia], b[ib]));
            data
        };
        let backward: Option<BackwardFn> = if self.requires_grad() || rhs.requires_grad() {
            let shape_a = self.shape().to_vec();
            let shape_b = rhs.shape().to_vec();
            let out_shape_c = out_shape.clone();
            Some(Box::new(move |ctx: &BackCtx<'_>| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                let (g, y) = (ctx.grad, ctx.out);
                if shape_a == shape_b {
                    let ga = ctx.parents[0].requires_grad().then(|| {
                        (0..a.len()).map(|i| g[i] * da(a[i], b[i], y[i])).collect::<Vec<f64>>()
                    });
                    let gb = ctx.parents[1].requires_grad().then(|| {
                        (0..b.len()).map(|i| g[i] * db(a[i], b[i], y[i])).collect::<Vec<f64>>()
                    });
                    return vec![ga, gb];
                }
                let sa = broadcast_strides(&shape_a, &out_shape_c);
                let sb = broadcast_strides(&shape_b, &out_shape_c);
                let ga = if ctx.parents[0].requires_grad() {
                    let mut acc = vec![0.0; a.len()];
                    for_each_pair(&out_shape_c, &sa, &sb, |o, ia, ib| {
                        acc[ia] += ctx.grad[o] * da(a[ia], b[ib], ctx.out[o]);
                    });
                    Some(acc)
                } else {
                    None
                };
                let gb = if ctx.parents[1].requires_grad() {
                    let mut acc = vec![0.0; b.len()];
                    for_each_pair(&out_shape_c, &sa, &sb, |o, ia, ib| {
                        acc[ib] += ctx.grad[o] * db(a[ia], b[ib], ctx.out[o]);
                    });
                    Some(acc)
                } else {
                    None
                };
                vec![ga, gb]
            }))
        } else {
            None
        };
        Ok(Self::build(data, out_shape, vec![self.clone(), rhs.clone()], backward))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, |a, b| a + b, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, |a, b| a - b, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, |a, b| a / b, |_, b, _| 1.0 / b, |_, b, y| -y / b)
    }

    // ------------------------------------------------------------------
    // Reductions
    // ------------------------------------------------------------------

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let backward: Option<BackwardFn> = Some(Box::new(|ctx: &BackCtx<'_>| {
            vec![Some(vec![ctx.grad[0]; ctx.parents[0].numel()])]
        }));
        Self::build(vec![s], vec![], vec![self.clone()], backward)
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over one axis, keeping it with size 1.
    pub fn sum_keepdim(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, v) in dst.iter_mut().zip(&x[base..base + inner]) {
                    *d += v;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        let backward: Option<BackwardFn> = Some(Box::new(move |ctx: &BackCtx<'_>| {
            let mut g = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    g[base..base + inner].copy_from_slice(&ctx.grad[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(g)]
        }));
        Ok(Self::build(out, out_shape, vec![self.clone()], backward))
    }

    pub fn mean_keepdim(&self, axis: usize) -> Result<Tensor> {
        let len = self.shape().get(axis).copied().unwrap_or(1).max(1);
        Ok(self.sum_keepdim(axis)?.scale(1.0 / len as f64))
    }

    /// Maximum element; the gradient flows to the first maximizer.
    pub fn max_all(&self) -> Result<Tensor> {
        self.extreme(|a, b| a > b)
    }

    pub fn min_all(&self) -> Result<Tensor> {
        self.extreme(|a, b| a < b)
    }

    fn extreme(&self, better: impl Fn(f64, f64) -> bool) -> Result<Tensor> {
        let x = self.data();
        if x.is_empty() {
            return Err(Error::Shape("reduction over empty tensor".into()));
        }
        let mut best = 0;
        for (i, &v) in x.iter().enumerate() {
            if better(v, x[best]) {
                best = i;
            }
        }
        let backward: Option<BackwardFn> = Some(Box::new(move |ctx: &BackCtx<'_>| {
            let mut g = vec![0.0; ctx.parents[0].numel()];
            g[best] = ctx.grad[0];
            vec![Some(g)]
        }));
        Ok(Self::build(vec![x[best]], vec![], vec![self.clone()], backward))
    }

    /// Dot product of two tensors viewed as flat vectors.
    pub fn dot(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.numel() != rhs.numel() {
            return Err(Error::Shape(format!("dot of {:?} and {:?}", self.shape(), rhs.shape())));
        }
        let s: f64 = self.data().iter().zip(rhs.data()).map(|(a, b)| a * b).sum();
        let backward: Option<BackwardFn> = Some(Box::new(|ctx: &BackCtx<'_>| {
            let g = ctx.grad[0];
            let a = ctx.parents[0].data();
            let b = ctx.parents[1].data();
            vec![
                ctx.parents[0].requires_grad().then(|| b.iter().map(|v| v * g).collect()),
                ctx.parents[1].requires_grad().then(|| a.iter().map(|v| v * g).collect()),
            ]
        }));
        Ok(Self::build(vec![s], vec![], vec![self.clone(), rhs.clone()], backward))
    }

    // ------------------------------------------------------------------
    // Normalization / softmax over the last axis
    // ------------------------------------------------------------------

    pub fn softmax_last(&self) -> Result<Tensor> {
        let n = *self.shape().last().ok_or_else(|| Error::Shape("softmax of scalar".into()))?;
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for (xr, yr) in x.chunks(n).zip(y.chunks_mut(n)) {
            let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = (v - m).exp();
                s += *o;
            }
            for o in yr.iter_mut() {
                *o /= s;
            }
        }
        let backward: Option<BackwardFn> = Some(Box::new(move |ctx: &BackCtx<'_>| {
            let mut g = vec![0.0; ctx.out.len()];
            for ((gr, yr), dst) in ctx.grad.chunks(n).zip(ctx.out.chunks(n)).zip(g.chunks_mut(n)) {
                let dotp: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dotp);
                }
            }
            vec![Some(g)]
        }));
        Ok(Self::build(y, self.shape().to_vec(), vec![self.clone()], backward))
    }

    pub fn log_softmax_last(&self) -> Result<Tensor> {
        let n = *self.shape().last().ok_or_else(|| Error::Shape("log_softmax of scalar".into()))?;
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for (xr, yr) in x.chunks(n).zip(y.chunks_mut(n)) {
            let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + xr.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = v - lse;
            }
        }
        let backward: Option<BackwardFn> = Some(Box::new(move |ctx: &BackCtx<'_>| {
            let mut g = vec![0.0; ctx.out.len()];
            for ((gr, yr), dst) in ctx.grad.chunks(n).zip(ctx.out.chunks(n)).zip(g.chunks_mut(n)) {
                let s: f64 = gr.iter().sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = gv - yv.exp() * s;
                }
            }
            vec![Some(g)]
        }));
        Ok(Self::build(y, self.shape().to_vec(), vec![self.clone()], backward))
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn normalize_last(&self, eps: f64) -> Result<Tensor> {
        let n = *self.shape().last().ok_or_else(|| Error::Shape("normalize of scalar".into()))?;
        let x = self.data();
        let rows = x.len() / n.max(1);
        let mut y = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for (r, (xr, yr)) in x.chunks(n).zip(y.chunks_mut(n)).enumerate() {
            let mean = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = (v - mean) * is;
            }
        }
        let backward: Option<BackwardFn> = Some(Box::new(move |ctx: &BackCtx<'_>| {
            let mut g = vec![0.0; ctx.out.len()];
            for (r, ((gr, yr), dst)) in ctx.grad.chunks(n).zip(ctx.out.chunks(n)).zip(g.chunks_mut(n)).enumerate() {
                let mg = gr.iter().sum::<f64>() / n as f64;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = inv_std[r] * (gv - mg - yv * mgy);
                }
            }
            vec![Some(g)]
        }));
        Ok(Self::build(y, self.shape().to_vec(), vec![self.clone()], backward))
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n]` with broadcast batch
    /// dimensions.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner mismatch {sa:?} x {sb:?}")));
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape(batch_a, batch_b)?;
        let nb = numel(&batch);
        let bsa: Vec<usize> = broadcast_strides(batch_a, &batch);
        let bsb: Vec<usize> = broadcast_strides(batch_b, &batch);
        let mut offs = Vec::with_capacity(nb);
        for_each_pair(&batch, &bsa, &bsb, |_, ia, ib| offs.push((ia * m * k, ib * k * n)));
        let a = self.data();
        let b = rhs.data();
        let mut c = vec![0.0; nb * m * n];
        for (bi, &(oa, ob)) in offs.iter().enumerate() {
            gemm(m, k, n, &a[oa..], (k, 1), &b[ob..], (n, 1), &mut c[bi * m * n..], 0.0);
        }
        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        let backward: Option<BackwardFn> = Some(Box::new(move |ctx: &BackCtx<'_>| {
            let a = ctx.parents[0].data();
            let b = ctx.parents[1].data();
            let ga = ctx.parents[0].requires_grad().then(|| {
                let mut ga = vec![0.0; a.len()];
                for (bi, &(oa, ob)) in offs.iter().enumerate() {
                    // dA = dC . B^T
                    gemm(m, n, k, &ctx.grad[bi * m * n..], (n, 1), &b[ob..], (1, n), &mut ga[oa..], 1.0);
                }
                ga
            });
            let gb = ctx.parents[1].requires_grad().then(|| {
                let mut gb = vec![0.0; b.len()];
                for (bi, &(oa, ob)) in offs.iter().enumerate() {
                    // dB = A^T . dC
                    gemm(k, m, n, &a[oa..], (1, k), &ctx.grad[bi * m * n..], (n, 1), &mut gb[ob..], 1.0);
                }
                gb
            });
            vec![ga, gb]
        }));
        Ok(Self::build(c, out_shape, vec![self.clone(), rhs.clone()], backward))
    }

    // ------------------------------------------------------------------
    // Shape manipulation
    // ------------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape(format!("reshape {:?} -> {shape:?}", self.shape())));
        }
        let backward: Option<BackwardFn> = Some(Box::new(|ctx: &BackCtx<'_>| vec![Some(ctx.grad.to_vec())]));
        Ok(Self::build_shared(self.data_rc(), shape.to_vec(), vec![self.clone()], backward))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if perm.len() != shape.len() || {
            let mut seen = vec![false; perm.len()];
            perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        } {
            return Err(Error::Shape(format!("bad permutation {perm:?} for {shape:?}")));
        }
        let in_strides = contiguous_strides(shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let zeros = vec![0; out_shape.len()];
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for_each_pair(&out_shape, &src_strides, &zeros, |o, i, _| y[o] = x[i]);
        let backward: Option<BackwardFn> = Some(Box::new(move |ctx: &BackCtx<'_>| {
            let mut g = vec![0.0; ctx.grad.len()];
            for_each_pair(&out_shape, &src_strides, &zeros, |o, i, _| g[i] = ctx.grad[o]);
            vec![Some(g)]
        }));
        let shape_out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        Ok(Self::build(y, shape_out, vec![self.clone()], backward))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(Error::Shape(format!("transpose({a},{b}) on {:?}", self.shape())));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!("narrow({axis},{start},{len}) on {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let full = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let x = self.data();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            y.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let backward: Option<BackwardFn> = Some(Box::new(move |ctx: &BackCtx<'_>| {
            let mut g = vec![0.0; outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                g[base..base + len * inner].copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        }));
        Ok(Self::build(y, out_shape, vec![self.clone()], backward))
    }

    /// Pick one index along `axis` and drop that axis.
    pub fn select(&self, axis: usize, index: usize) -> Result<Tensor> {
        let t = self.narrow(axis, index, 1)?;
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        t.reshape(&shape)
    }

    pub fn cat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors.first().ok_or_else(|| Error::Shape("cat of nothing".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Shape(format!("cat axis {axis} on rank {rank}")));
        }
        for t in tensors {
            let ok = t.rank() == rank && (0..rank).all(|d| d == axis || t.dim(d) == first.dim(d));
            if !ok {
                return Err(Error::Shape(format!("cat {:?} with {:?}", first.shape(), t.shape())));
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let lens: Vec<usize> = tensors.iter().map(|t| t.dim(axis)).collect();
        let total: usize = lens.iter().sum();
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &l) in tensors.iter().zip(&lens) {
                y.extend_from_slice(&t.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let backward: Option<BackwardFn> = Some(Box::new(move |ctx: &BackCtx<'_>| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (g, &l) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&ctx.grad[pos..pos + l * inner]);
                    pos += l * inner;
                }
            }
            grads
                .into_iter()
                .zip(ctx.parents)
                .map(|(g, p)| p.requires_grad().then_some(g))
                .collect()
        }));
        Ok(Self::build(y, out_shape, tensors.to_vec(), backward))
    }

    /// Gather rows along axis 0; repeated indices accumulate on backward.
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor> {
        let rows = *self.shape().first().ok_or_else(|| Error::Shape("index_select on scalar".into()))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("index {bad} out of range for {rows} rows")));
        }
        let inner = self.numel() / rows.max(1);
        let x = self.data();
        let mut y = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            y.extend_from_slice(&x[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[0] = indices.len();
        let idx = indices.to_vec();
        let backward: Option<BackwardFn> = Some(Box::new(move |ctx: &BackCtx<'_>| {
            let mut g = vec![0.0; rows * inner];
            for (j, &i) in idx.iter().enumerate() {
                for (d, s) in g[i * inner..(i + 1) * inner].iter_mut().zip(&ctx.grad[j * inner..(j + 1) * inner]) {
                    *d += s;
                }
            }
            vec![Some(g)]
        }));
        Ok(Self::build(y, out_shape, vec![self.clone()], backward))
    }

    /// Repeat each slice along axis 0 `times` times consecutively.
    pub fn repeat_interleave0(&self, times: usize) -> Result<Tensor> {
        let rows = self.dim(0);
        let idx: Vec<usize> = (0..rows).flat_map(|r| std::iter::repeat_n(r, times)).collect();
        self.index_select(&idx)
    }

    /// Apply a fixed sparse linear map to the trailing `in_len` values of
    /// every leading slice.
    pub fn apply_map(&self, map: &Rc<SparseMap>) -> Result<Tensor> {
        let in_len = map.in_len;
        if in_len == 0 || self.numel() % in_len != 0 {
            return Err(Error::Shape(format!("map over {in_len} values on {:?}", self.shape())));
        }
        let batch = self.numel() / in_len;
        let x = self.data();
        let mut y = vec![0.0; batch * map.out_len];
        for b in 0..batch {
            let xs = &x[b * in_len..(b + 1) * in_len];
            let ys = &mut y[b * map.out_len..(b + 1) * map.out_len];
            for (o, yv) in ys.iter_mut().enumerate() {
                let mut s = 0.0;
                for &(i, w) in &map.entries[map.row_ptr[o]..map.row_ptr[o + 1]] {
                    s += w * xs[i];
                }
                *yv = s;
            }
        }
        let m = map.clone();
        let backward: Option<BackwardFn> = Some(Box::new(move |ctx: &BackCtx<'_>| {
            let mut g = vec![0.0; batch * m.in_len];
            for b in 0..batch {
                let gs = &ctx.grad[b * m.out_len..(b + 1) * m.out_len];
                let gi = &mut g[b * m.in_len..(b + 1) * m.in_len];
                for (o, &gv) in gs.iter().enumerate() {
                    for &(i, w) in &m.entries[m.row_ptr[o]..m.row_ptr[o + 1]] {
                        gi[i] += w * gv;
                    }
                }
            }
            vec![Some(g)]
        }));
        let mut out_shape: Vec<usize> = Vec::new();
        // Keep leading dims when the trailing dims exactly match in_len.
        let mut acc = 1;
        let shape = self.shape();
        let mut split = shape.len();
        while split > 0 && acc < in_len {
            split -= 1;
            acc *= shape[split];
        }
        if acc == in_len {
            out_shape.extend_from_slice(&shape[..split]);
            out_shape.extend_from_slice(&map.out_shape);
        } else {
            out_shape = vec![batch, map.out_len];
        }
        Ok(Self::build(y, out_shape, vec![self.clone()], backward))
    }

    /// 2-D convolution, stride 1: `x [N, C, H, W]`, `w [O, C, k, k]`.
    pub fn conv2d(&self, w: &Tensor, padding: usize) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv2d {xs:?} with kernel {ws:?}")));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(Error::Shape(format!("kernel {k} larger than padded input {xs:?}")));
        }
        let geo = ConvGeom { c, h, w: wd, k, pad: padding, ho: h + 2 * padding + 1 - k, wo: wd + 2 * padding + 1 - k };
        let ckk = c * k * k;
        let hw_out = geo.ho * geo.wo;
        let x = self.data();
        let wt = w.data();
        let mut y = vec![0.0; n * o * hw_out];
        let mut cols = vec![0.0; ckk * hw_out];
        for b in 0..n {
            im2col(&x[b * c * h * wd..(b + 1) * c * h * wd], &geo, &mut cols);
            gemm(o, ckk, hw_out, wt, (ckk, 1), &cols, (hw_out, 1), &mut y[b * o * hw_out..], 0.0);
        }
        let backward: Option<BackwardFn> = Some(Box::new(move |ctx: &BackCtx<'_>| {
            let x = ctx.parents[0].data();
            let wt = ctx.parents[1].data();
            let need_x = ctx.parents[0].requires_grad();
            let need_w = ctx.parents[1].requires_grad();
            let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
            let mut gw = if need_w { vec![0.0; wt.len()] } else { Vec::new() };
            let mut cols = vec![0.0; ckk * hw_out];
            for b in 0..n {
                let gy = &ctx.grad[b * o * hw_out..(b + 1) * o * hw_out];
                if need_w {
                    im2col(&x[b * c * h * wd..(b + 1) * c * h * wd], &geo, &mut cols);
                    gemm(o, hw_out, ckk, gy, (hw_out, 1), &cols, (1, hw_out), &mut gw, 1.0);
                }
                if need_x {
                    gemm(ckk, o, hw_out, wt, (1, ckk), gy, (hw_out, 1), &mut cols, 0.0);
                    col2im(&cols, &geo, &mut gx[b * c * h * wd..(b + 1) * c * h * wd]);
                }
            }
            vec![need_x.then_some(gx), need_w.then_some(gw)]
        }));
        Ok(Self::build(y, vec![n, o, geo.ho, geo.wo], vec![self.clone(), w.clone()], backward))
    }

    /// Average pooling with a square window equal to its stride over the two
    /// trailing axes.
    pub fn avg_pool(&self, factor: usize) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 || factor == 0 || self.dim(r - 2) % factor != 0 || self.dim(r - 1) % factor != 0 {
            return Err(Error::Shape(format!("avg_pool({factor}) on {:?}", self.shape())));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let map = SparseMap::avg_pool(self.dim(r - 2), self.dim(r - 1), factor);
        self.apply_map(&map)
    }

    /// Nearest-neighbour upsampling over the two trailing axes.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 || factor == 0 {
            return Err(Error::Shape(format!("upsample({factor}) on {:?}", self.shape())));
        }
        let map = SparseMap::upsample_nearest(self.dim(r - 2), self.dim(r - 1), factor);
        self.apply_map(&map)
    }

    // ------------------------------------------------------------------
    // Differentiation
    // ------------------------------------------------------------------

    /// Reverse-mode gradients of this scalar with respect to every leaf that
    /// requires a gradient.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", self.shape())));
        }
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        if !self.requires_grad() {
            return Ok(Gradients { grads });
        }
        let order = self.topo_order();
        grads.insert(self.id(), vec![1.0]);
        let mut leaves = HashMap::new();
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else { continue };
            match &node.0.backward {
                None => {
                    leaves.insert(node.id(), g);
                }
                Some(f) => {
                    let ctx = BackCtx { grad: &g, parents: &node.0.parents, out: node.data() };
                    let pg = f(&ctx);
                    for (p, pg) in node.0.parents.iter().zip(pg) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.id()) {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(&pg) {
                                    *a += v;
                                }
                            }
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.0.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

/// Gradients of the leaves of one backward pass, keyed by tensor identity.
#[derive(Default)]
pub struct Gradients {
    grads: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn remove(&mut self, t: &Tensor) -> Option<Vec<f64>> {
        self.grads.remove(&t.id())
    }
}

/// A fixed linear map from `in_len` to `out_len` values in CSR layout.
#[derive(Debug, Clone)]
pub struct SparseMap {
    pub in_len: usize,
    pub out_len: usize,
    pub out_shape: Vec<usize>,
    row_ptr: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl SparseMap {
    /// Builds a map from per-output `(input index, weight)` lists.
    pub fn from_rows(in_len: usize, out_shape: &[usize], rows: Vec<Vec<(usize, f64)>>) -> Rc<SparseMap> {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut entries = Vec::new();
        row_ptr.push(0);
        for r in rows {
            entries.extend(r);
            row_ptr.push(entries.len());
        }
        Rc::new(SparseMap { in_len, out_len: row_ptr.len() - 1, out_shape: out_shape.to_vec(), row_ptr, entries })
    }

    /// 3x3 stencil over an `h x w` plane with replicated borders.
    pub fn stencil3(h: usize, w: usize, kernel: [[f64; 3]; 3]) -> Rc<SparseMap> {
        let mut rows = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(9);
                for (dy, krow) in kernel.iter().enumerate() {
                    for (dx, &kv) in krow.iter().enumerate() {
                        if kv == 0.0 {
                            continue;
                        }
                        let yy = (y as isize + dy as isize - 1).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx as isize - 1).clamp(0, w as isize - 1) as usize;
                        let idx = yy * w + xx;
                        match row.iter_mut().find(|(i, _)| *i == idx) {
                            Some(e) => e.1 += kv,
                            None => row.push((idx, kv)),
                        }
                    }
                }
                rows.push(row);
            }
        }
        Self::from_rows(h * w, &[h, w], rows)
    }

    pub fn avg_pool(h: usize, w: usize, f: usize) -> Rc<SparseMap> {
        let (ho, wo) = (h / f, w / f);
        let wt = 1.0 / (f * f) as f64;
        let rows = (0..ho * wo)
            .map(|o| {
                let (oy, ox) = (o / wo, o % wo);
                (0..f * f).map(|j| ((oy * f + j / f) * w + ox * f + j % f, wt)).collect()
            })
            .collect();
        Self::from_rows(h * w, &[ho, wo], rows)
    }

    pub fn upsample_nearest(h: usize, w: usize, f: usize) -> Rc<SparseMap> {
        let (ho, wo) = (h * f, w * f);
        let rows = (0..ho * wo).map(|o| vec![((o / wo / f) * w + (o % wo) / f, 1.0)]).collect();
        Self::from_rows(h * w, &[ho, wo], rows)
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hw = g.ho * g.wo;
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ch * g.h + iy as usize) * g.w..(ch * g.h + iy as usize + 1) * g.w];
                    // valid ox satisfy 0 <= ox + kx - pad < w
                    let lo = g.pad.saturating_sub(kx).min(g.wo);
                    let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo).max(lo);
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let off = (lo + kx).saturating_sub(g.pad);
                    line[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let hw = g.ho * g.wo;
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ch * g.h + iy as usize) * g.w;
                    let lo = g.pad.saturating_sub(kx).min(g.wo);
                    let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo).max(lo);
                    let off = base + (lo + kx).saturating_sub(g.pad);
                    let dst = &mut x[off..off + hi - lo];
                    for (d, v) in dst.iter_mut().zip(&src[oy * g.wo + lo..oy * g.wo + hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `c = a . b + beta * c` with explicit (row, col) strides for `a` and `b`;
/// `c` is contiguous `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * sa.0 + (k - 1) * sa.1);
        assert!(b.len() > (k - 1) * sb.0 + (n - 1) * sb.1);
    }
    // SAFETY: bounds of all three operands are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn var(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::randn(shape, &mut rng);
        Tensor::var(t.to_vec(), shape).unwrap()
    }

    /// Central-difference check of `f` against its reverse-mode gradient.
    fn check(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> Tensor) {
        let out = f(inputs);
        let grads = out.backward().unwrap();
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get(x).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
            for i in 0..x.numel() {
                let bump = |d: f64| {
                    let mut v = x.to_vec();
                    v[i] += d;
                    let mut ins = inputs.to_vec();
                    ins[k] = Tensor::new(v, x.shape()).unwrap();
                    f(&ins).item().unwrap()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let err = (fd - analytic[i]).abs() / (1.0 + fd.abs());
                assert!(err < 1e-6, "input {k} elem {i}: fd {fd} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn broadcast_binary_ops() {
        let a = var(&[2, 3, 4], 1);
        let b = var(&[3, 1], 2);
        check(&[a.clone(), b.clone()], |t| t[0].mul(&t[1]).unwrap().sum_all());
        check(&[a.clone(), b.clone()], |t| t[0].div(&t[1].sqr().affine(1.0, 1.0)).unwrap().sum_all());
        check(&[a, b], |t| t[0].sub(&t[1]).unwrap().sqr().mean_all());
    }

    #[test]
    fn unary_ops() {
        let a = var(&[5, 3], 3);
        check(&[a.clone()], |t| t[0].gelu().sum_all());
        check(&[a.clone()], |t| t[0].silu().tanh().sum_all());
        check(&[a.clone()], |t| t[0].sigmoid().exp().sum_all());
        check(&[a], |t| t[0].sqr().affine(1.0, 0.5).sqrt().ln().sum_all());
    }

    #[test]
    fn matmul_batched_and_broadcast() {
        let a = var(&[2, 3, 4], 4);
        let b = var(&[4, 5], 5);
        let c = var(&[2, 4, 2], 6);
        check(&[a.clone(), b], |t| t[0].matmul(&t[1]).unwrap().sqr().sum_all());
        check(&[a, c], |t| t[0].matmul(&t[1]).unwrap().tanh().sum_all());
    }

    #[test]
    fn matmul_matches_naive() {
        let a = var(&[3, 4], 7);
        let b = var(&[4, 2], 8);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let s: f64 = (0..4).map(|k| a.data()[i * 4 + k] * b.data()[k * 2 + j]).sum();
                assert!((c.data()[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_and_norm() {
        let a = var(&[3, 5], 9);
        let w = Tensor::new((0..15).map(|i| i as f64 * 0.1).collect(), &[3, 5]).unwrap();
        check(&[a.clone()], |t| t[0].softmax_last().unwrap().mul(&w).unwrap().sum_all());
        check(&[a.clone()], |t| t[0].log_softmax_last().unwrap().mul(&w).unwrap().sum_all());
        check(&[a.clone()], |t| t[0].normalize_last(1e-5).unwrap().mul(&w).unwrap().sum_all());
        let s = a.softmax_last().unwrap();
        for row in s.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_ops() {
        let a = var(&[2, 3, 4], 10);
        let w = Tensor::new((0..24).map(|i| (i as f64).sin()).collect(), &[4, 3, 2]).unwrap();
        check(&[a.clone()], |t| t[0].permute(&[2, 1, 0]).unwrap().mul(&w).unwrap().sum_all());
        check(&[a.clone()], |t| t[0].narrow(1, 1, 2).unwrap().sqr().sum_all());
        check(&[a.clone()], |t| {
            let x = t[0].narrow(2, 0, 1).unwrap();
            let y = t[0].narrow(2, 1, 3).unwrap();
            Tensor::cat(&[y.sqr(), x], 2).unwrap().mul(&w.reshape(&[2, 3, 4]).unwrap()).unwrap().sum_all()
        });
        check(&[a.clone()], |t| t[0].index_select(&[1, 0, 1]).unwrap().sqr().sum_all());
        check(&[a], |t| t[0].sum_keepdim(1).unwrap().sqr().sum_all());
    }

    #[test]
    fn conv_and_pooling() {
        let x = var(&[2, 2, 4, 4], 11);
        let w = var(&[3, 2, 3, 3], 12);
        check(&[x.clone(), w], |t| t[0].conv2d(&t[1], 1).unwrap().sqr().sum_all());
        check(&[x.clone()], |t| t[0].avg_pool(2).unwrap().sqr().sum_all());
        check(&[x], |t| t[0].upsample_nearest(2).unwrap().tanh().sum_all());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = var(&[1, 2, 3, 3], 13);
        let w = var(&[1, 2, 3, 3], 14);
        let y = x.conv2d(&w, 1).unwrap();
        // centre output sees the whole input
        let centre: f64 = x.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        assert!((y.data()[4] - centre).abs() < 1e-12);
    }

    #[test]
    fn extreme_and_stencil() {
        let a = var(&[3, 4], 15);
        check(&[a.clone()], |t| t[0].max_all().unwrap().mul(&t[0].sum_all()).unwrap());
        let map = SparseMap::stencil3(3, 4, [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]);
        check(&[a], |t| t[0].apply_map(&map).unwrap().sqr().sum_all());
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let handle = std::thread::Builder::new()
            .stack_size(256 * 1024)
            .spawn(|| {
                let mut x = var(&[4], 16);
                for _ in 0..50_000 {
                    x = x.affine(1.0, 0.0);
                }
                drop(x);
            })
            .unwrap();
        handle.join().unwrap();
    }
}
