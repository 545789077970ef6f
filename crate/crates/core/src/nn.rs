//! Parameter storage and the small set of layers the models are built from.
//!
//! Parameters live in a [`ParamStore`] as shared buffers. A forward pass goes
//! through a [`Session`], which turns each parameter into a graph leaf the
//! first time it is used. Only parameters of trainable groups become
//! differentiable leaves, so frozen groups never receive a gradient.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, Gradients, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    ContentEncoder,
    ImageEncoder,
    MotionEncoder,
    UnetBase,
    MotionBlocks,
}

impl Group {
    pub const ALL: [Group; 5] =
        [Group::ContentEncoder, Group::ImageEncoder, Group::MotionEncoder, Group::UnetBase, Group::MotionBlocks];

    pub fn name(self) -> &'static str {
        match self {
            Group::ContentEncoder => "content_encoder",
            Group::ImageEncoder => "image_encoder",
            Group::MotionEncoder => "motion_encoder",
            Group::UnetBase => "unet_base",
            Group::MotionBlocks => "motion_blocks",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// A set of parameter groups.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Groups(u8);

impl Groups {
    pub const NONE: Groups = Groups(0);

    pub fn of(groups: &[Group]) -> Groups {
        Groups(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & g.bit() != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    value: Rc<Vec<f64>>,
}

impl Param {
    pub fn value(&self) -> &[f64] {
        &self.value
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Normal scaled by `1/sqrt(fan_in)`.
    FanIn(usize),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng + ?Sized>(&mut self, name: &str, group: Group, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let n = numel(shape);
        let value = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
            Init::FanIn(fan_in) => {
                let std = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
            }
        };
        let id = self.params.len();
        self.params.push(Param { name: name.to_string(), group, shape: shape.to_vec(), value: Rc::new(value) });
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, groups: Groups) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| groups.contains(p.group)).map(|(id, _)| id).collect()
    }

    pub fn count(&self, groups: Groups) -> usize {
        self.params.iter().filter(|p| groups.contains(p.group)).map(|p| p.value.len()).sum()
    }

    pub fn set(&mut self, id: ParamId, value: Vec<f64>) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.len() != p.value.len() {
            return Err(Error::Shape(format!("{}: {} values for {:?}", p.name, value.len(), p.shape)));
        }
        p.value = Rc::new(value);
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        Rc::make_mut(&mut self.params[id.0].value).as_mut_slice()
    }

    /// Copies every parameter named `{from}.*` onto `{to}.*`.
    pub fn copy_prefix(&mut self, from: &str, to: &str) -> Result<usize> {
        let pairs: Vec<(usize, usize)> = self
            .params
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let rest = p.name.strip_prefix(from)?.strip_prefix('.')?;
                let j = *self.by_name.get(&format!("{to}.{rest}"))?;
                Some((i, j))
            })
            .collect();
        for &(i, j) in &pairs {
            if self.params[i].shape != self.params[j].shape {
                return Err(Error::Shape(format!("copy {} -> {}", self.params[i].name, self.params[j].name)));
            }
            self.params[j].value = Rc::new(self.params[i].value.to_vec());
        }
        Ok(pairs.len())
    }

    /// Snapshot of all parameter values in one group, keyed by name.
    pub fn snapshot(&self, group: Group) -> BTreeMap<String, Vec<f64>> {
        self.params.iter().filter(|p| p.group == group).map(|p| (p.name.clone(), p.value.to_vec())).collect()
    }

    /// Architecture fingerprint: names, groups and shapes in order.
    pub fn signature(&self) -> String {
        self.params.iter().map(|p| format!("{}:{}:{:?}", p.name, p.group.name(), p.shape)).collect::<Vec<_>>().join(";")
    }
}

/// One forward pass over a store.
pub struct Session<'a> {
    store: &'a ParamStore,
    trainable: Groups,
    leaves: RefCell<HashMap<usize, Tensor>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, trainable: Groups) -> Self {
        Session { store, trainable, leaves: RefCell::new(HashMap::new()) }
    }

    /// Evaluation session: nothing is differentiable.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, Groups::NONE)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Tensor {
        self.leaves
            .borrow_mut()
            .entry(id.0)
            .or_insert_with(|| {
                let p = &self.store.params[id.0];
                Tensor::leaf_shared(p.value.clone(), &p.shape, self.trainable.contains(p.group))
            })
            .clone()
    }

    /// Gradients of every trainable parameter touched in this session.
    pub fn grads(&self, grads: &Gradients) -> Vec<(ParamId, Vec<f64>)> {
        let leaves = self.leaves.borrow();
        let mut out: Vec<(ParamId, Vec<f64>)> = leaves
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(&i, t)| (ParamId(i), grads.get(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()])))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: Group,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(&format!("{name}.weight"), group, &[din, dout], Init::FanIn(din), rng);
        let b = bias.then(|| store.add(&format!("{name}.bias"), group, &[dout], Init::Zeros, rng));
        Linear { w, b, dout }
    }

    /// Zero-initialized weights and bias.
    pub fn zeros<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, group: Group, din: usize, dout: usize) -> Self {
        let w = store.add(&format!("{name}.weight"), group, &[din, dout], Init::Zeros, rng);
        let b = Some(store.add(&format!("{name}.bias"), group, &[dout], Init::Zeros, rng));
        Linear { w, b, dout }
    }

    /// `x [.., din] -> [.., dout]`
    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        let din = *shape.last().ok_or_else(|| Error::Shape("linear on scalar".into()))?;
        let rows = x.numel() / din.max(1);
        let y = x.reshape(&[rows, din])?.matmul(&s.param(self.w))?;
        let y = match self.b {
            Some(b) => y.add(&s.param(b))?,
            None => y,
        };
        let mut out = shape.to_vec();
        *out.last_mut().unwrap() = self.dout;
        y.reshape(&out)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: Group,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        let w = store.add(&format!("{name}.weight"), group, &[cout, cin, k, k], Init::FanIn(cin * k * k), rng);
        let b = store.add(&format!("{name}.bias"), group, &[1, cout, 1, 1], Init::Zeros, rng);
        Conv2d { w, b, pad: k / 2 }
    }

    pub fn zeros<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: Group,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        let w = store.add(&format!("{name}.weight"), group, &[cout, cin, k, k], Init::Zeros, rng);
        let b = store.add(&format!("{name}.bias"), group, &[1, cout, 1, 1], Init::Zeros, rng);
        Conv2d { w, b, pad: k / 2 }
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&s.param(self.w), self.pad)?.add(&s.param(self.b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, group: Group, d: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), group, &[d], Init::Ones, rng);
        let beta = store.add(&format!("{name}.beta"), group, &[d], Init::Zeros, rng);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        x.normalize_last(1e-5)?.mul(&s.param(self.gamma))?.add(&s.param(self.beta))
    }
}

/// Group normalization over `[N, C, H, W]`.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GroupNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, group: Group, groups: usize, c: usize) -> Self {
        assert!(c % groups == 0, "{c} channels not divisible into {groups} groups");
        let gamma = store.add(&format!("{name}.gamma"), group, &[1, c, 1, 1], Init::Ones, rng);
        let beta = store.add(&format!("{name}.beta"), group, &[1, c, 1, 1], Init::Zeros, rng);
        GroupNorm { groups, gamma, beta }
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("group norm on {shape:?}")));
        }
        let per = x.numel() / (shape[0] * self.groups);
        x.reshape(&[shape[0], self.groups, per])?
            .normalize_last(1e-5)?
            .reshape(&shape)?
            .mul(&s.param(self.gamma))?
            .add(&s.param(self.beta))
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub w: ParamId,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, group: Group, n: usize, d: usize) -> Self {
        Embedding { w: store.add(&format!("{name}.weight"), group, &[n, d], Init::Normal(0.02), rng) }
    }

    pub fn forward(&self, s: &Session, ids: &[usize]) -> Result<Tensor> {
        s.param(self.w).index_select(ids)
    }
}

/// Multi-head attention with bias-free q/k/v projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: Group,
        dq: usize,
        dctx: usize,
        inner: usize,
        heads: usize,
    ) -> Self {
        assert!(inner % heads == 0, "width {inner} not divisible by {heads} heads");
        Attention {
            q: Linear::new(store, rng, &format!("{name}.to_q"), group, dq, inner, false),
            k: Linear::new(store, rng, &format!("{name}.to_k"), group, dctx, inner, false),
            v: Linear::new(store, rng, &format!("{name}.to_v"), group, dctx, inner, false),
            out: Linear::new(store, rng, &format!("{name}.to_out"), group, inner, dq, true),
            heads,
        }
    }

    /// `x [B, N, dq]` attends over `ctx [B, M, dctx]` (or itself).
    ///
    /// `mask` is an additive bias broadcastable to `[B, heads, N, M]`. When
    /// `want_probs` is set the head-averaged attention probabilities
    /// `[B, N, M]` are returned as well.
    pub fn forward(
        &self,
        s: &Session,
        x: &Tensor,
        ctx: Option<&Tensor>,
        mask: Option<&Tensor>,
        want_probs: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let ctx = ctx.unwrap_or(x);
        let (b, n) = (x.dim(0), x.dim(1));
        let m = ctx.dim(1);
        let inner = self.q.dout;
        let h = self.heads;
        let dh = inner / h;
        let split = |t: Tensor, len: usize| t.reshape(&[b, len, h, dh])?.permute(&[0, 2, 1, 3]);
        let q = split(self.q.forward(s, x)?, n)?;
        let k = split(self.k.forward(s, ctx)?, m)?;
        let v = split(self.v.forward(s, ctx)?, m)?;
        let mut scores = q.matmul(&k.transpose(2, 3)?)?.scale(1.0 / (dh as f64).sqrt());
        if let Some(mask) = mask {
            scores = scores.add(mask)?;
        }
        let p = scores.softmax_last()?;
        let o = p.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, inner])?;
        let probs = if want_probs { Some(p.mean_keepdim(1)?.reshape(&[b, n, m])?) } else { None };
        Ok((self.out.forward(s, &o)?, probs))
    }
}

/// Gated feed-forward: `W2 (a * gelu(g))` where `[a, g] = W1 x`.
#[derive(Debug, Clone)]
pub struct GegluFf {
    pub proj: Linear,
    pub out: Linear,
    pub hidden: usize,
}

impl GegluFf {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, group: Group, d: usize, mult: usize) -> Self {
        let hidden = d * mult;
        GegluFf {
            proj: Linear::new(store, rng, &format!("{name}.proj"), group, d, 2 * hidden, true),
            out: Linear::new(store, rng, &format!("{name}.out"), group, hidden, d, true),
            hidden,
        }
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        let h = self.proj.forward(s, x)?;
        let last = h.rank() - 1;
        let a = h.narrow(last, 0, self.hidden)?;
        let g = h.narrow(last, self.hidden, self.hidden)?;
        self.out.forward(s, &a.mul(&g.gelu())?)
    }
}

/// Sinusoidal features of `positions`, `[len, dim]` row-major.
pub fn sinusoidal(positions: &[f64], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; positions.len() * dim];
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out[r * dim + i] = (p * freq).sin();
            out[r * dim + half + i] = (p * freq).cos();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_groups_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let a = Linear::new(&mut store, &mut rng, "a", Group::UnetBase, 3, 3, true);
        let b = Linear::new(&mut store, &mut rng, "b", Group::MotionBlocks, 3, 2, true);
        let s = Session::new(&store, Groups::of(&[Group::MotionBlocks]));
        let x = Tensor::randn(&[4, 3], &mut rng);
        let y = b.forward(&s, &a.forward(&s, &x).unwrap()).unwrap().sqr().sum_all();
        let g = s.grads(&y.backward().unwrap());
        assert_eq!(g.len(), 2);
        assert!(g.iter().all(|(id, _)| store.get(*id).group == Group::MotionBlocks));
    }

    #[test]
    fn copy_prefix_duplicates_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        Linear::new(&mut store, &mut rng, "src.l", Group::ContentEncoder, 3, 3, true);
        let dst = Linear::new(&mut store, &mut rng, "dst.l", Group::MotionEncoder, 3, 3, true);
        assert_eq!(store.copy_prefix("src", "dst").unwrap(), 2);
        assert_eq!(store.get(dst.w).value(), store.get(store.id("src.l.weight").unwrap()).value());
    }

    #[test]
    fn attention_probs_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, &mut rng, "attn", Group::UnetBase, 8, 6, 8, 2);
        let s = Session::eval(&store);
        let x = Tensor::randn(&[2, 5, 8], &mut rng);
        let c = Tensor::randn(&[2, 3, 6], &mut rng);
        let (y, p) = attn.forward(&s, &x, Some(&c), None, true).unwrap();
        assert_eq!(y.shape(), &[2, 5, 8]);
        let p = p.unwrap();
        assert_eq!(p.shape(), &[2, 5, 3]);
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
