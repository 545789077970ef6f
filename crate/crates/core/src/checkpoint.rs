//! Single-file weight container.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header,
//! then every tensor as little-endian `f64` in header order. The header lists
//! parameter groups with names, shapes and blob offsets, plus optional
//! optimizer moments, RNG state and free-form metadata.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Group, ParamStore};
use crate::optim::{Adam, AdamState};
use crate::synthdata::sha256_hex;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DECOMOCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position as a decimal string (JSON numbers are too narrow).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |m: &str| Error::Mismatch(format!("rng state: {m}"));
        let seed: [u8; 32] =
            hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?.try_into().map_err(|_| bad("seed length"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroupEntry {
    group: Group,
    params: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    len: usize,
    m_offset: usize,
    v_offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerEntry {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: Vec<MomentEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    step: usize,
    config_hash: String,
    arch_hash: String,
    groups: Vec<GroupEntry>,
    optimizer: Option<OptimizerEntry>,
    rng: Option<RngState>,
    meta: serde_json::Value,
    blob_len: usize,
}

/// Parameters of one group, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupWeights {
    pub group: Group,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: usize,
    pub config_hash: String,
    pub groups: Vec<GroupWeights>,
    pub optimizer: Option<Adam>,
    pub rng: Option<RngState>,
    pub meta: serde_json::Value,
}

/// Fingerprint of the parameter names and shapes of `groups` in a store.
pub fn arch_hash(store: &ParamStore, groups: &[Group]) -> String {
    let sig: Vec<String> = groups
        .iter()
        .flat_map(|&g| store.iter().filter(move |(_, p)| p.group == g).map(|(_, p)| format!("{}:{:?}", p.name, p.shape)))
        .collect();
    sha256_hex(sig.join(";").as_bytes())
}

fn weights_hash(groups: &[GroupWeights]) -> String {
    let sig: Vec<String> =
        groups.iter().flat_map(|g| g.params.iter().map(|(n, s, _)| format!("{n}:{s:?}"))).collect();
    sha256_hex(sig.join(";").as_bytes())
}

impl Checkpoint {
    /// Copies the named groups out of a store.
    pub fn capture(store: &ParamStore, groups: &[Group], step: usize, config_hash: &str) -> Self {
        let groups = groups
            .iter()
            .map(|&g| GroupWeights {
                group: g,
                params: store
                    .iter()
                    .filter(|(_, p)| p.group == g)
                    .map(|(_, p)| (p.name.clone(), p.shape.clone(), p.value().to_vec()))
                    .collect(),
            })
            .collect();
        Checkpoint {
            step,
            config_hash: config_hash.to_string(),
            groups,
            optimizer: None,
            rng: None,
            meta: serde_json::Value::Null,
        }
    }

    pub fn group_names(&self) -> Vec<Group> {
        self.groups.iter().map(|g| g.group).collect()
    }

    pub fn has_group(&self, g: Group) -> bool {
        self.groups.iter().any(|w| w.group == g)
    }

    /// Writes weights of the listed groups (all stored groups if empty) into
    /// `store`, after checking that names and shapes agree exactly.
    pub fn apply(&self, store: &mut ParamStore, only: &[Group]) -> Result<()> {
        let chosen: Vec<&GroupWeights> =
            self.groups.iter().filter(|g| only.is_empty() || only.contains(&g.group)).collect();
        for g in only {
            if !self.has_group(*g) {
                return Err(Error::Missing(format!("checkpoint has no {} group", g.name())));
            }
        }
        for gw in &chosen {
            let ours = arch_hash(store, &[gw.group]);
            let theirs = weights_hash(std::slice::from_ref(*gw));
            if ours != theirs {
                return Err(Error::Mismatch(format!("architecture of group {} differs", gw.group.name())));
            }
        }
        for gw in chosen {
            for (name, _, value) in &gw.params {
                let id = store.id(name).ok_or_else(|| Error::Mismatch(format!("unknown parameter {name}")))?;
                store.set(id, value.clone())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blob: Vec<f64> = Vec::new();
        let mut groups = Vec::new();
        for g in &self.groups {
            let mut params = Vec::new();
            for (name, shape, value) in &g.params {
                params.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset: blob.len() });
                blob.extend_from_slice(value);
            }
            groups.push(GroupEntry { group: g.group, params });
        }
        let optimizer = self.optimizer.as_ref().map(|o| {
            let moments = o
                .state
                .iter()
                .map(|(name, st)| {
                    let m_offset = blob.len();
                    blob.extend_from_slice(&st.m);
                    let v_offset = blob.len();
                    blob.extend_from_slice(&st.v);
                    MomentEntry { name: name.clone(), len: st.m.len(), m_offset, v_offset }
                })
                .collect();
            OptimizerEntry { beta1: o.beta1, beta2: o.beta2, eps: o.eps, t: o.t, moments }
        });
        let header = Header {
            version: CHECKPOINT_VERSION,
            step: self.step,
            config_hash: self.config_hash.clone(),
            arch_hash: weights_hash(&self.groups),
            groups,
            optimizer,
            rng: self.rng.clone(),
            meta: self.meta.clone(),
            blob_len: blob.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(20 + json.len() + blob.len() * 8);
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for v in &blob {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::corrupt(path, m);
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend]).map_err(|e| bad(&format!("header: {e}")))?;
        let body = &bytes[hend..];
        if body.len() != header.blob_len * 8 {
            return Err(bad(&format!("expected {} values, found {} bytes", header.blob_len, body.len())));
        }
        let blob: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let slice = |off: usize, len: usize| -> Result<Vec<f64>> {
            blob.get(off..off.saturating_add(len)).map(|s| s.to_vec()).ok_or_else(|| bad("offset out of range"))
        };
        let mut groups = Vec::new();
        for g in &header.groups {
            let mut params = Vec::new();
            for t in &g.params {
                let n: usize = t.shape.iter().product();
                params.push((t.name.clone(), t.shape.clone(), slice(t.offset, n)?));
            }
            groups.push(GroupWeights { group: g.group, params });
        }
        if weights_hash(&groups) != header.arch_hash {
            return Err(bad("architecture hash does not match contents"));
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(o) => {
                let mut state = BTreeMap::new();
                for m in &o.moments {
                    state.insert(m.name.clone(), AdamState { m: slice(m.m_offset, m.len)?, v: slice(m.v_offset, m.len)? });
                }
                Some(Adam { beta1: o.beta1, beta2: o.beta2, eps: o.eps, t: o.t, state })
            }
        };
        Ok(Checkpoint {
            step: header.step,
            config_hash: header.config_hash,
            groups,
            optimizer,
            rng: header.rng,
            meta: header.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use rand::{RngCore, SeedableRng};

    fn store(extra: bool) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.add("a.w", Group::ContentEncoder, &[2, 3], Init::Normal(1.0), &mut rng);
        s.add("b.w", Group::MotionBlocks, &[4], Init::Normal(1.0), &mut rng);
        if extra {
            s.add("b.x", Group::MotionBlocks, &[1], Init::Normal(1.0), &mut rng);
        }
        s
    }

    #[test]
    fn roundtrip_with_optimizer_and_rng() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let s = store(false);
        let mut ck = Checkpoint::capture(&s, &Group::ALL, 7, "abc");
        let mut opt = Adam::default();
        opt.t = 3;
        opt.state.insert("b.w".into(), AdamState { m: vec![1.0, 2.0, 3.0, 4.0], v: vec![0.5; 4] });
        ck.optimizer = Some(opt);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.next_u64();
        ck.rng = Some(RngState::capture(&rng));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step, 7);
        assert_eq!(back.groups, ck.groups);
        assert_eq!(back.optimizer.unwrap().state["b.w"].m, vec![1.0, 2.0, 3.0, 4.0]);
        let mut r2 = back.rng.unwrap().restore().unwrap();
        assert_eq!(r2.next_u64(), rng.next_u64());

        let mut fresh = store(false);
        fresh.set(fresh.id("a.w").unwrap(), vec![0.0; 6]).unwrap();
        back_apply(&path, &mut fresh);
        assert_eq!(fresh.get(fresh.id("a.w").unwrap()).value(), s.get(s.id("a.w").unwrap()).value());
    }

    fn back_apply(path: &Path, s: &mut ParamStore) {
        Checkpoint::load(path).unwrap().apply(s, &[]).unwrap();
    }

    #[test]
    fn rejects_architecture_mismatch_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        Checkpoint::capture(&store(false), &[Group::MotionBlocks], 0, "h").save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert!(matches!(ck.apply(&mut store(true), &[]), Err(Error::Mismatch(_))));
        assert!(matches!(ck.apply(&mut store(false), &[Group::UnetBase]), Err(Error::Missing(_))));

        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Corrupt { .. })));
        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Corrupt { .. })));
    }
}
