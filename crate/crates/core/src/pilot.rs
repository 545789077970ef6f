//! Part-of-speech sensitivity of a text encoder.
//!
//! Prompts come from a slot template. For a target slot, a group fixes every
//! other slot to one context and varies the target over all its words. The
//! sensitivity of a group is one minus the mean pairwise cosine of the
//! pooled embeddings; a slot's sensitivity is the mean over groups.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motionfeat::safe_cosine;
use crate::synthdata::{Background, Color, Direction, Motion as MotionWord, ShapeKind, Size, Speed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Content,
    Motion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub kind: SlotKind,
    pub words: Vec<String>,
}

/// A template with `{NAME}` placeholders, one per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosGrammar {
    pub template: String,
    pub slots: Vec<Slot>,
}

fn slot(name: &str, kind: SlotKind, words: &[&str]) -> Slot {
    Slot { name: name.to_string(), kind, words: words.iter().map(|w| w.to_string()).collect() }
}

impl PosGrammar {
    /// Six slots of eight everyday words.
    pub fn appendix() -> Self {
        use SlotKind::*;
        PosGrammar {
            template: "a {ADJ} {NOUN1} {VERB} {ADV} {ADP} the {NOUN2}".into(),
            slots: vec![
                slot("ADJ", Content, &["big", "small", "tall", "short", "fat", "thin", "young", "old"]),
                slot("NOUN1", Content, &["cat", "dog", "horse", "child", "man", "woman", "bird", "fish"]),
                slot("VERB", Motion, &["walk", "run", "jump", "crawl", "eat", "swim", "fly", "climb"]),
                slot(
                    "ADV",
                    Motion,
                    &["quickly", "slowly", "suddenly", "steadily", "cautiously", "briskly", "gracefully", "clumsily"],
                ),
                slot("ADP", Motion, &["across", "over", "through", "beside", "against", "under", "above", "near"]),
                slot("NOUN2", Content, &["river", "bridge", "mountain", "tree", "house", "lake", "field", "forest"]),
            ],
        }
    }

    /// The synthetic corpus caption template; every word is in vocabulary.
    pub fn corpus() -> Self {
        use SlotKind::*;
        fn words<T: Copy>(all: &[T], f: fn(T) -> &'static str) -> Vec<String> {
            all.iter().map(|&v| f(v).to_string()).collect()
        }
        PosGrammar {
            template: "a {SIZE} {COLOR} {SHAPE} {MOTION} {SPEED} toward the {DIRECTION} on the {BACKGROUND} background"
                .into(),
            slots: vec![
                Slot { name: "SIZE".into(), kind: Content, words: words(&Size::ALL, Size::word) },
                Slot { name: "COLOR".into(), kind: Content, words: words(&Color::ALL, Color::word) },
                Slot { name: "SHAPE".into(), kind: Content, words: words(&ShapeKind::ALL, ShapeKind::word) },
                Slot { name: "MOTION".into(), kind: Motion, words: words(&MotionWord::ALL, MotionWord::word) },
                Slot { name: "SPEED".into(), kind: Motion, words: words(&Speed::ALL, Speed::word) },
                Slot { name: "DIRECTION".into(), kind: Motion, words: words(&Direction::ALL, Direction::word) },
                Slot { name: "BACKGROUND".into(), kind: Content, words: words(&Background::ALL, Background::word) },
            ],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "appendix" => Ok(Self::appendix()),
            "corpus" => Ok(Self::corpus()),
            other => Err(Error::Config(format!("unknown grammar '{other}' (expected appendix or corpus)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.slots {
            if s.words.is_empty() {
                return Err(Error::Config(format!("slot {} has no words", s.name)));
            }
            let ph = format!("{{{}}}", s.name);
            if self.template.matches(&ph).count() != 1 {
                return Err(Error::Config(format!("template must contain {ph} exactly once")));
            }
        }
        Ok(())
    }

    pub fn slot_index(&self, name: &str) -> Result<usize> {
        self.slots
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("no slot named {name}")))
    }

    pub fn prompt_count(&self) -> u128 {
        self.slots.iter().map(|s| s.words.len() as u128).product()
    }

    /// Number of distinct contexts for `slot`: the product of all other slot sizes.
    pub fn context_count(&self, slot: usize) -> u128 {
        self.slots.iter().enumerate().filter(|(i, _)| *i != slot).map(|(_, s)| s.words.len() as u128).product()
    }

    /// Fills the template with one word index per slot.
    pub fn render(&self, choice: &[usize]) -> String {
        let mut out = self.template.clone();
        for (s, &c) in self.slots.iter().zip(choice) {
            out = out.replace(&format!("{{{}}}", s.name), &s.words[c]);
        }
        out
    }
}

/// Prompts sharing one context, varying `slot` over its full word list.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGroup {
    pub slot: usize,
    pub prompts: Vec<String>,
}

/// `n_contexts` groups for `slot`, with contexts drawn uniformly without
/// replacement. Asking for every context enumerates them in order.
pub fn enumerate_groups(grammar: &PosGrammar, slot: usize, n_contexts: usize, seed: u64) -> Result<Vec<PromptGroup>> {
    grammar.validate()?;
    if slot >= grammar.slots.len() {
        return Err(Error::Config(format!("slot {slot} out of range")));
    }
    let total = grammar.context_count(slot);
    if n_contexts as u128 > total || n_contexts == 0 {
        return Err(Error::Config(format!("{n_contexts} contexts requested, {total} available")));
    }
    let total = total as usize;
    let picks: Vec<usize> = if n_contexts == total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, total, n_contexts).into_vec()
    };
    let others: Vec<usize> = (0..grammar.slots.len()).filter(|&i| i != slot).collect();
    Ok(picks
        .into_iter()
        .map(|mut ctx| {
            let mut choice = vec![0; grammar.slots.len()];
            for &o in others.iter().rev() {
                let n = grammar.slots[o].words.len();
                choice[o] = ctx % n;
                ctx /= n;
            }
            let prompts = (0..grammar.slots[slot].words.len())
                .map(|w| {
                    choice[slot] = w;
                    grammar.render(&choice)
                })
                .collect();
            PromptGroup { slot, prompts }
        })
        .collect())
}

/// Mean pairwise cosine over all unordered pairs.
pub fn mean_pairwise_similarity(embeddings: &[&[f64]]) -> Result<f64> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::Config(format!("a group needs at least 2 prompts, got {n}")));
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += safe_cosine(embeddings[i], embeddings[j])?;
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

fn to_sensitivity(similarity: f64) -> f64 {
    let s = 1.0 - similarity;
    if (-1e-6..0.0).contains(&s) {
        0.0
    } else if (1.0..1.0 + 1e-6).contains(&s) {
        1.0
    } else {
        s
    }
}

/// `1 - mean pairwise cosine` of one group's embeddings.
pub fn group_sensitivity(embeddings: &[&[f64]]) -> Result<f64> {
    Ok(to_sensitivity(mean_pairwise_similarity(embeddings)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSensitivity {
    pub slot: String,
    pub kind: SlotKind,
    pub sensitivity: f64,
    pub groups: usize,
    /// Variance of the per-group mean similarity.
    pub similarity_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub encoder_tag: String,
    pub seed: u64,
    pub n_contexts: usize,
    pub slots: Vec<SlotSensitivity>,
}

impl SensitivityReport {
    /// Mean sensitivity over slots of one kind; `None` if there are none.
    pub fn mean_of(&self, kind: SlotKind) -> Option<f64> {
        let v: Vec<f64> = self.slots.iter().filter(|s| s.kind == kind).map(|s| s.sensitivity).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_all(&self) -> f64 {
        self.slots.iter().map(|s| s.sensitivity).sum::<f64>() / self.slots.len().max(1) as f64
    }

    pub fn get(&self, slot: &str) -> Option<&SlotSensitivity> {
        self.slots.iter().find(|s| s.slot == slot)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["encoder", "slot", "kind", "sensitivity", "groups", "similarity_variance", "seed"])?;
        for s in &self.slots {
            w.write_record([
                self.encoder_tag.clone(),
                s.slot.clone(),
                format!("{:?}", s.kind).to_lowercase(),
                format!("{:.6}", s.sensitivity),
                s.groups.to_string(),
                format!("{:.6e}", s.similarity_variance),
                self.seed.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Bar chart: one bar per slot, content slots blue, motion slots orange.
    pub fn write_chart(&self, path: &Path) -> Result<()> {
        let bars: Vec<(f64, [u8; 3])> = self
            .slots
            .iter()
            .map(|s| (s.sensitivity, if s.kind == SlotKind::Content { [70, 110, 200] } else { [230, 140, 40] }))
            .collect();
        crate::chart::bar_chart(&bars, path)
    }
}

/// Sensitivity of every slot (or only `only`) of `grammar` under an encoder
/// that maps prompts to pooled embeddings. Each distinct prompt is encoded
/// once. `n_contexts == 0` enumerates every context of each slot.
pub fn run_pilot(
    grammar: &PosGrammar,
    encode: &dyn Fn(&[String]) -> Result<Vec<Vec<f64>>>,
    encoder_tag: &str,
    n_contexts: usize,
    seed: u64,
    only: Option<&str>,
) -> Result<SensitivityReport> {
    grammar.validate()?;
    let targets: Vec<usize> = match only {
        Some(name) => vec![grammar.slot_index(name)?],
        None => (0..grammar.slots.len()).collect(),
    };
    let mut slots = Vec::new();
    for t in targets {
        let n = if n_contexts == 0 { grammar.context_count(t) as usize } else { n_contexts };
        let groups = enumerate_groups(grammar, t, n, seed.wrapping_add(t as u64))?;
        let mut unique: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        for g in &groups {
            for p in &g.prompts {
                if !index.contains_key(p) {
                    index.insert(p.clone(), unique.len());
                    unique.push(p.clone());
                }
            }
        }
        let emb = encode(&unique)?;
        if emb.len() != unique.len() {
            return Err(Error::Shape(format!("{} embeddings for {} prompts", emb.len(), unique.len())));
        }
        let sims: Vec<f64> = groups
            .iter()
            .map(|g| {
                let e: Vec<&[f64]> = g.prompts.iter().map(|p| emb[index[p]].as_slice()).collect();
                mean_pairwise_similarity(&e)
            })
            .collect::<Result<_>>()?;
        let n = sims.len() as f64;
        let mean = sims.iter().sum::<f64>() / n;
        let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        let s = &grammar.slots[t];
        slots.push(SlotSensitivity {
            slot: s.name.clone(),
            kind: s.kind,
            sensitivity: to_sensitivity(mean),
            groups: groups.len(),
            similarity_variance: var,
        });
    }
    Ok(SensitivityReport { encoder_tag: encoder_tag.to_string(), seed, n_contexts, slots })
}

/// Writes `<stem>.csv` and `<stem>.png` into `dir`.
pub fn write_report(report: &SensitivityReport, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    report.write_csv(&dir.join(format!("{stem}.csv")))?;
    report.write_chart(&dir.join(format!("{stem}.png")))
}
