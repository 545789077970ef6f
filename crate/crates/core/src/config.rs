//! Run configuration: every tunable of the pipeline in one TOML document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::DdimConfig;
use crate::encoders::{EncoderConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::evalkit::EvalConfig;
use crate::motionfeat::HornSchunck;
use crate::pilot::PosGrammar;
use crate::trainer::{BaseConfig, ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_clips: 512, frames: 8, height: 16, width: 16, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PilotConfig {
    /// `corpus` or `appendix`.
    pub grammar: String,
    pub n_contexts: usize,
    pub seed: u64,
}

impl Default for PilotConfig {
    fn default() -> Self {
        PilotConfig { grammar: "corpus".into(), n_contexts: 256, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Distinct prompts drawn from the caption grammar.
    pub n_prompts: usize,
    /// Samples per prompt.
    pub n_samples: usize,
    pub seed: u64,
    pub ddim: DdimConfig,
    pub horn_schunck: HornSchunck,
    /// Prompts sampled together in one batch.
    pub chunk: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            n_prompts: 64,
            n_samples: 1,
            seed: 7,
            ddim: DdimConfig { steps: 10, ..Default::default() },
            horn_schunck: HornSchunck::default(),
            chunk: 16,
        }
    }
}

impl EvalSettings {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { ddim: self.ddim, horn_schunck: self.horn_schunck, chunk: self.chunk }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    /// Fine-tuning seeds; every variant is trained once per seed.
    pub seeds: Vec<u64>,
    /// Variants to sample and score; empty means all.
    pub eval_variants: Vec<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { seeds: vec![0, 1, 2], eval_variants: Vec::new() }
    }
}

/// The complete configuration of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub base: BaseConfig,
    pub train: TrainConfig,
    pub pilot: PilotConfig,
    pub eval: EvalSettings,
    pub suite: SuiteConfig,
}

impl Default for RunConfig {
    /// Sizes that train in minutes on one CPU core.
    fn default() -> Self {
        let data = DataConfig::default();
        let model = ModelConfig {
            encoder: EncoderConfig::default(),
            denoiser: DenoiserConfig {
                base_channels: 16,
                channel_mult: vec![1, 1],
                heads: 2,
                ff_mult: 2,
                attn_resolutions: vec![data.height / 2],
                frames: data.frames,
                height: data.height,
                width: data.width,
                ..Default::default()
            },
            ..Default::default()
        };
        RunConfig {
            data,
            model,
            pretrain: PretrainConfig { steps: 600, ..Default::default() },
            base: BaseConfig { steps: 1500, ..Default::default() },
            train: TrainConfig { steps: 1000, lr_min: 1e-4, lr_max: 1e-3, checkpoint_every: 250, ..Default::default() },
            pilot: PilotConfig::default(),
            eval: EvalSettings::default(),
            suite: SuiteConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a possibly partial document; missing keys take the values of
    /// [`RunConfig::default`], unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let mut merged = toml::Table::try_from(RunConfig::default()).expect("default config serializes");
        merge(&mut merged, user);
        let cfg: RunConfig =
            toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolves an optional file and `section.key=value` overrides, applied
    /// in order on top of the file. Values are TOML literals; anything that
    /// does not parse as one is taken as a string.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut user = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            merge(&mut user, parse_override(o)?);
        }
        let text = toml::to_string(&user).map_err(|e| Error::Config(e.to_string()))?;
        RunConfig::from_toml(&text)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config is always representable as JSON");
        hex::encode(Sha256::digest(&json))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let u = &self.model.denoiser;
        if (d.frames, d.height, d.width) != (u.frames, u.height, u.width) {
            return Err(Error::Config(format!(
                "data clips are {}x{}x{} but the denoiser expects {}x{}x{}",
                d.frames, d.height, d.width, u.frames, u.height, u.width
            )));
        }
        if d.frames < 2 || d.n_clips == 0 {
            return Err(Error::Config("need at least 2 frames and 1 clip".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        PosGrammar::by_name(&self.pilot.grammar)?;
        let e = &self.eval;
        if e.n_prompts == 0 || e.n_samples == 0 || e.ddim.steps == 0 {
            return Err(Error::Config("eval needs n_prompts, n_samples and ddim.steps > 0".into()));
        }
        if self.suite.seeds.is_empty() {
            return Err(Error::Config("suite needs at least one seed".into()));
        }
        Ok(())
    }
}

/// `a.b.c=value` as a nested table.
fn parse_override(s: &str) -> Result<toml::Table> {
    let (key, raw) = s.split_once('=').ok_or_else(|| Error::Config(format!("override '{s}' is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override '{s}' has an empty key segment")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = value;
    for seg in path.iter().rev() {
        let mut t = toml::Table::new();
        t.insert(seg.to_string(), node);
        node = toml::Value::Table(t);
    }
    match node {
        toml::Value::Table(t) => Ok(t),
        _ => unreachable!("at least one key segment"),
    }
}

/// Overlays `over` onto `base`, recursing into tables.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("[train]\nstepz = 3\n").unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn overrides_apply_in_order_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nsteps = 5\nseed = 3\n").unwrap();
        let sets = ["train.steps=9".to_string(), "pilot.grammar=appendix".to_string(), "train.steps=11".to_string()];
        let c = RunConfig::resolve(Some(&p), &sets).unwrap();
        assert_eq!((c.train.steps, c.train.seed), (11, 3));
        assert_eq!(c.pilot.grammar, "appendix");
        assert!(RunConfig::resolve(None, &["train.nope=1".to_string()]).is_err());
        assert!(RunConfig::resolve(None, &["novalue".to_string()]).is_err());
    }

    #[test]
    fn partial_file_fills_defaults_and_changes_hash() {
        let c = RunConfig::from_toml("[train]\nsteps = 7\n").unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.lr_max, RunConfig::default().train.lr_max);
        assert_eq!(c.data, DataConfig::default());
        assert_ne!(c.hash(), RunConfig::default().hash());
    }
}
