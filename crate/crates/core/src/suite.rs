//! The ablation suite: loss-combination and video-motion variants trained
//! from one shared base model, each scored by the sensitivity pilot and the
//! sampling metrics.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoders::Which;
use crate::error::{Error, Result};
use crate::evalkit::{compare_variants, Variant, VariantMetrics};
use crate::losses::LossBreakdown;
use crate::pilot::{run_pilot, write_report, PosGrammar, SensitivityReport, SlotKind};
use crate::synthdata::SceneSpec;
use crate::trainer::{run_training, Component, Model, TrainConfig, TrainData, Trainer};

/// One arm of the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    pub ablation: BTreeSet<Component>,
    /// `false` for the base model with motion blocks bypassed.
    pub trained: bool,
}

impl VariantSpec {
    fn trained(name: &str, ablation: &[Component]) -> Self {
        VariantSpec { name: name.into(), ablation: ablation.iter().copied().collect(), trained: true }
    }
}

pub const BASELINE: &str = "baseline";
pub const TEXT_MOTION_ONLY: &str = "text_motion_only";
pub const REG_ONLY: &str = "reg_only";
/// Text-motion and reg losses without the video-motion loss (gamma = 0).
pub const BOTH: &str = "both";
pub const FULL: &str = "full";

/// The five standard arms.
pub fn standard_variants() -> Vec<VariantSpec> {
    use Component::*;
    vec![
        VariantSpec { name: BASELINE.into(), ablation: BTreeSet::new(), trained: false },
        VariantSpec::trained(TEXT_MOTION_ONLY, &[Reg, VideoMotion]),
        VariantSpec::trained(REG_ONLY, &[TextMotion, VideoMotion]),
        VariantSpec::trained(BOTH, &[VideoMotion]),
        VariantSpec::trained(FULL, &[]),
    ]
}

/// Deterministic evaluation prompts drawn from the caption grammar.
pub fn eval_prompts(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| SceneSpec::sample(&mut rng).caption()).collect()
}

/// Sensitivity of `which` encoder of `model` under the configured pilot.
pub fn model_sensitivity(model: &Model, which: Which, tag: &str, cfg: &RunConfig) -> Result<SensitivityReport> {
    let grammar = PosGrammar::by_name(&cfg.pilot.grammar)?;
    let encode = |c: &[String]| model.enc.pooled(&model.store, c, which);
    run_pilot(&grammar, &encode, tag, cfg.pilot.n_contexts, cfg.pilot.seed, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub variant: String,
    pub seed: u64,
    /// Motion-encoder sensitivities.
    pub sensitivity: SensitivityReport,
    pub metrics: Option<VariantMetrics>,
    /// Losses of the last training step.
    pub final_losses: Option<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config_hash: String,
    /// Content-encoder sensitivities of the shared base model.
    pub pretrained: SensitivityReport,
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn get(&self, variant: &str, seed: u64) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let set: BTreeSet<u64> = self.rows.iter().map(|r| r.seed).collect();
        set.into_iter().collect()
    }

    /// Mean of a metric over seeds for one variant; `None` if never scored.
    pub fn seed_mean(&self, variant: &str, metric: &str) -> Option<f64> {
        let v: Vec<f64> =
            self.rows.iter().filter(|r| r.variant == variant).filter_map(|r| r.metrics.as_ref()?.metric(metric)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Wide CSV: one row per (variant, seed) with every slot sensitivity,
    /// the per-kind means and the sampling metrics (empty when not scored).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let slots: Vec<String> = self.pretrained.slots.iter().map(|s| s.slot.clone()).collect();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["variant".to_string(), "seed".to_string()];
        header.extend(slots.iter().map(|s| format!("sens_{s}")));
        header.extend(["sens_content", "sens_motion", "sens_all"].map(String::from));
        header.extend(VariantMetrics::METRICS.iter().map(|m| m.to_string()));
        header.push("config_hash".into());
        w.write_record(&header)?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_default();
        let mut emit = |variant: &str, seed: String, s: &SensitivityReport, m: Option<&VariantMetrics>| -> Result<()> {
            let mut rec = vec![variant.to_string(), seed];
            rec.extend(slots.iter().map(|n| fmt(s.get(n).map(|x| x.sensitivity))));
            rec.push(fmt(s.mean_of(SlotKind::Content)));
            rec.push(fmt(s.mean_of(SlotKind::Motion)));
            rec.push(fmt(Some(s.mean_all())));
            rec.extend(VariantMetrics::METRICS.iter().map(|k| fmt(m.and_then(|m| m.metric(k)))));
            rec.push(self.config_hash.clone());
            Ok(w.write_record(&rec)?)
        };
        emit("pretrained", String::new(), &self.pretrained, None)?;
        for r in &self.rows {
            emit(&r.variant, r.seed.to_string(), &r.sensitivity, r.metrics.as_ref())?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `suite.csv`, `suite.json`, and a pilot CSV and chart per row.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_csv(&dir.join("suite.csv"))?;
        let json = serde_json::to_vec_pretty(self)?;
        fs::write(dir.join("suite.json"), json).map_err(|e| Error::io(dir.join("suite.json"), e))?;
        write_report(&self.pretrained, dir, "pilot_pretrained")?;
        for r in &self.rows {
            write_report(&r.sensitivity, dir, &format!("pilot_{}_seed{}", r.variant, r.seed))?;
        }
        Ok(())
    }
}

/// Trains every variant of `variants` once per configured seed, starting
/// from `base` (trained encoders and base denoiser), then scores each with
/// the sensitivity pilot on its motion encoder and, if selected by
/// `cfg.suite.eval_variants`, with the sampling metrics. Per-run
/// checkpoints and loss logs go under `out_dir/<variant>/seed<k>/`.
pub fn run_ablation_suite(
    base: &Model,
    data: &TrainData,
    cfg: &RunConfig,
    variants: &[VariantSpec],
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&str),
) -> Result<SuiteReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let pretrained = model_sensitivity(base, Which::Content, "pretrained", cfg)?;
    let prompts = eval_prompts(cfg.eval.n_prompts, cfg.eval.seed);
    let eval_cfg = cfg.eval.eval_config();
    let scored = |name: &str| cfg.suite.eval_variants.is_empty() || cfg.suite.eval_variants.iter().any(|v| v == name);
    let mut rows = Vec::new();
    for &seed in &cfg.suite.seeds {
        for v in variants {
            progress(&format!("variant {} seed {seed}", v.name));
            let (model, final_losses) = if v.trained {
                let tc = TrainConfig { seed, ablation: v.ablation.clone(), ..cfg.train.clone() };
                let mut tr = Trainer::new(base.clone(), tc, &hash)?;
                let dir = out_dir.map(|d| d.join(&v.name).join(format!("seed{seed}")));
                if let Some(d) = &dir {
                    fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                }
                let rep = run_training(&mut tr, data, dir.as_deref())?;
                (tr.model, rep.losses.last().map(|l| l.1))
            } else {
                let mut m = base.clone();
                m.enc.init_motion_from_content(&mut m.store)?;
                (m, None)
            };
            let sensitivity = model_sensitivity(&model, Which::Motion, &v.name, cfg)?;
            let metrics = if scored(&v.name) {
                let arm = Variant { name: v.name.clone(), model: &model, use_motion: v.trained };
                let sample_seed = cfg.eval.seed.wrapping_add(seed.wrapping_mul(1_000_003));
                let rep = compare_variants(
                    &[arm],
                    &prompts,
                    cfg.eval.n_samples,
                    sample_seed,
                    (&base.enc, &base.store),
                    &eval_cfg,
                )?;
                rep.variants.into_iter().next()
            } else {
                None
            };
            rows.push(SuiteRow { variant: v.name.clone(), seed, sensitivity, metrics, final_losses });
        }
    }
    let report = SuiteReport { config_hash: hash, pretrained, rows };
    if let Some(d) = out_dir {
        report.write(d)?;
    }
    Ok(report)
}
