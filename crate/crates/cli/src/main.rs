//! `decomo`: data generation, pretraining, fine-tuning, ablations, sampling,
//! the sensitivity pilot and evaluation.

mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use decomo_core::chart::filmstrip;
use decomo_core::checkpoint::Checkpoint;
use decomo_core::config::RunConfig;
use decomo_core::encoders::Which;
use decomo_core::evalkit::{compare_variants, direction_agreement, motion_dynamics, Variant};
use decomo_core::nn::Group;
use decomo_core::pilot::{run_pilot, write_report, PosGrammar};
use decomo_core::pipeline::{init_model, pretrain_denoiser, pretrain_encoders, PRETRAINED_GROUPS};
use decomo_core::suite::{eval_prompts, run_ablation_suite, standard_variants};
use decomo_core::synthdata::{build_corpus, sha256_hex, Corpus, VideoClip, MANIFEST_FILE};
use decomo_core::trainer::{run_training, Model, TrainData, Trainer};
use decomo_core::{Error, Result};

use run::Run;

const OUTPUT_ROOT_ENV: &str = "DECOMO_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "decomo", version, about = "Decomposed content/motion text-to-video diffusion at desk scale")]
struct Cli {
    /// TOML run configuration; missing keys take built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Root for run directories [env: DECOMO_OUTPUT_ROOT, default: runs].
    #[arg(long, global = true, value_name = "DIR")]
    output_root: Option<PathBuf>,
    /// Name of the run directory; must not exist yet.
    #[arg(long, global = true)]
    run_id: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic clip corpus.
    Data,
    /// Contrastive encoder pretraining and base denoiser pretraining.
    Pretrain(PretrainArgs),
    /// Fine-tune the motion encoder and motion blocks.
    Train(TrainArgs),
    /// Train and score the ablation variants.
    Ablate(AblateArgs),
    /// Sample clips from a checkpoint.
    Sample(SampleArgs),
    /// Part-of-speech sensitivity of a text encoder.
    Pilot(PilotArgs),
    /// Compare checkpoints with the sampling metrics.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    All,
    Encoders,
    Base,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    stage: Stage,
    /// Encoder checkpoint to start from (required for `--stage base`).
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint with trained encoders and base denoiser.
    #[arg(long)]
    pretrained: PathBuf,
    /// Continue from a fine-tuning checkpoint of the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    pretrained: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Caption to sample; repeatable. Defaults to the evaluation prompts.
    #[arg(long = "prompt")]
    prompts: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Bypass the motion blocks.
    #[arg(long)]
    no_motion: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EncoderKind {
    Content,
    Motion,
}

#[derive(Args)]
struct PilotArgs {
    #[arg(long)]
    encoder_checkpoint: PathBuf,
    #[arg(long)]
    grammar: Option<String>,
    #[arg(long)]
    slot: Option<String>,
    #[arg(long)]
    contexts: Option<usize>,
    /// Enumerate every context instead of sampling.
    #[arg(long, conflicts_with = "contexts")]
    full: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "content")]
    encoder: EncoderKind,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint providing the judging encoders and the baseline.
    #[arg(long)]
    pretrained: PathBuf,
    /// `NAME=CHECKPOINT`; repeatable.
    #[arg(long = "variant", value_name = "NAME=CKPT")]
    variants: Vec<String>,
    /// Also score the pretrained model with motion blocks bypassed.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Process exit status and a stable category for each error kind.
fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Missing(_) => (3, "missing"),
        Error::Config(_) => (5, "config"),
        Error::Mismatch(_) => (5, "mismatch"),
        Error::Corrupt { .. } => (4, "corrupt"),
        Error::Numerical(_) => (4, "numerical"),
        Error::Io { .. } => (4, "io"),
        _ => (4, "runtime"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (code, cat) = classify(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{cat}]: {msg}");
            ExitCode::from(code)
        }
    }
}

fn log(msg: &str) {
    eprintln!("[decomo] {msg}");
}

fn output_root(cli: &Cli) -> PathBuf {
    cli.output_root
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn dispatch(cli: Cli) -> Result<PathBuf> {
    let mut sets = cli.sets.clone();
    match &cli.command {
        Command::Train(a) => {
            if let Some(s) = a.steps {
                sets.push(format!("train.steps={s}"));
            }
            if let Some(s) = a.seed {
                sets.push(format!("train.seed={s}"));
            }
        }
        Command::Pilot(a) => {
            if let Some(g) = &a.grammar {
                sets.push(format!("pilot.grammar=\"{g}\""));
            }
            if let Some(n) = a.contexts {
                sets.push(format!("pilot.n_contexts={n}"));
            }
            if a.full {
                sets.push("pilot.n_contexts=0".into());
            }
            if let Some(s) = a.seed {
                sets.push(format!("pilot.seed={s}"));
            }
        }
        Command::Eval(a) => {
            if let Some(n) = a.samples {
                sets.push(format!("eval.n_samples={n}"));
            }
            if let Some(s) = a.seed {
                sets.push(format!("eval.seed={s}"));
            }
        }
        Command::Sample(a) => {
            if let Some(s) = a.seed {
                sets.push(format!("eval.seed={s}"));
            }
        }
        _ => {}
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &sets)?;
    let root = output_root(&cli);
    let id = cli.run_id.as_deref();
    match &cli.command {
        Command::Data => cmd_data(&cfg, &root, id),
        Command::Pretrain(a) => cmd_pretrain(&cfg, &root, id, a),
        Command::Train(a) => cmd_train(&cfg, &root, id, a),
        Command::Ablate(a) => cmd_ablate(&cfg, &root, id, a),
        Command::Sample(a) => cmd_sample(&cfg, &root, id, a),
        Command::Pilot(a) => cmd_pilot(&cfg, &root, id, a),
        Command::Eval(a) => cmd_eval(&cfg, &root, id, a),
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing(format!("{what} not found at {}", path.display())))
    }
}

fn load_clips(dir: &Path) -> Result<Vec<VideoClip>> {
    require(&dir.join(MANIFEST_FILE), "corpus manifest")?;
    Corpus::open(dir)?.load_all()
}

fn load_checkpoint(path: &Path, need: &[Group]) -> Result<Checkpoint> {
    require(path, "checkpoint")?;
    let ck = Checkpoint::load(path)?;
    if let Some(g) = need.iter().find(|g| !ck.has_group(**g)) {
        return Err(Error::Missing(format!("{} has no {} group", path.display(), g.name())));
    }
    Ok(ck)
}

/// A model with every group stored in `ck`; an absent motion encoder starts
/// as a copy of the content encoder.
fn model_from(cfg: &RunConfig, ck: &Checkpoint) -> Result<Model> {
    let mut model = init_model(cfg)?;
    model.load_groups(ck, &ck.group_names())?;
    if !ck.has_group(Group::MotionEncoder) {
        model.enc.init_motion_from_content(&mut model.store)?;
    }
    Ok(model)
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:e}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn cmd_data(cfg: &RunConfig, root: &Path, id: Option<&str>) -> Result<PathBuf> {
    let d = &cfg.data;
    let mut run = Run::create(root, "data", id, cfg)?;
    run.seed("data", d.seed);
    log(&format!("rendering {} clips of {}x{}x{}", d.n_clips, d.frames, d.height, d.width));
    build_corpus(&run.dir.join("corpus"), d.n_clips, d.frames, d.height, d.width, d.seed)?;
    run.finish()
}

fn cmd_pretrain(cfg: &RunConfig, root: &Path, id: Option<&str>, a: &PretrainArgs) -> Result<PathBuf> {
    let clips = load_clips(&a.corpus)?;
    let from = match (a.stage, &a.from) {
        (Stage::Base, None) => return Err(Error::Missing("--stage base needs --from <encoder checkpoint>".into())),
        (Stage::Base, Some(p)) => Some(load_checkpoint(p, &[Group::ContentEncoder, Group::ImageEncoder])?),
        (_, Some(_)) => return Err(Error::Config("--from is only used with --stage base".into())),
        (_, None) => None,
    };
    let mut run = Run::create(root, "pretrain", id, cfg)?;
    run.input(&a.corpus)?;
    if let Some(p) = &a.from {
        run.input(p)?;
    }
    run.seed("pretrain", cfg.pretrain.seed);
    run.seed("base", cfg.base.seed);
    let mut model = match &from {
        Some(ck) => model_from(cfg, ck)?,
        None => {
            log(&format!("contrastive pretraining, {} steps", cfg.pretrain.steps));
            let (m, losses) = pretrain_encoders(cfg, &clips)?;
            write_losses(&run.dir.join("contrastive_losses.csv"), &losses)?;
            m
        }
    };
    let mut groups = vec![Group::ContentEncoder, Group::ImageEncoder];
    if a.stage != Stage::Encoders {
        log(&format!("base denoiser pretraining, {} steps", cfg.base.steps));
        let (_, losses) = pretrain_denoiser(cfg, &mut model, &clips)?;
        write_losses(&run.dir.join("base_losses.csv"), &losses)?;
        groups.push(Group::UnetBase);
    }
    Checkpoint::capture(&model.store, &groups, 0, &cfg.hash()).save(&run.dir.join("pretrained.ckpt"))?;
    run.finish()
}

fn cmd_train(cfg: &RunConfig, root: &Path, id: Option<&str>, a: &TrainArgs) -> Result<PathBuf> {
    let clips = load_clips(&a.corpus)?;
    let pre = load_checkpoint(&a.pretrained, &PRETRAINED_GROUPS)?;
    let resume = a.resume.as_deref().map(|p| load_checkpoint(p, &Group::ALL)).transpose()?;
    let mut model = init_model(cfg)?;
    model.load_groups(&pre, &PRETRAINED_GROUPS)?;
    let data = TrainData::prepare(&model, &clips)?;
    let hash = cfg.hash();
    let mut trainer = match &resume {
        Some(ck) => Trainer::resume(model, cfg.train.clone(), &hash, ck)?,
        None => Trainer::new(model, cfg.train.clone(), &hash)?,
    };
    let mut run = Run::create(root, "train", id, cfg)?;
    run.input(&a.corpus)?;
    run.input(&a.pretrained)?;
    if let Some(p) = &a.resume {
        run.input(p)?;
    }
    run.seed("train", cfg.train.seed);
    log(&format!("fine-tuning from step {} to {}", trainer.step, cfg.train.steps));
    run_training(&mut trainer, &data, Some(&run.dir))?;
    run.finish()
}

fn cmd_ablate(cfg: &RunConfig, root: &Path, id: Option<&str>, a: &AblateArgs) -> Result<PathBuf> {
    let clips = load_clips(&a.corpus)?;
    let pre = load_checkpoint(&a.pretrained, &PRETRAINED_GROUPS)?;
    let mut base = init_model(cfg)?;
    base.load_groups(&pre, &PRETRAINED_GROUPS)?;
    let data = TrainData::prepare(&base, &clips)?;
    let mut run = Run::create(root, "ablate", id, cfg)?;
    run.input(&a.corpus)?;
    run.input(&a.pretrained)?;
    for &s in &cfg.suite.seeds {
        run.seed(&format!("suite_{s}"), s);
    }
    run.seed("eval", cfg.eval.seed);
    run_ablation_suite(&base, &data, cfg, &standard_variants(), Some(&run.dir), &mut |m| log(m))?;
    run.finish()
}

fn cmd_sample(cfg: &RunConfig, root: &Path, id: Option<&str>, a: &SampleArgs) -> Result<PathBuf> {
    let ck = load_checkpoint(&a.checkpoint, &PRETRAINED_GROUPS)?;
    let model = model_from(cfg, &ck)?;
    let prompts = if a.prompts.is_empty() { eval_prompts(cfg.eval.n_prompts, cfg.eval.seed) } else { a.prompts.clone() };
    let seed = cfg.eval.seed;
    let mut run = Run::create(root, "sample", id, cfg)?;
    run.input(&a.checkpoint)?;
    run.seed("sample", seed);
    log(&format!("sampling {} clips", prompts.len()));
    let clips = model.sample(&prompts, !a.no_motion, &cfg.eval.ddim, seed)?;
    let path = run.dir.join("samples.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["index", "caption", "file", "sha256", "motion_dynamics", "flow_score", "direction_agreement"])?;
    for (i, (clip, cap)) in clips.iter().zip(&prompts).enumerate() {
        let file = format!("sample_{i:03}.png");
        let png = run.dir.join(&file);
        filmstrip(clip.view(), &png)?;
        let bytes = std::fs::read(&png).map_err(|e| Error::io(&png, e))?;
        let md = motion_dynamics(clip.view(), &cfg.eval.horn_schunck)?;
        let da = match direction_agreement(clip.view(), cap, &cfg.eval.horn_schunck) {
            Ok(v) => format!("{v}"),
            Err(_) => String::new(),
        };
        w.write_record([
            i.to_string(),
            cap.clone(),
            file,
            sha256_hex(&bytes),
            format!("{:.6e}", md.frame_diff),
            format!("{:.6e}", md.flow),
            da,
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    run.finish()
}

fn cmd_pilot(cfg: &RunConfig, root: &Path, id: Option<&str>, a: &PilotArgs) -> Result<PathBuf> {
    let need = match a.encoder {
        EncoderKind::Content => vec![Group::ContentEncoder],
        EncoderKind::Motion => vec![Group::MotionEncoder],
    };
    let ck = load_checkpoint(&a.encoder_checkpoint, &need)?;
    let mut model = init_model(cfg)?;
    model.load_groups(&ck, &need)?;
    let grammar = PosGrammar::by_name(&cfg.pilot.grammar)?;
    if let Some(s) = &a.slot {
        grammar.slot_index(s)?;
    }
    let (which, tag) = match a.encoder {
        EncoderKind::Content => (Which::Content, "content"),
        EncoderKind::Motion => (Which::Motion, "motion"),
    };
    let mut run = Run::create(root, "pilot", id, cfg)?;
    run.input(&a.encoder_checkpoint)?;
    run.seed("pilot", cfg.pilot.seed);
    let encode = |c: &[String]| model.enc.pooled(&model.store, c, which);
    let report = run_pilot(&grammar, &encode, tag, cfg.pilot.n_contexts, cfg.pilot.seed, a.slot.as_deref())?;
    write_report(&report, &run.dir, "sensitivity")?;
    run.finish()
}

fn cmd_eval(cfg: &RunConfig, root: &Path, id: Option<&str>, a: &EvalArgs) -> Result<PathBuf> {
    if a.variants.is_empty() && !a.baseline {
        return Err(Error::Config("nothing to evaluate: pass --variant NAME=CKPT or --baseline".into()));
    }
    let pre = load_checkpoint(&a.pretrained, &PRETRAINED_GROUPS)?;
    let base = model_from(cfg, &pre)?;
    let mut models = Vec::new();
    for v in &a.variants {
        let (name, path) =
            v.split_once('=').ok_or_else(|| Error::Config(format!("--variant '{v}' is not NAME=CKPT")))?;
        let ck = load_checkpoint(Path::new(path), &Group::ALL)?;
        models.push((name.to_string(), PathBuf::from(path), model_from(cfg, &ck)?));
    }
    let mut run = Run::create(root, "eval", id, cfg)?;
    run.input(&a.pretrained)?;
    for (_, p, _) in &models {
        run.input(p)?;
    }
    run.seed("eval", cfg.eval.seed);
    let mut arms: Vec<Variant> = Vec::new();
    if a.baseline {
        arms.push(Variant { name: "baseline".into(), model: &base, use_motion: false });
    }
    arms.extend(models.iter().map(|(n, _, m)| Variant { name: n.clone(), model: m, use_motion: true }));
    let prompts = eval_prompts(cfg.eval.n_prompts, cfg.eval.seed);
    log(&format!("scoring {} variants on {} prompts", arms.len(), prompts.len()));
    let mut report = compare_variants(
        &arms,
        &prompts,
        cfg.eval.n_samples,
        cfg.eval.seed,
        (&base.enc, &base.store),
        &cfg.eval.eval_config(),
    )?;
    report.config_hash = cfg.hash();
    report.write(&run.dir, "eval")?;
    run.finish()
}
