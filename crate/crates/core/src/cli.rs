//! Command-line front end: `train`, `eval`, `gradcheck`, `inspect`, `synth`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Fault;
use crate::checkpoint::{self, CheckpointError};
use crate::dataset::{
    load_manifest, read_iskel, DataError, DatasetManifest, SkeletonSequence, SplitTag,
};
use crate::gradcheck::{gradcheck, miniature_config, DEFAULT_EPS, DEFAULT_TOLERANCE};
use crate::model::{IstaNet, ModelConfig, ModelError};
use crate::synth::{generate, write_corpus, SynthConfig};
use crate::tensor::Real;
use crate::tokenizer::{tokenize, WindowSpec};
use crate::train::{argmax, predict, TrainConfig, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Verification(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

macro_rules! usage_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Usage(e.to_string())
            }
        }
    )*};
}
usage_from!(DataError, ModelError, CheckpointError);

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Parser)]
#[command(
    name = "istanet",
    version,
    about = "Interactive skeleton action recognition"
)]
pub struct Cli {
    /// Overrides the seed of the selected command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data preparation and evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a run configuration.
    Train(TrainArgs),
    /// Report top-1 accuracy of checkpoints on a manifest split or folds.
    Eval(EvalArgs),
    /// Finite-difference check of every parameter gradient at 64-bit.
    Gradcheck(GradcheckArgs),
    /// Dump tokens or attention maps of one sample as CSV.
    #[command(subcommand)]
    Inspect(InspectCommand),
    /// Write a synthetic two-entity corpus with a manifest.
    Synth(SynthArgs),
}

/// `t_w,j_w,e_w`.
#[derive(Debug, Clone, Copy)]
pub struct WindowArg(pub WindowSpec);

impl FromStr for WindowArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|e| format!("bad window {s:?}: {e}"))
            })
            .collect::<std::result::Result<_, _>>()?;
        match parts[..] {
            [t, j, e] => WindowSpec::new(t, j, e)
                .map(WindowArg)
                .map_err(|e| e.to_string()),
            _ => Err(format!("window must be t_w,j_w,e_w, got {s:?}")),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub window: Option<WindowArg>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Hold out this fold for validation (needs `data.folds`).
    #[arg(long)]
    pub fold: Option<usize>,
    /// Replaces `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// One checkpoint, or one per fold in fold order.
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// k-fold protocol: checkpoint `i` is scored on fold `i`.
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model configuration JSON; defaults to the built-in miniature model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long, hide = true)]
    pub fault: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum InspectCommand {
    /// Raw tokens as `u,t_block,j_block,e_block,s,c,value`.
    Tokens {
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        window: Option<WindowArg>,
        /// Take the window from this checkpoint's model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Attention scores as `block,head,u,v,score`.
    Attention {
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 8)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 40)]
    pub frames: usize,
    #[arg(long, default_value_t = 5)]
    pub joints: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    /// Randomize which entity is the actor in the test split.
    #[arg(long)]
    pub shuffle_test_entities: bool,
    /// Tag all clips `fold0..fold{k-1}` round-robin instead of train/test.
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Relative to the config file.
    pub manifest: PathBuf,
    #[serde(default = "default_train_split")]
    pub train_split: String,
    #[serde(default)]
    pub val_split: Option<String>,
    #[serde(default)]
    pub folds: Option<usize>,
}

fn default_train_split() -> String {
    "train".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Relative to the config file.
    pub out_dir: PathBuf,
}

impl RunConfigFile {
    /// Parses strictly and resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfigFile = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.manifest = base.join(&cfg.data.manifest);
        cfg.out_dir = base.join(&cfg.out_dir);
        if !cfg.data.manifest.exists() {
            return Err(CliError::Usage(format!(
                "manifest {} does not exist",
                cfg.data.manifest.display()
            )));
        }
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.workers > 0 {
        // Ignore a second initialization within one process (tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global();
    }
    match cli.command {
        Command::Train(a) => match cli.precision {
            Precision::F32 => cmd_train::<f32>(a, cli.seed),
            Precision::F64 => cmd_train::<f64>(a, cli.seed),
        },
        Command::Eval(a) => match cli.precision {
            Precision::F32 => cmd_eval::<f32>(a),
            Precision::F64 => cmd_eval::<f64>(a),
        },
        Command::Gradcheck(a) => cmd_gradcheck(a, cli.seed.unwrap_or(0)),
        Command::Inspect(c) => cmd_inspect(c),
        Command::Synth(a) => cmd_synth(a, cli.seed.unwrap_or(0)),
    }
}

fn load_split(manifest: &DatasetManifest, idx: &[usize]) -> Result<Vec<SkeletonSequence>> {
    idx.iter()
        .map(|&i| manifest.load(i).map_err(CliError::from))
        .collect()
}

fn check_labels(manifest: &DatasetManifest, model: &ModelConfig) -> Result<()> {
    if manifest.num_classes > model.num_classes {
        return Err(CliError::Usage(format!(
            "manifest has {} classes but the model has {}",
            manifest.num_classes, model.num_classes
        )));
    }
    Ok(())
}

fn cmd_train<R: Real>(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfigFile::load(&a.config)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(WindowArg(w)) = a.window {
        cfg.model.window = w;
    }
    if let Some(f) = a.frames {
        cfg.model.input.frames = f;
    }
    if let Some(out) = a.out {
        cfg.out_dir = out;
    }
    let manifest = load_manifest(&cfg.data.manifest)?;
    check_labels(&manifest, &cfg.model)?;

    let (train_idx, val_idx) = match (a.fold, cfg.data.folds) {
        (Some(k), Some(n)) => {
            let folds = manifest.folds(n);
            let fold = folds
                .get(k)
                .ok_or_else(|| CliError::Usage(format!("fold {k} out of range for {n} folds")))?;
            (fold.train.clone(), fold.test.clone())
        }
        (Some(_), None) => {
            return Err(CliError::Usage(
                "--fold needs data.folds in the config".into(),
            ))
        }
        (None, _) => (
            manifest.split(&SplitTag::parse(&cfg.data.train_split)),
            cfg.data
                .val_split
                .as_deref()
                .map(|s| manifest.split(&SplitTag::parse(s)))
                .unwrap_or_default(),
        ),
    };

    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = checkpoint::load_file::<R>(p)?;
            t.config.epochs = cfg.train.epochs;
            t
        }
        None => {
            cfg.model.validate()?;
            let model = IstaNet::<R>::new(cfg.model.clone(), cfg.train.seed)?;
            Trainer::new(model, cfg.train.clone())?
        }
    };
    let train = trainer.prepare_all(&load_split(&manifest, &train_idx)?)?;
    let val = trainer.prepare_all(&load_split(&manifest, &val_idx)?)?;
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let snapshot = serde_json::to_string_pretty(&cfg).expect("config serializes");
    fs::write(cfg.out_dir.join("config.json"), snapshot + "\n")
        .map_err(|e| CliError::Usage(format!("cannot write config snapshot: {e}")))?;

    let history = trainer.fit(&train, &val, Some(&cfg.out_dir))?;
    if let Some(m) = history.last() {
        println!(
            "epoch {} train_loss {:.4} train_top1 {:.2} val_top1 {}",
            m.epoch,
            m.train_loss,
            100.0 * m.train_top1,
            m.val_top1
                .map_or("-".into(), |v| format!("{:.2}", 100.0 * v))
        );
    }
    Ok(())
}

/// Top-1 report text and the accuracy in `[0, 1]`.
fn score<R: Real>(
    model: &IstaNet<R>,
    clips: &[SkeletonSequence],
    class_names: &[String],
) -> Result<(String, f64)> {
    if clips.is_empty() {
        return Err(CliError::Usage("cannot evaluate an empty split".into()));
    }
    let prepared = clips
        .iter()
        .map(|c| model.prepare(c))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let logits = predict(model, &prepared, 32)?;
    let k = model.config.num_classes;
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (l, c) in logits.iter().zip(clips) {
        total[c.label] += 1;
        if argmax(l) == c.label {
            correct[c.label] += 1;
        }
    }
    let acc = correct.iter().sum::<usize>() as f64 / clips.len() as f64;
    let mut out = format!("top1: {:.2}\n", 100.0 * acc);
    for class in 0..k {
        let name = class_names
            .get(class)
            .cloned()
            .unwrap_or_else(|| class.to_string());
        let _ = writeln!(out, "class {name}: {}/{}", correct[class], total[class]);
    }
    Ok((out, acc))
}

fn cmd_eval<R: Real>(a: EvalArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    match a.folds {
        None => {
            if a.checkpoint.len() != 1 {
                return Err(CliError::Usage(
                    "split evaluation takes exactly one checkpoint".into(),
                ));
            }
            let model = checkpoint::load_file::<R>(&a.checkpoint[0])?.model;
            check_labels(&manifest, &model.config)?;
            let idx = manifest.split(&SplitTag::parse(&a.split));
            let (report, _) = score(&model, &load_split(&manifest, &idx)?, &manifest.class_names)?;
            print!("{report}");
        }
        Some(n) => {
            if a.checkpoint.len() != n {
                return Err(CliError::Usage(format!(
                    "{n}-fold evaluation needs {n} checkpoints, got {}",
                    a.checkpoint.len()
                )));
            }
            let mut accs = Vec::with_capacity(n);
            for (i, (fold, ckpt)) in manifest.folds(n).iter().zip(&a.checkpoint).enumerate() {
                let model = checkpoint::load_file::<R>(ckpt)?.model;
                check_labels(&manifest, &model.config)?;
                let (_, acc) = score(
                    &model,
                    &load_split(&manifest, &fold.test)?,
                    &manifest.class_names,
                )?;
                println!("fold {i}: {:.2}", 100.0 * acc);
                accs.push(acc);
            }
            println!("mean: {:.2}", 100.0 * accs.iter().sum::<f64>() / n as f64);
        }
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, seed: u64) -> Result<()> {
    let config = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<ModelConfig>(&text).map_err(|e| {
                CliError::Usage(format!("invalid model config {}: {e}", p.display()))
            })?
        }
        None => miniature_config(),
    };
    let fault = match a.fault.as_deref() {
        None => None,
        Some("tanh") => Some(Fault::TanhDerivative),
        Some(other) => return Err(CliError::Usage(format!("unknown fault {other:?}"))),
    };
    let reports = gradcheck(&config, seed, a.eps, fault)?;
    let mut offenders = Vec::new();
    for r in &reports {
        let ok = r.passes(a.tolerance);
        println!(
            "{:<40} {:>6} {:.3e} {}",
            r.name,
            r.elements,
            r.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            offenders.push(r.name.clone());
        }
    }
    if offenders.is_empty() {
        println!(
            "all {} parameters within {:.0e}",
            reports.len(),
            a.tolerance
        );
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "gradient check failed for: {}",
            offenders.join(", ")
        )))
    }
}

fn cmd_inspect(c: InspectCommand) -> Result<()> {
    let mut out = String::new();
    match c {
        InspectCommand::Tokens {
            sample,
            window,
            checkpoint: ckpt,
        } => {
            let seq = read_iskel(&sample)?;
            let w = match (window, ckpt) {
                (Some(WindowArg(w)), _) => w,
                (None, Some(p)) => checkpoint::load_file::<f32>(&p)?.model.config.window,
                (None, None) => {
                    return Err(CliError::Usage(
                        "tokens needs --window or --checkpoint".into(),
                    ))
                }
            };
            let tok = tokenize(&seq.data, &w).map_err(|e| CliError::Usage(e.to_string()))?;
            let [c, tw, s, u] = tok.data.shape()[..] else {
                unreachable!("tokens are rank 4")
            };
            out.push_str("u,t_block,j_block,e_block,s,c,value\n");
            for ui in 0..u {
                let (tb, jb, eb) = tok.layout.blocks(ui);
                for ti in 0..tw {
                    for si in 0..s {
                        for ci in 0..c {
                            let v = tok.data.at(&[ci, ti, si, ui]);
                            let _ = writeln!(out, "{ui},{tb},{jb},{eb},{si},{ci},{v}");
                        }
                    }
                }
            }
        }
        InspectCommand::Attention {
            sample,
            checkpoint: ckpt,
        } => {
            let seq = read_iskel(&sample)?;
            let model = checkpoint::load_file::<f32>(&ckpt)?.model;
            let layout = model.config.layout();
            let maps = model.attention_maps(&seq)?;
            let _ = writeln!(
                out,
                "# u_layout t_blocks={} j_blocks={} e_blocks={}",
                layout.t_blocks, layout.j_blocks, layout.e_blocks
            );
            out.push_str("block,head,u,v,score\n");
            for (b, h, m) in maps {
                let n = m.shape()[0];
                for ui in 0..n {
                    for vi in 0..n {
                        let _ = writeln!(out, "{b},{h},{ui},{vi},{}", m.at(&[ui, vi]));
                    }
                }
            }
        }
    }
    print!("{out}");
    Ok(())
}

fn cmd_synth(a: SynthArgs, seed: u64) -> Result<()> {
    let base = SynthConfig {
        channels: a.channels,
        frames: a.frames,
        joints: a.joints,
        noise: a.noise,
        shuffle_entities: false,
    };
    if !(a.channels == 2 || a.channels == 3) || a.frames == 0 || a.joints == 0 {
        return Err(CliError::Usage(
            "synth needs 2 or 3 channels and at least one frame and joint".into(),
        ));
    }
    let train = generate(&base, a.train_per_class, seed);
    let test_cfg = SynthConfig {
        shuffle_entities: a.shuffle_test_entities,
        ..base
    };
    let test = generate(&test_cfg, a.test_per_class, seed.wrapping_add(1));
    let manifest = match a.folds {
        Some(0) => return Err(CliError::Usage("--folds must be at least 1".into())),
        Some(k) => {
            let all: Vec<SkeletonSequence> = train.into_iter().chain(test).collect();
            let mut groups: Vec<Vec<SkeletonSequence>> = vec![Vec::new(); k];
            for (i, clip) in all.into_iter().enumerate() {
                groups[i % k].push(clip);
            }
            let splits: Vec<(SplitTag, &[SkeletonSequence])> = groups
                .iter()
                .enumerate()
                .map(|(i, g)| (SplitTag::Fold(i), g.as_slice()))
                .collect();
            write_corpus(&a.out, &splits)?
        }
        None => write_corpus(
            &a.out,
            &[(SplitTag::Train, &train), (SplitTag::Test, &test)],
        )?,
    };
    println!("{}", manifest.display());
    Ok(())
}
