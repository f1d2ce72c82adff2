//! Command-line front end: `gen`, `train`, `separate`, `evaluate`, `diagnose`.
//!
//! Every setting can come from a flag or from a flat `key=value` config file
//! (`--config`); keys are the long flag names. Flags win over the file and
//! unknown keys are rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use crate::adanet::detect_active_sources;
use crate::attractor::{threshold_vector, Nonlinearity, KEEP_FRACTION};
use crate::data::{load_entry, read_index, write_dataset, DatasetManifest, DEFAULT_DURATION};
use crate::dsp::{self, Waveform};
use crate::inference::{infer_attractors, pca, separate, Strategy};
use crate::io::{load_checkpoint, save_checkpoint, wav_read, wav_write};
use crate::masks;
use crate::metrics::{mean, median, score_with_permutation};
use crate::model::{features, Example, Model, ModelConfig, ModelKind};
use crate::nn::{embed, EmbedNetConfig};
use crate::train::{fit_fixed_attractors, EpochLog, TrainConfig, Trainer};

/// Error split by exit code: usage problems exit 1, runtime failures 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        Self::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "danet", version, about = "Deep attractor network speech separation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic mixture split.
    Gen(GenArgs),
    /// Train a DANet or ADANet model.
    Train(TrainArgs),
    /// Separate one mixture into per-source WAVs.
    Separate(SeparateArgs),
    /// Score separations of an indexed split.
    Evaluate(EvaluateArgs),
    /// Dump PCA coordinates of embeddings, attractors and anchors.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args, Default)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Split name; also salts per-mixture seeds.
    #[arg(long)]
    pub split: Option<String>,
    /// Defaults to 500 for `train`, 100 otherwise.
    #[arg(long)]
    pub mixtures: Option<usize>,
    #[arg(long)]
    pub speakers: Option<usize>,
    /// Seconds per mixture.
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training split directory or index file.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// `danet` or `adanet`.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub anchors: Option<usize>,
    /// Output slots for ADANet training.
    #[arg(long)]
    pub slots: Option<usize>,
    #[arg(long)]
    pub nonlinearity: Option<String>,
    /// Fraction of bins kept for attractor estimation.
    #[arg(long)]
    pub keep: Option<f64>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Comma-separated hidden layer widths.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub long_lr: Option<f64>,
    #[arg(long)]
    pub short_chunk: Option<usize>,
    #[arg(long)]
    pub long_chunk: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub max_short_epochs: Option<usize>,
    #[arg(long)]
    pub max_long_epochs: Option<usize>,
    #[arg(long)]
    pub switch_patience: Option<usize>,
    #[arg(long)]
    pub stop_patience: Option<usize>,
    #[arg(long)]
    pub curriculum: Option<bool>,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long)]
    pub resume: Option<bool>,
}

#[derive(Debug, Args, Default)]
pub struct SeparateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "checkpoint")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Source count, or `auto` (anchored strategy only).
    #[arg(long)]
    pub speakers: Option<String>,
    /// `kmeans`, `fixed` or `anchored`.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Overrides the checkpoint's threshold keep fraction.
    #[arg(long)]
    pub keep: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for `scores.csv` and `summary.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Split directory or index file with references.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Separate with this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<String>,
    /// Score ideal masks instead of a model: `wfm`, `irm` or `ibm`.
    #[arg(long)]
    pub oracle: Option<String>,
    /// Score existing `<stem>_src<i>.wav` files from this directory.
    #[arg(long)]
    pub estimates: Option<PathBuf>,
    /// Overrides the checkpoint's threshold keep fraction.
    #[arg(long)]
    pub keep: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Comma-separated reference WAVs, one per source.
    #[arg(long)]
    pub refs: Option<String>,
    #[arg(long)]
    pub strategy: Option<String>,
    /// Overrides the checkpoint's threshold keep fraction.
    #[arg(long)]
    pub keep: Option<f64>,
}

/// Flags layered over an optional config file.
struct Layered {
    file: BTreeMap<String, String>,
    known: BTreeSet<&'static str>,
}

impl Layered {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let mut file = BTreeMap::new();
        if let Some(p) = path {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            for (n, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| usage(format!("{}:{}: expected key=value", p.display(), n + 1)))?;
                file.insert(k.trim().replace('_', "-"), v.trim().to_string());
            }
        }
        Ok(Self {
            file,
            known: BTreeSet::new(),
        })
    }

    fn get<T: FromStr>(&mut self, key: &'static str, flag: Option<T>) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.known.insert(key);
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("config key {key}: {e}"))),
        }
    }

    fn finish(self) -> CliResult<()> {
        let unknown: Vec<&String> = self.file.keys().filter(|k| !self.known.contains(k.as_str())).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(usage(format!("unknown config keys: {unknown:?}")))
        }
    }
}

fn required<T>(v: Option<T>, key: &str) -> CliResult<T> {
    v.ok_or_else(|| usage(format!("--{key} is required")))
}

fn parse_enum<T: FromStr<Err = crate::Error>>(s: &str) -> CliResult<T> {
    s.parse().map_err(|e: crate::Error| usage(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub split: String,
    pub mixtures: usize,
    pub speakers: usize,
    pub duration: f64,
}

impl GenArgs {
    pub fn resolve(self) -> CliResult<GenConfig> {
        let mut l = Layered::load(self.config.as_deref())?;
        let split = l.get("split", self.split)?.unwrap_or_else(|| "train".to_string());
        let default_count = if split == "train" { 500 } else { 100 };
        let cfg = GenConfig {
            out: required(l.get("out", self.out)?, "out")?,
            seed: l.get("seed", self.seed)?.unwrap_or(0),
            mixtures: l.get("mixtures", self.mixtures)?.unwrap_or(default_count),
            speakers: l.get("speakers", self.speakers)?.unwrap_or(2),
            duration: l.get("duration", self.duration)?.unwrap_or(DEFAULT_DURATION),
            split,
        };
        l.finish()?;
        if !(1..=3).contains(&cfg.speakers) {
            return Err(usage(format!("--speakers {} unsupported (supported: 1-3)", cfg.speakers)));
        }
        if !(cfg.duration > 0.0) {
            return Err(usage("--duration must be positive"));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub out: PathBuf,
    pub train: PathBuf,
    pub valid: PathBuf,
    pub model: ModelConfig,
    pub train_cfg: TrainConfig,
    pub resume: bool,
}

impl TrainArgs {
    pub fn resolve(self) -> CliResult<TrainRun> {
        let mut l = Layered::load(self.config.as_deref())?;
        let dm = ModelConfig::default();
        let dn = EmbedNetConfig::default();
        let dt = TrainConfig::default();
        let kind = match l.get("model", self.model)? {
            Some(s) => parse_enum::<ModelKind>(&s)?,
            None => ModelKind::Danet,
        };
        let nonlinearity = match l.get("nonlinearity", self.nonlinearity)? {
            Some(s) => parse_enum::<Nonlinearity>(&s)?,
            None => dm.nonlinearity,
        };
        let hidden_sizes = match l.get("hidden", self.hidden)? {
            Some(s) => s
                .split(',')
                .map(|h| h.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| usage(format!("--hidden: {e}")))?,
            None => dn.hidden_sizes.clone(),
        };
        let model = ModelConfig {
            kind,
            net: EmbedNetConfig {
                context: l.get("context", self.context)?.unwrap_or(dn.context),
                hidden_sizes,
                embedding_dim: l.get("embedding-dim", self.embedding_dim)?.unwrap_or(dn.embedding_dim),
                n_bins: dn.n_bins,
            },
            stft: dm.stft,
            nonlinearity,
            keep_fraction: l.get("keep", self.keep)?.unwrap_or(KEEP_FRACTION),
            anchors: l.get("anchors", self.anchors)?.unwrap_or(dm.anchors),
            slots: l.get("slots", self.slots)?.unwrap_or(dm.slots),
        };
        let train_cfg = TrainConfig {
            seed: l.get("seed", self.seed)?.unwrap_or(dt.seed),
            lr: l.get("lr", self.lr)?.unwrap_or(dt.lr),
            long_lr: l.get("long-lr", self.long_lr)?.unwrap_or(dt.long_lr),
            short_chunk: l.get("short-chunk", self.short_chunk)?.unwrap_or(dt.short_chunk),
            long_chunk: l.get("long-chunk", self.long_chunk)?.unwrap_or(dt.long_chunk),
            batch_size: l.get("batch", self.batch)?.unwrap_or(dt.batch_size),
            max_short_epochs: l.get("max-short-epochs", self.max_short_epochs)?.unwrap_or(dt.max_short_epochs),
            max_long_epochs: l.get("max-long-epochs", self.max_long_epochs)?.unwrap_or(dt.max_long_epochs),
            switch_patience: l.get("switch-patience", self.switch_patience)?.unwrap_or(dt.switch_patience),
            stop_patience: l.get("stop-patience", self.stop_patience)?.unwrap_or(dt.stop_patience),
            curriculum: l.get("curriculum", self.curriculum)?.unwrap_or(dt.curriculum),
        };
        let run = TrainRun {
            out: required(l.get("out", self.out)?, "out")?,
            train: required(l.get("train", self.train)?, "train")?,
            valid: required(l.get("valid", self.valid)?, "valid")?,
            resume: l.get("resume", self.resume)?.unwrap_or(false),
            model,
            train_cfg,
        };
        l.finish()?;
        run.model.validate().map_err(|e| usage(e.to_string()))?;
        run.train_cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(run)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Speakers {
    Count(usize),
    Auto,
}

impl FromStr for Speakers {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Self::Count(n)),
            _ => Err(format!("expected a positive count or `auto`, got {s:?}")),
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a.resolve()?),
        Command::Train(a) => cmd_train(&a.resolve()?),
        Command::Separate(a) => cmd_separate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    }
}

pub fn cmd_gen(cfg: &GenConfig) -> CliResult<()> {
    let manifest = DatasetManifest::generate(&cfg.split, cfg.mixtures, cfg.speakers, cfg.seed, cfg.duration)?;
    let entries = write_dataset(&manifest, &cfg.out)?;
    println!(
        "wrote {} {}-source mixtures ({} s, split {:?}, seed {}) to {}",
        entries.len(),
        cfg.speakers,
        cfg.duration,
        cfg.split,
        cfg.seed,
        cfg.out.display()
    );
    Ok(())
}

/// Loads every mixture of an indexed split as training examples.
pub fn load_examples(path: &Path, model: &ModelConfig) -> anyhow::Result<Vec<Example>> {
    let (base, entries) = read_index(path).with_context(|| format!("reading index at {}", path.display()))?;
    entries
        .iter()
        .map(|e| {
            let (mix, refs) = load_entry(&base, e)?;
            Ok(Example::from_waveforms(&mix, &refs, &model.stft)?)
        })
        .collect()
}

fn read_loss_log(path: &Path, epochs: usize) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().skip(1).take(epochs).map(str::to_string).collect())
}

pub fn cmd_train(run: &TrainRun) -> CliResult<()> {
    let train = load_examples(&run.train, &run.model)?;
    let valid = load_examples(&run.valid, &run.model)?;
    if train.is_empty() || valid.is_empty() {
        return Err(CliError::Runtime(anyhow!("training and validation splits must be non-empty")));
    }
    fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    let last_path = run.out.join("last.ckpt");
    let best_path = run.out.join("best.ckpt");
    let log_path = run.out.join("loss.csv");

    let (mut trainer, mut rows) = if run.resume {
        let last = load_checkpoint(&last_path)?;
        let best = load_checkpoint(&best_path)?;
        if last.model.config() != &run.model {
            return Err(usage("resumed checkpoint was trained with a different model config"));
        }
        let rows = read_loss_log(&log_path, last.epoch)?;
        (Trainer::resume(last, best, run.train_cfg.clone())?, rows)
    } else {
        (Trainer::new(run.model.clone(), run.train_cfg.clone())?, Vec::new())
    };

    trainer.run(&train, &valid, |t, log| {
        eprintln!(
            "epoch {:>3} {:?} chunk={} lr={:.2e} train={:.4} valid={:.4}{} ({:.1}s)",
            log.epoch,
            log.phase,
            log.chunk_len,
            log.lr,
            log.train_loss,
            log.valid_loss,
            if log.improved { " *" } else { "" },
            log.seconds
        );
        rows.push(log.csv_row());
        let mut text = String::from(EpochLog::CSV_HEADER);
        text.push('\n');
        for r in &rows {
            text.push_str(r);
            text.push('\n');
        }
        fs::write(&log_path, text).map_err(|e| crate::Error::io(&log_path, e))?;
        save_checkpoint(&t.last_checkpoint(), &last_path)?;
        save_checkpoint(&t.best_checkpoint(), &best_path)
    })?;

    let mut best = trainer.best().clone();
    match fit_fixed_attractors(&best, &train) {
        Ok(fixed) => best.set_fixed_attractors(Some(fixed)),
        Err(e) => eprintln!("no fixed attractor table: {e}"),
    }
    let mut ck = trainer.best_checkpoint();
    ck.model = best;
    let model_path = run.out.join("model.ckpt");
    save_checkpoint(&ck, &model_path)?;
    println!(
        "trained {} epochs, best validation loss {:.6}, model at {}",
        trainer.state().epoch,
        trainer.state().best_val.unwrap_or(f64::NAN),
        model_path.display()
    );
    Ok(())
}

/// Runs separation with `auto` source counting applied when requested.
pub fn separate_with(
    model: &Model,
    mixture: &Waveform,
    speakers: Speakers,
    strategy: Strategy,
    seed: u64,
) -> CliResult<Vec<Waveform>> {
    match speakers {
        Speakers::Count(c) => Ok(separate(model, mixture, c, strategy, seed)?.sources),
        Speakers::Auto => {
            if strategy != Strategy::Anchored {
                return Err(usage("--speakers auto needs --strategy anchored"));
            }
            let slots = model.config().slots;
            let sep = separate(model, mixture, slots, strategy, seed)?;
            let keep = detect_active_sources(&sep.sources);
            Ok(keep.into_iter().map(|i| sep.sources[i].clone()).collect())
        }
    }
}

fn load_model(path: &Path, keep: Option<f64>) -> CliResult<Model> {
    let mut model = load_checkpoint(path)?.model;
    if let Some(q) = keep {
        model.set_keep_fraction(q).map_err(|e| usage(e.to_string()))?;
    }
    Ok(model)
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into())
}

pub fn cmd_separate(a: SeparateArgs) -> CliResult<()> {
    let mut l = Layered::load(a.config.as_deref())?;
    let out = required(l.get("out", a.out)?, "out")?;
    let seed = l.get("seed", a.seed)?.unwrap_or(0);
    let ckpt = required(l.get("checkpoint", a.checkpoint)?, "checkpoint")?;
    let input = required(l.get("input", a.input)?, "input")?;
    let speakers: Speakers = l.get("speakers", a.speakers)?.unwrap_or_else(|| "2".into()).parse().map_err(usage)?;
    let strategy: Strategy = parse_enum(&l.get("strategy", a.strategy)?.unwrap_or_else(|| "kmeans".into()))?;
    let keep = l.get("keep", a.keep)?;
    l.finish()?;

    let model = load_model(&ckpt, keep)?;
    let mixture = wav_read(&input)?;
    let sources = separate_with(&model, &mixture, speakers, strategy, seed)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let stem = file_stem(&input);
    for (i, s) in sources.iter().enumerate() {
        let p = out.join(format!("{stem}_src{i}.wav"));
        let clipped = wav_write(s, &p)?;
        if clipped > 0 {
            eprintln!("{}: {clipped} samples clipped", p.display());
        }
    }
    println!("wrote {} sources to {}", sources.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Oracle {
    Ibm,
    Irm,
    Wfm,
}

/// Reconstructs every source of `mix` through an ideal mask.
fn oracle_sources(mix: &Waveform, refs: &[Waveform], kind: Oracle, cfg: &dsp::StftConfig) -> crate::Result<Vec<Waveform>> {
    let spec = dsp::stft(mix, cfg)?;
    let mut mags = ndarray::Array2::zeros((refs.len(), spec.n_cells()));
    for (i, r) in refs.iter().enumerate() {
        mags.row_mut(i).assign(&dsp::magnitude(&dsp::stft(r, cfg)?).flatten());
    }
    let m = match kind {
        Oracle::Ibm => masks::ibm(mags.view())?,
        Oracle::Irm => masks::irm(mags.view())?,
        Oracle::Wfm => masks::wfm(mags.view())?,
    };
    (0..refs.len())
        .map(|i| dsp::reconstruct(m.row(i).as_slice().expect("contiguous"), &spec))
        .collect()
}

/// Separates with ideal masks; used for ceiling measurements.
pub fn oracle_separate(mix: &Waveform, refs: &[Waveform], kind: &str) -> crate::Result<Vec<Waveform>> {
    let k = match kind {
        "ibm" => Oracle::Ibm,
        "irm" => Oracle::Irm,
        "wfm" => Oracle::Wfm,
        other => return Err(crate::Error::InvalidArgument(format!("unknown oracle {other:?}"))),
    };
    oracle_sources(mix, refs, k, &dsp::StftConfig::default())
}

/// Trims or zero-pads `w` to `len` samples.
fn fit_len(w: &Waveform, len: usize) -> crate::Result<Waveform> {
    let mut s = w.samples().to_vec();
    s.resize(len, 0.0);
    Waveform::new(s, w.sample_rate())
}

pub fn cmd_evaluate(a: EvaluateArgs) -> CliResult<()> {
    let mut l = Layered::load(a.config.as_deref())?;
    let out = required(l.get("out", a.out)?, "out")?;
    let seed = l.get("seed", a.seed)?.unwrap_or(0);
    let data = required(l.get("data", a.data)?, "data")?;
    let ckpt = l.get("checkpoint", a.checkpoint)?;
    let strategy: Strategy = parse_enum(&l.get("strategy", a.strategy)?.unwrap_or_else(|| "kmeans".into()))?;
    let oracle = l.get("oracle", a.oracle)?;
    let estimates = l.get("estimates", a.estimates)?;
    let keep = l.get("keep", a.keep)?;
    l.finish()?;
    let modes = ckpt.is_some() as u8 + oracle.is_some() as u8 + estimates.is_some() as u8;
    if modes != 1 {
        return Err(usage("give exactly one of --checkpoint, --oracle, --estimates"));
    }
    if let Some(o) = &oracle {
        if !["ibm", "irm", "wfm"].contains(&o.as_str()) {
            return Err(usage(format!("--oracle must be wfm, irm or ibm, got {o:?}")));
        }
    }
    let model = match &ckpt {
        Some(p) => Some(load_model(p, keep)?),
        None => None,
    };

    let (base, entries) = read_index(&data).with_context(|| format!("reading index at {}", data.display()))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut rows = String::from("mixture,C,permutation,si_snr,si_snri\n");
    let mut all_si = Vec::new();
    let mut all_sii = Vec::new();
    let mut failures = Vec::new();
    for e in &entries {
        let scored = (|| -> anyhow::Result<_> {
            let (mix, refs) = load_entry(&base, e)?;
            let ests = if let Some(m) = &model {
                separate(m, &mix, refs.len(), strategy, seed)?.sources
            } else if let Some(o) = &oracle {
                oracle_separate(&mix, &refs, o)?
            } else {
                let dir = estimates.as_ref().expect("one mode chosen");
                let stem = file_stem(Path::new(&e.mixture_path));
                (0..refs.len())
                    .map(|i| wav_read(&dir.join(format!("{stem}_src{i}.wav"))))
                    .collect::<crate::Result<Vec<_>>>()?
            };
            let ests = ests
                .iter()
                .map(|w| fit_len(w, mix.len()))
                .collect::<crate::Result<Vec<_>>>()?;
            Ok(score_with_permutation(&ests, &refs, &mix)?)
        })();
        match scored {
            Ok(r) => {
                let perm: Vec<String> = r.permutation.iter().map(usize::to_string).collect();
                rows.push_str(&format!(
                    "{},{},{},{},{}\n",
                    e.mixture_path,
                    e.c,
                    perm.join(" "),
                    r.mean_si_snr(),
                    r.mean_si_snri()
                ));
                all_si.push(r.mean_si_snr());
                all_sii.push(r.mean_si_snri());
            }
            Err(err) => {
                eprintln!("skipping {}: {err:#}", e.mixture_path);
                failures.push(e.mixture_path.clone());
            }
        }
    }
    if all_si.is_empty() {
        return Err(CliError::Runtime(anyhow!("no mixtures could be evaluated")));
    }
    let scores_path = out.join("scores.csv");
    fs::write(&scores_path, rows).with_context(|| format!("writing {}", scores_path.display()))?;
    let summary = format!(
        "evaluated,failed,mean_si_snr,median_si_snr,mean_si_snri,median_si_snri\n{},{},{},{},{},{}\n",
        all_si.len(),
        failures.len(),
        mean(&all_si),
        median(&all_si),
        mean(&all_sii),
        median(&all_sii)
    );
    let summary_path = out.join("summary.csv");
    fs::write(&summary_path, &summary).with_context(|| format!("writing {}", summary_path.display()))?;
    print!("{summary}");
    if !failures.is_empty() {
        eprintln!("{} mixtures failed: {}", failures.len(), failures.join(", "));
    }
    Ok(())
}

pub fn cmd_diagnose(a: DiagnoseArgs) -> CliResult<()> {
    let mut l = Layered::load(a.config.as_deref())?;
    let out = required(l.get("out", a.out)?, "out")?;
    let seed = l.get("seed", a.seed)?.unwrap_or(0);
    let ckpt = required(l.get("checkpoint", a.checkpoint)?, "checkpoint")?;
    let input = required(l.get("input", a.input)?, "input")?;
    let refs = required(l.get("refs", a.refs)?, "refs")?;
    let strategy: Strategy = parse_enum(&l.get("strategy", a.strategy)?.unwrap_or_else(|| "kmeans".into()))?;
    let keep = l.get("keep", a.keep)?;
    l.finish()?;

    let model = load_model(&ckpt, keep)?;
    let mix = wav_read(&input)?;
    let refs = refs
        .split(',')
        .map(|p| wav_read(Path::new(p.trim())))
        .collect::<crate::Result<Vec<_>>>()?;
    let text = diagnose_csv(&model, &mix, &refs, strategy, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut f = fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    f.write_all(text.as_bytes()).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} rows to {}", text.lines().count() - 1, out.display());
    Ok(())
}

/// CSV with one row per T-F bin, then per attractor, then per anchor:
/// `kind,index,pc1,pc2,pc3,label,kept`.
pub fn diagnose_csv(model: &Model, mix: &Waveform, refs: &[Waveform], strategy: Strategy, seed: u64) -> crate::Result<String> {
    let cfg = model.config();
    let ex = Example::from_waveforms(mix, refs, &cfg.stft)?;
    let spec = dsp::stft(mix, &cfg.stft)?;
    let v = embed(model.params(), features(&spec).view(), &cfg.net)?;
    let w = threshold_vector(ex.mix_mag.view(), cfg.keep_fraction)?;
    let attractors = infer_attractors(model, &v, &w, refs.len(), strategy, seed)?;
    let labels = masks::ibm(ex.source_mags.view())?;
    let p = pca(v.bins().view(), 3.min(v.dim()))?;
    let coords = |row: ndarray::ArrayView1<'_, f64>| -> String {
        let mut c: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        c.resize(3, "0".into());
        c.join(",")
    };
    let mut text = String::from("kind,index,pc1,pc2,pc3,label,kept\n");
    let proj = p.project(v.bins().view());
    for ft in 0..v.n_cells() {
        let label = (0..labels.n_sources())
            .find(|&i| labels.values()[[i, ft]] == 1.0)
            .unwrap_or(0);
        text.push_str(&format!(
            "bin,{ft},{},{label},{}\n",
            coords(proj.row(ft)),
            w.is_kept(ft) as u8
        ));
    }
    let pa = p.project(attractors.values().view());
    for i in 0..pa.nrows() {
        text.push_str(&format!("attractor,{i},{},{i},1\n", coords(pa.row(i))));
    }
    if let Some(anchors) = model.anchors() {
        let pn = p.project(anchors.view());
        for i in 0..pn.nrows() {
            text.push_str(&format!("anchor,{i},{},-1,1\n", coords(pn.row(i))));
        }
    }
    Ok(text)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
