//! The `tinyvlm` command line.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors (including
//! missing input files and refusing to overwrite), 3 for data or compatibility
//! errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    load_checkpoint, load_training_checkpoint, read_manifest, write_checkpoint, CheckpointMeta,
    CheckpointSink, Modality, TrainingState,
};
use crate::corpus::{count_words, load_captions, load_text_corpus, split_train_val, BatchStream, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate_file, Correlation, EvalContext, EvalOptions, EvalReport, TaskType, TextConditioning};
use crate::features::open_store;
use crate::merge::merge_sweep;
use crate::model::{init_model, shape_manifest, ModelConfig};
use crate::tokenizer::{train_bpe, word_subword_ratio, SpecialNames, Tokenizer};
use crate::trainer::{milestones, TrainConfig, Trainer};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "tinyvlm", version, about = "Train, merge and evaluate small text and vision-language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a BPE tokenizer and print the corpus subword-per-word ratio.
    TrainTokenizer {
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        /// Caption manifests whose captions join the tokenizer corpus.
        #[arg(long, num_args = 1..)]
        captions: Vec<PathBuf>,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train a model, writing a checkpoint at each words-seen milestone.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Text-only corpus files (plain lines or JSONL with a `text` field).
        #[arg(long, num_args = 1..)]
        text: Vec<PathBuf>,
        /// Caption manifests (JSONL with `caption` and `image_key`).
        #[arg(long, num_args = 1..)]
        captions: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a training checkpoint written by an earlier run.
        #[arg(long)]
        resume_from: Option<PathBuf>,
        /// Overrides both the model and the training seed.
        #[arg(long, env = "TINYVLM_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Interpolate a language-only and a multimodal checkpoint.
    Merge {
        #[arg(long)]
        llm: PathBuf,
        #[arg(long)]
        vlm: PathBuf,
        /// Weights of the language-only model, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        alpha: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Evaluate one or more checkpoints on a task file.
    Eval {
        #[arg(long, required_unless_present = "ckpt_glob", conflicts_with = "ckpt_glob")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        ckpt_glob: Option<String>,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, value_enum)]
        task_type: TaskArg,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Score text tasks without the IMG token instead of the placeholder image.
        #[arg(long)]
        no_image: bool,
        /// Use Pearson instead of Spearman correlation.
        #[arg(long)]
        pearson: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Plot curve CSVs as an SVG with a log-scaled words-seen axis.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        curve: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        title: Option<String>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Print the tensor shape manifest of a config or checkpoint as JSON.
    Describe {
        #[arg(long, conflicts_with = "ckpt")]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    MinimalPairs,
    MultipleChoice,
    Correlation,
    Winoground,
}

impl From<TaskArg> for TaskType {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::MinimalPairs => TaskType::MinimalPairs,
            TaskArg::MultipleChoice => TaskType::MultipleChoice,
            TaskArg::Correlation => TaskType::Correlation,
            TaskArg::Winoground => TaskType::Winoground,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// When set, only this fraction of the samples is trained on.
    pub train_fraction: Option<f64>,
}

/// Contents of a `train` config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        e if e.is_usage() => EXIT_USAGE,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn refuse_existing(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::AlreadyExists(path.to_path_buf()));
    }
    Ok(())
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainTokenizer {
            corpus,
            captions,
            vocab_size,
            out,
            overwrite,
        } => cmd_train_tokenizer(&corpus, &captions, vocab_size, &out, overwrite),
        Command::Train {
            config,
            tokenizer,
            features,
            text,
            captions,
            out,
            resume_from,
            seed,
            overwrite,
        } => cmd_train(&TrainArgs {
            config,
            tokenizer,
            features,
            text,
            captions,
            out,
            resume_from,
            seed,
            overwrite,
        }),
        Command::Merge {
            llm,
            vlm,
            alpha,
            out,
            overwrite,
        } => {
            let written = merge_sweep(&alpha, &llm, &vlm, &out, overwrite)?;
            for p in written {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Eval {
            ckpt,
            ckpt_glob,
            task,
            task_type,
            tokenizer,
            features,
            no_image,
            pearson,
            out,
            overwrite,
        } => {
            let ckpts = match (ckpt, ckpt_glob) {
                (Some(c), _) => vec![c],
                (None, Some(g)) => expand_glob(&g)?,
                (None, None) => unreachable!("clap requires one of --ckpt/--ckpt-glob"),
            };
            let options = EvalOptions {
                text_conditioning: if no_image {
                    TextConditioning::NoImage
                } else {
                    TextConditioning::Placeholder
                },
                correlation: if pearson { Correlation::Pearson } else { Correlation::Spearman },
            };
            cmd_eval(&ckpts, &task, task_type.into(), &tokenizer, features.as_deref(), options, &out, overwrite)
        }
        Command::Report {
            curve,
            out,
            title,
            overwrite,
        } => {
            refuse_existing(&out, overwrite)?;
            let series = read_curves(&curve)?;
            let svg = render_svg(&series, title.as_deref().unwrap_or("metric vs words seen"));
            fs::write(&out, svg).map_err(|e| Error::io(&out, e))
        }
        Command::Describe { config, ckpt } => {
            let cfg = match (config, ckpt) {
                (Some(c), _) => RunConfig::load(&c)?.model,
                (None, Some(d)) => read_manifest(&d)?.config,
                (None, None) => ModelConfig::standard(),
            };
            let json = serde_json::json!({
                "n_params": cfg.n_params(),
                "tensors": shape_manifest(&cfg),
            });
            println!("{}", serde_json::to_string_pretty(&json).expect("json"));
            Ok(())
        }
    }
}

fn cmd_train_tokenizer(
    corpus: &[PathBuf],
    captions: &[PathBuf],
    vocab_size: usize,
    out: &Path,
    overwrite: bool,
) -> Result<()> {
    refuse_existing(out, overwrite)?;
    let mut texts: Vec<String> = load_text_corpus(corpus)?.into_iter().map(|s| s.text).collect();
    texts.extend(load_captions(captions)?.into_iter().map(|c| c.caption));
    let tok = train_bpe(texts.iter().map(String::as_str), vocab_size, &SpecialNames::default())?;
    tok.save(out)?;
    let words: u64 = texts.iter().map(|t| count_words(t) as u64).sum();
    let subwords: u64 = texts.iter().map(|t| tok.encode(t).len() as u64).sum();
    let ratio = word_subword_ratio(words, subwords)?;
    println!("vocab_size {} merges {}", tok.vocab_size(), tok.merges().len());
    println!("words {words} subwords {subwords} word-to-subword ratio {ratio:.4}");
    Ok(())
}

struct TrainArgs {
    config: PathBuf,
    tokenizer: PathBuf,
    features: PathBuf,
    text: Vec<PathBuf>,
    captions: Vec<PathBuf>,
    out: PathBuf,
    resume_from: Option<PathBuf>,
    seed: Option<u64>,
    overwrite: bool,
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    if a.text.is_empty() && a.captions.is_empty() {
        return Err(Error::InvalidArgument("no training data (pass --text and/or --captions)".into()));
    }
    let tok = Tokenizer::load(&a.tokenizer)?;
    let store = open_store(&a.features)?;
    let mut samples: Vec<Sample> = load_text_corpus(&a.text)?.into_iter().map(Sample::from).collect();
    samples.extend(load_captions(&a.captions)?.into_iter().map(Sample::from));
    if let Some(frac) = cfg.data.train_fraction {
        let (train, val) = split_train_val(&samples, frac, cfg.train.seed)?;
        log::info!("{} training samples, {} held out", train.len(), val.len());
        samples = train;
    }
    if samples.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    for s in &samples {
        store.get(s.image_key())?;
    }
    let modality = if a.captions.is_empty() {
        Modality::TextOnly
    } else {
        Modality::Multimodal
    };
    let meta = CheckpointMeta {
        words_seen: 0,
        modality,
        seed: cfg.model.seed,
        tokenizer_hash: tok.hash(),
        merge_info: None,
    };

    let mut stream = BatchStream::new(
        &samples,
        &tok,
        cfg.train.micro_batch,
        cfg.model.max_len,
        cfg.train.seed,
        cfg.train.epochs,
    )?;
    let resumed = match &a.resume_from {
        None => None,
        Some(dir) => {
            let (params, ck_meta, state) = load_training_checkpoint(dir)?;
            let state = state.ok_or_else(|| {
                Error::InvalidArgument(format!("{} holds no training state", dir.display()))
            })?;
            if params.config != cfg.model {
                return Err(Error::Config("model config differs from the resumed checkpoint".into()));
            }
            let strip = |t: &TrainConfig| TrainConfig { max_steps: None, ..t.clone() };
            if strip(&state.train_config) != strip(&cfg.train) {
                return Err(Error::Config("train config differs from the resumed checkpoint".into()));
            }
            if ck_meta.tokenizer_hash != meta.tokenizer_hash {
                return Err(Error::Incompatible("tokenizer differs from the resumed checkpoint".into()));
            }
            Some((params, state))
        }
    };
    let mut sink = CheckpointSink::new(
        &a.out,
        meta.clone(),
        cfg.train.clone(),
        a.overwrite,
        resumed.is_some(),
    )?;
    let trainer = match resumed {
        None => Trainer::new(init_model::<f32>(&cfg.model)?, cfg.train.clone(), &tok, &store)?,
        Some((params, state)) => {
            for _ in 0..state.progress.micro_batches {
                stream.next();
            }
            Trainer::resume(params, state.optimizer, state.progress, cfg.train.clone(), &tok, &store)?
        }
    };
    let outcome = trainer.run(stream, &mut sink)?;
    sink.flush()?;
    let words = outcome.progress.schedule.words_seen;
    let final_dir = a.out.join("final");
    let state = TrainingState {
        progress: outcome.progress.clone(),
        train_config: cfg.train.clone(),
        optimizer: outcome.optimizer,
    };
    let final_meta = CheckpointMeta { words_seen: words, ..meta };
    write_checkpoint(
        &outcome.params,
        &final_meta,
        Some(&state),
        &final_dir,
        a.overwrite || a.resume_from.is_some(),
    )?;
    if let Some(last) = outcome.log.last() {
        println!("steps {} words_seen {} loss {:.6}", last.step, words, last.loss);
    }
    for p in sink.written() {
        println!("{}", p.display());
    }
    println!("{}", final_dir.display());
    Ok(())
}

fn expand_glob(pattern: &str) -> Result<Vec<PathBuf>> {
    let paths = glob::glob(pattern)
        .map_err(|e| Error::InvalidArgument(format!("bad glob `{pattern}`: {e}")))?
        .filter_map(|p| p.ok())
        .filter(|p| p.join(crate::checkpoint::MANIFEST_FILE).is_file())
        .collect::<Vec<_>>();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no checkpoints match `{pattern}`")));
    }
    Ok(paths)
}

/// Model-variant label used to group curve points.
pub fn series_label(meta: &CheckpointMeta) -> String {
    match &meta.merge_info {
        Some(m) => format!("merged_a{}", m.alpha),
        None => meta.modality.as_str().to_string(),
    }
}

fn ckpt_labels(ckpts: &[PathBuf]) -> Vec<String> {
    let base = |p: &Path| p.file_name().map_or_else(|| "ckpt".into(), |n| n.to_string_lossy().into_owned());
    let names: Vec<String> = ckpts.iter().map(|p| base(p)).collect();
    let unique = names.iter().collect::<std::collections::BTreeSet<_>>().len() == names.len();
    if unique {
        return names;
    }
    ckpts
        .iter()
        .map(|p| {
            p.components()
                .filter_map(|c| match c {
                    std::path::Component::Normal(s) => Some(s.to_string_lossy().into_owned()),
                    _ => None,
                })
                .collect::<Vec<_>>()
                .join("_")
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpts: &[PathBuf],
    task: &Path,
    task_type: TaskType,
    tokenizer: &Path,
    features: Option<&Path>,
    options: EvalOptions,
    out: &Path,
    overwrite: bool,
) -> Result<()> {
    let tok = Tokenizer::load(tokenizer)?;
    let store = features.map(open_store).transpose()?;
    if !task.is_file() {
        return Err(Error::io(task, std::io::ErrorKind::NotFound.into()));
    }
    let curve_path = out.join("curve.csv");
    refuse_existing(&curve_path, overwrite)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ctx = EvalContext {
        tokenizer: &tok,
        features: store.as_ref(),
        options,
    };
    let labels = ckpt_labels(ckpts);
    let mut rows: Vec<(u64, String, String, EvalReport)> = Vec::new();
    for (dir, label) in ckpts.iter().zip(labels) {
        let (params, meta) = load_checkpoint(dir)?;
        if meta.tokenizer_hash != tok.hash() {
            return Err(Error::Incompatible(format!(
                "{} was trained with a different tokenizer",
                dir.display()
            )));
        }
        let report = evaluate_file(&params, &ctx, task_type, task)?;
        let stem = format!("{label}.{task_type}");
        let (json, csv) = (out.join(format!("{stem}.json")), out.join(format!("{stem}.csv")));
        refuse_existing(&json, overwrite)?;
        report.save(&json, &csv)?;
        println!("{label}: {} {} = {:.6} ({} items)", report.task, report.metric, report.value, report.n_items);
        rows.push((meta.words_seen, label, series_label(&meta), report));
    }
    rows.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    let mut csv = String::from("series,checkpoint,words_seen,metric,value,n_items\n");
    for (words, label, series, r) in &rows {
        writeln!(csv, "{series},{label},{words},{},{},{}", r.metric, r.value, r.n_items).unwrap();
    }
    fs::write(&curve_path, csv).map_err(|e| Error::io(&curve_path, e))?;
    Ok(())
}

/// One plotted line: `(words_seen, value)` points sorted by words.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(u64, f64)>,
}

/// Reads curve CSVs (columns `series`, `words_seen`, `value`); one series per
/// distinct file and series label.
pub fn read_curves(paths: &[PathBuf]) -> Result<Vec<Series>> {
    let mut out: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    for path in paths {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let Some((_, header)) = lines.next() else {
            return Err(Error::InvalidArgument(format!("{}: empty curve file", path.display())));
        };
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let col = |name: &str| {
            cols.iter().position(|c| *c == name).ok_or_else(|| {
                Error::InvalidArgument(format!("{}: missing column `{name}`", path.display()))
            })
        };
        let (ci_series, ci_words, ci_value) = (col("series")?, col("words_seen")?, col("value")?);
        let prefix = if paths.len() > 1 {
            format!("{}:", path.file_stem().unwrap_or_default().to_string_lossy())
        } else {
            String::new()
        };
        let mut n = 0;
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let parse_err = |m: String| Error::Parse {
                path: path.clone(),
                line: i + 1,
                message: m,
            };
            let get = |c: usize| f.get(c).copied().ok_or_else(|| parse_err(format!("missing field {c}")));
            let words: u64 = get(ci_words)?.parse().map_err(|e| parse_err(format!("words_seen: {e}")))?;
            let value: f64 = get(ci_value)?.parse().map_err(|e| parse_err(format!("value: {e}")))?;
            n += 1;
            if words == 0 {
                log::warn!("{}:{}: skipping point at 0 words on a log axis", path.display(), i + 1);
                continue;
            }
            out.entry(format!("{prefix}{}", get(ci_series)?)).or_default().push((words, value));
        }
        if n == 0 {
            return Err(Error::InvalidArgument(format!("{}: no data rows", path.display())));
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("no plottable points".into()));
    }
    Ok(out
        .into_iter()
        .map(|(label, mut points)| {
            points.sort_by_key(|p| p.0);
            Series { label, points }
        })
        .collect())
}

/// Milestones within `[lo, hi]`; these are the x-axis ticks.
pub fn axis_ticks(lo: u64, hi: u64) -> Vec<u64> {
    milestones().into_iter().filter(|&m| lo <= m && m <= hi).collect()
}

fn words_label(w: u64) -> String {
    match w {
        w if w >= 1_000_000_000 && w % 1_000_000_000 == 0 => format!("{}B", w / 1_000_000_000),
        w if w >= 1_000_000 && w % 1_000_000 == 0 => format!("{}M", w / 1_000_000),
        w if w >= 1_000 && w % 1_000 == 0 => format!("{}K", w / 1_000),
        w => w.to_string(),
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot with one polyline per series and a log10 x axis.
pub fn render_svg(series: &[Series], title: &str) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let all = series.iter().flat_map(|s| &s.points);
    let xmin = all.clone().map(|p| p.0).min().unwrap_or(1);
    let xmax = all.clone().map(|p| p.0).max().unwrap_or(10);
    let ymin = all.clone().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let ymax = all.map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let (mut lx0, mut lx1) = ((xmin as f64).log10(), (xmax as f64).log10());
    if lx1 - lx0 < 1e-9 {
        lx0 -= 0.5;
        lx1 += 0.5;
    }
    let (y0, y1) = if ymax - ymin < 1e-12 {
        (ymin - 0.5, ymax + 0.5)
    } else {
        let pad = 0.05 * (ymax - ymin);
        (ymin - pad, ymax + pad)
    };
    let sx = |x: u64| left + ((x as f64).log10() - lx0) / (lx1 - lx0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    let lo = 10f64.powf(lx0).floor() as u64;
    let hi = 10f64.powf(lx1).ceil() as u64;
    for t in axis_ticks(lo, hi) {
        let x = sx(t);
        writeln!(
            s,
            r#"<line class="xtick" x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/>"#,
            top + ph,
            top + ph + 5.0
        )
        .unwrap();
        if t.to_string().trim_end_matches('0') == "1" {
            writeln!(
                s,
                r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
                top + ph + 18.0,
                words_label(t)
            )
            .unwrap();
        }
    }
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = sy(v);
        writeln!(
            s,
            r#"<line x1="{}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
            left - 5.0,
            left - 8.0,
            y + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">words seen (log scale)</text>"#,
        left + pw / 2.0,
        h - 15.0
    )
    .unwrap();
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        )
        .unwrap();
        let ly = top + 14.0 + 18.0 * i as f64;
        writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            left + pw + 10.0,
            left + pw + 30.0,
            left + pw + 35.0,
            ly + 4.0,
            escape(&ser.label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
