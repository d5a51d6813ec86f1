//! `cfdetect train | eval | predict | analyze`.
//!
//! Training reads a TOML run configuration:
//!
//! ```toml
//! seed = 7
//!
//! [paths]
//! detect_train = "data/detect_train.csv"
//! detect_dev = "data/detect_dev.csv"    # optional; else split from train
//! spans_train = "data/spans_train.csv"
//! spans_dev = "data/spans_dev.csv"
//! checkpoint_dir = "runs/ckpt"
//! report_dir = "runs/reports"
//!
//! [model]
//! num_layers = 3
//!
//! [detect]          # stage-1 training options
//! epochs = 50
//!
//! [spans]           # stage-2 training options
//! epochs = 100
//! ```
//!
//! Relative paths resolve against the config file's directory. The top-level
//! seed (or `--seed`) replaces the seed of both training sections. The whole
//! file is validated before any data is read.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analysis::{analyze_statement, render_text};
use crate::config::{ModelConfig, TrainConfig};
use crate::corpus::{load_detection_data, load_span_data, load_statements, split};
use crate::error::{Error, Result};
use crate::heads::decide;
use crate::metrics::{mean_char_error, span_prf, to_key_values};
use crate::spans::{denormalize, NormalizedSpanQuad};
use crate::training::{evaluate_detection, evaluate_spans, train_stage1, train_stage2, Checkpoint, Stage, Stage2Init};

pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt.json";
pub const STAGE2_CHECKPOINT: &str = "stage2.ckpt.json";

#[derive(Debug, Parser)]
#[command(name = "cfdetect", version, about = "Counterfactual detection and span extraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    /// Counterfactual statement detection (stage 1).
    Detect,
    /// Antecedent and consequent span extraction (stage 2).
    Spans,
}

impl Task {
    fn stage(self) -> Stage {
        match self {
            Task::Detect => Stage::Stage1,
            Task::Spans => Stage::Stage2,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one stage and write its best checkpoint plus a JSON log.
    Train(TrainArgs),
    /// Score a checkpoint on labelled data.
    Eval(EvalArgs),
    /// Write predictions for a CSV of statements.
    Predict(PredictArgs),
    /// Write per-statement head attribution reports and heatmaps.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub task: Task,
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stage-1 checkpoint whose base is fine-tuned (spans only).
    #[arg(long, conflicts_with = "cold_start")]
    pub from_checkpoint: Option<PathBuf>,
    /// Train spans from a fresh base instead of a stage-1 checkpoint.
    #[arg(long)]
    pub cold_start: bool,
    /// Output directory for the checkpoint and log. Without it the checkpoint
    /// goes to `paths.checkpoint_dir` and the log to `paths.report_dir` when set.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub task: Task,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for `eval_<task>.json` and `.txt`; stdout only if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    pub task: Task,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunPaths {
    pub detect_train: Option<PathBuf>,
    pub detect_dev: Option<PathBuf>,
    pub spans_train: Option<PathBuf>,
    pub spans_dev: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

fn default_split_ratio() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Train fraction used when a dev file is not given.
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    #[serde(default)]
    pub paths: RunPaths,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "TrainConfig::stage1")]
    pub detect: TrainConfig,
    #[serde(default = "TrainConfig::stage2")]
    pub spans: TrainConfig,
}

impl RunConfig {
    /// Parses, resolves relative paths, applies the seed, and validates.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut cfg.paths;
        for slot in [
            &mut p.detect_train,
            &mut p.detect_dev,
            &mut p.spans_train,
            &mut p.spans_dev,
            &mut p.checkpoint_dir,
            &mut p.report_dir,
        ] {
            if let Some(rel) = slot.as_mut() {
                if rel.is_relative() {
                    *rel = base.join(&*rel);
                }
            }
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.detect.seed = cfg.seed;
        cfg.spans.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ModelConfig { vocab_size: self.model.vocab_size.max(3), ..self.model.clone() }.validate()?;
        self.detect.validate()?;
        self.spans.validate()?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio must be in (0, 1), got {}", self.split_ratio)));
        }
        let p = &self.paths;
        for path in [&p.detect_train, &p.detect_dev, &p.spans_train, &p.spans_dev].into_iter().flatten() {
            if !path.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    fn required<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        value.as_deref().ok_or_else(|| Error::Config(format!("paths.{key} is required for this command")))
    }
}

/// Loads a dev file, or splits one off the training data.
fn train_dev<T: Clone>(
    train: &Path,
    dev: Option<&Path>,
    load: fn(&Path) -> Result<Vec<T>>,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    let data = load(train)?;
    match dev {
        Some(d) => Ok((data, load(d)?)),
        None => split(&data, ratio, seed),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Output files written by a training run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainFiles {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainFiles> {
    let cfg = RunConfig::load(&args.config, args.seed)?;
    if args.task == Task::Detect && (args.from_checkpoint.is_some() || args.cold_start) {
        return Err(Error::Config("--from-checkpoint and --cold-start apply to `train spans` only".into()));
    }
    if args.task == Task::Spans && args.from_checkpoint.is_none() && !args.cold_start {
        return Err(Error::Config(
            "span training fine-tunes the base of a stage-1 detection checkpoint; pass --from-checkpoint <stage1.ckpt.json> \
             (or --cold-start to train the base from scratch)"
                .into(),
        ));
    }
    let out = match (&args.out, &cfg.paths.checkpoint_dir) {
        (Some(o), _) | (None, Some(o)) => o.clone(),
        (None, None) => return Err(Error::Config("give --out or paths.checkpoint_dir".into())),
    };
    let outcome = match args.task {
        Task::Detect => {
            let train_path = cfg.required(&cfg.paths.detect_train, "detect_train")?;
            let (train, dev) = train_dev(
                train_path,
                cfg.paths.detect_dev.as_deref(),
                |p| load_detection_data(p),
                cfg.split_ratio,
                cfg.seed,
            )?;
            train_stage1(&train, &dev, &cfg.model, &cfg.detect)?
        }
        Task::Spans => {
            let train_path = cfg.required(&cfg.paths.spans_train, "spans_train")?;
            let init = args.from_checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let (train, dev) = train_dev(
                train_path,
                cfg.paths.spans_dev.as_deref(),
                |p| load_span_data(p),
                cfg.split_ratio,
                cfg.seed,
            )?;
            let init = match &init {
                Some(c) => Stage2Init::FromCheckpoint(c),
                None => Stage2Init::ColdStart,
            };
            train_stage2(init, &train, &dev, &cfg.model, &cfg.spans)?
        }
    };
    create_dir(&out)?;
    let (ckpt_name, log_name) = match args.task {
        Task::Detect => (STAGE1_CHECKPOINT, "stage1_log.json"),
        Task::Spans => (STAGE2_CHECKPOINT, "stage2_log.json"),
    };
    let log_dir = match &cfg.paths.report_dir {
        Some(dir) if args.out.is_none() => {
            create_dir(dir)?;
            dir.clone()
        }
        _ => out.clone(),
    };
    let files = TrainFiles { checkpoint: out.join(ckpt_name), log: log_dir.join(log_name) };
    outcome.checkpoint.save(&files.checkpoint)?;
    write(&files.log, json(&outcome.log())?)?;
    Ok(files)
}

fn load_for(task: Task, path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.stage != task.stage() {
        return Err(Error::InvalidInput(format!(
            "{:?} needs a {:?} checkpoint, {} is {:?}",
            task,
            task.stage(),
            path.display(),
            ckpt.stage
        )));
    }
    Ok(ckpt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanEvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub exact_match: f64,
    pub mean_char_error: f64,
    pub smooth_l1: f64,
    pub count: usize,
}

/// Returns the JSON report and its `key = value` rendering.
pub fn cmd_eval(args: &EvalArgs) -> Result<(String, String)> {
    let ckpt = load_for(args.task, &args.checkpoint)?;
    let model = ckpt.to_model()?;
    let (report, text) = match args.task {
        Task::Detect => {
            let data = load_detection_data(&args.data)?;
            let (_, m) = evaluate_detection(&model, &data, ckpt.train_config.threshold)?;
            (json(&m)?, to_key_values(&m)?)
        }
        Task::Spans => {
            let data = load_span_data(&args.data)?;
            let (loss, pairs) = evaluate_spans(&model, &data)?;
            let m = span_prf(&pairs)?;
            let r = SpanEvalReport {
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                exact_match: m.exact_match,
                mean_char_error: mean_char_error(&pairs)?,
                smooth_l1: loss,
                count: m.count,
            };
            (json(&r)?, to_key_values(&r)?)
        }
    };
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        let stem = match args.task {
            Task::Detect => "eval_detect",
            Task::Spans => "eval_spans",
        };
        write(&dir.join(format!("{stem}.json")), &report)?;
        write(&dir.join(format!("{stem}.txt")), &text)?;
    }
    Ok((report, text))
}

/// Writes the prediction CSV and returns the number of rows.
pub fn cmd_predict(args: &PredictArgs) -> Result<usize> {
    let ckpt = load_for(args.task, &args.checkpoint)?;
    let model = ckpt.to_model()?;
    let statements = load_statements(&args.input)?;
    let inputs = statements.iter().map(|s| Ok(model.prepare(&s.text)?.1)).collect::<Result<Vec<_>>>()?;
    let outputs = if inputs.is_empty() { Vec::new() } else { model.predict(&inputs)? };
    let mut w =
        csv::Writer::from_path(&args.out).map_err(|e| Error::InvalidInput(format!("{}: {e}", args.out.display())))?;
    match args.task {
        Task::Detect => {
            w.write_record(["sentenceID", "label", "probability"])?;
            for (s, out) in statements.iter().zip(&outputs) {
                let label = decide(out[0], ckpt.train_config.threshold).as_u8();
                w.write_record([s.id.clone(), label.to_string(), out[0].to_string()])?;
            }
        }
        Task::Spans => {
            w.write_record([
                "sentenceID",
                "antecedent_startid",
                "antecedent_endid",
                "consequent_startid",
                "consequent_endid",
            ])?;
            for (s, out) in statements.iter().zip(&outputs) {
                let q = denormalize(&NormalizedSpanQuad::from_slice(out), s.length)?;
                let mut row = vec![s.id.clone()];
                row.extend(q.to_file_ids().iter().map(i64::to_string));
                w.write_record(row)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&args.out, e))?;
    Ok(statements.len())
}

#[derive(Clone, Debug, Serialize)]
struct ReportFile<'a> {
    id: &'a str,
    text: &'a str,
    rendered: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    probability: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    prediction: Option<[i64; 4]>,
    tokens: &'a [crate::analysis::AnnotatedToken],
}

fn file_stem(index: usize, id: &str) -> String {
    let safe: String =
        id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{:04}_{safe}", index + 1)
}

/// Writes `<n>_<id>.report.json` and `<n>_<id>.heatmap.json` per statement
/// and returns the number of statements.
pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<usize> {
    let model = Checkpoint::load(&args.checkpoint)?.to_model()?;
    let statements = load_statements(&args.input)?;
    create_dir(&args.out)?;
    for (i, s) in statements.iter().enumerate() {
        let a = analyze_statement(&model, s)?;
        let stem = file_stem(i, &s.id);
        let report = ReportFile {
            id: &s.id,
            text: &s.text,
            rendered: render_text(&a.report),
            probability: a.probability,
            prediction: a.predicted.map(|q| q.to_file_ids()),
            tokens: &a.report.tokens,
        };
        write(&args.out.join(format!("{stem}.report.json")), json(&report)?)?;
        write(&args.out.join(format!("{stem}.heatmap.json")), json(&a.heatmap)?)?;
    }
    Ok(statements.len())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => {
            let files = cmd_train(a)?;
            println!("checkpoint: {}", files.checkpoint.display());
            println!("log: {}", files.log.display());
        }
        Command::Eval(a) => print!("{}", cmd_eval(a)?.1),
        Command::Predict(a) => {
            let n = cmd_predict(a)?;
            println!("{n} predictions written to {}", a.out.display());
        }
        Command::Analyze(a) => {
            let n = cmd_analyze(a)?;
            println!("{n} statements analyzed into {}", a.out.display());
        }
    }
    Ok(())
}

/// Parses the process arguments and runs; errors exit with status 1.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
