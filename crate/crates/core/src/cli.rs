//! `arckd gen | train | eval | probe`.
//!
//! Settings come from an optional JSON config file; command-line flags override it.
//! Exit status: 0 on success, 1 for usage or configuration errors, 2 for runtime errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arckd::LossWeights;
use crate::branchnet::BranchKind;
use crate::error::{Error, Result};
use crate::probe::{emit_report, run_probe};
use crate::synthgen::{
    generate_dataset, overlap_statistics, read_dataset, write_dataset, DatasetSpec, Instance,
};
use crate::trainer::{
    evaluate, load_checkpoint, save_checkpoint, train_arc, train_teacher, Checkpoint, Corpus,
    EvalMode, EpochLog, MetricsRecord, Models, TrainConfig,
};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// Everything a command needs. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    /// Directory holding `train.jsonl` and `val.jsonl`. Without it, data is generated
    /// in memory from `dataset`.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Pre-trained teacher checkpoint; skips stage one.
    pub teacher: Option<PathBuf>,
    /// Checkpoint read by `eval` and `probe`; defaults to `<out_dir>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub mode: EvalMode,
    /// Number of consecutive seeds to train, starting at `train.seed`.
    pub seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            data_dir: None,
            out_dir: PathBuf::from("runs"),
            teacher: None,
            checkpoint: None,
            mode: EvalMode::Standard,
            seeds: 1,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.seeds == 0 {
            return Err(Error::config("seeds", "must be at least 1"));
        }
        Ok(())
    }

    fn with_seed(&self, seed: u64) -> RunConfig {
        let mut cfg = self.clone();
        cfg.dataset.seed = seed;
        cfg.train.seed = seed;
        cfg
    }
}

#[derive(Debug, Parser)]
#[command(name = "arckd", version, about = "Answer/rationale coupling via distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/val dataset files.
    Gen(Common),
    /// Train the teacher, then the answering and reasoning branches.
    Train(Common),
    /// Evaluate a trained checkpoint on the validation split.
    Eval(Common),
    /// Run the attention, answer-only and paraphrase probes.
    Probe(Common),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Standard,
    #[value(name = "answer_only")]
    AnswerOnly,
    Paraphrased,
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Shortcut strength of generated data.
    #[arg(long)]
    shortcut: Option<f64>,
    #[arg(long, value_name = "PATH")]
    teacher: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Directory with train.jsonl and val.jsonl.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.dataset.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(n) = self.seeds {
            cfg.seeds = n;
        }
        if let Some(a) = self.alpha {
            cfg.train.loss.alpha = a;
        }
        if let Some(b) = self.beta {
            cfg.train.loss.beta = b;
        }
        if let Some(t) = self.temperature {
            cfg.train.loss.temperature = t;
        }
        if let Some(s) = self.shortcut {
            cfg.dataset.shortcut_strength = s;
        }
        if let Some(t) = &self.teacher {
            cfg.teacher = Some(t.clone());
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(d) = &self.data {
            cfg.data_dir = Some(d.clone());
        }
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::Standard => EvalMode::Standard,
                ModeArg::AnswerOnly => EvalMode::AnswerOnly,
                ModeArg::Paraphrased => EvalMode::Paraphrased,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn is_usage_error(e: &Error) -> bool {
    matches!(e, Error::Config { .. } | Error::Spec(_))
}

/// Parse `args` (program name first), run the command, return the exit status.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let (common, action): (&Common, fn(&RunConfig, &mut dyn std::io::Write) -> Result<()>) =
        match &cli.command {
            Command::Gen(c) => (c, cmd_gen),
            Command::Train(c) => (c, cmd_train),
            Command::Eval(c) => (c, cmd_eval),
            Command::Probe(c) => (c, cmd_probe),
        };
    let result = common.resolve().and_then(|cfg| action(&cfg, out));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if is_usage_error(&e) {
                1
            } else {
                2
            }
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

pub fn cmd_gen(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<()> {
    let dir = cfg.data_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
    create_dir(&dir)?;
    let (train, val) = generate_dataset(&cfg.dataset)?;
    for (name, split, data) in [(TRAIN_FILE, "train", &train), (VAL_FILE, "val", &val)] {
        let path = dir.join(name);
        write_dataset(&path, &cfg.dataset, split, data)?;
        let (gold, other) = overlap_statistics(data);
        writeln!(
            out,
            "{split}: {} instances, vocab {}, shortcut_strength {}, answer overlap gold {gold:.3} distractor {other:.3}, sha256 {}",
            data.len(),
            cfg.dataset.vocab_size,
            cfg.dataset.shortcut_strength,
            sha256_hex(&path)?
        )?;
    }
    Ok(())
}

/// Train and validation splits, read from `data_dir` or generated from the spec.
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.data_dir {
        Some(dir) => {
            let (train_header, train) = read_dataset(&dir.join(TRAIN_FILE))?;
            let (_, val) = read_dataset(&dir.join(VAL_FILE))?;
            Ok(Corpus {
                spec: train_header.spec,
                train,
                val,
            })
        }
        None => Corpus::generate(&cfg.dataset),
    }
}

fn val_split(cfg: &RunConfig) -> Result<(DatasetSpec, Vec<Instance>)> {
    match &cfg.data_dir {
        Some(dir) => {
            let (header, val) = read_dataset(&dir.join(VAL_FILE))?;
            Ok((header.spec, val))
        }
        None => {
            let c = Corpus::generate(&cfg.dataset)?;
            Ok((c.spec, c.val))
        }
    }
}

/// One trained seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub label: String,
    pub acc_qa: f64,
    pub acc_qar: f64,
    pub acc_joint: f64,
    pub acc_teacher: Option<f64>,
}

fn label(w: &LossWeights) -> String {
    if w.is_baseline() {
        "baseline (separate)".into()
    } else {
        format!("ARC (alpha {}, beta {}, T {})", w.alpha, w.beta, w.temperature)
    }
}

fn train_one(cfg: &RunConfig, dir: &Path) -> Result<RunSummary> {
    create_dir(dir)?;
    let data = load_corpus(cfg)?;
    let snapshot = serde_json::to_value(cfg)?;
    let mut history: Vec<EpochLog> = Vec::new();
    let teacher = match &cfg.teacher {
        Some(path) => load_checkpoint(path)?.require(BranchKind::Teacher)?.clone(),
        None => {
            let trained = train_teacher(&data, &cfg.train)?;
            history.extend(trained.history.iter().cloned());
            let ckpt = Checkpoint::new(
                vec![trained.model.clone()],
                snapshot.clone(),
                trained.best_epoch,
                trained.history,
            );
            save_checkpoint(&ckpt, &dir.join(TEACHER_FILE))?;
            trained.model
        }
    };
    let expected = cfg.train.model_config(data.spec.vocab_size);
    if teacher.config != expected {
        return Err(Error::Compat(format!(
            "teacher was built for {:?}, this run uses {:?}",
            teacher.config, expected
        )));
    }
    let pair = train_arc(&data, Some(&teacher), &cfg.train)?;
    history.extend(pair.history.iter().cloned());

    let mut log = Vec::new();
    for h in &history {
        serde_json::to_writer(&mut log, h)?;
        log.push(b'\n');
    }
    let log_path = dir.join(METRICS_FILE);
    fs::write(&log_path, log).map_err(|e| Error::file(&log_path, e))?;

    let ckpt = Checkpoint::new(
        vec![pair.answering.clone(), pair.reasoning.clone(), teacher.clone()],
        snapshot,
        pair.best_epoch,
        pair.history.clone(),
    );
    save_checkpoint(&ckpt, &dir.join(MODEL_FILE))?;

    let id = crate::synthgen::SynonymMap::identity();
    let record = evaluate(pair.models(Some(&teacher)), &data.val, "val", EvalMode::Standard, &id)?;
    let summary = RunSummary {
        seed: cfg.train.seed,
        label: label(&cfg.train.loss),
        acc_qa: record.acc_qa,
        acc_qar: record.acc_qar,
        acc_joint: record.acc_joint,
        acc_teacher: record.acc_teacher,
    };
    let path = dir.join(SUMMARY_FILE);
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
        .map_err(|e| Error::file(&path, e))?;
    Ok(summary)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn summary_row(out: &mut dyn std::io::Write, name: &str, s: [f64; 3], t: Option<f64>) -> Result<()> {
    let teacher = t.map_or("-".to_string(), |v| format!("{v:.4}"));
    writeln!(out, "{name:<8} {:>7.4} {:>7.4} {:>7.4} {teacher:>7}", s[0], s[1], s[2])?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<()> {
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|k| cfg.train.seed + k).collect();
    let summaries: Vec<RunSummary> = if seeds.len() == 1 {
        vec![train_one(cfg, &cfg.out_dir)?]
    } else {
        seeds
            .par_iter()
            .map(|&s| train_one(&cfg.with_seed(s), &cfg.out_dir.join(format!("seed_{s}"))))
            .collect::<Result<_>>()?
    };
    writeln!(out, "{}", label(&cfg.train.loss))?;
    writeln!(out, "{:<8} {:>7} {:>7} {:>7} {:>7}", "seed", "Q->A", "QA->R", "Q->AR", "QR->A")?;
    for s in &summaries {
        summary_row(out, &s.seed.to_string(), [s.acc_qa, s.acc_qar, s.acc_joint], s.acc_teacher)?;
    }
    if summaries.len() > 1 {
        let col = |f: fn(&RunSummary) -> f64| median(&mut summaries.iter().map(f).collect::<Vec<_>>());
        let teacher: Vec<f64> = summaries.iter().filter_map(|s| s.acc_teacher).collect();
        let t = (teacher.len() == summaries.len()).then(|| median(&mut teacher.clone()));
        summary_row(out, "median", [col(|s| s.acc_qa), col(|s| s.acc_qar), col(|s| s.acc_joint)], t)?;
    }
    Ok(())
}

fn load_models(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(MODEL_FILE));
    let ckpt = load_checkpoint(&path)?;
    ckpt.require(BranchKind::Answering)?;
    ckpt.require(BranchKind::Reasoning)?;
    Ok(ckpt)
}

fn models(ckpt: &Checkpoint) -> Result<Models<'_>> {
    Ok(Models {
        answering: ckpt.require(BranchKind::Answering)?,
        reasoning: ckpt.require(BranchKind::Reasoning)?,
        teacher: ckpt.branch(BranchKind::Teacher),
    })
}

fn check_vocab(ckpt: &Checkpoint, spec: &DatasetSpec) -> Result<()> {
    for b in &ckpt.branches {
        if b.config.vocab_size != spec.vocab_size {
            return Err(Error::Compat(format!(
                "{} branch has vocabulary {}, data has {}",
                b.kind.name(),
                b.config.vocab_size,
                spec.vocab_size
            )));
        }
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<()> {
    let ckpt = load_models(cfg)?;
    let (spec, val) = val_split(cfg)?;
    check_vocab(&ckpt, &spec)?;
    let map = spec.synonym_map()?;
    let record: MetricsRecord = evaluate(models(&ckpt)?, &val, "val", cfg.mode, &map)?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("eval_{}.json", cfg.mode.name()));
    fs::write(&path, serde_json::to_string_pretty(&record)? + "\n")
        .map_err(|e| Error::file(&path, e))?;
    writeln!(out, "{}", serde_json::to_string(&record)?)?;
    Ok(())
}

pub fn cmd_probe(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<()> {
    let ckpt = load_models(cfg)?;
    let (spec, val) = val_split(cfg)?;
    check_vocab(&ckpt, &spec)?;
    let map = spec.synonym_map()?;
    let report = run_probe(models(&ckpt)?, &val, &map, ckpt.config.clone())?;
    let dir = cfg.out_dir.join("probe");
    let paths = emit_report(&report, &dir)?;
    let table = paths[2].clone();
    let text = fs::read_to_string(&table).map_err(|e| Error::file(&table, e))?;
    write!(out, "{text}")?;
    Ok(())
}
