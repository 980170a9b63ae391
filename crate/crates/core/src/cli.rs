//! Command-line driver.
//!
//! Each command reads one JSON config, or the `manifest.json` of an earlier
//! run, writes a manifest with every default filled in to the output
//! directory and then does its work there. Exit codes: 0 success,
//! 1 invalid input or usage, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::builder::PossibleValuesParser;
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::audit::{run_audit, AuditConfig, AuditError};
use crate::chat;
use crate::corpus::{chunk_stream, Corpus, CorpusError, CorpusSpec, SyntheticSpec};
use crate::eval::{self, ArmResult, DistillAblation, EvalError, EvalReport, GqaAblation, WideDeepAblation, WindowSweep, ABLATIONS};
use crate::model::{Checkpoint, ModelError, ModelParams};
use crate::tokenizer;
use crate::train::{self, RunOptions, TeacherTargets, TrainConfig, TrainError};
use crate::util::atomic_write;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "gemma2", version, about = "Train, distill, evaluate and audit small Gemma 2 style models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config file, or the manifest.json of an earlier run.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory (default: the manifest's, else `out`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a corpus.
    Train {
        /// Continue from a checkpoint written by the same config.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Train a student against a teacher checkpoint's distributions.
    Distill {
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Average the parameters of several checkpoints.
    Merge,
    /// Validation perplexity of a checkpoint.
    Eval,
    /// Run a paired ablation and write its report.
    Ablate {
        #[arg(value_parser = PossibleValuesParser::new(ABLATIONS))]
        name: String,
    },
    /// Prompted-continuation memorization audit.
    Memorize,
    /// Chat-format filter from stdin to stdout.
    Chatfmt {
        #[command(subcommand)]
        mode: ChatfmtMode,
    },
}

#[derive(Clone, Copy, Debug, Subcommand)]
pub enum ChatfmtMode {
    /// Transcript lines in, control-token stream text out.
    Render,
    /// Control-token stream text in, transcript lines out.
    Parse,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0:#}")]
    Validation(anyhow::Error),
    #[error("{0:#}")]
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn invalid(msg: impl std::fmt::Display) -> Self {
        CliError::Validation(anyhow!("{msg}"))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config { .. } | TrainError::VocabMismatch { .. } | TrainError::Merge(_) | TrainError::Resume(_) => {
                CliError::Validation(e.into())
            }
            TrainError::Corpus(c) => c.into(),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Unpaired { .. } => CliError::Validation(e.into()),
            EvalError::Train(t) => t.into(),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<AuditError> for CliError {
    fn from(e: AuditError) -> Self {
        match e {
            AuditError::Model(_) => CliError::Runtime(e.into()),
            other => CliError::Validation(other.into()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Validation(anyhow::Error::new(e).context("corpus"))
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Validation(e.into()),
            other => CliError::Runtime(other.into()),
        }
    }
}

/// What a command was run with; enough to run it again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// The config with defaults materialized and paths made absolute.
    pub config: Value,
    pub corpus_hash: Option<String>,
    pub code_version: String,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeCommandConfig {
    pub inputs: Vec<PathBuf>,
    /// Per-input weights summing to 1; absent means a plain mean.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

/// Which chunks to score. Unset fields come from the checkpoint's training
/// config when it has one.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSplit {
    #[serde(default)]
    pub seq_len: Option<usize>,
    /// 0 scores the whole corpus.
    #[serde(default)]
    pub val_fraction: Option<f64>,
    /// Cap on the number of chunks, 0 for all.
    #[serde(default)]
    pub eval_chunks: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCommandConfig {
    pub checkpoint: PathBuf,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub split: EvalSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillVsScratchConfig {
    pub ablation: DistillAblation,
    pub corpus: CorpusSpec,
    pub teacher: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GqaConfig {
    pub ablation: GqaAblation,
    pub corpus: CorpusSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WideDeepConfig {
    pub ablation: WideDeepAblation,
    pub corpus: CorpusSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSweepConfig {
    pub checkpoint: PathBuf,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub windows: Vec<usize>,
    #[serde(default)]
    pub split: EvalSplit,
    #[serde(default)]
    pub seed: u64,
}

fn d_items() -> usize {
    40
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormatVarianceConfig {
    pub checkpoint: PathBuf,
    /// Synthetic corpus whose fact table the questions are drawn from.
    pub facts: SyntheticSpec,
    #[serde(default = "d_items")]
    pub items: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorizeCommandConfig {
    pub checkpoint: PathBuf,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub audit: AuditConfig,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    match run(cli, &mut stdin.lock(), &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, input: &mut dyn Read, output: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Train { resume } => cmd_train(&cli, "train", resume.as_deref(), output),
        Command::Distill { resume } => cmd_train(&cli, "distill", resume.as_deref(), output),
        Command::Merge => cmd_merge(&cli, output),
        Command::Eval => cmd_eval(&cli, output),
        Command::Ablate { name } => cmd_ablate(&cli, name, output),
        Command::Memorize => cmd_memorize(&cli, output),
        Command::Chatfmt { mode } => cmd_chatfmt(*mode, input, output),
    }
}

struct Loaded<T> {
    config: T,
    base: PathBuf,
    out_dir: PathBuf,
}

fn load_config<T: DeserializeOwned>(cli: &Cli, command: &str) -> Result<Loaded<T>, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::invalid(format!("`{command}` needs --config PATH")))?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(CliError::Validation)?;
    let value: Value =
        serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display())).map_err(CliError::Validation)?;
    let (value, manifest_out) = if value.get("code_version").is_some() && value.get("command").is_some() {
        let m: RunManifest = serde_json::from_value(value).context("bad manifest").map_err(CliError::Validation)?;
        if m.command != command {
            return Err(CliError::invalid(format!("manifest is for `{}`, not `{command}`", m.command)));
        }
        (m.config, Some(m.out_dir))
    } else {
        (value, None)
    };
    let config = serde_json::from_value(value).with_context(|| format!("config {}", path.display())).map_err(CliError::Validation)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let out_dir = cli.out.clone().or(manifest_out).unwrap_or_else(|| PathBuf::from("out"));
    Ok(Loaded { config, base, out_dir })
}

fn absolute(base: &Path, p: &Path) -> Result<PathBuf, CliError> {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    std::path::absolute(&joined).with_context(|| format!("resolving {}", joined.display())).map_err(CliError::Validation)
}

fn resolve_corpus(spec: &mut CorpusSpec, base: &Path) -> Result<(), CliError> {
    if let CorpusSpec::Files { paths } = spec {
        for p in paths.iter_mut() {
            *p = absolute(base, p)?;
        }
    }
    Ok(())
}

fn prepare_out(out_dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display())).map_err(CliError::Runtime)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    atomic_write(path, bytes).with_context(|| format!("writing {}", path.display())).map_err(CliError::Runtime)
}

fn write_manifest<T: Serialize>(
    command: &str,
    config: &T,
    corpus: Option<&Corpus>,
    seed: Option<u64>,
    out_dir: &Path,
) -> Result<(), CliError> {
    prepare_out(out_dir)?;
    let manifest = RunManifest {
        command: command.to_string(),
        config: serde_json::to_value(config).expect("config serializes"),
        corpus_hash: corpus.map(Corpus::content_hash),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        out_dir: out_dir.to_path_buf(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_file(&out_dir.join(MANIFEST_FILE), text.as_bytes())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::Validation(anyhow::Error::new(e).context(format!("checkpoint {}", path.display()))))
}

fn load_params(path: &Path) -> Result<ModelParams, CliError> {
    Ok(load_checkpoint(path)?.params()?)
}

fn cmd_train(cli: &Cli, command: &str, resume: Option<&Path>, output: &mut dyn Write) -> Result<(), CliError> {
    let Loaded { mut config, base, out_dir } = load_config::<TrainCommandConfig>(cli, command)?;
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    if command == "distill" && !config.train.loss.needs_teacher() {
        return Err(CliError::invalid("loss.mode: `distill` needs mode distill or mix"));
    }
    config.train.validate()?;
    config.train.loss.validate_teacher_path()?;
    if let Some(t) = config.train.loss.teacher.as_mut() {
        *t = absolute(&base, t)?;
        if !t.is_file() {
            return Err(CliError::invalid(format!("loss.teacher: {} does not exist", t.display())));
        }
    }
    resolve_corpus(&mut config.corpus, &base)?;
    let teacher_params = config.train.loss.teacher.as_deref().map(load_params).transpose()?;
    let corpus = config.corpus.load(&base)?;
    write_manifest(command, &config, Some(&corpus), Some(config.train.seed), &out_dir)?;

    let targets = teacher_params.as_ref().map(|p| TeacherTargets::new(p, config.train.loss.temperature));
    let progress_every = (config.train.steps / 20).max(1);
    let run = train::train_run(
        &config.train,
        &corpus,
        RunOptions { out_dir: Some(&out_dir), resume_from: resume, teacher: targets.as_ref(), progress_every },
    )?;
    let ppl = run.final_val_ppl.map_or("-".to_string(), |p| format!("{p:.4}"));
    let _ = writeln!(output, "trained {} steps, val ppl {ppl}", config.train.steps);
    for c in &run.checkpoints {
        let _ = writeln!(output, "checkpoint {}", c.display());
    }
    Ok(())
}

fn cmd_merge(cli: &Cli, output: &mut dyn Write) -> Result<(), CliError> {
    let Loaded { mut config, base, out_dir } = load_config::<MergeCommandConfig>(cli, "merge")?;
    if config.inputs.is_empty() {
        return Err(CliError::invalid("inputs: at least one checkpoint is required"));
    }
    for p in config.inputs.iter_mut() {
        *p = absolute(&base, p)?;
    }
    let sets = config.inputs.iter().map(|p| load_params(p)).collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&ModelParams> = sets.iter().collect();
    let merged = match &config.weights {
        Some(w) => train::merge_weighted(&refs, w)?,
        None => train::merge_models(&refs)?,
    };
    write_manifest("merge", &config, None, cli.seed, &out_dir)?;
    let path = out_dir.join("merged.g2ckpt");
    let meta = serde_json::json!({ "merged_from": config.inputs, "weights": config.weights });
    Checkpoint::from_params(&merged, meta).save(&path)?;
    let _ = writeln!(output, "merged {} checkpoints into {}", sets.len(), path.display());
    Ok(())
}

/// Fills unset split fields from the checkpoint's training config, then the
/// model's context.
fn resolve_split(split: &EvalSplit, ckpt: &Checkpoint) -> EvalSplit {
    let trained: Option<TrainConfig> = serde_json::from_value(ckpt.meta["train_config"].clone()).ok();
    EvalSplit {
        seq_len: split.seq_len.or(trained.as_ref().map(|t| t.seq_len)).or(Some(ckpt.config.global_span)),
        val_fraction: split.val_fraction.or(trained.as_ref().map(|t| t.val_fraction)).or(Some(0.1)),
        eval_chunks: split.eval_chunks.or(trained.as_ref().map(|t| t.eval_chunks)).or(Some(0)),
    }
}

fn split_chunks(corpus: &Corpus, split: &EvalSplit) -> Result<Vec<Vec<u32>>, CliError> {
    let seq_len = split.seq_len.unwrap_or(1);
    let fraction = split.val_fraction.unwrap_or(0.0);
    if seq_len == 0 || !(0.0..1.0).contains(&fraction) {
        return Err(CliError::invalid("split: seq_len must be positive and val_fraction in [0, 1)"));
    }
    let stream = if fraction == 0.0 { corpus.stream() } else { corpus.split_streams(fraction).1 };
    let mut chunks = chunk_stream(&stream, seq_len);
    if let Some(n) = split.eval_chunks.filter(|&n| n > 0) {
        chunks.truncate(n);
    }
    if chunks.is_empty() {
        return Err(CliError::invalid("split: no complete chunk to evaluate"));
    }
    Ok(chunks)
}

fn write_report(out_dir: &Path, stem: &str, report: &EvalReport, output: &mut dyn Write) -> Result<(), CliError> {
    write_file(&out_dir.join(format!("{stem}.json")), report.to_json().as_bytes())?;
    let table = report.to_table();
    write_file(&out_dir.join(format!("{stem}.txt")), table.as_bytes())?;
    let _ = write!(output, "{table}");
    Ok(())
}

fn cmd_eval(cli: &Cli, output: &mut dyn Write) -> Result<(), CliError> {
    let Loaded { mut config, base, out_dir } = load_config::<EvalCommandConfig>(cli, "eval")?;
    config.checkpoint = absolute(&base, &config.checkpoint)?;
    resolve_corpus(&mut config.corpus, &base)?;
    let ckpt = load_checkpoint(&config.checkpoint)?;
    let params = ckpt.params()?;
    config.split = resolve_split(&config.split, &ckpt);
    let corpus = config.corpus.load(&base)?;
    let chunks = split_chunks(&corpus, &config.split)?;
    write_manifest("eval", &config, Some(&corpus), cli.seed, &out_dir)?;
    let ppl = eval::chunk_perplexity(&params.view(), &chunks)?;
    let label = config.checkpoint.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let mut report = EvalReport::new("eval", cli.seed.unwrap_or(0), &corpus.content_hash());
    report.push(
        ArmResult::new(label, params.config().fingerprint())
            .with("val_ppl", ppl)
            .with("chunks", chunks.len() as f64)
            .with("params", params.num_params() as f64),
    )?;
    write_report(&out_dir, "eval", &report, output)
}

fn cmd_ablate(cli: &Cli, name: &str, output: &mut dyn Write) -> Result<(), CliError> {
    let command = format!("ablate {name}");
    let report = match name {
        "distill_vs_scratch" => {
            let Loaded { mut config, base, out_dir } = load_config::<DistillVsScratchConfig>(cli, &command)?;
            if let Some(seed) = cli.seed {
                config.ablation.seeds = vec![seed];
            }
            config.ablation.train.validate()?;
            config.teacher = absolute(&base, &config.teacher)?;
            resolve_corpus(&mut config.corpus, &base)?;
            let teacher = load_params(&config.teacher)?;
            let corpus = config.corpus.load(&base)?;
            write_manifest(&command, &config, Some(&corpus), cli.seed, &out_dir)?;
            let targets = TeacherTargets::new(&teacher, config.ablation.train.loss.temperature);
            (eval::distill_vs_scratch(&config.ablation, &targets, &corpus)?, out_dir)
        }
        "gqa_vs_mha" => {
            let Loaded { mut config, base, out_dir } = load_config::<GqaConfig>(cli, &command)?;
            if let Some(seed) = cli.seed {
                config.ablation.seeds = vec![seed];
            }
            config.ablation.train.validate()?;
            resolve_corpus(&mut config.corpus, &base)?;
            let corpus = config.corpus.load(&base)?;
            write_manifest(&command, &config, Some(&corpus), cli.seed, &out_dir)?;
            (eval::gqa_vs_mha(&config.ablation, &corpus)?, out_dir)
        }
        "wide_vs_deep" => {
            let Loaded { mut config, base, out_dir } = load_config::<WideDeepConfig>(cli, &command)?;
            if let Some(seed) = cli.seed {
                config.ablation.seeds = vec![seed];
            }
            config.ablation.train.validate()?;
            resolve_corpus(&mut config.corpus, &base)?;
            let corpus = config.corpus.load(&base)?;
            write_manifest(&command, &config, Some(&corpus), cli.seed, &out_dir)?;
            (eval::wide_vs_deep(&config.ablation, &corpus)?, out_dir)
        }
        "window_sweep" => {
            let Loaded { mut config, base, out_dir } = load_config::<WindowSweepConfig>(cli, &command)?;
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            config.checkpoint = absolute(&base, &config.checkpoint)?;
            resolve_corpus(&mut config.corpus, &base)?;
            let ckpt = load_checkpoint(&config.checkpoint)?;
            let params = ckpt.params()?;
            config.split = resolve_split(&config.split, &ckpt);
            config.windows = WindowSweep { windows: config.windows.clone() }.resolve(params.config().window_size);
            let corpus = config.corpus.load(&base)?;
            let chunks = split_chunks(&corpus, &config.split)?;
            write_manifest(&command, &config, Some(&corpus), Some(config.seed), &out_dir)?;
            (eval::window_sweep(&params, &chunks, &config.windows, &corpus.content_hash(), config.seed)?, out_dir)
        }
        "format_variance" => {
            let Loaded { mut config, base, out_dir } = load_config::<FormatVarianceConfig>(cli, &command)?;
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            if config.items == 0 {
                return Err(CliError::invalid("items: must be positive"));
            }
            config.checkpoint = absolute(&base, &config.checkpoint)?;
            let params = load_params(&config.checkpoint)?;
            let corpus = config.facts.generate()?;
            write_manifest(&command, &config, Some(&corpus), Some(config.seed), &out_dir)?;
            let items = eval::fact_questions(&config.facts.fact_table(), config.items, config.seed);
            let variants = eval::format_variants();
            let (std, scores) = eval::format_variance(&params.view(), &items, &variants)?;
            let mut report = EvalReport::new("format_variance", config.seed, &corpus.content_hash());
            for (v, s) in variants.iter().zip(&scores) {
                let fp = crate::util::short_hash(&serde_json::to_vec(v).expect("variant serializes"));
                report.push(ArmResult::new(v.label(), fp).with("accuracy", *s))?;
            }
            report.set_summary("accuracy_std", std)?;
            report.set_summary("accuracy_mean", scores.iter().sum::<f64>() / scores.len() as f64)?;
            (report, out_dir)
        }
        other => return Err(CliError::invalid(format!("unknown ablation `{other}`; valid names: {}", ABLATIONS.join(", ")))),
    };
    let (report, out_dir) = report;
    write_report(&out_dir, name, &report, output)
}

fn cmd_memorize(cli: &Cli, output: &mut dyn Write) -> Result<(), CliError> {
    let Loaded { mut config, base, out_dir } = load_config::<MemorizeCommandConfig>(cli, "memorize")?;
    if let Some(seed) = cli.seed {
        config.audit.seed = seed;
    }
    config.checkpoint = absolute(&base, &config.checkpoint)?;
    resolve_corpus(&mut config.corpus, &base)?;
    let params = load_params(&config.checkpoint)?;
    config.audit.validate(Some(params.config().global_span))?;
    let corpus = config.corpus.load(&base)?;
    write_manifest("memorize", &config, Some(&corpus), Some(config.audit.seed), &out_dir)?;
    let report = run_audit(&params.view(), &corpus, &config.audit)?;
    if report.overall.short > 0 {
        eprintln!("{} generations ended at <eos> before {} tokens", report.overall.short, config.audit.continuation_len);
    }
    write_file(&out_dir.join("memorization.json"), report.to_json().as_bytes())?;
    let summary = report.summary();
    write_file(&out_dir.join("memorization.txt"), summary.as_bytes())?;
    let _ = write!(output, "{summary}");
    Ok(())
}

fn cmd_chatfmt(mode: ChatfmtMode, input: &mut dyn Read, output: &mut dyn Write) -> Result<(), CliError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).context("reading stdin").map_err(CliError::Runtime)?;
    let out = match mode {
        ChatfmtMode::Render => {
            let text = String::from_utf8(bytes).map_err(|_| CliError::invalid("transcript is not UTF-8"))?;
            let dialogues = chat::read_transcript(&text).map_err(|e| CliError::Validation(e.into()))?;
            let mut ids = Vec::new();
            for d in &dialogues {
                ids.extend(chat::render_dialogue(d, false).map_err(|e| CliError::Validation(e.into()))?);
            }
            tokenizer::to_stream_text(&ids).map_err(|e| CliError::Validation(e.into()))?
        }
        ChatfmtMode::Parse => {
            // One trailing newline after the final <eos> is tolerated for
            // shell use.
            let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
            let ids = tokenizer::from_stream_text(body).map_err(|e| CliError::Validation(e.into()))?;
            let dialogues = chat::split_rendered(&ids)
                .into_iter()
                .map(chat::parse_dialogue)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Validation(e.into()))?;
            chat::write_transcript(&dialogues).into_bytes()
        }
    };
    output.write_all(&out).context("writing stdout").map_err(CliError::Runtime)
}
