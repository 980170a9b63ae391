use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::optim::AdamW;
use super::step::{train_step, StepStats, TeacherTargets};
use super::{TrainConfig, TrainError};
use crate::corpus::{chunk_stream, Corpus};
use crate::model::{build_model, Checkpoint, ModelParams};
use crate::tensor::Tensor;

const BATCH_STREAM_KEY: u64 = 0xba7c_4e5d_0000_0001;

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub distill: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
    pub val_ppl: Option<f64>,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Where `metrics.jsonl` and `checkpoints/` go; nothing is written if unset.
    pub out_dir: Option<&'a Path>,
    pub resume_from: Option<&'a Path>,
    pub teacher: Option<&'a TeacherTargets<'a>>,
    /// Print a progress line to stderr every this many steps (0 = silent).
    pub progress_every: usize,
}

#[derive(Debug)]
pub struct RunOutput {
    pub params: ModelParams,
    pub metrics: Vec<MetricRecord>,
    pub final_val_ppl: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Training state over a fixed corpus split.
pub struct Trainer<'t> {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub opt: AdamW,
    /// Number of completed updates.
    pub step: usize,
    train_chunks: Vec<Vec<u32>>,
    val_chunks: Vec<Vec<u32>>,
    teacher: Option<&'t TeacherTargets<'t>>,
}

impl<'t> Trainer<'t> {
    pub fn new(config: TrainConfig, corpus: &Corpus, teacher: Option<&'t TeacherTargets<'t>>) -> Result<Self, TrainError> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(crate::corpus::CorpusError::Empty.into());
        }
        match (config.loss.needs_teacher(), teacher) {
            (true, None) => return Err(TrainError::config("loss.teacher", "required when mode is distill or mix")),
            (_, Some(t)) if t.vocab_size() != config.model.vocab_size => {
                return Err(TrainError::VocabMismatch { teacher: t.vocab_size(), student: config.model.vocab_size })
            }
            _ => {}
        }
        let (train, _) = corpus.split_streams(config.val_fraction);
        let train_chunks = chunk_stream(&train, config.seq_len);
        if train_chunks.is_empty() {
            return Err(TrainError::config("seq_len", "training split is shorter than one chunk"));
        }
        let val_chunks = validation_chunks(corpus, &config);
        let params = build_model(&config.model, config.seed)?;
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
        let opt = AdamW::new(&config, &sizes);
        Ok(Self { config, params, opt, step: 0, train_chunks, val_chunks, teacher })
    }

    /// Restores parameters, optimizer moments and the step counter.
    pub fn resume(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        let saved: TrainConfig = serde_json::from_value(ckpt.meta["train_config"].clone())
            .map_err(|e| TrainError::Resume(format!("checkpoint has no usable train_config: {e}")))?;
        if saved != self.config {
            return Err(TrainError::Resume("checkpoint was written under a different train config".into()));
        }
        let step = ckpt.meta["step"].as_u64().ok_or_else(|| TrainError::Resume("checkpoint has no step".into()))? as usize;
        self.params = ckpt.params()?;
        let names: Vec<String> = self.params.named().into_iter().map(|(n, _)| n).collect();
        for (i, name) in names.iter().enumerate() {
            let get = |prefix: &str| {
                ckpt.tensor(&format!("{prefix}.{name}"))
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| TrainError::Resume(format!("missing {prefix}.{name}")))
            };
            self.opt.m[i] = get("opt.m")?;
            self.opt.v[i] = get("opt.v")?;
        }
        self.opt.t = step as u64;
        self.step = step;
        Ok(())
    }

    pub fn train_chunks(&self) -> &[Vec<u32>] {
        &self.train_chunks
    }

    pub fn val_chunks(&self) -> &[Vec<u32>] {
        &self.val_chunks
    }

    /// Chunk indices of the batch for zero-based `step`; a pure function of
    /// the seed and the step.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ BATCH_STREAM_KEY);
        rng.set_stream(step as u64);
        (0..self.config.batch_size).map(|_| rng.random_range(0..self.train_chunks.len())).collect()
    }

    pub fn step_once(&mut self) -> Result<StepStats, TrainError> {
        let idx = self.batch_indices(self.step);
        let batch: Vec<&[u32]> = idx.iter().map(|&i| self.train_chunks[i].as_slice()).collect();
        let stats = train_step(&mut self.params, &mut self.opt, &batch, &self.config, self.step, self.teacher)?;
        self.step += 1;
        Ok(stats)
    }

    /// Validation perplexity, or `None` without a validation split.
    pub fn val_ppl(&self) -> Result<Option<f64>, TrainError> {
        if self.val_chunks.is_empty() {
            return Ok(None);
        }
        Ok(Some(crate::eval::chunk_perplexity(&self.params.view(), &self.val_chunks)?))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = json!({
            "step": self.step,
            "train_config": self.config,
            "train_fingerprint": self.config.fingerprint(),
        });
        let mut ckpt = Checkpoint::from_params(&self.params, meta);
        let names: Vec<String> = self.params.named().into_iter().map(|(n, _)| n).collect();
        for (prefix, moments) in [("opt.m", &self.opt.m), ("opt.v", &self.opt.v)] {
            for (name, data) in names.iter().zip(moments) {
                ckpt.tensors.push((format!("{prefix}.{name}"), Tensor::from_vec(data.clone())));
            }
        }
        ckpt
    }
}

/// The validation chunks a run with `config` evaluates on.
pub fn validation_chunks(corpus: &Corpus, config: &TrainConfig) -> Vec<Vec<u32>> {
    let (_, val) = corpus.split_streams(config.val_fraction);
    let mut chunks = chunk_stream(&val, config.seq_len);
    if config.eval_chunks > 0 {
        chunks.truncate(config.eval_chunks);
    }
    chunks
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

pub fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step-{step:06}.g2ckpt"))
}

/// Full training loop: optional resume, periodic validation, metrics log
/// and checkpoints.
pub fn train_run(config: &TrainConfig, corpus: &Corpus, opts: RunOptions<'_>) -> Result<RunOutput, TrainError> {
    let mut trainer = Trainer::new(config.clone(), corpus, opts.teacher)?;
    if let Some(path) = opts.resume_from {
        trainer.resume(&Checkpoint::load(path)?)?;
    }
    let mut metrics_file = None;
    let mut checkpoints = Vec::new();
    if let Some(out) = opts.out_dir {
        let ckpt_dir = out.join("checkpoints");
        fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
        let path = out.join("metrics.jsonl");
        // Keep the records up to the resume point so a resumed run leaves the
        // same log as an uninterrupted one.
        let kept = match fs::read_to_string(&path) {
            Ok(text) => text
                .lines()
                .filter(|l| serde_json::from_str::<MetricRecord>(l).is_ok_and(|r| r.step <= trainer.step))
                .map(|l| format!("{l}\n"))
                .collect::<String>(),
            Err(_) => String::new(),
        };
        crate::util::atomic_write(&path, kept.as_bytes()).map_err(io_err(&path))?;
        let f = fs::OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
        metrics_file = Some((path, f));
    }
    let save = |trainer: &Trainer, checkpoints: &mut Vec<PathBuf>| -> Result<(), TrainError> {
        if let Some(out) = opts.out_dir {
            let path = checkpoint_path(out, trainer.step);
            trainer.checkpoint().save(&path)?;
            checkpoints.push(path);
        }
        Ok(())
    };

    let mut metrics = Vec::new();
    let mut final_val_ppl = None;
    if trainer.step >= config.steps {
        final_val_ppl = trainer.val_ppl()?;
        save(&trainer, &mut checkpoints)?;
    }
    while trainer.step < config.steps {
        let stats = trainer.step_once()?;
        let s = trainer.step;
        let last = s == config.steps;
        let val_ppl = if last || (config.eval_every > 0 && s % config.eval_every == 0) { trainer.val_ppl()? } else { None };
        if last {
            final_val_ppl = val_ppl;
        }
        let rec = MetricRecord {
            step: s,
            loss: stats.loss,
            ce: stats.ce,
            distill: stats.distill,
            grad_norm: stats.grad_norm,
            lr: stats.lr,
            val_ppl,
        };
        if let Some((path, f)) = metrics_file.as_mut() {
            let mut line = serde_json::to_string(&rec).expect("metrics serialize");
            line.push('\n');
            f.write_all(line.as_bytes()).map_err(io_err(path))?;
        }
        if opts.progress_every > 0 && (s % opts.progress_every == 0 || last) {
            eprintln!(
                "step {s:>6}/{} loss {:.4} ce {:.4} lr {:.2e}{}",
                config.steps,
                rec.loss,
                rec.ce,
                rec.lr,
                rec.val_ppl.map(|p| format!(" val_ppl {p:.4}")).unwrap_or_default()
            );
        }
        metrics.push(rec);
        if last || (config.checkpoint_every > 0 && s % config.checkpoint_every == 0) {
            save(&trainer, &mut checkpoints)?;
        }
    }
    Ok(RunOutput { params: trainer.params, metrics, final_val_ppl, checkpoints })
}
