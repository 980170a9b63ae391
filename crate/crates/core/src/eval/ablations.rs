use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::report::{ArmResult, EvalReport};
use super::{chunk_perplexity, EvalError};
use crate::corpus::Corpus;
use crate::model::{ModelConfig, ModelParams, ModelView};
use crate::train::{train_run, validation_chunks, LossSpec, RunOptions, TeacherTargets, TrainConfig};

/// Names accepted by the ablation dispatcher.
pub const ABLATIONS: [&str; 5] = ["distill_vs_scratch", "gqa_vs_mha", "wide_vs_deep", "window_sweep", "format_variance"];

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// Hash of everything two arms must share: the training protocol without
/// the model and the loss.
pub fn protocol_fingerprint(config: &TrainConfig) -> String {
    let mut v = serde_json::to_value(config).expect("config serializes");
    if let Some(map) = v.as_object_mut() {
        map.remove("model");
        map.remove("loss");
    }
    crate::util::short_hash(&serde_json::to_vec(&v).expect("value serializes"))
}

fn ensure_paired(a: (&str, &TrainConfig), b: (&str, &TrainConfig)) -> Result<(), EvalError> {
    let (fa, fb) = (protocol_fingerprint(a.1), protocol_fingerprint(b.1));
    if fa != fb {
        return Err(EvalError::Unpaired { a: a.0.into(), b: b.0.into(), fa, fb });
    }
    Ok(())
}

fn run_val_ppl(
    config: &TrainConfig,
    corpus: &Corpus,
    teacher: Option<&TeacherTargets<'_>>,
) -> Result<(ModelParams, f64), EvalError> {
    let out = train_run(config, corpus, RunOptions { teacher, ..Default::default() })?;
    let ppl = out
        .final_val_ppl
        .ok_or_else(|| EvalError::Contract("ablations need a validation split (val_fraction > 0)".into()))?;
    Ok((out.params, ppl))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedModel {
    pub label: String,
    pub model: ModelConfig,
}

/// Paired scratch/distilled student runs for every student size and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillAblation {
    /// Shared protocol; its `model` and `loss` fields are replaced per arm.
    pub train: TrainConfig,
    pub students: Vec<NamedModel>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

pub fn distill_vs_scratch(ab: &DistillAblation, teacher: &TeacherTargets<'_>, corpus: &Corpus) -> Result<EvalReport, EvalError> {
    if ab.students.is_empty() || ab.seeds.is_empty() {
        return Err(EvalError::Contract("distill_vs_scratch needs at least one student and one seed".into()));
    }
    let mut report = EvalReport::new("distill_vs_scratch", ab.seeds[0], &corpus.content_hash());
    let val = validation_chunks(corpus, &ab.train);
    if val.is_empty() {
        return Err(EvalError::Contract("ablations need a validation split (val_fraction > 0)".into()));
    }
    let teacher_ppl = chunk_perplexity(&teacher.params().view(), &val)?;
    report.push(ArmResult::new("teacher", teacher.params().config().fingerprint()).with("val_ppl", teacher_ppl))?;
    let mut wins = 0usize;
    for student in &ab.students {
        for &seed in &ab.seeds {
            let mut scratch = ab.train.clone();
            scratch.model = student.model.clone();
            scratch.seed = seed;
            scratch.loss = LossSpec::ce();
            let mut distill = scratch.clone();
            distill.loss = LossSpec { temperature: ab.train.loss.temperature, ..LossSpec::distill() };
            let (ls, ld) = (format!("{}/seed{seed}/scratch", student.label), format!("{}/seed{seed}/distill", student.label));
            ensure_paired((&ls, &scratch), (&ld, &distill))?;
            let (_, ppl_s) = run_val_ppl(&scratch, corpus, None)?;
            if teacher_ppl >= ppl_s {
                return Err(EvalError::Contract(format!(
                    "teacher val ppl {teacher_ppl:.4} is not below scratch student {ls} ({ppl_s:.4})"
                )));
            }
            let (_, ppl_d) = run_val_ppl(&distill, corpus, Some(teacher))?;
            let params = student.model.count_params();
            let n = (params.embedding + params.non_embedding) as f64;
            report.push(ArmResult::new(&ls, scratch.fingerprint()).with("val_ppl", ppl_s).with("params", n))?;
            report.push(ArmResult::new(&ld, distill.fingerprint()).with("val_ppl", ppl_d).with("params", n))?;
            report.set_summary(&format!("{}/seed{seed}/gap", student.label), ppl_s - ppl_d)?;
            wins += usize::from(ppl_d < ppl_s);
        }
    }
    report.set_summary("distill_wins", wins as f64)?;
    report.set_summary("pairs", (ab.students.len() * ab.seeds.len()) as f64)?;
    Ok(report)
}

fn default_decode_tokens() -> usize {
    48
}
fn default_decode_reps() -> usize {
    7
}

/// Grouped-query arm (`train.model`) against the same model with one KV head
/// per query head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GqaAblation {
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Tokens generated per timing repetition (prompt included).
    #[serde(default = "default_decode_tokens")]
    pub decode_tokens: usize,
    #[serde(default = "default_decode_reps")]
    pub decode_reps: usize,
}

/// Best-of-`reps` cached greedy decoding throughput in tokens per second for
/// each view. Repetitions are interleaved across views so drift in machine
/// load hits every arm alike.
pub fn decode_throughput(views: &[ModelView<'_>], tokens: usize, reps: usize) -> Result<Vec<f64>, EvalError> {
    let prompt = [crate::tokenizer::BOS];
    let mut best = vec![0.0f64; views.len()];
    for _ in 0..reps.max(1) {
        for (i, view) in views.iter().enumerate() {
            let steps = tokens.min(view.config().global_span).max(2);
            let t0 = Instant::now();
            let out = view.generate_greedy(&prompt, steps - 1, None)?;
            let dt = t0.elapsed().as_secs_f64();
            best[i] = best[i].max((out.len() + prompt.len()) as f64 / dt.max(1e-9));
        }
    }
    Ok(best)
}

pub fn gqa_vs_mha(ab: &GqaAblation, corpus: &Corpus) -> Result<EvalReport, EvalError> {
    let gqa_model = ab.train.model.clone();
    if gqa_model.n_kv_heads == gqa_model.n_heads {
        return Err(EvalError::Contract("gqa_vs_mha needs train.model.n_kv_heads < n_heads".into()));
    }
    if ab.seeds.is_empty() {
        return Err(EvalError::Contract("gqa_vs_mha needs at least one seed".into()));
    }
    let mut mha_model = gqa_model.clone();
    mha_model.n_kv_heads = mha_model.n_heads;
    let mut report = EvalReport::new("gqa_vs_mha", ab.seeds[0], &corpus.content_hash());
    for &seed in &ab.seeds {
        let mut g = ab.train.clone();
        g.seed = seed;
        let mut m = g.clone();
        m.model = mha_model.clone();
        let (lg, lm) = (format!("gqa/seed{seed}"), format!("mha/seed{seed}"));
        ensure_paired((&lg, &g), (&lm, &m))?;
        let (pg, ppl_g) = run_val_ppl(&g, corpus, None)?;
        let (pm, ppl_m) = run_val_ppl(&m, corpus, None)?;
        let tput = decode_throughput(&[pg.view(), pm.view()], ab.decode_tokens, ab.decode_reps)?;
        report.push(
            ArmResult::new(&lg, g.fingerprint())
                .with("val_ppl", ppl_g)
                .with("decode_tok_s", tput[0])
                .with("kv_heads", gqa_model.n_kv_heads as f64),
        )?;
        report.push(
            ArmResult::new(&lm, m.fingerprint())
                .with("val_ppl", ppl_m)
                .with("decode_tok_s", tput[1])
                .with("kv_heads", mha_model.n_kv_heads as f64),
        )?;
        report.set_summary(&format!("seed{seed}/rel_ppl_gap"), (ppl_g - ppl_m) / ppl_m)?;
        report.set_summary(&format!("seed{seed}/throughput_ratio"), tput[0] / tput[1])?;
    }
    Ok(report)
}

/// Returns `config` with `ff_dim` (kept even) chosen so the total parameter
/// count is as close as possible to `target`.
pub fn fit_ff_dim(config: &ModelConfig, target: u64) -> Result<ModelConfig, EvalError> {
    let mut c = config.clone();
    let total = |c: &ModelConfig| {
        let p = c.count_params();
        (p.embedding + p.non_embedding) as f64
    };
    c.ff_dim = 2;
    let base = total(&c);
    c.ff_dim = 4;
    let per_two = total(&c) - base;
    let steps = ((target as f64 - base) / per_two).round();
    if steps < 0.0 {
        return Err(EvalError::Contract(format!("budget {target} is below the size of {} layers at d_model {}", c.n_layers, c.d_model)));
    }
    c.ff_dim = 2 + 2 * steps as usize;
    Ok(c)
}

/// Two shapes at one parameter budget: wide/shallow against narrow/deep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WideDeepAblation {
    pub train: TrainConfig,
    pub wide: ModelConfig,
    pub deep: ModelConfig,
    /// Target total parameters; defaults to the wide model's count. Both
    /// arms get their `ff_dim` refit to it.
    #[serde(default)]
    pub param_budget: Option<u64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

pub fn wide_vs_deep(ab: &WideDeepAblation, corpus: &Corpus) -> Result<EvalReport, EvalError> {
    if ab.deep.n_layers <= ab.wide.n_layers || ab.deep.d_model >= ab.wide.d_model {
        return Err(EvalError::Contract("the deep arm must have more layers and a smaller d_model than the wide arm".into()));
    }
    if ab.seeds.is_empty() {
        return Err(EvalError::Contract("wide_vs_deep needs at least one seed".into()));
    }
    let budget = ab.param_budget.unwrap_or_else(|| {
        let p = ab.wide.count_params();
        p.embedding + p.non_embedding
    });
    let wide = fit_ff_dim(&ab.wide, budget)?;
    let deep = fit_ff_dim(&ab.deep, budget)?;
    let count = |c: &ModelConfig| {
        let p = c.count_params();
        (p.embedding + p.non_embedding) as f64
    };
    let (nw, nd) = (count(&wide), count(&deep));
    let rel = (nw - nd).abs() / nw.max(nd);
    if rel > 0.01 {
        return Err(EvalError::Contract(format!("arms differ by {:.2}% in parameters (limit 1%)", rel * 100.0)));
    }
    let mut report = EvalReport::new("wide_vs_deep", ab.seeds[0], &corpus.content_hash());
    for &seed in &ab.seeds {
        let mut w = ab.train.clone();
        w.model = wide.clone();
        w.seed = seed;
        let mut d = w.clone();
        d.model = deep.clone();
        let (lw, ld) = (format!("wide/seed{seed}"), format!("deep/seed{seed}"));
        ensure_paired((&lw, &w), (&ld, &d))?;
        let (_, pw) = run_val_ppl(&w, corpus, None)?;
        let (_, pd) = run_val_ppl(&d, corpus, None)?;
        report.push(
            ArmResult::new(&lw, w.fingerprint()).with("val_ppl", pw).with("params", nw).with("layers", wide.n_layers as f64),
        )?;
        report.push(
            ArmResult::new(&ld, d.fingerprint()).with("val_ppl", pd).with("params", nd).with("layers", deep.n_layers as f64),
        )?;
        report.set_summary(&format!("seed{seed}/deep_minus_wide"), pd - pw)?;
    }
    report.set_summary("param_rel_diff", rel)?;
    Ok(report)
}

/// Inference-time window sweep on a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSweep {
    /// Windows to evaluate; empty means `[W, W/2, W/4]` of the trained window.
    #[serde(default)]
    pub windows: Vec<usize>,
}

impl WindowSweep {
    pub fn resolve(&self, trained_window: usize) -> Vec<usize> {
        if self.windows.is_empty() {
            vec![trained_window, (trained_window / 2).max(1), (trained_window / 4).max(1)]
        } else {
            self.windows.clone()
        }
    }
}

/// Perplexity and KV-cache size at each inference window. The first
/// window is the baseline for `rel_change`.
pub fn window_sweep(
    params: &ModelParams,
    chunks: &[Vec<u32>],
    windows: &[usize],
    corpus_hash: &str,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if windows.is_empty() {
        return Err(EvalError::Contract("window_sweep needs at least one window".into()));
    }
    let mut report = EvalReport::new("window_sweep", seed, corpus_hash);
    let mut baseline = None;
    let mut previous: Option<(usize, usize)> = None;
    for &w in windows {
        let view = params.view().with_window(w)?;
        let ppl = chunk_perplexity(&view, chunks)?;
        let cache = view.new_cache().capacity_floats();
        if let Some((pw, pc)) = previous {
            if w < pw && cache > pc {
                return Err(EvalError::Contract(format!("cache grew from {pc} to {cache} floats when the window shrank to {w}")));
            }
        }
        previous = Some((w, cache));
        let base = *baseline.get_or_insert(ppl);
        let mut cfg = params.config().clone();
        cfg.window_size = w;
        report.push(
            ArmResult::new(format!("window {w}"), cfg.fingerprint())
                .with("val_ppl", ppl)
                .with("cache_floats", cache as f64)
                .with("rel_change", (ppl - base) / base),
        )?;
    }
    Ok(report)
}
