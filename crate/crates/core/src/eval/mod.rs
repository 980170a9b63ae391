//! Perplexity, paired ablation runners and format-robustness scoring.

mod ablations;
mod format;
mod report;

use thiserror::Error;

pub use ablations::{
    decode_throughput, distill_vs_scratch, fit_ff_dim, gqa_vs_mha, protocol_fingerprint, wide_vs_deep, window_sweep,
    DistillAblation, GqaAblation, NamedModel, WideDeepAblation, WindowSweep, ABLATIONS,
};
pub use format::{
    fact_questions, format_variance, format_variants, score_variant, Casing, Delimiter, FormatVariant, McItem, Ordering,
};
pub use report::{ArmResult, EvalReport};

use crate::corpus::{chunk_stream, CorpusError};
use crate::model::{ModelError, ModelView};
use crate::tensor::kernels;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Contract(String),
    #[error("arms {a} and {b} are not paired: protocol fingerprints {fa} and {fb} differ")]
    Unpaired { a: String, b: String, fa: String, fb: String },
    #[error("metric {metric} of arm {arm} is not finite")]
    NonFinite { arm: String, metric: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

const EVAL_BATCH: usize = 8;

/// Sum of next-token cross-entropy (nats) and the number of predictions
/// over chunks; chunks may differ in length.
pub fn chunk_ce_sum(view: &ModelView<'_>, chunks: &[Vec<u32>]) -> Result<(f64, usize), ModelError> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    let v = view.config().vocab_size;
    let mut start = 0;
    while start < chunks.len() {
        let len = chunks[start].len();
        let mut end = start + 1;
        while end < chunks.len() && end - start < EVAL_BATCH && chunks[end].len() == len {
            end += 1;
        }
        let group = &chunks[start..end];
        start = end;
        if len < 2 {
            continue;
        }
        let inputs: Vec<&[u32]> = group.iter().map(|c| &c[..len - 1]).collect();
        let logits = view.forward_batch(&inputs)?;
        for (row, target) in logits.data().chunks_exact(v).zip(group.iter().flat_map(|c| &c[1..])) {
            total += (kernels::log_sum_exp(row) - row[*target as usize]) as f64;
            count += 1;
        }
    }
    Ok((total, count))
}

/// `exp` of the mean teacher-forced cross-entropy over the chunks.
pub fn chunk_perplexity(view: &ModelView<'_>, chunks: &[Vec<u32>]) -> Result<f64, ModelError> {
    let (total, count) = chunk_ce_sum(view, chunks)?;
    if count == 0 {
        return Err(ModelError::EmptyInput);
    }
    Ok((total / count as f64).exp())
}

/// Perplexity of a token stream, scored in windows of `seq_len`
/// predictions; every token after the first is predicted exactly once.
pub fn perplexity(view: &ModelView<'_>, stream: &[u32], seq_len: usize) -> Result<f64, EvalError> {
    if stream.len() < 2 {
        return Err(EvalError::Contract("perplexity needs a corpus of at least two tokens".into()));
    }
    if seq_len == 0 {
        return Err(EvalError::Contract("seq_len must be positive".into()));
    }
    let mut chunks = chunk_stream(stream, seq_len);
    let covered = chunks.len() * seq_len;
    if covered + 1 < stream.len() {
        chunks.push(stream[covered..].to_vec());
    }
    Ok(chunk_perplexity(view, &chunks)?)
}
