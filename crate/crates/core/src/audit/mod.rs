//! Training-data memorization audit: sample (prompt, continuation) slices
//! uniformly over token offsets, greedy-decode from each prompt and count
//! exact and approximate (bounded edit distance) matches per source.

mod report;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use report::{MemorizationReport, Rate};

use crate::corpus::Corpus;
use crate::model::{ModelError, ModelView};
use crate::tokenizer;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("invalid audit config: {field}: {constraint}")]
    Config { field: &'static str, constraint: String },
    #[error("no document has at least {needed} tokens")]
    NoEligibleDocument { needed: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Unit of the edit distance behind approximate matching.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceUnit {
    #[default]
    Token,
    /// Bytes of the decoded text, with control tokens spelled out.
    Byte,
}

fn fifty() -> usize {
    50
}
fn tenth() -> f64 {
    0.1
}
fn thousand() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    #[serde(default = "fifty")]
    pub prompt_len: usize,
    #[serde(default = "fifty")]
    pub continuation_len: usize,
    #[serde(default = "tenth")]
    pub approx_threshold: f64,
    #[serde(default = "thousand")]
    pub sample_count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub distance: DistanceUnit,
    /// Restrict sampling to these source tags; empty means all sources.
    #[serde(default)]
    pub sources: Vec<String>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            prompt_len: 50,
            continuation_len: 50,
            approx_threshold: 0.1,
            sample_count: 1000,
            seed: 0,
            distance: DistanceUnit::Token,
            sources: Vec::new(),
        }
    }
}

impl AuditConfig {
    pub fn validate(&self, context: Option<usize>) -> Result<(), AuditError> {
        if !(self.approx_threshold > 0.0 && self.approx_threshold < 1.0) {
            return Err(AuditError::Config { field: "approx_threshold", constraint: "must lie in (0, 1)".into() });
        }
        if self.prompt_len == 0 || self.continuation_len == 0 {
            return Err(AuditError::Config { field: "prompt_len", constraint: "prompt and continuation must be non-empty".into() });
        }
        if self.sample_count == 0 {
            return Err(AuditError::Config { field: "sample_count", constraint: "must be positive".into() });
        }
        if let Some(span) = context {
            if self.prompt_len + self.continuation_len > span {
                return Err(AuditError::Config {
                    field: "prompt_len",
                    constraint: format!("prompt_len + continuation_len must not exceed the context of {span}"),
                });
            }
        }
        Ok(())
    }

    /// Largest edit distance that still counts as an approximate match.
    pub fn edit_budget(&self) -> usize {
        edit_budget(self.approx_threshold, self.continuation_len)
    }
}

/// `floor(threshold * len)`, robust to the representation error of
/// thresholds such as 0.1.
pub fn edit_budget(threshold: f64, len: usize) -> usize {
    (threshold * len as f64 + 1e-9).floor() as usize
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub document: usize,
    pub offset: usize,
    pub source: String,
    pub prompt: Vec<u32>,
    pub reference: Vec<u32>,
}

/// Draws `sample_count` slices with replacement, uniformly over every token
/// offset at which a full prompt and continuation fit inside one document.
pub fn sample_slices(corpus: &Corpus, config: &AuditConfig, seed: u64) -> Result<Vec<Slice>, AuditError> {
    config.validate(None)?;
    let needed = config.prompt_len + config.continuation_len;
    let mut docs = Vec::new();
    let mut cumulative = Vec::new();
    let mut total = 0u64;
    for (i, d) in corpus.documents.iter().enumerate() {
        if !config.sources.is_empty() && !config.sources.contains(&d.source) {
            continue;
        }
        if d.tokens.len() >= needed {
            total += (d.tokens.len() - needed + 1) as u64;
            docs.push(i);
            cumulative.push(total);
        }
    }
    if total == 0 {
        return Err(AuditError::NoEligibleDocument { needed });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..config.sample_count)
        .map(|_| {
            let u = rng.random_range(0..total);
            let k = cumulative.partition_point(|&c| c <= u);
            let before = if k == 0 { 0 } else { cumulative[k - 1] };
            let doc = &corpus.documents[docs[k]];
            let offset = (u - before) as usize;
            Slice {
                document: docs[k],
                offset,
                source: doc.source.clone(),
                prompt: doc.tokens[offset..offset + config.prompt_len].to_vec(),
                reference: doc.tokens[offset + config.prompt_len..offset + needed].to_vec(),
            }
        })
        .collect())
}

/// Number of eligible offsets in the corpus under `config`.
pub fn eligible_offsets(corpus: &Corpus, config: &AuditConfig) -> u64 {
    let needed = config.prompt_len + config.continuation_len;
    corpus
        .documents
        .iter()
        .filter(|d| config.sources.is_empty() || config.sources.contains(&d.source))
        .map(|d| d.tokens.len().saturating_sub(needed - 1) as u64)
        .sum()
}

/// Levenshtein distance with unit costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentinel that equals no real token.
const PAD: u32 = u32::MAX;

fn padded(a: &[u32], len: usize) -> Vec<u32> {
    let mut v = a.to_vec();
    v.resize(len.max(a.len()), PAD);
    v
}

/// Token-level edit distance after padding the shorter side with a sentinel
/// that matches nothing, so a missing token costs one edit.
pub fn padded_distance(generated: &[u32], reference: &[u32]) -> usize {
    let len = generated.len().max(reference.len());
    levenshtein(&padded(generated, len), &padded(reference, len))
}

/// True iff the padded token distance is at most `floor(threshold * L)`,
/// with `L` the longer of the two lengths.
pub fn approx_match(generated: &[u32], reference: &[u32], threshold: f64) -> bool {
    let len = generated.len().max(reference.len());
    padded_distance(generated, reference) <= edit_budget(threshold, len)
}

/// Byte-level variant of [`approx_match`] on the decoded text.
pub fn approx_match_bytes(generated: &[u32], reference: &[u32], threshold: f64) -> bool {
    let text = |t: &[u32]| tokenizer::decode(&t.iter().copied().filter(|&x| x != PAD).collect::<Vec<_>>(), true).unwrap_or_default();
    let (g, r) = (text(generated), text(reference));
    let len = g.len().max(r.len());
    let (mut g, mut r): (Vec<u32>, Vec<u32>) = (g.iter().map(|&b| b as u32).collect(), r.iter().map(|&b| b as u32).collect());
    g.resize(len, PAD);
    r.resize(len, PAD);
    levenshtein(&g, &r) <= edit_budget(threshold, len)
}

pub fn exact_match(generated: &[u32], reference: &[u32]) -> bool {
    generated == reference
}

/// Outcome of one audited slice.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceOutcome {
    pub document: usize,
    pub offset: usize,
    pub source: String,
    pub exact: bool,
    pub approx: bool,
    /// Generation stopped at `<eos>` before `continuation_len` tokens.
    pub short: bool,
}

/// Greedy-decodes a continuation for every sampled slice and aggregates
/// exact and approximate match rates per source.
pub fn run_audit(view: &ModelView<'_>, corpus: &Corpus, config: &AuditConfig) -> Result<MemorizationReport, AuditError> {
    config.validate(Some(view.config().global_span))?;
    let slices = sample_slices(corpus, config, config.seed)?;
    let mut outcomes = Vec::with_capacity(slices.len());
    for s in &slices {
        let mut generated = view.generate_greedy(&s.prompt, config.continuation_len, Some(tokenizer::EOS))?;
        let short = generated.last() == Some(&tokenizer::EOS) && generated.len() <= config.continuation_len;
        if short {
            generated.pop();
        }
        let exact = !short && exact_match(&generated, &s.reference);
        let approx = match config.distance {
            DistanceUnit::Token => approx_match(&generated, &s.reference, config.approx_threshold),
            DistanceUnit::Byte => approx_match_bytes(&generated, &s.reference, config.approx_threshold),
        };
        outcomes.push(SliceOutcome { document: s.document, offset: s.offset, source: s.source.clone(), exact, approx: approx || exact, short });
    }
    Ok(MemorizationReport::from_outcomes(config.clone(), corpus.content_hash(), &outcomes))
}

/// Token mass per source among documents long enough to be sampled.
pub fn source_mass(corpus: &Corpus, config: &AuditConfig) -> BTreeMap<String, u64> {
    let needed = config.prompt_len + config.continuation_len;
    let mut out = BTreeMap::new();
    for d in &corpus.documents {
        if d.tokens.len() >= needed && (config.sources.is_empty() || config.sources.contains(&d.source)) {
            *out.entry(d.source.clone()).or_insert(0) += d.tokens.len() as u64;
        }
    }
    out
}
