//! Document corpora: newline-delimited text files tagged by source, plus a
//! seeded synthetic generator used by the experiments.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tokenizer;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub source: String,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Document>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corpus is empty")]
    Empty,
    #[error("invalid corpus spec: {0}")]
    Spec(String),
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Self {
        Self { documents }
    }

    /// One document per non-empty line of `text`.
    pub fn from_lines(source: &str, text: &[u8]) -> Self {
        let documents = text
            .split(|&b| b == b'\n')
            .filter(|l| !l.is_empty())
            .map(|l| Document { source: source.to_string(), tokens: tokenizer::encode(l) })
            .collect();
        Self { documents }
    }

    /// Loads newline-delimited documents; each file's stem is its source tag.
    pub fn load_files(paths: &[PathBuf]) -> Result<Self, CorpusError> {
        let mut documents = Vec::new();
        for path in paths {
            let bytes = fs::read(path).map_err(|e| CorpusError::Io { path: path.clone(), source: e })?;
            let source = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "unknown".into());
            documents.extend(Self::from_lines(&source, &bytes).documents);
        }
        Ok(Self { documents })
    }

    pub fn is_empty(&self) -> bool {
        self.documents.iter().all(|d| d.tokens.is_empty())
    }

    pub fn token_count(&self) -> usize {
        self.documents.iter().map(|d| d.tokens.len()).sum()
    }

    /// Tokens per source tag.
    pub fn source_mass(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for d in &self.documents {
            *out.entry(d.source.clone()).or_insert(0) += d.tokens.len();
        }
        out
    }

    /// SHA-256 over sources and tokens, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.documents {
            h.update(d.source.as_bytes());
            h.update([0u8]);
            h.update((d.tokens.len() as u64).to_le_bytes());
            for t in &d.tokens {
                h.update(t.to_le_bytes());
            }
        }
        crate::util::to_hex(&h.finalize())
    }

    /// All documents, each followed by a newline byte.
    pub fn stream(&self) -> Vec<u32> {
        stream_of(self.documents.iter())
    }

    /// Deterministic document-level split: every `round(1 / val_fraction)`-th
    /// document goes to validation. Returns `(train_stream, val_stream)`.
    pub fn split_streams(&self, val_fraction: f64) -> (Vec<u32>, Vec<u32>) {
        if val_fraction <= 0.0 {
            return (self.stream(), Vec::new());
        }
        let every = (1.0 / val_fraction).round().max(1.0) as usize;
        let (val, train): (Vec<_>, Vec<_>) = self.documents.iter().enumerate().partition(|(i, _)| i % every == every - 1);
        (stream_of(train.into_iter().map(|(_, d)| d)), stream_of(val.into_iter().map(|(_, d)| d)))
    }
}

fn stream_of<'a>(docs: impl Iterator<Item = &'a Document>) -> Vec<u32> {
    let mut out = Vec::new();
    for d in docs {
        out.extend_from_slice(&d.tokens);
        out.push(b'\n' as u32);
    }
    out
}

/// Cuts a stream into windows of `seq_len + 1` tokens with stride `seq_len`,
/// so each token after the first is a prediction target exactly once.
pub fn chunk_stream(stream: &[u32], seq_len: usize) -> Vec<Vec<u32>> {
    if seq_len == 0 || stream.len() < seq_len + 1 {
        return Vec::new();
    }
    (0..(stream.len() - 1) / seq_len).map(|c| stream[c * seq_len..c * seq_len + seq_len + 1].to_vec()).collect()
}

/// Where a corpus comes from, as written in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSpec {
    Files { paths: Vec<PathBuf> },
    Synthetic(SyntheticSpec),
}

impl CorpusSpec {
    /// Relative file paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Corpus, CorpusError> {
        let corpus = match self {
            CorpusSpec::Files { paths } => {
                let resolved: Vec<PathBuf> = paths.iter().map(|p| if p.is_absolute() { p.clone() } else { base.join(p) }).collect();
                Corpus::load_files(&resolved)?
            }
            CorpusSpec::Synthetic(spec) => spec.generate()?,
        };
        if corpus.is_empty() {
            return Err(CorpusError::Empty);
        }
        Ok(corpus)
    }
}

fn default_copies() -> usize {
    100
}
fn default_canary_len() -> usize {
    200
}

/// A random string planted verbatim `copies` times under source `canary`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanarySpec {
    #[serde(default = "default_canary_len")]
    pub length: usize,
    #[serde(default = "default_copies")]
    pub copies: usize,
}

/// Seeded generator of English-like prose, fact lists and code snippets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub documents: usize,
    #[serde(default)]
    pub canary: Option<CanarySpec>,
    /// Generate only uniformly random printable documents of this length.
    #[serde(default)]
    pub random_bytes: Option<usize>,
}

impl SyntheticSpec {
    pub fn new(seed: u64, documents: usize) -> Self {
        Self { seed, documents, canary: None, random_bytes: None }
    }

    pub fn generate(&self) -> Result<Corpus, CorpusError> {
        if self.documents == 0 && self.canary.is_none() {
            return Err(CorpusError::Spec("synthetic corpus needs documents or a canary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut documents = Vec::with_capacity(self.documents);
        if let Some(len) = self.random_bytes {
            for _ in 0..self.documents {
                let text: Vec<u8> = (0..len).map(|_| rng.random_range(0x20u8..0x7f)).collect();
                documents.push(Document { source: "random".into(), tokens: tokenizer::encode(&text) });
            }
        } else {
            let lex = self.lexicon();
            for _ in 0..self.documents {
                let roll: f64 = rng.random();
                let (source, text) = if roll < 0.6 {
                    ("prose", lex.prose(&mut rng))
                } else if roll < 0.85 {
                    ("facts", lex.facts(&mut rng))
                } else {
                    ("code", lex.code(&mut rng))
                };
                documents.push(Document { source: source.into(), tokens: tokenizer::encode_str(&text) });
            }
        }
        if let Some(c) = &self.canary {
            if c.length == 0 || c.copies == 0 {
                return Err(CorpusError::Spec("canary length and copies must be positive".into()));
            }
            let mut crng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xca4a_7a11);
            const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
            let text: Vec<u8> = (0..c.length).map(|_| *ALPHABET.choose(&mut crng).expect("alphabet")).collect();
            // Spread copies through the corpus at deterministic positions.
            for k in 0..c.copies {
                let at = if documents.is_empty() { 0 } else { (k * 7919 + 13) % (documents.len() + 1) };
                documents.insert(at, Document { source: "canary".into(), tokens: tokenizer::encode(&text) });
            }
        }
        Ok(Corpus { documents })
    }
}

/// Who lives where, as stated by the `facts` documents of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactTable {
    pub names: Vec<String>,
    pub cities: Vec<String>,
    /// `homes[i]` indexes the city of `names[i]`.
    pub homes: Vec<usize>,
}

impl SyntheticSpec {
    fn lexicon(&self) -> Lexicon {
        Lexicon::new(&mut ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_1e71_c0de))
    }

    pub fn fact_table(&self) -> FactTable {
        let lex = self.lexicon();
        FactTable { homes: lex.facts.iter().map(|f| f.0).collect(), names: lex.names, cities: lex.cities }
    }
}

struct Topic {
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjs: Vec<String>,
}

struct Lexicon {
    topics: Vec<Topic>,
    names: Vec<String>,
    cities: Vec<String>,
    /// name index -> (city index, liked noun, age)
    facts: Vec<(usize, String, u32)>,
}

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    const CONS: &[u8] = b"bdfgklmnprstvz";
    const VOW: &[u8] = b"aeiou";
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*CONS.choose(rng).expect("consonant") as char);
        w.push(*VOW.choose(rng).expect("vowel") as char);
        if rng.random_bool(0.3) {
            w.push(*CONS.choose(rng).expect("consonant") as char);
        }
    }
    w
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

/// Zipf-like pick: index `i` has weight `1 / (i + 1)`.
fn zipf<'a>(rng: &mut ChaCha8Rng, items: &'a [String]) -> &'a str {
    let total: f64 = (1..=items.len()).map(|i| 1.0 / i as f64).sum();
    let mut x = rng.random::<f64>() * total;
    for (i, it) in items.iter().enumerate() {
        x -= 1.0 / (i + 1) as f64;
        if x <= 0.0 {
            return it;
        }
    }
    items.last().expect("non-empty word list")
}

impl Lexicon {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let words = |n: usize, rng: &mut ChaCha8Rng| -> Vec<String> {
            (0..n).map(|_| {
                let syl = rng.random_range(1..=3);
                pseudo_word(rng, syl)
            }).collect()
        };
        let topics = (0..6)
            .map(|_| Topic { nouns: words(24, rng), verbs: words(14, rng), adjs: words(12, rng) })
            .collect::<Vec<_>>();
        // Names and cities must be distinct so facts are unambiguous.
        let distinct = |n: usize, rng: &mut ChaCha8Rng| -> Vec<String> {
            let mut out: Vec<String> = Vec::with_capacity(n);
            while out.len() < n {
                let syl = rng.random_range(2..=3);
                let w = capitalize(&pseudo_word(rng, syl));
                if !out.contains(&w) {
                    out.push(w);
                }
            }
            out
        };
        let names = distinct(40, rng);
        let cities = distinct(24, rng);
        let facts = (0..names.len())
            .map(|_| {
                let t = &topics[rng.random_range(0..topics.len())];
                (rng.random_range(0..cities.len()), t.nouns[rng.random_range(0..t.nouns.len())].clone(), rng.random_range(18..90))
            })
            .collect();
        Self { topics, names, cities, facts }
    }

    fn prose(&self, rng: &mut ChaCha8Rng) -> String {
        let home = rng.random_range(0..self.topics.len());
        let sentences = rng.random_range(3..=7);
        let mut out = Vec::with_capacity(sentences);
        for _ in 0..sentences {
            let mut topic = || {
                if rng.random_bool(0.85) {
                    &self.topics[home]
                } else {
                    &self.topics[rng.random_range(0..self.topics.len())]
                }
            };
            let (t1, t2, t3) = (topic(), topic(), topic());
            let name = zipf(rng, &self.names);
            let s = match rng.random_range(0..5) {
                0 => format!("the {} {} {}s the {}.", zipf(rng, &t1.adjs), zipf(rng, &t1.nouns), zipf(rng, &t2.verbs), zipf(rng, &t3.nouns)),
                1 => format!("a {} {}s near the {} {}.", zipf(rng, &t1.nouns), zipf(rng, &t1.verbs), zipf(rng, &t2.adjs), zipf(rng, &t3.nouns)),
                2 => format!("{} {}s the {} and the {}.", name, zipf(rng, &t1.verbs), zipf(rng, &t2.nouns), zipf(rng, &t3.nouns)),
                3 => format!("every {} is {}.", zipf(rng, &t1.nouns), zipf(rng, &t2.adjs)),
                _ => format!("the {} was {}, so {} {}s it.", zipf(rng, &t1.nouns), zipf(rng, &t1.adjs), name, zipf(rng, &t2.verbs)),
            };
            out.push(s);
        }
        out.join(" ")
    }

    fn facts(&self, rng: &mut ChaCha8Rng) -> String {
        let n = rng.random_range(3..=6);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let who = rng.random_range(0..self.names.len());
            let (city, noun, age) = &self.facts[who];
            let name = &self.names[who];
            out.push(match rng.random_range(0..3) {
                0 => format!("{name} lives in {}.", self.cities[*city]),
                1 => format!("{name} likes the {noun}."),
                _ => format!("{name} is {age} years old."),
            });
        }
        out.join(" ")
    }

    fn code(&self, rng: &mut ChaCha8Rng) -> String {
        let n = rng.random_range(2..=4);
        let ops = ["+", "-", "*"];
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let t = &self.topics[rng.random_range(0..self.topics.len())];
            let op1 = ops.choose(rng).expect("op");
            let op2 = ops.choose(rng).expect("op");
            out.push(format!(
                "fn {}_{}(x, y) {{ let z = x {op1} y; return z {op2} {}; }}",
                zipf(rng, &t.verbs),
                zipf(rng, &t.nouns),
                rng.random_range(0..10)
            ));
        }
        out.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_tagged() {
        let a = SyntheticSpec::new(3, 200).generate().unwrap();
        let b = SyntheticSpec::new(3, 200).generate().unwrap();
        assert_eq!(a, b);
        assert_ne!(a.content_hash(), SyntheticSpec::new(4, 200).generate().unwrap().content_hash());
        let mass = a.source_mass();
        assert!(mass.contains_key("prose") && mass.contains_key("facts") && mass.contains_key("code"));
        assert!(a.documents.iter().all(|d| !d.tokens.contains(&(b'\n' as u32))));
    }

    #[test]
    fn canary_copies_are_identical() {
        let spec = SyntheticSpec { canary: Some(CanarySpec { length: 200, copies: 100 }), ..SyntheticSpec::new(1, 50) };
        let c = spec.generate().unwrap();
        let canaries: Vec<_> = c.documents.iter().filter(|d| d.source == "canary").collect();
        assert_eq!(canaries.len(), 100);
        assert!(canaries.iter().all(|d| d.tokens == canaries[0].tokens && d.tokens.len() == 200));
    }

    #[test]
    fn chunks_cover_each_target_once() {
        let stream: Vec<u32> = (0..25).collect();
        let chunks = chunk_stream(&stream, 8);
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[1][0], 8);
        assert_eq!(chunks[2].len(), 9);
        assert!(chunk_stream(&stream[..5], 8).is_empty());
    }

    #[test]
    fn split_streams_partitions_documents() {
        let c = SyntheticSpec::new(9, 100).generate().unwrap();
        let (train, val) = c.split_streams(0.1);
        assert_eq!(train.len() + val.len(), c.stream().len());
        assert_eq!(val.iter().filter(|&&t| t == b'\n' as u32).count(), 10);
    }

    #[test]
    fn from_lines_skips_blank_lines() {
        let c = Corpus::from_lines("web", b"one\n\ntwo\n");
        assert_eq!(c.documents.len(), 2);
        assert_eq!(c.documents[1].source, "web");
    }
}
