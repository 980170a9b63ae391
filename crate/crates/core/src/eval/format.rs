use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::FactTable;
use crate::model::ModelView;
use crate::tensor::kernels;
use crate::tokenizer;

/// A multiple-choice question answered by scoring each option as a
/// continuation of the formatted prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McItem {
    /// Sentence stem the chosen option completes.
    pub stem: String,
    pub options: Vec<String>,
    pub answer: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delimiter {
    Newline,
    Pipe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    Given,
    Reversed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Casing {
    Given,
    Lower,
    Upper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatVariant {
    pub delimiter: Delimiter,
    pub ordering: Ordering,
    pub casing: Casing,
}

/// All 2 x 2 x 3 = 12 combinations.
pub fn format_variants() -> Vec<FormatVariant> {
    let mut out = Vec::with_capacity(12);
    for delimiter in [Delimiter::Newline, Delimiter::Pipe] {
        for ordering in [Ordering::Given, Ordering::Reversed] {
            for casing in [Casing::Given, Casing::Lower, Casing::Upper] {
                out.push(FormatVariant { delimiter, ordering, casing });
            }
        }
    }
    out
}

impl FormatVariant {
    pub fn label(&self) -> String {
        format!("{:?}/{:?}/{:?}", self.delimiter, self.ordering, self.casing).to_lowercase()
    }

    fn case(&self, s: &str) -> String {
        match self.casing {
            Casing::Given => s.to_string(),
            Casing::Lower => s.to_lowercase(),
            Casing::Upper => s.to_uppercase(),
        }
    }

    /// Prompt text and one continuation per option, in the item's option
    /// order.
    pub fn render(&self, item: &McItem) -> (String, Vec<String>) {
        let d = match self.delimiter {
            Delimiter::Newline => "\n",
            Delimiter::Pipe => " | ",
        };
        let mut listed: Vec<&String> = item.options.iter().collect();
        if self.ordering == Ordering::Reversed {
            listed.reverse();
        }
        let mut prompt = String::from("Options:");
        for (i, o) in listed.iter().enumerate() {
            prompt.push_str(d);
            prompt.push((b'A' + i as u8) as char);
            prompt.push_str(". ");
            prompt.push_str(o);
        }
        prompt.push_str(d);
        prompt.push_str(&item.stem);
        let conts = item.options.iter().map(|o| self.case(&format!(" {o}."))).collect();
        (self.case(&prompt), conts)
    }
}

/// "Where does X live" questions built from a synthetic corpus's fact
/// table, each with the true city and three distinct distractors.
pub fn fact_questions(table: &FactTable, n: usize, seed: u64) -> Vec<McItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_options = 4.min(table.cities.len());
    (0..n)
        .map(|_| {
            let who = rng.random_range(0..table.names.len());
            let home = table.homes[who];
            let mut others: Vec<usize> = (0..table.cities.len()).filter(|&c| c != home).collect();
            others.shuffle(&mut rng);
            let mut picks: Vec<usize> = others.into_iter().take(n_options - 1).collect();
            let answer = rng.random_range(0..n_options);
            picks.insert(answer, home);
            McItem {
                stem: format!("{} lives in", table.names[who]),
                options: picks.iter().map(|&c| table.cities[c].clone()).collect(),
                answer,
            }
        })
        .collect()
}

/// Log-probability of `cont` after `prompt`, keeping only the most recent
/// tokens that fit the context.
fn continuation_logprob(view: &ModelView<'_>, prompt: &[u32], cont: &[u32]) -> Result<f64, EvalError> {
    let span = view.config().global_span;
    if cont.is_empty() || cont.len() >= span {
        return Err(EvalError::Contract("continuation must be non-empty and shorter than the context".into()));
    }
    let mut tokens: Vec<u32> = prompt.iter().chain(cont).copied().collect();
    if tokens.len() > span {
        tokens.drain(..tokens.len() - span);
    }
    let start = tokens.len() - cont.len();
    if start == 0 {
        return Err(EvalError::Contract("prompt is empty".into()));
    }
    let logits = view.forward(&tokens)?;
    let mut total = 0.0;
    for (j, &t) in cont.iter().enumerate() {
        let row = logits.row(start + j - 1);
        total += (row[t as usize] - kernels::log_sum_exp(row)) as f64;
    }
    Ok(total)
}

/// Accuracy on `items` under one formatting variant.
pub fn score_variant(view: &ModelView<'_>, items: &[McItem], variant: &FormatVariant) -> Result<f64, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Contract("no task items".into()));
    }
    let mut correct = 0usize;
    for item in items {
        let (prompt, conts) = variant.render(item);
        let mut prompt_ids = vec![tokenizer::BOS];
        prompt_ids.extend(tokenizer::encode_str(&prompt));
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, c) in conts.iter().enumerate() {
            let lp = continuation_logprob(view, &prompt_ids, &tokenizer::encode_str(c))?;
            if lp > best.0 {
                best = (lp, i);
            }
        }
        correct += usize::from(best.1 == item.answer);
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Sample standard deviation of the task score across formatting variants,
/// with the per-variant scores.
pub fn format_variance(
    view: &ModelView<'_>,
    items: &[McItem],
    variants: &[FormatVariant],
) -> Result<(f64, Vec<f64>), EvalError> {
    if variants.len() < 2 {
        return Err(EvalError::Contract(format!("format_variance needs at least 2 variants, got {}", variants.len())));
    }
    let scores = variants.iter().map(|v| score_variant(view, items, v)).collect::<Result<Vec<_>, _>>()?;
    let std = crate::util::sample_std(&scores).expect("at least two scores");
    Ok((std, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SyntheticSpec;

    #[test]
    fn twelve_distinct_variants() {
        let v = format_variants();
        assert_eq!(v.len(), 12);
        let labels: std::collections::BTreeSet<String> = v.iter().map(|x| x.label()).collect();
        assert_eq!(labels.len(), 12);
    }

    #[test]
    fn render_applies_each_transform() {
        let item = McItem { stem: "Bo lives in".into(), options: vec!["Ka".into(), "Ze".into()], answer: 1 };
        let base = FormatVariant { delimiter: Delimiter::Newline, ordering: Ordering::Given, casing: Casing::Given };
        let (p, c) = base.render(&item);
        assert_eq!(p, "Options:\nA. Ka\nB. Ze\nBo lives in");
        assert_eq!(c, vec![" Ka.", " Ze."]);
        let (p, c) = FormatVariant { delimiter: Delimiter::Pipe, ordering: Ordering::Reversed, casing: Casing::Upper }.render(&item);
        assert_eq!(p, "OPTIONS: | A. ZE | B. KA | BO LIVES IN");
        assert_eq!(c, vec![" KA.", " ZE."]);
    }

    #[test]
    fn questions_have_the_true_city() {
        let spec = SyntheticSpec::new(4, 10);
        let table = spec.fact_table();
        for q in fact_questions(&table, 30, 1) {
            assert_eq!(q.options.len(), 4);
            let name = q.stem.trim_end_matches(" lives in");
            let who = table.names.iter().position(|n| n == name).unwrap();
            assert_eq!(q.options[q.answer], table.cities[table.homes[who]]);
            let set: std::collections::BTreeSet<_> = q.options.iter().collect();
            assert_eq!(set.len(), 4);
        }
    }
}
