use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// One arm of an experiment: its label, the hash of the exact config it ran
/// with, and its metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub label: String,
    pub fingerprint: String,
    pub metrics: BTreeMap<String, f64>,
}

impl ArmResult {
    pub fn new(label: impl Into<String>, fingerprint: impl Into<String>) -> Self {
        Self { label: label.into(), fingerprint: fingerprint.into(), metrics: BTreeMap::new() }
    }

    pub fn with(mut self, metric: &str, value: f64) -> Self {
        self.metrics.insert(metric.to_string(), value);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub seed: u64,
    pub corpus_hash: String,
    pub arms: Vec<ArmResult>,
    /// Derived cross-arm quantities such as gaps.
    pub summary: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(experiment: &str, seed: u64, corpus_hash: &str) -> Self {
        Self {
            experiment: experiment.to_string(),
            seed,
            corpus_hash: corpus_hash.to_string(),
            arms: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, arm: ArmResult) -> Result<(), EvalError> {
        if let Some((name, _)) = arm.metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(EvalError::NonFinite { arm: arm.label.clone(), metric: name.clone() });
        }
        self.arms.push(arm);
        Ok(())
    }

    pub fn set_summary(&mut self, key: &str, value: f64) -> Result<(), EvalError> {
        if !value.is_finite() {
            return Err(EvalError::NonFinite { arm: "summary".into(), metric: key.into() });
        }
        self.summary.insert(key.to_string(), value);
        Ok(())
    }

    pub fn arm(&self, label: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.label == label)
    }

    pub fn metric(&self, label: &str, metric: &str) -> Option<f64> {
        self.arm(label).and_then(|a| a.metrics.get(metric).copied())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table: one row per arm, one column per metric.
    pub fn to_table(&self) -> String {
        let mut metrics: Vec<&str> = Vec::new();
        for arm in &self.arms {
            for m in arm.metrics.keys() {
                if !metrics.contains(&m.as_str()) {
                    metrics.push(m);
                }
            }
        }
        let mut rows: Vec<Vec<String>> = vec![["arm", "fingerprint"].iter().map(|s| s.to_string()).chain(metrics.iter().map(|m| m.to_string())).collect()];
        for arm in &self.arms {
            let mut row = vec![arm.label.clone(), arm.fingerprint.clone()];
            row.extend(metrics.iter().map(|m| arm.metrics.get(*m).map_or("-".to_string(), |v| format_value(*v))));
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        let _ = writeln!(out, "{} (seed {}, corpus {})", self.experiment, self.seed, &self.corpus_hash[..self.corpus_hash.len().min(12)]);
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, s)| if c < 2 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        for (k, v) in &self.summary {
            let _ = writeln!(out, "{k}: {}", format_value(*v));
        }
        out
    }
}

fn format_value(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e6 || v.abs() < 1e-3) {
        format!("{v:.4e}")
    } else {
        format!("{v:.4}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_aligned_and_json_round_trips() {
        let mut r = EvalReport::new("demo", 3, "abcdef0123456789");
        r.push(ArmResult::new("gqa", "111").with("val_ppl", 3.5).with("tok_s", 12000.0)).unwrap();
        r.push(ArmResult::new("mha-long-label", "222").with("val_ppl", 3.25)).unwrap();
        r.set_summary("rel_gap", 0.02).unwrap();
        let table = r.to_table();
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[1].starts_with("arm") && lines[1].contains("val_ppl"));
        assert_eq!(lines[3].find("111"), lines[4].find("222"));
        assert!(table.contains("rel_gap: 0.0200"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn non_finite_metrics_are_rejected() {
        let mut r = EvalReport::new("demo", 0, "");
        assert!(r.push(ArmResult::new("a", "f").with("val_ppl", f64::NAN)).is_err());
        assert!(r.set_summary("x", f64::INFINITY).is_err());
    }
}
