use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{AuditConfig, SliceOutcome};

/// Integer counts behind a match rate, so reports stay exact.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub exact: u64,
    pub approx: u64,
    pub short: u64,
    pub total: u64,
}

impl Rate {
    pub fn exact_rate(&self) -> f64 {
        ratio(self.exact, self.total)
    }

    pub fn approx_rate(&self) -> f64 {
        ratio(self.approx, self.total)
    }

    fn add(&mut self, o: &SliceOutcome) {
        self.total += 1;
        self.exact += u64::from(o.exact);
        self.approx += u64::from(o.approx);
        self.short += u64::from(o.short);
    }
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub config: AuditConfig,
    pub corpus_hash: String,
    pub overall: Rate,
    pub per_source: BTreeMap<String, Rate>,
    /// Positions of the slices reproduced exactly, for inspection.
    pub exact_hits: Vec<(usize, usize)>,
}

impl MemorizationReport {
    pub fn from_outcomes(config: AuditConfig, corpus_hash: String, outcomes: &[SliceOutcome]) -> Self {
        let mut overall = Rate::default();
        let mut per_source: BTreeMap<String, Rate> = BTreeMap::new();
        let mut exact_hits = Vec::new();
        for o in outcomes {
            overall.add(o);
            per_source.entry(o.source.clone()).or_default().add(o);
            if o.exact {
                exact_hits.push((o.document, o.offset));
            }
        }
        Self { config, corpus_hash, overall, per_source, exact_hits }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Two panels: rates per source, then exact vs approximate overall.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let width = self.per_source.keys().map(String::len).max().unwrap_or(0).max(7);
        let _ = writeln!(
            s,
            "memorization audit: {} slices, prompt {} / continuation {}, approx <= {} edits",
            self.overall.total,
            self.config.prompt_len,
            self.config.continuation_len,
            self.config.edit_budget()
        );
        let _ = writeln!(s, "\n{:<width$}  {:>8}  {:>9}  {:>9}", "source", "samples", "exact %", "approx %");
        for (name, r) in self.per_source.iter().chain(std::iter::once((&"overall".to_string(), &self.overall))) {
            let _ = writeln!(
                s,
                "{:<width$}  {:>8}  {:>9.3}  {:>9.3}",
                name,
                r.total,
                100.0 * r.exact_rate(),
                100.0 * r.approx_rate()
            );
        }
        let _ = writeln!(s, "\nexact vs approximate (overall)");
        let bar = |f: f64| "#".repeat((f * 40.0).round() as usize);
        let _ = writeln!(s, "  exact   {:>7.3}% |{}", 100.0 * self.overall.exact_rate(), bar(self.overall.exact_rate()));
        let _ = writeln!(s, "  approx  {:>7.3}% |{}", 100.0 * self.overall.approx_rate(), bar(self.overall.approx_rate()));
        if self.overall.short > 0 {
            let _ = writeln!(s, "  {} generations ended at <eos> early and count as non-matches", self.overall.short);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(source: &str, exact: bool, approx: bool) -> SliceOutcome {
        SliceOutcome { document: 0, offset: 0, source: source.into(), exact, approx, short: false }
    }

    #[test]
    fn counts_aggregate_per_source() {
        let r = MemorizationReport::from_outcomes(
            AuditConfig::default(),
            "h".into(),
            &[outcome("a", true, true), outcome("a", false, true), outcome("b", false, false)],
        );
        assert_eq!(r.overall, Rate { exact: 1, approx: 2, short: 0, total: 3 });
        assert_eq!(r.per_source["a"].total, 2);
        assert_eq!(r.per_source["b"].approx, 0);
        let back: MemorizationReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.summary().contains("overall"));
    }
}
