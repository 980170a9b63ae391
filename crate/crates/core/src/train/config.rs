use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Ce,
    Distill,
    Mix,
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}

/// Training objective. `lambda` weighs distillation against next-token
/// cross-entropy and only matters for `mix`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub mode: LossMode,
    #[serde(default = "half")]
    pub lambda: f64,
    /// Teacher checkpoint path; required iff `mode` is not `ce`.
    #[serde(default)]
    pub teacher: Option<PathBuf>,
    #[serde(default = "one")]
    pub temperature: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::ce()
    }
}

impl LossSpec {
    pub fn ce() -> Self {
        Self { mode: LossMode::Ce, lambda: 0.5, teacher: None, temperature: 1.0 }
    }

    pub fn distill() -> Self {
        Self { mode: LossMode::Distill, ..Self::ce() }
    }

    pub fn mix(lambda: f64) -> Self {
        Self { mode: LossMode::Mix, lambda, ..Self::ce() }
    }

    /// Weight on the distillation term.
    pub fn distill_weight(&self) -> f64 {
        match self.mode {
            LossMode::Ce => 0.0,
            LossMode::Distill => 1.0,
            LossMode::Mix => self.lambda,
        }
    }

    pub fn needs_teacher(&self) -> bool {
        self.mode != LossMode::Ce
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TrainError::config("loss.lambda", "must lie in [0, 1]"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(TrainError::config("loss.temperature", "must be positive and finite"));
        }
        Ok(())
    }

    /// Checks the teacher-path rule for file-driven runs.
    pub fn validate_teacher_path(&self) -> Result<(), TrainError> {
        match (self.needs_teacher(), &self.teacher) {
            (true, None) => Err(TrainError::config("loss.teacher", "required when mode is distill or mix")),
            (false, Some(_)) => Err(TrainError::config("loss.teacher", "only allowed when mode is distill or mix")),
            _ => Ok(()),
        }
    }
}

fn d_peak_lr() -> f64 {
    3e-3
}
fn d_warmup() -> usize {
    100
}
fn d_min_lr_ratio() -> f64 {
    0.1
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.95
}
fn d_eps() -> f64 {
    1e-8
}
fn d_clip() -> f64 {
    1.0
}
fn d_batch() -> usize {
    4
}
fn d_seq() -> usize {
    64
}
fn d_val_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup_steps: usize,
    /// Floor of the cosine decay as a fraction of `peak_lr`.
    #[serde(default = "d_min_lr_ratio")]
    pub min_lr_ratio: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Decoupled decay applied to matrices only.
    #[serde(default)]
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    /// Sequences per step.
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_seq")]
    pub seq_len: usize,
    #[serde(default)]
    pub loss: LossSpec,
    /// Validation interval in steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: usize,
    /// Cap on validation chunks; 0 uses all of them.
    #[serde(default)]
    pub eval_chunks: usize,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "d_val_fraction")]
    pub val_fraction: f64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, steps: usize) -> Self {
        Self {
            model,
            steps,
            seed: 0,
            peak_lr: d_peak_lr(),
            warmup_steps: d_warmup().min(steps),
            min_lr_ratio: d_min_lr_ratio(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: 0.0,
            grad_clip: d_clip(),
            batch_size: d_batch(),
            seq_len: d_seq(),
            loss: LossSpec::ce(),
            eval_every: 0,
            eval_chunks: 0,
            checkpoint_every: 0,
            val_fraction: d_val_fraction(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate().map_err(|e| TrainError::config("model", e.to_string()))?;
        let err = |f: &str, c: &str| Err(TrainError::config(f, c));
        if self.warmup_steps > self.steps {
            return err("warmup_steps", "must not exceed steps");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive");
        }
        if self.seq_len == 0 {
            return err("seq_len", "must be positive");
        }
        if self.seq_len > self.model.global_span {
            return err("seq_len", "must not exceed model.global_span");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return err("peak_lr", "must be positive and finite");
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return err("min_lr_ratio", "must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return err("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return err("beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return err("eps", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return err("weight_decay", "must be non-negative");
        }
        if !(self.grad_clip >= 0.0) {
            return err("grad_clip", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return err("val_fraction", "must lie in [0, 1)");
        }
        self.loss.validate()
    }

    /// Short hash of the fully materialized config.
    pub fn fingerprint(&self) -> String {
        crate::util::short_hash(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig::new(ModelConfig::toy(), 10)
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = cfg();
        c.warmup_steps = 11;
        assert!(c.validate().unwrap_err().to_string().contains("warmup_steps"));
        let mut c = cfg();
        c.batch_size = 0;
        assert!(c.validate().unwrap_err().to_string().contains("batch_size"));
        let mut c = cfg();
        c.loss = LossSpec::mix(1.5);
        assert!(c.validate().unwrap_err().to_string().contains("loss.lambda"));
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn teacher_required_iff_not_ce() {
        assert!(LossSpec::distill().validate_teacher_path().is_err());
        assert!(LossSpec::ce().validate_teacher_path().is_ok());
        let mut ce = LossSpec::ce();
        ce.teacher = Some("t.ckpt".into());
        assert!(ce.validate_teacher_path().is_err());
    }

    #[test]
    fn json_defaults_materialize() {
        let json = serde_json::json!({ "model": ModelConfig::toy(), "steps": 5, "warmup_steps": 0 });
        let c: TrainConfig = serde_json::from_value(json).unwrap();
        assert_eq!(c.beta2, 0.95);
        assert_eq!(c.loss.temperature, 1.0);
        let bad = serde_json::json!({ "model": ModelConfig::toy(), "steps": 5, "bogus": 1 });
        assert!(serde_json::from_value::<TrainConfig>(bad).is_err());
    }
}
