use serde::{Deserialize, Serialize};

use super::ModelError;

/// Attention flavour of a decoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Sliding-window attention over the most recent `window_size` positions.
    Local,
    /// Causal attention over the whole `global_span`.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPattern {
    /// Local and global layers alternate, starting with `first_layer_kind`.
    Alternating,
    AllGlobal,
    AllLocal,
}

/// RMSNorm gain convention. Only `(1 + weight)` is implemented; it is kept in
/// the config so dumps state it explicitly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormGain {
    OnePlusWeight,
}

fn default_attn_softcap() -> f64 {
    50.0
}
fn default_final_softcap() -> f64 {
    30.0
}
fn default_rope_base() -> f64 {
    10_000.0
}
fn default_true() -> bool {
    true
}
fn default_pattern() -> LayerPattern {
    LayerPattern::Alternating
}
fn default_first() -> LayerKind {
    LayerKind::Local
}
fn default_eps() -> f64 {
    1e-6
}
fn default_gain() -> NormGain {
    NormGain::OnePlusWeight
}
fn default_init_std() -> f64 {
    0.02
}

/// Every architectural hyperparameter of the decoder.
///
/// `ff_dim` follows the concatenated gate+up convention: the GeGLU hidden
/// width is `ff_dim / 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_size: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    /// Local-attention span used in training.
    pub window_size: usize,
    /// Maximum context for global layers, and the longest accepted input.
    pub global_span: usize,
    #[serde(default = "default_attn_softcap")]
    pub attn_softcap: f64,
    #[serde(default = "default_final_softcap")]
    pub final_softcap: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_true")]
    pub tied_embeddings: bool,
    #[serde(default = "default_pattern")]
    pub layer_pattern: LayerPattern,
    #[serde(default = "default_first")]
    pub first_layer_kind: LayerKind,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_gain")]
    pub norm_gain: NormGain,
    /// Multiply input embeddings by `sqrt(d_model)`.
    #[serde(default = "default_true")]
    pub scale_embeddings: bool,
    /// Std of the truncated-normal initializer; residual output projections
    /// use `init_std / sqrt(2 * n_layers)`.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

/// Embedding / non-embedding parameter split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub embedding: u64,
    pub non_embedding: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.embedding + self.non_embedding
    }
}

impl ModelConfig {
    /// Named full-size presets: `"2B"`, `"9B"`, `"27B"`.
    pub fn preset(name: &str) -> Option<Self> {
        let (d_model, n_layers, n_heads, n_kv_heads, head_size, ff_dim) = match name {
            "2B" => (2304, 26, 8, 4, 256, 18432),
            "9B" => (3584, 42, 16, 8, 256, 28672),
            "27B" => (4608, 46, 32, 16, 128, 73728),
            _ => return None,
        };
        Some(Self {
            d_model,
            n_layers,
            n_heads,
            n_kv_heads,
            head_size,
            ff_dim,
            vocab_size: 256_128,
            window_size: 4096,
            global_span: 8192,
            ..Self::toy()
        })
    }

    /// Small config for smoke tests (vocab fits the byte tokenizer).
    pub fn toy() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: 2,
            head_size: 16,
            ff_dim: 512,
            vocab_size: crate::tokenizer::VOCAB_SIZE,
            window_size: 16,
            global_span: 64,
            attn_softcap: default_attn_softcap(),
            final_softcap: default_final_softcap(),
            rope_base: default_rope_base(),
            tied_embeddings: true,
            layer_pattern: LayerPattern::Alternating,
            first_layer_kind: LayerKind::Local,
            norm_eps: default_eps(),
            norm_gain: NormGain::OnePlusWeight,
            scale_embeddings: true,
            init_std: default_init_std(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_size", self.head_size),
            ("ff_dim", self.ff_dim),
            ("vocab_size", self.vocab_size),
            ("window_size", self.window_size),
            ("global_span", self.global_span),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return bad(format!(
                "n_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.window_size > self.global_span {
            return bad(format!(
                "window_size ({}) must not exceed global_span ({})",
                self.window_size, self.global_span
            ));
        }
        if self.head_size % 2 != 0 {
            return bad(format!("head_size ({}) must be even for rotary embeddings", self.head_size));
        }
        if self.ff_dim % 2 != 0 {
            return bad(format!("ff_dim ({}) must be even (gate and up halves)", self.ff_dim));
        }
        for (name, v) in [
            ("attn_softcap", self.attn_softcap),
            ("final_softcap", self.final_softcap),
            ("rope_base", self.rope_base),
            ("init_std", self.init_std),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return bad(format!("norm_eps must be non-negative, got {}", self.norm_eps));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn ff_hidden(&self) -> usize {
        self.ff_dim / 2
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.head_size
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_size
    }

    pub fn layer_kind(&self, layer: usize) -> LayerKind {
        match self.layer_pattern {
            LayerPattern::AllGlobal => LayerKind::Global,
            LayerPattern::AllLocal => LayerKind::Local,
            LayerPattern::Alternating => {
                if layer % 2 == 0 {
                    self.first_layer_kind
                } else {
                    match self.first_layer_kind {
                        LayerKind::Local => LayerKind::Global,
                        LayerKind::Global => LayerKind::Local,
                    }
                }
            }
        }
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        (0..self.n_layers).map(|l| self.layer_kind(l)).collect()
    }

    /// Closed-form parameter count.
    pub fn count_params(&self) -> ParamCount {
        let d = self.d_model as u64;
        let hs = self.head_size as u64;
        let attn = d * (2 * self.n_heads as u64 * hs + 2 * self.n_kv_heads as u64 * hs);
        let ff = 3 * d * self.ff_hidden() as u64;
        let per_layer = attn + ff + 4 * d;
        let tables = if self.tied_embeddings { 1 } else { 2 };
        ParamCount {
            embedding: tables * self.vocab_size as u64 * d,
            non_embedding: self.n_layers as u64 * per_layer + d,
        }
    }

    /// Short stable hash of the serialized config.
    pub fn fingerprint(&self) -> String {
        crate::util::short_hash(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Free-function form of [`ModelConfig::count_params`].
pub fn count_params(config: &ModelConfig) -> ParamCount {
    config.count_params()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_reproduce_published_counts() {
        let want = [
            ("2B", 590_118_912, 2_024_517_888),
            ("9B", 917_962_752, 8_324_201_984),
            ("27B", 1_180_237_824, 26_047_480_320),
        ];
        for (name, emb, non_emb) in want {
            let c = ModelConfig::preset(name).unwrap();
            c.validate().unwrap();
            assert_eq!(count_params(&c), ParamCount { embedding: emb, non_embedding: non_emb }, "{name}");
        }
    }

    #[test]
    fn invalid_configs_name_the_violation() {
        let mut c = ModelConfig::toy();
        c.n_kv_heads = 3;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("n_kv_heads"), "{msg}");

        let mut c = ModelConfig::toy();
        c.window_size = c.global_span + 1;
        assert!(c.validate().unwrap_err().to_string().contains("window_size"));

        let mut c = ModelConfig::toy();
        c.head_size = 15;
        assert!(c.validate().unwrap_err().to_string().contains("head_size"));
    }

    #[test]
    fn alternation_splits_layers() {
        for n in 1..10 {
            let mut c = ModelConfig::toy();
            c.n_layers = n;
            let kinds = c.layer_kinds();
            let local = kinds.iter().filter(|k| **k == LayerKind::Local).count();
            assert_eq!(local, n.div_ceil(2));
            assert_eq!(kinds.len() - local, n / 2);
            assert_eq!(kinds[0], LayerKind::Local);
            c.first_layer_kind = LayerKind::Global;
            let global = c.layer_kinds().iter().filter(|k| **k == LayerKind::Global).count();
            assert_eq!(global, n.div_ceil(2));
        }
    }

    #[test]
    fn untied_embeddings_double_the_table() {
        let mut c = ModelConfig::toy();
        let tied = c.count_params();
        c.tied_embeddings = false;
        assert_eq!(c.count_params().embedding, 2 * tied.embedding);
    }

    #[test]
    fn config_round_trips_with_defaults_materialized() {
        let json = r#"{"d_model":8,"n_layers":2,"n_heads":2,"n_kv_heads":1,"head_size":4,
            "ff_dim":16,"vocab_size":261,"window_size":4,"global_span":8}"#;
        let c: ModelConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.attn_softcap, 50.0);
        assert_eq!(c.final_softcap, 30.0);
        assert_eq!(c.first_layer_kind, LayerKind::Local);
        let back: ModelConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
