use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ModelConfig, ModelError};
use crate::tensor::{Element, Tensor};

const LAYER_FIELDS: [&str; 11] = [
    "attn.q",
    "attn.k",
    "attn.v",
    "attn.o",
    "ff.gate",
    "ff.up",
    "ff.down",
    "norm.pre_attn",
    "norm.post_attn",
    "norm.pre_ff",
    "norm.post_ff",
];

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T: Element = f32> {
    /// `[d_model, n_heads * head_size]`
    pub wq: Tensor<T>,
    /// `[d_model, n_kv_heads * head_size]`
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    /// `[n_heads * head_size, d_model]`
    pub wo: Tensor<T>,
    /// `[d_model, ff_dim / 2]`
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    /// `[ff_dim / 2, d_model]`
    pub w_down: Tensor<T>,
    pub pre_attn_norm: Tensor<T>,
    pub post_attn_norm: Tensor<T>,
    pub pre_ff_norm: Tensor<T>,
    pub post_ff_norm: Tensor<T>,
}

impl<T: Element> LayerParams<T> {
    fn fields(&self) -> [&Tensor<T>; 11] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
            &self.pre_attn_norm,
            &self.post_attn_norm,
            &self.pre_ff_norm,
            &self.post_ff_norm,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 11] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
            &mut self.pre_attn_norm,
            &mut self.post_attn_norm,
            &mut self.pre_ff_norm,
            &mut self.post_ff_norm,
        ]
    }

    fn from_fields(mut it: impl Iterator<Item = Tensor<T>>) -> Self {
        let mut next = || it.next().expect("eleven layer tensors");
        Self {
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            w_gate: next(),
            w_up: next(),
            w_down: next(),
            pre_attn_norm: next(),
            post_attn_norm: next(),
            pre_ff_norm: next(),
            post_ff_norm: next(),
        }
    }
}

/// All trainable tensors of a decoder. With tied embeddings the output
/// projection is `embedding^T` and `unembedding` is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Element = f32> {
    config: ModelConfig,
    /// `[vocab_size, d_model]`
    pub embedding: Tensor<T>,
    pub unembedding: Option<Tensor<T>>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    TruncatedNormal { std: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Names, shapes and initializers of every parameter, in canonical order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let d = config.d_model;
    let std = config.init_std;
    let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
    let normal = |s| Init::TruncatedNormal { std: s };
    let mut out = vec![ParamSpec { name: "embedding".into(), shape: vec![config.vocab_size, d], init: normal(std) }];
    for l in 0..config.n_layers {
        let shapes: [(Vec<usize>, Init); 11] = [
            (vec![d, config.q_dim()], normal(std)),
            (vec![d, config.kv_dim()], normal(std)),
            (vec![d, config.kv_dim()], normal(std)),
            (vec![config.q_dim(), d], normal(resid_std)),
            (vec![d, config.ff_hidden()], normal(std)),
            (vec![d, config.ff_hidden()], normal(std)),
            (vec![config.ff_hidden(), d], normal(resid_std)),
            (vec![d], Init::Zeros),
            (vec![d], Init::Zeros),
            (vec![d], Init::Zeros),
            (vec![d], Init::Zeros),
        ];
        for (field, (shape, init)) in LAYER_FIELDS.iter().zip(shapes) {
            out.push(ParamSpec { name: format!("layers.{l}.{field}"), shape, init });
        }
    }
    out.push(ParamSpec { name: "final_norm".into(), shape: vec![d], init: Init::Zeros });
    if !config.tied_embeddings {
        out.push(ParamSpec { name: "unembedding".into(), shape: vec![config.vocab_size, d], init: normal(std) });
    }
    out
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f32 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return (z * std) as f32;
        }
    }
}

/// Allocates and initializes every parameter. Identical seeds give
/// bit-identical parameters.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParams<f32>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = param_specs(config).into_iter().map(|spec| {
        let n: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::TruncatedNormal { std } => (0..n).map(|_| truncated_normal(&mut rng, std)).collect(),
        };
        (spec.name, Tensor::new(spec.shape, data).expect("spec shape matches data"))
    });
    ModelParams::from_named(config.clone(), tensors.collect())
}

impl<T: Element> ModelParams<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Assembles params from `(name, tensor)` pairs in canonical order,
    /// checking names and shapes against the config.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != tensors.len() {
            return Err(ModelError::Mismatch(format!("expected {} tensors, got {}", specs.len(), tensors.len())));
        }
        for (spec, (name, t)) in specs.iter().zip(&tensors) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(ModelError::Mismatch(format!(
                    "expected {} {:?}, got {} {:?}",
                    spec.name,
                    spec.shape,
                    name,
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter().map(|(_, t)| t);
        let embedding = it.next().expect("embedding");
        let layers = (0..config.n_layers).map(|_| LayerParams::from_fields(it.by_ref().take(11))).collect();
        let final_norm = it.next().expect("final norm");
        let unembedding = it.next();
        Ok(Self { config, embedding, unembedding, layers, final_norm })
    }

    /// Parameters with their canonical names, in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layers.{l}.{field}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        if let Some(u) = &self.unembedding {
            out.push(("unembedding".into(), u));
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.final_norm);
        if let Some(u) = &mut self.unembedding {
            out.push(u);
        }
        out
    }

    pub fn into_named(self) -> Vec<(String, Tensor<T>)> {
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        let mut tensors = vec![self.embedding];
        for layer in self.layers {
            let [a, b, c, d, e, f, g, h, i, j, k] = [
                layer.wq,
                layer.wk,
                layer.wv,
                layer.wo,
                layer.w_gate,
                layer.w_up,
                layer.w_down,
                layer.pre_attn_norm,
                layer.post_attn_norm,
                layer.pre_ff_norm,
                layer.post_ff_norm,
            ];
            tensors.extend([a, b, c, d, e, f, g, h, i, j, k]);
        }
        tensors.push(self.final_norm);
        tensors.extend(self.unembedding);
        names.into_iter().zip(tensors).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        let named = self.named().into_iter().map(|(n, t)| (n, t.cast::<U>())).collect();
        ModelParams::from_named(self.config.clone(), named).expect("cast preserves layout")
    }

    /// Replaces the config, e.g. to change `n_kv_heads` after replicating
    /// weights. The tensor layout must still match.
    pub fn with_config(self, config: ModelConfig) -> Result<Self, ModelError> {
        let named = self.into_named();
        Self::from_named(config, named)
    }
}
