use super::{LayerKind, ModelConfig, ModelError, ModelParams};
use crate::tensor::{kernels, AttentionSpec, Element, Graph, Tensor, Var};

/// Read-only handle on a set of parameters plus the local-attention window
/// used at inference. The training-time window lives in the config and is
/// never modified through a view.
#[derive(Clone, Copy, Debug)]
pub struct ModelView<'p, T: Element = f32> {
    params: &'p ModelParams<T>,
    local_window: usize,
}

/// Graph handles for every parameter of one registration.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub embedding: Var,
    pub unembedding: Option<Var>,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
    pub pre_attn_norm: Var,
    pub post_attn_norm: Var,
    pub pre_ff_norm: Var,
    pub post_ff_norm: Var,
}

impl ParamVars {
    /// Handles in canonical parameter order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for l in &self.layers {
            out.extend([
                l.wq,
                l.wk,
                l.wv,
                l.wo,
                l.w_gate,
                l.w_up,
                l.w_down,
                l.pre_attn_norm,
                l.post_attn_norm,
                l.pre_ff_norm,
                l.post_ff_norm,
            ]);
        }
        out.push(self.final_norm);
        out.extend(self.unembedding);
        out
    }
}

impl<T: Element> ModelParams<T> {
    pub fn view(&self) -> ModelView<'_, T> {
        ModelView { params: self, local_window: self.config().window_size }
    }
}

/// Returns a view whose local layers use `new_window` at inference.
pub fn set_inference_window<T: Element>(view: ModelView<'_, T>, new_window: usize) -> Result<ModelView<'_, T>, ModelError> {
    view.with_window(new_window)
}

impl<'p, T: Element> ModelView<'p, T> {
    pub fn params(&self) -> &'p ModelParams<T> {
        self.params
    }

    pub fn config(&self) -> &'p ModelConfig {
        self.params.config()
    }

    pub fn local_window(&self) -> usize {
        self.local_window
    }

    pub fn with_window(self, new_window: usize) -> Result<Self, ModelError> {
        if new_window == 0 {
            return Err(ModelError::Config("inference window must be >= 1".into()));
        }
        Ok(Self { local_window: new_window, ..self })
    }

    /// Effective span of a layer at inference.
    pub fn layer_span(&self, layer: usize) -> usize {
        let c = self.config();
        match c.layer_kind(layer) {
            LayerKind::Local => self.local_window.min(c.global_span),
            LayerKind::Global => c.global_span,
        }
    }

    pub fn register<'g>(&self, g: &mut Graph<'g, T>, trainable: bool) -> ParamVars
    where
        'p: 'g,
    {
        let p = self.params;
        let mut leaf = |t: &'p Tensor<T>| if trainable { g.param(t) } else { g.constant(t) };
        let embedding = leaf(&p.embedding);
        let layers = p
            .layers
            .iter()
            .map(|l| LayerVars {
                wq: leaf(&l.wq),
                wk: leaf(&l.wk),
                wv: leaf(&l.wv),
                wo: leaf(&l.wo),
                w_gate: leaf(&l.w_gate),
                w_up: leaf(&l.w_up),
                w_down: leaf(&l.w_down),
                pre_attn_norm: leaf(&l.pre_attn_norm),
                post_attn_norm: leaf(&l.post_attn_norm),
                pre_ff_norm: leaf(&l.pre_ff_norm),
                post_ff_norm: leaf(&l.post_ff_norm),
            })
            .collect();
        let final_norm = leaf(&p.final_norm);
        let unembedding = p.unembedding.as_ref().map(leaf);
        ParamVars { embedding, unembedding, layers, final_norm }
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        let c = self.config();
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if tokens.len() > c.global_span {
            return Err(ModelError::ContextOverflow { len: tokens.len(), span: c.global_span });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id: bad, vocab: c.vocab_size });
        }
        Ok(())
    }

    /// Records the forward pass for a batch of equal-length sequences and
    /// returns logits `[batch * len, vocab]`. When `probe` is given, the
    /// soft-capped attention scores of every layer are pushed to it as
    /// `[batch * n_heads, len, len]` (masked entries are 0).
    pub fn forward_graph<'g>(
        &self,
        g: &mut Graph<'g, T>,
        vars: &ParamVars,
        batch: &[&[u32]],
        mut probe: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Var, ModelError> {
        let c = self.config();
        let seq_len = batch.first().map_or(0, |s| s.len());
        if batch.iter().any(|s| s.len() != seq_len) {
            return Err(ModelError::Mismatch("batch sequences must share a length".into()));
        }
        for s in batch {
            self.check_tokens(s)?;
        }
        let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let mut x = g.embedding(vars.embedding, &ids)?;
        if c.scale_embeddings {
            x = g.scale(x, T::of((c.d_model as f64).sqrt()));
        }
        for (layer, lv) in vars.layers.iter().enumerate() {
            let spec = AttentionSpec {
                batch: batch.len(),
                seq_len,
                n_heads: c.n_heads,
                n_kv_heads: c.n_kv_heads,
                head_size: c.head_size,
                window: match c.layer_kind(layer) {
                    LayerKind::Local => Some(self.layer_span(layer)),
                    LayerKind::Global => None,
                },
                softcap: Some(c.attn_softcap),
                scale: 1.0 / (c.head_size as f64).sqrt(),
            };
            let h = g.rms_norm(x, lv.pre_attn_norm, c.norm_eps)?;
            let q = g.matmul(h, lv.wq)?;
            let k = g.matmul(h, lv.wk)?;
            let v = g.matmul(h, lv.wv)?;
            let q = g.rope(q, c.head_size, seq_len, c.rope_base)?;
            let k = g.rope(k, c.head_size, seq_len, c.rope_base)?;
            if let Some(out) = probe.as_deref_mut() {
                out.push(capped_scores(g.value(q), g.value(k), &spec));
            }
            let a = g.attention(q, k, v, spec)?;
            let o = g.matmul(a, lv.wo)?;
            let o = g.rms_norm(o, lv.post_attn_norm, c.norm_eps)?;
            x = g.add(x, o)?;

            let h = g.rms_norm(x, lv.pre_ff_norm, c.norm_eps)?;
            let gate = g.matmul(h, lv.w_gate)?;
            let up = g.matmul(h, lv.w_up)?;
            let f = g.geglu(gate, up)?;
            let f = g.matmul(f, lv.w_down)?;
            let f = g.rms_norm(f, lv.post_ff_norm, c.norm_eps)?;
            x = g.add(x, f)?;
        }
        let x = g.rms_norm(x, vars.final_norm, c.norm_eps)?;
        let logits = match vars.unembedding {
            Some(u) => g.matmul_ext(x, u, true)?,
            None => g.matmul_ext(x, vars.embedding, true)?,
        };
        Ok(g.soft_cap(logits, c.final_softcap)?)
    }

    /// Logits `[len, vocab]` for one sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<T>, ModelError> {
        self.forward_batch(&[tokens])
    }

    /// Logits `[batch * len, vocab]` for equal-length sequences.
    pub fn forward_batch(&self, batch: &[&[u32]]) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let out = self.forward_graph(&mut g, &vars, batch, None)?;
        Ok(g.value(out).clone())
    }

    /// Soft-capped attention scores of every layer for one sequence.
    pub fn attention_scores(&self, tokens: &[u32]) -> Result<Vec<Tensor<T>>, ModelError> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let mut probe = Vec::new();
        self.forward_graph(&mut g, &vars, &[tokens], Some(&mut probe))?;
        Ok(probe)
    }
}

fn capped_scores<T: Element>(q: &Tensor<T>, k: &Tensor<T>, spec: &AttentionSpec) -> Tensor<T> {
    let t = spec.seq_len;
    let hs = spec.head_size;
    let (hq, hk) = (spec.n_heads * hs, spec.n_kv_heads * hs);
    let group = spec.n_heads / spec.n_kv_heads;
    let cap = T::of(spec.softcap.unwrap_or(f64::INFINITY));
    let mut out = vec![T::zero(); spec.batch * spec.n_heads * t * t];
    for b in 0..spec.batch {
        for h in 0..spec.n_heads {
            for i in 0..t {
                for j in 0..t {
                    if !spec.allowed(i, j) {
                        continue;
                    }
                    let qi = &q.data()[(b * t + i) * hq + h * hs..][..hs];
                    let kj = &k.data()[(b * t + j) * hk + (h / group) * hs..][..hs];
                    let s = kernels::dot(qi, kj) * T::of(spec.scale);
                    out[((b * spec.n_heads + h) * t + i) * t + j] =
                        if spec.softcap.is_some() { kernels::soft_cap(s, cap) } else { s };
                }
            }
        }
    }
    Tensor::new(vec![spec.batch * spec.n_heads, t, t], out).expect("score shape")
}
