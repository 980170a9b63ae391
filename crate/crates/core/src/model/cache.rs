use super::{ModelError, ModelView};
use crate::tensor::{kernels, Element, Tensor};

/// Ring buffer of post-rotary keys and values for one layer.
#[derive(Clone, Debug)]
struct LayerCache<T> {
    capacity: usize,
    kv_dim: usize,
    keys: Vec<T>,
    values: Vec<T>,
}

/// Per-layer key/value cache for incremental decoding. Local layers keep at
/// most their window of positions; global layers keep up to `global_span`.
#[derive(Clone, Debug)]
pub struct KvCache<T: Element = f32> {
    layers: Vec<LayerCache<T>>,
    position: usize,
    global_span: usize,
}

impl<T: Element> KvCache<T> {
    /// Empty cache sized for `view` (its inference window included).
    pub fn new(view: &ModelView<'_, T>) -> Self {
        let c = view.config();
        let layers = (0..c.n_layers)
            .map(|l| {
                let capacity = view.layer_span(l);
                LayerCache {
                    capacity,
                    kv_dim: c.kv_dim(),
                    keys: vec![T::zero(); capacity * c.kv_dim()],
                    values: vec![T::zero(); capacity * c.kv_dim()],
                }
            })
            .collect();
        Self { layers, position: 0, global_span: c.global_span }
    }

    /// Number of positions decoded so far.
    pub fn position(&self) -> usize {
        self.position
    }

    /// Positions currently held by `layer`.
    pub fn layer_len(&self, layer: usize) -> usize {
        self.position.min(self.layers[layer].capacity)
    }

    pub fn layer_capacity(&self, layer: usize) -> usize {
        self.layers[layer].capacity
    }

    /// Total floats reserved for keys and values across layers.
    pub fn capacity_floats(&self) -> usize {
        self.layers.iter().map(|l| 2 * l.capacity * l.kv_dim).sum()
    }

    pub fn reset(&mut self) {
        self.position = 0;
    }

    fn check(&self, view: &ModelView<'_, T>) -> Result<(), ModelError> {
        let c = view.config();
        if self.layers.len() != c.n_layers || self.global_span != c.global_span {
            return Err(ModelError::CacheMismatch(format!(
                "cache has {} layers, model has {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        for (l, lc) in self.layers.iter().enumerate() {
            if lc.capacity != view.layer_span(l) || lc.kv_dim != c.kv_dim() {
                return Err(ModelError::CacheMismatch(format!(
                    "layer {l}: cache capacity {} x {} but view expects {} x {}",
                    lc.capacity,
                    lc.kv_dim,
                    view.layer_span(l),
                    c.kv_dim()
                )));
            }
        }
        Ok(())
    }
}

struct Scratch<T> {
    h: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    attn: Vec<T>,
    o: Vec<T>,
    normed: Vec<T>,
    gate: Vec<T>,
    up: Vec<T>,
    scores: Vec<T>,
}

impl<'p, T: Element> ModelView<'p, T> {
    pub fn new_cache(&self) -> KvCache<T> {
        KvCache::new(self)
    }

    /// Decodes one token against `cache` and returns its next-token logits.
    pub fn forward_cached(&self, cache: &mut KvCache<T>, token: u32) -> Result<Tensor<T>, ModelError> {
        cache.check(self)?;
        let c = self.config();
        if token as usize >= c.vocab_size {
            return Err(ModelError::TokenOutOfRange { id: token, vocab: c.vocab_size });
        }
        let pos = cache.position;
        if pos >= c.global_span {
            return Err(ModelError::ContextOverflow { len: pos + 1, span: c.global_span });
        }
        let p = self.params();
        let d = c.d_model;
        let hs = c.head_size;
        let kv_dim = c.kv_dim();
        let group = c.group_size();
        let eps = T::of(c.norm_eps);
        let scale = T::of(1.0 / (hs as f64).sqrt());
        let cap = T::of(c.attn_softcap);
        let mut x = p.embedding.row(token as usize).to_vec();
        if c.scale_embeddings {
            let s = T::of((d as f64).sqrt());
            x.iter_mut().for_each(|v| *v = *v * s);
        }
        let mut s = Scratch {
            h: vec![T::zero(); d],
            q: vec![T::zero(); c.q_dim()],
            k: vec![T::zero(); kv_dim],
            v: vec![T::zero(); kv_dim],
            attn: vec![T::zero(); c.q_dim()],
            o: vec![T::zero(); d],
            normed: vec![T::zero(); d],
            gate: vec![T::zero(); c.ff_hidden()],
            up: vec![T::zero(); c.ff_hidden()],
            scores: Vec::new(),
        };
        for (l, lp) in p.layers.iter().enumerate() {
            kernels::rms_norm_row(&x, lp.pre_attn_norm.data(), eps, &mut s.h);
            kernels::vec_mat(&s.h, lp.wq.data(), &mut s.q);
            kernels::vec_mat(&s.h, lp.wk.data(), &mut s.k);
            kernels::vec_mat(&s.h, lp.wv.data(), &mut s.v);
            kernels::rope_row(&mut s.q, hs, pos, c.rope_base, 1.0);
            kernels::rope_row(&mut s.k, hs, pos, c.rope_base, 1.0);

            let lc = &mut cache.layers[l];
            let slot = pos % lc.capacity;
            lc.keys[slot * kv_dim..(slot + 1) * kv_dim].copy_from_slice(&s.k);
            lc.values[slot * kv_dim..(slot + 1) * kv_dim].copy_from_slice(&s.v);
            let held = (pos + 1).min(lc.capacity);
            let first = pos + 1 - held;
            s.scores.resize(held, T::zero());
            for h in 0..c.n_heads {
                let kvh = h / group;
                let qh = &s.q[h * hs..(h + 1) * hs];
                for (n, key_pos) in (first..=pos).enumerate() {
                    let sl = key_pos % lc.capacity;
                    let kh = &lc.keys[sl * kv_dim + kvh * hs..][..hs];
                    s.scores[n] = kernels::soft_cap(kernels::dot(qh, kh) * scale, cap);
                }
                kernels::softmax_in_place(&mut s.scores);
                let out = &mut s.attn[h * hs..(h + 1) * hs];
                out.iter_mut().for_each(|v| *v = T::zero());
                for (n, key_pos) in (first..=pos).enumerate() {
                    let sl = key_pos % lc.capacity;
                    let vh = &lc.values[sl * kv_dim + kvh * hs..][..hs];
                    let w = s.scores[n];
                    out.iter_mut().zip(vh).for_each(|(o, &v)| *o += w * v);
                }
            }
            kernels::vec_mat(&s.attn, lp.wo.data(), &mut s.o);
            kernels::rms_norm_row(&s.o, lp.post_attn_norm.data(), eps, &mut s.normed);
            x.iter_mut().zip(&s.normed).for_each(|(a, &b)| *a += b);

            kernels::rms_norm_row(&x, lp.pre_ff_norm.data(), eps, &mut s.h);
            kernels::vec_mat(&s.h, lp.w_gate.data(), &mut s.gate);
            kernels::vec_mat(&s.h, lp.w_up.data(), &mut s.up);
            s.gate.iter_mut().zip(&s.up).for_each(|(g, &u)| *g = kernels::gelu_tanh(*g) * u);
            kernels::vec_mat(&s.gate, lp.w_down.data(), &mut s.o);
            kernels::rms_norm_row(&s.o, lp.post_ff_norm.data(), eps, &mut s.normed);
            x.iter_mut().zip(&s.normed).for_each(|(a, &b)| *a += b);
        }
        kernels::rms_norm_row(&x, p.final_norm.data(), eps, &mut s.h);
        let table = p.unembedding.as_ref().unwrap_or(&p.embedding);
        let vocab = c.vocab_size;
        let mut logits = vec![T::zero(); vocab];
        kernels::gemm(
            T::one(),
            kernels::MatRef::dense(&s.h, 1, d),
            kernels::MatRef::dense(table.data(), vocab, d).t(),
            T::zero(),
            kernels::MatMut::dense(&mut logits, 1, vocab),
        );
        let fcap = T::of(c.final_softcap);
        logits.iter_mut().for_each(|v| *v = kernels::soft_cap(*v, fcap));
        cache.position += 1;
        Ok(Tensor::from_vec(logits))
    }

    /// Feeds `tokens` through the cache; returns the logits after the last one.
    pub fn prefill(&self, cache: &mut KvCache<T>, tokens: &[u32]) -> Result<Tensor<T>, ModelError> {
        let mut last = None;
        for &t in tokens {
            last = Some(self.forward_cached(cache, t)?);
        }
        last.ok_or(ModelError::EmptyInput)
    }

    /// Greedy continuation of `prompt` for up to `max_new` tokens, stopping
    /// early after emitting `stop`.
    pub fn generate_greedy(&self, prompt: &[u32], max_new: usize, stop: Option<u32>) -> Result<Vec<u32>, ModelError> {
        let mut cache = self.new_cache();
        let mut logits = self.prefill(&mut cache, prompt)?;
        let mut out = Vec::with_capacity(max_new);
        while out.len() < max_new {
            let next = argmax(logits.data());
            out.push(next);
            if Some(next) == stop || out.len() == max_new {
                break;
            }
            logits = self.forward_cached(&mut cache, next)?;
        }
        Ok(out)
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Element>(values: &[T]) -> u32 {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}
