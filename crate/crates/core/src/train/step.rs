use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::optim::{clip_global_norm, AdamW, LrSchedule};
use super::{TrainConfig, TrainError};
use crate::model::{ModelError, ModelParams};
use crate::tensor::{kernels, Graph, Tensor};

/// Chunks of `seq_len + 1` tokens; position `i` predicts token `i + 1`.
pub type Batch<'a> = [&'a [u32]];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Objective that was differentiated, averaged per predicted token.
    pub loss: f64,
    /// Next-token cross-entropy on the same batch.
    pub ce: f64,
    pub distill: Option<f64>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

/// Teacher next-token distributions with temperature applied. Results are
/// memoized per input sequence, which is exact because the teacher is frozen.
pub struct TeacherTargets<'t> {
    params: &'t ModelParams,
    temperature: f64,
    cache: Option<Mutex<HashMap<Vec<u32>, Arc<Vec<f32>>>>>,
}

impl<'t> TeacherTargets<'t> {
    pub fn new(params: &'t ModelParams, temperature: f64) -> Self {
        Self { params, temperature, cache: Some(Mutex::new(HashMap::new())) }
    }

    /// Recomputes the teacher forward pass on every call.
    pub fn uncached(params: &'t ModelParams, temperature: f64) -> Self {
        Self { params, temperature, cache: None }
    }

    pub fn params(&self) -> &'t ModelParams {
        self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.params.config().vocab_size
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Distributions `[batch * len, vocab]` for equal-length inputs.
    pub fn targets(&self, inputs: &[&[u32]]) -> Result<Tensor<f32>, ModelError> {
        let v = self.vocab_size();
        let len = inputs.first().map_or(0, |s| s.len());
        let mut rows: Vec<Option<Arc<Vec<f32>>>> = match &self.cache {
            Some(c) => {
                let c = c.lock().expect("teacher cache poisoned");
                inputs.iter().map(|s| c.get(*s).cloned()).collect()
            }
            None => vec![None; inputs.len()],
        };
        let missing: Vec<&[u32]> = inputs.iter().zip(&rows).filter(|(_, r)| r.is_none()).map(|(s, _)| *s).collect();
        if !missing.is_empty() {
            let logits = self.params.view().forward_batch(&missing)?;
            let inv_t = (1.0 / self.temperature) as f32;
            let logits = logits.into_data();
            let mut fresh = logits.chunks(len * v).map(|c| {
                let mut p: Vec<f32> = c.iter().map(|&z| z * inv_t).collect();
                for row in p.chunks_mut(v) {
                    kernels::softmax_in_place(row);
                }
                Arc::new(p)
            });
            let mut cache = self.cache.as_ref().map(|c| c.lock().expect("teacher cache poisoned"));
            for (s, r) in inputs.iter().zip(rows.iter_mut()) {
                if r.is_none() {
                    let p = fresh.next().expect("one result per missing input");
                    if let Some(c) = cache.as_mut() {
                        c.insert(s.to_vec(), p.clone());
                    }
                    *r = Some(p);
                }
            }
        }
        let mut data = Vec::with_capacity(inputs.len() * len * v);
        for r in rows {
            data.extend_from_slice(&r.expect("filled above"));
        }
        Ok(Tensor::new(vec![inputs.len() * len, v], data)?)
    }
}

/// One optimizer update on `batch` at zero-based `step`.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut AdamW,
    batch: &Batch<'_>,
    config: &TrainConfig,
    step: usize,
    teacher: Option<&TeacherTargets<'_>>,
) -> Result<StepStats, TrainError> {
    if batch.is_empty() || batch.iter().any(|c| c.len() < 2) {
        return Err(TrainError::config("batch", "needs at least one chunk of two or more tokens"));
    }
    let inputs: Vec<&[u32]> = batch.iter().map(|c| &c[..c.len() - 1]).collect();
    let targets: Vec<usize> = batch.iter().flat_map(|c| c[1..].iter().map(|&t| t as usize)).collect();
    let w = config.loss.distill_weight();
    let teacher_probs = if w > 0.0 {
        let t = teacher.ok_or_else(|| TrainError::config("loss.teacher", "required when mode is distill or mix"))?;
        if t.vocab_size() != params.config().vocab_size {
            return Err(TrainError::VocabMismatch { teacher: t.vocab_size(), student: params.config().vocab_size });
        }
        Some(t.targets(&inputs)?)
    } else {
        None
    };

    let (loss, ce, distill, mut grads) = {
        let view = params.view();
        let mut g = Graph::new();
        let vars = view.register(&mut g, true);
        let logits = view.forward_graph(&mut g, &vars, &inputs, None)?;
        let ce = g.softmax_ce(logits, &targets)?;
        let (loss, distill) = match &teacher_probs {
            None => (ce, None),
            Some(tp) => {
                let t = config.loss.temperature;
                let s = if t == 1.0 { logits } else { g.scale(logits, (1.0 / t) as f32) };
                let d = g.soft_target_ce(s, tp)?;
                if w == 1.0 {
                    (d, Some(d))
                } else {
                    let a = g.scale(d, w as f32);
                    let b = g.scale(ce, (1.0 - w) as f32);
                    (g.add(a, b)?, Some(d))
                }
            }
        };
        g.backward(loss)?;
        let item = |v| g.value(v).item().expect("scalar loss") as f64;
        let (loss_v, ce_v, d_v) = (item(loss), item(ce), distill.map(item));
        let grads: Vec<Vec<f32>> = vars
            .all()
            .into_iter()
            .map(|v| g.take_grad(v).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
            .collect();
        (loss_v, ce_v, d_v, grads)
    };

    let finite = loss.is_finite() && grads.iter().flatten().all(|g| g.is_finite());
    if !finite {
        let max_grad = grads.iter().flatten().map(|g| g.abs() as f64).fold(0.0, |a: f64, b| if b.is_nan() || b > a { b } else { a });
        return Err(TrainError::NonFinite { step, max_grad });
    }
    let grad_norm = clip_global_norm(&mut grads, config.grad_clip);
    let lr = LrSchedule::from_config(config).at(step);
    let mut tensors = params.tensors_mut();
    let decay: Vec<bool> = tensors.iter().map(|t| t.shape().len() == 2).collect();
    let mut slices: Vec<&mut [f32]> = tensors.iter_mut().map(|t| t.data_mut()).collect();
    opt.update(&mut slices, &grads, &decay, lr);
    Ok(StepStats { loss, ce, distill, grad_norm, lr })
}
