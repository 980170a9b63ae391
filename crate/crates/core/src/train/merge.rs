use super::TrainError;
use crate::model::ModelParams;
use crate::tensor::Tensor;

/// Uniform elementwise mean of parameter sets with identical configs.
pub fn merge_models(sets: &[&ModelParams]) -> Result<ModelParams, TrainError> {
    merge_weighted(sets, &vec![1.0; sets.len()])
}

/// Weighted elementwise mean, `sum_i w_i p_i / sum_i w_i`. Per element the
/// terms are summed in sorted order in f64, so the result does not depend on
/// the order of `sets`.
pub fn merge_weighted(sets: &[&ModelParams], weights: &[f64]) -> Result<ModelParams, TrainError> {
    let first = sets.first().ok_or_else(|| TrainError::Merge("no models given".into()))?;
    if weights.len() != sets.len() {
        return Err(TrainError::Merge(format!("{} weights for {} models", weights.len(), sets.len())));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(TrainError::Merge("weights must be non-negative with a positive sum".into()));
    }
    for (i, s) in sets.iter().enumerate().skip(1) {
        if s.config() != first.config() {
            return Err(TrainError::Merge(format!("model {i} has a different config")));
        }
    }
    let total: f64 = weights.iter().sum();
    let named: Vec<Vec<(String, &Tensor)>> = sets.iter().map(|s| s.named()).collect();
    let mut out = Vec::with_capacity(named[0].len());
    let mut terms: Vec<(f32, f64)> = Vec::with_capacity(sets.len());
    for (k, (name, t0)) in named[0].iter().enumerate() {
        for (i, n) in named.iter().enumerate() {
            if n[k].1.shape() != t0.shape() {
                return Err(TrainError::Merge(format!("{name}: shape {:?} vs {:?} in model {i}", n[k].1.shape(), t0.shape())));
            }
        }
        let data = (0..t0.numel())
            .map(|j| {
                terms.clear();
                terms.extend(named.iter().zip(weights).map(|(n, &w)| (n[k].1.data()[j], w)));
                terms.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
                (terms.iter().map(|&(x, w)| x as f64 * w).sum::<f64>() / total) as f32
            })
            .collect();
        out.push((name.clone(), Tensor::new(t0.shape().to_vec(), data)?));
    }
    Ok(ModelParams::from_named(first.config().clone(), out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn filled(v: f32) -> ModelParams {
        let mut m = build_model(&ModelConfig::toy(), 0).unwrap();
        for t in m.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = v);
        }
        m
    }

    #[test]
    fn arithmetic_mean() {
        let merged = merge_models(&[&filled(1.0), &filled(3.0)]).unwrap();
        assert!(merged.tensors().iter().all(|t| t.data().iter().all(|&x| x == 2.0)));
    }

    #[test]
    fn identities() {
        let m = build_model(&ModelConfig::toy(), 5).unwrap();
        assert_eq!(merge_models(&[&m]).unwrap(), m);
        assert_eq!(merge_models(&[&m, &m]).unwrap(), m);
    }

    #[test]
    fn permutation_invariant() {
        let a = build_model(&ModelConfig::toy(), 1).unwrap();
        let b = build_model(&ModelConfig::toy(), 2).unwrap();
        let c = build_model(&ModelConfig::toy(), 3).unwrap();
        assert_eq!(merge_models(&[&a, &b, &c]).unwrap(), merge_models(&[&c, &a, &b]).unwrap());
        let w = merge_weighted(&[&a, &b], &[1.0, 3.0]).unwrap();
        assert_eq!(w, merge_weighted(&[&b, &a], &[3.0, 1.0]).unwrap());
    }

    #[test]
    fn rejects_mismatch() {
        let a = build_model(&ModelConfig::toy(), 1).unwrap();
        let mut cfg = ModelConfig::toy();
        cfg.ff_dim = 256;
        let b = build_model(&cfg, 1).unwrap();
        assert!(matches!(merge_models(&[&a, &b]), Err(TrainError::Merge(_))));
        assert!(merge_models(&[]).is_err());
    }
}
