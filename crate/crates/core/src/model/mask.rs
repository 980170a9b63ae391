use super::{LayerKind, ModelError};
use crate::tensor::{kernels, Element};

/// Boolean attention mask, row-major `[seq_len, seq_len]`; entry `(i, j)`
/// is true when query `i` may attend to key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub seq_len: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.seq_len + j]
    }

    /// Number of visible keys per query row.
    pub fn row_counts(&self) -> Vec<usize> {
        self.allowed.chunks(self.seq_len).map(|r| r.iter().filter(|&&b| b).count()).collect()
    }
}

/// Causal mask for one layer. Local layers see the last `window` positions;
/// global layers see at most `global_span` positions.
pub fn attention_mask(kind: LayerKind, seq_len: usize, window: usize, global_span: usize) -> AttentionMask {
    let span = match kind {
        LayerKind::Local => window.min(global_span),
        LayerKind::Global => global_span,
    };
    let mut allowed = vec![false; seq_len * seq_len];
    for i in 0..seq_len {
        for j in 0..=i {
            allowed[i * seq_len + j] = i - j < span;
        }
    }
    AttentionMask { seq_len, allowed }
}

/// Rotates consecutive feature pairs of one head vector by
/// `position * base^(-2t / head_size)`.
pub fn rope_apply<T: Element>(x: &[T], position: usize, base: f64) -> Result<Vec<T>, ModelError> {
    if x.is_empty() || x.len() % 2 != 0 {
        return Err(ModelError::Config(format!("rotary embedding needs an even head size, got {}", x.len())));
    }
    let mut out = x.to_vec();
    kernels::rope_row(&mut out, x.len(), position, base, 1.0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_window_two_over_four() {
        let m = attention_mask(LayerKind::Local, 4, 2, 8);
        // enumerate: row i allows exactly {i-1, i} clipped at 0
        for i in 0..4 {
            for j in 0..4 {
                let expect = j <= i && (j + 1 == i || j == i);
                assert_eq!(m.get(i, j), expect, "({i},{j})");
            }
        }
        assert_eq!(m.row_counts(), vec![1, 2, 2, 2]);
    }

    #[test]
    fn global_is_lower_triangular() {
        let m = attention_mask(LayerKind::Global, 3, 1, 8);
        let want = [true, false, false, true, true, false, true, true, true];
        assert_eq!(m.allowed, want);
    }

    #[test]
    fn wide_window_equals_global() {
        for n in 1..9 {
            assert_eq!(attention_mask(LayerKind::Local, n, n, 64), attention_mask(LayerKind::Global, n, 1, 64));
            assert_eq!(attention_mask(LayerKind::Local, n, n + 5, 64), attention_mask(LayerKind::Global, n, 1, 64));
        }
    }

    #[test]
    fn global_span_limits_history() {
        let m = attention_mask(LayerKind::Global, 5, 1, 3);
        assert_eq!(m.row_counts(), vec![1, 2, 3, 3, 3]);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x = [0.3f64, -1.2, 2.0, 0.5];
        assert_eq!(rope_apply(&x, 0, 10_000.0).unwrap(), x.to_vec());
    }

    #[test]
    fn rope_rotates_unit_pair() {
        // head size 2: single pair with angle = position
        let theta = 3.0f64;
        let y = rope_apply(&[1.0f64, 0.0], 3, 10_000.0).unwrap();
        assert!((y[0] - theta.cos()).abs() < 1e-12 && (y[1] - theta.sin()).abs() < 1e-12);
        assert!(rope_apply(&[1.0f64, 0.0, 1.0], 1, 10_000.0).is_err());
    }
}
