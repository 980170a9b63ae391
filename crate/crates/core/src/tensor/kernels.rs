//! Scalar and row kernels shared by the autodiff ops and the cached decoder,
//! so both paths evaluate the same arithmetic.

use super::Element;

/// Strided read-only view of a row-major matrix buffer.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Dense row-major `rows x cols` matrix starting at `data[0]`.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows, cols, row_stride: cols, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// Strided mutable view used as a gemm destination.
#[derive(Debug)]
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows, cols, row_stride: cols }
    }
}

/// `c = alpha * a * b + beta * c`. With `beta == 0` the destination is overwritten.
pub fn gemm<T: Element>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    assert!(a.cols == 0 || a.last_index() < a.data.len(), "gemm lhs out of bounds");
    assert!(b.rows == 0 || b.last_index() < b.data.len(), "gemm rhs out of bounds");
    let c_last = c.offset + (c.rows - 1) * c.row_stride + c.cols - 1;
    assert!(c_last < c.data.len(), "gemm destination out of bounds");
    if a.cols == 0 {
        for r in 0..c.rows {
            let row = &mut c.data[c.offset + r * c.row_stride..][..c.cols];
            row.iter_mut().for_each(|v| *v = if beta == T::zero() { T::zero() } else { *v * beta });
        }
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            1,
        );
    }
}

/// `out = x * W` for a single row `x` against a dense `[in, out]` matrix.
pub fn vec_mat<T: Element>(x: &[T], w: &[T], out: &mut [T]) {
    let cols = out.len();
    gemm(
        T::one(),
        MatRef::dense(x, 1, x.len()),
        MatRef::dense(w, x.len(), cols),
        T::zero(),
        MatMut::dense(out, 1, cols),
    );
}

#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Normalizes one row by its root-mean-square and applies the `(1 + gain)`
/// scale. Returns the inverse rms that was used.
pub fn rms_norm_row<T: Element>(x: &[T], gain: &[T], eps: T, out: &mut [T]) -> T {
    let d = T::of(x.len() as f64);
    let mean_sq = x.iter().fold(T::zero(), |acc, &v| acc + v * v) / d;
    let inv = T::one() / (mean_sq + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * (T::one() + g);
    }
    inv
}

const GELU_COEF: f64 = 0.044_715;

#[inline]
fn sqrt_2_over_pi<T: Element>() -> T {
    T::of((2.0 / std::f64::consts::PI).sqrt())
}

/// Tanh-approximated GELU.
#[inline]
pub fn gelu_tanh<T: Element>(x: T) -> T {
    let u = sqrt_2_over_pi::<T>() * (x + T::of(GELU_COEF) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh_k())
}

#[inline]
pub fn gelu_tanh_grad<T: Element>(x: T) -> T {
    let c = sqrt_2_over_pi::<T>();
    let u = c * (x + T::of(GELU_COEF) * x * x * x);
    let t = u.tanh_k();
    let du = c * (T::one() + T::of(3.0 * GELU_COEF) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

#[inline]
pub fn soft_cap<T: Element>(x: T, cap: T) -> T {
    cap * (x / cap).tanh_k()
}

/// Rotation angle for pair `t` of a head at `position`.
#[inline]
pub fn rope_angle(position: usize, pair: usize, head_size: usize, base: f64) -> f64 {
    position as f64 * base.powf(-2.0 * pair as f64 / head_size as f64)
}

/// Precomputed cos/sin of every `(position, pair)` angle for positions
/// `0..len`; values match [`rope_row`] exactly.
pub struct RopeTable<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Element> RopeTable<T> {
    pub fn new(len: usize, head_size: usize, base: f64) -> Self {
        let half = head_size / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for pos in 0..len {
            for t in 0..half {
                let (s, c) = rope_angle(pos, t, head_size, base).sin_cos();
                cos.push(T::of(c));
                sin.push(T::of(s));
            }
        }
        Self { half, cos, sin }
    }

    /// Same as [`rope_row`] with the angles looked up.
    pub fn apply(&self, row: &mut [T], position: usize, inverse: bool) {
        let cos = &self.cos[position * self.half..][..self.half];
        let sin = &self.sin[position * self.half..][..self.half];
        for head in row.chunks_exact_mut(2 * self.half) {
            for t in 0..self.half {
                let (c, s) = (cos[t], if inverse { -sin[t] } else { sin[t] });
                let x0 = head[2 * t];
                let x1 = head[2 * t + 1];
                head[2 * t] = x0 * c - x1 * s;
                head[2 * t + 1] = x0 * s + x1 * c;
            }
        }
    }
}

/// Rotates every head of `row` in place. `sign = -1` applies the inverse
/// rotation (used by the backward pass).
pub fn rope_row<T: Element>(row: &mut [T], head_size: usize, position: usize, base: f64, sign: f64) {
    let half = head_size / 2;
    for head in row.chunks_exact_mut(head_size) {
        for t in 0..half {
            let theta = sign * rope_angle(position, t, head_size, base);
            let (s, c) = theta.sin_cos();
            let (s, c) = (T::of(s), T::of(c));
            let x0 = head[2 * t];
            let x1 = head[2 * t + 1];
            head[2 * t] = x0 * c - x1 * s;
            head[2 * t + 1] = x0 * s + x1 * c;
        }
    }
}

/// In-place numerically stable softmax over a row.
pub fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Row-wise softmax of a `[rows, cols]` buffer.
pub fn softmax_rows<T: Element>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for row in out.chunks_exact_mut(cols) {
        softmax_in_place(row);
    }
    out
}

/// `log(sum(exp(row)))`, stabilized by the row maximum.
pub fn log_sum_exp<T: Element>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + total.ln()
}
