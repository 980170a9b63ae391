use std::borrow::Cow;

use super::kernels::{self, MatMut, MatRef};
use super::{Element, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Static description of a fused causal attention call over `batch`
/// sequences of `seq_len` rows each.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub seq_len: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_size: usize,
    /// Sliding window; `None` means plain causal attention.
    pub window: Option<usize>,
    pub softcap: Option<f64>,
    pub scale: f64,
}

impl AttentionSpec {
    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        j <= i && self.window.is_none_or(|w| i - j < w)
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Scale { a: usize, factor: T },
    Sum { a: usize },
    Embedding { table: usize, ids: Vec<usize> },
    RmsNorm { x: usize, gain: usize, inv_rms: Vec<T> },
    Geglu { gate: usize, lin: usize },
    SoftCap { a: usize, cap: T },
    Rope { a: usize, head_size: usize, seq_len: usize, base: f64 },
    Attention { q: usize, k: usize, v: usize, spec: AttentionSpec, probs: Vec<T>, slopes: Vec<T> },
    SoftmaxCe { logits: usize, targets: Vec<usize>, probs: Vec<T> },
    SoftTargetCe { logits: usize, targets: Vec<T>, probs: Vec<T> },
}

struct Node<'a, T: Element> {
    value: Cow<'a, Tensor<T>>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only tape of tensor operations.
///
/// Nodes are recorded in creation order, which is already a topological
/// order, so [`Graph::backward`] walks the tape in reverse and visits each
/// node once. Backward may run only once per graph; a second call returns
/// [`TensorError::BackwardTwice`] instead of silently accumulating.
pub struct Graph<'a, T: Element = f32> {
    nodes: Vec<Node<'a, T>>,
    backward_done: bool,
}

impl<T: Element> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Element> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, inputs: &[usize], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(Cow::Owned(value), requires_grad, op)
    }

    /// Trainable leaf borrowed from its owner.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), true, Op::Leaf)
    }

    /// Borrowed leaf that never receives a gradient.
    pub fn constant(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), false, Op::Leaf)
    }

    /// Owned leaf.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(t), requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `a[m,k] * b[k,n]`, or `a[m,k] * b[n,k]^T` when `trans_b`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mismatch = || TensorError::ShapeMismatch { op: "matmul", left: sa.to_vec(), right: sb.to_vec() };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[0], sa[1]);
        let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != bk {
            return Err(mismatch());
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = MatRef::dense(self.value(a).data(), m, k);
            let bv = if trans_b {
                MatRef::dense(self.value(b).data(), n, k).t()
            } else {
                MatRef::dense(self.value(b).data(), k, n)
            };
            kernels::gemm(T::one(), av, bv, T::zero(), MatMut::dense(&mut out, m, n));
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(t, &[a.0, b.0], Op::MatMul { a: a.0, b: b.0, trans_b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_ext(a, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(t, &[a.0, b.0], Op::Add { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * factor).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.push_op(t, &[a.0], Op::Scale { a: a.0, factor })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        self.push_op(Tensor::scalar(total), &[a.0], Op::Sum { a: a.0 })
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(TensorError::InvalidParameter { op: "embedding", message: format!("table must be 2-d, got {shape:?}") });
        }
        let (vocab, d) = (shape[0], shape[1]);
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange { op: "embedding", index: id, bound: vocab });
            }
            data.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push_op(t, &[table.0], Op::Embedding { table: table.0, ids: ids.to_vec() }))
    }

    /// RMS normalization over the last dimension with gain `(1 + weight)`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var, TensorError> {
        let d = self.value(x).cols();
        if self.shape(gain) != [d] {
            return Err(TensorError::ShapeMismatch { op: "rms_norm", left: self.shape(x).to_vec(), right: self.shape(gain).to_vec() });
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let mut out = vec![T::zero(); xv.numel()];
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for (row, o) in xv.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            inv_rms.push(kernels::rms_norm_row(row, g, T::of(eps), o));
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push_op(t, &[x.0, gain.0], Op::RmsNorm { x: x.0, gain: gain.0, inv_rms }))
    }

    /// `gelu_tanh(gate) * lin`.
    pub fn geglu(&mut self, gate: Var, lin: Var) -> Result<Var, TensorError> {
        self.same_shape("geglu", gate, lin)?;
        let data = self
            .value(gate)
            .data()
            .iter()
            .zip(self.value(lin).data())
            .map(|(&g, &l)| kernels::gelu_tanh(g) * l)
            .collect();
        let t = Tensor::new(self.shape(gate).to_vec(), data)?;
        Ok(self.push_op(t, &[gate.0, lin.0], Op::Geglu { gate: gate.0, lin: lin.0 }))
    }

    /// Elementwise `cap * tanh(x / cap)`.
    pub fn soft_cap(&mut self, a: Var, cap: f64) -> Result<Var, TensorError> {
        if !(cap > 0.0 && cap.is_finite()) {
            return Err(TensorError::InvalidParameter { op: "soft_cap", message: format!("cap must be positive, got {cap}") });
        }
        let cap = T::of(cap);
        let data = self.value(a).data().iter().map(|&x| kernels::soft_cap(x, cap)).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push_op(t, &[a.0], Op::SoftCap { a: a.0, cap }))
    }

    /// Rotary embedding over a `[batch * seq_len, heads * head_size]` input;
    /// row `r` sits at position `r % seq_len`.
    pub fn rope(&mut self, a: Var, head_size: usize, seq_len: usize, base: f64) -> Result<Var, TensorError> {
        let av = self.value(a);
        if head_size == 0 || head_size % 2 != 0 {
            return Err(TensorError::InvalidParameter { op: "rope", message: format!("head size must be even, got {head_size}") });
        }
        if av.cols() % head_size != 0 || seq_len == 0 || av.rows() % seq_len != 0 {
            return Err(TensorError::InvalidParameter {
                op: "rope",
                message: format!("shape {:?} incompatible with head size {head_size} and seq_len {seq_len}", av.shape()),
            });
        }
        let cols = av.cols();
        let mut data = av.data().to_vec();
        let table = kernels::RopeTable::new(seq_len, head_size, base);
        for (r, row) in data.chunks_exact_mut(cols).enumerate() {
            table.apply(row, r % seq_len, false);
        }
        let t = Tensor { shape: av.shape().to_vec(), data };
        Ok(self.push_op(t, &[a.0], Op::Rope { a: a.0, head_size, seq_len, base }))
    }

    /// Fused grouped-query attention: scaled scores, optional soft-cap, causal
    /// (optionally sliding-window) mask, softmax, weighted values.
    ///
    /// `q` is `[batch*seq, n_heads*head]`; `k` and `v` are `[batch*seq, n_kv_heads*head]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var, TensorError> {
        let rows = spec.batch * spec.seq_len;
        let hq = spec.n_heads * spec.head_size;
        let hk = spec.n_kv_heads * spec.head_size;
        if spec.n_kv_heads == 0 || spec.n_heads % spec.n_kv_heads != 0 {
            return Err(TensorError::InvalidParameter {
                op: "attention",
                message: format!("{} heads not divisible by {} kv heads", spec.n_heads, spec.n_kv_heads),
            });
        }
        if spec.window == Some(0) {
            return Err(TensorError::InvalidParameter { op: "attention", message: "window must be >= 1".into() });
        }
        if self.shape(q) != [rows, hq] {
            return Err(TensorError::ShapeMismatch { op: "attention", left: self.shape(q).to_vec(), right: vec![rows, hq] });
        }
        for kv in [k, v] {
            if self.shape(kv) != [rows, hk] {
                return Err(TensorError::ShapeMismatch { op: "attention", left: self.shape(kv).to_vec(), right: vec![rows, hk] });
            }
        }
        let t = spec.seq_len;
        let group = spec.n_heads / spec.n_kv_heads;
        let hs = spec.head_size;
        let cap = spec.softcap.map(T::of);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); rows * hq];
        let mut probs = vec![T::zero(); spec.batch * spec.n_heads * t * t];
        let mut slopes = vec![T::one(); if cap.is_some() { probs.len() } else { 0 }];
        for b in 0..spec.batch {
            for h in 0..spec.n_heads {
                let kvh = h / group;
                let blk = (b * spec.n_heads + h) * t * t;
                let scores = &mut probs[blk..blk + t * t];
                let qm = MatRef { data: qd, offset: b * t * hq + h * hs, rows: t, cols: hs, row_stride: hq, col_stride: 1 };
                let km = MatRef { data: kd, offset: b * t * hk + kvh * hs, rows: t, cols: hs, row_stride: hk, col_stride: 1 };
                kernels::gemm(T::of(spec.scale), qm, km.t(), T::zero(), MatMut::dense(scores, t, t));
                for i in 0..t {
                    let row = &mut scores[i * t..(i + 1) * t];
                    let lo = spec.window.map_or(0, |w| (i + 1).saturating_sub(w));
                    if let Some(c) = cap {
                        let sl = &mut slopes[blk + i * t..blk + (i + 1) * t];
                        for (s, slope) in row[lo..=i].iter_mut().zip(sl[lo..=i].iter_mut()) {
                            let th = (*s / c).tanh_k();
                            *s = c * th;
                            *slope = T::one() - th * th;
                        }
                    }
                    let max = row[lo..=i].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for x in &mut row[lo..=i] {
                        *x = (*x - max).exp();
                        total += *x;
                    }
                    let inv = T::one() / total;
                    row[..lo].iter_mut().for_each(|x| *x = T::zero());
                    row[lo..=i].iter_mut().for_each(|x| *x *= inv);
                    row[i + 1..].iter_mut().for_each(|x| *x = T::zero());
                }
                let vm = MatRef { data: vd, offset: b * t * hk + kvh * hs, rows: t, cols: hs, row_stride: hk, col_stride: 1 };
                let om = MatMut { data: &mut out, offset: b * t * hq + h * hs, rows: t, cols: hs, row_stride: hq };
                kernels::gemm(T::one(), MatRef::dense(&probs[blk..blk + t * t], t, t), vm, T::zero(), om);
            }
        }
        let tensor = Tensor::new(vec![rows, hq], out)?;
        Ok(self.push_op(tensor, &[q.0, k.0, v.0], Op::Attention { q: q.0, k: k.0, v: v.0, spec, probs, slopes }))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch { op: "softmax_ce", left: lv.shape().to_vec(), right: vec![targets.len()] });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::IndexOutOfRange { op: "softmax_ce", index: bad, bound: vocab });
        }
        let mut loss = T::zero();
        for (row, &tgt) in lv.data().chunks_exact(vocab).zip(targets) {
            loss += kernels::log_sum_exp(row) - row[tgt];
        }
        let probs = kernels::softmax_rows(lv.data(), vocab);
        let loss = loss / T::of(rows as f64);
        Ok(self.push_op(Tensor::scalar(loss), &[logits.0], Op::SoftmaxCe { logits: logits.0, targets: targets.to_vec(), probs }))
    }

    /// Mean over rows of `sum_x -target[x] * log softmax(logits)[x]`; the
    /// target distribution is a constant.
    pub fn soft_target_ce(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        if lv.numel() != targets.numel() || lv.cols() != targets.cols() {
            return Err(TensorError::ShapeMismatch { op: "soft_target_ce", left: lv.shape().to_vec(), right: targets.shape().to_vec() });
        }
        let (rows, vocab) = (lv.rows(), lv.cols());
        let mut loss = T::zero();
        for (row, p) in lv.data().chunks_exact(vocab).zip(targets.data().chunks_exact(vocab)) {
            let lse = kernels::log_sum_exp(row);
            for (&z, &pt) in row.iter().zip(p) {
                if pt != T::zero() {
                    loss += pt * (lse - z);
                }
            }
        }
        let probs = kernels::softmax_rows(lv.data(), vocab);
        let loss = loss / T::of(rows as f64);
        Ok(self.push_op(
            Tensor::scalar(loss),
            &[logits.0],
            Op::SoftTargetCe { logits: logits.0, targets: targets.data().to_vec(), probs },
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`, populating the gradient of
    /// every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.shape(loss);
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalar { shape: shape.to_vec() });
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &grad);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, idx: usize, g: Vec<T>) {
        let node = &mut self.nodes[idx];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn backprop(&mut self, idx: usize, op: &Op<T>, dy: &[T]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let (m, k) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                let n = self.nodes[idx].value.shape()[1];
                let dym = MatRef::dense(dy, m, n);
                if self.wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    let bd = self.nodes[b].value.data();
                    // dA = dC * B^T, with B stored as [k,n] or [n,k].
                    let bt = if trans_b { MatRef::dense(bd, n, k) } else { MatRef::dense(bd, k, n).t() };
                    kernels::gemm(T::one(), dym, bt, T::zero(), MatMut::dense(&mut da, m, k));
                    self.accumulate(a, da);
                }
                if self.wants(b) {
                    let ad = self.nodes[a].value.data();
                    let mut db = vec![T::zero(); k * n];
                    if trans_b {
                        kernels::gemm(T::one(), dym.t(), MatRef::dense(ad, m, k), T::zero(), MatMut::dense(&mut db, n, k));
                    } else {
                        kernels::gemm(T::one(), MatRef::dense(ad, m, k).t(), dym, T::zero(), MatMut::dense(&mut db, k, n));
                    }
                    self.accumulate(b, db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, dy.to_vec());
                self.accumulate(*b, dy.to_vec());
            }
            Op::Scale { a, factor } => {
                let g = dy.iter().map(|&d| d * *factor).collect();
                self.accumulate(*a, g);
            }
            Op::Sum { a } => {
                let n = self.nodes[*a].value.numel();
                self.accumulate(*a, vec![dy[0]; n]);
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[*table].value.cols();
                let mut g = vec![T::zero(); self.nodes[*table].value.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, &v) in g[id * d..(id + 1) * d].iter_mut().zip(&dy[r * d..(r + 1) * d]) {
                        *acc += v;
                    }
                }
                self.accumulate(*table, g);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = &self.nodes[*x].value;
                let gv = self.nodes[*gain].value.data();
                let d = xv.cols();
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dg = vec![T::zero(); d];
                let inv_d = T::of(1.0 / d as f64);
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = &xv.data()[r * d..(r + 1) * d];
                    let dyr = &dy[r * d..(r + 1) * d];
                    // n = x * inv; dn = dy * (1 + g); dx = inv * (dn - n * mean(dn * n))
                    let mut proj = T::zero();
                    for j in 0..d {
                        let n = xr[j] * inv;
                        let dn = dyr[j] * (T::one() + gv[j]);
                        dg[j] += dyr[j] * n;
                        proj += dn * n;
                    }
                    proj = proj * inv_d;
                    for j in 0..d {
                        let n = xr[j] * inv;
                        let dn = dyr[j] * (T::one() + gv[j]);
                        dx[r * d + j] = inv * (dn - n * proj);
                    }
                }
                let (x, gain) = (*x, *gain);
                self.accumulate(x, dx);
                self.accumulate(gain, dg);
            }
            Op::Geglu { gate, lin } => {
                let gd = self.nodes[*gate].value.data();
                let ld = self.nodes[*lin].value.data();
                let dgate = gd.iter().zip(ld).zip(dy).map(|((&g, &l), &d)| d * l * kernels::gelu_tanh_grad(g)).collect();
                let dlin = gd.iter().zip(dy).map(|(&g, &d)| d * kernels::gelu_tanh(g)).collect();
                let (gate, lin) = (*gate, *lin);
                self.accumulate(gate, dgate);
                self.accumulate(lin, dlin);
            }
            Op::SoftCap { a, cap } => {
                let yd = self.nodes[idx].value.data();
                let g = yd
                    .iter()
                    .zip(dy)
                    .map(|(&y, &d)| {
                        let t = y / *cap;
                        d * (T::one() - t * t)
                    })
                    .collect();
                self.accumulate(*a, g);
            }
            Op::Rope { a, head_size, seq_len, base } => {
                let cols = self.nodes[*a].value.cols();
                let mut g = dy.to_vec();
                let table = kernels::RopeTable::new(*seq_len, *head_size, *base);
                for (r, row) in g.chunks_exact_mut(cols).enumerate() {
                    table.apply(row, r % *seq_len, true);
                }
                self.accumulate(*a, g);
            }
            Op::Attention { q, k, v, spec, probs, slopes } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, spec, probs, slopes, dy);
                let (q, k, v) = (*q, *k, *v);
                self.accumulate(q, dq);
                self.accumulate(k, dk);
                self.accumulate(v, dv);
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let vocab = self.nodes[*logits].value.cols();
                let scale = dy[0] / T::of(targets.len() as f64);
                let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    g[r * vocab + t] -= scale;
                }
                self.accumulate(*logits, g);
            }
            Op::SoftTargetCe { logits, targets, probs } => {
                let vocab = self.nodes[*logits].value.cols();
                let rows = probs.len() / vocab;
                let scale = dy[0] / T::of(rows as f64);
                let mut g = vec![T::zero(); probs.len()];
                for ((gr, pr), tr) in g.chunks_exact_mut(vocab).zip(probs.chunks_exact(vocab)).zip(targets.chunks_exact(vocab)) {
                    let mass: T = tr.iter().copied().sum();
                    for ((o, &p), &t) in gr.iter_mut().zip(pr).zip(tr) {
                        *o = (p * mass - t) * scale;
                    }
                }
                self.accumulate(*logits, g);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: usize,
        k: usize,
        v: usize,
        spec: &AttentionSpec,
        probs: &[T],
        slopes: &[T],
        dy: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let t = spec.seq_len;
        let hs = spec.head_size;
        let hq = spec.n_heads * hs;
        let hk = spec.n_kv_heads * hs;
        let group = spec.n_heads / spec.n_kv_heads;
        let (qd, kd, vd) = (self.nodes[q].value.data(), self.nodes[k].value.data(), self.nodes[v].value.data());
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dp = vec![T::zero(); t * t];
        let scale = T::of(spec.scale);
        for b in 0..spec.batch {
            for h in 0..spec.n_heads {
                let kvh = h / group;
                let blk = (b * spec.n_heads + h) * t * t;
                let p = &probs[blk..blk + t * t];
                let q_off = b * t * hq + h * hs;
                let kv_off = b * t * hk + kvh * hs;
                let dom = MatRef { data: dy, offset: q_off, rows: t, cols: hs, row_stride: hq, col_stride: 1 };
                let vm = MatRef { data: vd, offset: kv_off, rows: t, cols: hs, row_stride: hk, col_stride: 1 };
                let km = MatRef { data: kd, offset: kv_off, rows: t, cols: hs, row_stride: hk, col_stride: 1 };
                let qm = MatRef { data: qd, offset: q_off, rows: t, cols: hs, row_stride: hq, col_stride: 1 };
                // dP = dO V^T ; dV += P^T dO
                kernels::gemm(T::one(), dom, vm.t(), T::zero(), MatMut::dense(&mut dp, t, t));
                let dvm = MatMut { data: &mut dv, offset: kv_off, rows: t, cols: hs, row_stride: hk };
                kernels::gemm(T::one(), MatRef::dense(p, t, t).t(), dom, T::one(), dvm);
                // softmax, then soft-cap slope
                for i in 0..t {
                    let pr = &p[i * t..(i + 1) * t];
                    let dr = &mut dp[i * t..(i + 1) * t];
                    let proj = pr.iter().zip(dr.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    for j in 0..t {
                        dr[j] = pr[j] * (dr[j] - proj);
                    }
                    if !slopes.is_empty() {
                        let sl = &slopes[blk + i * t..blk + (i + 1) * t];
                        dr.iter_mut().zip(sl).for_each(|(d, &s)| *d *= s);
                    }
                }
                let dsm = MatRef::dense(&dp, t, t);
                let dqm = MatMut { data: &mut dq, offset: q_off, rows: t, cols: hs, row_stride: hq };
                kernels::gemm(scale, dsm, km, T::one(), dqm);
                let dkm = MatMut { data: &mut dk, offset: kv_off, rows: t, cols: hs, row_stride: hk };
                kernels::gemm(scale, dsm.t(), qm, T::one(), dkm);
            }
        }
        (dq, dk, dv)
    }
}
