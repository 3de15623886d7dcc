//! Tape-based reverse-mode differentiation over [`Mat`].
//!
//! Every trainable path in the model is expressed as ops on a [`Tape`]; the
//! backward pass accumulates analytic gradients node by node in reverse
//! order. The tape is generic over the scalar so the same monomorphized math
//! runs in `f32` for training and in `f64` for finite-difference
//! verification.

use crate::mat::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    /// a(m,k) @ b(k,n)
    MatMul { a: NodeId, b: NodeId },
    /// a(m,k) @ b(n,k)^T
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    MulElem { a: NodeId, b: NodeId },
    /// bias (1,n) added to every row of a (m,n)
    AddRowBroadcast { a: NodeId, bias: NodeId },
    /// constant scale
    Scale { a: NodeId, c: f64 },
    /// a / s with s a 1×1 node
    DivByScalarNode { a: NodeId, s: NodeId },
    Exp { a: NodeId },
    /// ln(a + eps)
    LnEps { a: NodeId, eps: f64 },
    SoftmaxRows { a: NodeId },
    /// rows normalized to zero mean / unit variance, then gamma/beta (1,n)
    LayerNormRows { a: NodeId, gamma: NodeId, beta: NodeId },
    Gelu { a: NodeId },
    /// rows scaled to unit L2 norm; all-zero rows stay zero
    L2NormalizeRows { a: NodeId },
    /// row i of a scaled by s[i], s is (m,1)
    RowScale { a: NodeId, s: NodeId },
    /// column j of a as (m,1)
    Column { a: NodeId, j: usize },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize, len: usize },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    /// out.row(i) = a.row(perm[i])
    PermuteRows { a: NodeId, perm: Vec<usize> },
    /// (1,n) column sums
    ColSums { a: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    /// numerically stable binary cross-entropy on a 1×1 logit
    BceWithLogits { a: NodeId, label: f64 },
}

struct Node<T> {
    value: Mat<T>,
    op: Op,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    by_node: Vec<Mat<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: NodeId) -> &Mat<T> {
        &self.by_node[id.0]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Mat<T>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_from_f32(&mut self, value: &Mat<f32>) -> NodeId {
        self.leaf(value.cast::<T>())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul { a, b })
    }

    /// a @ b^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.value(a).shape();
        let (n, kb) = self.value(b).shape();
        assert_eq!(k, kb, "matmul_nt inner dimension mismatch");
        let mut out = Mat::zeros(m, n);
        matmul_nt_acc(
            out.data_mut(),
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
        );
        self.push(out, Op::MatMulNT { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        self.push(out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        self.push(out, Op::Sub { a, b })
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        self.push(out, Op::MulElem { a, b })
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (_, n) = self.value(a).shape();
        assert_eq!(self.value(bias).shape(), (1, n), "bias must be 1×cols");
        let mut out = self.value(a).clone();
        let bias_row: Vec<T> = self.value(bias).data().to_vec();
        for i in 0..out.rows() {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(&bias_row) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRowBroadcast { a, bias })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cv = T::from_f64c(c);
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o *= cv;
        }
        self.push(out, Op::Scale { a, c })
    }

    pub fn div_by_scalar_node(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.value(s).shape(), (1, 1));
        let sv = self.value(s).item();
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o /= sv;
        }
        self.push(out, Op::DivByScalarNode { a, s })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = o.exp();
        }
        self.push(out, Op::Exp { a })
    }

    pub fn ln_eps(&mut self, a: NodeId, eps: f64) -> NodeId {
        let e = T::from_f64c(eps);
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = (*o + e).ln();
        }
        self.push(out, Op::LnEps { a, eps })
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_row_inplace(out.row_mut(i));
        }
        self.push(out, Op::SoftmaxRows { a })
    }

    pub fn layernorm_rows(&mut self, a: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (rows, n) = self.value(a).shape();
        assert_eq!(self.value(gamma).shape(), (1, n));
        assert_eq!(self.value(beta).shape(), (1, n));
        let mut out = Mat::zeros(rows, n);
        let eps = T::from_f64c(LN_EPS);
        for i in 0..rows {
            let x = self.nodes[a.0].value.row(i);
            let (mean, var) = mean_var(x);
            let inv_std = T::one() / (var + eps).sqrt();
            let g = self.nodes[gamma.0].value.row(0);
            let b = self.nodes[beta.0].value.row(0);
            let o = out.row_mut(i);
            for j in 0..n {
                o[j] = (x[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        self.push(out, Op::LayerNormRows { a, gamma, beta })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let c = T::from_f64c(GELU_C);
        let aa = T::from_f64c(GELU_A);
        let half = T::from_f64c(0.5);
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            let x = *o;
            let u = c * (x + aa * x * x * x);
            *o = half * x * (T::one() + u.tanh());
        }
        self.push(out, Op::Gelu { a })
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let r = out.row_mut(i);
            let norm = l2_norm(r);
            if norm > T::zero() {
                for v in r.iter_mut() {
                    *v /= norm;
                }
            }
            // all-zero row left as zeros: cosine scores vanish and the
            // downstream softmax yields uniform gates
        }
        self.push(out, Op::L2NormalizeRows { a })
    }

    pub fn row_scale(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let (m, _) = self.value(a).shape();
        assert_eq!(self.value(s).shape(), (m, 1), "row_scale needs (rows,1)");
        let mut out = self.value(a).clone();
        for i in 0..m {
            let sv = self.nodes[s.0].value.get(i, 0);
            for v in out.row_mut(i) {
                *v *= sv;
            }
        }
        self.push(out, Op::RowScale { a, s })
    }

    pub fn column(&mut self, a: NodeId, j: usize) -> NodeId {
        let (m, n) = self.value(a).shape();
        assert!(j < n);
        let out = Mat::from_fn(m, 1, |i, _| self.value(a).get(i, j));
        self.push(out, Op::Column { a, j })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            assert_eq!(self.value(p).cols(), cols);
            rows += self.value(p).rows();
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            Mat::from_vec(rows, cols, data),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.value(a).shape();
        assert!(start + len <= m);
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        self.push(Mat::from_vec(len, n, data), Op::SliceRows { a, start, len })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.value(a).shape();
        assert!(start + len <= n);
        let mut out = Mat::zeros(m, len);
        for i in 0..m {
            let src = &self.value(a).row(i)[start..start + len];
            out.row_mut(i).copy_from_slice(src);
        }
        self.push(out, Op::SliceCols { a, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(m, total);
        for i in 0..m {
            let mut off = 0;
            for &p in parts {
                let w = self.value(p).cols();
                out.row_mut(i)[off..off + w].copy_from_slice(self.value(p).row(i));
                off += w;
            }
        }
        self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn permute_rows(&mut self, a: NodeId, perm: &[usize]) -> NodeId {
        let (m, n) = self.value(a).shape();
        assert_eq!(perm.len(), m);
        let mut out = Mat::zeros(m, n);
        for (i, &src) in perm.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.value(a).row(src));
        }
        self.push(
            out,
            Op::PermuteRows {
                a,
                perm: perm.to_vec(),
            },
        )
    }

    pub fn col_sums(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.value(a).shape();
        let mut out = Mat::zeros(1, n);
        for i in 0..m {
            for (o, &v) in out.row_mut(0).iter_mut().zip(self.nodes[a.0].value.row(i)) {
                *o += v;
            }
        }
        self.push(out, Op::ColSums { a })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &v in self.value(a).data() {
            acc += v;
        }
        self.push(Mat::scalar(acc), Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let len = self.value(a).len();
        let mut acc = T::zero();
        for &v in self.value(a).data() {
            acc += v;
        }
        self.push(
            Mat::scalar(acc / T::from_f64c(len as f64)),
            Op::MeanAll { a },
        )
    }

    /// Stable BCE: max(z,0) − z·y + ln(1 + e^(−|z|)) on a 1×1 logit.
    pub fn bce_with_logits(&mut self, a: NodeId, label: f64) -> NodeId {
        assert_eq!(self.value(a).shape(), (1, 1));
        let z = self.value(a).item();
        let y = T::from_f64c(label);
        let v = z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
        self.push(Mat::scalar(v), Op::BceWithLogits { a, label })
    }

    /// Reverse pass from a 1×1 root with seed gradient 1.
    pub fn backward(&self, root: NodeId) -> Grads<T> {
        assert_eq!(
            self.value(root).shape(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut g: Vec<Mat<T>> = self
            .nodes
            .iter()
            .map(|n| Mat::zeros(n.value.rows(), n.value.cols()))
            .collect();
        g[root.0].set(0, 0, T::one());

        for idx in (0..self.nodes.len()).rev() {
            // take this node's gradient out so we can borrow others mutably
            let grad = std::mem::replace(&mut g[idx], Mat::zeros(0, 0));
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = self.value(*a).shape();
                    let n = self.value(*b).cols();
                    // da += g @ b^T
                    matmul_nt_acc(
                        g[a.0].data_mut(),
                        grad.data(),
                        self.value(*b).data(),
                        m,
                        n,
                        k,
                    );
                    // db += a^T @ g
                    matmul_tn_acc(
                        g[b.0].data_mut(),
                        self.value(*a).data(),
                        grad.data(),
                        m,
                        k,
                        n,
                    );
                }
                Op::MatMulNT { a, b } => {
                    let (m, k) = self.value(*a).shape();
                    let n = self.value(*b).rows();
                    // da += g @ b
                    matmul_acc(
                        g[a.0].data_mut(),
                        grad.data(),
                        self.value(*b).data(),
                        m,
                        n,
                        k,
                    );
                    // db += g^T @ a
                    matmul_tn_acc(
                        g[b.0].data_mut(),
                        grad.data(),
                        self.value(*a).data(),
                        m,
                        n,
                        k,
                    );
                }
                Op::Add { a, b } => {
                    acc_into(&mut g[a.0], grad.data());
                    acc_into(&mut g[b.0], grad.data());
                }
                Op::Sub { a, b } => {
                    acc_into(&mut g[a.0], grad.data());
                    for (o, &v) in g[b.0].data_mut().iter_mut().zip(grad.data()) {
                        *o -= v;
                    }
                }
                Op::MulElem { a, b } => {
                    if a.0 == b.0 {
                        // square: d = 2·a·g
                        let av: Vec<T> = self.value(*a).data().to_vec();
                        let two = T::from_f64c(2.0);
                        for ((o, &gv), &x) in
                            g[a.0].data_mut().iter_mut().zip(grad.data()).zip(&av)
                        {
                            *o += two * gv * x;
                        }
                    } else {
                        for ((o, &gv), &bv) in g[a.0]
                            .data_mut()
                            .iter_mut()
                            .zip(grad.data())
                            .zip(self.value(*b).data())
                        {
                            *o += gv * bv;
                        }
                        for ((o, &gv), &av) in g[b.0]
                            .data_mut()
                            .iter_mut()
                            .zip(grad.data())
                            .zip(self.value(*a).data())
                        {
                            *o += gv * av;
                        }
                    }
                }
                Op::AddRowBroadcast { a, bias } => {
                    acc_into(&mut g[a.0], grad.data());
                    let n = grad.cols();
                    for i in 0..grad.rows() {
                        let src = grad.row(i);
                        for (o, &v) in g[bias.0].data_mut()[..n].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let cv = T::from_f64c(*c);
                    for (o, &v) in g[a.0].data_mut().iter_mut().zip(grad.data()) {
                        *o += v * cv;
                    }
                }
                Op::DivByScalarNode { a, s } => {
                    let sv = self.value(*s).item();
                    let mut ds = T::zero();
                    // da = g/s ; ds = −Σ g·y / s  with y = a/s (this node's value)
                    for ((o, &gv), &yv) in g[a.0]
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(node.value.data())
                    {
                        *o += gv / sv;
                        ds += gv * yv;
                    }
                    let cur = g[s.0].get(0, 0);
                    g[s.0].set(0, 0, cur - ds / sv);
                }
                Op::Exp { a } => {
                    for ((o, &gv), &yv) in g[a.0]
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(node.value.data())
                    {
                        *o += gv * yv;
                    }
                }
                Op::LnEps { a, eps } => {
                    let e = T::from_f64c(*eps);
                    for ((o, &gv), &xv) in g[a.0]
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(self.value(*a).data())
                    {
                        *o += gv / (xv + e);
                    }
                }
                Op::SoftmaxRows { a } => {
                    let (m, n) = node.value.shape();
                    for i in 0..m {
                        let y = node.value.row(i);
                        let gr = grad.row(i);
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += y[j] * gr[j];
                        }
                        let out = g[a.0].row_mut(i);
                        for j in 0..n {
                            out[j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNormRows { a, gamma, beta } => {
                    let (m, n) = self.value(*a).shape();
                    let eps = T::from_f64c(LN_EPS);
                    let inv_n = T::one() / T::from_f64c(n as f64);
                    for i in 0..m {
                        let x = self.value(*a).row(i);
                        let (mean, var) = mean_var(x);
                        let inv_std = T::one() / (var + eps).sqrt();
                        let gm = self.value(*gamma).row(0);
                        let gr = grad.row(i);
                        // xhat and the two reductions
                        let mut sum_gg = T::zero(); // Σ γ·g
                        let mut sum_ggx = T::zero(); // Σ γ·g·x̂
                        for j in 0..n {
                            let xh = (x[j] - mean) * inv_std;
                            let gg = gm[j] * gr[j];
                            sum_gg += gg;
                            sum_ggx += gg * xh;
                        }
                        for j in 0..n {
                            let xh = (x[j] - mean) * inv_std;
                            let gg = gm[j] * gr[j];
                            g[a.0].row_mut(i)[j] +=
                                inv_std * (gg - inv_n * sum_gg - xh * inv_n * sum_ggx);
                            g[gamma.0].row_mut(0)[j] += gr[j] * xh;
                            g[beta.0].row_mut(0)[j] += gr[j];
                        }
                    }
                }
                Op::Gelu { a } => {
                    let c = T::from_f64c(GELU_C);
                    let aa = T::from_f64c(GELU_A);
                    let half = T::from_f64c(0.5);
                    let three = T::from_f64c(3.0);
                    for ((o, &gv), &x) in g[a.0]
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(self.value(*a).data())
                    {
                        let u = c * (x + aa * x * x * x);
                        let t = u.tanh();
                        let du = c * (T::one() + three * aa * x * x);
                        let d = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
                        *o += gv * d;
                    }
                }
                Op::L2NormalizeRows { a } => {
                    let (m, _) = node.value.shape();
                    for i in 0..m {
                        let x = self.value(*a).row(i);
                        let norm = l2_norm(x);
                        if norm == T::zero() {
                            continue; // zero row: output pinned at zero
                        }
                        let y = node.value.row(i);
                        let gr = grad.row(i);
                        let mut dot = T::zero();
                        for (yv, gv) in y.iter().zip(gr) {
                            dot += *yv * *gv;
                        }
                        let out = g[a.0].row_mut(i);
                        for j in 0..x.len() {
                            out[j] += (gr[j] - y[j] * dot) / norm;
                        }
                    }
                }
                Op::RowScale { a, s } => {
                    let (m, _) = node.value.shape();
                    for i in 0..m {
                        let sv = self.value(*s).get(i, 0);
                        let av = self.value(*a).row(i);
                        let gr = grad.row(i);
                        let mut ds = T::zero();
                        for ((o, &gv), &x) in g[a.0].row_mut(i).iter_mut().zip(gr).zip(av) {
                            *o += gv * sv;
                            ds += gv * x;
                        }
                        let cur = g[s.0].get(i, 0);
                        g[s.0].set(i, 0, cur + ds);
                    }
                }
                Op::Column { a, j } => {
                    for i in 0..grad.rows() {
                        let cur = g[a.0].get(i, *j);
                        g[a.0].set(i, *j, cur + grad.get(i, 0));
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let r = self.value(p).rows();
                        let n = self.value(p).cols();
                        for i in 0..r {
                            for (o, &v) in g[p.0].row_mut(i).iter_mut().zip(grad.row(off + i)) {
                                *o += v;
                            }
                            let _ = n;
                        }
                        off += r;
                    }
                }
                Op::SliceRows { a, start, len } => {
                    for i in 0..*len {
                        for (o, &v) in g[a.0].row_mut(start + i).iter_mut().zip(grad.row(i)) {
                            *o += v;
                        }
                    }
                }
                Op::SliceCols { a, start, len } => {
                    for i in 0..grad.rows() {
                        let dst = &mut g[a.0].row_mut(i)[*start..*start + *len];
                        for (o, &v) in dst.iter_mut().zip(grad.row(i)) {
                            *o += v;
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    for i in 0..grad.rows() {
                        let mut off = 0;
                        for &p in parts {
                            let w = self.value(p).cols();
                            for (o, &v) in g[p.0].row_mut(i).iter_mut().zip(&grad.row(i)[off..off + w])
                            {
                                *o += v;
                            }
                            off += w;
                        }
                    }
                }
                Op::PermuteRows { a, perm } => {
                    for (i, &src) in perm.iter().enumerate() {
                        for (o, &v) in g[a.0].row_mut(src).iter_mut().zip(grad.row(i)) {
                            *o += v;
                        }
                    }
                }
                Op::ColSums { a } => {
                    let rows = self.value(*a).rows();
                    for i in 0..rows {
                        for (o, &v) in g[a.0].row_mut(i).iter_mut().zip(grad.row(0)) {
                            *o += v;
                        }
                    }
                }
                Op::SumAll { a } => {
                    let gv = grad.item();
                    for o in g[a.0].data_mut() {
                        *o += gv;
                    }
                }
                Op::MeanAll { a } => {
                    let len = self.value(*a).len();
                    let gv = grad.item() / T::from_f64c(len as f64);
                    for o in g[a.0].data_mut() {
                        *o += gv;
                    }
                }
                Op::BceWithLogits { a, label } => {
                    let z = self.value(*a).item();
                    let y = T::from_f64c(*label);
                    let sig = T::one() / (T::one() + (-z).exp());
                    let cur = g[a.0].get(0, 0);
                    g[a.0].set(0, 0, cur + grad.item() * (sig - y));
                }
            }
            g[idx] = grad;
        }
        Grads { by_node: g }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn acc_into<T: Real>(dst: &mut Mat<T>, src: &[T]) {
    for (o, &v) in dst.data_mut().iter_mut().zip(src) {
        *o += v;
    }
}

#[inline]
pub(crate) fn softmax_row_inplace<T: Real>(row: &mut [T]) {
    let mut mx = row[0];
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[inline]
fn mean_var<T: Real>(x: &[T]) -> (T, T) {
    let n = T::from_f64c(x.len() as f64);
    let mut mean = T::zero();
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = T::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    (mean, var / n)
}

#[inline]
fn l2_norm<T: Real>(x: &[T]) -> T {
    let mut acc = T::zero();
    for &v in x {
        acc += v * v;
    }
    acc.sqrt()
}
