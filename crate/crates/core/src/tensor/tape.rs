use super::kernels::{self, gelu_grad, gelu_scalar, matmul_nt, matmul_tn, softmax_in_place};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    ScaleCols(Var, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var, Vec<usize>),
    Diag(Var),
    NormalizeRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        ignore: usize,
        count: usize,
        probs: Vec<T>,
    },
    Nll {
        probs: Var,
        labels: Vec<usize>,
        ignore: usize,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Records ops in execution order. Backward replays the record in reverse.
///
/// The tape also counts the multiply-accumulates executed by forward
/// matrix products, which is the instrumented side of the cost model.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    macs: u64,
    empty_loss_events: usize,
}

const NLL_FLOOR: f64 = 1e-30;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            macs: 0,
            empty_loss_events: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward multiply-accumulates executed by `matmul` so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Number of losses evaluated over an empty (fully ignored) label set.
    pub fn empty_loss_events(&self) -> usize {
        self.empty_loss_events
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
            grad: None,
        });
        Var(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2(op)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].needs_grad);
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
            grad: None,
        });
        Ok(Var(id))
    }

    fn parents(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRowBias(a, b) | Op::ScaleBy(a, b) | Op::ScaleCols(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::SoftmaxRows(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _)
            | Op::SliceCols(a, _)
            | Op::MeanRows(a, _)
            | Op::Diag(a)
            | Op::NormalizeRows(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Nll { probs, .. } => vec![*probs],
        }
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.dims2(a, "matmul")?;
        let (p2, n) = self.dims2(b, "matmul")?;
        if p != p2 {
            return Err(Error::shape("matmul", format!("[{m}x{p}] · [{p2}x{n}]")));
        }
        let c = kernels::matmul(self.value(a).data(), self.value(b).data(), m, p, n);
        self.macs += (m * p * n) as u64;
        let value = Tensor::new(vec![m, n], c)?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let data = kernels::transpose(self.value(a).data(), r, c);
        let value = Tensor::new(vec![c, r], data)?;
        self.push("transpose", value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b))
    }

    /// `x[n×d] + b[d]`, the bias added to every row.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "add_row_bias")?;
        let vb = self.value(b);
        if vb.numel() != d {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias of {} for width {d}", vb.numel()),
            ));
        }
        let bias = vb.data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, &bj) in row.iter_mut().zip(&bias) {
                *v += bj;
            }
        }
        let value = Tensor::new(vec![n, d], data)?;
        self.push("add_row_bias", value, Op::AddRowBias(x, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::c(s);
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * s).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale(x, s))
    }

    /// Multiplies every element of `x` by the single-element var `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", "scale must hold one element"));
        }
        let sv = self.value(s).item();
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * sv).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("scale_by", value, Op::ScaleBy(x, s))
    }

    /// `y[i,j] = x[i,j] · s[j]`.
    pub fn scale_cols(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "scale_cols")?;
        if self.value(s).numel() != d {
            return Err(Error::shape(
                "scale_cols",
                format!("{} scales for width {d}", self.value(s).numel()),
            ));
        }
        let sv = self.value(s).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, &sj) in row.iter_mut().zip(&sv) {
                *v *= sj;
            }
        }
        let value = Tensor::new(vec![n, d], data)?;
        self.push("scale_cols", value, Op::ScaleCols(x, s))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "softmax_rows")?;
        if d == 0 {
            return Err(Error::shape("softmax_rows", "zero-width rows"));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(vec![n, d], data)?;
        self.push("softmax_rows", value, Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims2(x, "layer_norm")?;
        if d == 0 || eps <= 0.0 {
            return Err(Error::shape("layer_norm", "need d >= 1 and eps > 0"));
        }
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("layer_norm", "affine parameters must have width d"));
        }
        let eps = T::c(eps);
        let dn = T::c(d as f64);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let src = self.value(x).data();
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu_scalar(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("gelu", value, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("sigmoid", value, Op::Sigmoid(x))
    }

    /// Row `i` of the output is row `idx[i]` of `x`. Duplicates allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x, "gather_rows")?;
        let src = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    len: n,
                });
            }
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(vec![idx.len(), d], data)?;
        self.push("gather_rows", value, Op::GatherRows(x, idx.to_vec()))
    }

    /// Inverse of a distinct-index gather: row `i` of `x` lands at row
    /// `idx[i]` of an `n`-row zero tensor.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var> {
        let (m, d) = self.dims2(x, "scatter_rows")?;
        if idx.len() != m {
            return Err(Error::shape("scatter_rows", "one index per input row"));
        }
        let mut seen = vec![false; n];
        let mut data = vec![T::zero(); n * d];
        let src = self.value(x);
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::Index {
                    op: "scatter_rows",
                    index: i,
                    len: n,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::shape("scatter_rows", format!("duplicate index {i}")));
            }
            data[i * d..(i + 1) * d].copy_from_slice(src.row(r));
        }
        let value = Tensor::new(vec![n, d], data)?;
        self.push("scatter_rows", value, Op::ScatterRows(x, idx.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims2(x, "slice_cols")?;
        if start + len > d {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) exceeds width {d}", start + len),
            ));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![n, len], data)?;
        self.push("slice_cols", value, Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_cols"))?;
        let n = self.dims2(first, "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != n {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![n, total], data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_rows"))?;
        let d = self.dims2(first, "concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != d {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, d], data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()))
    }

    /// Mean of the selected rows as a `[1×d]` tensor.
    pub fn mean_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x, "mean_rows")?;
        if idx.is_empty() {
            return Err(Error::EmptyInput("mean_rows"));
        }
        let src = self.value(x);
        let mut acc = vec![T::zero(); d];
        for &i in idx {
            if i >= n {
                return Err(Error::Index {
                    op: "mean_rows",
                    index: i,
                    len: n,
                });
            }
            for (a, &v) in acc.iter_mut().zip(src.row(i)) {
                *a += v;
            }
        }
        let inv = T::one() / T::c(idx.len() as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
        let value = Tensor::new(vec![1, d], acc)?;
        self.push("mean_rows", value, Op::MeanRows(x, idx.to_vec()))
    }

    /// Diagonal of a square matrix as a 1-D tensor.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "diag")?;
        if r != c {
            return Err(Error::shape("diag", format!("non-square [{r}x{c}]")));
        }
        let src = self.value(x);
        let data = (0..r).map(|i| src.at(i, i)).collect();
        let value = Tensor::new(vec![r], data)?;
        self.push("diag", value, Op::Diag(x))
    }

    /// Divides each row by its sum.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "normalize_rows")?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            let s: T = row.iter().copied().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(vec![n, d], data)?;
        self.push("normalize_rows", value, Op::NormalizeRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    fn check_labels(
        &self,
        op: &'static str,
        n: usize,
        k: usize,
        labels: &[usize],
        ignore: usize,
    ) -> Result<usize> {
        if labels.len() != n {
            return Err(Error::shape(op, format!("{} labels for {n} rows", labels.len())));
        }
        let mut count = 0;
        for &l in labels {
            if l == ignore {
                continue;
            }
            if l >= k {
                return Err(Error::Label { label: l, classes: k });
            }
            count += 1;
        }
        Ok(count)
    }

    /// Mean negative log-softmax of the labelled class over rows whose
    /// label is not `ignore`. An all-ignored batch yields 0 and bumps
    /// [`Tape::empty_loss_events`].
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], ignore: usize) -> Result<Var> {
        let (n, k) = self.dims2(logits, "cross_entropy")?;
        let count = self.check_labels("cross_entropy", n, k, labels, ignore)?;
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (i, row) in probs.chunks_mut(k).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            if labels[i] != ignore {
                loss += lse - row[labels[i]];
            }
            softmax_in_place(row);
        }
        if count == 0 {
            self.empty_loss_events += 1;
            log::warn!("cross_entropy over an empty label set, loss defined as 0");
        } else {
            loss /= T::c(count as f64);
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore,
                count,
                probs,
            },
        )
    }

    /// Mean `-ln p[label]` for rows that already hold probabilities.
    pub fn nll(&mut self, probs: Var, labels: &[usize], ignore: usize) -> Result<Var> {
        let (n, k) = self.dims2(probs, "nll")?;
        let count = self.check_labels("nll", n, k, labels, ignore)?;
        let p = self.value(probs);
        let floor = T::c(NLL_FLOOR);
        let mut loss = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            if l != ignore {
                loss -= p.at(i, l).max(floor).ln();
            }
        }
        if count == 0 {
            self.empty_loss_events += 1;
            log::warn!("nll over an empty label set, loss defined as 0");
        } else {
            loss /= T::c(count as f64);
        }
        self.push(
            "nll",
            Tensor::scalar(loss),
            Op::Nll {
                probs,
                labels: labels.to_vec(),
                ignore,
                count,
            },
        )
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar loss. Every `requires_grad` leaf that
    /// the loss depends on receives its gradient (accumulated if a
    /// gradient is already present).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                if node.requires_grad {
                    match &mut node.grad {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .for_each(|(a, &b)| *a += b),
                        None => node.grad = Some(g),
                    }
                }
                continue;
            }
            for (parent, pg) in self.local_grads(i, &g)? {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(pg.data())
                        .for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, p) = self.val(*a).dims2("matmul")?;
                let n = self.val(*b).cols();
                if self.needs(*a) {
                    let da = matmul_nt(gd, self.val(*b).data(), m, n, p);
                    res.push((*a, Tensor::new(vec![m, p], da)?));
                }
                if self.needs(*b) {
                    let db = matmul_tn(self.val(*a).data(), gd, m, p, n);
                    res.push((*b, Tensor::new(vec![p, n], db)?));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.val(*a).dims2("transpose")?;
                res.push((*a, Tensor::new(vec![r, c], kernels::transpose(gd, c, r))?));
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let da = gd.iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                let db = gd.iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                res.push((*a, Tensor::new(va.shape().to_vec(), da)?));
                res.push((*b, Tensor::new(vb.shape().to_vec(), db)?));
            }
            Op::AddRowBias(x, b) => {
                let d = out.cols();
                res.push((*x, g.clone()));
                if self.needs(*b) {
                    let mut db = vec![T::zero(); d];
                    for row in gd.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    res.push((*b, Tensor::new(self.val(*b).shape().to_vec(), db)?));
                }
            }
            Op::Scale(x, s) => {
                let dx = gd.iter().map(|&v| v * *s).collect();
                res.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
            }
            Op::ScaleBy(x, s) => {
                let sv = self.val(*s).item();
                let dx = gd.iter().map(|&v| v * sv).collect();
                res.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
                let ds: T = gd.iter().zip(self.val(*x).data()).map(|(&a, &b)| a * b).sum();
                res.push((*s, Tensor::new(self.val(*s).shape().to_vec(), vec![ds])?));
            }
            Op::ScaleCols(x, s) => {
                let d = out.cols();
                let sv = self.val(*s).data();
                let xv = self.val(*x).data();
                let mut dx = vec![T::zero(); gd.len()];
                let mut ds = vec![T::zero(); d];
                for (r, grow) in gd.chunks(d).enumerate() {
                    for j in 0..d {
                        dx[r * d + j] = grow[j] * sv[j];
                        ds[j] += grow[j] * xv[r * d + j];
                    }
                }
                res.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
                res.push((*s, Tensor::new(self.val(*s).shape().to_vec(), ds)?));
            }
            Op::SoftmaxRows(x) => {
                let d = out.cols();
                let mut dx = vec![T::zero(); gd.len()];
                for ((drow, grow), yrow) in dx.chunks_mut(d).zip(gd.chunks(d)).zip(out.data().chunks(d)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                res.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let gam = self.val(*gamma).data();
                let dn = T::c(d as f64);
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); gd.len()];
                for (r, grow) in gd.chunks(d).enumerate() {
                    let h = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..d {
                        dgamma[j] += grow[j] * h[j];
                        dbeta[j] += grow[j];
                        let dh = grow[j] * gam[j];
                        sum_dh += dh;
                        sum_dh_h += dh * h[j];
                    }
                    let scale = rstd[r] / dn;
                    for j in 0..d {
                        let dh = grow[j] * gam[j];
                        dx[r * d + j] = scale * (dn * dh - sum_dh - h[j] * sum_dh_h);
                    }
                }
                res.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
                res.push((*gamma, Tensor::new(self.val(*gamma).shape().to_vec(), dgamma)?));
                res.push((*beta, Tensor::new(self.val(*beta).shape().to_vec(), dbeta)?));
            }
            Op::Gelu(x) => {
                let dx = gd
                    .iter()
                    .zip(self.val(*x).data())
                    .map(|(&gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                res.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
            }
            Op::Sigmoid(x) => {
                let dx = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                res.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
            }
            Op::GatherRows(x, idx) => {
                let src = self.val(*x);
                let d = src.cols();
                let mut dx = vec![T::zero(); src.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut dx[i * d..(i + 1) * d];
                    dst.iter_mut().zip(&gd[r * d..(r + 1) * d]).for_each(|(a, &v)| *a += v);
                }
                res.push((*x, Tensor::new(src.shape().to_vec(), dx)?));
            }
            Op::ScatterRows(x, idx) => {
                let d = out.cols();
                let mut dx = Vec::with_capacity(idx.len() * d);
                for &i in idx {
                    dx.extend_from_slice(&gd[i * d..(i + 1) * d]);
                }
                res.push((*x, Tensor::new(vec![idx.len(), d], dx)?));
            }
            Op::SliceCols(x, start) => {
                let (n, d) = self.val(*x).dims2("slice_cols")?;
                let len = out.cols();
                let mut dx = vec![T::zero(); n * d];
                for r in 0..n {
                    dx[r * d + start..r * d + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                res.push((*x, Tensor::new(vec![n, d], dx)?));
            }
            Op::ConcatCols(parts) => {
                let (n, total) = out.dims2("concat_cols")?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    let mut dp = Vec::with_capacity(n * w);
                    for r in 0..n {
                        dp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    res.push((p, Tensor::new(vec![n, w], dp)?));
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).numel();
                    let dp = gd[offset..offset + len].to_vec();
                    offset += len;
                    res.push((p, Tensor::new(self.val(p).shape().to_vec(), dp)?));
                }
            }
            Op::MeanRows(x, idx) => {
                let src = self.val(*x);
                let d = src.cols();
                let inv = T::one() / T::c(idx.len() as f64);
                let mut dx = vec![T::zero(); src.numel()];
                for &i in idx {
                    dx[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(gd)
                        .for_each(|(a, &v)| *a += v * inv);
                }
                res.push((*x, Tensor::new(src.shape().to_vec(), dx)?));
            }
            Op::Diag(x) => {
                let n = out.numel();
                let mut dx = vec![T::zero(); n * n];
                for i in 0..n {
                    dx[i * n + i] = gd[i];
                }
                res.push((*x, Tensor::new(vec![n, n], dx)?));
            }
            Op::NormalizeRows(x) => {
                let d = out.cols();
                let xv = self.val(*x).data();
                let mut dx = vec![T::zero(); gd.len()];
                for r in 0..out.rows() {
                    let s: T = xv[r * d..(r + 1) * d].iter().copied().sum();
                    let y = &out.data()[r * d..(r + 1) * d];
                    let grow = &gd[r * d..(r + 1) * d];
                    let dot: T = grow.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (grow[j] - dot) / s;
                    }
                }
                res.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
            }
            Op::Sum(x) => {
                let gv = g.item();
                res.push((*x, Tensor::filled(self.val(*x).shape(), gv)));
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                count,
                probs,
            } => {
                let k = self.val(*logits).cols();
                let mut dx = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let scale = g.item() / T::c(*count as f64);
                    for (r, &l) in labels.iter().enumerate() {
                        if l == *ignore {
                            continue;
                        }
                        for j in 0..k {
                            let onehot = if j == l { T::one() } else { T::zero() };
                            dx[r * k + j] = (probs[r * k + j] - onehot) * scale;
                        }
                    }
                }
                res.push((*logits, Tensor::new(self.val(*logits).shape().to_vec(), dx)?));
            }
            Op::Nll {
                probs,
                labels,
                ignore,
                count,
            } => {
                let pv = self.val(*probs);
                let k = pv.cols();
                let mut dx = vec![T::zero(); pv.numel()];
                if *count > 0 {
                    let scale = g.item() / T::c(*count as f64);
                    let floor = T::c(NLL_FLOOR);
                    for (r, &l) in labels.iter().enumerate() {
                        if l == *ignore {
                            continue;
                        }
                        let p = pv.at(r, l);
                        if p > floor {
                            dx[r * k + l] = -scale / p;
                        }
                    }
                }
                res.push((*probs, Tensor::new(pv.shape().to_vec(), dx)?));
            }
        }
        Ok(res)
    }
}
