use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation, used for fault injection and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Tanh,
    Exp,
    Log,
    Sum,
    MaskedSoftmax,
    LogSoftmax,
    MeanPoolColumns,
    Concat,
    Slice,
    Pick,
    Clamp,
    GatherColumns,
}

/// Deliberately wrong backward rule, only used to prove the gradient checker
/// catches broken derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardFault {
    pub op: OpKind,
    pub factor: f64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    MeanPoolColumns(Var, Vec<bool>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Pick(Var, usize),
    Clamp(Var, f64, f64),
    GatherColumns(Var, Vec<usize>, Option<usize>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Sum(_) => OpKind::Sum,
            Op::MaskedSoftmax(_) => OpKind::MaskedSoftmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::MeanPoolColumns(..) => OpKind::MeanPoolColumns,
            Op::Concat(_) => OpKind::Concat,
            Op::Slice(..) => OpKind::Slice,
            Op::Pick(..) => OpKind::Pick,
            Op::Clamp(..) => OpKind::Clamp,
            Op::GatherColumns(..) => OpKind::GatherColumns,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Linear record of every operation of one forward pass.
///
/// Records are appended in evaluation order, so operands always precede
/// their results and a reverse sweep is a valid topological order.
/// A tape is single-owner; run independent passes on independent tapes.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    /// Records a leaf. Gradients are kept if the tensor requires them.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        let value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push(value, op, needs_grad)
    }

    /// Matrix product. `b` may be a matrix `[k, p]` or a vector `[k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.is_empty() || sb.len() > 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let p = if sb.len() == 2 { sb[1] } else { 1 };
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let row = &ad[i * k..(i + 1) * k];
            let dst = &mut out[i * p..(i + 1) * p];
            for (kk, &aik) in row.iter().enumerate() {
                let brow = &bd[kk * p..(kk + 1) * p];
                for (o, &bv) in dst.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        let shape = if sb.len() == 2 { vec![m, p] } else { vec![m] };
        Ok(self.record(shape, out, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (shape, data) = if ta.shape() == tb.shape() {
            let d = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            (ta.shape().to_vec(), d)
        } else if tb.is_scalar() {
            let y = tb.data()[0];
            (ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())
        } else if ta.is_scalar() {
            let x = ta.data()[0];
            (tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        };
        Ok(self.record(shape, data, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        self.record(t.shape().to_vec(), data, Op::Scale(a, c), &[a])
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        self.record(t.shape().to_vec(), data, op, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.record(Vec::new(), vec![s], Op::Sum(a), &[a])
    }

    /// Softmax over positions where `mask` is true; masked positions are zero.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 1 || t.numel() != mask.len() {
            return Err(Error::shape("masked_softmax", t.shape(), &[mask.len()]));
        }
        let out = masked_softmax_values(t.data(), mask)?;
        Ok(self.record(vec![mask.len()], out, Op::MaskedSoftmax(logits), &[logits]))
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let mask = vec![true; self.value(logits).numel()];
        self.masked_softmax(logits, &mask)
    }

    pub fn log_softmax(&mut self, logits: Var) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 1 || t.numel() == 0 {
            return Err(Error::shape("log_softmax", t.shape(), &[]));
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let out = t.data().iter().map(|x| x - lse).collect();
        Ok(self.record(vec![t.numel()], out, Op::LogSoftmax(logits), &[logits]))
    }

    /// Mean over the columns of a `[D, n]` matrix whose mask entry is true.
    pub fn mean_pool_columns(&mut self, m: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(m);
        if t.shape().len() != 2 || t.shape()[1] != mask.len() {
            return Err(Error::shape("mean_pool_columns", t.shape(), &[mask.len()]));
        }
        let valid = mask.iter().filter(|&&b| b).count();
        if valid == 0 {
            return Err(Error::Degenerate("mean pooling over zero valid columns".into()));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let inv = 1.0 / valid as f64;
        let out = (0..rows)
            .map(|r| {
                let row = &t.data()[r * cols..(r + 1) * cols];
                row.iter().zip(mask).filter(|(_, &b)| b).map(|(x, _)| x).sum::<f64>() * inv
            })
            .collect();
        Ok(self.record(vec![rows], out, Op::MeanPoolColumns(m, mask.to_vec()), &[m]))
    }

    /// Concatenates vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 1 {
                return Err(Error::shape("concat", t.shape(), &[]));
            }
            out.extend_from_slice(t.data());
        }
        let n = out.len();
        Ok(self.record(vec![n], out, Op::Concat(parts.to_vec()), parts))
    }

    /// Contiguous sub-vector `[start, start + len)`.
    pub fn slice(&mut self, v: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(v);
        if t.shape().len() != 1 || start + len > t.numel() {
            return Err(Error::shape("slice", t.shape(), &[start, len]));
        }
        let out = t.data()[start..start + len].to_vec();
        Ok(self.record(vec![len], out, Op::Slice(v, start), &[v]))
    }

    /// Single element of a vector as a scalar.
    pub fn pick(&mut self, v: Var, index: usize) -> Result<Var> {
        let t = self.value(v);
        if t.shape().len() != 1 || index >= t.numel() {
            return Err(Error::shape("pick", t.shape(), &[index]));
        }
        let x = t.data()[index];
        Ok(self.record(Vec::new(), vec![x], Op::Pick(v, index), &[v]))
    }

    /// Selects columns of a `[D, N]` matrix. Column `skip` (if given) reads
    /// as zeros and never receives gradient.
    pub fn gather_columns(&mut self, m: Var, indices: &[usize], skip: Option<usize>) -> Result<Var> {
        let t = self.value(m);
        if t.shape().len() != 2 {
            return Err(Error::shape("gather_columns", t.shape(), &[indices.len()]));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(Error::Contract(format!("column index {bad} out of range {cols}")));
        }
        let n = indices.len();
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            for (j, &c) in indices.iter().enumerate() {
                if Some(c) != skip {
                    out[r * n + j] = t.data()[r * cols + c];
                }
            }
        }
        Ok(self.record(
            vec![rows, n],
            out,
            Op::GatherColumns(m, indices.to_vec(), skip),
            &[m],
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every leaf that
    /// requires gradients. Repeated calls add to existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.value(loss).all_finite() {
            return Err(Error::Numerical("loss is not finite".into()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g)?;
                continue;
            }
            let mut g = g;
            if let Some(fault) = self.fault {
                if fault.op == self.nodes[i].op.kind() {
                    g.iter_mut().for_each(|x| *x *= fault.factor);
                }
            }
            self.propagate(i, &g, &mut adj);
        }
        for node in &self.nodes {
            if !node.value.all_finite() {
                return Err(Error::Numerical("non-finite gradient".into()));
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let p = if tb.shape().len() == 2 { tb.shape()[1] } else { 1 };
                if self.needs(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for kk in 0..k {
                            let brow = &tb.data()[kk * p..(kk + 1) * p];
                            da[r * k + kk] = g[r * p..(r + 1) * p]
                                .iter()
                                .zip(brow)
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    send(*a, da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * p];
                    for r in 0..m {
                        let grow = &g[r * p..(r + 1) * p];
                        for kk in 0..k {
                            let aik = ta.data()[r * k + kk];
                            for (d, gv) in db[kk * p..(kk + 1) * p].iter_mut().zip(grow) {
                                *d += aik * gv;
                            }
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                send(*a, reduce_broadcast(g, self.value(*a).numel(), 1.0));
                send(*b, reduce_broadcast(g, self.value(*b).numel(), sign));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let full: Vec<f64> = (0..g.len()).map(|j| g[j] * bcast(tb.data(), j)).collect();
                    send(*a, reduce_broadcast(&full, ta.numel(), 1.0));
                }
                if self.needs(*b) {
                    let full: Vec<f64> = (0..g.len()).map(|j| g[j] * bcast(ta.data(), j)).collect();
                    send(*b, reduce_broadcast(&full, tb.numel(), 1.0));
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|x| x * c).collect()),
            Op::Tanh(a) => send(*a, g.iter().zip(out).map(|(x, y)| x * (1.0 - y * y)).collect()),
            Op::Exp(a) => send(*a, g.iter().zip(out).map(|(x, y)| x * y).collect()),
            Op::Log(a) => {
                let ta = self.value(*a);
                send(*a, g.iter().zip(ta.data()).map(|(x, y)| x / y).collect())
            }
            Op::Clamp(a, lo, hi) => {
                let ta = self.value(*a);
                let d = g
                    .iter()
                    .zip(ta.data())
                    .map(|(x, &y)| if y < *lo || y > *hi { 0.0 } else { *x })
                    .collect();
                send(*a, d)
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).numel()]),
            Op::MaskedSoftmax(a) => {
                // dx_i = y_i (g_i − Σ_j g_j y_j); masked positions have y = 0.
                let dot: f64 = g.iter().zip(out).map(|(x, y)| x * y).sum();
                send(*a, g.iter().zip(out).map(|(x, y)| y * (x - dot)).collect())
            }
            Op::LogSoftmax(a) => {
                let total: f64 = g.iter().sum();
                send(*a, g.iter().zip(out).map(|(x, y)| x - y.exp() * total).collect())
            }
            Op::MeanPoolColumns(m, mask) => {
                let rows = g.len();
                let cols = mask.len();
                let inv = 1.0 / mask.iter().filter(|&&b| b).count() as f64;
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    for (c, &valid) in mask.iter().enumerate() {
                        if valid {
                            d[r * cols + c] = g[r] * inv;
                        }
                    }
                }
                send(*m, d)
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    send(*p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Slice(v, start) => {
                let mut d = vec![0.0; self.value(*v).numel()];
                d[*start..*start + g.len()].copy_from_slice(g);
                send(*v, d)
            }
            Op::Pick(v, index) => {
                let mut d = vec![0.0; self.value(*v).numel()];
                d[*index] = g[0];
                send(*v, d)
            }
            Op::GatherColumns(m, indices, skip) => {
                let tm = self.value(*m);
                let (rows, cols) = (tm.shape()[0], tm.shape()[1]);
                let n = indices.len();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    for (j, &c) in indices.iter().enumerate() {
                        if Some(c) != *skip {
                            d[r * cols + c] += g[r * n + j];
                        }
                    }
                }
                send(*m, d)
            }
        }
    }
}

fn bcast(data: &[f64], j: usize) -> f64 {
    if data.len() == 1 {
        data[0]
    } else {
        data[j]
    }
}

fn reduce_broadcast(g: &[f64], target_len: usize, sign: f64) -> Vec<f64> {
    if target_len == g.len() {
        g.iter().map(|x| x * sign).collect()
    } else {
        vec![g.iter().sum::<f64>() * sign]
    }
}

/// Plain-value masked softmax shared by the tape op and the inference path.
pub(crate) fn masked_softmax_values(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Degenerate("softmax over an all-false mask".into()));
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(x, &m)| if m { (x - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    Ok(out)
}
