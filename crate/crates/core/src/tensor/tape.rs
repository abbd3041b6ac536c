use std::sync::Arc;

use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    CausalConv { x: Var, kernel: Var },
    Softmax { x: Var },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Hadamard(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Concat(Vec<Var>),
    Scale(Var, f64),
    ScaleBy { s: Var, x: Var },
    AddRowBias { x: Var, bias: Var },
    BroadcastRows { v: Var },
    Sum(Var),
    Reshape(Var),
    Select { x: Var, index: usize },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Hadamard(a, b) | Op::Add(a, b) | Op::Sub(a, b) => vec![*a, *b],
            Op::CausalConv { x, kernel } => vec![*x, *kernel],
            Op::ScaleBy { s, x } => vec![*s, *x],
            Op::AddRowBias { x, bias } => vec![*x, *bias],
            Op::Concat(xs) => xs.clone(),
            Op::Transpose(x)
            | Op::Softmax { x, .. }
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Scale(x, _)
            | Op::BroadcastRows { v: x }
            | Op::Sum(x)
            | Op::Reshape(x)
            | Op::Select { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
}

/// Wengert list of recorded operations.
///
/// Nodes are appended in creation order, so the list is already topologically
/// sorted; `backward` walks it in reverse exactly once. A tape is meant to stay
/// on one thread; independent forward passes each get their own tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the leaves that were registered with `requires_grad`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::ShapeMismatch { op, left: s.to_vec(), right: vec![0, 0] }),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        if cfg!(debug_assertions) {
            let finite_in = inputs.iter().all(|v| self.nodes[v.0].value.is_finite());
            debug_assert!(!finite_in || value.is_finite(), "non-finite output from finite inputs in {op:?}");
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, requires_grad: false, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", ta)?;
        let (k2, n) = dims2("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), m, k, n, &mut out);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims2("transpose", t)?;
        let out = transpose_data(t.data(), r, c);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a)))
    }

    /// Length-preserving causal 1-D convolution over the time axis.
    ///
    /// `x` is `[T × C_in]`, `kernel` is `[k × C_in × C_out]`; output row `t`
    /// reads input rows `t-k+1 ..= t`, with zeros standing in for rows before 0.
    pub fn conv1d_causal(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (t_len, c_in) = dims2("conv1d_causal", tx)?;
        let (k, kc_in, c_out) = match tk.shape() {
            [k, ci, co] if *k >= 1 => (*k, *ci, *co),
            _ => return Err(shape_err("conv1d_causal", tx, tk)),
        };
        if kc_in != c_in {
            return Err(shape_err("conv1d_causal", tx, tk));
        }
        let mut out = vec![0.0; t_len * c_out];
        conv_forward(tx.data(), tk.data(), t_len, c_in, c_out, k, &mut out);
        Ok(self.push(Tensor::new(&[t_len, c_out], out)?, Op::CausalConv { x, kernel }))
    }

    /// Row-wise softmax of `logits + mask`, where the mask holds `0` or `-inf`.
    pub fn softmax_masked(&mut self, logits: Var, mask: Option<Arc<Tensor>>) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = dims2("softmax_masked", t)?;
        if let Some(m) = &mask {
            if m.shape() != t.shape() {
                return Err(shape_err("softmax_masked", t, m));
            }
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let mrow = mask.as_ref().map(|m| &m.data()[i * c..(i + 1) * c]);
            let open = |j: usize| mrow.map_or(true, |m| m[j] != f64::NEG_INFINITY);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if open(j) {
                    max = max.max(v);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::DegenerateMask { row: i });
            }
            let orow = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if open(j) {
                    let e = (v - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::Softmax { x: logits }))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, op)
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
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
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("hadamard", a, b, |x, y| x * y, Op::Hadamard(a, b))
    }

    /// Concatenates along the trailing dimension; leading dimensions must agree.
    pub fn concat_lastdim(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let base = self.value(*first);
        if base.ndim() == 0 {
            return Err(TensorError::Invalid("concat of scalars".into()));
        }
        let lead = base.shape()[..base.ndim() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            if t.ndim() != base.ndim() || t.shape()[..t.ndim() - 1] != lead[..] {
                return Err(shape_err("concat_lastdim", base, t));
            }
            widths.push(*t.shape().last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let d = self.value(x).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Tensor { shape, data: out }, Op::Concat(xs.to_vec())))
    }

    /// Multiplies `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(shape_err("scale_by", ts, self.value(x)));
        }
        let c = ts.item();
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * c).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::ScaleBy { s, x }))
    }

    /// Adds a `[C]` bias to every trailing-dimension row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tb.len();
        if tb.ndim() != 1 || tx.ndim() == 0 || *tx.shape().last().unwrap() != c {
            return Err(shape_err("add_row_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::AddRowBias { x, bias }))
    }

    /// Repeats a `[C]` vector into `rows` rows of a `[rows × C]` matrix.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let t = self.value(v);
        if t.ndim() != 1 {
            return Err(shape_err("broadcast_rows", t, t));
        }
        let c = t.len();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor { shape: vec![rows, c], data }, Op::BroadcastRows { v }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Picks flat element `index` as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let v = *t.data().get(index).ok_or_else(|| {
            TensorError::Invalid(format!("select index {index} out of range for {:?}", t.shape()))
        })?;
        Ok(self.push(Tensor::scalar(v), Op::Select { x, index }))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: root.value.shape().to_vec() });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (node.requires_grad, g) {
                (true, Some(data)) => Some(Tensor { shape: node.value.shape().to_vec(), data }),
                (true, None) => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                acc(*a, &mut |ga| matmul_a_bt_acc(g, tb.data(), m, n, k, ga));
                acc(*b, &mut |gb| matmul_at_b_acc(ta.data(), g, m, k, n, gb));
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                // g is [c × r]
                acc(*a, &mut |ga| {
                    for i in 0..c {
                        for j in 0..r {
                            ga[j * c + i] += g[i * r + j];
                        }
                    }
                });
            }
            Op::CausalConv { x, kernel } => {
                let (tx, tk) = (val(*x), val(*kernel));
                let (t_len, c_in) = (tx.shape()[0], tx.shape()[1]);
                let (k, c_out) = (tk.shape()[0], tk.shape()[2]);
                acc(*x, &mut |gx| conv_backward_input(g, tk.data(), t_len, c_in, c_out, k, gx));
                acc(*kernel, &mut |gk| conv_backward_kernel(g, tx.data(), t_len, c_in, c_out, k, gk));
            }
            Op::Softmax { x, .. } => {
                let p = node.value.data();
                let c = node.value.shape()[1];
                acc(*x, &mut |gx| {
                    for ((prow, grow), gxrow) in p.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxrow[j] += prow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xin = val(*x).data();
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        if xin[j] > 0.0 {
                            gx[j] += g[j];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                });
            }
            Op::Hadamard(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| axpy_mul(ga, g, db));
                acc(*b, &mut |gb| axpy_mul(gb, g, da));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g, 1.0));
                acc(*b, &mut |gb| add_into(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g, 1.0));
                acc(*b, &mut |gb| add_into(gb, g, -1.0));
            }
            Op::Concat(xs) => {
                let total = *node.value.shape().last().unwrap();
                let rows = node.value.len() / total.max(1);
                let mut offset = 0;
                for &x in xs {
                    let w = *val(x).shape().last().unwrap();
                    acc(x, &mut |gx| {
                        for r in 0..rows {
                            add_into(
                                &mut gx[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                                1.0,
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| add_into(gx, g, *c)),
            Op::ScaleBy { s, x } => {
                let c = val(*s).item();
                let xd = val(*x).data();
                if wants(*s) {
                    let d: f64 = g.iter().zip(xd).map(|(a, b)| a * b).sum();
                    acc(*s, &mut |gs| gs[0] += d);
                }
                acc(*x, &mut |gx| add_into(gx, g, c));
            }
            Op::AddRowBias { x, bias } => {
                let c = val(*bias).len();
                acc(*x, &mut |gx| add_into(gx, g, 1.0));
                acc(*bias, &mut |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row, 1.0);
                    }
                });
            }
            Op::BroadcastRows { v } => {
                let c = val(*v).len();
                acc(*v, &mut |gv| {
                    for row in g.chunks(c) {
                        add_into(gv, row, 1.0);
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += s));
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g, 1.0)),
            Op::Select { x, index } => acc(*x, &mut |gx| gx[*index] += g[0]),
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn axpy_mul(dst: &mut [f64], a: &[f64], b: &[f64]) {
    for ((d, x), y) in dst.iter_mut().zip(a).zip(b) {
        *d += x * y;
    }
}

fn transpose_data(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}

/// out[m×n] += a[m×k] · b[k×n]
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            add_into(orow, &b[p * n..(p + 1) * n], av);
        }
    }
}

/// out[m×k] += c[m×n] · b[k×n]ᵀ
fn matmul_a_bt_acc(c: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += crow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · c[m×n]
fn matmul_at_b_acc(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            add_into(&mut out[p * n..(p + 1) * n], crow, av);
        }
    }
}

fn conv_forward(x: &[f64], w: &[f64], t_len: usize, c_in: usize, c_out: usize, k: usize, out: &mut [f64]) {
    for t in 0..t_len {
        let orow = &mut out[t * c_out..(t + 1) * c_out];
        for j in 0..k {
            let Some(src) = (t + j).checked_sub(k - 1) else { continue };
            for i in 0..c_in {
                let xv = x[src * c_in + i];
                if xv == 0.0 {
                    continue;
                }
                let base = (j * c_in + i) * c_out;
                add_into(orow, &w[base..base + c_out], xv);
            }
        }
    }
}

fn conv_backward_input(
    g: &[f64],
    w: &[f64],
    t_len: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    gx: &mut [f64],
) {
    for t in 0..t_len {
        let grow = &g[t * c_out..(t + 1) * c_out];
        for j in 0..k {
            let Some(src) = (t + j).checked_sub(k - 1) else { continue };
            for i in 0..c_in {
                let base = (j * c_in + i) * c_out;
                gx[src * c_in + i] +=
                    grow.iter().zip(&w[base..base + c_out]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

fn conv_backward_kernel(
    g: &[f64],
    x: &[f64],
    t_len: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    gw: &mut [f64],
) {
    for t in 0..t_len {
        let grow = &g[t * c_out..(t + 1) * c_out];
        for j in 0..k {
            let Some(src) = (t + j).checked_sub(k - 1) else { continue };
            for i in 0..c_in {
                let xv = x[src * c_in + i];
                if xv == 0.0 {
                    continue;
                }
                let base = (j * c_in + i) * c_out;
                add_into(&mut gw[base..base + c_out], grow, xv);
            }
        }
    }
}
