//! Reverse-mode tape whose backward pass is recorded as ordinary forward ops.
//!
//! Every backward rule below is written in terms of tape ops, so a gradient
//! returned by [`Tape::grad`] is itself a node on the tape and can be
//! differentiated again. This is what lets a loss contain the norm of an
//! input gradient (the WGAN-GP penalty) and still be optimized w.r.t. the
//! network parameters.
//!
//! Nodes are appended in creation order, which is a topological order, so a
//! backward sweep just walks ids downwards.

use std::rc::Rc;

use super::array::{self, ConvGeom, Tensor};
use super::TensorError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Rc<Tensor>),
    MatMul(Var, Var),
    Transpose(Var),
    Conv(Var, Var, ConvGeom),
    ConvT(Var, Var, ConvGeom),
    ConvW(Var, Var, ConvGeom),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    InvOrZero(Var),
    RowNorm(Var),
    Reshape(Var),
    SumAll(Var),
    ExpandScalar(Var),
    ReduceRows(Var),
    ExpandRows(Var),
    ReduceChannels(Var),
    ExpandChannels(Var),
    Gather(Var, Rc<Vec<usize>>),
    ScatterAdd(Var, Rc<Vec<usize>>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulConst(..) => "mul_const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Conv(..) => "conv2d",
            Op::ConvT(..) => "conv2d_transpose",
            Op::ConvW(..) => "conv2d_weight",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Square(..) => "square",
            Op::InvOrZero(..) => "inv_or_zero",
            Op::RowNorm(..) => "row_norm",
            Op::Reshape(..) => "reshape",
            Op::SumAll(..) => "sum",
            Op::ExpandScalar(..) => "expand_scalar",
            Op::ReduceRows(..) => "reduce_rows",
            Op::ExpandRows(..) => "expand_rows",
            Op::ReduceChannels(..) => "reduce_channels",
            Op::ExpandChannels(..) => "expand_channels",
            Op::Gather(..) => "gather",
            Op::ScatterAdd(..) => "scatter_add",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded recording of tensor operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

type Res = Result<Var, TensorError>;

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
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

    /// Drops every node created after `len`. Handles above it become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input tensor. Non-finite values are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Res {
        if !value.is_finite() {
            return Err(TensorError::NumericalFault { op: "leaf" });
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Res {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Res {
        if !value.is_finite() {
            return Err(TensorError::NumericalFault { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Res {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Res {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Res {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// Elementwise product with a tensor that is not differentiated.
    pub fn mul_const(&mut self, a: Var, c: Rc<Tensor>) -> Res {
        if self.shape(a) != c.shape() {
            return Err(mismatch("mul_const", format!("{:?} vs {:?}", self.shape(a), c.shape())));
        }
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(v, Op::MulConst(a, c), &[a])
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Res {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = array::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Res {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(mismatch("transpose", format!("{s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let data = array::transpose(self.value(a).data(), r, c);
        self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), &[a])
    }

    /// Strided, zero-padded 2-D convolution: `x[n,c,h,w]`, `w[o,c,k,k]` → `[n,o,h',w']`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Res {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(mismatch("conv2d", format!("x {sx:?} w {sw:?}")));
        }
        let k = sw[2];
        let (oh, ow) = match (ConvGeom::conv_out(sx[2], k, stride, pad), ConvGeom::conv_out(sx[3], k, stride, pad)) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(mismatch("conv2d", format!("kernel {k} does not fit {sx:?}"))),
        };
        let g = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            out_ch: sw[0],
            in_h: sx[2],
            in_w: sx[3],
            out_h: oh,
            out_w: ow,
            kernel: k,
            stride,
            pad,
        };
        self.conv_raw(x, w, g)
    }

    /// Transposed convolution: `y[n,i,h,w]`, `w[i,o,k,k]` → `[n,o,h',w']` where
    /// `h' = (h−1)·stride + k − 2·pad`.
    pub fn conv2d_transpose(&mut self, y: Var, w: Var, stride: usize, pad: usize) -> Res {
        let (sy, sw) = (self.shape(y), self.shape(w));
        if sy.len() != 4 || sw.len() != 4 || sy[1] != sw[0] || sw[2] != sw[3] {
            return Err(mismatch("conv2d_transpose", format!("y {sy:?} w {sw:?}")));
        }
        let k = sw[2];
        let (h, wd) = match (
            ConvGeom::transpose_out(sy[2], k, stride, pad),
            ConvGeom::transpose_out(sy[3], k, stride, pad),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(mismatch("conv2d_transpose", format!("degenerate output for {sy:?}"))),
        };
        // As the input-adjoint of a convolution from `[n,o,h',w']` to `y`'s shape.
        let g = ConvGeom {
            batch: sy[0],
            in_ch: sw[1],
            out_ch: sw[0],
            in_h: h,
            in_w: wd,
            out_h: sy[2],
            out_w: sy[3],
            kernel: k,
            stride,
            pad,
        };
        if ConvGeom::conv_out(h, k, stride, pad) != Some(sy[2]) {
            return Err(mismatch("conv2d_transpose", format!("inconsistent geometry for {sy:?}")));
        }
        self.conv_t_raw(y, w, g)
    }

    fn conv_raw(&mut self, x: Var, w: Var, g: ConvGeom) -> Res {
        let data = array::conv2d(self.value(x).data(), self.value(w).data(), &g);
        self.push(Tensor::new(g.output_shape().to_vec(), data)?, Op::Conv(x, w, g), &[x, w])
    }

    fn conv_t_raw(&mut self, y: Var, w: Var, g: ConvGeom) -> Res {
        let data = array::conv2d_transpose(self.value(y).data(), self.value(w).data(), &g);
        self.push(Tensor::new(g.input_shape().to_vec(), data)?, Op::ConvT(y, w, g), &[y, w])
    }

    fn conv_w_raw(&mut self, x: Var, y: Var, g: ConvGeom) -> Res {
        let data = array::conv2d_weight(self.value(x).data(), self.value(y).data(), &g);
        self.push(Tensor::new(g.weight_shape().to_vec(), data)?, Op::ConvW(x, y, g), &[x, y])
    }

    pub fn tanh(&mut self, a: Var) -> Res {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Res {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Res {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Res {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    /// `1/x`, with `1/0` taken as `0`. Only used where a zero denominator
    /// means a zero numerator (the derivative of a norm at the origin).
    fn inv_or_zero(&mut self, a: Var) -> Res {
        let v = self.value(a).map(|x| if x == 0.0 { 0.0 } else { 1.0 / x });
        self.push(v, Op::InvOrZero(a), &[a])
    }

    /// Leaky rectifier: `x` for `x > 0`, `slope·x` otherwise.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Res {
        let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { slope });
        self.mul_const(a, Rc::new(mask))
    }

    /// Euclidean norm of each leading-axis row: `[n, …] → [n]`.
    /// The gradient at a zero row is taken as zero.
    pub fn row_norm(&mut self, a: Var) -> Res {
        let (rows, cols) = self.value(a).rows_cols();
        let d = self.value(a).data();
        let norms = (0..rows)
            .map(|r| d[r * cols..(r + 1) * cols].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.push(Tensor::vector(norms), Op::RowNorm(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Res {
        let v = self.value(a).reshaped(shape)?;
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Res {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Res {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Broadcast a single-element tensor to `shape`.
    pub fn expand_scalar(&mut self, a: Var, shape: &[usize]) -> Res {
        if self.value(a).len() != 1 {
            return Err(mismatch("expand_scalar", format!("{:?}", self.shape(a))));
        }
        let v = Tensor::full(shape, self.value(a).item());
        self.push(v, Op::ExpandScalar(a), &[a])
    }

    /// Sum over all but the leading axis: `[n, …] → [n]`.
    pub fn reduce_rows(&mut self, a: Var) -> Res {
        let (rows, cols) = self.value(a).rows_cols();
        let d = self.value(a).data();
        let v = (0..rows).map(|r| d[r * cols..(r + 1) * cols].iter().sum()).collect();
        self.push(Tensor::vector(v), Op::ReduceRows(a), &[a])
    }

    /// Broadcast `[n]` along the trailing axes of `shape` (with `shape[0] = n`).
    pub fn expand_rows(&mut self, a: Var, shape: &[usize]) -> Res {
        let n = self.value(a).len();
        if self.shape(a).len() != 1 || shape.first() != Some(&n) {
            return Err(mismatch("expand_rows", format!("{:?} → {shape:?}", self.shape(a))));
        }
        let cols: usize = shape[1..].iter().product();
        let src = self.value(a).data();
        let data = src.iter().flat_map(|&x| std::iter::repeat_n(x, cols)).collect();
        self.push(Tensor::new(shape.to_vec(), data)?, Op::ExpandRows(a), &[a])
    }

    /// Sum over every axis except axis 1: `[n, c, …] → [c]`.
    pub fn reduce_channels(&mut self, a: Var) -> Res {
        let s = self.shape(a);
        if s.len() < 2 {
            return Err(mismatch("reduce_channels", format!("{s:?}")));
        }
        let (n, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
        let d = self.value(a).data();
        let mut out = vec![0.0; c];
        for b in 0..n {
            for (ch, o) in out.iter_mut().enumerate() {
                let base = (b * c + ch) * inner;
                *o += d[base..base + inner].iter().sum::<f64>();
            }
        }
        self.push(Tensor::vector(out), Op::ReduceChannels(a), &[a])
    }

    /// Broadcast a per-channel vector `[c]` to `shape = [n, c, …]`.
    pub fn expand_channels(&mut self, a: Var, shape: &[usize]) -> Res {
        let c = self.value(a).len();
        if self.shape(a).len() != 1 || shape.len() < 2 || shape[1] != c {
            return Err(mismatch("expand_channels", format!("{:?} → {shape:?}", self.shape(a))));
        }
        let (n, inner) = (shape[0], shape[2..].iter().product::<usize>());
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n * c * inner);
        for _ in 0..n {
            for &x in src {
                data.extend(std::iter::repeat_n(x, inner));
            }
        }
        self.push(Tensor::new(shape.to_vec(), data)?, Op::ExpandChannels(a), &[a])
    }

    /// Adds a per-channel bias `[c]` to `x[n, c, …]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Res {
        let shape = self.shape(x).to_vec();
        let b = self.expand_channels(bias, &shape)?;
        self.add(x, b)
    }

    /// `out[i] = a[idx[i]]` on the flattened data, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<usize>>, shape: &[usize]) -> Res {
        let src = self.value(a).data();
        if idx.iter().any(|&i| i >= src.len()) {
            return Err(mismatch("gather", "index out of range".into()));
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        self.push(Tensor::new(shape.to_vec(), data)?, Op::Gather(a, idx), &[a])
    }

    /// Adjoint of [`Tape::gather`]: `out[idx[i]] += a[i]`.
    pub fn scatter_add(&mut self, a: Var, idx: Rc<Vec<usize>>, shape: &[usize]) -> Res {
        let mut out = Tensor::zeros(shape);
        let dst = out.data_mut();
        for (&i, &v) in idx.iter().zip(self.value(a).data()) {
            *dst.get_mut(i).ok_or_else(|| mismatch("scatter_add", "index out of range".into()))? += v;
        }
        self.push(out, Op::ScatterAdd(a, idx), &[a])
    }

    /// 2×2-style non-overlapping max pooling over `[n, c, h, w]`.
    pub fn max_pool2d(&mut self, a: Var, size: usize) -> Res {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || size == 0 || s[2] % size != 0 || s[3] % size != 0 {
            return Err(mismatch("max_pool2d", format!("{s:?} by {size}")));
        }
        let idx = array::max_pool_indices(self.value(a).data(), s[0] * s[1], s[2], s[3], size);
        self.gather(a, Rc::new(idx), &[s[0], s[1], s[2] / size, s[3] / size])
    }

    /// Gradient of scalar `output` w.r.t. each of `wrt`, recorded on the tape.
    ///
    /// The returned handles can be used in further computation and
    /// differentiated again. A `wrt` that `output` does not depend on
    /// yields [`TensorError::Disconnected`].
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>, TensorError> {
        if self.value(output).len() != 1 {
            return Err(TensorError::NotScalar { shape: self.shape(output).to_vec() });
        }
        let top = output.0;
        let mut grads: Vec<Option<Var>> = vec![None; top + 1];
        if self.nodes[top].requires_grad {
            grads[top] = Some(self.constant(Tensor::full(self.shape(output), 1.0))?);
        }
        for id in (0..=top).rev() {
            let Some(g) = grads[id] else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            for (input, gi) in self.backward_rule(Var(id), &op, g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0] {
                    Some(prev) => self.add(prev, gi)?,
                    None => gi,
                });
            }
        }
        wrt.iter()
            .map(|&w| {
                if w.0 > top {
                    return Err(TensorError::Disconnected);
                }
                grads[w.0].ok_or(TensorError::Disconnected)
            })
            .collect()
    }

    /// First-order gradients as plain tensors; the backward nodes are discarded.
    pub fn gradients(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>, TensorError> {
        let mark = self.nodes.len();
        let result = self
            .grad(output, wrt)
            .map(|gs| gs.iter().map(|&g| self.value(g).clone()).collect());
        self.truncate(mark);
        result
    }

    /// Like [`Tape::gradients`] but a `wrt` outside the graph gets a zero gradient.
    pub fn gradients_or_zero(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>, TensorError> {
        let mut out = Vec::with_capacity(wrt.len());
        let mark = self.nodes.len();
        let connected: Vec<Var> = wrt.iter().copied().filter(|&w| self.reaches(output, w)).collect();
        let gs = self.grad(output, &connected);
        let gs = match gs {
            Ok(gs) => gs,
            Err(e) => {
                self.truncate(mark);
                return Err(e);
            }
        };
        let mut it = connected.iter().zip(gs);
        let mut next = it.next();
        for &w in wrt {
            match next {
                Some((&c, g)) if c == w => {
                    out.push(self.value(g).clone());
                    next = it.next();
                }
                _ => out.push(Tensor::zeros(self.shape(w))),
            }
        }
        self.truncate(mark);
        Ok(out)
    }

    /// Whether `output` depends on the gradient-tracked `target`.
    pub fn reaches(&self, output: Var, target: Var) -> bool {
        if target.0 > output.0 || !self.nodes[target.0].requires_grad {
            return false;
        }
        let mut live = vec![false; output.0 + 1];
        live[output.0] = true;
        for id in (target.0..=output.0).rev() {
            if !live[id] {
                continue;
            }
            if id == target.0 {
                return true;
            }
            for input in self.inputs(id) {
                if input.0 >= target.0 {
                    live[input.0] = true;
                }
            }
        }
        false
    }

    fn inputs(&self, id: usize) -> Vec<Var> {
        match &self.nodes[id].op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Conv(a, b, _) | Op::ConvT(a, b, _) | Op::ConvW(a, b, _) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::MulConst(a, _)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Square(a)
            | Op::InvOrZero(a)
            | Op::RowNorm(a)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::ExpandScalar(a)
            | Op::ReduceRows(a)
            | Op::ExpandRows(a)
            | Op::ReduceChannels(a)
            | Op::ExpandChannels(a)
            | Op::Gather(a, _)
            | Op::ScatterAdd(a, _) => vec![*a],
        }
    }

    /// Input gradients of node `out` given upstream gradient `g`.
    fn backward_rule(&mut self, out: Var, op: &Op, g: Var) -> Result<Vec<(Var, Var)>, TensorError> {
        let need = |t: &Tape, v: Var| t.nodes[v.0].requires_grad;
        Ok(match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => {
                let mut r = vec![(a, g)];
                if need(self, b) {
                    r.push((b, self.neg(g)?));
                }
                r
            }
            Op::Mul(a, b) => {
                let mut r = Vec::new();
                if need(self, a) {
                    r.push((a, self.mul(g, b)?));
                }
                if need(self, b) {
                    r.push((b, self.mul(g, a)?));
                }
                r
            }
            Op::Scale(a, c) => vec![(a, self.scale(g, c)?)],
            Op::AddScalar(a) => vec![(a, g)],
            Op::MulConst(a, ref c) => vec![(a, self.mul_const(g, c.clone())?)],
            Op::MatMul(a, b) => {
                let mut r = Vec::new();
                if need(self, a) {
                    let bt = self.transpose(b)?;
                    r.push((a, self.matmul(g, bt)?));
                }
                if need(self, b) {
                    let at = self.transpose(a)?;
                    r.push((b, self.matmul(at, g)?));
                }
                r
            }
            Op::Transpose(a) => vec![(a, self.transpose(g)?)],
            // The three convolution ops are the partial maps of one trilinear
            // form <y, conv(x, w)>, so each one's adjoints are the other two.
            Op::Conv(x, w, geom) => {
                let mut r = Vec::new();
                if need(self, x) {
                    r.push((x, self.conv_t_raw(g, w, geom)?));
                }
                if need(self, w) {
                    r.push((w, self.conv_w_raw(x, g, geom)?));
                }
                r
            }
            Op::ConvT(y, w, geom) => {
                let mut r = Vec::new();
                if need(self, y) {
                    r.push((y, self.conv_raw(g, w, geom)?));
                }
                if need(self, w) {
                    r.push((w, self.conv_w_raw(g, y, geom)?));
                }
                r
            }
            Op::ConvW(x, y, geom) => {
                let mut r = Vec::new();
                if need(self, x) {
                    r.push((x, self.conv_t_raw(y, g, geom)?));
                }
                if need(self, y) {
                    r.push((y, self.conv_raw(x, g, geom)?));
                }
                r
            }
            Op::Tanh(a) => {
                // g · (1 − out²)
                let sq = self.square(out)?;
                let neg = self.scale(sq, -1.0)?;
                let d = self.add_scalar(neg, 1.0)?;
                vec![(a, self.mul(g, d)?)]
            }
            Op::Sigmoid(a) => {
                // g · out · (1 − out)
                let neg = self.scale(out, -1.0)?;
                let one_minus = self.add_scalar(neg, 1.0)?;
                let d = self.mul(out, one_minus)?;
                vec![(a, self.mul(g, d)?)]
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a)?;
                vec![(a, self.mul(g, s)?)]
            }
            Op::Square(a) => {
                let two_a = self.scale(a, 2.0)?;
                vec![(a, self.mul(g, two_a)?)]
            }
            Op::InvOrZero(a) => {
                // −g · out²
                let sq = self.square(out)?;
                let d = self.mul(g, sq)?;
                vec![(a, self.neg(d)?)]
            }
            Op::RowNorm(a) => {
                // a · expand(g / ‖a‖)
                let inv = self.inv_or_zero(out)?;
                let coef = self.mul(g, inv)?;
                let shape = self.shape(a).to_vec();
                let e = self.expand_rows(coef, &shape)?;
                vec![(a, self.mul(a, e)?)]
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                vec![(a, self.reshape(g, &shape)?)]
            }
            Op::SumAll(a) => {
                let shape = self.shape(a).to_vec();
                vec![(a, self.expand_scalar(g, &shape)?)]
            }
            Op::ExpandScalar(a) => {
                let s = self.sum(g)?;
                let shape = self.shape(a).to_vec();
                vec![(a, self.reshape(s, &shape)?)]
            }
            Op::ReduceRows(a) => {
                let shape = self.shape(a).to_vec();
                vec![(a, self.expand_rows(g, &shape)?)]
            }
            Op::ExpandRows(a) => vec![(a, self.reduce_rows(g)?)],
            Op::ReduceChannels(a) => {
                let shape = self.shape(a).to_vec();
                vec![(a, self.expand_channels(g, &shape)?)]
            }
            Op::ExpandChannels(a) => vec![(a, self.reduce_channels(g)?)],
            Op::Gather(a, ref idx) => {
                let shape = self.shape(a).to_vec();
                vec![(a, self.scatter_add(g, idx.clone(), &shape)?)]
            }
            Op::ScatterAdd(a, ref idx) => {
                let shape = self.shape(a).to_vec();
                vec![(a, self.gather(g, idx.clone(), &shape)?)]
            }
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true).unwrap();
        let y = tape.square(x).unwrap();
        let g = tape.gradients(y, &[x]).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 4.0]), true).unwrap();
        let z = tape.scale(x, 0.0).unwrap();
        let c = tape.add_scalar(z, 5.0).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.gradients(s, &[x]).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disconnected_input_is_reported() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0), true).unwrap();
        let y = tape.leaf(Tensor::scalar(2.0), true).unwrap();
        let s = tape.square(y).unwrap();
        assert!(matches!(tape.grad(s, &[x]), Err(TensorError::Disconnected)));
        let g = tape.gradients_or_zero(s, &[x, y]).unwrap();
        assert_eq!(g[0].item(), 0.0);
        assert_eq!(g[1].item(), 4.0);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        assert!(matches!(tape.grad(x, &[x]), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn non_finite_values_fault() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.leaf(Tensor::scalar(f64::NAN), false),
            Err(TensorError::NumericalFault { .. })
        ));
        let x = tape.leaf(Tensor::scalar(1e200), true).unwrap();
        assert!(matches!(tape.square(x), Err(TensorError::NumericalFault { op: "square" })));
    }

    #[test]
    fn leaky_relu_negative_side() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0), true).unwrap();
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert!((tape.value(y).item() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn identity_affine_passes_input_through() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let eye = tape
            .constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]))
            .unwrap();
        let b = tape.constant(Tensor::zeros(&[3])).unwrap();
        let xw = tape.matmul(x, eye).unwrap();
        let y = tape.add_bias(xw, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn delta_kernel_conv_preserves_constant_image() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 3.5)).unwrap();
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2])).unwrap();
        let b = tape.constant(Tensor::zeros(&[3])).unwrap();
        assert!(matches!(tape.add(a, b), Err(TensorError::ShapeMismatch { .. })));
        let m = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(m, m), Err(TensorError::ShapeMismatch { .. })));
    }

    // D(x) = aᵀx: ∇ₓD = a, and d‖∇ₓD‖/da = a/‖a‖.
    #[test]
    fn linear_critic_double_backprop() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3, 1], &[3.0, 0.0, 4.0]), true).unwrap();
        let x = tape.leaf(t(&[1, 3], &[0.3, -1.0, 2.0]), true).unwrap();
        let d = tape.matmul(x, a).unwrap();
        let s = tape.sum(d).unwrap();
        let gx = tape.grad(s, &[x]).unwrap()[0];
        assert_eq!(tape.value(gx).data(), &[3.0, 0.0, 4.0]);
        let n = tape.row_norm(gx).unwrap();
        let n = tape.sum(n).unwrap();
        assert_eq!(tape.value(n).item(), 5.0);
        let ga = tape.gradients(n, &[a]).unwrap();
        let expect = [0.6, 0.0, 0.8];
        for (g, e) in ga[0].data().iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn row_norm_of_zero_row_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]), true).unwrap();
        let n = tape.row_norm(x).unwrap();
        let s = tape.sum(n).unwrap();
        let g = tape.gradients(s, &[x]).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn truncation_discards_backward_nodes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true).unwrap();
        let y = tape.tanh(x).unwrap();
        let before = tape.len();
        tape.gradients(y, &[x]).unwrap();
        assert_eq!(tape.len(), before);
    }
}
