//! Dense row-major `f64` arrays and the raw kernels the tape is built on.

use serde::{Deserialize, Serialize};

use super::TensorError;

/// A dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    /// A rank-1 tensor holding `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Number of leading-axis rows and the product of the remaining axes.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.first() {
            Some(&rows) if rows > 0 => (rows, self.data.len() / rows),
            _ => (0, 0),
        }
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack_rows(parts: &[Tensor]) -> Result<Self, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::ShapeMismatch {
            op: "stack_rows",
            detail: "no tensors".into(),
        })?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for part in parts {
            if &part.shape[1..] != tail {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    detail: format!("{:?} vs {:?}", part.shape, first.shape),
                });
            }
            rows += part.shape[0];
            data.extend_from_slice(&part.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Ok(Self { shape, data })
    }

    /// Rows `idx` of the leading axis, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let (_, cols) = self.rows_cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&self.data[i * cols..(i + 1) * cols]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data }
    }
}

/// Geometry shared by a 2-D convolution and its two adjoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output extent of a strided convolution, or `None` if the kernel does not fit.
    pub fn conv_out(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
    }

    /// Output extent of a transposed convolution.
    pub fn transpose_out(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        ((input - 1) * stride + kernel).checked_sub(2 * pad).filter(|&v| v > 0)
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_ch, self.in_h, self.in_w]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    /// Output columns `oj` for which `oj * stride + kj - pad` lands inside the input row.
    #[inline]
    fn valid_range(&self, k: usize, out: usize, input: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= input-1
        let hi_excl = {
            let max = input as isize - 1 - off;
            if max < 0 {
                0
            } else {
                (max / s + 1).min(out as isize)
            }
        };
        (lo as usize, hi_excl.max(lo) as usize)
    }
}

/// Row-major `[m, k] × [k, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(a, false, b, false, m, k, n, &mut out);
    out
}

/// `out += op(a) · op(b)` where `op` optionally transposes a row-major
/// operand; `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(a: &[f64], ta: bool, b: &[f64], tb: bool, m: usize, k: usize, n: usize, out: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n, "gemm operand sizes");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe in-bounds row-major matrices, checked above.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, out.as_mut_ptr(), n as isize, 1);
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Unfolds one sample `[C, H, W]` into columns `[C·k·k, OH·OW]`.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ih, iw, oh, ow, k) = (g.in_h, g.in_w, g.out_h, g.out_w, g.kernel);
    cols.fill(0.0);
    for c in 0..g.in_ch {
        let xbase = c * ih * iw;
        for ki in 0..k {
            let (oi0, oi1) = g.valid_range(ki, oh, ih);
            for kj in 0..k {
                let (oj0, oj1) = g.valid_range(kj, ow, iw);
                let row = ((c * k + ki) * k + kj) * oh * ow;
                for oi in oi0..oi1 {
                    let xrow = xbase + (oi * g.stride + ki - g.pad) * iw;
                    let crow = row + oi * ow;
                    for oj in oj0..oj1 {
                        cols[crow + oj] = x[xrow + oj * g.stride + kj - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `[C, H, W]`.
fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (ih, iw, oh, ow, k) = (g.in_h, g.in_w, g.out_h, g.out_w, g.kernel);
    for c in 0..g.in_ch {
        let xbase = c * ih * iw;
        for ki in 0..k {
            let (oi0, oi1) = g.valid_range(ki, oh, ih);
            for kj in 0..k {
                let (oj0, oj1) = g.valid_range(kj, ow, iw);
                let row = ((c * k + ki) * k + kj) * oh * ow;
                for oi in oi0..oi1 {
                    let xrow = xbase + (oi * g.stride + ki - g.pad) * iw;
                    let crow = row + oi * ow;
                    for oj in oj0..oj1 {
                        x[xrow + oj * g.stride + kj - g.pad] += cols[crow + oj];
                    }
                }
            }
        }
    }
}

fn col_len(g: &ConvGeom) -> usize {
    g.in_ch * g.kernel * g.kernel * g.out_h * g.out_w
}

/// `y[n,o,i,j] = Σ w[o,c,ki,kj] · x[n,c,i·s+ki−p, j·s+kj−p]`.
pub fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (in_sz, out_sz) = (g.in_ch * g.in_h * g.in_w, g.out_ch * g.out_h * g.out_w);
    let ck = g.in_ch * g.kernel * g.kernel;
    let mut cols = vec![0.0; col_len(g)];
    let mut y = vec![0.0; g.batch * out_sz];
    for n in 0..g.batch {
        im2col(&x[n * in_sz..(n + 1) * in_sz], g, &mut cols);
        gemm(w, false, &cols, false, g.out_ch, ck, g.out_h * g.out_w, &mut y[n * out_sz..(n + 1) * out_sz]);
    }
    y
}

/// Adjoint of [`conv2d`] in its input: maps output-shaped `y` back to input shape.
pub fn conv2d_transpose(y: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (in_sz, out_sz) = (g.in_ch * g.in_h * g.in_w, g.out_ch * g.out_h * g.out_w);
    let ck = g.in_ch * g.kernel * g.kernel;
    let mut cols = vec![0.0; col_len(g)];
    let mut x = vec![0.0; g.batch * in_sz];
    for n in 0..g.batch {
        cols.fill(0.0);
        gemm(w, true, &y[n * out_sz..(n + 1) * out_sz], false, ck, g.out_ch, g.out_h * g.out_w, &mut cols);
        col2im(&cols, g, &mut x[n * in_sz..(n + 1) * in_sz]);
    }
    x
}

/// Adjoint of [`conv2d`] in its weights: `gw[o,c,ki,kj] = Σ y[n,o,i,j] · x[n,c,…]`.
pub fn conv2d_weight(x: &[f64], y: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (in_sz, out_sz) = (g.in_ch * g.in_h * g.in_w, g.out_ch * g.out_h * g.out_w);
    let (ck, hw) = (g.in_ch * g.kernel * g.kernel, g.out_h * g.out_w);
    let mut cols = vec![0.0; col_len(g)];
    let mut w = vec![0.0; g.out_ch * ck];
    for n in 0..g.batch {
        im2col(&x[n * in_sz..(n + 1) * in_sz], g, &mut cols);
        gemm(&y[n * out_sz..(n + 1) * out_sz], false, &cols, true, g.out_ch, hw, ck, &mut w);
    }
    w
}

/// Flat source index of the maximum of each `size×size` window (non-overlapping).
/// Ties resolve to the first element in row-major window order.
pub fn max_pool_indices(x: &[f64], batch_ch: usize, h: usize, w: usize, size: usize) -> Vec<usize> {
    let (oh, ow) = (h / size, w / size);
    let mut idx = Vec::with_capacity(batch_ch * oh * ow);
    for bc in 0..batch_ch {
        let base = bc * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = base + oi * size * w + oj * size;
                for di in 0..size {
                    for dj in 0..size {
                        let at = base + (oi * size + di) * w + oj * size + dj;
                        if x[at] > x[best] {
                            best = at;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(in_hw: usize, k: usize, s: usize, p: usize) -> ConvGeom {
        let out = ConvGeom::conv_out(in_hw, k, s, p).unwrap();
        ConvGeom {
            batch: 2,
            in_ch: 2,
            out_ch: 3,
            in_h: in_hw,
            in_w: in_hw,
            out_h: out,
            out_w: out,
            kernel: k,
            stride: s,
            pad: p,
        }
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919 % 31) as f64 - 15.0) * scale).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    // <y, conv(x,w)> = <x, convT(y,w)> = <w, convW(x,y)> for every geometry.
    #[test]
    fn conv_adjoint_identities() {
        for &(hw, k, s, p) in &[(5, 3, 1, 1), (8, 4, 2, 1), (7, 3, 2, 0), (4, 1, 1, 0), (6, 4, 2, 2)] {
            let g = geom(hw, k, s, p);
            let x = seq(g.input_shape().iter().product(), 0.1);
            let w = seq(g.weight_shape().iter().product(), 0.05);
            let y = seq(g.output_shape().iter().product(), 0.3);
            let a = dot(&y, &conv2d(&x, &w, &g));
            let b = dot(&x, &conv2d_transpose(&y, &w, &g));
            let c = dot(&w, &conv2d_weight(&x, &y, &g));
            assert!((a - b).abs() < 1e-9 && (a - c).abs() < 1e-9, "{hw} {k} {s} {p}: {a} {b} {c}");
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let g = geom(6, 3, 2, 1);
        let x = seq(g.input_shape().iter().product(), 0.1);
        let w = seq(g.weight_shape().iter().product(), 0.05);
        let y = conv2d(&x, &w, &g);
        for n in 0..g.batch {
            for o in 0..g.out_ch {
                for i in 0..g.out_h {
                    for j in 0..g.out_w {
                        let mut acc = 0.0;
                        for c in 0..g.in_ch {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let ii = (i * g.stride + ki) as isize - g.pad as isize;
                                    let jj = (j * g.stride + kj) as isize - g.pad as isize;
                                    if ii < 0 || jj < 0 || ii >= g.in_h as isize || jj >= g.in_w as isize {
                                        continue;
                                    }
                                    acc += w[((o * g.in_ch + c) * g.kernel + ki) * g.kernel + kj]
                                        * x[((n * g.in_ch + c) * g.in_h + ii as usize) * g.in_w + jj as usize];
                                }
                            }
                        }
                        let got = y[((n * g.out_ch + o) * g.out_h + i) * g.out_w + j];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn transpose_out_inverts_conv_out() {
        assert_eq!(ConvGeom::conv_out(32, 4, 2, 1), Some(16));
        assert_eq!(ConvGeom::transpose_out(16, 4, 2, 1), Some(32));
        assert_eq!(ConvGeom::transpose_out(8, 4, 2, 1), Some(16));
    }

    #[test]
    fn pool_picks_window_max() {
        let x = vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 9.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 7.0];
        let idx = max_pool_indices(&x, 1, 4, 4, 2);
        assert_eq!(idx, vec![1, 6, 8, 15]);
    }
}
