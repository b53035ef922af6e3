//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] is an arena of nodes; every operation appends a node holding
//! the forward value plus enough bookkeeping to push gradients back to its
//! operands. Nodes are identified by [`Var`] handles. One backward pass per
//! tape: gradients are accumulated in reverse node order, so each node is
//! visited exactly once and unreachable nodes keep a zero gradient.
//!
//! Optional non-finite checking (`nan_check`) validates every forward result
//! and is meant to stay on in tests and off in hot training loops.

use crate::error::{CdlError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Numerically stable logistic function.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Matrix exponential of a small square matrix by scaling and squaring with
/// a Taylor expansion of the scaled matrix.
fn matrix_exp(b: &[f64], d: usize) -> Vec<f64> {
    // Scale so the max-abs-row-sum norm is at most 1/2.
    let mut norm: f64 = 0.0;
    for i in 0..d {
        let row: f64 = (0..d).map(|j| b[i * d + j].abs()).sum();
        norm = norm.max(row);
    }
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scale = 0.5f64.powi(squarings as i32);
    let m: Vec<f64> = b.iter().map(|&x| x * scale).collect();

    let mut result = vec![0.0; d * d];
    let mut term = vec![0.0; d * d];
    for i in 0..d {
        result[i * d + i] = 1.0;
        term[i * d + i] = 1.0;
    }
    for k in 1..=40u32 {
        // term <- term * m / k
        let mut next = vec![0.0; d * d];
        for i in 0..d {
            for l in 0..d {
                let t = term[i * d + l];
                if t != 0.0 {
                    for j in 0..d {
                        next[i * d + j] += t * m[l * d + j];
                    }
                }
            }
        }
        let inv_k = 1.0 / f64::from(k);
        for v in &mut next {
            *v *= inv_k;
        }
        let max_abs = next.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        for (r, &n) in result.iter_mut().zip(&next) {
            *r += n;
        }
        term = next;
        if max_abs < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        let mut sq = vec![0.0; d * d];
        for i in 0..d {
            for l in 0..d {
                let t = result[i * d + l];
                if t != 0.0 {
                    for j in 0..d {
                        sq[i * d + j] += t * result[l * d + j];
                    }
                }
            }
        }
        result = sq;
    }
    result
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    /// Row-vector broadcast add: `[m,n] + [n]`.
    AddRow(Var, Var),
    /// Row-vector broadcast multiply: `[m,n] * [n]`.
    MulRow(Var, Var),
    /// Column `j` of a matrix as a rank-1 tensor.
    SliceCol(Var, usize),
    /// Concatenation of two matrices along columns.
    ConcatCols(Var, Var),
    /// Concatenation of two matrices along rows.
    ConcatRows(Var, Var),
    /// Concatenation of two `[n,c,h,w]` tensors along channels.
    ConcatChan(Var, Var),
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    AvgPool2(Var),
    Upsample2(Var),
    /// `[n,c,h,w] -> [n,c]` spatial mean.
    GlobalMeanPool(Var),
    /// Per-sample channel bias: `[n,c,h,w] + [n,c]`.
    AddChan(Var, Var),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    SumAll(Var),
    MeanAll(Var),
    /// `[m,n] -> [m]` row sums.
    RowSum(Var),
    /// Row-wise L2 normalisation with a floor on the norm.
    RowNormalize(Var),
    /// Acyclicity penalty `tr(exp(a ⊙ a)) - d`; keeps the matrix exponential
    /// for the backward pass.
    DagPenalty { a: Var, expm: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    nan_check: bool,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

impl Tape {
    /// New tape with non-finite checking enabled.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), nan_check: true, grads: Vec::new(), consumed: false }
    }

    /// New tape without non-finite checking (training hot path).
    pub fn unchecked() -> Self {
        Self { nodes: Vec::new(), nan_check: false, grads: Vec::new(), consumed: false }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if self.nan_check && !value.is_finite() {
            return Err(CdlError::Numeric(format!(
                "non-finite value in node {} ({})",
                self.nodes.len(),
                op_name(&op)
            )));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward root with respect to `v`.
    ///
    /// `None` before backward or for nodes that do not require gradients;
    /// unreachable gradient-requiring nodes yield zeros.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CdlError::Shape(format!(
                "{name}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let v = self.value(a).add_scaled(self.value(b), 1.0)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let v = self.value(a).add_scaled(self.value(b), -1.0)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let v = self.value(a).scale(alpha);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, alpha), ng)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CdlError::Shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let da = self.value(a).data();
        let db = self.value(b).data();
        for i in 0..m {
            for l in 0..k {
                let av = da[i * k + l];
                if av != 0.0 {
                    let row = &db[l * n..(l + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(row) {
                        *o += av * bv;
                    }
                }
            }
        }
        let v = Tensor::from_vec(vec![m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Matmul(a, b), ng)
    }

    /// `[m,n] -> [n,m]`.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(CdlError::Shape(format!("transpose: {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let da = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = da[i * n + j];
            }
        }
        let v = Tensor::from_vec(vec![n, m], out)?;
        let ng = self.needs(a);
        self.push(v, Op::Transpose(a), ng)
    }

    /// `[m,n] + [n]` with the row vector broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a).to_vec(), self.shape(r).to_vec());
        if sa.len() != 2 || sr.len() != 1 || sa[1] != sr[0] {
            return Err(CdlError::Shape(format!("add_row: {sa:?} + {sr:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        let da = self.value(a).data();
        let dr = self.value(r).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = da[i * n + j] + dr[j];
            }
        }
        let v = Tensor::from_vec(vec![m, n], out)?;
        let ng = self.needs(a) || self.needs(r);
        self.push(v, Op::AddRow(a, r), ng)
    }

    /// `[m,n] * [n]` with the row vector broadcast over rows.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a).to_vec(), self.shape(r).to_vec());
        if sa.len() != 2 || sr.len() != 1 || sa[1] != sr[0] {
            return Err(CdlError::Shape(format!("mul_row: {sa:?} * {sr:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        let da = self.value(a).data();
        let dr = self.value(r).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = da[i * n + j] * dr[j];
            }
        }
        let v = Tensor::from_vec(vec![m, n], out)?;
        let ng = self.needs(a) || self.needs(r);
        self.push(v, Op::MulRow(a, r), ng)
    }

    /// Column `j` of `[m,n]` as shape `[m]`.
    pub fn slice_col(&mut self, a: Var, j: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || j >= s[1] {
            return Err(CdlError::Shape(format!("slice_col {j} of {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let da = self.value(a).data();
        let out: Vec<f64> = (0..m).map(|i| da[i * n + j]).collect();
        let v = Tensor::from_vec(vec![m], out)?;
        let ng = self.needs(a);
        self.push(v, Op::SliceCol(a, j), ng)
    }

    /// `[m,n1] | [m,n2] -> [m,n1+n2]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(CdlError::Shape(format!("concat_cols: {sa:?} | {sb:?}")));
        }
        let (m, n1, n2) = (sa[0], sa[1], sb[1]);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = Vec::with_capacity(m * (n1 + n2));
        for i in 0..m {
            out.extend_from_slice(&da[i * n1..(i + 1) * n1]);
            out.extend_from_slice(&db[i * n2..(i + 1) * n2]);
        }
        let v = Tensor::from_vec(vec![m, n1 + n2], out)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatCols(a, b), ng)
    }

    /// `[m1,n] ; [m2,n] -> [m1+m2,n]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(CdlError::Shape(format!("concat_rows: {sa:?} ; {sb:?}")));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let v = Tensor::from_vec(vec![sa[0] + sb[0], sa[1]], out)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatRows(a, b), ng)
    }

    /// `[n,c1,h,w] | [n,c2,h,w] -> [n,c1+c2,h,w]`.
    pub fn concat_chan(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(CdlError::Shape(format!("concat_chan: {sa:?} | {sb:?}")));
        }
        let (n, c1, c2, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = Vec::with_capacity(n * (c1 + c2) * hw);
        for i in 0..n {
            out.extend_from_slice(&da[i * c1 * hw..(i + 1) * c1 * hw]);
            out.extend_from_slice(&db[i * c2 * hw..(i + 1) * c2 * hw]);
        }
        let v = Tensor::from_vec(vec![n, c1 + c2, sa[2], sa[3]], out)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatChan(a, b), ng)
    }

    /// Stride-1 2-D convolution with symmetric zero padding.
    ///
    /// `x: [n,ci,h,w]`, `w: [co,ci,kh,kw]`, `b: [co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (sx, sw, sb) =
            (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sb.len() != 1 {
            return Err(CdlError::Shape(format!("conv2d: x {sx:?} w {sw:?} b {sb:?}")));
        }
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, wci, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if ci != wci || sb[0] != co || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(CdlError::Shape(format!("conv2d: x {sx:?} w {sw:?} b {sb:?} pad {pad}")));
        }
        let oh = h + 2 * pad - kh + 1;
        let ow = wd + 2 * pad - kw + 1;
        let dx = self.value(x).data();
        let dw = self.value(w).data();
        let db = self.value(b).data();
        let mut out = vec![0.0; n * co * oh * ow];
        for ni in 0..n {
            for oc in 0..co {
                let obase = (ni * co + oc) * oh * ow;
                let bias = db[oc];
                for v in &mut out[obase..obase + oh * ow] {
                    *v = bias;
                }
                for ic in 0..ci {
                    let xbase = (ni * ci + ic) * h * wd;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = dw[((oc * ci + ic) * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            // Valid output column range for this kx.
                            let x_lo = pad.saturating_sub(kx);
                            let x_hi = (wd + pad - kx).min(ow);
                            if x_lo >= x_hi {
                                continue;
                            }
                            let len = x_hi - x_lo;
                            // ix = xo + kx - pad stays in range by construction.
                            let x_off = (x_lo + kx) - pad;
                            // Output rows whose input row iy = y + ky - pad is valid.
                            for y in 0..oh {
                                let iy = y as isize + ky as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let orow = obase + y * ow + x_lo;
                                let xrow = xbase + iy as usize * wd + x_off;
                                let os = &mut out[orow..orow + len];
                                let xs = &dx[xrow..xrow + len];
                                for (o, xv) in os.iter_mut().zip(xs) {
                                    *o += wv * *xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let v = Tensor::from_vec(vec![n, co, oh, ow], out)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(v, Op::Conv2d { x, w, b, pad }, ng)
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(CdlError::Shape(format!("avg_pool2: {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let da = self.value(a).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let ibase = nc * h * w;
            let obase = nc * oh * ow;
            for y in 0..oh {
                for x in 0..ow {
                    let i = ibase + 2 * y * w + 2 * x;
                    out[obase + y * ow + x] =
                        0.25 * (da[i] + da[i + 1] + da[i + w] + da[i + w + 1]);
                }
            }
        }
        let v = Tensor::from_vec(vec![n, c, oh, ow], out)?;
        let ng = self.needs(a);
        self.push(v, Op::AvgPool2(a), ng)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(CdlError::Shape(format!("upsample2: {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * 2, w * 2);
        let da = self.value(a).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let ibase = nc * h * w;
            let obase = nc * oh * ow;
            for y in 0..oh {
                for x in 0..ow {
                    out[obase + y * ow + x] = da[ibase + (y / 2) * w + x / 2];
                }
            }
        }
        let v = Tensor::from_vec(vec![n, c, oh, ow], out)?;
        let ng = self.needs(a);
        self.push(v, Op::Upsample2(a), ng)
    }

    /// `[n,c,h,w] -> [n,c]` mean over the spatial dimensions.
    pub fn global_mean_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(CdlError::Shape(format!("global_mean_pool: {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let da = self.value(a).data();
        let inv = 1.0 / hw as f64;
        let out: Vec<f64> = (0..n * c)
            .map(|nc| da[nc * hw..(nc + 1) * hw].iter().sum::<f64>() * inv)
            .collect();
        let v = Tensor::from_vec(vec![n, c], out)?;
        let ng = self.needs(a);
        self.push(v, Op::GlobalMeanPool(a), ng)
    }

    /// `[n,c,h,w] + [n,c]` per-sample channel bias broadcast over space.
    pub fn add_chan(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 2 || sa[0] != sb[0] || sa[1] != sb[1] {
            return Err(CdlError::Shape(format!("add_chan: {sa:?} + {sb:?}")));
        }
        let (n, c, hw) = (sa[0], sa[1], sa[2] * sa[3]);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = vec![0.0; n * c * hw];
        for nc in 0..n * c {
            let bias = db[nc];
            let src = &da[nc * hw..(nc + 1) * hw];
            let dst = &mut out[nc * hw..(nc + 1) * hw];
            for (o, &x) in dst.iter_mut().zip(src) {
                *o = x + bias;
            }
        }
        let v = Tensor::from_vec(sa.clone(), out)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::AddChan(a, b), ng)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.needs(a);
        self.push(v, Op::Silu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        let ng = self.needs(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        let ng = self.needs(a);
        self.push(v, Op::Ln(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::sqrt);
        let ng = self.needs(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        let ng = self.needs(a);
        self.push(v, Op::Abs(a), ng)
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.needs(a);
        self.push(v, Op::SumAll(a), ng)
    }

    /// Mean of all elements as a scalar.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let numel = self.value(a).numel();
        if numel == 0 {
            return Err(CdlError::Shape("mean_all of empty tensor".into()));
        }
        let v = Tensor::scalar(self.value(a).data().iter().sum::<f64>() / numel as f64);
        let ng = self.needs(a);
        self.push(v, Op::MeanAll(a), ng)
    }

    /// `[m,n] -> [m]` row sums.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(CdlError::Shape(format!("row_sum: {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let da = self.value(a).data();
        let out: Vec<f64> = (0..m).map(|i| da[i * n..(i + 1) * n].iter().sum()).collect();
        let v = Tensor::from_vec(vec![m], out)?;
        let ng = self.needs(a);
        self.push(v, Op::RowSum(a), ng)
    }

    /// Row-wise L2 normalisation of `[m,n]`, norms floored at `1e-12`.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(CdlError::Shape(format!("row_normalize: {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let da = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &da[i * n..(i + 1) * n];
            let norm = row.iter().map(|&x| x * x).sum::<f64>().sqrt().max(1e-12);
            for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = x / norm;
            }
        }
        let v = Tensor::from_vec(vec![m, n], out)?;
        let ng = self.needs(a);
        self.push(v, Op::RowNormalize(a), ng)
    }

    /// Acyclicity penalty `tr(exp(a ⊙ a)) - d` for a square matrix.
    ///
    /// Zero exactly when the support of `a` is a DAG; strictly positive as
    /// soon as any directed cycle exists.
    pub fn dag_penalty(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(CdlError::Shape(format!("dag_penalty: {s:?}")));
        }
        let d = s[0];
        let da = self.value(a).data();
        let b: Vec<f64> = da.iter().map(|&x| x * x).collect();
        let e = matrix_exp(&b, d);
        let trace: f64 = (0..d).map(|i| e[i * d + i]).sum();
        let v = Tensor::scalar(trace - d as f64);
        let ng = self.needs(a);
        self.push(v, Op::DagPenalty { a, expm: e }, ng)
    }

    /// Runs reverse accumulation from a scalar root. One shot per tape.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(CdlError::Shape("tape already consumed by backward".into()));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(CdlError::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g)?;
            self.grads[id] = Some(g);
        }
        // Gradient-requiring leaves never reached keep an explicit zero.
        for id in 0..self.nodes.len() {
            if self.nodes[id].needs_grad && self.grads[id].is_none() {
                self.grads[id] = Some(Tensor::zeros(self.nodes[id].value.shape().to_vec()));
            }
        }
        if self.nan_check {
            for (id, g) in self.grads.iter().enumerate() {
                if let Some(g) = g {
                    if !g.is_finite() {
                        return Err(CdlError::Numeric(format!(
                            "non-finite gradient at node {id}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, delta: Tensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                let sum = g.add_scaled(&delta, 1.0)?;
                *g = sum;
            }
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&mut self, id: usize, g: &Tensor) -> Result<()> {
        // Destructure enough of the op up front to release the borrow.
        enum Mirror {
            None,
            One(Var, Tensor),
            Two(Var, Tensor, Var, Tensor),
            Three(Var, Tensor, Var, Tensor, Var, Tensor),
        }
        let m = match &self.nodes[id].op {
            Op::Leaf => Mirror::None,
            Op::Add(a, b) => Mirror::Two(*a, g.clone(), *b, g.clone()),
            Op::Sub(a, b) => Mirror::Two(*a, g.clone(), *b, g.scale(-1.0)),
            Op::Mul(a, b) => {
                let da = self.nodes[a.0].value.data();
                let db = self.nodes[b.0].value.data();
                let ga: Vec<f64> = g.data().iter().zip(db).map(|(&gv, &bv)| gv * bv).collect();
                let gb: Vec<f64> = g.data().iter().zip(da).map(|(&gv, &av)| gv * av).collect();
                Mirror::Two(
                    *a,
                    Tensor::from_vec(g.shape().to_vec(), ga)?,
                    *b,
                    Tensor::from_vec(g.shape().to_vec(), gb)?,
                )
            }
            Op::Scale(a, alpha) => Mirror::One(*a, g.scale(*alpha)),
            Op::Matmul(a, b) => {
                let (m_, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                let da = self.nodes[a.0].value.data();
                let db = self.nodes[b.0].value.data();
                let gd = g.data();
                // dA = g . B^T
                let mut ga = vec![0.0; m_ * k];
                for i in 0..m_ {
                    for l in 0..k {
                        let mut sum = 0.0;
                        let grow = &gd[i * n..(i + 1) * n];
                        let brow = &db[l * n..(l + 1) * n];
                        for (gv, bv) in grow.iter().zip(brow) {
                            sum += gv * bv;
                        }
                        ga[i * k + l] = sum;
                    }
                }
                // dB = A^T . g
                let mut gb = vec![0.0; k * n];
                for i in 0..m_ {
                    for l in 0..k {
                        let av = da[i * k + l];
                        if av != 0.0 {
                            let grow = &gd[i * n..(i + 1) * n];
                            let brow = &mut gb[l * n..(l + 1) * n];
                            for (o, gv) in brow.iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                }
                Mirror::Two(
                    *a,
                    Tensor::from_vec(vec![m_, k], ga)?,
                    *b,
                    Tensor::from_vec(vec![k, n], gb)?,
                )
            }
            Op::Transpose(a) => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let (m_, n) = (s[0], s[1]);
                let gd = g.data();
                let mut ga = vec![0.0; m_ * n];
                for i in 0..m_ {
                    for j in 0..n {
                        ga[i * n + j] = gd[j * m_ + i];
                    }
                }
                Mirror::One(*a, Tensor::from_vec(vec![m_, n], ga)?)
            }
            Op::AddRow(a, r) => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let (m_, n) = (s[0], s[1]);
                let gd = g.data();
                let mut gr = vec![0.0; n];
                for i in 0..m_ {
                    for j in 0..n {
                        gr[j] += gd[i * n + j];
                    }
                }
                Mirror::Two(*a, g.clone(), *r, Tensor::from_vec(vec![n], gr)?)
            }
            Op::MulRow(a, r) => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let (m_, n) = (s[0], s[1]);
                let da = self.nodes[a.0].value.data();
                let dr = self.nodes[r.0].value.data();
                let gd = g.data();
                let mut ga = vec![0.0; m_ * n];
                let mut gr = vec![0.0; n];
                for i in 0..m_ {
                    for j in 0..n {
                        let gv = gd[i * n + j];
                        ga[i * n + j] = gv * dr[j];
                        gr[j] += gv * da[i * n + j];
                    }
                }
                Mirror::Two(
                    *a,
                    Tensor::from_vec(vec![m_, n], ga)?,
                    *r,
                    Tensor::from_vec(vec![n], gr)?,
                )
            }
            Op::SliceCol(a, j) => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let (m_, n) = (s[0], s[1]);
                let gd = g.data();
                let mut ga = vec![0.0; m_ * n];
                for i in 0..m_ {
                    ga[i * n + j] = gd[i];
                }
                Mirror::One(*a, Tensor::from_vec(vec![m_, n], ga)?)
            }
            Op::ConcatCols(a, b) => {
                let (n1, n2) =
                    (self.nodes[a.0].value.shape()[1], self.nodes[b.0].value.shape()[1]);
                let m_ = self.nodes[a.0].value.shape()[0];
                let gd = g.data();
                let mut ga = vec![0.0; m_ * n1];
                let mut gb = vec![0.0; m_ * n2];
                for i in 0..m_ {
                    let row = &gd[i * (n1 + n2)..(i + 1) * (n1 + n2)];
                    ga[i * n1..(i + 1) * n1].copy_from_slice(&row[..n1]);
                    gb[i * n2..(i + 1) * n2].copy_from_slice(&row[n1..]);
                }
                Mirror::Two(
                    *a,
                    Tensor::from_vec(vec![m_, n1], ga)?,
                    *b,
                    Tensor::from_vec(vec![m_, n2], gb)?,
                )
            }
            Op::ConcatRows(a, b) => {
                let sa = self.nodes[a.0].value.shape().to_vec();
                let sb = self.nodes[b.0].value.shape().to_vec();
                let split = sa[0] * sa[1];
                let gd = g.data();
                Mirror::Two(
                    *a,
                    Tensor::from_vec(sa, gd[..split].to_vec())?,
                    *b,
                    Tensor::from_vec(sb.clone(), gd[split..].to_vec())?,
                )
            }
            Op::ConcatChan(a, b) => {
                let sa = self.nodes[a.0].value.shape().to_vec();
                let sb = self.nodes[b.0].value.shape().to_vec();
                let (n, c1, c2, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let gd = g.data();
                let mut ga = Vec::with_capacity(n * c1 * hw);
                let mut gb = Vec::with_capacity(n * c2 * hw);
                for i in 0..n {
                    let base = i * (c1 + c2) * hw;
                    ga.extend_from_slice(&gd[base..base + c1 * hw]);
                    gb.extend_from_slice(&gd[base + c1 * hw..base + (c1 + c2) * hw]);
                }
                Mirror::Two(
                    *a,
                    Tensor::from_vec(sa, ga)?,
                    *b,
                    Tensor::from_vec(sb, gb)?,
                )
            }
            Op::Conv2d { x, w, b, pad } => {
                let pad = *pad;
                let sx = self.nodes[x.0].value.shape().to_vec();
                let sw = self.nodes[w.0].value.shape().to_vec();
                let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, kh, kw) = (sw[0], sw[2], sw[3]);
                let oh = h + 2 * pad - kh + 1;
                let ow = wd + 2 * pad - kw + 1;
                let dx = self.nodes[x.0].value.data();
                let dw = self.nodes[w.0].value.data();
                let gd = g.data();
                let mut gx = vec![0.0; dx.len()];
                let mut gw = vec![0.0; dw.len()];
                let mut gb = vec![0.0; co];
                for ni in 0..n {
                    for oc in 0..co {
                        let obase = (ni * co + oc) * oh * ow;
                        gb[oc] += gd[obase..obase + oh * ow].iter().sum::<f64>();
                        for ic in 0..ci {
                            let xbase = (ni * ci + ic) * h * wd;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let widx = ((oc * ci + ic) * kh + ky) * kw + kx;
                                    let wv = dw[widx];
                                    let mut wsum = 0.0;
                                    let x_lo = pad.saturating_sub(kx);
                                    let x_hi = (wd + pad - kx).min(ow);
                                    if x_lo >= x_hi {
                                        continue;
                                    }
                                    let len = x_hi - x_lo;
                                    let x_off = (x_lo + kx) - pad;
                                    for y in 0..oh {
                                        let iy = y as isize + ky as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let orow = obase + y * ow + x_lo;
                                        let xrow = xbase + iy as usize * wd + x_off;
                                        let gs = &gd[orow..orow + len];
                                        let xs = &dx[xrow..xrow + len];
                                        let gxs = &mut gx[xrow..xrow + len];
                                        for i in 0..len {
                                            let gv = gs[i];
                                            wsum += gv * xs[i];
                                            gxs[i] += gv * wv;
                                        }
                                    }
                                    gw[widx] += wsum;
                                }
                            }
                        }
                    }
                }
                Mirror::Three(
                    *x,
                    Tensor::from_vec(sx, gx)?,
                    *w,
                    Tensor::from_vec(sw, gw)?,
                    *b,
                    Tensor::from_vec(vec![co], gb)?,
                )
            }
            Op::AvgPool2(a) => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let gd = g.data();
                let mut ga = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    let ibase = nc * h * w;
                    let obase = nc * oh * ow;
                    for y in 0..oh {
                        for x in 0..ow {
                            let gv = 0.25 * gd[obase + y * ow + x];
                            let i = ibase + 2 * y * w + 2 * x;
                            ga[i] += gv;
                            ga[i + 1] += gv;
                            ga[i + w] += gv;
                            ga[i + w + 1] += gv;
                        }
                    }
                }
                Mirror::One(*a, Tensor::from_vec(s, ga)?)
            }
            Op::Upsample2(a) => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h * 2, w * 2);
                let gd = g.data();
                let mut ga = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    let ibase = nc * h * w;
                    let obase = nc * oh * ow;
                    for y in 0..oh {
                        for x in 0..ow {
                            ga[ibase + (y / 2) * w + x / 2] += gd[obase + y * ow + x];
                        }
                    }
                }
                Mirror::One(*a, Tensor::from_vec(s, ga)?)
            }
            Op::GlobalMeanPool(a) => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gd = g.data();
                let inv = 1.0 / hw as f64;
                let mut ga = vec![0.0; n * c * hw];
                for nc in 0..n * c {
                    let gv = gd[nc] * inv;
                    for o in &mut ga[nc * hw..(nc + 1) * hw] {
                        *o = gv;
                    }
                }
                Mirror::One(*a, Tensor::from_vec(s, ga)?)
            }
            Op::AddChan(a, b) => {
                let sa = self.nodes[a.0].value.shape().to_vec();
                let (n, c, hw) = (sa[0], sa[1], sa[2] * sa[3]);
                let gd = g.data();
                let mut gb = vec![0.0; n * c];
                for nc in 0..n * c {
                    gb[nc] = gd[nc * hw..(nc + 1) * hw].iter().sum();
                }
                Mirror::Two(*a, g.clone(), *b, Tensor::from_vec(vec![n, c], gb)?)
            }
            Op::Silu(a) => {
                let da = self.nodes[a.0].value.data();
                let gd = g.data();
                let ga: Vec<f64> = da
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gv)| {
                        let s = sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                Mirror::One(*a, Tensor::from_vec(g.shape().to_vec(), ga)?)
            }
            Op::Tanh(a) => {
                let dy = self.nodes[id].value.data();
                let gd = g.data();
                let ga: Vec<f64> =
                    dy.iter().zip(gd).map(|(&y, &gv)| gv * (1.0 - y * y)).collect();
                Mirror::One(*a, Tensor::from_vec(g.shape().to_vec(), ga)?)
            }
            Op::Exp(a) => {
                let dy = self.nodes[id].value.data();
                let gd = g.data();
                let ga: Vec<f64> = dy.iter().zip(gd).map(|(&y, &gv)| gv * y).collect();
                Mirror::One(*a, Tensor::from_vec(g.shape().to_vec(), ga)?)
            }
            Op::Ln(a) => {
                let da = self.nodes[a.0].value.data();
                let gd = g.data();
                let ga: Vec<f64> = da.iter().zip(gd).map(|(&x, &gv)| gv / x).collect();
                Mirror::One(*a, Tensor::from_vec(g.shape().to_vec(), ga)?)
            }
            Op::Sqrt(a) => {
                let dy = self.nodes[id].value.data();
                let gd = g.data();
                let ga: Vec<f64> =
                    dy.iter().zip(gd).map(|(&y, &gv)| gv * 0.5 / y).collect();
                Mirror::One(*a, Tensor::from_vec(g.shape().to_vec(), ga)?)
            }
            Op::Abs(a) => {
                let da = self.nodes[a.0].value.data();
                let gd = g.data();
                let ga: Vec<f64> = da
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gv)| {
                        if x > 0.0 {
                            gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Mirror::One(*a, Tensor::from_vec(g.shape().to_vec(), ga)?)
            }
            Op::SumAll(a) => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let gv = g.data()[0];
                Mirror::One(*a, Tensor::full(s, gv))
            }
            Op::MeanAll(a) => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let numel: usize = s.iter().product();
                let gv = g.data()[0] / numel as f64;
                Mirror::One(*a, Tensor::full(s, gv))
            }
            Op::RowSum(a) => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let (m_, n) = (s[0], s[1]);
                let gd = g.data();
                let mut ga = vec![0.0; m_ * n];
                for i in 0..m_ {
                    for j in 0..n {
                        ga[i * n + j] = gd[i];
                    }
                }
                Mirror::One(*a, Tensor::from_vec(s, ga)?)
            }
            Op::RowNormalize(a) => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let (m_, n) = (s[0], s[1]);
                let da = self.nodes[a.0].value.data();
                let dy = self.nodes[id].value.data();
                let gd = g.data();
                let mut ga = vec![0.0; m_ * n];
                for i in 0..m_ {
                    let row = &da[i * n..(i + 1) * n];
                    let raw = row.iter().map(|&x| x * x).sum::<f64>().sqrt();
                    let norm = raw.max(1e-12);
                    let yrow = &dy[i * n..(i + 1) * n];
                    let grow = &gd[i * n..(i + 1) * n];
                    if raw < 1e-12 {
                        // Floor active: constant denominator.
                        for j in 0..n {
                            ga[i * n + j] = grow[j] / norm;
                        }
                    } else {
                        let dot: f64 = yrow.iter().zip(grow).map(|(&y, &gv)| y * gv).sum();
                        for j in 0..n {
                            ga[i * n + j] = (grow[j] - yrow[j] * dot) / norm;
                        }
                    }
                }
                Mirror::One(*a, Tensor::from_vec(s, ga)?)
            }
            Op::DagPenalty { a, expm } => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let d = s[0];
                let da = self.nodes[a.0].value.data();
                let gv = g.data()[0];
                let mut ga = vec![0.0; d * d];
                // d tr(exp(A⊙A)) / dA = exp(A⊙A)^T ⊙ 2A
                for i in 0..d {
                    for j in 0..d {
                        ga[i * d + j] = gv * expm[j * d + i] * 2.0 * da[i * d + j];
                    }
                }
                Mirror::One(*a, Tensor::from_vec(s, ga)?)
            }
        };
        match m {
            Mirror::None => {}
            Mirror::One(a, ga) => self.acc(a, ga)?,
            Mirror::Two(a, ga, b, gb) => {
                self.acc(a, ga)?;
                self.acc(b, gb)?;
            }
            Mirror::Three(a, ga, b, gb, c, gc) => {
                self.acc(a, ga)?;
                self.acc(b, gb)?;
                self.acc(c, gc)?;
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::SliceCol(..) => "slice_col",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatChan(..) => "concat_chan",
        Op::Conv2d { .. } => "conv2d",
        Op::AvgPool2(..) => "avg_pool2",
        Op::Upsample2(..) => "upsample2",
        Op::GlobalMeanPool(..) => "global_mean_pool",
        Op::AddChan(..) => "add_chan",
        Op::Silu(..) => "silu",
        Op::Tanh(..) => "tanh",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Sqrt(..) => "sqrt",
        Op::Abs(..) => "abs",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
        Op::RowSum(..) => "row_sum",
        Op::RowNormalize(..) => "row_normalize",
        Op::DagPenalty { .. } => "dag_penalty",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    /// Central-difference gradient for a scalar function of one tensor input.
    fn numeric_grad(
        mut f: impl FnMut(&Tensor) -> f64,
        x: &Tensor,
        step: f64,
    ) -> Tensor {
        let mut grad = Tensor::zeros(x.shape().to_vec());
        for i in 0..x.numel() {
            let mut plus = x.clone();
            plus.data_mut()[i] += step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= step;
            grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * step);
        }
        grad
    }

    fn assert_close_rel(analytic: &Tensor, numeric: &Tensor, tol: f64) {
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let denom = a.abs().max(n.abs()).max(1.0);
            assert!(
                (a - n).abs() / denom < tol,
                "element {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    fn rand_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
        let numel = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Checks d(scalar_fn(x))/dx against central differences.
    fn gradcheck(
        build: impl Fn(&mut Tape, Var) -> Var,
        x: &Tensor,
    ) {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone()).unwrap();
        let root = build(&mut tape, xv);
        tape.backward(root).unwrap();
        let analytic = tape.grad(xv).unwrap().clone();
        let numeric = numeric_grad(
            |t| {
                let mut tape = Tape::new();
                let xv = tape.input(t.clone()).unwrap();
                let root = build(&mut tape, xv);
                tape.value(root).item().unwrap()
            },
            x,
            1e-5,
        );
        assert_close_rel(&analytic, &numeric, 1e-4);
    }

    #[test]
    fn mean_pool_of_known_vector() {
        // Mean over [1,2,3,6] laid out as a single spatial map.
        let mut tape = Tape::new();
        let x = tape
            .input(Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap())
            .unwrap();
        let pooled = tape.global_mean_pool(x).unwrap();
        assert_eq!(tape.value(pooled).data(), &[3.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::scalar(2.0)).unwrap();
        let b = tape.input(Tensor::scalar(5.0)).unwrap();
        let c = tape.mul(a, a).unwrap();
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[4.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar_root_and_single_use() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::vector(&[1.0, 2.0])).unwrap();
        assert!(tape.backward(a).is_err());
        let s = tape.sum_all(a).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn tape_linearity_of_gradients() {
        // grad(a + b) == grad(a) + grad(b) for two scalar heads of one graph.
        let x0 = Tensor::vector(&[0.3, -0.7, 1.2]);
        let grad_of = |which: u8| -> Tensor {
            let mut tape = Tape::new();
            let x = tape.input(x0.clone()).unwrap();
            let sq = tape.mul(x, x).unwrap();
            let a = tape.sum_all(sq).unwrap();
            let t = tape.tanh(x).unwrap();
            let b = tape.sum_all(t).unwrap();
            let root = match which {
                0 => a,
                1 => b,
                _ => tape.add(a, b).unwrap(),
            };
            tape.backward(root).unwrap();
            tape.grad(x).unwrap().clone()
        };
        let ga = grad_of(0);
        let gb = grad_of(1);
        let gsum = grad_of(2);
        let expected = ga.add_scaled(&gb, 1.0).unwrap();
        assert!(gsum.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn nan_check_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(&[-1.0])).unwrap();
        assert!(tape.ln(x).is_err());
        let mut loose = Tape::unchecked();
        let x = loose.input(Tensor::vector(&[-1.0])).unwrap();
        assert!(loose.ln(x).is_ok());
    }

    #[test]
    fn grads_elementwise_ops() {
        let mut r = rng::stream(11, "gradcheck-elem", 0);
        let x = rand_tensor(vec![2, 3], &mut r);
        gradcheck(|t, x| { let y = t.silu(x).unwrap(); t.sum_all(y).unwrap() }, &x);
        gradcheck(|t, x| { let y = t.tanh(x).unwrap(); t.sum_all(y).unwrap() }, &x);
        gradcheck(|t, x| { let y = t.exp(x).unwrap(); t.sum_all(y).unwrap() }, &x);
        gradcheck(|t, x| { let y = t.mul(x, x).unwrap(); t.mean_all(y).unwrap() }, &x);
        gradcheck(|t, x| { let y = t.scale(x, -2.5).unwrap(); t.sum_all(y).unwrap() }, &x);
        // Positive-domain ops.
        let pos = x.map(|v| v.abs() + 0.5);
        gradcheck(|t, x| { let y = t.ln(x).unwrap(); t.sum_all(y).unwrap() }, &pos);
        gradcheck(|t, x| { let y = t.sqrt(x).unwrap(); t.sum_all(y).unwrap() }, &pos);
        // Abs away from the kink.
        gradcheck(|t, x| { let y = t.abs(x).unwrap(); t.sum_all(y).unwrap() }, &pos);
    }

    #[test]
    fn grads_structural_ops() {
        let mut r = rng::stream(12, "gradcheck-struct", 0);
        let x = rand_tensor(vec![3, 4], &mut r);
        gradcheck(
            |t, x| {
                let y = t.transpose(x).unwrap();
                let z = t.mul(y, y).unwrap();
                t.sum_all(z).unwrap()
            },
            &x,
        );
        gradcheck(
            |t, x| {
                let c = t.slice_col(x, 2).unwrap();
                let z = t.mul(c, c).unwrap();
                t.sum_all(z).unwrap()
            },
            &x,
        );
        gradcheck(
            |t, x| {
                let y = t.row_sum(x).unwrap();
                let z = t.mul(y, y).unwrap();
                t.sum_all(z).unwrap()
            },
            &x,
        );
        gradcheck(
            |t, x| {
                let y = t.row_normalize(x).unwrap();
                let w = t.constant(Tensor::from_vec(vec![3, 4], (0..12).map(|i| 0.1 * i as f64).collect()).unwrap()).unwrap();
                let z = t.mul(y, w).unwrap();
                t.sum_all(z).unwrap()
            },
            &x,
        );
        gradcheck(
            |t, x| {
                let y = t.concat_cols(x, x).unwrap();
                let z = t.mul(y, y).unwrap();
                t.sum_all(z).unwrap()
            },
            &x,
        );
        gradcheck(
            |t, x| {
                let y = t.concat_rows(x, x).unwrap();
                let s = t.silu(y).unwrap();
                t.sum_all(s).unwrap()
            },
            &x,
        );
    }

    #[test]
    fn grads_matmul_and_row_ops() {
        let mut r = rng::stream(13, "gradcheck-matmul", 0);
        let x = rand_tensor(vec![3, 4], &mut r);
        let w = rand_tensor(vec![4, 2], &mut r);
        let bias = rand_tensor(vec![2], &mut r);
        // Gradient w.r.t. the left operand.
        {
            let w = w.clone();
            gradcheck(
                move |t, x| {
                    let wv = t.constant(w.clone()).unwrap();
                    let y = t.matmul(x, wv).unwrap();
                    let z = t.mul(y, y).unwrap();
                    t.sum_all(z).unwrap()
                },
                &x,
            );
        }
        // Gradient w.r.t. the right operand.
        {
            let x = x.clone();
            gradcheck(
                move |t, w| {
                    let xv = t.constant(x.clone()).unwrap();
                    let y = t.matmul(xv, w).unwrap();
                    let z = t.mul(y, y).unwrap();
                    t.sum_all(z).unwrap()
                },
                &w,
            );
        }
        // add_row / mul_row w.r.t. the row vector.
        {
            let x = x.clone();
            gradcheck(
                move |t, r| {
                    let xv = t.constant(x.clone()).unwrap();
                    let y = t.add_row(xv, r).unwrap();
                    let z = t.mul(y, y).unwrap();
                    t.sum_all(z).unwrap()
                },
                &rand_tensor(vec![4], &mut r),
            );
        }
        {
            gradcheck(
                move |t, r| {
                    let xv = t.constant(x.clone()).unwrap();
                    let y = t.mul_row(xv, r).unwrap();
                    let s = t.silu(y).unwrap();
                    t.sum_all(s).unwrap()
                },
                &rand_tensor(vec![4], &mut r),
            );
        }
        let _ = bias;
    }

    #[test]
    fn grads_conv_and_pooling() {
        let mut r = rng::stream(14, "gradcheck-conv", 0);
        let x = rand_tensor(vec![2, 2, 4, 4], &mut r);
        let w = rand_tensor(vec![3, 2, 3, 3], &mut r);
        let b = rand_tensor(vec![3], &mut r);
        // w.r.t. input.
        {
            let (w, b) = (w.clone(), b.clone());
            gradcheck(
                move |t, x| {
                    let wv = t.constant(w.clone()).unwrap();
                    let bv = t.constant(b.clone()).unwrap();
                    let y = t.conv2d(x, wv, bv, 1).unwrap();
                    let z = t.mul(y, y).unwrap();
                    t.sum_all(z).unwrap()
                },
                &x,
            );
        }
        // w.r.t. weights.
        {
            let (x, b) = (x.clone(), b.clone());
            gradcheck(
                move |t, w| {
                    let xv = t.constant(x.clone()).unwrap();
                    let bv = t.constant(b.clone()).unwrap();
                    let y = t.conv2d(xv, w, bv, 1).unwrap();
                    let z = t.mul(y, y).unwrap();
                    t.sum_all(z).unwrap()
                },
                &w,
            );
        }
        // w.r.t. bias.
        {
            let (x, w) = (x.clone(), w.clone());
            gradcheck(
                move |t, b| {
                    let xv = t.constant(x.clone()).unwrap();
                    let wv = t.constant(w.clone()).unwrap();
                    let y = t.conv2d(xv, wv, b, 1).unwrap();
                    let z = t.mul(y, y).unwrap();
                    t.sum_all(z).unwrap()
                },
                &b,
            );
        }
        // Pooling / upsampling / channel ops.
        gradcheck(
            |t, x| {
                let y = t.avg_pool2(x).unwrap();
                let z = t.mul(y, y).unwrap();
                t.sum_all(z).unwrap()
            },
            &x,
        );
        gradcheck(
            |t, x| {
                let y = t.upsample2(x).unwrap();
                let z = t.mul(y, y).unwrap();
                t.sum_all(z).unwrap()
            },
            &x,
        );
        gradcheck(
            |t, x| {
                let y = t.global_mean_pool(x).unwrap();
                let z = t.mul(y, y).unwrap();
                t.sum_all(z).unwrap()
            },
            &x,
        );
        {
            let x = x.clone();
            gradcheck(
                move |t, b| {
                    let xv = t.constant(x.clone()).unwrap();
                    let y = t.add_chan(xv, b).unwrap();
                    let z = t.mul(y, y).unwrap();
                    t.sum_all(z).unwrap()
                },
                &rand_tensor(vec![2, 2], &mut r),
            );
        }
        gradcheck(
            |t, x| {
                let y = t.concat_chan(x, x).unwrap();
                let s = t.silu(y).unwrap();
                t.sum_all(s).unwrap()
            },
            &x,
        );
    }

    #[test]
    fn grads_dag_penalty() {
        let mut r = rng::stream(15, "gradcheck-dag", 0);
        let a = rand_tensor(vec![4, 4], &mut r);
        gradcheck(|t, a| t.dag_penalty(a).unwrap(), &a);
    }

    #[test]
    fn dag_penalty_known_values() {
        // Self-loop of weight 1: tr(exp(diag(1,0))) - 2 = e - 1.
        let mut tape = Tape::new();
        let a = tape
            .input(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let h = tape.dag_penalty(a).unwrap();
        assert!((tape.value(h).item().unwrap() - (1f64.exp() - 1.0)).abs() < 1e-12);

        // Single edge (nilpotent): exactly acyclic, penalty 0.
        let mut tape = Tape::new();
        let a = tape
            .input(Tensor::from_vec(vec![2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let h = tape.dag_penalty(a).unwrap();
        assert_eq!(tape.value(h).item().unwrap(), 0.0);
    }

    #[test]
    fn conv2d_matches_direct_convolution_oracle() {
        // Brute-force dense convolution for comparison.
        let mut r = rng::stream(16, "conv-oracle", 0);
        let x = rand_tensor(vec![2, 3, 5, 6], &mut r);
        let w = rand_tensor(vec![4, 3, 3, 3], &mut r);
        let b = rand_tensor(vec![4], &mut r);
        for pad in [0usize, 1] {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let wv = tape.constant(w.clone()).unwrap();
            let bv = tape.constant(b.clone()).unwrap();
            let y = tape.conv2d(xv, wv, bv, pad).unwrap();
            let (h, wd) = (5usize, 6usize);
            let (oh, ow) = (h + 2 * pad - 2, wd + 2 * pad - 2);
            let yv = tape.value(y);
            assert_eq!(yv.shape(), &[2, 4, oh, ow]);
            for ni in 0..2 {
                for oc in 0..4 {
                    for y0 in 0..oh {
                        for x0 in 0..ow {
                            let mut acc = b.data()[oc];
                            for ic in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = y0 as isize + ky as isize - pad as isize;
                                        let ix = x0 as isize + kx as isize - pad as isize;
                                        if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                            continue;
                                        }
                                        let xi = ((ni * 3 + ic) * 5 + iy as usize) * 6
                                            + ix as usize;
                                        let wi = ((oc * 3 + ic) * 3 + ky) * 3 + kx;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                            let got =
                                yv.data()[((ni * 4 + oc) * oh + y0) * ow + x0];
                            assert!(
                                (got - acc).abs() < 1e-12,
                                "pad {pad} mismatch at {ni},{oc},{y0},{x0}"
                            );
                        }
                    }
                }
            }
        }
    }
}
