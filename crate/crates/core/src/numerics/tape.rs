//! Reverse-mode differentiation over a dynamically recorded trace.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the trace in reverse and accumulates vector-Jacobian products.

use std::collections::HashMap;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Swish(Var),
    Glu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    Gather { x: Var, index: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    DepthwiseConv1d { x: Var, w: Var, b: Var },
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    ReplaceRows { x: Var, fill: Var, rows: Vec<bool> },
    Dropout { x: Var, mask: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    /// Loss node with a precomputed gradient w.r.t. its single input.
    Fused { x: Var, grad: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients for every parameter in a store; unreachable or frozen parameters hold zeros.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            grads: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn as_slice(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::shape("gradient sets differ in size"));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn check2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::shape(format!("{what}: expected 2-D, got {:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; receives no gradient outside the trace.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.expect_id(name)?;
        Ok(self.param(store, id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `b` stored as `[n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = check2(self.value(a), "matmul lhs")?;
        let (br, bc) = check2(self.value(b), "matmul rhs")?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if bk != k {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}{}",
                self.shape(a),
                self.shape(b),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |p, q| p - q);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |p, q| p * q);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = check2(self.value(x), "add_bias")?;
        if self.value(bias).len() != n {
            return Err(Error::shape(format!(
                "bias {:?} for rows of width {n}",
                self.shape(bias)
            )));
        }
        let mut v = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in v.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        Ok(self.push(v, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).map(|e| e * factor);
        self.push(v, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * sigmoid(e));
        self.push(v, Op::Swish(x))
    }

    /// Gated linear unit over columns: `[m, 2n] -> [m, n]`, `a ⊙ σ(b)`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let (m, c) = check2(self.value(x), "glu")?;
        if c % 2 != 0 {
            return Err(Error::shape(format!("glu needs even width, got {c}")));
        }
        let n = c / 2;
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = src.row(i);
            for j in 0..n {
                out.push(row[j] * sigmoid(row[n + j]));
            }
        }
        let v = Tensor::matrix(m, n, out)?;
        Ok(self.push(v, Op::Glu(x)))
    }

    /// Layer normalization over the last axis of a 2-D tensor.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = check2(self.value(x), "layer_norm")?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape(format!("layer_norm gain/bias for width {n}")));
        }
        let src = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = src.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            for j in 0..n {
                out.push((row[j] - mean) * r * g[j] + b[j]);
            }
        }
        let v = Tensor::matrix(m, n, out)?;
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, rstd }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = check2(self.value(x), "softmax")?;
        let mut v = self.value(x).clone();
        for i in 0..m {
            let row = &mut v.data_mut()[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                s += *e;
            }
            row.iter_mut().for_each(|e| *e /= s);
        }
        Ok(self.push(v, Op::Softmax(x)))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        check2(self.value(x), "log_softmax")?;
        let v = self.value(x).log_softmax_rows();
        Ok(self.push(v, Op::LogSoftmax(x)))
    }

    /// `out.flat[k] = x.flat[index[k]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape(format!("gather index {bad} out of {}", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Gather { x, index }))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = check2(self.value(x), "select_rows")?;
        let mut index = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::shape(format!("row {r} out of {m}")));
            }
            index.extend(r * n..(r + 1) * n);
        }
        self.gather(x, index, vec![rows.len(), n])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = check2(self.value(x), "transpose")?;
        let mut index = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                index.push(i * n + j);
            }
        }
        self.gather(x, index, vec![n, m])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != n {
            return Err(Error::shape(format!("reshape {:?} -> {shape:?}", self.shape(x))));
        }
        self.gather(x, (0..n).collect(), shape)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = check2(self.value(x), "slice_cols")?;
        if start + len > n {
            return Err(Error::shape(format!("columns {start}..{} of {n}", start + len)));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let v = Tensor::matrix(m, len, out)?;
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = check2(self.value(parts[0]), "concat_cols")?.0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = check2(self.value(p), "concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols row mismatch"));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::matrix(m, total, out)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// 2-D convolution. `x: [c_in, h, w]`, `w: [c_out, c_in, kh, kw]`, `b: [c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || self.value(b).len() != ws[0] {
            return Err(Error::shape(format!(
                "conv2d input {xs:?}, weight {ws:?}, bias {:?}",
                self.shape(b)
            )));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d input smaller than kernel"));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let bias = self.value(b).data();
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ki in 0..kh {
                            let ii = (oi * stride + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if jj < 0 || jj >= wd as isize {
                                    continue;
                                }
                                acc += wt[((co * cin + ci) * kh + ki) * kw + kj]
                                    * xin[(ci * h + ii as usize) * wd + jj as usize];
                            }
                        }
                    }
                    out[(co * ho + oi) * wo + oj] = acc;
                }
            }
        }
        let v = Tensor::new(vec![cout, ho, wo], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Per-channel convolution over time with "same" padding. `x: [t, c]`, `w: [c, k]`, `b: [c]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (t, c) = check2(self.value(x), "depthwise_conv1d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[0] != c || ws[1].is_multiple_of(2) || self.value(b).len() != c {
            return Err(Error::shape(format!("depthwise weight {ws:?} for {c} channels")));
        }
        let k = ws[1];
        let pad = k / 2;
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let bias = self.value(b).data();
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            for ch in 0..c {
                let mut acc = bias[ch];
                for kk in 0..k {
                    let src = ti as isize + kk as isize - pad as isize;
                    if src >= 0 && (src as usize) < t {
                        acc += wt[ch * k + kk] * xin[src as usize * c + ch];
                    }
                }
                out[ti * c + ch] = acc;
            }
        }
        let v = Tensor::matrix(t, c, out)?;
        Ok(self.push(v, Op::DepthwiseConv1d { x, w, b }))
    }

    /// Mean over rows: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = check2(self.value(x), "mean_rows")?;
        let v = Tensor::matrix(1, n, self.value(x).mean_rows())?;
        Ok(self.push(v, Op::MeanRows(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(x))
    }

    /// Replaces the flagged rows of `x` with the vector `fill`.
    pub fn replace_rows(&mut self, x: Var, fill: Var, rows: Vec<bool>) -> Result<Var> {
        let (m, n) = check2(self.value(x), "replace_rows")?;
        if rows.len() != m || self.value(fill).len() != n {
            return Err(Error::shape("replace_rows mask or fill size"));
        }
        let mut v = self.value(x).clone();
        let f = self.value(fill).data().to_vec();
        for (i, &r) in rows.iter().enumerate() {
            if r {
                v.row_mut(i).copy_from_slice(&f);
            }
        }
        Ok(self.push(v, Op::ReplaceRows { x, fill, rows }))
    }

    /// Inverted dropout; identity when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        self.push(v, Op::Dropout { x, mask })
    }

    /// Scales every row to unit Euclidean norm. Zero rows are an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, _) = check2(self.value(x), "l2_normalize_rows")?;
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = v.row_mut(i);
            let norm = row.iter().map(|e| e * e).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::contract(format!("row {i} has zero or non-finite norm")));
            }
            row.iter_mut().for_each(|e| *e /= norm);
            norms.push(norm);
        }
        Ok(self.push(v, Op::L2NormalizeRows { x, norms }))
    }

    /// Records a scalar loss whose gradient w.r.t. `x` was computed by the caller.
    pub fn fused_loss(&mut self, x: Var, loss: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(Error::shape("fused loss gradient size"));
        }
        Ok(self.push(Tensor::scalar(loss), Op::Fused { x, grad }))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::shape(format!(
                "bce logits {:?} vs targets {:?}",
                z.shape(),
                targets.shape()
            )));
        }
        let n = z.len() as f64;
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(z.len());
        for (&zi, &yi) in z.data().iter().zip(targets.data()) {
            loss += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
            grad.push((sigmoid(zi) - yi) / n);
        }
        self.fused_loss(logits, loss / n, grad)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros(store);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if store.param(*id).trainable {
                        let dst = out.grads[id.0].data_mut();
                        for (d, v) in dst.iter_mut().zip(&g) {
                            *d += v;
                        }
                    }
                }
                op => self.vjp(op, &node.value, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn vjp(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;

        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = out.cols();
                let ga = slot(grads, *a, m * k);
                // dA = dC · op(B)ᵀ
                gemm(m, n, k, g, false, bv.data(), !*trans_b, ga, true);
                let gb = slot(grads, *b, k * n);
                if *trans_b {
                    // B stored [n,k]: dB = dCᵀ · A
                    gemm(n, m, k, g, true, av.data(), false, gb, true);
                } else {
                    gemm(k, m, n, av.data(), true, g, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let d = slot(grads, v, g.len());
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                let d = slot(grads, *a, g.len());
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                let d = slot(grads, *b, g.len());
                d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
            Op::Mul(a, b) => {
                let bv = val(*b).data();
                let d = slot(grads, *a, g.len());
                d.iter_mut().zip(g.iter().zip(bv)).for_each(|(x, (y, q))| *x += y * q);
                let av = val(*a).data();
                let d = slot(grads, *b, g.len());
                d.iter_mut().zip(g.iter().zip(av)).for_each(|(x, (y, p))| *x += y * p);
            }
            Op::AddBias { x, bias } => {
                let n = out.cols();
                let d = slot(grads, *x, g.len());
                d.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                let d = slot(grads, *bias, n);
                for row in g.chunks(n) {
                    d.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                }
            }
            Op::Scale(x, f) => {
                let d = slot(grads, *x, g.len());
                d.iter_mut().zip(g).for_each(|(p, q)| *p += q * f);
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                let d = slot(grads, *x, g.len());
                for ((p, q), &xi) in d.iter_mut().zip(g).zip(xv) {
                    if xi > 0.0 {
                        *p += q;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let d = slot(grads, *x, g.len());
                for ((p, q), &y) in d.iter_mut().zip(g).zip(out.data()) {
                    *p += q * y * (1.0 - y);
                }
            }
            Op::Swish(x) => {
                let xv = val(*x).data();
                let d = slot(grads, *x, g.len());
                for ((p, q), &xi) in d.iter_mut().zip(g).zip(xv) {
                    let s = sigmoid(xi);
                    *p += q * (s + xi * s * (1.0 - s));
                }
            }
            Op::Glu(x) => {
                let xv = val(*x);
                let (m, c) = (xv.rows(), xv.cols());
                let n = c / 2;
                let d = slot(grads, *x, m * c);
                for i in 0..m {
                    let row = xv.row(i);
                    for j in 0..n {
                        let s = sigmoid(row[n + j]);
                        let gi = g[i * n + j];
                        d[i * c + j] += gi * s;
                        d[i * c + n + j] += gi * row[j] * s * (1.0 - s);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let xv = val(*x);
                let gv = val(*gain).data().to_vec();
                let (m, n) = (xv.rows(), xv.cols());
                let mut xhat = vec![0.0; m * n];
                for i in 0..m {
                    let row = xv.row(i);
                    let mean = row.iter().sum::<f64>() / n as f64;
                    for j in 0..n {
                        xhat[i * n + j] = (row[j] - mean) * rstd[i];
                    }
                }
                {
                    let dg = slot(grads, *gain, n);
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                {
                    let db = slot(grads, *bias, n);
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                }
                let dx = slot(grads, *x, m * n);
                for i in 0..m {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        let dxh = g[i * n + j] * gv[j];
                        mean_d += dxh;
                        mean_dx += dxh * xhat[i * n + j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        let dxh = g[i * n + j] * gv[j];
                        dx[i * n + j] += rstd[i] * (dxh - mean_d - xhat[i * n + j] * mean_dx);
                    }
                }
            }
            Op::Softmax(x) => {
                let n = out.cols();
                let d = slot(grads, *x, g.len());
                for (i, (grow, yrow)) in g.chunks(n).zip(out.data().chunks(n)).enumerate() {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = out.cols();
                let d = slot(grads, *x, g.len());
                for (i, (grow, yrow)) in g.chunks(n).zip(out.data().chunks(n)).enumerate() {
                    let s: f64 = grow.iter().sum();
                    for j in 0..n {
                        d[i * n + j] += grow[j] - yrow[j].exp() * s;
                    }
                }
            }
            Op::Gather { x, index } => {
                let d = slot(grads, *x, val(*x).len());
                for (k, &i) in index.iter().enumerate() {
                    d[i] += g[k];
                }
            }
            Op::ConcatCols(parts) => {
                let m = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    let d = slot(grads, p, m * c);
                    for i in 0..m {
                        for j in 0..c {
                            d[i * c + j] += g[i * total + offset + j];
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (val(*x).rows(), val(*x).cols());
                let len = out.cols();
                let d = slot(grads, *x, m * n);
                for i in 0..m {
                    for j in 0..len {
                        d[i * n + start + j] += g[i * len + j];
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = val(*x).shape().to_vec();
                let ws = val(*w).shape().to_vec();
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let (ho, wo) = (out.shape()[1], out.shape()[2]);
                let xin = val(*x).data();
                let wt = val(*w).data();
                let mut dx = vec![0.0; xin.len()];
                let mut dw = vec![0.0; wt.len()];
                let mut db = vec![0.0; cout];
                for co in 0..cout {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let go = g[(co * ho + oi) * wo + oj];
                            if go == 0.0 {
                                continue;
                            }
                            db[co] += go;
                            for ci in 0..cin {
                                for ki in 0..kh {
                                    let ii = (oi * stride + ki) as isize - *pad as isize;
                                    if ii < 0 || ii >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..kw {
                                        let jj = (oj * stride + kj) as isize - *pad as isize;
                                        if jj < 0 || jj >= wd as isize {
                                            continue;
                                        }
                                        let xi = (ci * h + ii as usize) * wd + jj as usize;
                                        let wi = ((co * cin + ci) * kh + ki) * kw + kj;
                                        dw[wi] += go * xin[xi];
                                        dx[xi] += go * wt[wi];
                                    }
                                }
                            }
                        }
                    }
                }
                for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                    let dst = slot(grads, v, d.len());
                    dst.iter_mut().zip(&d).for_each(|(p, q)| *p += q);
                }
            }
            Op::DepthwiseConv1d { x, w, b } => {
                let (t, c) = (val(*x).rows(), val(*x).cols());
                let k = val(*w).shape()[1];
                let pad = k / 2;
                let xin = val(*x).data();
                let wt = val(*w).data();
                let mut dx = vec![0.0; t * c];
                let mut dw = vec![0.0; c * k];
                let mut db = vec![0.0; c];
                for ti in 0..t {
                    for ch in 0..c {
                        let go = g[ti * c + ch];
                        db[ch] += go;
                        for kk in 0..k {
                            let src = ti as isize + kk as isize - pad as isize;
                            if src >= 0 && (src as usize) < t {
                                let s = src as usize * c + ch;
                                dw[ch * k + kk] += go * xin[s];
                                dx[s] += go * wt[ch * k + kk];
                            }
                        }
                    }
                }
                for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                    let dst = slot(grads, v, d.len());
                    dst.iter_mut().zip(&d).for_each(|(p, q)| *p += q);
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = (val(*x).rows(), val(*x).cols());
                let d = slot(grads, *x, m * n);
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] += g[j] / m as f64;
                    }
                }
            }
            Op::Sum(x) => {
                let len = val(*x).len();
                let d = slot(grads, *x, len);
                d.iter_mut().for_each(|p| *p += g[0]);
            }
            Op::Mean(x) => {
                let len = val(*x).len();
                let d = slot(grads, *x, len);
                d.iter_mut().for_each(|p| *p += g[0] / len as f64);
            }
            Op::ReplaceRows { x, fill, rows } => {
                let n = out.cols();
                {
                    let d = slot(grads, *x, g.len());
                    for (i, &r) in rows.iter().enumerate() {
                        if !r {
                            for j in 0..n {
                                d[i * n + j] += g[i * n + j];
                            }
                        }
                    }
                }
                let d = slot(grads, *fill, n);
                for (i, &r) in rows.iter().enumerate() {
                    if r {
                        for j in 0..n {
                            d[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let d = slot(grads, *x, g.len());
                for ((p, q), m) in d.iter_mut().zip(g).zip(mask) {
                    *p += q * m;
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = out.cols();
                let d = slot(grads, *x, g.len());
                for (i, norm) in norms.iter().enumerate() {
                    let y = &out.data()[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] += (gr[j] - y[j] * dot) / norm;
                    }
                }
            }
            Op::Fused { x, grad } => {
                let d = slot(grads, *x, grad.len());
                d.iter_mut().zip(grad).for_each(|(p, q)| *p += q * g[0]);
            }
        }
    }
}
