//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! tape in reverse creation order, which is a valid topological order because
//! a node can only reference nodes created before it. Leaves flagged with
//! `requires_grad` accumulate gradients across calls until `zero_grad`.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Recip(usize),
    Silu(usize),
    Square(usize),
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, tb: bool },
    Concat(Vec<usize>),
    Transpose { x: usize, rows: usize, cols: usize },
    AddRow(usize, usize),
    MulRow(usize, usize),
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    FeatureStdScale { x: usize, gamma: usize, beta: usize, eps: f64, sigma: Vec<f64> },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    GatherRows { table: usize, indices: Vec<usize>, d: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Single-writer record of executed operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        let grad = (requires_grad && matches!(op, Op::Leaf)).then(|| Tensor::zeros(value.shape()));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad,
        });
        Var { tape: self.id, idx }
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Accumulated gradient of a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.id {
            return None;
        }
        self.nodes.get(v.idx).and_then(|n| n.grad.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                *g = Tensor::zeros(g.shape());
            }
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(name, ia, ib)?;
        let value = self.nodes[ia].value.zip_map(&self.nodes[ib].value, f)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(value, op(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.map(f);
        let rg = self.rg(&[ix]);
        Ok(self.push(value, op(ix), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.map(|v| v * c);
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::Scale(ix, c), rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.map(|v| v + c);
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::AddScalar(ix), rg))
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        if self.nodes[ix].value.data().contains(&0.0) {
            return Err(Error::NonFinite("recip of zero".into()));
        }
        self.unary(x, |v| 1.0 / v, Op::Recip)
    }

    /// x · sigmoid(x)
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v / (1.0 + (-v).exp()), Op::Silu)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square)
    }

    fn bmm_impl(&mut self, op: &'static str, a: Var, b: Var, batched: bool, tb: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        let mismatch = || Error::ShapeMismatch {
            op,
            left: sa.to_vec(),
            right: sb.to_vec(),
        };
        let (batch, m, ka, rb, cb) = match (batched, sa, sb) {
            (false, [m, k], [r, c]) => (1, *m, *k, *r, *c),
            (true, [b1, m, k], [b2, r, c]) if b1 == b2 => (*b1, *m, *k, *r, *c),
            _ => return Err(mismatch()),
        };
        let (k, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != ka {
            return Err(mismatch());
        }
        let (va, vb) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut out = vec![0.0; batch * m * n];
        for p in 0..batch {
            gemm_acc(
                &va[p * m * k..(p + 1) * m * k],
                false,
                &vb[p * k * n..(p + 1) * k * n],
                tb,
                &mut out[p * m * n..(p + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if batched { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Bmm {
                a: ia,
                b: ib,
                batch,
                m,
                k,
                n,
                tb,
            },
            rg,
        ))
    }

    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl("matmul", a, b, false, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl("matmul_nt", a, b, false, true)
    }

    /// Batched product of `a[B×m×k]` and `b[B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl("bmm", a, b, true, false)
    }

    /// Batched `a[B×m×k] · b[B×n×k]ᵀ`, used for attention scores.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl("bmm_nt", a, b, true, true)
    }

    /// Stacks tensors along the first axis; trailing shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let i0 = self.check(first)?;
        let tail = self.nodes[i0].value.shape()[1..].to_vec();
        let mut ids = Vec::with_capacity(parts.len());
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let ip = self.check(p)?;
            let shape = self.nodes[ip].value.shape();
            if shape[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: self.nodes[i0].value.shape().to_vec(),
                    right: shape.to_vec(),
                });
            }
            rows += shape[0];
            data.extend_from_slice(self.nodes[ip].value.data());
            ids.push(ip);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(ids), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let (rows, cols) = self.nodes[ix].value.dims2()?;
        let data = crate::tensor::transpose(self.nodes[ix].value.data(), rows, cols);
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::new(vec![cols, rows], data)?, Op::Transpose { x: ix, rows, cols }, rg))
    }

    fn last_axis_param(&self, op: &'static str, x: usize, p: usize) -> Result<usize> {
        let d = *self.nodes[x].value.shape().last().unwrap();
        if self.nodes[p].value.len() != d {
            return Err(Error::ShapeMismatch {
                op,
                left: self.nodes[x].value.shape().to_vec(),
                right: self.nodes[p].value.shape().to_vec(),
            });
        }
        Ok(d)
    }

    /// Length of `p` when it tiles `x` along leading axes.
    fn tiled_param(&self, op: &'static str, x: usize, p: usize) -> Result<usize> {
        let (sx, sp) = (self.nodes[x].value.shape(), self.nodes[p].value.shape());
        let d = self.nodes[p].value.len();
        if sx.last() != sp.last() || !self.nodes[x].value.len().is_multiple_of(d) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.nodes[x].value.shape().to_vec(),
                right: self.nodes[p].value.shape().to_vec(),
            });
        }
        Ok(d)
    }

    /// `x + b` with `b` repeated over the leading axes of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(b)?);
        let d = self.tiled_param("add_row", ix, ib)?;
        let bv = self.nodes[ib].value.data();
        let xv = &self.nodes[ix].value;
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + bv[i % d]).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[ix, ib]);
        Ok(self.push(value, Op::AddRow(ix, ib), rg))
    }

    /// `x ⊙ g` with `g` repeated over the leading axes of `x`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (ix, ig) = (self.check(x)?, self.check(g)?);
        let d = self.tiled_param("mul_row", ix, ig)?;
        let gv = self.nodes[ig].value.data();
        let xv = &self.nodes[ix].value;
        let data = xv.data().iter().enumerate().map(|(i, &v)| v * gv[i % d]).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[ix, ig]);
        Ok(self.push(value, Op::MulRow(ix, ig), rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let shape = self.nodes[ix].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = softmax_forward(self.nodes[ix].value.data(), outer, len, inner);
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax { x: ix, outer, len, inner }, rg))
    }

    /// `γ·x/(σ+ε)+β` per row, σ the standard deviation over the last axis.
    ///
    /// The numerator is not mean-centred. A zero-variance row yields `γ·x/ε+β`.
    pub fn feature_std_scale(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("feature_std_scale: eps must be > 0, got {eps}")));
        }
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let d = self.last_axis_param("feature_std_scale", ix, ig)?;
        self.last_axis_param("feature_std_scale", ix, ib)?;
        let xv = &self.nodes[ix].value;
        let (gv, bv) = (self.nodes[ig].value.data(), self.nodes[ib].value.data());
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut sigma = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let s = row_std(row);
            sigma.push(s);
            let denom = s + eps;
            for j in 0..d {
                out[r * d + j] = gv[j] * row[j] / denom + bv[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[ix, ig, ib]);
        Ok(self.push(
            value,
            Op::FeatureStdScale {
                x: ix,
                gamma: ig,
                beta: ib,
                eps,
                sigma,
            },
            rg,
        ))
    }

    /// Standard layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let d = self.last_axis_param("layer_norm", ix, ig)?;
        self.last_axis_param("layer_norm", ix, ib)?;
        let xv = &self.nodes[ix].value;
        let (gv, bv) = (self.nodes[ig].value.data(), self.nodes[ib].value.data());
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[ix, ig, ib]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.sum();
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let m = v.sum() / v.len() as f64;
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(ix), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.reshape(shape)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(value, Op::Reshape(ix), rg))
    }

    /// Rows of a `[V×d]` table selected by `indices`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let tv = &self.nodes[it].value;
        let (v, d) = tv.dims2()?;
        if indices.is_empty() {
            return Err(Error::invalid("gather_rows: no indices"));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(Error::invalid(format!("gather_rows: index {i} >= {v}")));
            }
            data.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![indices.len(), d], data)?;
        let rg = self.rg(&[it]);
        Ok(self.push(
            value,
            Op::GatherRows {
                table: it,
                indices: indices.to_vec(),
                d,
            },
            rg,
        ))
    }

    /// Mean squared difference between `a` and `b`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.sub(a, b)?;
        let sq = self.square(diff)?;
        self.mean(sq)
    }

    /// Accumulates `∂loss/∂leaf` into every `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        let lv = &self.nodes[li].value;
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=li).map(|_| None).collect();
        adj[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let shape = self.nodes[i].value.shape().to_vec();
                let acc = self.nodes[i].grad.as_mut().expect("leaf grad");
                let mut data = std::mem::replace(acc, Tensor::scalar(0.0)).into_data();
                for (d, v) in data.iter_mut().zip(&g) {
                    *d += v;
                }
                *acc = Tensor::new(shape, data)?;
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| nodes[j].value.data();
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[j].requires_grad {
                return;
            }
            let buf = adj[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g))
            }
            Op::Recip(x) => {
                let y = val(i);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] -= g[k] * y[k] * y[k];
                    }
                });
            }
            Op::Silu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        let s = 1.0 / (1.0 + (-xv[k]).exp());
                        d[k] += g[k] * s * (1.0 + xv[k] * (1.0 - s));
                    }
                });
            }
            Op::Square(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += 2.0 * g[k] * xv[k];
                    }
                });
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                tb,
            } => {
                let (va, vb) = (val(*a), val(*b));
                let (mk, kn, mn) = (m * k, k * n, m * n);
                acc(*a, &mut |d| {
                    for p in 0..*batch {
                        let (gp, bp) = (&g[p * mn..(p + 1) * mn], &vb[p * kn..(p + 1) * kn]);
                        // dA = dC·op(B)ᵀ
                        gemm_acc(gp, false, bp, !*tb, &mut d[p * mk..(p + 1) * mk], *m, *n, *k);
                    }
                });
                acc(*b, &mut |d| {
                    for p in 0..*batch {
                        let (gp, ap) = (&g[p * mn..(p + 1) * mn], &va[p * mk..(p + 1) * mk]);
                        let dp = &mut d[p * kn..(p + 1) * kn];
                        if *tb {
                            gemm_acc(gp, true, ap, false, dp, *n, *m, *k);
                        } else {
                            gemm_acc(ap, true, gp, false, dp, *k, *m, *n);
                        }
                    }
                });
            }
            Op::Concat(ids) => {
                let mut off = 0;
                for &j in ids {
                    let len = nodes[j].value.len();
                    let part = &g[off..off + len];
                    acc(j, &mut |d| d.iter_mut().zip(part).for_each(|(d, g)| *d += g));
                    off += len;
                }
            }
            Op::Transpose { x, rows, cols } => {
                acc(*x, &mut |d| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            d[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::AddRow(x, b) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                let dl = nodes[*b].value.len();
                acc(*b, &mut |d| {
                    for (k, gv) in g.iter().enumerate() {
                        d[k % dl] += gv;
                    }
                });
            }
            Op::MulRow(x, gm) => {
                let (xv, gv) = (val(*x), val(*gm));
                let dl = gv.len();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * gv[k % dl];
                    }
                });
                acc(*gm, &mut |d| {
                    for k in 0..g.len() {
                        d[k % dl] += g[k] * xv[k];
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = val(i);
                acc(*x, &mut |d| {
                    for o in 0..*outer {
                        for q in 0..*inner {
                            let at = |l: usize| (o * len + l) * inner + q;
                            let dot: f64 = (0..*len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..*len {
                                d[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::FeatureStdScale {
                x,
                gamma,
                beta,
                eps,
                sigma,
            } => {
                let (xv, gv) = (val(*x), val(*gamma));
                let dl = gv.len();
                let rows = xv.len() / dl;
                acc(*beta, &mut |d| {
                    for (k, gk) in g.iter().enumerate() {
                        d[k % dl] += gk;
                    }
                });
                acc(*gamma, &mut |d| {
                    for r in 0..rows {
                        let s = sigma[r] + eps;
                        for j in 0..dl {
                            d[j] += g[r * dl + j] * xv[r * dl + j] / s;
                        }
                    }
                });
                acc(*x, &mut |d| {
                    for r in 0..rows {
                        let row = &xv[r * dl..(r + 1) * dl];
                        let s = sigma[r] + eps;
                        let mean = row.iter().sum::<f64>() / dl as f64;
                        let dot: f64 = (0..dl).map(|j| g[r * dl + j] * gv[j] * row[j]).sum();
                        // dσ/dx_j = (x_j − μ)/(d·σ), taken as zero on a constant row.
                        let coef = if sigma[r] > 0.0 {
                            dot / (s * s) / (dl as f64 * sigma[r])
                        } else {
                            0.0
                        };
                        for j in 0..dl {
                            d[r * dl + j] += gv[j] * g[r * dl + j] / s - coef * (row[j] - mean);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = val(*gamma);
                let dl = gv.len();
                let rows = xhat.len() / dl;
                acc(*beta, &mut |d| {
                    for (k, gk) in g.iter().enumerate() {
                        d[k % dl] += gk;
                    }
                });
                acc(*gamma, &mut |d| {
                    for (k, gk) in g.iter().enumerate() {
                        d[k % dl] += gk * xhat[k];
                    }
                });
                acc(*x, &mut |d| {
                    for r in 0..rows {
                        let base = r * dl;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..dl {
                            let dh = g[base + j] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat[base + j];
                        }
                        m1 /= dl as f64;
                        m2 /= dl as f64;
                        for j in 0..dl {
                            let dh = g[base + j] * gv[j];
                            d[base + j] += rstd[r] * (dh - m1 - xhat[base + j] * m2);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = nodes[*x].value.len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::GatherRows { table, indices, d: dl } => {
                acc(*table, &mut |d| {
                    for (r, &ti) in indices.iter().enumerate() {
                        for j in 0..*dl {
                            d[ti * dl + j] += g[r * dl + j];
                        }
                    }
                });
            }
        }
    }
}

fn softmax_forward(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for q in 0..inner {
            let at = |l: usize| (o * len + l) * inner + q;
            let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in 0..len {
                let e = (x[at(l)] - max).exp();
                out[at(l)] = e;
                total += e;
            }
            for l in 0..len {
                out[at(l)] /= total;
            }
        }
    }
    out
}

/// Population standard deviation of a row.
pub(crate) fn row_std(row: &[f64]) -> f64 {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d).sqrt()
}

/// Value-level softmax over `axis`, for callers that do not need a tape.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            op: "softmax",
            axis,
            shape,
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let data = softmax_forward(x.data(), outer, shape[axis], inner);
    Tensor::new(shape, data)
}

/// Value-level matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(va, vb)?;
    Ok(tape.value(out).clone())
}

/// Value-level `feature_std_scale`.
pub fn feature_std_scale(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (vx, vg, vb) = (
        tape.constant(x.clone()),
        tape.constant(gamma.clone()),
        tape.constant(beta.clone()),
    );
    let out = tape.feature_std_scale(vx, vg, vb, eps)?;
    Ok(tape.value(out).clone())
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

/// Denominator floor for the relative error, so coordinates with a vanishing
/// gradient are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of `f` at `x` against central differences over
/// every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, h, tol, &coords)
}

/// As [`grad_check`], restricted to the listed coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, h: f64, tol: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("grad_check: h must be > 0, got {h}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    let l0 = tape.value(loss).item();
    if !l0.is_finite() {
        return Err(Error::NonFinite("grad_check: f(x)".into()));
    }
    tape.backward(loss)?;
    let grad = tape.grad(xv).expect("param has grad").data().to_vec();

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&mut t, v)?;
        let val = t.value(out);
        if !val.is_scalar() {
            return Err(Error::NotScalar(val.shape().to_vec()));
        }
        let y = val.item();
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check: f(x ± h)".into()));
        }
        Ok(y)
    };

    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let (mut worst, mut worst_index) = (0.0f64, coords.first().copied().unwrap_or(0));
    for &c in coords {
        if c >= x.len() {
            return Err(Error::invalid(format!("grad_check: coordinate {c} out of range")));
        }
        let mut plus = x.data().to_vec();
        plus[c] += h;
        let mut minus = x.data().to_vec();
        minus[c] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let g = grad[c];
        let err = (g - fd).abs() / g.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
        if err > worst || err.is_nan() {
            worst = if err.is_nan() { f64::INFINITY } else { err };
            worst_index = c;
        }
        analytic.push(g);
        numeric.push(fd);
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst_index,
        analytic,
        numeric,
        tol,
        passed: worst <= tol,
    })
}


#[cfg(test)]
mod grad_tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
    }

    // Weighted sum with fixed weights so every output coordinate matters.
    fn weighted(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::from_fn(tape.shape(y), |_| rng.random_range(-1.0..1.0));
        let wv = tape.constant(w);
        let p = tape.mul(y, wv)?;
        tape.sum(p)
    }

    fn check(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) {
        let r = grad_check(f, x, 1e-5, 1e-4).unwrap();
        assert!(r.passed, "max rel error {} at {}", r.max_rel_error, r.worst_index);
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -2.0, 7.5]);
        let r = grad_check(|t, v| t.sum(v), &x, 1e-3, 1e-12).unwrap();
        assert!(r.max_rel_error < 1e-9);
        assert!(r.passed);
    }

    #[test]
    fn discontinuity_is_reported_not_fatal() {
        // Rounded values give a zero tape gradient but a jump in finite differences.
        let x = Tensor::from_vec(vec![0.5]);
        let r = grad_check(
            |t, v| {
                let stepped = t.value(v).map(|a| if a >= 0.5 { 1.0 } else { 0.0 });
                let c = t.constant(stepped);
                let z = t.scale(v, 0.0)?;
                let s = t.add(z, c)?;
                t.sum(s)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let x = Tensor::from_vec(vec![1.0]);
        let r = grad_check(
            |t, v| {
                let big = t.scale(v, 1e308)?;
                let sq = t.square(big)?;
                t.sum(sq)
            },
            &x,
            1e-5,
            1e-4,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn elementwise_ops_match_finite_differences(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[3, 4]);
            let other = rand_tensor(&mut rng, &[3, 4]);
            let row = rand_tensor(&mut rng, &[4]);
            check(|t, v| { let o = t.constant(other.clone()); let y = t.mul(v, o)?; weighted(t, y, seed) }, &x);
            check(|t, v| { let o = t.constant(other.clone()); let y = t.sub(o, v)?; let y = t.add(y, v)?; let y = t.add(y, v)?; weighted(t, y, seed) }, &x);
            check(|t, v| { let y = t.silu(v)?; weighted(t, y, seed) }, &x);
            check(|t, v| { let y = t.square(v)?; let y = t.scale(y, -0.7)?; let y = t.add_scalar(y, 2.0)?; weighted(t, y, seed) }, &x);
            check(|t, v| { let y = t.add_scalar(v, 3.0)?; let y = t.recip(y)?; weighted(t, y, seed) }, &x);
            check(|t, v| { let r = t.constant(row.clone()); let y = t.mul_row(v, r)?; let y = t.add_row(y, r)?; weighted(t, y, seed) }, &x);
            check(|t, v| { let m = t.mean(v)?; let s = t.square(m)?; t.sum(s) }, &x);
            // Row parameters as the differentiated input.
            check(|t, v| { let xc = t.constant(x.clone()); let y = t.mul_row(xc, v)?; let y = t.add_row(y, v)?; weighted(t, y, seed) }, &row);
        }

        #[test]
        fn matrix_ops_match_finite_differences(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, &[3, 4]);
            let b = rand_tensor(&mut rng, &[4, 2]);
            let bt = rand_tensor(&mut rng, &[5, 4]);
            let ba = rand_tensor(&mut rng, &[2, 3, 4]);
            let bb = rand_tensor(&mut rng, &[2, 4, 3]);
            let bbt = rand_tensor(&mut rng, &[2, 5, 4]);
            check(|t, v| { let o = t.constant(b.clone()); let y = t.matmul(v, o)?; weighted(t, y, seed) }, &a);
            check(|t, v| { let o = t.constant(a.clone()); let y = t.matmul(o, v)?; weighted(t, y, seed) }, &b);
            check(|t, v| { let o = t.constant(bt.clone()); let y = t.matmul_nt(v, o)?; weighted(t, y, seed) }, &a);
            check(|t, v| { let o = t.constant(a.clone()); let y = t.matmul_nt(o, v)?; weighted(t, y, seed) }, &bt);
            check(|t, v| { let o = t.constant(bb.clone()); let y = t.bmm(v, o)?; weighted(t, y, seed) }, &ba);
            check(|t, v| { let o = t.constant(ba.clone()); let y = t.bmm(o, v)?; weighted(t, y, seed) }, &bb);
            check(|t, v| { let o = t.constant(bbt.clone()); let y = t.bmm_nt(v, o)?; weighted(t, y, seed) }, &ba);
            check(|t, v| { let o = t.constant(ba.clone()); let y = t.bmm_nt(o, v)?; weighted(t, y, seed) }, &bbt);
            check(|t, v| { let y = t.transpose(v)?; weighted(t, y, seed) }, &a);
            check(|t, v| { let y = t.reshape(v, &[2, 6])?; weighted(t, y, seed) }, &a);
            check(|t, v| { let o = t.constant(bt.clone()); let y = t.concat(&[v, o, v])?; weighted(t, y, seed) }, &a);
            check(|t, v| { let y = t.gather_rows(v, &[2, 0, 2, 1])?; weighted(t, y, seed) }, &a);
        }

        #[test]
        fn normalisation_and_softmax_match_finite_differences(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[2, 3, 5]);
            let g = rand_tensor(&mut rng, &[5]);
            let b = rand_tensor(&mut rng, &[5]);
            for axis in 0..3 {
                check(|t, v| { let y = t.softmax(v, axis)?; weighted(t, y, seed) }, &x);
            }
            check(|t, v| { let (gv, bv) = (t.constant(g.clone()), t.constant(b.clone())); let y = t.feature_std_scale(v, gv, bv, 1e-5)?; weighted(t, y, seed) }, &x);
            check(|t, v| { let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone())); let y = t.feature_std_scale(xv, v, bv, 1e-5)?; weighted(t, y, seed) }, &g);
            check(|t, v| { let (xv, gv) = (t.constant(x.clone()), t.constant(g.clone())); let y = t.feature_std_scale(xv, gv, v, 1e-5)?; weighted(t, y, seed) }, &b);
            check(|t, v| { let (gv, bv) = (t.constant(g.clone()), t.constant(b.clone())); let y = t.layer_norm(v, gv, bv, 1e-5)?; weighted(t, y, seed) }, &x);
            check(|t, v| { let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone())); let y = t.layer_norm(xv, v, bv, 1e-5)?; weighted(t, y, seed) }, &g);
            check(|t, v| { let z = t.constant(x.map(|a| 0.5 * a)); t.mse(v, z) }, &x);
        }

        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-700.0f64..700.0, 1..12)) {
            let n = vals.len();
            let s = softmax(&Tensor::from_vec(vals), 0).unwrap();
            prop_assert!(s.is_finite());
            prop_assert!((s.sum() - 1.0).abs() <= 1e-12 * n as f64);
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        }
    }
}
