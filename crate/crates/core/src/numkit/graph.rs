//! Single-use reverse-mode tape.
//!
//! A [`Graph`] records every kernel applied during one forward pass. Calling
//! [`Graph::backward`] consumes it and returns the gradients of a scalar
//! loss with respect to every tracked node.

use std::collections::HashMap;

use super::kernels::{self, MASK_NEG};
use super::optim::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<R> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, R),
    Relu(Var),
    Softmax { x: Var, degenerate: Vec<bool> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<R>, rstd: Vec<R> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    RowDot(Var, Var),
    Sum(Var),
    Nll { probs: Var, targets: Vec<Option<usize>> },
    Transpose(Var),
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    tracked: bool,
}

pub struct Graph<R> {
    nodes: Vec<Node<R>>,
    params: HashMap<ParamId, Var>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(kernel: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.dims2() != b.dims2() {
        return Err(Error::dim(
            kernel,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Untracked leaf: no gradient is computed for it.
    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked leaf whose gradient is reported by [`Gradients::of`].
    pub fn input(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Tracked leaf bound to a stored parameter. Repeated calls return the
    /// same node.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let mut value = store.get(id).value.clone();
        value.grad = None;
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![R::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = self.tracked(&[a, b]);
        Ok(self.push(Tensor::from_parts(m, n, out), Op::MatMul(a, b), t))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![R::zero(); m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = self.tracked(&[a, b]);
        Ok(self.push(Tensor::from_parts(m, n, out), Op::MatMulNT(a, b), t))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = self.tracked(&[a]);
        Ok(self.push(Tensor::from_parts(n, m, out), Op::Transpose(a), t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out: Vec<R> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let t = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), t))
    }

    /// Adds a `[n]` or `[1,n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(row).numel() != n {
            return Err(Error::dim(
                "add_row",
                format!("[{m},{n}] + row of {}", self.value(row).numel()),
            ));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let t = self.tracked(&[a, row]);
        Ok(self.push(Tensor::from_parts(m, n, out), Op::AddRow(a, row), t))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out: Vec<R> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let t = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), t))
    }

    /// Scales row `i` of `a[m,n]` by `col[i]` where `col` is `[m,1]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(col).numel() != m {
            return Err(Error::dim(
                "mul_col",
                format!("[{m},{n}] * column of {}", self.value(col).numel()),
            ));
        }
        let c = self.value(col).data();
        let mut out = self.value(a).data().to_vec();
        for (chunk, &s) in out.chunks_mut(n).zip(c) {
            chunk.iter_mut().for_each(|o| *o *= s);
        }
        let t = self.tracked(&[a, col]);
        Ok(self.push(Tensor::from_parts(m, n, out), Op::MulCol(a, col), t))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = R::of(factor);
        let value = self.value(a).map(|x| x * f);
        let t = self.tracked(&[a]);
        self.push(value, Op::Scale(a, f), t)
    }

    /// `max(0, x)`
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > R::zero() { x } else { R::zero() });
        let t = self.tracked(&[a]);
        self.push(value, Op::Relu(a), t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax_rows(a, None)
    }

    /// Row softmax where `allow[i*n+j] == false` adds a large negative
    /// constant to the logit. Rows with no allowed entry output uniform
    /// weights and pass no gradient.
    pub fn masked_softmax_rows(&mut self, a: Var, allow: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if let Some(mask) = allow {
            if mask.len() != m * n {
                return Err(Error::dim(
                    "masked_softmax",
                    format!("logits [{m},{n}] vs mask of {}", mask.len()),
                ));
            }
        }
        let x = self.value(a).data();
        let neg = R::of(MASK_NEG);
        let mut out = vec![R::zero(); m * n];
        let mut degenerate = vec![false; m];
        let mut shifted = vec![R::zero(); n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            match allow.map(|mk| &mk[i * n..(i + 1) * n]) {
                Some(mrow) if !mrow.iter().any(|&b| b) => {
                    degenerate[i] = true;
                    orow.iter_mut().for_each(|o| *o = R::one() / R::of(n as f64));
                }
                Some(mrow) => {
                    for j in 0..n {
                        shifted[j] = if mrow[j] { row[j] } else { row[j] + neg };
                    }
                    kernels::softmax_row(&shifted, orow);
                }
                None => kernels::softmax_row(row, orow),
            }
        }
        let t = self.tracked(&[a]);
        Ok(self.push(Tensor::from_parts(m, n, out), Op::Softmax { x: a, degenerate }, t))
    }

    /// Row layer normalization with per-feature gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "rows of {n} with gain {} and bias {}",
                    self.value(gain).numel(),
                    self.value(bias).numel()
                ),
            ));
        }
        let x = self.value(a).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![R::zero(); m * n];
        let mut rstd = vec![R::zero(); m];
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            rstd[i] = kernels::normalize_row(&x[i * n..(i + 1) * n], &mut xhat[i * n..(i + 1) * n]);
            for j in 0..n {
                out[i * n + j] = gv[j] * xhat[i * n + j] + bv[j];
            }
        }
        let t = self.tracked(&[a, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(m, n, out),
            Op::LayerNorm { x: a, gain, bias, xhat, rstd },
            t,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if start + len > n || len == 0 {
            return Err(Error::dim("slice_cols", format!("[{start}..{}) of {n} columns", start + len)));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let t = self.tracked(&[a]);
        Ok(self.push(Tensor::from_parts(m, len, out), Op::SliceCols { x: a, start }, t))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(Error::dim(
                    "concat_cols",
                    format!("row counts {} vs {}", m, self.value(p).rows()),
                ));
            }
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = self.tracked(parts);
        Ok(self.push(Tensor::from_parts(m, n, out), Op::ConcatCols(parts.to_vec()), t))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let mut out = Vec::new();
        for &p in parts {
            if self.value(p).cols() != n {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column counts {} vs {}", n, self.value(p).cols()),
                ));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n.max(1);
        let t = self.tracked(parts);
        Ok(self.push(Tensor::from_parts(m, n, out), Op::ConcatRows(parts.to_vec()), t))
    }

    /// Row lookup, e.g. word embeddings.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.value(table).dims2();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::dim("gather_rows", format!("index {id} of {rows} rows")));
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let t = self.tracked(&[table]);
        Ok(self.push(
            Tensor::from_parts(ids.len(), n, out),
            Op::Gather { table, ids: ids.to_vec() },
            t,
        ))
    }

    /// Per-row dot product of two equally shaped matrices, `[m,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("row_dot", self.value(a), self.value(b))?;
        let (m, n) = self.value(a).dims2();
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let out: Vec<R> = (0..m)
            .map(|i| kernels::dot(&x[i * n..(i + 1) * n], &y[i * n..(i + 1) * n]))
            .collect();
        let t = self.tracked(&[a, b]);
        Ok(self.push(Tensor::from_parts(m, 1, out), Op::RowDot(a, b), t))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<R>();
        let t = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), t)
    }

    /// `sum_i -ln(max(probs[i, target_i], 1e-12))` over rows with a target.
    pub fn nll(&mut self, probs: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.value(probs).dims2();
        if targets.len() != m {
            return Err(Error::dim("nll", format!("{m} rows vs {} targets", targets.len())));
        }
        let p = self.value(probs).data();
        let floor = R::of(PROB_FLOOR);
        let mut loss = R::zero();
        for (i, tgt) in targets.iter().enumerate() {
            if let Some(k) = *tgt {
                if k >= n {
                    return Err(Error::dim("nll", format!("target {k} of {n} classes")));
                }
                let v = p[i * n + k];
                // NaN must survive the floor so callers can detect it.
                loss -= if v.is_nan() { v } else { v.max(floor).ln() };
            }
        }
        let t = self.tracked(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll { probs, targets: targets.to_vec() },
            t,
        ))
    }

    /// Consumes the tape and returns `d loss / d node` for tracked nodes.
    pub fn backward(self, loss: Var) -> Result<Gradients<R>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.tracked {
            return Err(Error::Contract("backward called on an untracked loss".into()));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.params.into_iter().collect();
        Ok(Gradients { grads, params })
    }

    /// Runs [`Graph::backward`] and adds the parameter gradients into `store`.
    pub fn backward_into(self, loss: Var, store: &mut ParamStore<R>) -> Result<()> {
        let grads = self.backward(loss)?;
        for (id, g) in grads.param_grads() {
            store.accumulate(id, g)?;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].tracked;
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let len = self.nodes[v.0].value.numel();
                grads[v.0].get_or_insert_with(|| vec![R::zero(); len])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).cols();
                if want(*a) {
                    let da = acc!(*a);
                    kernels::matmul_nt_acc(g, val(*b).data(), da, m, n, k);
                }
                if want(*b) {
                    let db = acc!(*b);
                    kernels::matmul_tn_acc(val(*a).data(), g, db, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).rows();
                if want(*a) {
                    let da = acc!(*a);
                    kernels::matmul_acc(g, val(*b).data(), da, m, n, k);
                }
                if want(*b) {
                    let db = acc!(*b);
                    kernels::matmul_tn_acc(g, val(*a).data(), db, m, n, k);
                }
            }
            Op::Transpose(a) => {
                if want(*a) {
                    let (m, n) = val(*a).dims2();
                    let da = acc!(*a);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        let d = acc!(v);
                        d.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if want(*a) {
                    let d = acc!(*a);
                    d.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if want(*row) {
                    let n = val(*row).numel();
                    let d = acc!(*row);
                    for chunk in g.chunks(n) {
                        d.iter_mut().zip(chunk).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let other = val(*b).data();
                    let d = acc!(*a);
                    for i in 0..d.len() {
                        d[i] += g[i] * other[i];
                    }
                }
                if want(*b) {
                    let other = val(*a).data();
                    let d = acc!(*b);
                    for i in 0..d.len() {
                        d[i] += g[i] * other[i];
                    }
                }
            }
            Op::MulCol(a, col) => {
                let n = val(*a).cols();
                if want(*a) {
                    let c = val(*col).data();
                    let d = acc!(*a);
                    for (i, chunk) in d.chunks_mut(n).enumerate() {
                        for (dv, &gv) in chunk.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *dv += gv * c[i];
                        }
                    }
                }
                if want(*col) {
                    let x = val(*a).data();
                    let d = acc!(*col);
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv += kernels::dot(&g[i * n..(i + 1) * n], &x[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::Scale(a, f) => {
                if want(*a) {
                    let d = acc!(*a);
                    d.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *f);
                }
            }
            Op::Relu(a) => {
                if want(*a) {
                    let x = val(*a).data();
                    let d = acc!(*a);
                    for i in 0..d.len() {
                        if x[i] > R::zero() {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Softmax { x, degenerate } => {
                if want(*x) {
                    let (m, n) = node.value.dims2();
                    let y = node.value.data();
                    let d = acc!(*x);
                    for i in 0..m {
                        if degenerate[i] {
                            continue;
                        }
                        let r = i * n..(i + 1) * n;
                        kernels::softmax_row_backward(&y[r.clone()], &g[r.clone()], &mut d[r]);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (m, n) = node.value.dims2();
                let gv = val(*gain).data();
                if want(*x) {
                    let d = acc!(*x);
                    let nf = R::of(n as f64);
                    let mut dxhat = vec![R::zero(); n];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let xr = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let s1: R = dxhat.iter().copied().sum();
                        let s2 = kernels::dot(&dxhat, xr);
                        let scale = rstd[i] / nf;
                        for j in 0..n {
                            d[i * n + j] += scale * (nf * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                }
                if want(*gain) {
                    let d = acc!(*gain);
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if want(*bias) {
                    let d = acc!(*bias);
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if want(*x) {
                    let (m, len) = node.value.dims2();
                    let n = val(*x).cols();
                    let d = acc!(*x);
                    for i in 0..m {
                        for j in 0..len {
                            d[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if want(p) {
                        let d = acc!(p);
                        for i in 0..m {
                            for j in 0..w {
                                d[i * w + j] += g[i * n + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    if want(p) {
                        let d = acc!(p);
                        d.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, &x)| *d += x);
                    }
                    offset += len;
                }
            }
            Op::Gather { table, ids } => {
                if want(*table) {
                    let n = val(*table).cols();
                    let d = acc!(*table);
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..n {
                            d[id * n + j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let n = val(*a).cols();
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if want(v) {
                        let o = val(other).data();
                        let d = acc!(v);
                        for (i, &gi) in g.iter().enumerate() {
                            for j in 0..n {
                                d[i * n + j] += gi * o[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if want(*a) {
                    let d = acc!(*a);
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Nll { probs, targets } => {
                if want(*probs) {
                    let n = val(*probs).cols();
                    let p = val(*probs).data();
                    let floor = R::of(PROB_FLOOR);
                    let d = acc!(*probs);
                    for (i, tgt) in targets.iter().enumerate() {
                        if let Some(k) = *tgt {
                            let pk = p[i * n + k];
                            if pk > floor {
                                d[i * n + k] -= g[0] / pk;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Probability floor inside the log of the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Result of [`Graph::backward`].
pub struct Gradients<R> {
    grads: Vec<Option<Vec<R>>>,
    params: Vec<(ParamId, Var)>,
}

impl<R: Real> Gradients<R> {
    pub fn of(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter that received one, in parameter order.
    pub fn param_grads(&self) -> Vec<(ParamId, &[R])> {
        let mut out: Vec<(ParamId, &[R])> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.of(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Owned variant of [`Gradients::param_grads`].
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Vec<R>)> {
        let mut params = std::mem::take(&mut self.params);
        params.sort_by_key(|(id, _)| *id);
        params
            .into_iter()
            .filter_map(|(id, v)| self.grads.get_mut(v.0).and_then(Option::take).map(|g| (id, g)))
            .collect()
    }
}
