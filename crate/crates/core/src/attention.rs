//! Attention mathematics: scaled dot-product logits, boundary-aware
//! selection, local and equidistant masks, and the multihead layers built
//! on them.
//!
//! Selection is computed from logit *values* and is treated as a constant
//! by the backward pass; gradients flow only through the retained logits.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numkit::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Per-head attention logits, `T_q x T_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMatrix<R> {
    values: Tensor<R>,
}

impl<R: Real> LogitMatrix<R> {
    pub fn new(values: Tensor<R>) -> Result<Self> {
        if values.shape().len() > 2 {
            return Err(Error::dim("logits", format!("expected a matrix, got {:?}", values.shape())));
        }
        Ok(LogitMatrix { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        LogitMatrix::new(Tensor::from_f64_rows(rows)?)
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, i: usize) -> &[R] {
        self.values.row(i)
    }

    pub fn at(&self, i: usize, j: usize) -> R {
        self.values.at(i, j)
    }

    pub fn tensor(&self) -> &Tensor<R> {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor<R> {
        self.values
    }
}

/// Which keys each query row may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
    /// Top-n budget that produced the mask, 0 when unlimited.
    pub budget: usize,
    /// Local radius merged into the mask, if any.
    pub radius: Option<usize>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allow.push(f(i, j));
            }
        }
        AttentionMask {
            rows,
            cols,
            allow,
            budget: 0,
            radius: None,
        }
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn none(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| false)
    }

    /// Lower-triangular mask: query `i` sees keys `0..=i`.
    pub fn causal(t: usize) -> Self {
        Self::from_fn(t, t, |i, j| j <= i)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.cols..(i + 1) * self.cols]
    }

    /// Allowed column indices of row `i`.
    pub fn columns(&self, i: usize) -> Vec<usize> {
        self.row(i)
            .iter()
            .enumerate()
            .filter_map(|(j, &a)| a.then_some(j))
            .collect()
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&a| a).count()
    }

    pub fn is_all(&self) -> bool {
        self.allow.iter().all(|&a| a)
    }

    fn check_same(&self, other: &AttentionMask, kernel: &'static str) -> Result<()> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::dim(
                kernel,
                format!("[{},{}] vs [{},{}]", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        Ok(())
    }

    /// Elementwise AND.
    pub fn intersect(&self, other: &AttentionMask) -> Result<AttentionMask> {
        self.check_same(other, "intersect_mask")?;
        let mut out = self.clone();
        for (a, &b) in out.allow.iter_mut().zip(&other.allow) {
            *a = *a && b;
        }
        Ok(out)
    }
}

/// `P[i,j] = <q_i, k_j> / sqrt(d_h)` with `d_h` the key width.
pub fn scaled_logits<R: Real>(q: &Tensor<R>, k: &Tensor<R>) -> Result<LogitMatrix<R>> {
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
    let p = logits_var(&mut g, qv, kv)?;
    LogitMatrix::new(g.value(p).clone())
}

fn logits_var<R: Real>(g: &mut Graph<R>, q: Var, k: Var) -> Result<Var> {
    let dh = g.value(q).cols();
    let raw = g.matmul_nt(q, k)?;
    Ok(g.scale(raw, 1.0 / (dh as f64).sqrt()))
}

/// Discrete first difference along keys: `|P[i,0]|`, then `|P[i,j] - P[i,j-1]|`.
pub fn boundary_gradient<R: Real>(p: &LogitMatrix<R>) -> LogitMatrix<R> {
    let (m, n) = (p.rows(), p.cols());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = p.row(i);
        for j in 0..n {
            out.push(if j == 0 { row[0].abs() } else { (row[j] - row[j - 1]).abs() });
        }
    }
    LogitMatrix {
        values: Tensor::from_parts(m, n, out),
    }
}

/// `alpha * P' + (1 - alpha) * P`.
pub fn mixed_score<R: Real>(
    p: &LogitMatrix<R>,
    p_prime: &LogitMatrix<R>,
    alpha: f64,
) -> Result<LogitMatrix<R>> {
    check_alpha(alpha)?;
    if (p.rows(), p.cols()) != (p_prime.rows(), p_prime.cols()) {
        return Err(Error::dim(
            "mixed_score",
            format!("[{},{}] vs [{},{}]", p.rows(), p.cols(), p_prime.rows(), p_prime.cols()),
        ));
    }
    // The endpoints return their operand unchanged.
    if alpha == 1.0 {
        return Ok(p_prime.clone());
    }
    if alpha == 0.0 {
        return Ok(p.clone());
    }
    let (a, b) = (R::of(alpha), R::of(1.0 - alpha));
    let data = p
        .values
        .data()
        .iter()
        .zip(p_prime.values.data())
        .map(|(&x, &y)| a * y + b * x)
        .collect();
    Ok(LogitMatrix {
        values: Tensor::from_parts(p.rows(), p.cols(), data),
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Keeps the `n` highest-scoring columns per row; ties at the cut keep the
/// smallest column indices.
pub fn top_n_mask<R: Real>(s: &LogitMatrix<R>, n: usize) -> Result<AttentionMask> {
    top_n_selection(s, n).map(|(m, _)| m)
}

/// [`top_n_mask`] plus the smallest score gap between the last kept and
/// the first dropped entry over all rows (`inf` when nothing is dropped).
pub fn top_n_selection<R: Real>(s: &LogitMatrix<R>, n: usize) -> Result<(AttentionMask, f64)> {
    if n == 0 {
        return Err(Error::Config("top-n budget must be at least 1".into()));
    }
    let (rows, cols) = (s.rows(), s.cols());
    let keep = n.min(cols);
    let mut mask = AttentionMask::none(rows, cols);
    mask.budget = n;
    let mut margin = f64::INFINITY;
    let mut order: Vec<usize> = (0..cols).collect();
    for i in 0..rows {
        let row = s.row(i);
        order.iter_mut().enumerate().for_each(|(j, o)| *o = j);
        // stable sort keeps the smaller index first among equal scores
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        for &j in &order[..keep] {
            mask.allow[i * cols + j] = true;
        }
        if keep < cols {
            let gap = (row[order[keep - 1]] - row[order[keep]]).as_f64();
            margin = margin.min(gap);
        }
    }
    Ok((mask, margin))
}

/// Band mask `|i - j| <= r`.
pub fn local_mask(t_q: usize, t_k: usize, r: usize) -> AttentionMask {
    let mut m = AttentionMask::from_fn(t_q, t_k, |i, j| i.abs_diff(j) <= r);
    m.radius = Some(r);
    m
}

/// Elementwise OR.
pub fn union_mask(a: &AttentionMask, b: &AttentionMask) -> Result<AttentionMask> {
    a.check_same(b, "union_mask")?;
    let mut out = a.clone();
    for (x, &y) in out.allow.iter_mut().zip(&b.allow) {
        *x = *x || y;
    }
    out.budget = a.budget.max(b.budget);
    out.radius = a.radius.or(b.radius);
    Ok(out)
}

/// Columns `round(k (T_k - 1) / (n - 1))` for `k = 0..n`, the same in every row.
pub fn equidistant_mask(t_q: usize, t_k: usize, n: usize) -> Result<AttentionMask> {
    if n == 0 || n > t_k {
        return Err(Error::Config(format!(
            "equidistant budget {n} outside 1..={t_k}"
        )));
    }
    let mut cols = vec![false; t_k];
    if n == 1 {
        cols[0] = true;
    } else {
        for k in 0..n {
            let j = (k as f64 * (t_k - 1) as f64 / (n - 1) as f64).round() as usize;
            cols[j] = true;
        }
    }
    let mut m = AttentionMask::from_fn(t_q, t_k, |_, j| cols[j]);
    m.budget = n;
    Ok(m)
}

/// Key-selection policy of an attention site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionMode {
    /// Every key is admissible.
    Vanilla,
    /// Top-`budget` keys by the mixed score, optionally unioned with a band.
    Boundary {
        budget: usize,
        alpha: f64,
        radius: Option<usize>,
    },
    /// Uniformly spaced keys.
    Equidistant { budget: usize },
}

impl AttentionMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AttentionMode::Vanilla => Ok(()),
            AttentionMode::Boundary { budget, alpha, .. } => {
                check_alpha(alpha)?;
                if budget == 0 {
                    return Err(Error::Config("boundary budget must be at least 1".into()));
                }
                Ok(())
            }
            AttentionMode::Equidistant { budget } if budget == 0 => {
                Err(Error::Config("equidistant budget must be at least 1".into()))
            }
            AttentionMode::Equidistant { .. } => Ok(()),
        }
    }

    /// Selection mask for one head's logits and its tie margin. `None`
    /// means every key is admissible.
    pub fn select<R: Real>(&self, p: &LogitMatrix<R>) -> Result<Option<(AttentionMask, f64)>> {
        match *self {
            AttentionMode::Vanilla => Ok(None),
            AttentionMode::Boundary { budget, alpha, radius } => {
                let score = mixed_score(p, &boundary_gradient(p), alpha)?;
                let (mut mask, margin) = top_n_selection(&score, budget)?;
                if let Some(r) = radius {
                    mask = union_mask(&mask, &local_mask(p.rows(), p.cols(), r))?;
                }
                Ok(Some((mask, margin)))
            }
            AttentionMode::Equidistant { budget } => {
                let mask = equidistant_mask(p.rows(), p.cols(), budget.min(p.cols()))?;
                Ok(Some((mask, f64::INFINITY)))
            }
        }
    }

    pub fn is_vanilla(&self) -> bool {
        matches!(self, AttentionMode::Vanilla)
    }
}

/// Projection weights of one multihead layer. Head `i` owns column block
/// `i` of `w_q`, `w_k` and `w_v`; `w_o` mixes the concatenated heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiheadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
}

impl MultiheadParams {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        let mut mat = |name: &str| store.add(format!("{prefix}.{name}"), xavier(d, d, rng));
        Ok(MultiheadParams {
            w_q: mat("w_q"),
            w_k: mat("w_k"),
            w_v: mat("w_v"),
            w_o: mat("w_o"),
            heads,
        })
    }

    pub fn numel(d: usize) -> usize {
        4 * d * d
    }
}

/// Uniform Glorot initialization.
pub fn xavier<R: Real>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<R> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| R::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_parts(fan_in, fan_out, data)
}

/// What one head did during a forward pass.
#[derive(Clone, Debug)]
pub struct HeadTrace<R> {
    /// Post-softmax weights, `T_q x T_k`.
    pub weights: Tensor<R>,
    /// Final admissibility mask (selection AND extra mask), `None` if dense.
    pub mask: Option<AttentionMask>,
    /// Tie margin of the selection step.
    pub selection_margin: f64,
}

/// Multihead attention with per-head key selection.
///
/// Each head computes its own logits and mask; the softmax sees the
/// original logits at admissible positions. `extra_mask` is intersected
/// with the selection (used for causal decoding).
#[allow(clippy::too_many_arguments)]
pub fn sparse_multihead<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    query: Var,
    key: Var,
    value: Var,
    params: &MultiheadParams,
    mode: &AttentionMode,
    extra_mask: Option<&AttentionMask>,
    mut trace: Option<&mut Vec<HeadTrace<R>>>,
) -> Result<Var> {
    mode.validate()?;
    let d = g.value(query).cols();
    if g.value(key).cols() != d || g.value(value).cols() != d {
        return Err(Error::dim(
            "sparse_multihead",
            format!(
                "query width {d}, key width {}, value width {}",
                g.value(key).cols(),
                g.value(value).cols()
            ),
        ));
    }
    if g.value(key).rows() != g.value(value).rows() {
        return Err(Error::dim(
            "sparse_multihead",
            format!("{} keys vs {} values", g.value(key).rows(), g.value(value).rows()),
        ));
    }
    let heads = params.heads;
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let (t_q, t_k) = (g.value(query).rows(), g.value(key).rows());
    if let Some(extra) = extra_mask {
        if (extra.rows(), extra.cols()) != (t_q, t_k) {
            return Err(Error::dim(
                "sparse_multihead",
                format!("mask [{},{}] for logits [{t_q},{t_k}]", extra.rows(), extra.cols()),
            ));
        }
    }
    let wq = g.param(store, params.w_q);
    let wk = g.param(store, params.w_k);
    let wv = g.param(store, params.w_v);
    let wo = g.param(store, params.w_o);
    let q = g.matmul(query, wq)?;
    let k = g.matmul(key, wk)?;
    let v = g.matmul(value, wv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let logits = logits_var(g, qh, kh)?;
        let selected = if mode.is_vanilla() {
            None
        } else {
            mode.select(&LogitMatrix::new(g.value(logits).clone())?)?
        };
        let (mask, margin) = match (selected, extra_mask) {
            (None, None) => (None, f64::INFINITY),
            (None, Some(e)) => (Some(e.clone()), f64::INFINITY),
            (Some((m, margin)), None) => (Some(m), margin),
            (Some((m, margin)), Some(e)) => (Some(m.intersect(e)?), margin),
        };
        let w = g.masked_softmax_rows(logits, mask.as_ref().map(|m| m.as_slice()))?;
        outs.push(g.matmul(w, vh)?);
        if let Some(t) = trace.as_deref_mut() {
            t.push(HeadTrace {
                weights: g.value(w).clone(),
                mask,
                selection_margin: margin,
            });
        }
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    g.matmul(cat, wo)
}

/// Per-step attention over a two-row context `[a_t; b_t]`: query row `t`
/// attends only to row `t` of `ctx_a` and row `t` of `ctx_b`.
pub fn paired_context_attention<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    query: Var,
    ctx_a: Var,
    ctx_b: Var,
    params: &MultiheadParams,
) -> Result<Var> {
    let (t, d) = g.value(query).dims2();
    for c in [ctx_a, ctx_b] {
        if g.value(c).dims2() != (t, d) {
            return Err(Error::dim(
                "paired_context_attention",
                format!("query [{t},{d}] vs context {:?}", g.value(c).shape()),
            ));
        }
    }
    let heads = params.heads;
    let dh = d / heads;
    let wq = g.param(store, params.w_q);
    let wk = g.param(store, params.w_k);
    let wv = g.param(store, params.w_v);
    let wo = g.param(store, params.w_o);
    let q = g.matmul(query, wq)?;
    let (ka, kb) = (g.matmul(ctx_a, wk)?, g.matmul(ctx_b, wk)?);
    let (va, vb) = (g.matmul(ctx_a, wv)?, g.matmul(ctx_b, wv)?);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = |g: &mut Graph<R>, x: Var| -> Result<Var> {
            if heads == 1 {
                Ok(x)
            } else {
                g.slice_cols(x, h * dh, dh)
            }
        };
        let qh = cols(g, q)?;
        let (kah, kbh) = (cols(g, ka)?, cols(g, kb)?);
        let (vah, vbh) = (cols(g, va)?, cols(g, vb)?);
        let la = g.row_dot(qh, kah)?;
        let lb = g.row_dot(qh, kbh)?;
        let pair = g.concat_cols(&[la, lb])?;
        let pair = g.scale(pair, scale);
        let w = g.softmax_rows(pair)?;
        let (wa, wb) = (g.slice_cols(w, 0, 1)?, g.slice_cols(w, 1, 1)?);
        let oa = g.mul_col(vah, wa)?;
        let ob = g.mul_col(vbh, wb)?;
        outs.push(g.add(oa, ob)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    g.matmul(cat, wo)
}

#[cfg(test)]
mod tests;
