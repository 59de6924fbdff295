//! Reverse-mode differentiation over a linear tape.
//!
//! Every op evaluates eagerly and appends a node holding its output plus
//! whatever the backward pass needs. [`Tape::backward`] walks the nodes in
//! reverse and accumulates vector-Jacobian products in a fixed order, so the
//! same tape always yields bit-identical gradients.
//!
//! [`finite_diff_grad`] evaluates the same forward closure without the
//! reverse pass and is the independent check for [`gradient`].

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rope::{GridPos, RopeTable};
use crate::tensor::{self, dims2, LnCache, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Transpose(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cache: LnCache,
    },
    Softmax(usize),
    Silu(usize),
    Gelu(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatRows(usize, usize),
    Rope {
        x: usize,
        table: Arc<RopeTable>,
        positions: Arc<[GridPos]>,
        skip: usize,
    },
    ReplaceRows {
        x: usize,
        token: usize,
        rows: Vec<usize>,
    },
    GatherBias {
        table: usize,
        column: usize,
        index: Arc<[usize]>,
    },
    NegCosineSum {
        pred: usize,
        target: Arc<Tensor>,
        rows: Vec<usize>,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive ops for one forward computation.
///
/// A tape belongs to one computation (one training step or one sample) and
/// is not meant to be shared between threads.
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

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a differentiable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records an input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.idx(v).expect("variable from another tape");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = tensor::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(out, Op::MatMul(ia, ib), &[ia, ib]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        Ok(self.push(out, Op::Add(ia, ib), &[ia, ib]))
    }

    /// `x[m, n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(b)?);
        let xv = &self.nodes[ix].value;
        let bv = &self.nodes[ib].value;
        let n = xv.last_dim();
        if bv.shape() != [n] {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(out, Op::AddRow(ix, ib), &[ix, ib]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia]
            .value
            .zip_map(&self.nodes[ib].value, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(ia, ib), &[ia, ib]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.scale(c);
        Ok(self.push(out, Op::Scale(ix, c), &[ix]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = Tensor::scalar(self.nodes[ix].value.sum());
        Ok(self.push(out, Op::Sum(ix), &[ix]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.transpose()?;
        Ok(self.push(out, Op::Transpose(ix), &[ix]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (out, cache) = tensor::layer_norm_forward(
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
            eps,
        )?;
        let op = Op::LayerNorm {
            x: ix,
            gamma: ig,
            beta: ib,
            cache,
        };
        Ok(self.push(out, op, &[ix, ig, ib]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = tensor::softmax_lastdim(&self.nodes[ix].value);
        Ok(self.push(out, Op::Softmax(ix), &[ix]))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = tensor::silu(&self.nodes[ix].value);
        Ok(self.push(out, Op::Silu(ix), &[ix]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = tensor::gelu(&self.nodes[ix].value);
        Ok(self.push(out, Op::Gelu(ix), &[ix]))
    }

    /// Columns `start..start + len` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        let [m, n] = dims2(xv.shape(), "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::Index(format!(
                "columns {start}..{} of {n}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&xv.data()[r * n + start..r * n + start + len]);
        }
        let out = Tensor::from_parts(vec![m, len], out);
        Ok(self.push(out, Op::SliceCols { x: ix, start }, &[ix]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idxs = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let first = idxs
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let [m, _] = dims2(self.nodes[*first].value.shape(), "concat_cols")?;
        let mut widths = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let [mi, ni] = dims2(self.nodes[i].value.shape(), "concat_cols")?;
            if mi != m {
                return Err(Error::shape(
                    "concat_cols",
                    self.nodes[*first].value.shape(),
                    self.nodes[i].value.shape(),
                ));
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&i, &w) in idxs.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[i].value.data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![m, total], out);
        Ok(self.push(out, Op::ConcatCols(idxs.clone()), &idxs))
    }

    /// Rows `start..start + len` of a 2-D value.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        let [m, n] = dims2(xv.shape(), "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::Index(format!(
                "rows {start}..{} of {m}",
                start + len
            )));
        }
        let out = Tensor::from_parts(
            vec![len, n],
            xv.data()[start * n..(start + len) * n].to_vec(),
        );
        Ok(self.push(out, Op::SliceRows { x: ix, start }, &[ix]))
    }

    /// Stacks the rows of `a` on top of the rows of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let n = av.last_dim();
        if bv.last_dim() != n {
            return Err(Error::shape("concat_rows", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let out = Tensor::from_parts(vec![av.rows() + bv.rows(), n], data);
        Ok(self.push(out, Op::ConcatRows(ia, ib), &[ia, ib]))
    }

    /// Applies 2-D RoPE to a `[tokens, heads * head_dim]` value; the first
    /// `skip` tokens carry no grid position and stay unrotated.
    pub fn rope(
        &mut self,
        x: Var,
        table: &Arc<RopeTable>,
        positions: &Arc<[GridPos]>,
        skip: usize,
    ) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        let [m, n] = dims2(xv.shape(), "rope")?;
        if m != skip + positions.len() || n % table.head_dim() != 0 {
            return Err(Error::shape(
                "rope",
                xv.shape(),
                &[skip + positions.len(), table.head_dim()],
            ));
        }
        table.check_positions(positions)?;
        let mut out = xv.data().to_vec();
        table.rotate_rows(&mut out, n, skip, positions, false);
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let op = Op::Rope {
            x: ix,
            table: Arc::clone(table),
            positions: Arc::clone(positions),
            skip,
        };
        Ok(self.push(out, op, &[ix]))
    }

    /// Replaces the listed rows of `x` with the vector `token`.
    pub fn replace_rows(&mut self, x: Var, token: Var, rows: &[usize]) -> Result<Var> {
        let (ix, it) = (self.idx(x)?, self.idx(token)?);
        let (xv, tv) = (&self.nodes[ix].value, &self.nodes[it].value);
        let [m, n] = dims2(xv.shape(), "replace_rows")?;
        if tv.shape() != [n] {
            return Err(Error::shape("replace_rows", xv.shape(), tv.shape()));
        }
        let mut out = xv.data().to_vec();
        for &r in rows {
            if r >= m {
                return Err(Error::Index(format!("row {r} of {m}")));
            }
            out[r * n..(r + 1) * n].copy_from_slice(tv.data());
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let op = Op::ReplaceRows {
            x: ix,
            token: it,
            rows: rows.to_vec(),
        };
        Ok(self.push(out, op, &[ix, it]))
    }

    /// Builds an `[n, n]` matrix by gathering `table[index[k], column]`.
    pub fn gather_bias(
        &mut self,
        table: Var,
        column: usize,
        index: &Arc<[usize]>,
        n: usize,
    ) -> Result<Var> {
        let it = self.idx(table)?;
        let tv = &self.nodes[it].value;
        let [rows, cols] = dims2(tv.shape(), "gather_bias")?;
        if column >= cols || index.len() != n * n || index.iter().any(|&k| k >= rows) {
            return Err(Error::Index(format!(
                "gather_bias: column {column} / {n}x{n} index into {rows}x{cols} table"
            )));
        }
        let out: Vec<f64> = index
            .iter()
            .map(|&k| tv.data()[k * cols + column])
            .collect();
        let out = Tensor::from_parts(vec![n, n], out);
        let op = Op::GatherBias {
            table: it,
            column,
            index: Arc::clone(index),
        };
        Ok(self.push(out, op, &[it]))
    }

    /// Sum over `rows` of `-cos(pred[r], target[r])`, with `eps` added to the
    /// norm product.
    pub fn neg_cosine_sum(
        &mut self,
        pred: Var,
        target: &Arc<Tensor>,
        rows: &[usize],
        eps: f64,
    ) -> Result<Var> {
        let ip = self.idx(pred)?;
        let pv = &self.nodes[ip].value;
        if pv.shape() != target.shape() {
            return Err(Error::shape("neg_cosine", pv.shape(), target.shape()));
        }
        let d = pv.last_dim();
        let mut total = 0.0;
        for &r in rows {
            if r >= pv.rows() {
                return Err(Error::Index(format!("row {r} of {}", pv.rows())));
            }
            let (p, t) = (
                &pv.data()[r * d..(r + 1) * d],
                &target.data()[r * d..(r + 1) * d],
            );
            total -= cosine(p, t, eps);
        }
        let op = Op::NegCosineSum {
            pred: ip,
            target: Arc::clone(target),
            rows: rows.to_vec(),
            eps,
        };
        Ok(self.push(Tensor::scalar(total), op, &[ip]))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
                .collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let needs = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs(a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for t in 0..k {
                            let mut s = 0.0;
                            for c in 0..n {
                                s += g[r * n + c] * bv.data()[t * n + c];
                            }
                            da[r * k + t] = s;
                        }
                    }
                    accumulate(grads, a, &da);
                }
                if needs(b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for t in 0..k {
                            let av_rt = av.data()[r * k + t];
                            for c in 0..n {
                                db[t * n + c] += av_rt * g[r * n + c];
                            }
                        }
                    }
                    accumulate(grads, b, &db);
                }
            }
            &Op::Add(a, b) => {
                if needs(a) {
                    accumulate(grads, a, g);
                }
                if needs(b) {
                    accumulate(grads, b, g);
                }
            }
            &Op::AddRow(x, b) => {
                if needs(x) {
                    accumulate(grads, x, g);
                }
                if needs(b) {
                    let n = self.nodes[b].value.numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, b, &db);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                if needs(a) {
                    let da: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    accumulate(grads, a, &da);
                }
                if needs(b) {
                    let db: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    accumulate(grads, b, &db);
                }
            }
            &Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|g| g * c).collect();
                accumulate(grads, x, &dx);
            }
            &Op::Sum(x) => {
                let dx = vec![g[0]; self.nodes[x].value.numel()];
                accumulate(grads, x, &dx);
            }
            &Op::Transpose(x) => {
                let [m, n] = [node.value.shape()[0], node.value.shape()[1]];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        dx[c * m + r] = g[r * n + c];
                    }
                }
                accumulate(grads, x, &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let d = node.value.last_dim();
                let gam = self.nodes[*gamma].value.data();
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, &rs) in cache.rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &cache.xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rs * (gr[j] * gam[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
                if needs(*gamma) || needs(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (gr, xh) in g.chunks(d).zip(cache.xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xh[j];
                            db[j] += gr[j];
                        }
                    }
                    if needs(*gamma) {
                        accumulate(grads, *gamma, &dg);
                    }
                    if needs(*beta) {
                        accumulate(grads, *beta, &db);
                    }
                }
            }
            &Op::Softmax(x) => {
                let d = node.value.last_dim();
                let mut dx = vec![0.0; g.len()];
                for ((dxr, gr), yr) in dx
                    .chunks_mut(d)
                    .zip(g.chunks(d))
                    .zip(node.value.data().chunks(d))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, x, &dx);
            }
            &Op::Silu(x) => {
                let xv = self.nodes[x].value.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| g * tensor::silu_grad(x))
                    .collect();
                accumulate(grads, x, &dx);
            }
            &Op::Gelu(x) => {
                let xv = self.nodes[x].value.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| g * tensor::gelu_grad(x))
                    .collect();
                accumulate(grads, x, &dx);
            }
            &Op::SliceCols { x, start } => {
                let [m, n] = [
                    self.nodes[x].value.shape()[0],
                    self.nodes[x].value.shape()[1],
                ];
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                accumulate(grads, x, &dx);
            }
            Op::ConcatCols(parts) => {
                let [m, total] = [node.value.shape()[0], node.value.shape()[1]];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.shape()[1];
                    if needs(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p, &dp);
                    }
                    offset += w;
                }
            }
            &Op::SliceRows { x, start } => {
                let xv = &self.nodes[x].value;
                let n = xv.last_dim();
                let mut dx = vec![0.0; xv.numel()];
                dx[start * n..start * n + g.len()].copy_from_slice(g);
                accumulate(grads, x, &dx);
            }
            &Op::ConcatRows(a, b) => {
                let split = self.nodes[a].value.numel();
                if needs(a) {
                    accumulate(grads, a, &g[..split]);
                }
                if needs(b) {
                    accumulate(grads, b, &g[split..]);
                }
            }
            Op::Rope {
                x,
                table,
                positions,
                skip,
            } => {
                let mut dx = g.to_vec();
                table.rotate_rows(&mut dx, node.value.last_dim(), *skip, positions, true);
                accumulate(grads, *x, &dx);
            }
            Op::ReplaceRows { x, token, rows } => {
                let n = node.value.last_dim();
                if needs(*x) {
                    let mut dx = g.to_vec();
                    for &r in rows {
                        dx[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    accumulate(grads, *x, &dx);
                }
                if needs(*token) {
                    let mut dt = vec![0.0; n];
                    let mut seen = vec![false; g.len() / n];
                    for &r in rows {
                        if std::mem::replace(&mut seen[r], true) {
                            continue;
                        }
                        for (d, v) in dt.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *token, &dt);
                }
            }
            Op::GatherBias {
                table,
                column,
                index,
            } => {
                let tv = &self.nodes[*table].value;
                let cols = tv.shape()[1];
                let mut dt = vec![0.0; tv.numel()];
                for (&k, &gv) in index.iter().zip(g) {
                    dt[k * cols + column] += gv;
                }
                accumulate(grads, *table, &dt);
            }
            Op::NegCosineSum {
                pred,
                target,
                rows,
                eps,
            } => {
                let pv = &self.nodes[*pred].value;
                let d = pv.last_dim();
                let mut dp = vec![0.0; pv.numel()];
                for &r in rows {
                    let p = &pv.data()[r * d..(r + 1) * d];
                    let t = &target.data()[r * d..(r + 1) * d];
                    let np = norm(p);
                    let nt = norm(t);
                    let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
                    let den = np * nt + eps;
                    // d(-dot/den)/dp = -(t/den - dot * nt * p / (np * den^2))
                    let coef = if np > 0.0 {
                        dot * nt / (np * den * den)
                    } else {
                        0.0
                    };
                    for j in 0..d {
                        dp[r * d + j] += -g[0] * (t[j] / den - coef * p[j]);
                    }
                }
                accumulate(grads, *pred, &dp);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    match &mut grads[i] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn cosine(p: &[f64], t: &[f64], eps: f64) -> f64 {
    let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    dot / (norm(p) * norm(t) + eps)
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var, tape: &Tape) -> Result<Tensor> {
        if v.tape != self.tape || v.tape != tape.id {
            return Err(Error::Usage(format!(
                "parameter {} is not recorded on the differentiated tape",
                v.index
            )));
        }
        if !tape.nodes[v.index].requires_grad {
            return Err(Error::Usage(format!(
                "variable {} was recorded as a constant",
                v.index
            )));
        }
        Ok(match self.grads.get(v.index).and_then(|g| g.clone()) {
            Some(g) => g,
            None => Tensor::zeros(tape.nodes[v.index].value.shape()),
        })
    }
}

/// Value and exact reverse-mode gradient of the scalar built by `f` with
/// respect to every tensor in `params`.
pub fn gradient<F>(f: F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let out = vars
        .iter()
        .map(|&v| grads.wrt(v, &tape))
        .collect::<Result<Vec<_>>>()?;
    Ok((value, out))
}

/// Forward value of `f` at `params` (no reverse pass).
pub fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.value(loss).item()
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central differences `(f(p + h) - f(p - h)) / 2h`, one coordinate at a time.
pub fn finite_diff_grad<F>(f: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    stencil_grad(&f, params, h, &[(1.0, 0.5), (-1.0, -0.5)])
}

/// Fourth-order central differences
/// `(-f(p + 2h) + 8f(p + h) - 8f(p - h) + f(p - 2h)) / 12h`.
///
/// Truncation error is `O(h⁴)`, so a larger `h` can be used, which keeps
/// roundoff small on coordinates whose true derivative is zero.
pub fn finite_diff_grad_4th<F>(f: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    let w = 1.0 / 12.0;
    stencil_grad(
        &f,
        params,
        h,
        &[(2.0, -w), (1.0, 8.0 * w), (-1.0, -8.0 * w), (-2.0, w)],
    )
}

/// `Σ weight · f(p + offset·h) / h` per coordinate, for `(offset, weight)` taps.
fn stencil_grad<F>(f: &F, params: &[Tensor], h: f64, taps: &[(f64, f64)]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if !(h > 0.0) {
        return Err(Error::config(
            "h",
            "finite-difference step must be positive",
        ));
    }
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j)))
        .collect();
    let diffs = coords
        .par_iter()
        .map(|&(i, j)| {
            let mut shifted = params.to_vec();
            let base = params[i].data()[j];
            let mut acc = 0.0;
            for &(offset, weight) in taps {
                let mut data = params[i].data().to_vec();
                data[j] = base + offset * h;
                shifted[i] = Tensor::from_parts(params[i].shape().to_vec(), data);
                acc += weight * evaluate(f, &shifted)?;
            }
            Ok(acc / h)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut out = Vec::with_capacity(params.len());
    let mut it = diffs.into_iter();
    for p in params {
        let data: Vec<f64> = it.by_ref().take(p.numel()).collect();
        out.push(Tensor::from_parts(p.shape().to_vec(), data));
    }
    Ok(out)
}

/// Largest per-coordinate `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_error(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
