use super::{NdError, NdResult, Tensor};
use std::cell::RefCell;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// One recorded forward pass. Nodes are appended in topological order;
/// [`Tape::backward`] replays them in reverse to accumulate adjoints.
///
/// A tape is confined to a single worker: ops take `&self` but the tape is
/// not `Sync`. Distinct workers each build their own tape over a shared
/// read-only parameter snapshot.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Tensor,
    op: Op,
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    /// Columnwise max within each consecutive block of rows.
    /// `argmax[g * cols + j]` is the winning row (first index on ties).
    GroupMaxRows {
        input: Var,
        argmax: Vec<usize>,
    },
    BroadcastRows(Var, usize),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    /// Row `i * k + j` of the output is `a.row(i) + b.row(j)`.
    PairwiseAddRows(Var, Var),
    Reshape(Var),
}

/// Adjoints produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `var`, if any path
    /// reached it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Record an input value (parameter, data, or constant).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Drop every node recorded after the tape had `len` nodes, invalidating
    /// any [`Var`] issued since. Lets a sampling loop bind parameters once
    /// and roll the tape back after each throwaway forward pass.
    pub fn truncate(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }

    /// Clone of the tensor held at `var`.
    pub fn value(&self, var: Var) -> Tensor {
        self.nodes.borrow()[var.0].value.clone()
    }

    pub fn shape_of(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Matrix product of two rank-2 tensors with agreeing inner dimensions.
    pub fn matmul(&self, a: Var, b: Var) -> NdResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, ka) = av.require_rank2("matmul")?;
            let (kb, n) = bv.require_rank2("matmul")?;
            if ka != kb {
                return Err(NdError::Dimension {
                    op: "matmul",
                    detail: format!("inner dims {ka} vs {kb}"),
                });
            }
            let mut out = vec![0.0; m * n];
            matmul_into(av.data(), bv.data(), m, ka, n, &mut out);
            Tensor::matrix(m, n, out)?
        };
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    /// Elementwise sum. Shapes must be equal, or one side must be a `[1]`
    /// scalar tensor (broadcast).
    pub fn add(&self, a: Var, b: Var) -> NdResult<Var> {
        let value = self.broadcast_zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Elementwise difference, same broadcasting rule as [`Tape::add`].
    pub fn sub(&self, a: Var, b: Var) -> NdResult<Var> {
        let value = self.broadcast_zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product, same broadcasting rule as [`Tape::add`].
    pub fn mul(&self, a: Var, b: Var) -> NdResult<Var> {
        let value = self.broadcast_zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Multiply every entry by the constant `s`.
    pub fn scale(&self, a: Var, s: f64) -> NdResult<Var> {
        let value = self.nodes.borrow()[a.0].value.map(|x| x * s)?;
        Ok(self.push(value, Op::Scale(a, s)))
    }

    pub fn relu(&self, a: Var) -> NdResult<Var> {
        let value = self.nodes.borrow()[a.0].value.map(|x| x.max(0.0))?;
        Ok(self.push(value, Op::Relu(a)))
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&self, a: Var) -> NdResult<Var> {
        let value = self.nodes.borrow()[a.0].value.map(softplus)?;
        Ok(self.push(value, Op::Softplus(a)))
    }

    pub fn sigmoid(&self, a: Var) -> NdResult<Var> {
        let value = self.nodes.borrow()[a.0].value.map(sigmoid)?;
        Ok(self.push(value, Op::Sigmoid(a)))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&self, a: Var) -> NdResult<Var> {
        let total = self.nodes.borrow()[a.0].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(total)?, Op::Sum(a)))
    }

    /// Mean of all entries, as a `[1]` tensor.
    pub fn mean(&self, a: Var) -> NdResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64)?
        };
        Ok(self.push(value, Op::Mean(a)))
    }

    /// Columnwise max over all rows of a rank-2 tensor, yielding a vector of
    /// length `cols`. Gradient flows to the first maximal row per column.
    pub fn max_over_rows(&self, a: Var) -> NdResult<Var> {
        let rows = self.nodes.borrow()[a.0].value.rows()?;
        let pooled = self.group_max_rows(a, rows)?;
        let cols = self.nodes.borrow()[pooled.0].value.cols()?;
        self.reshape(pooled, vec![cols])
    }

    /// Columnwise max within each consecutive block of `block` rows:
    /// `[g*block × n] -> [g × n]`. Ties break to the first row index.
    pub fn group_max_rows(&self, a: Var, block: usize) -> NdResult<Var> {
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            let (rows, cols) = v.require_rank2("group_max_rows")?;
            if block == 0 || rows % block != 0 {
                return Err(NdError::Dimension {
                    op: "group_max_rows",
                    detail: format!("{rows} rows not divisible into blocks of {block}"),
                });
            }
            let groups = rows / block;
            let data = v.data();
            let mut out = vec![0.0; groups * cols];
            let mut argmax = vec![0usize; groups * cols];
            for g in 0..groups {
                let base = g * block;
                out[g * cols..(g + 1) * cols].copy_from_slice(&data[base * cols..][..cols]);
                for j in 0..cols {
                    argmax[g * cols + j] = base;
                }
                for r in base + 1..base + block {
                    let row = &data[r * cols..][..cols];
                    for j in 0..cols {
                        if row[j] > out[g * cols + j] {
                            out[g * cols + j] = row[j];
                            argmax[g * cols + j] = r;
                        }
                    }
                }
            }
            (Tensor::matrix(groups, cols, out)?, argmax)
        };
        Ok(self.push(value, Op::GroupMaxRows { input: a, argmax }))
    }

    /// Repeat a length-`n` vector as `rows` identical rows: `[n] -> [rows × n]`.
    pub fn broadcast_rows(&self, a: Var, rows: usize) -> NdResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            if v.rank() != 1 {
                return Err(NdError::Dimension {
                    op: "broadcast_rows",
                    detail: format!("expected rank-1, got {:?}", v.shape()),
                });
            }
            if rows == 0 {
                return Err(NdError::EmptyInput("broadcast_rows"));
            }
            let n = v.numel();
            let mut out = Vec::with_capacity(rows * n);
            for _ in 0..rows {
                out.extend_from_slice(v.data());
            }
            Tensor::matrix(rows, n, out)?
        };
        Ok(self.push(value, Op::BroadcastRows(a, rows)))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> NdResult<Var> {
        if parts.is_empty() {
            return Err(NdError::EmptyInput("concat_cols"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows()?;
            let mut widths = Vec::with_capacity(parts.len());
            for &p in parts {
                let (r, c) = nodes[p.0].value.require_rank2("concat_cols")?;
                if r != rows {
                    return Err(NdError::Dimension {
                        op: "concat_cols",
                        detail: format!("row counts differ: {rows} vs {r}"),
                    });
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut out = vec![0.0; rows * total];
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = nodes[p.0].value.data();
                for r in 0..rows {
                    out[r * total + offset..r * total + offset + w]
                        .copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                offset += w;
            }
            Tensor::matrix(rows, total, out)?
        };
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Stack equal-length vectors as the rows of a matrix: `K × [n] -> [K × n]`.
    pub fn stack_rows(&self, rows: &[Var]) -> NdResult<Var> {
        if rows.is_empty() {
            return Err(NdError::EmptyInput("stack_rows"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let n = nodes[rows[0].0].value.numel();
            let mut out = Vec::with_capacity(rows.len() * n);
            for &r in rows {
                let v = &nodes[r.0].value;
                if v.rank() != 1 || v.numel() != n {
                    return Err(NdError::Dimension {
                        op: "stack_rows",
                        detail: format!("expected rank-1 of len {n}, got {:?}", v.shape()),
                    });
                }
                out.extend_from_slice(v.data());
            }
            Tensor::matrix(rows.len(), n, out)?
        };
        Ok(self.push(value, Op::StackRows(rows.to_vec())))
    }

    /// All-pairs row sums: for `a, b` of shape `[k × h]`, the output row
    /// `i * k + j` is `a.row(i) + b.row(j)`, shape `[k² × h]`.
    pub fn pairwise_add_rows(&self, a: Var, b: Var) -> NdResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (k, h) = av.require_rank2("pairwise_add_rows")?;
            let (kb, hb) = bv.require_rank2("pairwise_add_rows")?;
            if k != kb || h != hb {
                return Err(NdError::Dimension {
                    op: "pairwise_add_rows",
                    detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
                });
            }
            let (ad, bd) = (av.data(), bv.data());
            let mut out = vec![0.0; k * k * h];
            for i in 0..k {
                let arow = &ad[i * h..(i + 1) * h];
                for j in 0..k {
                    let brow = &bd[j * h..(j + 1) * h];
                    let dst = &mut out[(i * k + j) * h..(i * k + j + 1) * h];
                    for ((d, &x), &y) in dst.iter_mut().zip(arow).zip(brow) {
                        *d = x + y;
                    }
                }
            }
            Tensor::matrix(k * k, h, out)?
        };
        Ok(self.push(value, Op::PairwiseAddRows(a, b)))
    }

    /// Reinterpret the entries under a new shape with equal element count.
    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> NdResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            Tensor::new(shape, nodes[a.0].value.data().to_vec())?
        };
        Ok(self.push(value, Op::Reshape(a)))
    }

    fn broadcast_zip(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> NdResult<Tensor> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        if av.shape() == bv.shape() {
            av.zip_map(bv, f)
        } else if bv.is_scalar() {
            let s = bv.data()[0];
            av.map(|x| f(x, s))
        } else if av.is_scalar() {
            let s = av.data()[0];
            bv.map(|y| f(s, y))
        } else {
            Err(NdError::Dimension {
                op,
                detail: format!(
                    "shapes {:?} and {:?} are neither equal nor scalar-vs-tensor",
                    av.shape(),
                    bv.shape()
                ),
            })
        }
    }

    /// Reverse pass from a scalar root. Returns one adjoint slot per node.
    pub fn backward(&self, root: Var) -> NdResult<Gradients> {
        let nodes = self.nodes.borrow();
        if !nodes[root.0].value.is_scalar() {
            return Err(NdError::Dimension {
                op: "backward",
                detail: format!(
                    "root must be a [1] scalar, got {:?}",
                    nodes[root.0].value.shape()
                ),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(&g, bv.data(), m, n, k, &mut da);
                    accumulate(&mut grads[a.0], &da);
                    let mut db = vec![0.0; k * n];
                    matmul_tn_into(av.data(), &g, m, k, n, &mut db);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::Add(a, b) => {
                    self.accumulate_broadcast(&nodes, &mut grads, *a, &g, 1.0);
                    self.accumulate_broadcast(&nodes, &mut grads, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.accumulate_broadcast(&nodes, &mut grads, *a, &g, 1.0);
                    self.accumulate_broadcast(&nodes, &mut grads, *b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let ga = scale_by_other(&g, bv, av.numel());
                    self.accumulate_broadcast(&nodes, &mut grads, *a, &ga, 1.0);
                    let gb = scale_by_other(&g, av, bv.numel());
                    self.accumulate_broadcast(&nodes, &mut grads, *b, &gb, 1.0);
                }
                Op::Scale(a, s) => {
                    let da: Vec<f64> = g.iter().map(|&x| x * s).collect();
                    accumulate(&mut grads[a.0], &da);
                }
                Op::Relu(a) => {
                    let xs = nodes[a.0].value.data();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(xs)
                        .map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], &da);
                }
                Op::Softplus(a) => {
                    let xs = nodes[a.0].value.data();
                    let da: Vec<f64> = g.iter().zip(xs).map(|(&gi, &x)| gi * sigmoid(x)).collect();
                    accumulate(&mut grads[a.0], &da);
                }
                Op::Sigmoid(a) => {
                    let ys = node.value.data();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(ys)
                        .map(|(&gi, &y)| gi * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads[a.0], &da);
                }
                Op::Sum(a) => {
                    let da = vec![g[0]; nodes[a.0].value.numel()];
                    accumulate(&mut grads[a.0], &da);
                }
                Op::Mean(a) => {
                    let n = nodes[a.0].value.numel();
                    let da = vec![g[0] / n as f64; n];
                    accumulate(&mut grads[a.0], &da);
                }
                Op::GroupMaxRows { input, argmax, .. } => {
                    let cols = node.value.shape()[1];
                    let mut da = vec![0.0; nodes[input.0].value.numel()];
                    for (gi, (&gv, &src_row)) in g.iter().zip(argmax).enumerate() {
                        let j = gi % cols;
                        da[src_row * cols + j] += gv;
                    }
                    accumulate(&mut grads[input.0], &da);
                }
                Op::BroadcastRows(a, rows) => {
                    let n = nodes[a.0].value.numel();
                    let mut da = vec![0.0; n];
                    for r in 0..*rows {
                        for j in 0..n {
                            da[j] += g[r * n + j];
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.shape()[0];
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.shape()[1];
                        let mut da = vec![0.0; rows * w];
                        for r in 0..rows {
                            da[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads[p.0], &da);
                        offset += w;
                    }
                }
                Op::StackRows(parts) => {
                    let n = node.value.shape()[1];
                    for (i, &p) in parts.iter().enumerate() {
                        accumulate(&mut grads[p.0], &g[i * n..(i + 1) * n]);
                    }
                }
                Op::PairwiseAddRows(a, b) => {
                    let (k, h) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let mut da = vec![0.0; k * h];
                    let mut db = vec![0.0; k * h];
                    for i in 0..k {
                        for j in 0..k {
                            let src = &g[(i * k + j) * h..(i * k + j + 1) * h];
                            for (d, &s) in da[i * h..(i + 1) * h].iter_mut().zip(src) {
                                *d += s;
                            }
                            for (d, &s) in db[j * h..(j + 1) * h].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::Reshape(a) => {
                    accumulate(&mut grads[a.0], &g);
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(nodes[i].value.shape().to_vec(), data)
                        .expect("adjoint shape matches node shape")
                })
            })
            .collect::<Vec<_>>();
        Ok(Gradients { grads })
    }

    /// Accumulate `sign * g` into the adjoint of `target`, summing over all
    /// entries when the target is a broadcast `[1]` scalar.
    fn accumulate_broadcast(
        &self,
        nodes: &[Node],
        grads: &mut [Option<Vec<f64>>],
        target: Var,
        g: &[f64],
        sign: f64,
    ) {
        let n = nodes[target.0].value.numel();
        if n == g.len() {
            if sign == 1.0 {
                accumulate(&mut grads[target.0], g);
            } else {
                let scaled: Vec<f64> = g.iter().map(|&x| x * sign).collect();
                accumulate(&mut grads[target.0], &scaled);
            }
        } else {
            debug_assert_eq!(n, 1);
            let total: f64 = g.iter().sum::<f64>() * sign;
            accumulate(&mut grads[target.0], &[total]);
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

/// Upstream gradient times the other factor of a Hadamard product, handling
/// the scalar-broadcast case on either side.
fn scale_by_other(g: &[f64], other: &Tensor, _self_numel: usize) -> Vec<f64> {
    let od = other.data();
    if od.len() == g.len() {
        g.iter().zip(od).map(|(&a, &b)| a * b).collect()
    } else {
        debug_assert_eq!(od.len(), 1);
        let s = od[0];
        g.iter().map(|&a| a * s).collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n` (out must be zeroed).
pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += ail * bv;
            }
        }
    }
}

/// `out += g · bᵀ` for `g: m×n`, `b: k×n`, out `m×k`.
fn matmul_nt_into(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (l, o) in orow.iter_mut().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            let mut acc = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            *o += acc;
        }
    }
}

/// `out += aᵀ · g` for `a: m×k`, `g: m×n`, out `k×n`.
fn matmul_tn_into(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += ail * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        use rand_distr::{Distribution, StandardNormal};
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| StandardNormal.sample(rng))
            .collect::<Vec<f64>>();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Central-difference gradient of `f` w.r.t. the entries of `x`,
    /// independent of the tape: the oracle for every gradient test here.
    fn fd_grad(x: &Tensor, eps: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.numel());
        for i in 0..x.numel() {
            let mut plus = x.data().to_vec();
            plus[i] += eps;
            let mut minus = x.data().to_vec();
            minus[i] -= eps;
            let fp = f(&Tensor::new(x.shape().to_vec(), plus).unwrap());
            let fm = f(&Tensor::new(x.shape().to_vec(), minus).unwrap());
            out.push((fp - fm) / (2.0 * eps));
        }
        out
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity() {
        let t = Tape::new();
        let eye = t.leaf(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let b = t.leaf(Tensor::matrix(3, 2, vec![5., -1., 2., 7., 0.5, 3.]).unwrap());
        let c = t.matmul(eye, b).unwrap();
        assert_eq!(t.value(c), t.value(b));
    }

    #[test]
    fn matmul_hand_product() {
        let t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let b = t.leaf(Tensor::matrix(2, 1, vec![1., 1.]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = t.leaf(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(matches!(
            t.matmul(a, b),
            Err(NdError::Dimension { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_grad_is_ones_times_b_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let av = randn(&mut rng, &[3, 4]);
        let bv = randn(&mut rng, &[4, 2]);

        let t = Tape::new();
        let a = t.leaf(av.clone());
        let b = t.leaf(bv.clone());
        let c = t.matmul(a, b).unwrap();
        let loss = t.sum(c).unwrap();
        let grads = t.backward(loss).unwrap();
        let da = grads.get(a).unwrap();

        // closed form: ones(3x2) · bᵀ
        for i in 0..3 {
            for l in 0..4 {
                let expect: f64 = (0..2).map(|j| bv.data()[l * 2 + j]).sum();
                assert!((da.data()[i * 4 + l] - expect).abs() < 1e-12);
            }
        }

        // independent finite-difference oracle, h = 1e-6
        let fd = fd_grad(&av, 1e-6, |x| {
            let t = Tape::new();
            let a = t.leaf(x.clone());
            let b = t.leaf(bv.clone());
            let c = t.matmul(a, b).unwrap();
            t.value(t.sum(c).unwrap()).data()[0]
        });
        assert!(max_rel_err(da.data(), &fd) < 1e-6);
    }

    #[test]
    fn relu_definition() {
        let t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn scale_by_zero() {
        let t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![3.0, -4.0]).unwrap());
        let y = t.scale(x, 0.0).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softplus_grad_at_zero_is_half() {
        let x = Tensor::vector(vec![0.0]).unwrap();
        let fd = fd_grad(&x, 1e-6, |x| {
            let t = Tape::new();
            let v = t.leaf(x.clone());
            t.value(t.sum(t.softplus(v).unwrap()).unwrap()).data()[0]
        });
        assert!((fd[0] - 0.5).abs() < 1e-9);

        let t = Tape::new();
        let v = t.leaf(x);
        let loss = t.sum(t.softplus(v).unwrap()).unwrap();
        let grads = t.backward(loss).unwrap();
        assert!((grads.get(v).unwrap().data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn add_shape_mismatch_is_error() {
        let t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        assert!(t.add(a, b).is_err());
    }

    #[test]
    fn scalar_broadcast_add_and_grad() {
        let t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let s = t.leaf(Tensor::scalar(10.0).unwrap());
        let y = t.add(a, s).unwrap();
        assert_eq!(t.value(y).data(), &[11.0, 12.0, 13.0]);
        let loss = t.sum(y).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(s).unwrap().data(), &[3.0]);
    }

    #[test]
    fn max_over_rows_columnwise() {
        let t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 2, vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let y = t.max_over_rows(x).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 5.0]);
    }

    #[test]
    fn max_over_rows_empty_shape_is_error() {
        let t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0]).unwrap());
        assert!(t.max_over_rows(x).is_err());
    }

    #[test]
    fn sum_grad_is_ones() {
        let t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let loss = t.sum(x).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn max_grad_routes_to_unique_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = randn(&mut rng, &[4, 3]);

        let t = Tape::new();
        let x = t.leaf(xv.clone());
        let y = t.max_over_rows(x).unwrap();
        let loss = t.sum(y).unwrap();
        let grads = t.backward(loss).unwrap();
        let da = grads.get(x).unwrap();

        // exactly one 1.0 per column, at the argmax, zero elsewhere
        for j in 0..3 {
            let col: Vec<f64> = (0..4).map(|i| da.data()[i * 3 + j]).collect();
            assert_eq!(col.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(col.iter().filter(|&&v| v == 0.0).count(), 3);
        }

        // finite differences away from ties
        let fd = fd_grad(&xv, 1e-6, |x| {
            let t = Tape::new();
            let v = t.leaf(x.clone());
            t.value(t.sum(t.max_over_rows(v).unwrap()).unwrap()).data()[0]
        });
        assert!(max_rel_err(da.data(), &fd) < 1e-6);
    }

    #[test]
    fn max_tie_break_goes_to_first_row() {
        let t = Tape::new();
        let x = t.leaf(Tensor::matrix(3, 1, vec![2.0, 2.0, 1.0]).unwrap());
        let y = t.max_over_rows(x).unwrap();
        let loss = t.sum(y).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn group_max_rows_blocks() {
        let t = Tape::new();
        // two blocks of two rows
        let x = t.leaf(Tensor::matrix(4, 2, vec![1., 8., 3., 2., 9., 0., 4., 7.]).unwrap());
        let y = t.group_max_rows(x, 2).unwrap();
        assert_eq!(t.value(y).data(), &[3., 8., 9., 7.]);
    }

    #[test]
    fn pairwise_add_rows_values_and_grad() {
        let t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 1, vec![1.0, 10.0]).unwrap());
        let b = t.leaf(Tensor::matrix(2, 1, vec![0.1, 0.2]).unwrap());
        let y = t.pairwise_add_rows(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.1, 1.2, 10.1, 10.2]);
        let loss = t.sum(y).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn every_op_matches_finite_differences_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let eps = 1e-6;
        // 100 random points spread over the op set
        for trial in 0..100 {
            let op = trial % 10;
            let shape = [2 + trial % 3, 3];
            let xv = randn(&mut rng, &shape);
            let other = randn(&mut rng, &shape);
            let paired = randn(&mut rng, &[shape[1], 2]);

            let build = |x: &Tensor| -> f64 {
                let t = Tape::new();
                let v = t.leaf(x.clone());
                let o = t.leaf(other.clone());
                let w = t.leaf(paired.clone());
                let y = match op {
                    0 => t.matmul(v, w).unwrap(),
                    1 => t.add(v, o).unwrap(),
                    2 => t.sub(v, o).unwrap(),
                    3 => t.mul(v, o).unwrap(),
                    4 => t.scale(v, -1.7).unwrap(),
                    5 => t.relu(v).unwrap(),
                    6 => t.softplus(v).unwrap(),
                    7 => t.sigmoid(v).unwrap(),
                    8 => {
                        let m = t.max_over_rows(v).unwrap();
                        t.reshape(m, vec![1, shape[1]]).unwrap()
                    }
                    _ => {
                        let c = t.concat_cols(&[v, o]).unwrap();
                        t.pairwise_add_rows(c, c).unwrap()
                    }
                };
                // square so the loss is nonlinear in the op output
                let sq = t.mul(y, y).unwrap();
                t.value(t.mean(sq).unwrap()).data()[0]
            };

            let fd = fd_grad(&xv, eps, build);

            let t = Tape::new();
            let v = t.leaf(xv.clone());
            let o = t.leaf(other.clone());
            let w = t.leaf(paired.clone());
            let y = match op {
                0 => t.matmul(v, w).unwrap(),
                1 => t.add(v, o).unwrap(),
                2 => t.sub(v, o).unwrap(),
                3 => t.mul(v, o).unwrap(),
                4 => t.scale(v, -1.7).unwrap(),
                5 => t.relu(v).unwrap(),
                6 => t.softplus(v).unwrap(),
                7 => t.sigmoid(v).unwrap(),
                8 => {
                    let m = t.max_over_rows(v).unwrap();
                    t.reshape(m, vec![1, shape[1]]).unwrap()
                }
                _ => {
                    let c = t.concat_cols(&[v, o]).unwrap();
                    t.pairwise_add_rows(c, c).unwrap()
                }
            };
            let sq = t.mul(y, y).unwrap();
            let loss = t.mean(sq).unwrap();
            let grads = t.backward(loss).unwrap();
            let da = grads.get(v).unwrap();
            let err = max_rel_err(da.data(), &fd);
            assert!(err <= 1e-5, "op {op} trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn ops_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = randn(&mut rng, &[4, 4]);
        let b = randn(&mut rng, &[4, 4]);
        let run = || {
            let t = Tape::new();
            let x = t.leaf(a.clone());
            let y = t.leaf(b.clone());
            let z = t.relu(t.matmul(x, y).unwrap()).unwrap();
            t.value(t.sum(z).unwrap()).data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
