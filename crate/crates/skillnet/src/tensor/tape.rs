//! Define-by-run autodiff. Forward values are computed eagerly as nodes are
//! pushed; `backward` replays the node list in reverse, applying hand-written
//! vector-Jacobian products and accumulating into `ParamSet` gradients.

use super::kernels::{
    broadcast_binary, broadcast_shapes, matmul_into, matmul_nt_into, matmul_tn_into, permute,
    reduce_into_shape,
};
use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Matmul { a: NodeId, b: NodeId },
    MatmulNt { a: NodeId, b: NodeId },
    BatchMatmul { a: NodeId, b: NodeId },
    BatchMatmulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Reshape { x: NodeId },
    Permute { x: NodeId, axes: Vec<usize> },
    GatherRows { x: NodeId, rows: Vec<usize> },
    ScatterAddRows { x: NodeId, rows: Vec<usize> },
    GatherElems { x: NodeId, rows: Vec<usize>, cols: Vec<usize> },
    ConcatCols { parts: Vec<NodeId> },
    SoftmaxRows { x: NodeId },
    LogSumExpRows { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Gelu { x: NodeId },
    Tanh { x: NodeId },
    SumAll { x: NodeId },
    CrossEntropyMean { logits: NodeId, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Stable log-sum-exp of one row.
fn lse_row(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node shape/data always consistent")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let n = &self.nodes[id.0];
        if n.data.len() != 1 {
            return Err(Error::NotScalar(n.shape.clone()));
        }
        Ok(n.data[0])
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { op, shape, data });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let (shape, data) = t.into_parts();
        self.push(Op::Const, shape, data)
    }

    pub fn constant_parts(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(t))
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        let p = params.get(id);
        self.push(
            Op::Param(id),
            p.value.shape().to_vec(),
            p.value.data().to_vec(),
        )
    }

    pub fn param_named(&mut self, params: &ParamSet, name: &str) -> Result<NodeId> {
        let id = params.id(name)?;
        Ok(self.param(params, id))
    }

    fn want_rank(&self, op: &'static str, id: NodeId, rank: usize) -> Result<()> {
        if self.nodes[id.0].shape.len() != rank {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!(
                    "expected rank {}, got shape {:?}",
                    rank, self.nodes[id.0].shape
                ),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_rank("matmul", a, 2)?;
        self.want_rank("matmul", b, 2)?;
        let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
        let (k2, n) = (self.nodes[b.0].shape[0], self.nodes[b.0].shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("[{},{}] @ [{},{}]", m, k, k2, n),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&mut out, &self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        Ok(self.push(Op::Matmul { a, b }, vec![m, n], out))
    }

    /// a @ b^T for 2-D operands: [m,k] x [n,k] -> [m,n].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_rank("matmul_nt", a, 2)?;
        self.want_rank("matmul_nt", b, 2)?;
        let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
        let (n, k2) = (self.nodes[b.0].shape[0], self.nodes[b.0].shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("[{},{}] @ [{},{}]^T", m, k, n, k2),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(&mut out, &self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        Ok(self.push(Op::MatmulNt { a, b }, vec![m, n], out))
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_rank("batch_matmul", a, 3)?;
        self.want_rank("batch_matmul", b, 3)?;
        let (ba, m, k) = (
            self.nodes[a.0].shape[0],
            self.nodes[a.0].shape[1],
            self.nodes[a.0].shape[2],
        );
        let (bb, k2, n) = (
            self.nodes[b.0].shape[0],
            self.nodes[b.0].shape[1],
            self.nodes[b.0].shape[2],
        );
        if ba != bb || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "batch_matmul",
                detail: format!("[{},{},{}] @ [{},{},{}]", ba, m, k, bb, k2, n),
            });
        }
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            matmul_into(
                &mut out[i * m * n..(i + 1) * m * n],
                &self.nodes[a.0].data[i * m * k..(i + 1) * m * k],
                &self.nodes[b.0].data[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(Op::BatchMatmul { a, b }, vec![ba, m, n], out))
    }

    /// Batched a @ b^T: [B,m,k] x [B,n,k] -> [B,m,n].
    pub fn batch_matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_rank("batch_matmul_nt", a, 3)?;
        self.want_rank("batch_matmul_nt", b, 3)?;
        let (ba, m, k) = (
            self.nodes[a.0].shape[0],
            self.nodes[a.0].shape[1],
            self.nodes[a.0].shape[2],
        );
        let (bb, n, k2) = (
            self.nodes[b.0].shape[0],
            self.nodes[b.0].shape[1],
            self.nodes[b.0].shape[2],
        );
        if ba != bb || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "batch_matmul_nt",
                detail: format!("[{},{},{}] @ [{},{},{}]^T", ba, m, k, bb, n, k2),
            });
        }
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            matmul_nt_into(
                &mut out[i * m * n..(i + 1) * m * n],
                &self.nodes[a.0].data[i * m * k..(i + 1) * m * k],
                &self.nodes[b.0].data[i * n * k..(i + 1) * n * k],
                m,
                k,
                n,
            );
        }
        Ok(self.push(Op::BatchMatmulNt { a, b }, vec![ba, m, n], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = broadcast_shapes(&self.nodes[a.0].shape, &self.nodes[b.0].shape)?;
        let data = broadcast_binary(
            &self.nodes[a.0].data,
            &self.nodes[a.0].shape,
            &self.nodes[b.0].data,
            &self.nodes[b.0].shape,
            &shape,
            |x, y| x + y,
        );
        Ok(self.push(Op::Add { a, b }, shape, data))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = broadcast_shapes(&self.nodes[a.0].shape, &self.nodes[b.0].shape)?;
        let data = broadcast_binary(
            &self.nodes[a.0].data,
            &self.nodes[a.0].shape,
            &self.nodes[b.0].data,
            &self.nodes[b.0].shape,
            &shape,
            |x, y| x * y,
        );
        Ok(self.push(Op::Mul { a, b }, shape, data))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Scale { x, c }, shape, data)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.nodes[x.0].shape, shape),
            });
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(Op::Reshape { x }, shape, data))
    }

    pub fn permute_axes(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let rank = self.nodes[x.0].shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidArgument(format!(
                "permutation {:?} is not a permutation of 0..{}",
                axes, rank
            )));
        }
        let (data, shape) = permute(&self.nodes[x.0].data, &self.nodes[x.0].shape, axes);
        Ok(self.push(
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            shape,
            data,
        ))
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.want_rank("gather_rows", x, 2)?;
        let (n, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows index {} out of range for {} rows",
                bad, n
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&self.nodes[x.0].data[r * d..(r + 1) * d]);
        }
        Ok(self.push(
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            vec![rows.len(), d],
            data,
        ))
    }

    /// out[rows[i], :] += x[i, :] into a zero matrix of `n_rows` rows.
    pub fn scatter_add_rows(&mut self, x: NodeId, rows: &[usize], n_rows: usize) -> Result<NodeId> {
        self.want_rank("scatter_add_rows", x, 2)?;
        let (r, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        if rows.len() != r {
            return Err(Error::ShapeMismatch {
                op: "scatter_add_rows",
                detail: format!("{} rows of data, {} indices", r, rows.len()),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= n_rows) {
            return Err(Error::InvalidArgument(format!(
                "scatter_add_rows index {} out of range for {} rows",
                bad, n_rows
            )));
        }
        let mut data = vec![0.0; n_rows * d];
        for (i, &dst) in rows.iter().enumerate() {
            let src = &self.nodes[x.0].data[i * d..(i + 1) * d];
            let out = &mut data[dst * d..(dst + 1) * d];
            for j in 0..d {
                out[j] += src[j];
            }
        }
        Ok(self.push(
            Op::ScatterAddRows {
                x,
                rows: rows.to_vec(),
            },
            vec![n_rows, d],
            data,
        ))
    }

    /// out[i, 0] = x[rows[i], cols[i]].
    pub fn gather_elems(&mut self, x: NodeId, rows: &[usize], cols: &[usize]) -> Result<NodeId> {
        self.want_rank("gather_elems", x, 2)?;
        if rows.len() != cols.len() {
            return Err(Error::ShapeMismatch {
                op: "gather_elems",
                detail: format!("{} row indices, {} col indices", rows.len(), cols.len()),
            });
        }
        let (n, m) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        let mut data = Vec::with_capacity(rows.len());
        for (&r, &c) in rows.iter().zip(cols) {
            if r >= n || c >= m {
                return Err(Error::InvalidArgument(format!(
                    "gather_elems ({},{}) out of range for [{},{}]",
                    r, c, n, m
                )));
            }
            data.push(self.nodes[x.0].data[r * m + c]);
        }
        Ok(self.push(
            Op::GatherElems {
                x,
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
            vec![rows.len(), 1],
            data,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        }
        for &p in parts {
            self.want_rank("concat_cols", p, 2)?;
        }
        let n = self.nodes[parts[0].0].shape[0];
        if parts.iter().any(|&p| self.nodes[p.0].shape[0] != n) {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                detail: "parts disagree on row count".into(),
            });
        }
        let total: usize = parts.iter().map(|&p| self.nodes[p.0].shape[1]).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                let d = self.nodes[p.0].shape[1];
                data.extend_from_slice(&self.nodes[p.0].data[i * d..(i + 1) * d]);
            }
        }
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            vec![n, total],
            data,
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| Error::ShapeMismatch {
            op: "softmax_rows",
            detail: "rank 0 input".into(),
        })?;
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; src.len()];
        for r in 0..src.len() / d {
            let row = &src[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                data[r * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                data[r * d + j] /= sum;
            }
        }
        Ok(self.push(Op::SoftmaxRows { x }, shape, data))
    }

    /// Log-sum-exp along the last axis; requires rank >= 2 and drops that axis.
    pub fn log_sum_exp_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "log_sum_exp_rows",
                detail: format!("need rank >= 2, got {:?}", shape),
            });
        }
        let d = *shape.last().unwrap();
        let out_shape: Vec<usize> = shape[..shape.len() - 1].to_vec();
        let src = &self.nodes[x.0].data;
        let data: Vec<f64> = (0..src.len() / d)
            .map(|r| lse_row(&src[r * d..(r + 1) * d]))
            .collect();
        Ok(self.push(Op::LogSumExpRows { x }, out_shape, data))
    }

    /// Layer normalization over the last axis with learned gain and bias
    /// (both 1-D of that axis' size). Variance is the biased estimate.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| Error::ShapeMismatch {
            op: "layer_norm",
            detail: "rank 0 input".into(),
        })?;
        self.want_rank("layer_norm", gain, 1)?;
        self.want_rank("layer_norm", bias, 1)?;
        if self.nodes[gain.0].shape[0] != d || self.nodes[bias.0].shape[0] != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?} vs axis size {}",
                    self.nodes[gain.0].shape, self.nodes[bias.0].shape, d
                ),
            });
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![0.0; src.len()];
        for r in 0..src.len() / d {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = g[j] * (row[j] - mu) * inv + b[j];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, shape, data))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].data.iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Gelu { x }, shape, data)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].data.iter().map(|&v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Tanh { x }, shape, data)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].data.iter().sum();
        self.push(Op::SumAll { x }, vec![1], vec![s])
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].data.len().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean of equally shaped scalar nodes.
    pub fn mean_of(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("mean of nothing".into()));
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(self.scale(acc, 1.0 / parts.len() as f64))
    }

    /// Mean softmax cross-entropy over rows of 2-D logits.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.want_rank("cross_entropy_mean", logits, 2)?;
        let (n, c) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_mean",
                detail: format!("{} rows, {} targets", n, targets.len()),
            });
        }
        if n == 0 {
            return Err(Error::InvalidArgument("cross entropy over zero rows".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!(
                "target class {} out of range for {} classes",
                bad, c
            )));
        }
        let src = &self.nodes[logits.0].data;
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            loss += lse_row(row) - row[t];
        }
        loss /= n as f64;
        Ok(self.push(
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
            },
            vec![1],
            vec![loss],
        ))
    }

    /// Reverse pass from a scalar node. Parameter gradients accumulate into
    /// `params.grad`; call `params.zero_grads()` first for a fresh gradient.
    pub fn backward(&self, loss: NodeId, params: &mut ParamSet) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(pid) => {
                    let pg = params.get_mut(*pid).grad.data_mut();
                    for (dst, src) in pg.iter_mut().zip(&g) {
                        *dst += src;
                    }
                }
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    let (a_data, b_data) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                    matmul_nt_into(Self::buf(&mut grads, a, m * k), &g, b_data, m, n, k);
                    matmul_tn_into(Self::buf(&mut grads, b, k * n), a_data, &g, m, k, n);
                }
                Op::MatmulNt { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[0];
                    let (a_data, b_data) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                    matmul_into(Self::buf(&mut grads, a, m * k), &g, b_data, m, n, k);
                    matmul_tn_into(Self::buf(&mut grads, b, n * k), &g, a_data, m, n, k);
                }
                Op::BatchMatmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (bs, m, k) = (
                        self.nodes[a.0].shape[0],
                        self.nodes[a.0].shape[1],
                        self.nodes[a.0].shape[2],
                    );
                    let n = self.nodes[b.0].shape[2];
                    let a_data = &self.nodes[a.0].data;
                    let b_data = &self.nodes[b.0].data;
                    {
                        let ga = Self::buf(&mut grads, a, bs * m * k);
                        for s in 0..bs {
                            matmul_nt_into(
                                &mut ga[s * m * k..(s + 1) * m * k],
                                &g[s * m * n..(s + 1) * m * n],
                                &b_data[s * k * n..(s + 1) * k * n],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    let gb = Self::buf(&mut grads, b, bs * k * n);
                    for s in 0..bs {
                        matmul_tn_into(
                            &mut gb[s * k * n..(s + 1) * k * n],
                            &a_data[s * m * k..(s + 1) * m * k],
                            &g[s * m * n..(s + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
                Op::BatchMatmulNt { a, b } => {
                    let (a, b) = (*a, *b);
                    let (bs, m, k) = (
                        self.nodes[a.0].shape[0],
                        self.nodes[a.0].shape[1],
                        self.nodes[a.0].shape[2],
                    );
                    let n = self.nodes[b.0].shape[1];
                    let a_data = &self.nodes[a.0].data;
                    let b_data = &self.nodes[b.0].data;
                    {
                        let ga = Self::buf(&mut grads, a, bs * m * k);
                        for s in 0..bs {
                            matmul_into(
                                &mut ga[s * m * k..(s + 1) * m * k],
                                &g[s * m * n..(s + 1) * m * n],
                                &b_data[s * n * k..(s + 1) * n * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    let gb = Self::buf(&mut grads, b, bs * n * k);
                    for s in 0..bs {
                        matmul_tn_into(
                            &mut gb[s * n * k..(s + 1) * n * k],
                            &g[s * m * n..(s + 1) * m * n],
                            &a_data[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                Op::Add { a, b } => {
                    let g_shape = &self.nodes[i].shape;
                    let (a, b) = (*a, *b);
                    {
                        let a_shape = self.nodes[a.0].shape.clone();
                        let numel = self.nodes[a.0].data.len();
                        reduce_into_shape(Self::buf(&mut grads, a, numel), &g, g_shape, &a_shape);
                    }
                    let b_shape = self.nodes[b.0].shape.clone();
                    let numel = self.nodes[b.0].data.len();
                    reduce_into_shape(Self::buf(&mut grads, b, numel), &g, g_shape, &b_shape);
                }
                Op::Mul { a, b } => {
                    let g_shape = self.nodes[i].shape.clone();
                    let (a, b) = (*a, *b);
                    {
                        let other = broadcast_binary(
                            &g,
                            &g_shape,
                            &self.nodes[b.0].data,
                            &self.nodes[b.0].shape,
                            &g_shape,
                            |x, y| x * y,
                        );
                        let a_shape = self.nodes[a.0].shape.clone();
                        let numel = self.nodes[a.0].data.len();
                        reduce_into_shape(Self::buf(&mut grads, a, numel), &other, &g_shape, &a_shape);
                    }
                    let other = broadcast_binary(
                        &g,
                        &g_shape,
                        &self.nodes[a.0].data,
                        &self.nodes[a.0].shape,
                        &g_shape,
                        |x, y| x * y,
                    );
                    let b_shape = self.nodes[b.0].shape.clone();
                    let numel = self.nodes[b.0].data.len();
                    reduce_into_shape(Self::buf(&mut grads, b, numel), &other, &g_shape, &b_shape);
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    let gx = Self::buf(&mut grads, x, g.len());
                    for (dst, src) in gx.iter_mut().zip(&g) {
                        *dst += c * src;
                    }
                }
                Op::Reshape { x } => {
                    let x = *x;
                    let gx = Self::buf(&mut grads, x, g.len());
                    for (dst, src) in gx.iter_mut().zip(&g) {
                        *dst += src;
                    }
                }
                Op::Permute { x, axes } => {
                    let x = *x;
                    let mut inv = vec![0usize; axes.len()];
                    for (o, &a) in axes.iter().enumerate() {
                        inv[a] = o;
                    }
                    let (gp, _) = permute(&g, &self.nodes[i].shape, &inv);
                    let gx = Self::buf(&mut grads, x, gp.len());
                    for (dst, src) in gx.iter_mut().zip(&gp) {
                        *dst += src;
                    }
                }
                Op::GatherRows { x, rows } => {
                    let x = *x;
                    let d = self.nodes[x.0].shape[1];
                    let numel = self.nodes[x.0].data.len();
                    let rows = rows.clone();
                    let gx = Self::buf(&mut grads, x, numel);
                    for (i_row, &r) in rows.iter().enumerate() {
                        let src = &g[i_row * d..(i_row + 1) * d];
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += src[j];
                        }
                    }
                }
                Op::ScatterAddRows { x, rows } => {
                    let x = *x;
                    let d = self.nodes[x.0].shape[1];
                    let numel = self.nodes[x.0].data.len();
                    let rows = rows.clone();
                    let gx = Self::buf(&mut grads, x, numel);
                    for (i_row, &r) in rows.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        let dst = &mut gx[i_row * d..(i_row + 1) * d];
                        for j in 0..d {
                            dst[j] += src[j];
                        }
                    }
                }
                Op::GatherElems { x, rows, cols } => {
                    let x = *x;
                    let m = self.nodes[x.0].shape[1];
                    let numel = self.nodes[x.0].data.len();
                    let (rows, cols) = (rows.clone(), cols.clone());
                    let gx = Self::buf(&mut grads, x, numel);
                    for (k, (&r, &c)) in rows.iter().zip(&cols).enumerate() {
                        gx[r * m + c] += g[k];
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let n = self.nodes[i].shape[0];
                    let total = self.nodes[i].shape[1];
                    let mut offset = 0usize;
                    for &p in &parts {
                        let d = self.nodes[p.0].shape[1];
                        let numel = self.nodes[p.0].data.len();
                        let gp = Self::buf(&mut grads, p, numel);
                        for r in 0..n {
                            for j in 0..d {
                                gp[r * d + j] += g[r * total + offset + j];
                            }
                        }
                        offset += d;
                    }
                }
                Op::SoftmaxRows { x } => {
                    let x = *x;
                    let d = *self.nodes[i].shape.last().unwrap();
                    let y = &self.nodes[i].data;
                    let numel = y.len();
                    let mut gx_local = vec![0.0; numel];
                    for r in 0..numel / d {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let s: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..d {
                            gx_local[r * d + j] = yr[j] * (gr[j] - s);
                        }
                    }
                    let gx = Self::buf(&mut grads, x, numel);
                    for (dst, src) in gx.iter_mut().zip(&gx_local) {
                        *dst += src;
                    }
                }
                Op::LogSumExpRows { x } => {
                    let x = *x;
                    let d = *self.nodes[x.0].shape.last().unwrap();
                    let xv = &self.nodes[x.0].data;
                    let y = &self.nodes[i].data;
                    let numel = xv.len();
                    let mut gx_local = vec![0.0; numel];
                    for r in 0..numel / d {
                        if y[r] == f64::NEG_INFINITY {
                            continue;
                        }
                        for j in 0..d {
                            gx_local[r * d + j] = g[r] * (xv[r * d + j] - y[r]).exp();
                        }
                    }
                    let gx = Self::buf(&mut grads, x, numel);
                    for (dst, src) in gx.iter_mut().zip(&gx_local) {
                        *dst += src;
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                    let d = *self.nodes[x.0].shape.last().unwrap();
                    let xv = &self.nodes[x.0].data;
                    let gv = &self.nodes[gain.0].data;
                    let rows = xv.len() / d;
                    let mut gx_local = vec![0.0; xv.len()];
                    let mut ggain_local = vec![0.0; d];
                    let mut gbias_local = vec![0.0; d];
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mu = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mu) * inv;
                            let dxhat = gr[j] * gv[j];
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                            ggain_local[j] += gr[j] * xhat;
                            gbias_local[j] += gr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let xhat = (row[j] - mu) * inv;
                            let dxhat = gr[j] * gv[j];
                            gx_local[r * d + j] = inv * (dxhat - m1 - xhat * m2);
                        }
                    }
                    {
                        let gx = Self::buf(&mut grads, x, gx_local.len());
                        for (dst, src) in gx.iter_mut().zip(&gx_local) {
                            *dst += src;
                        }
                    }
                    {
                        let gg = Self::buf(&mut grads, gain, d);
                        for (dst, src) in gg.iter_mut().zip(&ggain_local) {
                            *dst += src;
                        }
                    }
                    let gb = Self::buf(&mut grads, bias, d);
                    for (dst, src) in gb.iter_mut().zip(&gbias_local) {
                        *dst += src;
                    }
                }
                Op::Gelu { x } => {
                    let x = *x;
                    let xv = &self.nodes[x.0].data;
                    let gx = Self::buf(&mut grads, x, xv.len());
                    for (j, (dst, src)) in gx.iter_mut().zip(&g).enumerate() {
                        *dst += src * gelu_deriv(xv[j]);
                    }
                }
                Op::Tanh { x } => {
                    let x = *x;
                    let y = &self.nodes[i].data;
                    let gx = Self::buf(&mut grads, x, y.len());
                    for (j, (dst, src)) in gx.iter_mut().zip(&g).enumerate() {
                        *dst += src * (1.0 - y[j] * y[j]);
                    }
                }
                Op::SumAll { x } => {
                    let x = *x;
                    let numel = self.nodes[x.0].data.len();
                    let gx = Self::buf(&mut grads, x, numel);
                    for dst in gx.iter_mut() {
                        *dst += g[0];
                    }
                }
                Op::CrossEntropyMean { logits, targets } => {
                    let logits = *logits;
                    let c = self.nodes[logits.0].shape[1];
                    let xv = &self.nodes[logits.0].data;
                    let n = targets.len();
                    let scale = g[0] / n as f64;
                    let mut gx_local = vec![0.0; xv.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &xv[r * c..(r + 1) * c];
                        let lse = lse_row(row);
                        for j in 0..c {
                            let p = (row[j] - lse).exp();
                            gx_local[r * c + j] = (p - if j == t { 1.0 } else { 0.0 }) * scale;
                        }
                    }
                    let gx = Self::buf(&mut grads, logits, gx_local.len());
                    for (dst, src) in gx.iter_mut().zip(&gx_local) {
                        *dst += src;
                    }
                }
            }
        }
        Ok(())
    }

    fn buf(grads: &mut [Option<Vec<f64>>], id: NodeId, numel: usize) -> &mut Vec<f64> {
        grads[id.0].get_or_insert_with(|| vec![0.0; numel])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_with(entries: &[(&str, Tensor)]) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, t) in entries {
            ps.add(*name, t.clone()).unwrap();
        }
        ps
    }

    #[test]
    fn softmax_known_values() {
        let mut tape = Tape::new();
        let x = tape
            .constant_parts(vec![1, 2], vec![0.0, 3.0f64.ln()])
            .unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let out = tape.data(y);
        assert!((out[0] - 0.25).abs() < 1e-15);
        assert!((out[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_known_value() {
        let mut tape = Tape::new();
        let x = tape
            .constant_parts(vec![1, 2], vec![0.0, 3.0f64.ln()])
            .unwrap();
        let loss = tape.cross_entropy_mean(x, &[1]).unwrap();
        // -ln 0.75
        assert!((tape.scalar(loss).unwrap() - 0.2876820724517809).abs() < 1e-15);
    }

    #[test]
    fn gelu_known_values() {
        let mut tape = Tape::new();
        let x = tape
            .constant_parts(vec![4], vec![0.0, 1.0, -0.5, 2.0])
            .unwrap();
        let y = tape.gelu(x);
        let out = tape.data(y);
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.8411919906082768).abs() < 1e-15);
        assert!((out[2] - (-0.15428599017485606)).abs() < 1e-15);
        assert!((out[3] - 1.954597694087775).abs() < 1e-14);
    }

    #[test]
    fn layer_norm_known_values() {
        let mut tape = Tape::new();
        let x = tape.constant_parts(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let g = tape.constant_parts(vec![2], vec![2.0, 1.0]).unwrap();
        let b = tape.constant_parts(vec![2], vec![0.5, -0.5]).unwrap();
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        let out = tape.data(y);
        assert!((out[0] - (-1.5)).abs() < 1e-12);
        assert!((out[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matmul_backward_matches_hand_derivation() {
        // loss = sum(A @ B) => dA[i,l] = sum_j B[l,j], dB[l,j] = sum_i A[i,l]
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let mut ps = params_with(&[("a", a), ("b", b)]);
        let mut tape = Tape::new();
        let an = tape.param_named(&ps, "a").unwrap();
        let bn = tape.param_named(&ps, "b").unwrap();
        let c = tape.matmul(an, bn).unwrap();
        let loss = tape.sum_all(c);
        tape.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.by_name("a").unwrap().grad.data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(ps.by_name("b").unwrap().grad.data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut ps = ParamSet::new();
        let mut tape = Tape::new();
        let x = tape.constant_parts(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            tape.backward(x, &mut ps),
            Err(Error::NotScalar(_))
        ));
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut ps = params_with(&[("w", Tensor::new(vec![1], vec![2.0]).unwrap())]);
        let mut tape = Tape::new();
        let w = tape.param_named(&ps, "w").unwrap();
        let loss = tape.sum_all(w);
        tape.backward(loss, &mut ps).unwrap();
        tape.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.by_name("w").unwrap().grad.data(), &[2.0]);
        ps.zero_grads();
        assert_eq!(ps.by_name("w").unwrap().grad.data(), &[0.0]);
    }

    #[test]
    fn shared_node_used_twice_accumulates() {
        // loss = sum(w + w) => dw = 2
        let mut ps = params_with(&[("w", Tensor::new(vec![1], vec![3.0]).unwrap())]);
        let mut tape = Tape::new();
        let w = tape.param_named(&ps, "w").unwrap();
        let s = tape.add(w, w).unwrap();
        let loss = tape.sum_all(s);
        tape.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.by_name("w").unwrap().grad.data(), &[2.0]);
    }

    #[test]
    fn gather_scatter_roundtrip_gradients() {
        let mut ps = params_with(&[(
            "x",
            Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        )]);
        let mut tape = Tape::new();
        let x = tape.param_named(&ps, "x").unwrap();
        // pick rows 2 and 0, scatter back into 4 rows at 1 and 1 (collision adds)
        let gathered = tape.gather_rows(x, &[2, 0]).unwrap();
        assert_eq!(tape.data(gathered), &[5.0, 6.0, 1.0, 2.0]);
        let scattered = tape.scatter_add_rows(gathered, &[1, 1], 4).unwrap();
        assert_eq!(
            tape.data(scattered),
            &[0.0, 0.0, 6.0, 8.0, 0.0, 0.0, 0.0, 0.0]
        );
        let loss = tape.sum_all(scattered);
        tape.backward(loss, &mut ps).unwrap();
        // every gathered element flows through exactly once
        assert_eq!(
            ps.by_name("x").unwrap().grad.data(),
            &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn ops_validate_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant_parts(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant_parts(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.gather_rows(a, &[2]).is_err());
        assert!(tape.reshape(a, vec![4]).is_err());
        assert!(tape.permute_axes(a, &[0, 0]).is_err());
        assert!(tape.cross_entropy_mean(a, &[0, 3]).is_err());
    }
}
