//! Wengert tape: forward ops record nodes, `backward` replays them in
//! reverse applying vector-Jacobian products.
//!
//! A node is recorded only when at least one input is tape-tracked; leaves
//! enter the tape through [`Tape::watch`]. One tape is single-writer;
//! independent tapes may run in parallel.

use super::kernels as k;
use super::{sc, Scalar, Tensor, TensorError};

pub type NodeId = usize;

const NORMALIZE_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
enum BackOp<S: Scalar> {
    Leaf,
    Matmul,
    Transpose,
    Add { rhs_broadcast: bool },
    Sub { rhs_broadcast: bool },
    Mul { rhs_broadcast: bool },
    AddScalar,
    MulScalar(S),
    Relu,
    Gelu,
    Softmax,
    LogSoftmax,
    LayerNorm { eps: S },
    L2Normalize,
    L2Norm,
    SumLast,
    MeanLast,
    SumAll,
    MeanAll,
    ConcatRows { row_counts: Vec<usize> },
    ConcatCols { col_counts: Vec<usize> },
    SliceRows { start: usize },
    SliceCols { start: usize },
    DiagPart,
}

#[derive(Debug)]
struct Node<S: Scalar> {
    parents: Vec<NodeId>,
    op: BackOp<S>,
    value: Vec<S>,
    shape: Vec<usize>,
}

/// Reverse-mode gradients keyed by tape node.
pub struct Gradients<S: Scalar> {
    per_node: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. a tape-tracked tensor, if any flowed.
    pub fn wrt(&self, t: &Tensor<S>) -> Option<&[S]> {
        let id = t.node?;
        self.per_node.get(id)?.as_deref()
    }

    /// Like [`Gradients::wrt`] but yields zeros for parameters the loss does
    /// not depend on.
    pub fn wrt_or_zeros(&self, t: &Tensor<S>) -> Vec<S> {
        self.wrt(t)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![S::zero(); t.numel()])
    }
}

#[derive(Debug, Default)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a differentiable leaf and link it to the tape.
    pub fn watch(&mut self, t: &mut Tensor<S>) -> NodeId {
        let id = self.push(
            Vec::new(),
            BackOp::Leaf,
            t.data().to_vec(),
            t.shape().to_vec(),
        );
        t.node = Some(id);
        t.set_requires_grad(true);
        id
    }

    fn push(&mut self, parents: Vec<NodeId>, op: BackOp<S>, value: Vec<S>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node {
            parents,
            op,
            value,
            shape,
        });
        self.nodes.len() - 1
    }

    /// Node id for an op input: its own node, or a fresh constant leaf.
    fn track(&mut self, t: &Tensor<S>) -> NodeId {
        match t.node {
            Some(id) => id,
            None => self.push(
                Vec::new(),
                BackOp::Leaf,
                t.data().to_vec(),
                t.shape().to_vec(),
            ),
        }
    }

    fn record(
        &mut self,
        inputs: &[&Tensor<S>],
        op: BackOp<S>,
        shape: Vec<usize>,
        data: Vec<S>,
    ) -> Tensor<S> {
        let tracked = inputs.iter().any(|t| t.node.is_some());
        let mut out = Tensor::new(shape, data).expect("op produced consistent shape");
        out.set_requires_grad(inputs.iter().any(|t| t.requires_grad()));
        if tracked {
            let parents: Vec<NodeId> = inputs.iter().map(|t| self.track(t)).collect();
            let id = self.push(parents, op, out.data().to_vec(), out.shape().to_vec());
            out.node = Some(id);
        }
        out
    }

    // ── Ops ─────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                details: format!("{:?} x {:?}", a.shape(), b.shape()),
            });
        }
        let (m, kk, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let data = k::matmul(a.data(), b.data(), m, kk, n);
        Ok(self.record(&[a, b], BackOp::Matmul, vec![m, n], data))
    }

    pub fn transpose(&mut self, a: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        if a.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "transpose",
                expected: 2,
                shape: a.shape().to_vec(),
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let data = k::transpose(a.data(), r, c);
        Ok(self.record(&[a], BackOp::Transpose, vec![c, r], data))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: &Tensor<S>,
        b: &Tensor<S>,
        f: impl Fn(S, S) -> S,
        back: impl Fn(bool) -> BackOp<S>,
    ) -> Result<Tensor<S>, TensorError> {
        let suffix_ok = b.rank() <= a.rank()
            && a.shape()[a.rank() - b.rank()..] == *b.shape()
            && a.numel() % b.numel() == 0;
        if !suffix_ok {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                details: format!(
                    "{:?} vs {:?} (rhs must equal lhs or a suffix of it)",
                    a.shape(),
                    b.shape()
                ),
            });
        }
        let data = k::zip_broadcast(a.data(), b.data(), f);
        let broadcast = b.numel() != a.numel();
        Ok(self.record(&[a, b], back(broadcast), a.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        self.binary("add", a, b, |x, y| x + y, |bc| BackOp::Add { rhs_broadcast: bc })
    }

    pub fn sub(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, |bc| BackOp::Sub { rhs_broadcast: bc })
    }

    pub fn mul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, |bc| BackOp::Mul { rhs_broadcast: bc })
    }

    pub fn add_scalar(&mut self, a: &Tensor<S>, c: S) -> Result<Tensor<S>, TensorError> {
        let data = a.data().iter().map(|&v| v + c).collect();
        Ok(self.record(&[a], BackOp::AddScalar, a.shape().to_vec(), data))
    }

    pub fn mul_scalar(&mut self, a: &Tensor<S>, c: S) -> Result<Tensor<S>, TensorError> {
        let data = a.data().iter().map(|&v| v * c).collect();
        Ok(self.record(&[a], BackOp::MulScalar(c), a.shape().to_vec(), data))
    }

    pub fn relu(&mut self, a: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        Ok(self.record(&[a], BackOp::Relu, a.shape().to_vec(), k::relu(a.data())))
    }

    pub fn gelu(&mut self, a: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        Ok(self.record(&[a], BackOp::Gelu, a.shape().to_vec(), k::gelu(a.data())))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let c = a.last_dim();
        let data = k::softmax_rows(a.data(), a.numel() / c, c);
        Ok(self.record(&[a], BackOp::Softmax, a.shape().to_vec(), data))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let c = a.last_dim();
        let data = k::log_softmax_rows(a.data(), a.numel() / c, c);
        Ok(self.record(&[a], BackOp::LogSoftmax, a.shape().to_vec(), data))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(
        &mut self,
        x: &Tensor<S>,
        gamma: &Tensor<S>,
        beta: &Tensor<S>,
        eps: S,
    ) -> Result<Tensor<S>, TensorError> {
        let c = x.last_dim();
        if gamma.numel() != c || beta.numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                details: format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    x.shape(),
                    gamma.shape(),
                    beta.shape()
                ),
            });
        }
        let data = k::layer_norm_rows(x.data(), gamma.data(), beta.data(), x.numel() / c, c, eps);
        Ok(self.record(&[x, gamma, beta], BackOp::LayerNorm { eps }, x.shape().to_vec(), data))
    }

    /// Rows scaled to unit L2 norm, with the norm floored at 1e-8.
    pub fn l2_normalize(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let c = x.last_dim();
        let data = k::l2_normalize_rows(x.data(), x.numel() / c, c, sc(NORMALIZE_EPS));
        Ok(self.record(&[x], BackOp::L2Normalize, x.shape().to_vec(), data))
    }

    /// L2 norm over the last axis; drops that axis ([r,c] → [r], [c] → [1]).
    pub fn l2_norm(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let c = x.last_dim();
        let rows = x.numel() / c;
        let data: Vec<S> = (0..rows)
            .map(|r| k::l2_norm_row(&x.data()[r * c..(r + 1) * c]))
            .collect();
        Ok(self.record(&[x], BackOp::L2Norm, vec![rows], data))
    }

    pub fn sum_last(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let c = x.last_dim();
        let rows = x.numel() / c;
        let data: Vec<S> = (0..rows)
            .map(|r| k::sum_all(&x.data()[r * c..(r + 1) * c]))
            .collect();
        Ok(self.record(&[x], BackOp::SumLast, vec![rows], data))
    }

    pub fn mean_last(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let c = x.last_dim();
        let rows = x.numel() / c;
        let inv = sc::<S>(c as f64).recip();
        let data: Vec<S> = (0..rows)
            .map(|r| k::sum_all(&x.data()[r * c..(r + 1) * c]) * inv)
            .collect();
        Ok(self.record(&[x], BackOp::MeanLast, vec![rows], data))
    }

    pub fn sum_all(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let data = vec![k::sum_all(x.data())];
        Ok(self.record(&[x], BackOp::SumAll, vec![1], data))
    }

    pub fn mean_all(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let data = vec![k::sum_all(x.data()) * sc::<S>(x.numel() as f64).recip()];
        Ok(self.record(&[x], BackOp::MeanAll, vec![1], data))
    }

    /// Stack rank-2 tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[&Tensor<S>]) -> Result<Tensor<S>, TensorError> {
        if parts.is_empty() || parts.iter().any(|t| t.rank() != 2) {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                details: "requires at least one rank-2 input".into(),
            });
        }
        let cols = parts[0].shape()[1];
        if parts.iter().any(|t| t.shape()[1] != cols) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                details: format!("column counts differ: {:?}", parts.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()),
            });
        }
        let rows: usize = parts.iter().map(|t| t.shape()[0]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for t in parts {
            data.extend_from_slice(t.data());
        }
        let row_counts = parts.iter().map(|t| t.shape()[0]).collect();
        Ok(self.record(parts, BackOp::ConcatRows { row_counts }, vec![rows, cols], data))
    }

    /// Stack rank-2 tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[&Tensor<S>]) -> Result<Tensor<S>, TensorError> {
        if parts.is_empty() || parts.iter().any(|t| t.rank() != 2) {
            return Err(TensorError::Invalid {
                op: "concat_cols",
                details: "requires at least one rank-2 input".into(),
            });
        }
        let rows = parts[0].shape()[0];
        if parts.iter().any(|t| t.shape()[0] != rows) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                details: format!("row counts differ: {:?}", parts.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()),
            });
        }
        let cols: usize = parts.iter().map(|t| t.shape()[1]).sum();
        let mut data = vec![S::zero(); rows * cols];
        let mut offset = 0;
        for t in parts {
            let c = t.shape()[1];
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + c]
                    .copy_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let col_counts = parts.iter().map(|t| t.shape()[1]).collect();
        Ok(self.record(parts, BackOp::ConcatCols { col_counts }, vec![rows, cols], data))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(
        &mut self,
        x: &Tensor<S>,
        start: usize,
        end: usize,
    ) -> Result<Tensor<S>, TensorError> {
        if x.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "slice_rows",
                expected: 2,
                shape: x.shape().to_vec(),
            });
        }
        if start >= end || end > x.shape()[0] {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                details: format!("range {start}..{end} out of {} rows", x.shape()[0]),
            });
        }
        let c = x.shape()[1];
        let data = x.data()[start * c..end * c].to_vec();
        Ok(self.record(&[x], BackOp::SliceRows { start }, vec![end - start, c], data))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(
        &mut self,
        x: &Tensor<S>,
        start: usize,
        end: usize,
    ) -> Result<Tensor<S>, TensorError> {
        if x.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "slice_cols",
                expected: 2,
                shape: x.shape().to_vec(),
            });
        }
        if start >= end || end > x.shape()[1] {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                details: format!("range {start}..{end} out of {} cols", x.shape()[1]),
            });
        }
        let (rows, c) = (x.shape()[0], x.shape()[1]);
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * c + start..r * c + end]);
        }
        Ok(self.record(&[x], BackOp::SliceCols { start }, vec![rows, w], data))
    }

    /// Main diagonal of a square rank-2 tensor.
    pub fn diag_part(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        if x.rank() != 2 || x.shape()[0] != x.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "diag_part",
                details: format!("expected square rank-2, got {:?}", x.shape()),
            });
        }
        let n = x.shape()[0];
        let data: Vec<S> = (0..n).map(|i| x.data()[i * n + i]).collect();
        Ok(self.record(&[x], BackOp::DiagPart, vec![n], data))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar loss w.r.t. every tape leaf.
    pub fn backward(&self, loss: &Tensor<S>) -> Result<Gradients<S>, TensorError> {
        let loss_id = loss.node.ok_or(TensorError::DetachedLoss)?;
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss_id] = Some(vec![S::one()]);
        for id in (0..=loss_id).rev() {
            let Some(d) = grads[id].clone() else { continue };
            self.apply_vjp(id, &d, &mut grads);
        }
        Ok(Gradients { per_node: grads })
    }

    fn accumulate(grads: &mut [Option<Vec<S>>], id: NodeId, contrib: Vec<S>) {
        match &mut grads[id] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi = *gi + ci;
                }
            }
            None => grads[id] = Some(contrib),
        }
    }

    fn apply_vjp(&self, id: NodeId, d: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let parent_value = |i: usize| -> &[S] { &self.nodes[node.parents[i]].value };
        let parent_shape = |i: usize| -> &[usize] { &self.nodes[node.parents[i]].shape };
        match &node.op {
            BackOp::Leaf => {}
            BackOp::Matmul => {
                let (m, kk) = (parent_shape(0)[0], parent_shape(0)[1]);
                let n = parent_shape(1)[1];
                // dA = dC @ B^T, dB = A^T @ dC
                let bt = k::transpose(parent_value(1), kk, n);
                let da = k::matmul(d, &bt, m, n, kk);
                let at = k::transpose(parent_value(0), m, kk);
                let db = k::matmul(&at, d, kk, m, n);
                Self::accumulate(grads, node.parents[0], da);
                Self::accumulate(grads, node.parents[1], db);
            }
            BackOp::Transpose => {
                let (r, c) = (node.shape[0], node.shape[1]);
                Self::accumulate(grads, node.parents[0], k::transpose(d, r, c));
            }
            BackOp::Add { rhs_broadcast } => {
                Self::accumulate(grads, node.parents[0], d.to_vec());
                let db = if *rhs_broadcast {
                    k::reduce_to_suffix(d, parent_value(1).len())
                } else {
                    d.to_vec()
                };
                Self::accumulate(grads, node.parents[1], db);
            }
            BackOp::Sub { rhs_broadcast } => {
                Self::accumulate(grads, node.parents[0], d.to_vec());
                let neg: Vec<S> = d.iter().map(|&v| -v).collect();
                let db = if *rhs_broadcast {
                    k::reduce_to_suffix(&neg, parent_value(1).len())
                } else {
                    neg
                };
                Self::accumulate(grads, node.parents[1], db);
            }
            BackOp::Mul { rhs_broadcast } => {
                let b = parent_value(1);
                let da = k::zip_broadcast(d, b, |x, y| x * y);
                Self::accumulate(grads, node.parents[0], da);
                let a = parent_value(0);
                let dxa: Vec<S> = d.iter().zip(a.iter()).map(|(&x, &y)| x * y).collect();
                let db = if *rhs_broadcast {
                    k::reduce_to_suffix(&dxa, b.len())
                } else {
                    dxa
                };
                Self::accumulate(grads, node.parents[1], db);
            }
            BackOp::AddScalar => {
                Self::accumulate(grads, node.parents[0], d.to_vec());
            }
            BackOp::MulScalar(c) => {
                let da: Vec<S> = d.iter().map(|&v| v * *c).collect();
                Self::accumulate(grads, node.parents[0], da);
            }
            BackOp::Relu => {
                let x = parent_value(0);
                let da: Vec<S> = d
                    .iter()
                    .zip(x.iter())
                    .map(|(&dv, &xv)| if xv > S::zero() { dv } else { S::zero() })
                    .collect();
                Self::accumulate(grads, node.parents[0], da);
            }
            BackOp::Gelu => {
                let x = parent_value(0);
                let da: Vec<S> = d
                    .iter()
                    .zip(x.iter())
                    .map(|(&dv, &xv)| dv * k::gelu_grad(xv))
                    .collect();
                Self::accumulate(grads, node.parents[0], da);
            }
            BackOp::Softmax => {
                // dx = y ⊙ (d − <d, y>) per row, y = stored output
                let y = &node.value;
                let c = *node.shape.last().unwrap();
                let rows = y.len() / c;
                let mut da = vec![S::zero(); y.len()];
                for r in 0..rows {
                    let base = r * c;
                    let mut dot = S::zero();
                    for j in 0..c {
                        dot = dot + d[base + j] * y[base + j];
                    }
                    for j in 0..c {
                        da[base + j] = y[base + j] * (d[base + j] - dot);
                    }
                }
                Self::accumulate(grads, node.parents[0], da);
            }
            BackOp::LogSoftmax => {
                // dx = d − softmax(x) · sum(d) per row; softmax = exp(output)
                let y = &node.value;
                let c = *node.shape.last().unwrap();
                let rows = y.len() / c;
                let mut da = vec![S::zero(); y.len()];
                for r in 0..rows {
                    let base = r * c;
                    let mut dsum = S::zero();
                    for j in 0..c {
                        dsum = dsum + d[base + j];
                    }
                    for j in 0..c {
                        da[base + j] = d[base + j] - y[base + j].exp() * dsum;
                    }
                }
                Self::accumulate(grads, node.parents[0], da);
            }
            BackOp::LayerNorm { eps } => {
                let x = parent_value(0);
                let gamma = parent_value(1);
                let c = gamma.len();
                let rows = x.len() / c;
                let inv_n = sc::<S>(c as f64).recip();
                let mut dx = vec![S::zero(); x.len()];
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for r in 0..rows {
                    let row = &x[r * c..(r + 1) * c];
                    let (mean, inv_std) = k::row_norm_stats(row, *eps);
                    // g = d ⊙ gamma; dx = inv_std (g − mean(g) − x̂ mean(g ⊙ x̂))
                    let mut g_mean = S::zero();
                    let mut gx_mean = S::zero();
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv_std;
                        let g = d[r * c + j] * gamma[j];
                        g_mean = g_mean + g;
                        gx_mean = gx_mean + g * xhat;
                        dgamma[j] = dgamma[j] + d[r * c + j] * xhat;
                        dbeta[j] = dbeta[j] + d[r * c + j];
                    }
                    g_mean = g_mean * inv_n;
                    gx_mean = gx_mean * inv_n;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv_std;
                        let g = d[r * c + j] * gamma[j];
                        dx[r * c + j] = inv_std * (g - g_mean - xhat * gx_mean);
                    }
                }
                Self::accumulate(grads, node.parents[0], dx);
                Self::accumulate(grads, node.parents[1], dgamma);
                Self::accumulate(grads, node.parents[2], dbeta);
            }
            BackOp::L2Normalize => {
                let x = parent_value(0);
                let c = *node.shape.last().unwrap();
                let rows = x.len() / c;
                let eps = sc::<S>(NORMALIZE_EPS);
                let mut dx = vec![S::zero(); x.len()];
                for r in 0..rows {
                    let base = r * c;
                    let row = &x[base..base + c];
                    let n = k::l2_norm_row(row);
                    let m = n.max(eps);
                    if n > eps {
                        // y = x/n: dx = (d − y <d,y>) / n
                        let y = &node.value[base..base + c];
                        let mut dot = S::zero();
                        for j in 0..c {
                            dot = dot + d[base + j] * y[j];
                        }
                        for j in 0..c {
                            dx[base + j] = (d[base + j] - y[j] * dot) / m;
                        }
                    } else {
                        // below the floor the map is linear: y = x/eps
                        for j in 0..c {
                            dx[base + j] = d[base + j] / eps;
                        }
                    }
                }
                Self::accumulate(grads, node.parents[0], dx);
            }
            BackOp::L2Norm => {
                let x = parent_value(0);
                let rows = node.value.len();
                let c = x.len() / rows;
                let tiny = sc::<S>(1e-12);
                let mut dx = vec![S::zero(); x.len()];
                for r in 0..rows {
                    let inv = node.value[r].max(tiny).recip();
                    for j in 0..c {
                        dx[r * c + j] = d[r] * x[r * c + j] * inv;
                    }
                }
                Self::accumulate(grads, node.parents[0], dx);
            }
            BackOp::SumLast => {
                let total = parent_value(0).len();
                let rows = node.value.len();
                let c = total / rows;
                let mut dx = vec![S::zero(); total];
                for r in 0..rows {
                    for j in 0..c {
                        dx[r * c + j] = d[r];
                    }
                }
                Self::accumulate(grads, node.parents[0], dx);
            }
            BackOp::MeanLast => {
                let total = parent_value(0).len();
                let rows = node.value.len();
                let c = total / rows;
                let inv = sc::<S>(c as f64).recip();
                let mut dx = vec![S::zero(); total];
                for r in 0..rows {
                    for j in 0..c {
                        dx[r * c + j] = d[r] * inv;
                    }
                }
                Self::accumulate(grads, node.parents[0], dx);
            }
            BackOp::SumAll => {
                let total = parent_value(0).len();
                Self::accumulate(grads, node.parents[0], vec![d[0]; total]);
            }
            BackOp::MeanAll => {
                let total = parent_value(0).len();
                let v = d[0] * sc::<S>(total as f64).recip();
                Self::accumulate(grads, node.parents[0], vec![v; total]);
            }
            BackOp::ConcatRows { row_counts } => {
                let cols = node.shape[1];
                let mut offset = 0;
                for (i, &r) in row_counts.iter().enumerate() {
                    let part = d[offset * cols..(offset + r) * cols].to_vec();
                    Self::accumulate(grads, node.parents[i], part);
                    offset += r;
                }
            }
            BackOp::ConcatCols { col_counts } => {
                let rows = node.shape[0];
                let cols = node.shape[1];
                let mut offset = 0;
                for (i, &c) in col_counts.iter().enumerate() {
                    let mut part = vec![S::zero(); rows * c];
                    for r in 0..rows {
                        part[r * c..(r + 1) * c]
                            .copy_from_slice(&d[r * cols + offset..r * cols + offset + c]);
                    }
                    Self::accumulate(grads, node.parents[i], part);
                    offset += c;
                }
            }
            BackOp::SliceRows { start } => {
                let src_shape = parent_shape(0).to_vec();
                let c = src_shape[1];
                let mut dx = vec![S::zero(); src_shape[0] * c];
                dx[start * c..start * c + d.len()].copy_from_slice(d);
                Self::accumulate(grads, node.parents[0], dx);
            }
            BackOp::SliceCols { start } => {
                let src_shape = parent_shape(0).to_vec();
                let (rows, c) = (src_shape[0], src_shape[1]);
                let w = node.shape[1];
                let mut dx = vec![S::zero(); rows * c];
                for r in 0..rows {
                    dx[r * c + start..r * c + start + w].copy_from_slice(&d[r * w..(r + 1) * w]);
                }
                Self::accumulate(grads, node.parents[0], dx);
            }
            BackOp::DiagPart => {
                let n = node.value.len();
                let mut dx = vec![S::zero(); n * n];
                for i in 0..n {
                    dx[i * n + i] = d[i];
                }
                Self::accumulate(grads, node.parents[0], dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(actual: &[f32], expected: &[f32], tol: f32) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected.iter()).enumerate() {
            assert!(
                (a - e).abs() < tol,
                "coord {i}: actual {a}, expected {e}"
            );
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        // loss = sum(x^2), x = [1, 2] → grad [2, 4]
        let mut tape: Tape<f32> = Tape::new();
        let mut x = Tensor::from_vec(vec![1.0, 2.0]);
        tape.watch(&mut x);
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_close(grads.wrt(&x).unwrap(), &[2.0, 4.0], 1e-6);
    }

    #[test]
    fn cosine_self_similarity_has_zero_gradient() {
        // s(v, v) is constant at 1, so the gradient vanishes.
        let mut tape: Tape<f32> = Tape::new();
        let mut v = Tensor::new(vec![1, 3], vec![0.3, -1.2, 2.0]).unwrap();
        tape.watch(&mut v);
        let n = tape.l2_normalize(&v).unwrap();
        let prod = tape.mul(&n, &n).unwrap();
        let s = tape.sum_all(&prod).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6);
        let grads = tape.backward(&s).unwrap();
        for g in grads.wrt(&v).unwrap() {
            assert!(g.abs() < 1e-6, "gradient {g} not ~0");
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape: Tape<f32> = Tape::new();
        let mut x = Tensor::from_vec(vec![1.0, 2.0]);
        tape.watch(&mut x);
        let y = tape.mul(&x, &x).unwrap();
        assert!(matches!(
            tape.backward(&y),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_rejects_detached_loss() {
        let tape: Tape<f32> = Tape::new();
        let loss = Tensor::scalar(1.0);
        assert!(matches!(
            tape.backward(&loss),
            Err(TensorError::DetachedLoss)
        ));
    }

    #[test]
    fn untracked_inputs_record_nothing() {
        let mut tape: Tape<f32> = Tape::new();
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![3.0, 4.0]);
        let c = tape.add(&a, &b).unwrap();
        assert!(c.node.is_none());
        assert!(tape.is_empty());
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut tape: Tape<f32> = Tape::new();
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = tape.matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn broadcast_add_reduces_gradient_to_suffix() {
        // y = x + b with x [2,3], b [3]; loss = sum(y) → db = [2,2,2]
        let mut tape: Tape<f32> = Tape::new();
        let x = Tensor::zeros(vec![2, 3]);
        let mut b = Tensor::from_vec(vec![0.5, 0.5, 0.5]);
        tape.watch(&mut b);
        let y = tape.add(&x, &b).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_close(grads.wrt(&b).unwrap(), &[2.0, 2.0, 2.0], 1e-6);
    }

    #[test]
    fn linearity_of_backward_over_summed_losses() {
        let mut tape: Tape<f32> = Tape::new();
        let mut x = Tensor::from_vec(vec![0.7, -1.1, 0.4]);
        tape.watch(&mut x);
        let sq = tape.mul(&x, &x).unwrap();
        let l1 = tape.sum_all(&sq).unwrap();
        let g = tape.gelu(&x).unwrap();
        let l2 = tape.sum_all(&g).unwrap();
        let total = tape.add(&l1, &l2).unwrap();

        let g1 = tape.backward(&l1).unwrap();
        let g2 = tape.backward(&l2).unwrap();
        let gt = tape.backward(&total).unwrap();
        let summed: Vec<f32> = g1
            .wrt(&x)
            .unwrap()
            .iter()
            .zip(g2.wrt(&x).unwrap())
            .map(|(a, b)| a + b)
            .collect();
        assert_close(gt.wrt(&x).unwrap(), &summed, 1e-5);
    }

    #[test]
    fn gradient_accumulates_across_multiple_uses() {
        // loss = sum(x*2) + sum(x*3) → dx = 5 per coord
        let mut tape: Tape<f32> = Tape::new();
        let mut x = Tensor::from_vec(vec![1.0]);
        tape.watch(&mut x);
        let a = tape.mul_scalar(&x, 2.0).unwrap();
        let b = tape.mul_scalar(&x, 3.0).unwrap();
        let s = tape.add(&a, &b).unwrap();
        let loss = tape.sum_all(&s).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_close(grads.wrt(&x).unwrap(), &[5.0], 1e-6);
    }

    #[test]
    fn slice_and_concat_roundtrip_gradients() {
        let mut tape: Tape<f32> = Tape::new();
        let mut x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        tape.watch(&mut x);
        let top = tape.slice_rows(&x, 0, 1).unwrap();
        let rest = tape.slice_rows(&x, 1, 3).unwrap();
        let back = tape.concat_rows(&[&top, &rest]).unwrap();
        assert_eq!(back.data(), x.data());
        let loss = tape.sum_all(&back).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_close(grads.wrt(&x).unwrap(), &[1.0; 6], 1e-6);
    }
}
