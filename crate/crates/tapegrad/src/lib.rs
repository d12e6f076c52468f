//! Tape-based reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation performed during a forward pass as a
//! node holding the materialized output value. Calling [`Tape::backward`]
//! replays the nodes in reverse creation order and accumulates gradients
//! for every node that (transitively) depends on a parameter leaf.
//!
//! The op set is the minimal closed set needed for transformer encoders
//! with masked attention, batch/layer normalization, classification and
//! softmax heads, and a gradient-reversal layer. All ops are exact-shape
//! checked and deterministic: the same tape built twice yields bitwise
//! identical values and gradients.
//!
//! Matrix products go through `ndarray`'s BLAS-backed `general_mat_mul`.

extern crate blas_src;

use ndarray::{ArrayD, Axis, Ix2, Ix3, IxDyn};

mod backward;
pub mod check;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

pub(crate) struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recorded operation, with any forward-pass caches needed by backward.
pub(crate) enum Op {
    Leaf,
    /// Elementwise sum of two same-shape tensors.
    Add(NodeId, NodeId),
    /// `a + b` where `b`'s shape is a suffix of `a`'s shape; `b` is
    /// broadcast over the leading axes (bias vectors, positional tables).
    AddBroadcast(NodeId, NodeId),
    /// Elementwise product of two same-shape tensors.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `[m,k] x [k,n]` dense product.
    MatMul(NodeId, NodeId),
    /// Batched product over the leading axis: `[s,m,k] x [s,k,n]`, or
    /// `[s,m,k] x [s,n,k]` with `transpose_b`.
    Bmm {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    /// Swap axes 1 and 2 (head split/merge for attention).
    SwapAxes12(NodeId),
    Reshape(NodeId),
    /// Softmax over the last axis. The node value caches the output.
    SoftmaxLast(NodeId),
    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF via `erf`.
    Gelu(NodeId),
    Sigmoid(NodeId),
    /// Layer norm over the last axis with affine scale/offset.
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Batch norm over axis 0 of a `[n,d]` tensor using batch statistics.
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Batch norm applying fixed (running) statistics.
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Row gather from an embedding table: `table[ids[i], :]`.
    Gather { table: NodeId, ids: Vec<usize> },
    /// Per-sequence position gather from `[s,l,d]`: `x[i, pos[i], :]`.
    PoolAt { x: NodeId, positions: Vec<usize> },
    /// Fixed index along axis 1 of `[b,t,d]`.
    SelectAxis1 { x: NodeId, index: usize },
    /// Concatenate along axis 1.
    ConcatAxis1(NodeId, NodeId),
    /// Tile a `[d]` vector into `[copies,1,d]`.
    BroadcastRows { v: NodeId, copies: usize },
    MeanAll(NodeId),
    /// Mean binary cross-entropy from logits, numerically stable form.
    BceWithLogitsMean { logits: NodeId, targets: Vec<f64> },
    /// Mean softmax cross-entropy over rows with target >= 0; rows with
    /// target -1 are excluded. Empty inclusion set yields 0.
    SoftmaxCeMean { logits: NodeId, targets: Vec<i64> },
    /// Identity forward; backward multiplies the upstream gradient by
    /// `-lambda`.
    GradReverse { x: NodeId, lambda: f64 },
}

/// Gradients produced by [`Tape::backward`], indexable by [`NodeId`].
pub struct Gradients {
    pub(crate) grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `id`, if any
    /// gradient flowed there.
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Records a forward computation and runs reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Tensor value of a node.
    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar() on node with {} elements", v.len());
        v.iter().next().copied().unwrap()
    }

    /// A differentiable leaf (parameter).
    pub fn param(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable leaf (input data, masks, tables).
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = va + vb;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// `a + b` with `b` broadcast over `a`'s leading axes. `b.shape()`
    /// must be a suffix of `a.shape()`.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(
            sa.len() >= sb.len() && sa[sa.len() - sb.len()..] == *sb,
            "add_broadcast: {:?} is not a shape suffix of {:?}",
            sb,
            sa
        );
        let out = va + &vb.view();
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::AddBroadcast(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = va * vb;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a) * c;
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = as2(self.value(a), "matmul lhs");
        let vb = as2(self.value(b), "matmul rhs");
        assert_eq!(
            va.shape()[1],
            vb.shape()[0],
            "matmul: inner dims {} vs {}",
            va.shape()[1],
            vb.shape()[0]
        );
        let out = va.dot(&vb).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// Batched matmul over the leading axis.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> NodeId {
        let va = as3(self.value(a), "bmm lhs");
        let vb = as3(self.value(b), "bmm rhs");
        let (s, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        assert_eq!(s, vb.shape()[0], "bmm: batch dims differ");
        let n = if transpose_b {
            assert_eq!(k, vb.shape()[2], "bmm: inner dims differ (nt)");
            vb.shape()[1]
        } else {
            assert_eq!(k, vb.shape()[1], "bmm: inner dims differ");
            vb.shape()[2]
        };
        let mut out = ndarray::Array3::<f64>::zeros((s, m, n));
        for i in 0..s {
            let ai = va.index_axis(Axis(0), i);
            let bi = vb.index_axis(Axis(0), i);
            let mut oi = out.index_axis_mut(Axis(0), i);
            if transpose_b {
                ndarray::linalg::general_mat_mul(1.0, &ai, &bi.t(), 0.0, &mut oi);
            } else {
                ndarray::linalg::general_mat_mul(1.0, &ai, &bi, 0.0, &mut oi);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out.into_dyn(), Op::Bmm { a, b, transpose_b }, ng)
    }

    /// Swap axes 1 and 2, materializing a standard-layout copy.
    pub fn swap_axes_12(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert!(va.ndim() >= 3, "swap_axes_12: needs >= 3 dims");
        let mut order: Vec<usize> = (0..va.ndim()).collect();
        order.swap(1, 2);
        let out = va
            .view()
            .permuted_axes(order.as_slice())
            .as_standard_layout()
            .to_owned();
        let ng = self.needs(a);
        self.push(out, Op::SwapAxes12(a), ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let va = self.value(a);
        assert_eq!(
            va.len(),
            shape.iter().product::<usize>(),
            "reshape: {} elements into {:?}",
            va.len(),
            shape
        );
        let out = va
            .view()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let ng = self.needs(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Softmax over the last axis. `-inf` inputs produce exact zeros.
    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let d = *va.shape().last().expect("softmax_last: 0-dim input");
        assert!(d > 0);
        let mut out = va.view().as_standard_layout().to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::SoftmaxLast(a), ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(|x| x * gauss_cdf(x));
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// Layer normalization over the last axis: `gamma * x_hat + beta`
    /// with `x_hat = (x - mean) / sqrt(var + eps)` per row.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let vx = self.value(x);
        let d = *vx.shape().last().expect("layer_norm: 0-dim input");
        let vg = self.value(gamma);
        let vb = self.value(beta);
        assert_eq!(vg.shape(), [d], "layer_norm: gamma shape");
        assert_eq!(vb.shape(), [d], "layer_norm: beta shape");
        let rows = vx.len() / d;
        let xs = vx.view().as_standard_layout().to_owned();
        let xsl = xs.as_slice().unwrap();
        let g = vg.as_slice().unwrap();
        let b = vb.as_slice().unwrap();
        let mut out = vec![0.0; vx.len()];
        let mut means = vec![0.0; rows];
        let mut invs = vec![0.0; rows];
        for r in 0..rows {
            let row = &xsl[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            invs[r] = inv;
            let o = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                o[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let out = ArrayD::from_shape_vec(vx.raw_dim(), out).unwrap();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                inv_std: invs,
            },
            ng,
        )
    }

    /// Batch norm over axis 0 of `[n,d]` using batch statistics (biased
    /// variance). Returns `(output, batch_mean, batch_var)`; the caller
    /// owns any running-statistics update.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> (NodeId, Vec<f64>, Vec<f64>) {
        let vx = as2(self.value(x), "batch_norm_train");
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        assert!(n > 0, "batch_norm_train: empty batch");
        let vg = self.value(gamma).as_slice().unwrap().to_vec();
        let vb = self.value(beta).as_slice().unwrap().to_vec();
        assert_eq!(vg.len(), d);
        assert_eq!(vb.len(), d);
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for row in vx.rows() {
            for (j, v) in row.iter().enumerate() {
                mean[j] += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        for row in vx.rows() {
            for (j, v) in row.iter().enumerate() {
                let c = v - mean[j];
                var[j] += c * c;
            }
        }
        for v in var.iter_mut() {
            *v /= n as f64;
        }
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = ndarray::Array2::<f64>::zeros((n, d));
        for (i, row) in vx.rows().into_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out[[i, j]] = (v - mean[j]) * inv[j] * vg[j] + vb[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            out.into_dyn(),
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std: inv,
            },
            ng,
        );
        (id, mean, var)
    }

    /// Batch norm applying fixed running statistics per feature.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> NodeId {
        let vx = as2(self.value(x), "batch_norm_eval");
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        assert_eq!(running_mean.len(), d);
        assert_eq!(running_var.len(), d);
        let vg = self.value(gamma).as_slice().unwrap().to_vec();
        let vb = self.value(beta).as_slice().unwrap().to_vec();
        let inv: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = ndarray::Array2::<f64>::zeros((n, d));
        for (i, row) in vx.rows().into_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out[[i, j]] = (v - running_mean[j]) * inv[j] * vg[j] + vb[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out.into_dyn(),
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std: inv,
            },
            ng,
        )
    }

    /// Gather rows from a `[v,d]` table by index.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let vt = as2(self.value(table), "gather");
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = ndarray::Array2::<f64>::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < v, "gather: id {} out of range {}", id, v);
            out.row_mut(i).assign(&vt.row(id));
        }
        let ng = self.needs(table);
        self.push(
            out.into_dyn(),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Gather one position per sequence from `[s,l,d]` into `[s,d]`.
    pub fn pool_at(&mut self, x: NodeId, positions: &[usize]) -> NodeId {
        let vx = as3(self.value(x), "pool_at");
        let (s, l, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert_eq!(positions.len(), s, "pool_at: one position per sequence");
        let mut out = ndarray::Array2::<f64>::zeros((s, d));
        for (i, &p) in positions.iter().enumerate() {
            assert!(p < l, "pool_at: position {} out of range {}", p, l);
            out.row_mut(i).assign(&vx.index_axis(Axis(0), i).row(p));
        }
        let ng = self.needs(x);
        self.push(
            out.into_dyn(),
            Op::PoolAt {
                x,
                positions: positions.to_vec(),
            },
            ng,
        )
    }

    /// Select a fixed index along axis 1 of `[b,t,d]`, yielding `[b,d]`.
    pub fn select_axis1(&mut self, x: NodeId, index: usize) -> NodeId {
        let vx = as3(self.value(x), "select_axis1");
        assert!(index < vx.shape()[1], "select_axis1: index out of range");
        let out = vx.index_axis(Axis(1), index).to_owned();
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::SelectAxis1 { x, index }, ng)
    }

    /// Concatenate along axis 1; other axes must match.
    pub fn concat_axis1(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = as3(self.value(a), "concat_axis1 lhs");
        let vb = as3(self.value(b), "concat_axis1 rhs");
        assert_eq!(va.shape()[0], vb.shape()[0]);
        assert_eq!(va.shape()[2], vb.shape()[2]);
        let out = ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(out.into_dyn(), Op::ConcatAxis1(a, b), ng)
    }

    /// Tile a `[d]` vector into `[copies,1,d]`.
    pub fn broadcast_rows(&mut self, v: NodeId, copies: usize) -> NodeId {
        let vv = self.value(v);
        assert_eq!(vv.ndim(), 1, "broadcast_rows: expects a vector");
        let d = vv.len();
        let mut out = ndarray::Array3::<f64>::zeros((copies, 1, d));
        for i in 0..copies {
            out.index_axis_mut(Axis(0), i)
                .row_mut(0)
                .assign(&vv.view().into_dimensionality::<ndarray::Ix1>().unwrap());
        }
        let ng = self.needs(v);
        self.push(out.into_dyn(), Op::BroadcastRows { v, copies }, ng)
    }

    /// Mean over all elements, as a 0-dim tensor.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert!(!va.is_empty(), "mean_all: empty tensor");
        let out = ndarray::arr0(va.sum() / va.len() as f64).into_dyn();
        let ng = self.needs(a);
        self.push(out, Op::MeanAll(a), ng)
    }

    /// Mean binary cross-entropy from 1-D logits against 0/1 targets,
    /// computed as `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits_mean(&mut self, logits: NodeId, targets: &[f64]) -> NodeId {
        let vz = self.value(logits);
        assert_eq!(vz.ndim(), 1, "bce_with_logits_mean: logits must be 1-D");
        assert_eq!(vz.len(), targets.len());
        assert!(!targets.is_empty(), "bce_with_logits_mean: empty batch");
        let mut total = 0.0;
        for (&z, &y) in vz.iter().zip(targets) {
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let out = ndarray::arr0(total / targets.len() as f64).into_dyn();
        let ng = self.needs(logits);
        self.push(
            out,
            Op::BceWithLogitsMean {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// Mean softmax cross-entropy over `[n,c]` logits for rows whose
    /// target is >= 0; rows with target -1 are excluded. Returns 0 when
    /// no row is included.
    pub fn softmax_ce_mean(&mut self, logits: NodeId, targets: &[i64]) -> NodeId {
        let vz = as2(self.value(logits), "softmax_ce_mean");
        let (n, c) = (vz.shape()[0], vz.shape()[1]);
        assert_eq!(n, targets.len());
        let mut total = 0.0;
        let mut included = 0usize;
        for (row, &t) in vz.rows().into_iter().zip(targets) {
            if t < 0 {
                continue;
            }
            let t = t as usize;
            assert!(t < c, "softmax_ce_mean: target {} out of range {}", t, c);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
            included += 1;
        }
        let value = if included == 0 {
            0.0
        } else {
            total / included as f64
        };
        let out = ndarray::arr0(value).into_dyn();
        let ng = self.needs(logits);
        self.push(
            out,
            Op::SoftmaxCeMean {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// Identity in the forward pass; multiplies the upstream gradient by
    /// `-lambda` in the backward pass.
    pub fn grad_reverse(&mut self, x: NodeId, lambda: f64) -> NodeId {
        assert!(lambda >= 0.0, "grad_reverse: lambda must be >= 0");
        let out = self.value(x).clone();
        let ng = self.needs(x);
        self.push(out, Op::GradReverse { x, lambda }, ng)
    }
}

pub(crate) fn as2<'a>(v: &'a ArrayD<f64>, ctx: &str) -> ndarray::ArrayView2<'a, f64> {
    v.view()
        .into_dimensionality::<Ix2>()
        .unwrap_or_else(|_| panic!("{}: expected 2-D, got {:?}", ctx, v.shape()))
}

pub(crate) fn as3<'a>(v: &'a ArrayD<f64>, ctx: &str) -> ndarray::ArrayView3<'a, f64> {
    v.view()
        .into_dimensionality::<Ix3>()
        .unwrap_or_else(|_| panic!("{}: expected 3-D, got {:?}", ctx, v.shape()))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Standard Gaussian CDF via `erf`.
pub fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard Gaussian PDF.
pub fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
