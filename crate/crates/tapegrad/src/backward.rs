//! Reverse pass: walk nodes newest-to-oldest, propagating gradients to
//! parents. Every backward formula is linear in the upstream gradient,
//! which is what makes gradient reversal equivalent to scaling the
//! downstream gradient by `-lambda`.

use ndarray::{ArrayD, Axis};

use crate::{as2, as3, gauss_cdf, gauss_pdf, sigmoid, Gradients, NodeId, Op, Tape};

fn accum(slot: &mut Option<ArrayD<f64>>, delta: ArrayD<f64>) {
    match slot {
        Some(g) => {
            assert_eq!(g.shape(), delta.shape(), "gradient shape mismatch");
            *g += &delta;
        }
        None => *slot = Some(delta),
    }
}

impl Tape {
    /// Differentiates the scalar node `root` with respect to every node
    /// on the tape. Gradients for nodes that no parameter feeds into are
    /// absent from the result.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let rv = &self.nodes[root.0].value;
        assert_eq!(rv.len(), 1, "backward: root must be a scalar node");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(rv.raw_dim()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accum(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        accum(&mut grads[b.0], g.clone());
                    }
                }
                Op::AddBroadcast(a, b) => {
                    if self.needs(*a) {
                        accum(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        let lead = g.ndim() - self.nodes[b.0].value.ndim();
                        let mut s = g.clone();
                        for _ in 0..lead {
                            s = s.sum_axis(Axis(0));
                        }
                        accum(&mut grads[b.0], s);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accum(&mut grads[a.0], &g * &self.nodes[b.0].value);
                    }
                    if self.needs(*b) {
                        accum(&mut grads[b.0], &g * &self.nodes[a.0].value);
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs(*a) {
                        accum(&mut grads[a.0], g.mapv(|v| v * c));
                    }
                }
                Op::MatMul(a, b) => {
                    let g2 = as2(&g, "matmul grad");
                    let va = as2(&self.nodes[a.0].value, "matmul lhs");
                    let vb = as2(&self.nodes[b.0].value, "matmul rhs");
                    if self.needs(*a) {
                        accum(&mut grads[a.0], g2.dot(&vb.t()).into_dyn());
                    }
                    if self.needs(*b) {
                        accum(&mut grads[b.0], va.t().dot(&g2).into_dyn());
                    }
                }
                Op::Bmm { a, b, transpose_b } => {
                    let g3 = as3(&g, "bmm grad");
                    let va = as3(&self.nodes[a.0].value, "bmm lhs");
                    let vb = as3(&self.nodes[b.0].value, "bmm rhs");
                    let s = va.shape()[0];
                    if self.needs(*a) {
                        let mut da =
                            ndarray::Array3::<f64>::zeros((s, va.shape()[1], va.shape()[2]));
                        for i in 0..s {
                            let gi = g3.index_axis(Axis(0), i);
                            let bi = vb.index_axis(Axis(0), i);
                            let mut di = da.index_axis_mut(Axis(0), i);
                            if *transpose_b {
                                // out = a b^T  =>  da = g b
                                ndarray::linalg::general_mat_mul(1.0, &gi, &bi, 0.0, &mut di);
                            } else {
                                // out = a b  =>  da = g b^T
                                ndarray::linalg::general_mat_mul(1.0, &gi, &bi.t(), 0.0, &mut di);
                            }
                        }
                        accum(&mut grads[a.0], da.into_dyn());
                    }
                    if self.needs(*b) {
                        let mut db =
                            ndarray::Array3::<f64>::zeros((s, vb.shape()[1], vb.shape()[2]));
                        for i in 0..s {
                            let gi = g3.index_axis(Axis(0), i);
                            let ai = va.index_axis(Axis(0), i);
                            let mut di = db.index_axis_mut(Axis(0), i);
                            if *transpose_b {
                                // out = a b^T  =>  db = g^T a
                                ndarray::linalg::general_mat_mul(1.0, &gi.t(), &ai, 0.0, &mut di);
                            } else {
                                // out = a b  =>  db = a^T g
                                ndarray::linalg::general_mat_mul(1.0, &ai.t(), &gi, 0.0, &mut di);
                            }
                        }
                        accum(&mut grads[b.0], db.into_dyn());
                    }
                }
                Op::SwapAxes12(a) => {
                    if self.needs(*a) {
                        let mut order: Vec<usize> = (0..g.ndim()).collect();
                        order.swap(1, 2);
                        let da = g
                            .view()
                            .permuted_axes(order.as_slice())
                            .as_standard_layout()
                            .to_owned();
                        accum(&mut grads[a.0], da);
                    }
                }
                Op::Reshape(a) => {
                    if self.needs(*a) {
                        let target = self.nodes[a.0].value.raw_dim();
                        let da = g
                            .view()
                            .as_standard_layout()
                            .to_owned()
                            .into_shape_with_order(target)
                            .expect("reshape grad");
                        accum(&mut grads[a.0], da);
                    }
                }
                Op::SoftmaxLast(a) => {
                    if self.needs(*a) {
                        // dx = y * (g - sum(g*y, last))
                        let y = &self.nodes[i].value;
                        let d = *y.shape().last().unwrap();
                        let rows = y.len() / d;
                        let ys = y.as_slice().unwrap();
                        let gsv = g.view().as_standard_layout().to_owned();
                        let gs = gsv.as_slice().unwrap();
                        let mut dx = vec![0.0; y.len()];
                        for r in 0..rows {
                            let (yr, gr) = (&ys[r * d..(r + 1) * d], &gs[r * d..(r + 1) * d]);
                            let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                            let o = &mut dx[r * d..(r + 1) * d];
                            for j in 0..d {
                                o[j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        accum(
                            &mut grads[a.0],
                            ArrayD::from_shape_vec(y.raw_dim(), dx).unwrap(),
                        );
                    }
                }
                Op::Gelu(a) => {
                    if self.needs(*a) {
                        let vx = &self.nodes[a.0].value;
                        let da = ndarray::Zip::from(&g)
                            .and(vx)
                            .map_collect(|&g, &x| g * (gauss_cdf(x) + x * gauss_pdf(x)));
                        accum(&mut grads[a.0], da);
                    }
                }
                Op::Sigmoid(a) => {
                    if self.needs(*a) {
                        let y = &self.nodes[i].value;
                        let da = ndarray::Zip::from(&g)
                            .and(y)
                            .map_collect(|&g, &y| g * y * (1.0 - y));
                        accum(&mut grads[a.0], da);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let vx = self.nodes[x.0].value.view().as_standard_layout().to_owned();
                    let xs = vx.as_slice().unwrap();
                    let gm = self.nodes[gamma.0].value.as_slice().unwrap().to_vec();
                    let gsv = g.view().as_standard_layout().to_owned();
                    let gs = gsv.as_slice().unwrap();
                    let d = gm.len();
                    let rows = xs.len() / d;
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    let mut dx = vec![0.0; xs.len()];
                    for r in 0..rows {
                        let xr = &xs[r * d..(r + 1) * d];
                        let gr = &gs[r * d..(r + 1) * d];
                        let (mu, inv) = (mean[r], inv_std[r]);
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (xr[j] - mu) * inv;
                            let dxhat = gr[j] * gm[j];
                            dgamma[j] += gr[j] * xhat;
                            dbeta[j] += gr[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        let o = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let xhat = (xr[j] - mu) * inv;
                            let dxhat = gr[j] * gm[j];
                            o[j] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    if self.needs(*x) {
                        accum(
                            &mut grads[x.0],
                            ArrayD::from_shape_vec(self.nodes[x.0].value.raw_dim(), dx).unwrap(),
                        );
                    }
                    if self.needs(*gamma) {
                        accum(&mut grads[gamma.0], ndarray::Array1::from(dgamma).into_dyn());
                    }
                    if self.needs(*beta) {
                        accum(&mut grads[beta.0], ndarray::Array1::from(dbeta).into_dyn());
                    }
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let vx = as2(&self.nodes[x.0].value, "bn train x");
                    let gm = self.nodes[gamma.0].value.as_slice().unwrap().to_vec();
                    let g2v = g.view().as_standard_layout().to_owned();
                    let g2 = as2(&g2v, "bn train grad");
                    let (n, d) = (vx.shape()[0], vx.shape()[1]);
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    let mut mean_dxhat = vec![0.0; d];
                    let mut mean_dxhat_xhat = vec![0.0; d];
                    for r in 0..n {
                        for j in 0..d {
                            let xhat = (vx[[r, j]] - mean[j]) * inv_std[j];
                            let dxhat = g2[[r, j]] * gm[j];
                            dgamma[j] += g2[[r, j]] * xhat;
                            dbeta[j] += g2[[r, j]];
                            mean_dxhat[j] += dxhat;
                            mean_dxhat_xhat[j] += dxhat * xhat;
                        }
                    }
                    for j in 0..d {
                        mean_dxhat[j] /= n as f64;
                        mean_dxhat_xhat[j] /= n as f64;
                    }
                    if self.needs(*x) {
                        let mut dx = ndarray::Array2::<f64>::zeros((n, d));
                        for r in 0..n {
                            for j in 0..d {
                                let xhat = (vx[[r, j]] - mean[j]) * inv_std[j];
                                let dxhat = g2[[r, j]] * gm[j];
                                dx[[r, j]] = inv_std[j]
                                    * (dxhat - mean_dxhat[j] - xhat * mean_dxhat_xhat[j]);
                            }
                        }
                        accum(&mut grads[x.0], dx.into_dyn());
                    }
                    if self.needs(*gamma) {
                        accum(&mut grads[gamma.0], ndarray::Array1::from(dgamma).into_dyn());
                    }
                    if self.needs(*beta) {
                        accum(&mut grads[beta.0], ndarray::Array1::from(dbeta).into_dyn());
                    }
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let vx = as2(&self.nodes[x.0].value, "bn eval x");
                    let gm = self.nodes[gamma.0].value.as_slice().unwrap().to_vec();
                    let g2v = g.view().as_standard_layout().to_owned();
                    let g2 = as2(&g2v, "bn eval grad");
                    let (n, d) = (vx.shape()[0], vx.shape()[1]);
                    if self.needs(*x) {
                        let mut dx = ndarray::Array2::<f64>::zeros((n, d));
                        for r in 0..n {
                            for j in 0..d {
                                dx[[r, j]] = g2[[r, j]] * gm[j] * inv_std[j];
                            }
                        }
                        accum(&mut grads[x.0], dx.into_dyn());
                    }
                    if self.needs(*gamma) {
                        let mut dgamma = vec![0.0; d];
                        for r in 0..n {
                            for j in 0..d {
                                dgamma[j] += g2[[r, j]] * (vx[[r, j]] - mean[j]) * inv_std[j];
                            }
                        }
                        accum(&mut grads[gamma.0], ndarray::Array1::from(dgamma).into_dyn());
                    }
                    if self.needs(*beta) {
                        let mut dbeta = vec![0.0; d];
                        for r in 0..n {
                            for j in 0..d {
                                dbeta[j] += g2[[r, j]];
                            }
                        }
                        accum(&mut grads[beta.0], ndarray::Array1::from(dbeta).into_dyn());
                    }
                }
                Op::Gather { table, ids } => {
                    if self.needs(*table) {
                        let vt = &self.nodes[table.0].value;
                        let mut dt = ArrayD::<f64>::zeros(vt.raw_dim());
                        let g2 = as2(&g, "gather grad");
                        let mut dt2 = dt.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                        for (i, &id) in ids.iter().enumerate() {
                            let mut row = dt2.row_mut(id);
                            row += &g2.row(i);
                        }
                        drop(dt2);
                        accum(&mut grads[table.0], dt);
                    }
                }
                Op::PoolAt { x, positions } => {
                    if self.needs(*x) {
                        let vx = &self.nodes[x.0].value;
                        let mut dx = ArrayD::<f64>::zeros(vx.raw_dim());
                        let g2 = as2(&g, "pool_at grad");
                        let mut dx3 = dx.view_mut().into_dimensionality::<ndarray::Ix3>().unwrap();
                        for (i, &p) in positions.iter().enumerate() {
                            let mut row = dx3.index_axis_mut(Axis(0), i);
                            let mut row = row.row_mut(p);
                            row += &g2.row(i);
                        }
                        drop(dx3);
                        accum(&mut grads[x.0], dx);
                    }
                }
                Op::SelectAxis1 { x, index } => {
                    if self.needs(*x) {
                        let vx = &self.nodes[x.0].value;
                        let mut dx = ArrayD::<f64>::zeros(vx.raw_dim());
                        let g2 = as2(&g, "select_axis1 grad");
                        let mut dx3 = dx.view_mut().into_dimensionality::<ndarray::Ix3>().unwrap();
                        dx3.index_axis_mut(Axis(1), *index).assign(&g2);
                        drop(dx3);
                        accum(&mut grads[x.0], dx);
                    }
                }
                Op::ConcatAxis1(a, b) => {
                    let ta = self.nodes[a.0].value.shape()[1];
                    let g3 = as3(&g, "concat grad");
                    if self.needs(*a) {
                        let da = g3
                            .slice_axis(Axis(1), ndarray::Slice::from(0..ta))
                            .to_owned();
                        accum(&mut grads[a.0], da.into_dyn());
                    }
                    if self.needs(*b) {
                        let db = g3
                            .slice_axis(Axis(1), ndarray::Slice::from(ta..))
                            .to_owned();
                        accum(&mut grads[b.0], db.into_dyn());
                    }
                }
                Op::BroadcastRows { v, copies } => {
                    if self.needs(*v) {
                        let g3 = as3(&g, "broadcast_rows grad");
                        let d = g3.shape()[2];
                        let mut dv = ndarray::Array1::<f64>::zeros(d);
                        for i in 0..*copies {
                            dv += &g3.index_axis(Axis(0), i).row(0);
                        }
                        accum(&mut grads[v.0], dv.into_dyn());
                    }
                }
                Op::MeanAll(a) => {
                    if self.needs(*a) {
                        let va = &self.nodes[a.0].value;
                        let gs = g.iter().next().copied().unwrap();
                        let da = ArrayD::from_elem(va.raw_dim(), gs / va.len() as f64);
                        accum(&mut grads[a.0], da);
                    }
                }
                Op::BceWithLogitsMean { logits, targets } => {
                    if self.needs(*logits) {
                        let vz = &self.nodes[logits.0].value;
                        let gs = g.iter().next().copied().unwrap();
                        let n = targets.len() as f64;
                        let mut dz = vec![0.0; targets.len()];
                        for (i, (&z, &y)) in vz.iter().zip(targets).enumerate() {
                            dz[i] = gs * (sigmoid(z) - y) / n;
                        }
                        accum(&mut grads[logits.0], ndarray::Array1::from(dz).into_dyn());
                    }
                }
                Op::SoftmaxCeMean { logits, targets } => {
                    if self.needs(*logits) {
                        let vz = as2(&self.nodes[logits.0].value, "softmax_ce grad");
                        let gs = g.iter().next().copied().unwrap();
                        let m = targets.iter().filter(|&&t| t >= 0).count();
                        let mut dz =
                            ndarray::Array2::<f64>::zeros((vz.shape()[0], vz.shape()[1]));
                        if m > 0 {
                            for (r, (row, &t)) in vz.rows().into_iter().zip(targets).enumerate() {
                                if t < 0 {
                                    continue;
                                }
                                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                                let den: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                                for (j, &v) in row.iter().enumerate() {
                                    let p = (v - mx).exp() / den;
                                    let ind = if j == t as usize { 1.0 } else { 0.0 };
                                    dz[[r, j]] = gs * (p - ind) / m as f64;
                                }
                            }
                        }
                        accum(&mut grads[logits.0], dz.into_dyn());
                    }
                }
                Op::GradReverse { x, lambda } => {
                    if self.needs(*x) {
                        let lam = *lambda;
                        accum(&mut grads[x.0], g.mapv(|v| v * (-lam)));
                    }
                }
            }
            // Keep the node's own gradient so callers can inspect
            // intermediate activations (e.g. pooled CLS states).
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}
