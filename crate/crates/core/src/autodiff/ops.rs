//! Forward constructors and backward rules for every recorded op.

use super::kernels::{self, ConvDims, ConvGeom};
use super::{index_err, CustomBackward, Graph, Op, Var};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{broadcast_offsets, broadcast_shape, check_perm, numel, Tensor};

/// Batch axis handling for `[.., m, k] x [.., k, n]`.
struct MatMulPlan {
    out_shape: Vec<usize>,
    a_off: Vec<usize>,
    b_off: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatMulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return shape_err(format!("matmul needs rank >= 2 operands, got {:?} and {:?}", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return shape_err(format!("matmul inner dimensions differ: {:?} x {:?}", a, b));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = broadcast_shape(ab, bb)
        .map_err(|_| crate::Error::Shape(format!("matmul batch dims of {:?} and {:?} do not broadcast", a, b)))?;
    let a_off = broadcast_offsets(&batch, ab).into_iter().map(|o| o * m * k).collect();
    let b_off = broadcast_offsets(&batch, bb).into_iter().map(|o| o * k * n).collect();
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatMulPlan { out_shape, a_off, b_off, m, k, n })
}

fn conv_dims(x: &[usize], w: &[usize], geom: &ConvGeom) -> Result<ConvDims> {
    if x.len() != 4 || w.len() != 4 {
        return shape_err(format!("conv expects [N,C,T,V] input and 4-D kernel, got {:?} and {:?}", x, w));
    }
    if x[1] != w[1] {
        return shape_err(format!("conv input channels {} do not match kernel {:?}", x[1], w));
    }
    let Some((to, vo)) = geom.output_extent(x[2], x[3], w[2], w[3]) else {
        return config_err(format!(
            "conv over T={} V={} with kernel {}x{}, stride {}, padding ({}, {}) has no output",
            x[2], x[3], w[2], w[3], geom.stride_t, geom.pad_t, geom.pad_v
        ));
    };
    Ok(ConvDims { n: x[0], cin: x[1], t: x[2], v: x[3], cout: w[0], kt: w[2], kv: w[3], to, vo })
}

/// Sums `g` (shaped like the broadcast output) back down to `shape`.
fn sum_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let offs = broadcast_offsets(g.shape(), shape);
    let mut out = vec![0.0; numel(shape)];
    for (gv, &o) in g.data().iter().zip(&offs) {
        out[o] += gv;
    }
    Tensor::new(shape, out).expect("sum_to shape")
}

/// Shape of `[N, C, ...]` split into per-channel groups.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return shape_err(format!("batch norm needs [N, C, ...], got {:?}", shape));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

impl Graph {
    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let oa = broadcast_offsets(&out_shape, &sa);
            let ob = broadcast_offsets(&out_shape, &sb);
            oa.iter().zip(&ob).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&out_shape, data)?, op, rg))
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product with right-aligned broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = matmul_plan(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; numel(&plan.out_shape)];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (m, k, n) = (plan.m, plan.k, plan.n);
        for (bi, (&oa, &ob)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
            kernels::gemm_acc(
                &va[oa..oa + m * k],
                &vb[ob..ob + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&plan.out_shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Cross-correlation of `x: [N, C_in, T, V]` with `w: [C_out, C_in, k_t, k_v]`.
    pub fn conv(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let d = conv_dims(self.shape(x), self.shape(w), &geom)?;
        let mut out = vec![0.0; d.n * d.cout * d.to * d.vo];
        kernels::conv_forward(self.value(x).data(), self.value(w).data(), &mut out, &d, &geom);
        let rg = self.rg(&[x, w]);
        let t = Tensor::new(&[d.n, d.cout, d.to, d.vo], out)?;
        Ok(self.push(t, Op::Conv { x, w, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(0.0));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| 1.0 / (1.0 + (-e).exp()));
        let rg = self.rg(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return index_err(format!("softmax axis {axis} out of range for {:?}", shape));
        }
        let mut out = vec![0.0; numel(&shape)];
        kernels::softmax_forward(self.value(x).data(), &mut out, &shape, axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Arithmetic mean over `axes`. Reduced axes are kept with extent 1
    /// when `keep_dims` is set and removed otherwise.
    pub fn mean(&mut self, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut keep_shape = shape.clone();
        for (i, &ax) in axes.iter().enumerate() {
            if ax >= shape.len() || axes[..i].contains(&ax) {
                return index_err(format!("invalid reduction axes {:?} for {:?}", axes, shape));
            }
            keep_shape[ax] = 1;
        }
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        if count == 0 || axes.is_empty() {
            return shape_err(format!("empty reduction over axes {:?} of {:?}", axes, shape));
        }
        let offs = broadcast_offsets(&shape, &keep_shape);
        let mut out = vec![0.0; numel(&keep_shape)];
        for (xv, &o) in self.value(x).data().iter().zip(&offs) {
            out[o] += xv;
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let out_shape: Vec<usize> = if keep_dims {
            keep_shape.clone()
        } else {
            let s: Vec<usize> =
                shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Mean { x, keep_shape, count }, rg))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x).permute(perm)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Training-mode batch norm over axis 1 of `[N, C, ...]`. Returns the
    /// output plus the batch mean and unbiased variance per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, inner) = channel_layout(self.shape(x))?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err(format!("batch norm affine params must have {c} entries"));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let m = (n * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let s = &xs[(ni * c + ci) * inner..(ni * c + ci + 1) * inner];
                mean[ci] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for ni in 0..n {
            for ci in 0..c {
                let s = &xs[(ni * c + ci) * inner..(ni * c + ci + 1) * inner];
                var[ci] += s.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                for j in base..base + inner {
                    xhat[j] = (xs[j] - mean[ci]) * inv_std[ci];
                    out[j] = g[ci] * xhat[j] + b[ci];
                }
            }
        }
        let unbiased: Vec<f64> =
            if m > 1.0 { var.iter().map(|v| v * m / (m - 1.0)).collect() } else { var.clone() };
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std },
            rg,
        );
        Ok((v, mean, unbiased))
    }

    /// Inference-mode batch norm using fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, inner) = channel_layout(self.shape(x))?;
        if self.value(gamma).numel() != c || running_mean.len() != c || running_var.len() != c {
            return shape_err(format!("batch norm params must have {c} entries"));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                for j in base..base + inner {
                    xhat[j] = (xs[j] - running_mean[ci]) * inv_std[ci];
                    out[j] = g[ci] * xhat[j] + b[ci];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std },
            rg,
        ))
    }

    /// Mean over the batch of `-log softmax(scores)[label]`.
    pub fn cross_entropy(&mut self, scores: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(scores).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return shape_err(format!(
                "cross entropy needs [N, classes] scores for {} labels, got {:?}",
                labels.len(),
                shape
            ));
        }
        let k = shape[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return index_err(format!("label {bad} out of range for {k} classes"));
        }
        let mut probs = vec![0.0; shape[0] * k];
        kernels::softmax_forward(self.value(scores).data(), &mut probs, &shape, 1);
        let s = self.value(scores).data();
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &s[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= labels.len().max(1) as f64;
        let rg = self.rg(&[scores]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { scores, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Records an op with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let rg = self.rg(inputs);
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward }, rg)
    }

    /// Input gradients for node `i` given its output gradient.
    pub(super) fn vjp(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(*a) {
                    out.push((*a, sum_to(g, self.shape(*a))));
                }
                if need(*b) {
                    out.push((*b, sum_to(g, self.shape(*b))));
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    out.push((*a, sum_to(g, self.shape(*a))));
                }
                if need(*b) {
                    out.push((*b, sum_to(&g.map(|x| -x), self.shape(*b))));
                }
            }
            Op::Mul(a, b) => {
                let os = g.shape();
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let oa = broadcast_offsets(os, sa);
                let ob = broadcast_offsets(os, sb);
                if need(*a) {
                    let mut ga = vec![0.0; numel(sa)];
                    for (k, gv) in g.data().iter().enumerate() {
                        ga[oa[k]] += gv * vb[ob[k]];
                    }
                    out.push((*a, Tensor::new(sa, ga)?));
                }
                if need(*b) {
                    let mut gb = vec![0.0; numel(sb)];
                    for (k, gv) in g.data().iter().enumerate() {
                        gb[ob[k]] += gv * va[oa[k]];
                    }
                    out.push((*b, Tensor::new(sb, gb)?));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.map(|x| x * s))),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let plan = matmul_plan(sa, sb)?;
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (va, vb, gd) = (self.value(*a).data(), self.value(*b).data(), g.data());
                if need(*a) {
                    let mut ga = vec![0.0; numel(sa)];
                    for (bi, (&oa, &ob)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
                        kernels::gemm_acc_bt(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &vb[ob..ob + k * n],
                            &mut ga[oa..oa + m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    out.push((*a, Tensor::new(sa, ga)?));
                }
                if need(*b) {
                    let mut gb = vec![0.0; numel(sb)];
                    for (bi, (&oa, &ob)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
                        kernels::gemm_acc_at(
                            &va[oa..oa + m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &mut gb[ob..ob + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    out.push((*b, Tensor::new(sb, gb)?));
                }
            }
            Op::Conv { x, w, geom } => {
                let d = conv_dims(self.shape(*x), self.shape(*w), geom)?;
                if need(*x) {
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    kernels::conv_backward_input(g.data(), self.value(*w).data(), &mut dx, &d, geom);
                    out.push((*x, Tensor::new(self.shape(*x), dx)?));
                }
                if need(*w) {
                    let mut dw = vec![0.0; self.value(*w).numel()];
                    kernels::conv_backward_weight(g.data(), self.value(*x).data(), &mut dw, &d, geom);
                    out.push((*w, Tensor::new(self.shape(*w), dw)?));
                }
            }
            Op::Relu(x) => {
                let y = node.value.data();
                let d = g.data().iter().zip(y).map(|(gv, yv)| if *yv > 0.0 { *gv } else { 0.0 }).collect();
                out.push((*x, Tensor::new(g.shape(), d)?));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = g.data().iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                out.push((*x, Tensor::new(g.shape(), d)?));
            }
            Op::Softmax { x, axis } => {
                let mut dx = vec![0.0; g.numel()];
                kernels::softmax_backward(node.value.data(), g.data(), &mut dx, g.shape(), *axis);
                out.push((*x, Tensor::new(g.shape(), dx)?));
            }
            Op::Mean { x, keep_shape, count } => {
                let xs = self.shape(*x);
                let offs = broadcast_offsets(xs, keep_shape);
                let inv = 1.0 / *count as f64;
                let gd = g.data();
                let dx = offs.iter().map(|&o| gd[o] * inv).collect();
                out.push((*x, Tensor::new(xs, dx)?));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                out.push((*x, Tensor::full(self.shape(*x), gv)));
            }
            Op::Reshape(x) => out.push((*x, g.reshape(self.shape(*x))?)),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                check_perm(&inv, perm.len())?;
                out.push((*x, g.permute(&inv)?));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c, inner) = channel_layout(g.shape())?;
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * inner;
                        for j in base..base + inner {
                            sum_g[ci] += gd[j];
                            sum_gx[ci] += gd[j] * xhat[j];
                        }
                    }
                }
                if need(*x) {
                    let m = (n * inner) as f64;
                    let mut dx = vec![0.0; gd.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * inner;
                            let k = gam[ci] * inv_std[ci] / m;
                            for j in base..base + inner {
                                dx[j] = k * (m * gd[j] - sum_g[ci] - xhat[j] * sum_gx[ci]);
                            }
                        }
                    }
                    out.push((*x, Tensor::new(g.shape(), dx)?));
                }
                if need(*gamma) {
                    out.push((*gamma, Tensor::new(self.shape(*gamma), sum_gx)?));
                }
                if need(*beta) {
                    out.push((*beta, Tensor::new(self.shape(*beta), sum_g)?));
                }
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let (n, c, inner) = channel_layout(g.shape())?;
                let gd = g.data();
                let gam = self.value(*gamma).data();
                if need(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * inner;
                            for j in base..base + inner {
                                dx[j] = gd[j] * gam[ci] * inv_std[ci];
                            }
                        }
                    }
                    out.push((*x, Tensor::new(g.shape(), dx)?));
                }
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * inner;
                        for j in base..base + inner {
                            sum_g[ci] += gd[j];
                            sum_gx[ci] += gd[j] * xhat[j];
                        }
                    }
                }
                if need(*gamma) {
                    out.push((*gamma, Tensor::new(self.shape(*gamma), sum_gx)?));
                }
                if need(*beta) {
                    out.push((*beta, Tensor::new(self.shape(*beta), sum_g)?));
                }
            }
            Op::CrossEntropy { scores, labels, probs } => {
                let shape = self.shape(*scores);
                let k = shape[1];
                let scale = g.data()[0] / labels.len().max(1) as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= scale;
                }
                out.push((*scores, Tensor::new(shape, d)?));
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = backward(g, &vals);
                if gs.len() != inputs.len() {
                    return shape_err("custom backward returned the wrong number of gradients");
                }
                for (v, gi) in inputs.iter().zip(gs) {
                    if need(*v) {
                        if gi.shape() != self.shape(*v) {
                            return shape_err(format!(
                                "custom backward gradient {:?} does not match input {:?}",
                                gi.shape(),
                                self.shape(*v)
                            ));
                        }
                        out.push((*v, gi));
                    }
                }
            }
        }
        Ok(out)
    }
}
