//! Raw numeric loops shared by the forward and backward rules.

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `da[m,k] += g[m,n] · b[k,n]ᵀ`
pub(crate) fn gemm_acc_bt(g: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            da[i * k + p] += dot;
        }
    }
}

/// `db[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn gemm_acc_at(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let drow = &mut db[p * n..(p + 1) * n];
            for (d, gv) in drow.iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
}

/// Geometry of a 2-D cross-correlation over the last two axes
/// `[N, C, T, V]` with stride along T only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride_t: usize,
    pub pad_t: usize,
    pub pad_v: usize,
}

impl ConvGeom {
    pub fn new(stride_t: usize, pad_t: usize, pad_v: usize) -> Self {
        Self { stride_t, pad_t, pad_v }
    }

    pub fn pointwise() -> Self {
        Self::new(1, 0, 0)
    }

    /// Output extents, or `None` when either would be non-positive.
    pub fn output_extent(&self, t: usize, v: usize, kt: usize, kv: usize) -> Option<(usize, usize)> {
        let t_span = (t + 2 * self.pad_t) as isize - kt as isize;
        let v_span = (v + 2 * self.pad_v) as isize - kv as isize;
        if t_span < 0 || v_span < 0 || self.stride_t == 0 {
            return None;
        }
        Some((t_span as usize / self.stride_t + 1, v_span as usize + 1))
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub t: usize,
    pub v: usize,
    pub cout: usize,
    pub kt: usize,
    pub kv: usize,
    pub to: usize,
    pub vo: usize,
}

impl ConvDims {
    /// Valid output-column range and input column offset for kernel column `b`.
    #[inline]
    fn v_range(&self, g: &ConvGeom, b: usize) -> (usize, usize) {
        // input column = out column + b - pad_v
        let lo = g.pad_v.saturating_sub(b);
        let hi = (self.v + g.pad_v).saturating_sub(b).min(self.vo);
        (lo, hi.max(lo))
    }

    #[inline]
    fn t_in(&self, g: &ConvGeom, to: usize, a: usize) -> Option<usize> {
        let ti = (to * g.stride_t + a) as isize - g.pad_t as isize;
        if ti < 0 || ti as usize >= self.t {
            None
        } else {
            Some(ti as usize)
        }
    }
}

pub(crate) fn conv_forward(x: &[f64], w: &[f64], out: &mut [f64], d: &ConvDims, g: &ConvGeom) {
    let xin = d.t * d.v;
    let xo = d.to * d.vo;
    for n in 0..d.n {
        for co in 0..d.cout {
            let ob = (n * d.cout + co) * xo;
            let orow = &mut out[ob..ob + xo];
            for ci in 0..d.cin {
                let xb = (n * d.cin + ci) * xin;
                let xs = &x[xb..xb + xin];
                for a in 0..d.kt {
                    for b in 0..d.kv {
                        let wv = w[((co * d.cin + ci) * d.kt + a) * d.kv + b];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = d.v_range(g, b);
                        for to in 0..d.to {
                            let Some(ti) = d.t_in(g, to, a) else { continue };
                            let dst = &mut orow[to * d.vo + lo..to * d.vo + hi];
                            let src_start = ti * d.v + lo + b - g.pad_v;
                            let src = &xs[src_start..src_start + (hi - lo)];
                            for (o, s) in dst.iter_mut().zip(src) {
                                *o += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_backward_input(gout: &[f64], w: &[f64], dx: &mut [f64], d: &ConvDims, g: &ConvGeom) {
    let xin = d.t * d.v;
    let xo = d.to * d.vo;
    for n in 0..d.n {
        for co in 0..d.cout {
            let ob = (n * d.cout + co) * xo;
            let grow = &gout[ob..ob + xo];
            for ci in 0..d.cin {
                let xb = (n * d.cin + ci) * xin;
                let dxs = &mut dx[xb..xb + xin];
                for a in 0..d.kt {
                    for b in 0..d.kv {
                        let wv = w[((co * d.cin + ci) * d.kt + a) * d.kv + b];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = d.v_range(g, b);
                        for to in 0..d.to {
                            let Some(ti) = d.t_in(g, to, a) else { continue };
                            let src = &grow[to * d.vo + lo..to * d.vo + hi];
                            let dst_start = ti * d.v + lo + b - g.pad_v;
                            let dst = &mut dxs[dst_start..dst_start + (hi - lo)];
                            for (o, s) in dst.iter_mut().zip(src) {
                                *o += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_backward_weight(gout: &[f64], x: &[f64], dw: &mut [f64], d: &ConvDims, g: &ConvGeom) {
    let xin = d.t * d.v;
    let xo = d.to * d.vo;
    for n in 0..d.n {
        for co in 0..d.cout {
            let ob = (n * d.cout + co) * xo;
            let grow = &gout[ob..ob + xo];
            for ci in 0..d.cin {
                let xb = (n * d.cin + ci) * xin;
                let xs = &x[xb..xb + xin];
                for a in 0..d.kt {
                    for b in 0..d.kv {
                        let (lo, hi) = d.v_range(g, b);
                        let mut acc = 0.0;
                        for to in 0..d.to {
                            let Some(ti) = d.t_in(g, to, a) else { continue };
                            let gs = &grow[to * d.vo + lo..to * d.vo + hi];
                            let src_start = ti * d.v + lo + b - g.pad_v;
                            let xsl = &xs[src_start..src_start + (hi - lo)];
                            acc += gs.iter().zip(xsl).map(|(p, q)| p * q).sum::<f64>();
                        }
                        dw[((co * d.cin + ci) * d.kt + a) * d.kv + b] += acc;
                    }
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward(x: &[f64], out: &mut [f64], shape: &[usize], axis: usize) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(x[base + j * inner]);
            }
            let mut z = 0.0;
            for j in 0..len {
                let e = (x[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                z += e;
            }
            for j in 0..len {
                out[base + j * inner] /= z;
            }
        }
    }
}

pub(crate) fn softmax_backward(y: &[f64], gout: &[f64], dx: &mut [f64], shape: &[usize], axis: usize) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len).map(|j| gout[base + j * inner] * y[base + j * inner]).sum();
            for j in 0..len {
                let k = base + j * inner;
                dx[k] += y[k] * (gout[k] - dot);
            }
        }
    }
}
