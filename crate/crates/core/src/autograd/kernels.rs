//! Forward and backward kernels for the heavier graph operations. All
//! activations are channel-last: `[N, D, H, W, C]` with `D` the frame axis.

use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, strides_of, Element, MatRef, Tensor};

/// Kernel extent, spatial stride and zero padding of a 3D convolution.
/// The frame axis always has stride 1 so the frame count is preserved
/// whenever `padding[0] == kernel[0] / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride_hw: usize,
    pub padding: [usize; 3],
}

impl ConvGeometry {
    /// `kt x k x k` kernel with "same" padding and unit stride.
    pub fn same(kt: usize, k: usize) -> Self {
        Self { kernel: [kt, k, k], stride_hw: 1, padding: [kt / 2, k / 2, k / 2] }
    }

    /// Spatial stride-2 downsampling with a `kt x 3 x 3` kernel.
    pub fn down2(kt: usize) -> Self {
        Self { kernel: [kt, 3, 3], stride_hw: 2, padding: [kt / 2, 1, 1] }
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn output_dims(&self, d: usize, h: usize, w: usize) -> Option<(usize, usize, usize)> {
        let [kt, kh, kw] = self.kernel;
        let [pt, ph, pw] = self.padding;
        let s = self.stride_hw;
        if s == 0 || d + 2 * pt < kt || h + 2 * ph < kh || w + 2 * pw < kw {
            return None;
        }
        Some((d + 2 * pt - kt + 1, (h + 2 * ph - kh) / s + 1, (w + 2 * pw - kw) / s + 1))
    }
}

const IM2COL_BUDGET: usize = 1 << 22;

struct ConvDims {
    n: usize,
    d: usize,
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    od: usize,
    oh: usize,
    ow: usize,
    kc: usize,
}

fn conv_dims<F: Element>(x: &Tensor<F>, w: &Tensor<F>, g: ConvGeometry) -> ConvDims {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 5, "conv3d input must be [N,D,H,W,C], got {xs:?}");
    assert_eq!(ws.len(), 5, "conv3d weight must be [kt,kh,kw,Ci,Co], got {ws:?}");
    assert_eq!(&ws[..3], &g.kernel, "conv3d weight kernel does not match geometry");
    assert_eq!(ws[3], xs[4], "conv3d input channels {} vs weight {}", xs[4], ws[3]);
    let (od, oh, ow) = g
        .output_dims(xs[1], xs[2], xs[3])
        .unwrap_or_else(|| panic!("conv3d input {xs:?} too small for {g:?}"));
    ConvDims {
        n: xs[0],
        d: xs[1],
        h: xs[2],
        w: xs[3],
        ci: xs[4],
        co: ws[4],
        od,
        oh,
        ow,
        kc: g.taps() * xs[4],
    }
}

/// Iterates the input location feeding each (row, tap) slot of an im2col
/// matrix covering output frames `f0..f1` of sample `n`.
fn for_each_patch(
    dims: &ConvDims,
    g: ConvGeometry,
    n: usize,
    f0: usize,
    f1: usize,
    mut visit: impl FnMut(usize, Option<usize>),
) {
    let [kt, kh, kw] = g.kernel;
    let [pt, ph, pw] = g.padding;
    let s = g.stride_hw;
    let ci = dims.ci;
    let mut row = 0;
    for of in f0..f1 {
        for oy in 0..dims.oh {
            for ox in 0..dims.ow {
                let base = row * dims.kc;
                let mut tap = 0;
                for dt in 0..kt {
                    let fi = (of + dt) as isize - pt as isize;
                    for dy in 0..kh {
                        let yi = (oy * s + dy) as isize - ph as isize;
                        for dx in 0..kw {
                            let xi = (ox * s + dx) as isize - pw as isize;
                            let inside = fi >= 0
                                && (fi as usize) < dims.d
                                && yi >= 0
                                && (yi as usize) < dims.h
                                && xi >= 0
                                && (xi as usize) < dims.w;
                            let src = inside.then(|| {
                                (((n * dims.d + fi as usize) * dims.h + yi as usize) * dims.w
                                    + xi as usize)
                                    * ci
                            });
                            visit(base + tap * ci, src);
                            tap += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn frames_per_chunk(dims: &ConvDims) -> usize {
    let per_frame = dims.oh * dims.ow * dims.kc;
    (IM2COL_BUDGET / per_frame.max(1)).clamp(1, dims.od.max(1))
}

fn im2col<F: Element>(x: &[F], dims: &ConvDims, g: ConvGeometry, n: usize, f0: usize, f1: usize, cols: &mut [F]) {
    let ci = dims.ci;
    for_each_patch(dims, g, n, f0, f1, |dst, src| match src {
        Some(s) => cols[dst..dst + ci].copy_from_slice(&x[s..s + ci]),
        None => cols[dst..dst + ci].fill(F::zero()),
    });
}

fn col2im<F: Element>(cols: &[F], dims: &ConvDims, g: ConvGeometry, n: usize, f0: usize, f1: usize, dx: &mut [F]) {
    let ci = dims.ci;
    for_each_patch(dims, g, n, f0, f1, |src, dst| {
        if let Some(d) = dst {
            for (o, &v) in dx[d..d + ci].iter_mut().zip(&cols[src..src + ci]) {
                *o += v;
            }
        }
    });
}

pub(crate) fn conv3d_forward<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
    g: ConvGeometry,
) -> Tensor<F> {
    let dims = conv_dims(x, w, g);
    let rows_per_frame = dims.oh * dims.ow;
    let mut out = vec![F::zero(); dims.n * dims.od * rows_per_frame * dims.co];
    if let Some(b) = b {
        assert_eq!(b.shape(), &[dims.co], "conv3d bias shape");
        for row in out.chunks_exact_mut(dims.co) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if b.is_some() { F::one() } else { F::zero() };
    let chunk = frames_per_chunk(&dims);
    let mut cols = vec![F::zero(); chunk * rows_per_frame * dims.kc];
    for n in 0..dims.n {
        let mut f0 = 0;
        while f0 < dims.od {
            let f1 = (f0 + chunk).min(dims.od);
            let rows = (f1 - f0) * rows_per_frame;
            let cols = &mut cols[..rows * dims.kc];
            im2col(x.data(), &dims, g, n, f0, f1, cols);
            let o0 = (n * dims.od + f0) * rows_per_frame * dims.co;
            gemm(
                F::one(),
                cols,
                MatRef::new(rows, dims.kc),
                w.data(),
                MatRef::new(dims.kc, dims.co),
                beta,
                &mut out[o0..o0 + rows * dims.co],
            );
            f0 = f1;
        }
    }
    Tensor::from_vec(&[dims.n, dims.od, dims.oh, dims.ow, dims.co], out).expect("conv output shape")
}

pub(crate) struct ConvGrads<F> {
    pub dx: Option<Tensor<F>>,
    pub dw: Option<Tensor<F>>,
    pub db: Option<Tensor<F>>,
}

pub(crate) fn conv3d_backward<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    g: ConvGeometry,
    dy: &Tensor<F>,
    need: [bool; 3],
) -> ConvGrads<F> {
    let dims = conv_dims(x, w, g);
    let rows_per_frame = dims.oh * dims.ow;
    let mut dx = need[0].then(|| vec![F::zero(); x.numel()]);
    let mut dw = need[1].then(|| vec![F::zero(); w.numel()]);
    let db = need[2].then(|| {
        let mut acc = vec![F::zero(); dims.co];
        for row in dy.data().chunks_exact(dims.co) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        Tensor::from_vec(&[dims.co], acc).expect("bias grad")
    });
    if dx.is_some() || dw.is_some() {
        let chunk = frames_per_chunk(&dims);
        let mut cols = vec![F::zero(); chunk * rows_per_frame * dims.kc];
        for n in 0..dims.n {
            let mut f0 = 0;
            while f0 < dims.od {
                let f1 = (f0 + chunk).min(dims.od);
                let rows = (f1 - f0) * rows_per_frame;
                let cols = &mut cols[..rows * dims.kc];
                let o0 = (n * dims.od + f0) * rows_per_frame * dims.co;
                let dy_chunk = &dy.data()[o0..o0 + rows * dims.co];
                if let Some(dw) = dw.as_mut() {
                    im2col(x.data(), &dims, g, n, f0, f1, cols);
                    gemm(
                        F::one(),
                        cols,
                        MatRef::t(dims.kc, rows),
                        dy_chunk,
                        MatRef::new(rows, dims.co),
                        F::one(),
                        dw,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        F::one(),
                        dy_chunk,
                        MatRef::new(rows, dims.co),
                        w.data(),
                        MatRef::t(dims.co, dims.kc),
                        F::zero(),
                        cols,
                    );
                    col2im(cols, &dims, g, n, f0, f1, dx);
                }
                f0 = f1;
            }
        }
    }
    ConvGrads {
        dx: dx.map(|v| Tensor::from_vec(x.shape(), v).expect("dx shape")),
        dw: dw.map(|v| Tensor::from_vec(w.shape(), v).expect("dw shape")),
        db,
    }
}

/// `[..., Ci] @ [Ci, Co] (+ b)`.
pub(crate) fn linear_forward<F: Element>(x: &Tensor<F>, w: &Tensor<F>, b: Option<&Tensor<F>>) -> Tensor<F> {
    let (rows, ci, co) = linear_dims(x, w);
    let mut out = vec![F::zero(); rows * co];
    if let Some(b) = b {
        assert_eq!(b.shape(), &[co], "linear bias shape");
        for row in out.chunks_exact_mut(co) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if b.is_some() { F::one() } else { F::zero() };
    gemm(F::one(), x.data(), MatRef::new(rows, ci), w.data(), MatRef::new(ci, co), beta, &mut out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = co;
    Tensor::from_vec(&shape, out).expect("linear output shape")
}

fn linear_dims<F: Element>(x: &Tensor<F>, w: &Tensor<F>) -> (usize, usize, usize) {
    assert_eq!(w.rank(), 2, "linear weight must be [Ci, Co]");
    let ci = *x.shape().last().expect("linear input rank >= 1");
    assert_eq!(ci, w.shape()[0], "linear input width {ci} vs weight {:?}", w.shape());
    (x.numel() / ci.max(1), ci, w.shape()[1])
}

pub(crate) fn linear_backward<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    need: [bool; 3],
) -> ConvGrads<F> {
    let (rows, ci, co) = linear_dims(x, w);
    let dx = need[0].then(|| {
        let mut dx = vec![F::zero(); rows * ci];
        gemm(F::one(), dy.data(), MatRef::new(rows, co), w.data(), MatRef::t(co, ci), F::zero(), &mut dx);
        Tensor::from_vec(x.shape(), dx).expect("dx shape")
    });
    let dw = need[1].then(|| {
        let mut dw = vec![F::zero(); ci * co];
        gemm(F::one(), x.data(), MatRef::t(ci, rows), dy.data(), MatRef::new(rows, co), F::zero(), &mut dw);
        Tensor::from_vec(w.shape(), dw).expect("dw shape")
    });
    let db = need[2].then(|| {
        let mut acc = vec![F::zero(); co];
        for row in dy.data().chunks_exact(co) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        Tensor::from_vec(&[co], acc).expect("db shape")
    });
    ConvGrads { dx, dw, db }
}

/// Statistics layout for parameter-free group normalization over a
/// channel-last tensor `[N, D, ..., C]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GroupLayout {
    pub outer: usize,
    pub positions: usize,
    pub channels: usize,
    pub groups: usize,
}

impl GroupLayout {
    pub fn new(shape: &[usize], groups: usize, per_frame: bool) -> Self {
        assert!(shape.len() >= 3, "group norm needs [N, D, ..., C], got {shape:?}");
        let channels = *shape.last().unwrap();
        assert!(groups > 0 && channels % groups == 0, "{groups} groups do not divide {channels} channels");
        let outer = if per_frame { shape[0] * shape[1] } else { shape[0] };
        let numel: usize = shape.iter().product();
        Self { outer, positions: numel / (outer * channels).max(1), channels, groups }
    }

    fn group_width(&self) -> usize {
        self.channels / self.groups
    }
}

pub(crate) fn group_norm_forward<F: Element>(x: &[F], l: GroupLayout, eps: F) -> (Vec<F>, Vec<F>, Vec<F>) {
    let cg = l.group_width();
    let count = F::of((l.positions * cg) as f64);
    let mut y = vec![F::zero(); x.len()];
    let mut means = Vec::with_capacity(l.outer * l.groups);
    let mut rstds = Vec::with_capacity(l.outer * l.groups);
    for o in 0..l.outer {
        let block = o * l.positions * l.channels;
        for gi in 0..l.groups {
            let c0 = gi * cg;
            let mut sum = F::zero();
            for p in 0..l.positions {
                let s = block + p * l.channels + c0;
                for &v in &x[s..s + cg] {
                    sum += v;
                }
            }
            let mean = sum / count;
            let mut var = F::zero();
            for p in 0..l.positions {
                let s = block + p * l.channels + c0;
                for &v in &x[s..s + cg] {
                    var += (v - mean) * (v - mean);
                }
            }
            let rstd = F::one() / (var / count + eps).sqrt();
            for p in 0..l.positions {
                let s = block + p * l.channels + c0;
                for (o, &v) in y[s..s + cg].iter_mut().zip(&x[s..s + cg]) {
                    *o = (v - mean) * rstd;
                }
            }
            means.push(mean);
            rstds.push(rstd);
        }
    }
    (y, means, rstds)
}

pub(crate) fn group_norm_backward<F: Element>(
    x: &[F],
    dy: &[F],
    l: GroupLayout,
    means: &[F],
    rstds: &[F],
) -> Vec<F> {
    let cg = l.group_width();
    let count = F::of((l.positions * cg) as f64);
    let mut dx = vec![F::zero(); x.len()];
    for o in 0..l.outer {
        let block = o * l.positions * l.channels;
        for gi in 0..l.groups {
            let c0 = gi * cg;
            let mean = means[o * l.groups + gi];
            let rstd = rstds[o * l.groups + gi];
            let mut sum_dy = F::zero();
            let mut sum_dy_xhat = F::zero();
            for p in 0..l.positions {
                let s = block + p * l.channels + c0;
                for (&g, &v) in dy[s..s + cg].iter().zip(&x[s..s + cg]) {
                    sum_dy += g;
                    sum_dy_xhat += g * (v - mean) * rstd;
                }
            }
            let m_dy = sum_dy / count;
            let m_dy_xhat = sum_dy_xhat / count;
            for p in 0..l.positions {
                let s = block + p * l.channels + c0;
                for ((o, &g), &v) in dx[s..s + cg].iter_mut().zip(&dy[s..s + cg]).zip(&x[s..s + cg]) {
                    let xhat = (v - mean) * rstd;
                    *o = rstd * (g - m_dy - xhat * m_dy_xhat);
                }
            }
        }
    }
    dx
}

/// Batched softmax attention. `q: [B, Lq, Dk]`, `k: [B, Lk, Dk]`,
/// `v: [B, Lk, Dv]`; returns the output `[B, Lq, Dv]` and the attention
/// probabilities `[B, Lq, Lk]`.
pub(crate) fn attention_forward<F: Element>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    scale: F,
) -> (Tensor<F>, Tensor<F>) {
    let (b, lq, lk, dk, dv) = attention_dims(q, k, v);
    let mut probs = vec![F::zero(); b * lq * lk];
    let mut out = vec![F::zero(); b * lq * dv];
    for bi in 0..b {
        let p = &mut probs[bi * lq * lk..(bi + 1) * lq * lk];
        gemm(
            scale,
            &q.data()[bi * lq * dk..],
            MatRef::new(lq, dk),
            &k.data()[bi * lk * dk..],
            MatRef::t(dk, lk),
            F::zero(),
            p,
        );
        for row in p.chunks_exact_mut(lk) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        gemm(
            F::one(),
            p,
            MatRef::new(lq, lk),
            &v.data()[bi * lk * dv..],
            MatRef::new(lk, dv),
            F::zero(),
            &mut out[bi * lq * dv..(bi + 1) * lq * dv],
        );
    }
    (
        Tensor::from_vec(&[b, lq, dv], out).expect("attention output"),
        Tensor::from_vec(&[b, lq, lk], probs).expect("attention probs"),
    )
}

fn attention_dims<F: Element>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>) -> (usize, usize, usize, usize, usize) {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    assert!(qs.len() == 3 && ks.len() == 3 && vs.len() == 3, "attention operands must be rank 3");
    assert!(qs[0] == ks[0] && ks[0] == vs[0], "attention batch mismatch");
    assert_eq!(qs[2], ks[2], "attention key width mismatch");
    assert_eq!(ks[1], vs[1], "attention key/value length mismatch");
    (qs[0], qs[1], ks[1], qs[2], vs[2])
}

pub(crate) fn attention_backward<F: Element>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    probs: &Tensor<F>,
    scale: F,
    dout: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (b, lq, lk, dk, dv) = attention_dims(q, k, v);
    let mut dq = vec![F::zero(); q.numel()];
    let mut dkv = vec![F::zero(); k.numel()];
    let mut dvv = vec![F::zero(); v.numel()];
    let mut ds = vec![F::zero(); lq * lk];
    for bi in 0..b {
        let p = &probs.data()[bi * lq * lk..(bi + 1) * lq * lk];
        let go = &dout.data()[bi * lq * dv..(bi + 1) * lq * dv];
        // dV = P^T dO
        gemm(F::one(), p, MatRef::t(lk, lq), go, MatRef::new(lq, dv), F::zero(), &mut dvv[bi * lk * dv..(bi + 1) * lk * dv]);
        // dP = dO V^T
        gemm(F::one(), go, MatRef::new(lq, dv), &v.data()[bi * lk * dv..], MatRef::t(dv, lk), F::zero(), &mut ds);
        for (ds_row, p_row) in ds.chunks_exact_mut(lk).zip(p.chunks_exact(lk)) {
            let dot: F = ds_row.iter().zip(p_row).map(|(&a, &b)| a * b).sum();
            for (d, &pv) in ds_row.iter_mut().zip(p_row) {
                *d = pv * (*d - dot);
            }
        }
        gemm(scale, &ds, MatRef::new(lq, lk), &k.data()[bi * lk * dk..], MatRef::new(lk, dk), F::zero(), &mut dq[bi * lq * dk..(bi + 1) * lq * dk]);
        gemm(scale, &ds, MatRef::t(lk, lq), &q.data()[bi * lq * dk..], MatRef::new(lq, dk), F::zero(), &mut dkv[bi * lk * dk..(bi + 1) * lk * dk]);
    }
    (
        Tensor::from_vec(q.shape(), dq).expect("dq"),
        Tensor::from_vec(k.shape(), dkv).expect("dk"),
        Tensor::from_vec(v.shape(), dvv).expect("dv"),
    )
}

/// Numpy-style broadcast of two equal-rank shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides_of(shape);
    shape.iter().zip(out).zip(s).map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st }).collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast
/// output, in row-major order.
pub(crate) fn for_each_broadcast(a: &[usize], b: &[usize], out: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let last = rank - 1;
    let inner = out[last];
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    loop {
        let ia0: usize = (0..last).map(|d| idx[d] * sa[d]).sum();
        let ib0: usize = (0..last).map(|d| idx[d] * sb[d]).sum();
        for i in 0..inner {
            f(o, ia0 + i * sa[last], ib0 + i * sb[last]);
            o += 1;
        }
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Nearest-neighbour spatial upsampling of `[N, D, H, W, C]` by `factor`.
pub(crate) fn upsample_nearest<F: Element>(x: &Tensor<F>, factor: usize) -> Tensor<F> {
    let s = x.shape();
    assert_eq!(s.len(), 5, "upsample expects [N,D,H,W,C]");
    let (nd, h, w, c) = (s[0] * s[1], s[2], s[3], s[4]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(nd * oh * ow * c);
    for f in 0..nd {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((f * h + y / factor) * w + xx / factor) * c;
                out.extend_from_slice(&x.data()[src..src + c]);
            }
        }
    }
    Tensor::from_vec(&[s[0], s[1], oh, ow, c], out).expect("upsample shape")
}

pub(crate) fn upsample_nearest_backward<F: Element>(dy: &Tensor<F>, in_shape: &[usize], factor: usize) -> Tensor<F> {
    let (nd, h, w, c) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![F::zero(); nd * h * w * c];
    let g = dy.data();
    for f in 0..nd {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((f * oh + y) * ow + xx) * c;
                let dst = ((f * h + y / factor) * w + xx / factor) * c;
                for (o, &v) in dx[dst..dst + c].iter_mut().zip(&g[src..src + c]) {
                    *o += v;
                }
            }
        }
    }
    Tensor::from_vec(in_shape, dx).expect("upsample grad shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop convolution used as an independent reference.
    fn conv3d_direct(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeometry) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let (od, oh, ow) = g.output_dims(xs[1], xs[2], xs[3]).unwrap();
        let co = ws[4];
        let mut out = Tensor::zeros(&[xs[0], od, oh, ow, co]);
        for n in 0..xs[0] {
            for f in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        for o in 0..co {
                            let mut acc = 0.0;
                            for dt in 0..ws[0] {
                                for dy in 0..ws[1] {
                                    for dx in 0..ws[2] {
                                        let fi = f as isize + dt as isize - g.padding[0] as isize;
                                        let yi = (y * g.stride_hw + dy) as isize - g.padding[1] as isize;
                                        let xi = (xx * g.stride_hw + dx) as isize - g.padding[2] as isize;
                                        if fi < 0 || yi < 0 || xi < 0 || fi as usize >= xs[1] || yi as usize >= xs[2] || xi as usize >= xs[3] {
                                            continue;
                                        }
                                        for c in 0..xs[4] {
                                            let xv = x.data()[(((n * xs[1] + fi as usize) * xs[2] + yi as usize) * xs[3] + xi as usize) * xs[4] + c];
                                            let wv = w.data()[(((dt * ws[1] + dy) * ws[2] + dx) * ws[3] + c) * co + o];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((n * od + f) * oh + y) * ow + xx) * co + o] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3d_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for g in [ConvGeometry::same(3, 3), ConvGeometry::down2(3), ConvGeometry::same(1, 3), ConvGeometry::same(1, 1)] {
            let x = Tensor::<f64>::randn(&[2, 3, 6, 6, 4], &mut rng);
            let w = Tensor::<f64>::randn(&[g.kernel[0], g.kernel[1], g.kernel[2], 4, 5], &mut rng);
            let fast = conv3d_forward(&x, &w, None, g);
            let slow = conv3d_direct(&x, &w, g);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{g:?}");
        }
    }

    #[test]
    fn down2_halves_space_keeps_frames() {
        let g = ConvGeometry::down2(3);
        assert_eq!(g.output_dims(16, 32, 32), Some((16, 16, 16)));
        assert_eq!(g.output_dims(5, 7, 7), Some((5, 4, 4)));
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[1, 4, 3]), Some(vec![2, 4, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 3]), None);
        assert_eq!(broadcast_shape(&[2, 3], &[2, 3, 1]), None);
    }

    #[test]
    fn group_norm_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 4, 8], &mut rng).map(|v| 3.0 * v + 1.5);
        let l = GroupLayout::new(x.shape(), 4, true);
        let (y, _, _) = group_norm_forward(x.data(), l, 0.0);
        let frame = 4 * 4 * 8;
        for f in 0..6 {
            for gi in 0..4 {
                let vals: Vec<f64> = (0..16)
                    .flat_map(|p| (0..2).map(move |j| (p, j)))
                    .map(|(p, j)| y[f * frame + p * 8 + gi * 2 + j])
                    .collect();
                let m = vals.iter().sum::<f64>() / 32.0;
                let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 32.0;
                assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-10);
            }
        }
    }
}
