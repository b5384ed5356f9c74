//! Raw numeric kernels behind the graph ops. Slices in, slices out; shapes are
//! validated by the caller.

use crate::parallel;

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`, all row-major.
/// With `ta`, `a` is stored as `k×m`; with `tb`, `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index sgemm touches for these strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn ck(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(g: &ConvGeom, x: &[f32], col: &mut [f32]) {
    let l = g.spatial_out();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * l;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f32], dx: &mut [f32]) {
    let l = g.spatial_out();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * l;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    x: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let l = g.spatial_out();
    let per_in = g.c * g.h * g.w;
    let mut out = vec![0.0f32; g.n * g.o * l];
    parallel::for_each_chunk(&mut out, g.o * l, |n, dst| {
        let xn = &x[n * per_in..(n + 1) * per_in];
        if g.is_pointwise() {
            gemm(g.o, g.c, l, weight, false, xn, false, dst, false);
        } else {
            let mut col = vec![0.0f32; g.ck() * l];
            im2col(g, xn, &mut col);
            gemm(g.o, g.ck(), l, weight, false, &col, false, dst, false);
        }
        if let Some(b) = bias {
            for (o, row) in dst.chunks_mut(l).enumerate() {
                row.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    });
    out
}

/// Gradient w.r.t. the input.
pub(crate) fn conv2d_backward_input(g: &ConvGeom, weight: &[f32], dout: &[f32]) -> Vec<f32> {
    let l = g.spatial_out();
    let per_in = g.c * g.h * g.w;
    let mut dx = vec![0.0f32; g.n * per_in];
    parallel::for_each_chunk(&mut dx, per_in, |n, dst| {
        let dn = &dout[n * g.o * l..(n + 1) * g.o * l];
        if g.is_pointwise() {
            gemm(g.c, g.o, l, weight, true, dn, false, dst, false);
        } else {
            let mut col = vec![0.0f32; g.ck() * l];
            gemm(g.ck(), g.o, l, weight, true, dn, false, &mut col, false);
            col2im(g, &col, dst);
        }
    });
    dx
}

/// Gradient w.r.t. the weight, reduced over the batch in sample order.
pub(crate) fn conv2d_backward_weight(g: &ConvGeom, x: &[f32], dout: &[f32]) -> Vec<f32> {
    let l = g.spatial_out();
    let per_in = g.c * g.h * g.w;
    let ck = g.ck();
    let partials = parallel::map_range(g.n, |n| {
        let xn = &x[n * per_in..(n + 1) * per_in];
        let dn = &dout[n * g.o * l..(n + 1) * g.o * l];
        let mut dw = vec![0.0f32; g.o * ck];
        if g.is_pointwise() {
            gemm(g.o, l, ck, dn, false, xn, true, &mut dw, false);
        } else {
            let mut col = vec![0.0f32; ck * l];
            im2col(g, xn, &mut col);
            gemm(g.o, l, ck, dn, false, &col, true, &mut dw, false);
        }
        dw
    });
    let mut total = vec![0.0f32; g.o * ck];
    for p in &partials {
        total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
    }
    total
}

pub(crate) fn conv2d_backward_bias(g: &ConvGeom, dout: &[f32]) -> Vec<f32> {
    let l = g.spatial_out();
    let mut db = vec![0.0f64; g.o];
    for n in 0..g.n {
        for (o, acc) in db.iter_mut().enumerate() {
            let base = (n * g.o + o) * l;
            *acc += dout[base..base + l].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    db.into_iter().map(|v| v as f32).collect()
}

/// Group statistics saved by the forward pass.
pub(crate) struct GroupStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// `x` laid out as `[n, c, spatial]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_forward(
    x: &[f32],
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    eps: f64,
    scale: &[f32],
    shift: &[f32],
) -> (Vec<f32>, GroupStats) {
    let cpg = c / groups;
    let gsize = cpg * spatial;
    let mut mean = vec![0.0; n * groups];
    let mut rstd = vec![0.0; n * groups];
    for ng in 0..n * groups {
        let seg = &x[ng * gsize..(ng + 1) * gsize];
        let m = seg.iter().map(|&v| v as f64).sum::<f64>() / gsize as f64;
        let var = seg
            .iter()
            .map(|&v| {
                let d = v as f64 - m;
                d * d
            })
            .sum::<f64>()
            / gsize as f64;
        mean[ng] = m;
        rstd[ng] = 1.0 / (var + eps).sqrt();
    }
    let mut out = vec![0.0f32; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let ng = ni * groups + ci / cpg;
            let base = (ni * c + ci) * spatial;
            let (m, r) = (mean[ng], rstd[ng]);
            let (s, b) = (scale[ci] as f64, shift[ci] as f64);
            for i in base..base + spatial {
                out[i] = (((x[i] as f64 - m) * r) * s + b) as f32;
            }
        }
    }
    (out, GroupStats { mean, rstd })
}

/// Returns `(dx, dscale, dshift)`.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub(crate) fn group_norm_backward(
    x: &[f32],
    dy: &[f32],
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    scale: &[f32],
    stats: &GroupStats,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let cpg = c / groups;
    let gsize = (cpg * spatial) as f64;
    let mut dx = vec![0.0f32; x.len()];
    let mut dscale = vec![0.0f64; c];
    let mut dshift = vec![0.0f64; c];
    for ni in 0..n {
        for gi in 0..groups {
            let ng = ni * groups + gi;
            let (m, r) = (stats.mean[ng], stats.rstd[ng]);
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for ci in gi * cpg..(gi + 1) * cpg {
                let base = (ni * c + ci) * spatial;
                let s = scale[ci] as f64;
                for i in base..base + spatial {
                    let xhat = (x[i] as f64 - m) * r;
                    let d = dy[i] as f64;
                    dscale[ci] += d * xhat;
                    dshift[ci] += d;
                    sum_dxhat += d * s;
                    sum_dxhat_xhat += d * s * xhat;
                }
            }
            let mean_dxhat = sum_dxhat / gsize;
            let mean_dxhat_xhat = sum_dxhat_xhat / gsize;
            for ci in gi * cpg..(gi + 1) * cpg {
                let base = (ni * c + ci) * spatial;
                let s = scale[ci] as f64;
                for i in base..base + spatial {
                    let xhat = (x[i] as f64 - m) * r;
                    let dxhat = dy[i] as f64 * s;
                    dx[i] = (r * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)) as f32;
                }
            }
        }
    }
    (
        dx,
        dscale.into_iter().map(|v| v as f32).collect(),
        dshift.into_iter().map(|v| v as f32).collect(),
    )
}

/// Softmax over the middle axis of an `[outer, len, inner]` layout.
pub(crate) fn softmax_forward(x: &[f32], outer: usize, len: usize, inner: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; x.len()];
    if inner == 1 {
        parallel::for_each_chunk(&mut y, len.max(1), |o, dst| {
            let src = &x[o * len..(o + 1) * len];
            let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for (d, &v) in dst.iter_mut().zip(src) {
                let e = (v - max).exp();
                *d = e;
                sum += e as f64;
            }
            let inv = (1.0 / sum) as f32;
            dst.iter_mut().for_each(|d| *d *= inv);
        });
        return y;
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                y[at(k)] = e;
                sum += e as f64;
            }
            let inv = (1.0 / sum) as f32;
            for k in 0..len {
                y[at(k)] *= inv;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward(
    y: &[f32],
    dy: &[f32],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<f32> {
    let mut dx = vec![0.0f32; y.len()];
    if inner == 1 {
        parallel::for_each_chunk(&mut dx, len.max(1), |o, dst| {
            let ys = &y[o * len..(o + 1) * len];
            let gs = &dy[o * len..(o + 1) * len];
            let dot: f64 = ys.iter().zip(gs).map(|(&a, &b)| a as f64 * b as f64).sum();
            let dot = dot as f32;
            for ((d, &yv), &gv) in dst.iter_mut().zip(ys).zip(gs) {
                *d = yv * (gv - dot);
            }
        });
        return dx;
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len).map(|k| y[at(k)] as f64 * dy[at(k)] as f64).sum();
            let dot = dot as f32;
            for k in 0..len {
                dx[at(k)] = y[at(k)] * (dy[at(k)] - dot);
            }
        }
    }
    dx
}

/// 2×2 stride-2 mean over the two trailing axes of `[planes, h, w]`.
pub(crate) fn avg_pool2(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let a = src[2 * i * w + 2 * j];
                let b = src[2 * i * w + 2 * j + 1];
                let c = src[(2 * i + 1) * w + 2 * j];
                let d = src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * wo + j] = 0.25 * ((a + b) + (c + d));
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(dy: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0f32; planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                dx[p * h * w + i * w + j] = 0.25 * dy[p * ho * wo + (i / 2) * wo + j / 2];
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling over the two trailing axes.
pub(crate) fn upsample2(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h * 2, w * 2);
    let mut out = vec![0.0f32; planes * ho * wo];
    for p in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                out[p * ho * wo + i * wo + j] = x[p * h * w + (i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dy: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h * 2, w * 2);
    let mut dx = vec![0.0f32; planes * h * w];
    for p in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                dx[p * h * w + (i / 2) * w + j / 2] += dy[p * ho * wo + i * wo + j];
            }
        }
    }
    dx
}

/// Row softmax of a `rows×len` block in place.
fn softmax_rows(s: &mut [f32], len: usize) {
    for row in s.chunks_mut(len) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v as f64;
        }
        let inv = (1.0 / sum) as f32;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Scaled dot-product attention over `b` independent heads with channel-major
/// operands `q, k, v: [b, d, l]`. Returns the output `[b, d, l]` and the
/// attention probabilities `[b, l(query), l(key)]`.
pub(crate) fn attention_forward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    b: usize,
    d: usize,
    l: usize,
    scale: f32,
) -> (Vec<f32>, Vec<f32>) {
    let (dl, ll) = (d * l, l * l);
    let parts = parallel::map_range(b, |i| {
        let blk = i * dl..(i + 1) * dl;
        let mut p = vec![0.0f32; ll];
        gemm(l, d, l, &q[blk.clone()], true, &k[blk.clone()], false, &mut p, false);
        p.iter_mut().for_each(|s| *s *= scale);
        softmax_rows(&mut p, l);
        let mut o = vec![0.0f32; dl];
        gemm(d, l, l, &v[blk], false, &p, true, &mut o, false);
        (o, p)
    });
    let mut out = Vec::with_capacity(b * dl);
    let mut probs = Vec::with_capacity(b * ll);
    for (o, p) in parts {
        out.extend(o);
        probs.extend(p);
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv)` of [`attention_forward`] given the saved probabilities.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    dout: &[f32],
    b: usize,
    d: usize,
    l: usize,
    scale: f32,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (dl, ll) = (d * l, l * l);
    let parts = parallel::map_range(b, |i| {
        let blk = i * dl..(i + 1) * dl;
        let p = &probs[i * ll..(i + 1) * ll];
        let go = &dout[blk.clone()];
        let mut dv = vec![0.0f32; dl];
        gemm(d, l, l, go, false, p, false, &mut dv, false);
        // dP = dOᵀ·V, then dS = P ⊙ (dP − rowsum(dP ⊙ P)) · scale.
        let mut ds = vec![0.0f32; ll];
        gemm(l, d, l, go, true, &v[blk.clone()], false, &mut ds, false);
        for (drow, prow) in ds.chunks_mut(l).zip(p.chunks(l)) {
            let dot: f64 = drow.iter().zip(prow).map(|(&a, &b)| a as f64 * b as f64).sum();
            let dot = dot as f32;
            for (x, &pv) in drow.iter_mut().zip(prow) {
                *x = pv * (*x - dot) * scale;
            }
        }
        let mut dq = vec![0.0f32; dl];
        gemm(d, l, l, &k[blk.clone()], false, &ds, true, &mut dq, false);
        let mut dk = vec![0.0f32; dl];
        gemm(d, l, l, &q[blk], false, &ds, false, &mut dk, false);
        (dq, dk, dv)
    });
    let mut dq = Vec::with_capacity(b * dl);
    let mut dk = Vec::with_capacity(b * dl);
    let mut dv = Vec::with_capacity(b * dl);
    for (a, bb, c) in parts {
        dq.extend(a);
        dk.extend(bb);
        dv.extend(c);
    }
    (dq, dk, dv)
}
