//! Pure forward/backward kernels on raw tensors. The autodiff tape delegates
//! to these; nothing here touches the tape.
//!
//! Shape validation happens in the tape layer. Kernels assume shapes were
//! checked and only `debug_assert` them.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// broadcasting
// ---------------------------------------------------------------------------

/// Numpy-style broadcast of two shapes, aligned at the trailing axes.
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::shape(
                op,
                format!("cannot broadcast {:?} with {:?}", a, b),
            ));
        }
    }
    Ok(out)
}

/// Row-major strides of `shape` padded to `rank`, with 0 on broadcast axes.
fn effective_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut padded = vec![1usize; rank];
    padded[offset..].copy_from_slice(shape);
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    strides
}

/// Elementwise binary op with broadcasting.
pub fn ew_binary(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(out_shape.to_vec(), data).expect("equal-shape ew");
    }
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let sa = effective_strides(a.shape(), out_shape);
    let sb = effective_strides(b.shape(), out_shape);
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; numel];

    let inner = out_shape[rank - 1];
    let outer = numel / inner;
    let sa_in = sa[rank - 1];
    let sb_in = sb[rank - 1];
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for row in 0..outer {
        let dst = &mut out[row * inner..(row + 1) * inner];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = f(ad[oa + j * sa_in], bd[ob + j * sb_in]);
        }
        // advance the odometer over leading dims
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("broadcast ew")
}

/// Sum `grad` (shaped `from`) down to `to` by adding over broadcast axes.
pub fn reduce_to_shape(grad: &Tensor, to: &[usize]) -> Tensor {
    if grad.shape() == to {
        return grad.clone();
    }
    let from = grad.shape();
    let rank = from.len();
    let strides = effective_strides(to, from);
    let to_numel: usize = to.iter().product();
    let mut out = vec![0.0; to_numel];
    let gd = grad.data();

    let inner = from[rank - 1];
    let outer = gd.len() / inner;
    let s_in = strides[rank - 1];
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut off = 0usize;
    for row in 0..outer {
        let src = &gd[row * inner..(row + 1) * inner];
        if s_in == 1 {
            for (j, &g) in src.iter().enumerate() {
                out[off + j] += g;
            }
        } else {
            let mut acc = 0.0;
            for &g in src {
                acc += g;
            }
            out[off] += acc;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < from[d] {
                break;
            }
            off -= strides[d] * from[d];
            idx[d] = 0;
        }
    }
    Tensor::new(to.to_vec(), out).expect("reduce_to_shape")
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// c[m,n] += a[m,k] * b[k,n]
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (b stored row-major as [n,k])
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// c[m,n] += a[k,m]^T * b[k,n]  (a stored row-major as [k,m])
pub fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// Batched matmul: equal leading dims, or a plain 2D rhs shared across the
/// batch. Returns the output shape alongside validation.
pub fn matmul_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(op, format!("matmul needs rank >= 2, got {:?} x {:?}", a, b)));
    }
    let ka = a[a.len() - 1];
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if ka != kb {
        return Err(Error::shape(
            op,
            format!("inner dims differ: {:?} x {:?}", a, b),
        ));
    }
    if b.len() == 2 {
        let mut out = a.to_vec();
        let l = out.len();
        out[l - 1] = n;
        return Ok(out);
    }
    if a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(Error::shape(
            op,
            format!("batch dims differ: {:?} x {:?}", a, b),
        ));
    }
    let mut out = a.to_vec();
    let l = out.len();
    out[l - 1] = n;
    Ok(out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out_shape = matmul_shapes("matmul", a.shape(), b.shape())?;
    let m = a.shape()[a.rank() - 2];
    let k = a.shape()[a.rank() - 1];
    let n = b.shape()[b.rank() - 1];
    let batch: usize = a.shape()[..a.rank() - 2].iter().product();
    let b_shared = b.rank() == 2;
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let asl = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bsl = if b_shared {
            b.data()
        } else {
            &b.data()[bi * k * n..(bi + 1) * k * n]
        };
        mm_nn(asl, bsl, m, k, n, &mut out[bi * m * n..(bi + 1) * m * n]);
    }
    Tensor::new(out_shape, out)
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn unit(pad: usize) -> Self {
        ConvSpec {
            stride: 1,
            pad,
            dilation: 1,
            groups: 1,
        }
    }
}

pub fn conv2d_out_dims(h: usize, w: usize, kh: usize, kw: usize, sp: &ConvSpec) -> Result<(usize, usize)> {
    let ekh = sp.dilation * (kh - 1) + 1;
    let ekw = sp.dilation * (kw - 1) + 1;
    if h + 2 * sp.pad < ekh || w + 2 * sp.pad < ekw {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel {}x{} (dilation {}) does not fit {}x{} input with pad {}",
                kh, kw, sp.dilation, h, w, sp.pad
            ),
        ));
    }
    Ok(((h + 2 * sp.pad - ekh) / sp.stride + 1, (w + 2 * sp.pad - ekw) / sp.stride + 1))
}

/// Valid output range [lo, hi) along one spatial dim for a kernel tap, such
/// that the corresponding input index stays in bounds.
#[inline]
fn tap_range(out_len: usize, in_len: usize, tap: isize, stride: usize) -> (usize, usize) {
    // input index = out*stride + tap, require 0 <= idx < in_len
    let s = stride as isize;
    let lo = if tap >= 0 { 0 } else { (-tap + s - 1) / s };
    let hi_excl = ((in_len as isize - 1 - tap).div_euclid(s) + 1).clamp(0, out_len as isize);
    let lo = lo.clamp(0, out_len as isize);
    (lo as usize, hi_excl.max(lo) as usize)
}

/// Copy a [rows, width] matrix into one with `left`/`right` zero columns
/// added, so kernel-tap windows never leave the row. Trades one streaming
/// copy per conv call for branch-free fused inner loops.
fn pad_rows(src: &[f64], rows: usize, width: usize, left: usize, right: usize) -> Vec<f64> {
    let pw = width + left + right;
    let mut out = vec![0.0f64; rows * pw];
    for r in 0..rows {
        out[r * pw + left..r * pw + left + width]
            .copy_from_slice(&src[r * width..(r + 1) * width]);
    }
    out
}

/// Scalar edge handling of dst[j] += sum_k w[k] * src[j + off[k]].
#[inline(always)]
fn taps_update_one(dst: &mut [f64], src: &[f64], w: &[f64], offs: &[isize], j: usize) {
    let sn = src.len() as isize;
    let mut acc = dst[j];
    for (wk, &off) in w.iter().zip(offs.iter()) {
        let s = j as isize + off;
        if s >= 0 && s < sn {
            acc += wk * src[s as usize];
        }
    }
    dst[j] = acc;
}

#[inline(always)]
fn update1(dst: &mut [f64], s0: &[f64], w: &[f64]) {
    let w0 = w[0];
    for (d, a) in dst.iter_mut().zip(s0) {
        *d += w0 * a;
    }
}

#[inline(always)]
fn update3(dst: &mut [f64], s0: &[f64], s1: &[f64], s2: &[f64], w: &[f64]) {
    let (w0, w1, w2) = (w[0], w[1], w[2]);
    for (d, ((a, b), c)) in dst.iter_mut().zip(s0.iter().zip(s1).zip(s2)) {
        *d += w0 * a + w1 * b + w2 * c;
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn update5(dst: &mut [f64], s0: &[f64], s1: &[f64], s2: &[f64], s3: &[f64], s4: &[f64], w: &[f64]) {
    let (w0, w1, w2, w3, w4) = (w[0], w[1], w[2], w[3], w[4]);
    for (d, ((((a, b), c), e), f)) in dst
        .iter_mut()
        .zip(s0.iter().zip(s1).zip(s2).zip(s3).zip(s4))
    {
        *d += w0 * a + w1 * b + w2 * c + w3 * e + w4 * f;
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn update7(
    dst: &mut [f64],
    s0: &[f64],
    s1: &[f64],
    s2: &[f64],
    s3: &[f64],
    s4: &[f64],
    s5: &[f64],
    s6: &[f64],
    w: &[f64],
) {
    let (w0, w1, w2, w3, w4, w5, w6) = (w[0], w[1], w[2], w[3], w[4], w[5], w[6]);
    for (d, ((((((a, b), c), e), f), g), h)) in dst
        .iter_mut()
        .zip(s0.iter().zip(s1).zip(s2).zip(s3).zip(s4).zip(s5).zip(s6))
    {
        *d += w0 * a + w1 * b + w2 * c + w3 * e + w4 * f + w5 * g + w6 * h;
    }
}

#[inline(always)]
fn update1_2(d0: &mut [f64], d1: &mut [f64], s0: &[f64], wa: &[f64], wb: &[f64]) {
    let (a0, b0) = (wa[0], wb[0]);
    for ((d0, d1), x) in d0.iter_mut().zip(d1.iter_mut()).zip(s0) {
        *d0 += a0 * x;
        *d1 += b0 * x;
    }
}

#[inline(always)]
fn update3_2(
    d0: &mut [f64],
    d1: &mut [f64],
    s0: &[f64],
    s1: &[f64],
    s2: &[f64],
    wa: &[f64],
    wb: &[f64],
) {
    let (a0, a1, a2) = (wa[0], wa[1], wa[2]);
    let (b0, b1, b2) = (wb[0], wb[1], wb[2]);
    for ((d0, d1), ((x, y), z)) in d0
        .iter_mut()
        .zip(d1.iter_mut())
        .zip(s0.iter().zip(s1).zip(s2))
    {
        *d0 += a0 * x + a1 * y + a2 * z;
        *d1 += b0 * x + b1 * y + b2 * z;
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn update5_2(
    d0: &mut [f64],
    d1: &mut [f64],
    s0: &[f64],
    s1: &[f64],
    s2: &[f64],
    s3: &[f64],
    s4: &[f64],
    wa: &[f64],
    wb: &[f64],
) {
    let (a0, a1, a2, a3, a4) = (wa[0], wa[1], wa[2], wa[3], wa[4]);
    let (b0, b1, b2, b3, b4) = (wb[0], wb[1], wb[2], wb[3], wb[4]);
    for ((d0, d1), ((((x, y), z), u), v)) in d0
        .iter_mut()
        .zip(d1.iter_mut())
        .zip(s0.iter().zip(s1).zip(s2).zip(s3).zip(s4))
    {
        *d0 += a0 * x + a1 * y + a2 * z + a3 * u + a4 * v;
        *d1 += b0 * x + b1 * y + b2 * z + b3 * u + b4 * v;
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn update7_2(
    d0: &mut [f64],
    d1: &mut [f64],
    s0: &[f64],
    s1: &[f64],
    s2: &[f64],
    s3: &[f64],
    s4: &[f64],
    s5: &[f64],
    s6: &[f64],
    wa: &[f64],
    wb: &[f64],
) {
    let (a0, a1, a2, a3, a4, a5, a6) = (wa[0], wa[1], wa[2], wa[3], wa[4], wa[5], wa[6]);
    let (b0, b1, b2, b3, b4, b5, b6) = (wb[0], wb[1], wb[2], wb[3], wb[4], wb[5], wb[6]);
    for ((d0, d1), ((((((x, y), z), u), v), p), q)) in d0
        .iter_mut()
        .zip(d1.iter_mut())
        .zip(s0.iter().zip(s1).zip(s2).zip(s3).zip(s4).zip(s5).zip(s6))
    {
        *d0 += a0 * x + a1 * y + a2 * z + a3 * u + a4 * v + a5 * p + a6 * q;
        *d1 += b0 * x + b1 * y + b2 * z + b3 * u + b4 * v + b5 * p + b6 * q;
    }
}

/// dst[j] += sum_k w[k] * src[j + off[k]] with a precomputed middle region
/// [lo, hi) where every tap is in bounds (see `taps_mid`); edges run scalar,
/// the middle runs fused and vectorized.
#[inline(always)]
fn row_taps_update(dst: &mut [f64], src: &[f64], w: &[f64], offs: &[isize], lo: usize, hi: usize) {
    for j in 0..lo {
        taps_update_one(dst, src, w, offs, j);
    }
    for j in hi..dst.len() {
        taps_update_one(dst, src, w, offs, j);
    }
    if lo >= hi {
        return;
    }
    let mid = hi - lo;
    let sl = |k: usize| {
        let s = (lo as isize + offs[k]) as usize;
        &src[s..s + mid]
    };
    let dmid = &mut dst[lo..hi];
    match w.len() {
        1 => update1(dmid, sl(0), w),
        3 => update3(dmid, sl(0), sl(1), sl(2), w),
        5 => update5(dmid, sl(0), sl(1), sl(2), sl(3), sl(4), w),
        7 => update7(dmid, sl(0), sl(1), sl(2), sl(3), sl(4), sl(5), sl(6), w),
        _ => {
            for k in 0..w.len() {
                update1(dmid, sl(k), &w[k..k + 1]);
            }
        }
    }
}

/// Same as `row_taps_update` for two output rows sharing the source taps.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn row_taps_update2(
    d0: &mut [f64],
    d1: &mut [f64],
    src: &[f64],
    wa: &[f64],
    wb: &[f64],
    offs: &[isize],
    lo: usize,
    hi: usize,
) {
    for j in 0..lo {
        taps_update_one(d0, src, wa, offs, j);
        taps_update_one(d1, src, wb, offs, j);
    }
    for j in hi..d0.len() {
        taps_update_one(d0, src, wa, offs, j);
        taps_update_one(d1, src, wb, offs, j);
    }
    if lo >= hi {
        return;
    }
    let mid = hi - lo;
    let sl = |k: usize| {
        let s = (lo as isize + offs[k]) as usize;
        &src[s..s + mid]
    };
    let (m0, m1) = (&mut d0[lo..hi], &mut d1[lo..hi]);
    match wa.len() {
        1 => update1_2(m0, m1, sl(0), wa, wb),
        3 => update3_2(m0, m1, sl(0), sl(1), sl(2), wa, wb),
        5 => update5_2(m0, m1, sl(0), sl(1), sl(2), sl(3), sl(4), wa, wb),
        7 => update7_2(m0, m1, sl(0), sl(1), sl(2), sl(3), sl(4), sl(5), sl(6), wa, wb),
        _ => {
            for k in 0..wa.len() {
                update1_2(m0, m1, sl(k), &wa[k..k + 1], &wb[k..k + 1]);
            }
        }
    }
}

const DOT_LANES: usize = 8;

/// Lane-unrolled dot product; plain zip reductions do not vectorize because
/// rustc will not reassociate float adds.
#[inline(always)]
fn dot_unrolled(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; DOT_LANES];
    let chunks = a.len() / DOT_LANES;
    for i in 0..chunks {
        let ac = &a[i * DOT_LANES..(i + 1) * DOT_LANES];
        let bc = &b[i * DOT_LANES..(i + 1) * DOT_LANES];
        for l in 0..DOT_LANES {
            acc[l] += ac[l] * bc[l];
        }
    }
    let mut s = 0.0;
    for l in 0..DOT_LANES {
        s += acc[l];
    }
    for j in chunks * DOT_LANES..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// dots[k] += sum_j g[j] * x[j + off[k]] with a precomputed middle region.
#[inline(always)]
fn row_taps_dots(g: &[f64], x: &[f64], offs: &[isize], dots: &mut [f64], lo: usize, hi: usize) {
    let xn = x.len() as isize;
    let edge = |j: usize, dots: &mut [f64]| {
        for (dk, &off) in dots.iter_mut().zip(offs.iter()) {
            let s = j as isize + off;
            if s >= 0 && s < xn {
                *dk += g[j] * x[s as usize];
            }
        }
    };
    for j in 0..lo {
        edge(j, dots);
    }
    for j in hi..g.len() {
        edge(j, dots);
    }
    if lo >= hi {
        return;
    }
    let mid = hi - lo;
    let gmid = &g[lo..hi];
    for (k, dk) in dots.iter_mut().enumerate() {
        let s = (lo as isize + offs[k]) as usize;
        *dk += dot_unrolled(gmid, &x[s..s + mid]);
    }
}

pub fn conv2d_fwd(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, sp: &ConvSpec) -> Result<Tensor> {
    let (n, ci, h, wd) = nchw(x);
    let ws = w.shape();
    let (co, cig, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (ho, wo) = conv2d_out_dims(h, wd, kh, kw, sp)?;
    let g = sp.groups;
    let cog = co / g;
    let mut out = vec![0.0; n * co * ho * wo];
    let xd = x.data();
    let wdata = w.data();
    let bd = bias.map(|b| b.data());

    if sp.stride == 1 {
        // Zero-pad every x row once so the kw-tap windows never leave it,
        // then accumulate two output channels per pass: each padded x row
        // load feeds both, full output rows build in local buffers and are
        // written exactly once, with all kw taps fused and branch-free.
        let pw = wd + 2 * sp.pad;
        let xpad = pad_rows(xd, n * ci * h, wd, sp.pad, sp.pad);
        let offs: Vec<isize> = (0..kw).map(|kwi| (kwi * sp.dilation) as isize).collect();
        let mut acc0 = vec![0.0f64; wo];
        let mut acc1 = vec![0.0f64; wo];
        for ni in 0..n {
            for gi in 0..g {
                let mut col = 0;
                while col < cog {
                    let dual = col + 1 < cog;
                    let c0 = gi * cog + col;
                    let c1 = if dual { c0 + 1 } else { c0 };
                    let b0 = bd.map_or(0.0, |b| b[c0]);
                    let b1 = bd.map_or(0.0, |b| b[c1]);
                    for oh in 0..ho {
                        acc0.fill(b0);
                        if dual {
                            acc1.fill(b1);
                        }
                        for cil in 0..cig {
                            let c_in = gi * cig + cil;
                            let x_ch = ((ni * ci) + c_in) * h * pw;
                            for khi in 0..kh {
                                let ih = oh as isize + (khi * sp.dilation) as isize - sp.pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let x_row = &xpad[x_ch + ih as usize * pw..x_ch + (ih as usize + 1) * pw];
                                let w0 = ((c0 * cig + cil) * kh + khi) * kw;
                                let wa = &wdata[w0..w0 + kw];
                                if dual {
                                    let w1 = ((c1 * cig + cil) * kh + khi) * kw;
                                    let wb = &wdata[w1..w1 + kw];
                                    row_taps_update2(&mut acc0, &mut acc1, x_row, wa, wb, &offs, 0, wo);
                                } else {
                                    row_taps_update(&mut acc0, x_row, wa, &offs, 0, wo);
                                }
                            }
                        }
                        let o0 = ((ni * co) + c0) * ho * wo + oh * wo;
                        out[o0..o0 + wo].copy_from_slice(&acc0);
                        if dual {
                            let o1 = ((ni * co) + c1) * ho * wo + oh * wo;
                            out[o1..o1 + wo].copy_from_slice(&acc1);
                        }
                    }
                    col += 2;
                }
            }
        }
        return Tensor::new(vec![n, co, ho, wo], out);
    }
    if let Some(bd) = bd {
        for ni in 0..n {
            for c in 0..co {
                let base = ((ni * co) + c) * ho * wo;
                out[base..base + ho * wo].fill(bd[c]);
            }
        }
    }
    for ni in 0..n {
        for gi in 0..g {
            for col in 0..cog {
                let c_out = gi * cog + col;
                let out_ch = ((ni * co) + c_out) * ho * wo;
                for cil in 0..cig {
                    let c_in = gi * cig + cil;
                    let x_ch = ((ni * ci) + c_in) * h * wd;
                    for khi in 0..kh {
                        let tap_h = (khi * sp.dilation) as isize - sp.pad as isize;
                        let (oh_lo, oh_hi) = tap_range(ho, h, tap_h, sp.stride);
                        for kwi in 0..kw {
                            let wv = wdata[(((c_out * cig) + cil) * kh + khi) * kw + kwi];
                            if wv == 0.0 {
                                continue;
                            }
                            let tap_w = (kwi * sp.dilation) as isize - sp.pad as isize;
                            let (ow_lo, ow_hi) = tap_range(wo, wd, tap_w, sp.stride);
                            for oh in oh_lo..oh_hi {
                                let ih = (oh * sp.stride) as isize + tap_h;
                                let x_row = x_ch + ih as usize * wd;
                                let o_row = out_ch + oh * wo;
                                for ow in ow_lo..ow_hi {
                                    let iw = (ow * sp.stride) as isize + tap_w;
                                    out[o_row + ow] += wv * xd[x_row + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, ho, wo], out)
}

/// Gradients of conv2d wrt input, weights and bias.
pub fn conv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    sp: &ConvSpec,
    grad: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (n, ci, h, wd) = nchw(x);
    let ws = w.shape();
    let (co, cig, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let gs = grad.shape();
    let (ho, wo) = (gs[2], gs[3]);
    let g = sp.groups;
    let cog = co / g;

    let xd = x.data();
    let wdata = w.data();
    let gd = grad.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wdata.len()];

    let db = if has_bias {
        let mut db = vec![0.0; co];
        for ni in 0..n {
            for c in 0..co {
                let base = ((ni * co) + c) * ho * wo;
                let mut acc = 0.0;
                for &gv in &gd[base..base + ho * wo] {
                    acc += gv;
                }
                db[c] += acc;
            }
        }
        Some(Tensor::new(vec![co], db).expect("conv bias grad"))
    } else {
        None
    };

    let ekw = sp.dilation * (kw - 1) + 1;
    if sp.stride == 1 && sp.pad < ekw {
        // dx pass, mirror of the forward: grad rows are zero-padded once so
        // every tap window is in bounds, then pairs of input channels
        // accumulate full dx rows (dx[iw] += w[kw] * g[iw - tap_w]) written
        // exactly once
        let l = ekw - 1 - sp.pad;
        let gpw = wo + 2 * l;
        let gpad = pad_rows(gd, n * co * ho, wo, l, l);
        let dx_offs: Vec<isize> = (0..kw)
            .map(|kwi| (ekw - 1 - kwi * sp.dilation) as isize)
            .collect();
        let mut acc0 = vec![0.0f64; wd];
        let mut acc1 = vec![0.0f64; wd];
        for ni in 0..n {
            for gi in 0..g {
                let mut cil = 0;
                while cil < cig {
                    let dual = cil + 1 < cig;
                    let ci0 = gi * cig + cil;
                    let ci1 = if dual { ci0 + 1 } else { ci0 };
                    for ih in 0..h {
                        acc0.fill(0.0);
                        if dual {
                            acc1.fill(0.0);
                        }
                        for col in 0..cog {
                            let c_out = gi * cog + col;
                            let g_ch = ((ni * co) + c_out) * ho * gpw;
                            for khi in 0..kh {
                                let oh = ih as isize - ((khi * sp.dilation) as isize - sp.pad as isize);
                                if oh < 0 || oh >= ho as isize {
                                    continue;
                                }
                                let g_row = &gpad[g_ch + oh as usize * gpw..g_ch + (oh as usize + 1) * gpw];
                                let w0 = ((c_out * cig + cil) * kh + khi) * kw;
                                let wa = &wdata[w0..w0 + kw];
                                if dual {
                                    let w1 = ((c_out * cig + cil + 1) * kh + khi) * kw;
                                    let wb = &wdata[w1..w1 + kw];
                                    row_taps_update2(&mut acc0, &mut acc1, g_row, wa, wb, &dx_offs, 0, wd);
                                } else {
                                    row_taps_update(&mut acc0, g_row, wa, &dx_offs, 0, wd);
                                }
                            }
                        }
                        let r0 = ((ni * ci) + ci0) * h * wd + ih * wd;
                        dx[r0..r0 + wd].copy_from_slice(&acc0);
                        if dual {
                            let r1 = ((ni * ci) + ci1) * h * wd + ih * wd;
                            dx[r1..r1 + wd].copy_from_slice(&acc1);
                        }
                    }
                    cil += 2;
                }
            }
        }

        // dw pass: kw-fused unrolled dot products of g rows against padded
        // x rows
        let pw = wd + 2 * sp.pad;
        let xpad = pad_rows(xd, n * ci * h, wd, sp.pad, sp.pad);
        let dw_offs: Vec<isize> = (0..kw).map(|kwi| (kwi * sp.dilation) as isize).collect();
        for ni in 0..n {
            for gi in 0..g {
                for col in 0..cog {
                    let c_out = gi * cog + col;
                    let g_ch = ((ni * co) + c_out) * ho * wo;
                    for cil in 0..cig {
                        let c_in = gi * cig + cil;
                        let x_ch = ((ni * ci) + c_in) * h * pw;
                        for khi in 0..kh {
                            let tap_h = (khi * sp.dilation) as isize - sp.pad as isize;
                            let (oh_lo, oh_hi) = tap_range(ho, h, tap_h, 1);
                            let w_row = ((c_out * cig + cil) * kh + khi) * kw;
                            for oh in oh_lo..oh_hi {
                                let ih = (oh as isize + tap_h) as usize;
                                let g_row = &gd[g_ch + oh * wo..g_ch + (oh + 1) * wo];
                                let x_row = &xpad[x_ch + ih * pw..x_ch + (ih + 1) * pw];
                                let dw_row = &mut dw[w_row..w_row + kw];
                                row_taps_dots(g_row, x_row, &dw_offs, dw_row, 0, wo);
                            }
                        }
                    }
                }
            }
        }
    } else {
        for ni in 0..n {
            for gi in 0..g {
                for col in 0..cog {
                    let c_out = gi * cog + col;
                    let g_ch = ((ni * co) + c_out) * ho * wo;
                    for cil in 0..cig {
                        let c_in = gi * cig + cil;
                        let x_ch = ((ni * ci) + c_in) * h * wd;
                        for khi in 0..kh {
                            let tap_h = (khi * sp.dilation) as isize - sp.pad as isize;
                            let (oh_lo, oh_hi) = tap_range(ho, h, tap_h, sp.stride);
                            for kwi in 0..kw {
                                let widx = (((c_out * cig) + cil) * kh + khi) * kw + kwi;
                                let wv = wdata[widx];
                                let tap_w = (kwi * sp.dilation) as isize - sp.pad as isize;
                                let (ow_lo, ow_hi) = tap_range(wo, wd, tap_w, sp.stride);
                                if ow_lo >= ow_hi {
                                    continue;
                                }
                                let mut wacc = 0.0;
                                for oh in oh_lo..oh_hi {
                                    let ih = (oh * sp.stride) as isize + tap_h;
                                    let x_row = x_ch + ih as usize * wd;
                                    let g_row = g_ch + oh * wo;
                                    for ow in ow_lo..ow_hi {
                                        let iw = ((ow * sp.stride) as isize + tap_w) as usize;
                                        let gv = gd[g_row + ow];
                                        wacc += gv * xd[x_row + iw];
                                        dx[x_row + iw] += wv * gv;
                                    }
                                }
                                dw[widx] += wacc;
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("conv dx"),
        Tensor::new(w.shape().to_vec(), dw).expect("conv dw"),
        db,
    )
}

// ---------------------------------------------------------------------------
// transposed conv 2x2 stride 2
// ---------------------------------------------------------------------------

/// Transposed convolution with a fixed 2x2 kernel and stride 2. Exactly
/// doubles H and W. Weight layout [Ci, Co, 2, 2].
pub fn conv_transpose2d_fwd(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, ci, h, wd) = nchw(x);
    let ws = w.shape();
    let co = ws[1];
    let (ho, wo) = (2 * h, 2 * wd);
    let mut out = vec![0.0; n * co * ho * wo];
    if let Some(b) = bias {
        let bd = b.data();
        for ni in 0..n {
            for c in 0..co {
                let base = ((ni * co) + c) * ho * wo;
                out[base..base + ho * wo].fill(bd[c]);
            }
        }
    }
    let xd = x.data();
    let wdt = w.data();
    for ni in 0..n {
        for c_in in 0..ci {
            let x_ch = ((ni * ci) + c_in) * h * wd;
            for c_out in 0..co {
                let o_ch = ((ni * co) + c_out) * ho * wo;
                for kh in 0..2 {
                    for kw in 0..2 {
                        let wv = wdt[(((c_in * co) + c_out) * 2 + kh) * 2 + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        for ih in 0..h {
                            let x_row = x_ch + ih * wd;
                            let o_row = o_ch + (2 * ih + kh) * wo + kw;
                            for iw in 0..wd {
                                out[o_row + 2 * iw] += wv * xd[x_row + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, ho, wo], out)
}

pub fn conv_transpose2d_bwd(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    grad: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (n, ci, h, wd) = nchw(x);
    let ws = w.shape();
    let co = ws[1];
    let gs = grad.shape();
    let (ho, wo) = (gs[2], gs[3]);
    let xd = x.data();
    let wdt = w.data();
    let gd = grad.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wdt.len()];
    let db = if has_bias {
        let mut db = vec![0.0; co];
        for ni in 0..n {
            for c in 0..co {
                let base = ((ni * co) + c) * ho * wo;
                let mut acc = 0.0;
                for &gv in &gd[base..base + ho * wo] {
                    acc += gv;
                }
                db[c] += acc;
            }
        }
        Some(Tensor::new(vec![co], db).expect("convT bias grad"))
    } else {
        None
    };
    for ni in 0..n {
        for c_in in 0..ci {
            let x_ch = ((ni * ci) + c_in) * h * wd;
            for c_out in 0..co {
                let g_ch = ((ni * co) + c_out) * ho * wo;
                for kh in 0..2 {
                    for kw in 0..2 {
                        let widx = (((c_in * co) + c_out) * 2 + kh) * 2 + kw;
                        let wv = wdt[widx];
                        let mut wacc = 0.0;
                        for ih in 0..h {
                            let x_row = x_ch + ih * wd;
                            let g_row = g_ch + (2 * ih + kh) * wo + kw;
                            for iw in 0..wd {
                                let gv = gd[g_row + 2 * iw];
                                wacc += gv * xd[x_row + iw];
                                dx[x_row + iw] += wv * gv;
                            }
                        }
                        dw[widx] += wacc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("convT dx"),
        Tensor::new(w.shape().to_vec(), dw).expect("convT dw"),
        db,
    )
}

// ---------------------------------------------------------------------------
// max pooling 2x2 stride 2
// ---------------------------------------------------------------------------

/// 2x2 max pooling with stride 2. H and W must be even. Returns the output
/// and the flat input index of each selected maximum (first winner on ties).
pub fn maxpool2d_fwd(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = nchw(x);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2d",
            format!("spatial dims must be even, got {}x{}", h, w),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    let mut arg = vec![0u32; n * c * ho * wo];
    for nc in 0..n * c {
        let x_ch = nc * h * w;
        let o_ch = nc * ho * wo;
        for oh in 0..ho {
            for ow in 0..wo {
                let base = x_ch + 2 * oh * w + 2 * ow;
                let cands = [base, base + 1, base + w, base + w + 1];
                let mut best = cands[0];
                let mut bv = xd[best];
                for &cand in &cands[1..] {
                    if xd[cand] > bv {
                        bv = xd[cand];
                        best = cand;
                    }
                }
                out[o_ch + oh * wo + ow] = bv;
                arg[o_ch + oh * wo + ow] = best as u32;
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

pub fn maxpool2d_bwd(x_shape: &[usize], argmax: &[u32], grad: &Tensor) -> Tensor {
    let mut dx = vec![0.0; x_shape.iter().product()];
    for (&a, &g) in argmax.iter().zip(grad.data().iter()) {
        dx[a as usize] += g;
    }
    Tensor::new(x_shape.to_vec(), dx).expect("maxpool dx")
}

// ---------------------------------------------------------------------------
// softmax (optionally masked)
// ---------------------------------------------------------------------------

/// Stable softmax along `axis`. `mask` (1 keep / 0 drop) must be a row-major
/// suffix of x's shape (it repeats over the leading axes); masked entries
/// come out exactly 0 and are excluded from the normalization.
pub fn softmax_fwd(x: &Tensor, axis: usize, mask: Option<&Tensor>) -> Result<Tensor> {
    let shape = x.shape();
    let a = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let xd = x.data();
    let md = mask.map(|m| m.data());
    let mlen = md.map_or(0, |m| m.len());
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * a * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..a {
                let f = base + j * inner;
                if keep(md, mlen, f) {
                    mx = mx.max(xd[f]);
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::Numerical(
                    "softmax: every entry of a lane is masked out".into(),
                ));
            }
            let mut z = 0.0;
            for j in 0..a {
                let f = base + j * inner;
                if keep(md, mlen, f) {
                    let e = (xd[f] - mx).exp();
                    out[f] = e;
                    z += e;
                }
            }
            for j in 0..a {
                let f = base + j * inner;
                out[f] /= z;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

#[inline]
fn keep(mask: Option<&[f64]>, mlen: usize, flat: usize) -> bool {
    match mask {
        None => true,
        Some(m) => m[flat % mlen] > 0.5,
    }
}

/// dx_j = s_j * (g_j - sum_k g_k s_k); masked entries have s_j = 0.
pub fn softmax_bwd(out: &Tensor, grad: &Tensor, axis: usize) -> Tensor {
    let shape = out.shape();
    let a = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let sd = out.data();
    let gd = grad.data();
    let mut dx = vec![0.0; sd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * a * inner + i;
            let mut dot = 0.0;
            for j in 0..a {
                let f = base + j * inner;
                dot += gd[f] * sd[f];
            }
            for j in 0..a {
                let f = base + j * inner;
                dx[f] = sd[f] * (gd[f] - dot);
            }
        }
    }
    Tensor::new(shape.to_vec(), dx).expect("softmax dx")
}

// ---------------------------------------------------------------------------
// layer norm over the last axis
// ---------------------------------------------------------------------------

pub fn layernorm_fwd(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
    let d = *x.shape().last().unwrap();
    let xd = x.data();
    let gd = gain.data();
    let bd = bias.data();
    let mut out = vec![0.0; xd.len()];
    for lane in 0..xd.len() / d {
        let s = &xd[lane * d..(lane + 1) * d];
        let mean = s.iter().sum::<f64>() / d as f64;
        let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let o = &mut out[lane * d..(lane + 1) * d];
        for j in 0..d {
            o[j] = (s[j] - mean) * inv * gd[j] + bd[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("layernorm")
}

pub fn layernorm_bwd(
    x: &Tensor,
    gain: &Tensor,
    eps: f64,
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = *x.shape().last().unwrap();
    let xd = x.data();
    let gd = gain.data();
    let grd = grad.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let df = d as f64;
    for lane in 0..xd.len() / d {
        let s = &xd[lane * d..(lane + 1) * d];
        let g = &grd[lane * d..(lane + 1) * d];
        let mean = s.iter().sum::<f64>() / df;
        let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
        let inv = 1.0 / (var + eps).sqrt();
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let xhat = (s[j] - mean) * inv;
            dgain[j] += g[j] * xhat;
            dbias[j] += g[j];
            let dxhat = g[j] * gd[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        let o = &mut dx[lane * d..(lane + 1) * d];
        for j in 0..d {
            let xhat = (s[j] - mean) * inv;
            let dxhat = g[j] * gd[j];
            o[j] = inv * (dxhat - sum_dxhat / df - xhat * sum_dxhat_xhat / df);
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("ln dx"),
        Tensor::new(vec![d], dgain).expect("ln dgain"),
        Tensor::new(vec![d], dbias).expect("ln dbias"),
    )
}

// ---------------------------------------------------------------------------
// batch norm (NCHW, per channel)
// ---------------------------------------------------------------------------

/// Per-channel mean and biased variance over (N, H, W).
pub fn batch_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = nchw(x);
    let m = (n * h * w) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = ((ni * c) + ci) * h * w;
            let mut acc = 0.0;
            for &v in &xd[base..base + h * w] {
                acc += v;
            }
            mean[ci] += acc;
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for ni in 0..n {
        for ci in 0..c {
            let base = ((ni * c) + ci) * h * w;
            let mu = mean[ci];
            let mut acc = 0.0;
            for &v in &xd[base..base + h * w] {
                acc += (v - mu) * (v - mu);
            }
            var[ci] += acc;
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    (mean, var)
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, per channel.
pub fn batchnorm_apply(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Tensor {
    let (n, c, h, w) = nchw(x);
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![0.0; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + eps).sqrt();
            let scale = gd[ci] * inv;
            let shift = bd[ci] - mean[ci] * scale;
            let base = ((ni * c) + ci) * h * w;
            for (o, &v) in out[base..base + h * w].iter_mut().zip(&xd[base..base + h * w]) {
                *o = v * scale + shift;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("batchnorm")
}

/// Backward for training mode (stats are functions of x).
pub fn batchnorm_bwd_train(
    x: &Tensor,
    gamma: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = nchw(x);
    let m = (n * h * w) as f64;
    let xd = x.data();
    let gd = grad.data();
    let gam = gamma.data();
    let mut sum_g = vec![0.0; c];
    let mut sum_g_xhat = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + eps).sqrt();
            let base = ((ni * c) + ci) * h * w;
            let mut a = 0.0;
            let mut b = 0.0;
            for j in base..base + h * w {
                a += gd[j];
                b += gd[j] * (xd[j] - mean[ci]) * inv;
            }
            sum_g[ci] += a;
            sum_g_xhat[ci] += b;
        }
    }
    let mut dx = vec![0.0; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + eps).sqrt();
            let k = gam[ci] * inv;
            let mg = sum_g[ci] / m;
            let mgx = sum_g_xhat[ci] / m;
            let base = ((ni * c) + ci) * h * w;
            for j in base..base + h * w {
                let xhat = (xd[j] - mean[ci]) * inv;
                dx[j] = k * (gd[j] - mg - xhat * mgx);
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("bn dx"),
        Tensor::new(vec![c], sum_g_xhat).expect("bn dgamma"),
        Tensor::new(vec![c], sum_g).expect("bn dbeta"),
    )
}

/// Backward for eval mode (stats are constants).
pub fn batchnorm_bwd_eval(
    x: &Tensor,
    gamma: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = nchw(x);
    let xd = x.data();
    let gd = grad.data();
    let gam = gamma.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + eps).sqrt();
            let k = gam[ci] * inv;
            let base = ((ni * c) + ci) * h * w;
            for j in base..base + h * w {
                dx[j] = gd[j] * k;
                dgamma[ci] += gd[j] * (xd[j] - mean[ci]) * inv;
                dbeta[ci] += gd[j];
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("bn dx"),
        Tensor::new(vec![c], dgamma).expect("bn dgamma"),
        Tensor::new(vec![c], dbeta).expect("bn dbeta"),
    )
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

/// Shape after summing `axes` (ignoring keepdim squeezing).
pub fn reduced_shape(shape: &[usize], axes: &[usize], keepdim: bool) -> Vec<usize> {
    let mut out = Vec::new();
    for (d, &s) in shape.iter().enumerate() {
        if axes.contains(&d) {
            if keepdim {
                out.push(1);
            }
        } else {
            out.push(s);
        }
    }
    if out.is_empty() {
        out.push(1);
    }
    out
}

pub fn sum_axes(x: &Tensor, axes: &[usize], keepdim: bool) -> Tensor {
    let shape = x.shape();
    let kshape: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(d, &s)| if axes.contains(&d) { 1 } else { s })
        .collect();
    let out = reduce_to_shape(x, &kshape);
    let final_shape = reduced_shape(shape, axes, keepdim);
    out.reshaped(&final_shape).expect("sum reshape")
}

/// Broadcast a reduced gradient back over the summed axes.
pub fn sum_axes_bwd(grad: &Tensor, x_shape: &[usize], axes: &[usize]) -> Tensor {
    let kshape: Vec<usize> = x_shape
        .iter()
        .enumerate()
        .map(|(d, &s)| if axes.contains(&d) { 1 } else { s })
        .collect();
    let g = grad.reshaped(&kshape).expect("sum grad reshape");
    let ones = Tensor::zeros(x_shape);
    ew_binary(&ones, &g, x_shape, |_, b| b)
}

// ---------------------------------------------------------------------------
// layout ops
// ---------------------------------------------------------------------------

pub fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    let rank = shape.len();
    debug_assert_eq!(perm.len(), rank);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = x.strides();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = x.numel();
    let xd = x.data();
    let mut out = vec![0.0; numel];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = xd[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute")
}

pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = xs[0].shape();
    let rank = first.len();
    let mut axis_total = 0;
    for t in xs {
        let s = t.shape();
        if s.len() != rank
            || s[..axis] != first[..axis]
            || s[axis + 1..] != first[axis + 1..]
        {
            return Err(Error::shape(
                "concat",
                format!("incompatible shapes {:?} vs {:?} on axis {}", first, s, axis),
            ));
        }
        axis_total += s[axis];
    }
    let mut out_shape = first.to_vec();
    out_shape[axis] = axis_total;
    let inner: usize = first[axis + 1..].iter().product();
    let outer: usize = first[..axis].iter().product();
    let out_block = axis_total * inner;
    let mut out = vec![0.0; outer * out_block];
    let mut offset = 0;
    for t in xs {
        let block = t.shape()[axis] * inner;
        let td = t.data();
        for o in 0..outer {
            out[o * out_block + offset..o * out_block + offset + block]
                .copy_from_slice(&td[o * block..(o + 1) * block]);
        }
        offset += block;
    }
    Tensor::new(out_shape, out)
}

/// Split a concat gradient back into per-input gradients.
pub fn concat_bwd(grad: &Tensor, in_shapes: &[Vec<usize>], axis: usize) -> Vec<Tensor> {
    let inner: usize = in_shapes[0][axis + 1..].iter().product();
    let outer: usize = in_shapes[0][..axis].iter().product();
    let out_block = grad.shape()[axis] * inner;
    let gd = grad.data();
    let mut grads = Vec::with_capacity(in_shapes.len());
    let mut offset = 0;
    for s in in_shapes {
        let block = s[axis] * inner;
        let mut g = vec![0.0; outer * block];
        for o in 0..outer {
            g[o * block..(o + 1) * block]
                .copy_from_slice(&gd[o * out_block + offset..o * out_block + offset + block]);
        }
        offset += block;
        grads.push(Tensor::new(s.clone(), g).expect("concat grad"));
    }
    grads
}

/// Copy `src` (shaped like the slice) into or out of `dst` at `ranges`.
/// `scatter_add` accumulates slice-shaped src into full dst, otherwise
/// gathers full src into slice-shaped dst.
fn slice_walk(
    full_shape: &[usize],
    ranges: &[std::ops::Range<usize>],
    mut f: impl FnMut(usize, usize, usize), // (full_offset, slice_offset, len)
) {
    let rank = full_shape.len();
    let full_strides: Vec<usize> = {
        let mut s = vec![1; rank];
        for i in (0..rank - 1).rev() {
            s[i] = s[i + 1] * full_shape[i + 1];
        }
        s
    };
    let slice_dims: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
    let inner = slice_dims[rank - 1];
    let outer: usize = slice_dims[..rank - 1].iter().product();
    let base: usize = ranges
        .iter()
        .enumerate()
        .map(|(d, r)| r.start * full_strides[d])
        .sum();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut full_off = base;
    for row in 0..outer {
        f(full_off, row * inner, inner);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            full_off += full_strides[d];
            if idx[d] < slice_dims[d] {
                break;
            }
            full_off -= full_strides[d] * slice_dims[d];
            idx[d] = 0;
        }
    }
}

pub fn slice(x: &Tensor, ranges: &[std::ops::Range<usize>]) -> Result<Tensor> {
    let shape = x.shape();
    if ranges.len() != shape.len() {
        return Err(Error::shape(
            "slice",
            format!("{} ranges for rank-{} tensor", ranges.len(), shape.len()),
        ));
    }
    for (d, r) in ranges.iter().enumerate() {
        if r.start >= r.end || r.end > shape[d] {
            return Err(Error::shape(
                "slice",
                format!("range {:?} invalid for dim {} of extent {}", r, d, shape[d]),
            ));
        }
    }
    let out_shape: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
    let mut out = vec![0.0; out_shape.iter().product()];
    let xd = x.data();
    slice_walk(shape, ranges, |full, sl, len| {
        out[sl..sl + len].copy_from_slice(&xd[full..full + len]);
    });
    Tensor::new(out_shape, out)
}

pub fn slice_bwd(grad: &Tensor, x_shape: &[usize], ranges: &[std::ops::Range<usize>]) -> Tensor {
    let mut dx = vec![0.0; x_shape.iter().product()];
    let gd = grad.data();
    slice_walk(x_shape, ranges, |full, sl, len| {
        for k in 0..len {
            dx[full + k] += gd[sl + k];
        }
    });
    Tensor::new(x_shape.to_vec(), dx).expect("slice grad")
}

/// Zero padding: out dim d = before[d] + dim + after[d].
pub fn pad(x: &Tensor, before: &[usize], after: &[usize]) -> Tensor {
    let shape = x.shape();
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(before.iter().zip(after.iter()))
        .map(|(&d, (&b, &a))| b + d + a)
        .collect();
    let ranges: Vec<std::ops::Range<usize>> = shape
        .iter()
        .zip(before.iter())
        .map(|(&d, &b)| b..b + d)
        .collect();
    let mut out = vec![0.0; out_shape.iter().product()];
    let xd = x.data();
    slice_walk(&out_shape, &ranges, |full, sl, len| {
        out[full..full + len].copy_from_slice(&xd[sl..sl + len]);
    });
    Tensor::new(out_shape, out).expect("pad")
}

pub fn pad_bwd(grad: &Tensor, x_shape: &[usize], before: &[usize]) -> Tensor {
    let ranges: Vec<std::ops::Range<usize>> = x_shape
        .iter()
        .zip(before.iter())
        .map(|(&d, &b)| b..b + d)
        .collect();
    slice(grad, &ranges).expect("pad grad")
}

// ---------------------------------------------------------------------------
// scalar activations
// ---------------------------------------------------------------------------

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
}

pub fn gelu_grad(v: f64) -> f64 {
    let inner = GELU_C * (v + GELU_A * v * v * v);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * v * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
}

#[inline]
fn nchw(x: &Tensor) -> (usize, usize, usize, usize) {
    let s = x.shape();
    debug_assert_eq!(s.len(), 4, "expected NCHW tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(
            broadcast_shapes("t", &[1, 3, 1, 5], &[2, 1, 4, 5]).unwrap(),
            vec![2, 3, 4, 5]
        );
        assert_eq!(broadcast_shapes("t", &[4], &[2, 3, 4]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shapes("t", &[3], &[4]).is_err());
    }

    #[test]
    fn ew_broadcast_channel_scale() {
        // [1,2,1,1] * [1,2,2,2]
        let scale = Tensor::new(vec![1, 2, 1, 1], vec![2.0, 0.5]).unwrap();
        let x = Tensor::new(vec![1, 2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let out = ew_binary(&x, &scale, &[1, 2, 2, 2], |a, b| a * b);
        assert_eq!(
            out.data(),
            &[2.0, 4.0, 6.0, 8.0, 2.5, 3.0, 3.5, 4.0]
        );
    }

    #[test]
    fn reduce_matches_broadcast_transpose() {
        let g = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = reduce_to_shape(&g, &[1, 3]);
        assert_eq!(r.data(), &[5.0, 7.0, 9.0]);
        let r2 = reduce_to_shape(&g, &[2, 1]);
        assert_eq!(r2.data(), &[6.0, 15.0]);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn conv_all_ones_3x3() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d_fwd(&x, &w, None, &ConvSpec::unit(1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.at(&[0, 0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 0, 2, 2]), 4.0);
        assert_eq!(y.at(&[0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(vec![1, 1, 2, 3], vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]).unwrap();
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d_fwd(&x, &w, None, &ConvSpec::unit(0)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_kernel_too_big_rejected() {
        let sp = ConvSpec::unit(0);
        assert!(conv2d_out_dims(2, 2, 3, 3, &sp).is_err());
    }

    #[test]
    fn maxpool_block_max() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2d_fwd(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn convt_doubles_dims() {
        let x = Tensor::ones(&[1, 1, 2, 2]);
        let w = Tensor::ones(&[1, 1, 2, 2]);
        let y = conv_transpose2d_fwd(&x, &w, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        // stride 2, kernel 2: each output cell touched exactly once
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let x = Tensor::new(vec![4], vec![1.3, 1.3, 1.3, 1.3]).unwrap();
        let s = softmax_fwd(&x, 0, None).unwrap();
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x2 = Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap();
        let s2 = softmax_fwd(&x2, 0, None).unwrap();
        assert!((s2.data()[0] - 0.25).abs() < 1e-12);
        assert!((s2.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_all_masked_lane_rejected() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mask = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert!(softmax_fwd(&x, 0, Some(&mask)).is_err());
    }

    #[test]
    fn layernorm_constant_collapses_to_zero() {
        let x = Tensor::full(&[2, 4], 3.7);
        let g = Tensor::ones(&[4]);
        let b = Tensor::zeros(&[4]);
        let y = layernorm_fwd(&x, &g, &b, 1e-5);
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layernorm_pm_one() {
        let x = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let y = layernorm_fwd(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-5);
        assert!((y.data()[0] - 1.0).abs() < 1e-4);
        assert!((y.data()[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        let p = permute(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[1, 0, 2]), x.at(&[0, 2, 1]));
        let back = permute(&p, &invert_perm(&[2, 0, 1]));
        assert_eq!(back, x);
    }

    #[test]
    fn concat_slice_round_trip() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = slice(&c, &[0..2, 2..3]).unwrap();
        assert_eq!(s.data(), b.data());
    }

    #[test]
    fn pad_then_slice_is_identity() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = pad(&x, &[1, 0], &[0, 2]);
        assert_eq!(p.shape(), &[3, 4]);
        assert_eq!(p.at(&[0, 0]), 0.0);
        assert_eq!(p.at(&[1, 0]), 1.0);
        let back = slice(&p, &[1..3, 0..2]).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn sum_axes_basic() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = sum_axes(&x, &[0], false);
        assert_eq!(s.shape(), &[3]);
        assert_eq!(s.data(), &[5.0, 7.0, 9.0]);
        let s2 = sum_axes(&x, &[0, 1], true);
        assert_eq!(s2.shape(), &[1, 1]);
        assert_eq!(s2.data(), &[21.0]);
    }
}
