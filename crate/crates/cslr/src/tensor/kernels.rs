//! Raw numeric routines behind the graph operations.
//!
//! Everything here works on pre-validated shapes (the graph methods check
//! and report errors); kernels only `debug_assert`. All loops run in a
//! fixed index order so results are bit-for-bit reproducible.

use super::{strides_of, Element, Tensor};

/// Odometer-style increment of a multi-index. Returns `false` once the
/// index wraps past the end.
pub(crate) fn advance(idx: &mut [usize], shape: &[usize]) -> bool {
    for d in (0..shape.len()).rev() {
        idx[d] += 1;
        if idx[d] < shape[d] {
            return true;
        }
        idx[d] = 0;
    }
    false
}

/// [`advance`] that also maintains a flat offset under `strides` (which may
/// contain zeros for broadcast/reduced axes), so the per-element
/// index-to-offset dot product becomes a single add on the hot path.
#[inline]
pub(crate) fn advance_offset(
    idx: &mut [usize],
    shape: &[usize],
    strides: &[usize],
    off: &mut usize,
) -> bool {
    for d in (0..shape.len()).rev() {
        idx[d] += 1;
        *off += strides[d];
        if idx[d] < shape[d] {
            return true;
        }
        idx[d] = 0;
        *off -= shape[d] * strides[d];
    }
    false
}

/// out += a @ b, a: (m,k), b: (k,n), out: (m,n).
pub(crate) fn gemm_nn<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// out += a @ b^T, a: (m,k), b: (n,k), out: (m,n).
pub(crate) fn gemm_nt<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for kk in 0..k {
                acc = acc + arow[kk] * brow[kk];
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// out += a^T @ b, a: (k,m), b: (k,n), out: (m,n).
pub(crate) fn gemm_tn<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvSpec1d {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

/// Output length of a 1-d convolution/pooling window sweep, or `None` when
/// the input is too short for even one window.
pub(crate) fn conv1d_out_len(t: usize, k: usize, spec: ConvSpec1d) -> Option<usize> {
    let span = spec.dilation * (k - 1) + 1;
    let padded = t + 2 * spec.padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / spec.stride + 1)
}

/// x: (B,Cin,T), w: (Cout,Cin,K) -> (B,Cout,To).
pub(crate) fn conv1d_fwd<E: Element>(x: &Tensor<E>, w: &Tensor<E>, spec: ConvSpec1d) -> Tensor<E> {
    let (b, cin, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let to = conv1d_out_len(t, k, spec).expect("validated");
    let mut out = Tensor::zeros(&[b, cout, to]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for bi in 0..b {
        for co in 0..cout {
            for ci in 0..cin {
                let xrow = &xd[(bi * cin + ci) * t..(bi * cin + ci + 1) * t];
                let wrow = &wd[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                let orow = &mut od[(bi * cout + co) * to..(bi * cout + co + 1) * to];
                for (oi, o) in orow.iter_mut().enumerate() {
                    let base = oi * spec.stride;
                    let mut acc = E::zero();
                    for (kk, &wv) in wrow.iter().enumerate() {
                        let ti = base + kk * spec.dilation;
                        if ti >= spec.padding && ti - spec.padding < t {
                            acc = acc + xrow[ti - spec.padding] * wv;
                        }
                    }
                    *o = *o + acc;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv1d_fwd`] w.r.t. input and weight.
pub(crate) fn conv1d_bwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    gout: &Tensor<E>,
    spec: ConvSpec1d,
    want_gx: bool,
    want_gw: bool,
) -> (Option<Tensor<E>>, Option<Tensor<E>>) {
    let (b, cin, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let to = gout.shape()[2];
    let mut gx = want_gx.then(|| Tensor::zeros(x.shape()));
    let mut gw = want_gw.then(|| Tensor::zeros(w.shape()));
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();
    for bi in 0..b {
        for co in 0..cout {
            let grow = &gd[(bi * cout + co) * to..(bi * cout + co + 1) * to];
            for ci in 0..cin {
                let wrow = &wd[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                for oi in 0..to {
                    let g = grow[oi];
                    let base = oi * spec.stride;
                    for kk in 0..k {
                        let ti = base + kk * spec.dilation;
                        if ti < spec.padding || ti - spec.padding >= t {
                            continue;
                        }
                        let xi = (bi * cin + ci) * t + (ti - spec.padding);
                        if let Some(gx) = gx.as_mut() {
                            let d = gx.data_mut();
                            d[xi] = d[xi] + g * wrow[kk];
                        }
                        if let Some(gw) = gw.as_mut() {
                            let wi = (co * cin + ci) * k + kk;
                            let d = gw.data_mut();
                            d[wi] = d[wi] + g * xd[xi];
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Depthwise variant: x (B,C,T), w (C,K), stride 1, dilation 1.
pub(crate) fn dwconv1d_fwd<E: Element>(x: &Tensor<E>, w: &Tensor<E>, padding: usize) -> Tensor<E> {
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[1];
    let spec = ConvSpec1d {
        stride: 1,
        dilation: 1,
        padding,
    };
    let to = conv1d_out_len(t, k, spec).expect("validated");
    let mut out = Tensor::zeros(&[b, c, to]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let xrow = &xd[(bi * c + ci) * t..(bi * c + ci + 1) * t];
            let wrow = &wd[ci * k..(ci + 1) * k];
            let orow = &mut od[(bi * c + ci) * to..(bi * c + ci + 1) * to];
            for (oi, o) in orow.iter_mut().enumerate() {
                let mut acc = E::zero();
                for (kk, &wv) in wrow.iter().enumerate() {
                    let ti = oi + kk;
                    if ti >= padding && ti - padding < t {
                        acc = acc + xrow[ti - padding] * wv;
                    }
                }
                *o = acc;
            }
        }
    }
    out
}

pub(crate) fn dwconv1d_bwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    gout: &Tensor<E>,
    padding: usize,
    want_gx: bool,
    want_gw: bool,
) -> (Option<Tensor<E>>, Option<Tensor<E>>) {
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[1];
    let to = gout.shape()[2];
    let mut gx = want_gx.then(|| Tensor::zeros(x.shape()));
    let mut gw = want_gw.then(|| Tensor::zeros(w.shape()));
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();
    for bi in 0..b {
        for ci in 0..c {
            let grow = &gd[(bi * c + ci) * to..(bi * c + ci + 1) * to];
            for oi in 0..to {
                let g = grow[oi];
                for kk in 0..k {
                    let ti = oi + kk;
                    if ti < padding || ti - padding >= t {
                        continue;
                    }
                    let xi = (bi * c + ci) * t + (ti - padding);
                    if let Some(gx) = gx.as_mut() {
                        let d = gx.data_mut();
                        d[xi] = d[xi] + g * wd[ci * k + kk];
                    }
                    if let Some(gw) = gw.as_mut() {
                        let d = gw.data_mut();
                        d[ci * k + kk] = d[ci * k + kk] + g * xd[xi];
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// x: (B,Cin,T,H,W), w: (Cout,Cin,Kt,Kh,Kw), stride 1 -> (B,Cout,To,Ho,Wo).
pub(crate) fn conv3d_fwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    pad: (usize, usize, usize),
) -> Tensor<E> {
    let s = x.shape();
    let (b, cin, t, h, wd_) = (s[0], s[1], s[2], s[3], s[4]);
    let ws = w.shape();
    let (cout, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let to = t + 2 * pad.0 + 1 - kt;
    let ho = h + 2 * pad.1 + 1 - kh;
    let wo = wd_ + 2 * pad.2 + 1 - kw;
    let mut out = Tensor::zeros(&[b, cout, to, ho, wo]);
    let xd = x.data();
    let wv = w.data();
    let od = out.data_mut();
    let xs = strides_of(s);
    let oss = strides_of(&[b, cout, to, ho, wo]);
    for bi in 0..b {
        for co in 0..cout {
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = E::zero();
                        for ci in 0..cin {
                            for jt in 0..kt {
                                let it = ot + jt;
                                if it < pad.0 || it - pad.0 >= t {
                                    continue;
                                }
                                for jh in 0..kh {
                                    let ih = oh + jh;
                                    if ih < pad.1 || ih - pad.1 >= h {
                                        continue;
                                    }
                                    for jw in 0..kw {
                                        let iw = ow + jw;
                                        if iw < pad.2 || iw - pad.2 >= wd_ {
                                            continue;
                                        }
                                        let xi = bi * xs[0]
                                            + ci * xs[1]
                                            + (it - pad.0) * xs[2]
                                            + (ih - pad.1) * xs[3]
                                            + (iw - pad.2);
                                        let wi = (((co * cin + ci) * kt + jt) * kh + jh) * kw + jw;
                                        acc = acc + xd[xi] * wv[wi];
                                    }
                                }
                            }
                        }
                        od[bi * oss[0] + co * oss[1] + ot * oss[2] + oh * oss[3] + ow] = acc;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv3d_bwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    gout: &Tensor<E>,
    pad: (usize, usize, usize),
    want_gx: bool,
    want_gw: bool,
) -> (Option<Tensor<E>>, Option<Tensor<E>>) {
    let s = x.shape();
    let (b, cin, t, h, wd_) = (s[0], s[1], s[2], s[3], s[4]);
    let ws = w.shape();
    let (cout, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let os = gout.shape();
    let (to, ho, wo) = (os[2], os[3], os[4]);
    let mut gx = want_gx.then(|| Tensor::zeros(s));
    let mut gw = want_gw.then(|| Tensor::zeros(ws));
    let xd = x.data();
    let wv = w.data();
    let gd = gout.data();
    let xs = strides_of(s);
    let oss = strides_of(os);
    for bi in 0..b {
        for co in 0..cout {
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let g = gd[bi * oss[0] + co * oss[1] + ot * oss[2] + oh * oss[3] + ow];
                        for ci in 0..cin {
                            for jt in 0..kt {
                                let it = ot + jt;
                                if it < pad.0 || it - pad.0 >= t {
                                    continue;
                                }
                                for jh in 0..kh {
                                    let ih = oh + jh;
                                    if ih < pad.1 || ih - pad.1 >= h {
                                        continue;
                                    }
                                    for jw in 0..kw {
                                        let iw = ow + jw;
                                        if iw < pad.2 || iw - pad.2 >= wd_ {
                                            continue;
                                        }
                                        let xi = bi * xs[0]
                                            + ci * xs[1]
                                            + (it - pad.0) * xs[2]
                                            + (ih - pad.1) * xs[3]
                                            + (iw - pad.2);
                                        let wi = (((co * cin + ci) * kt + jt) * kh + jh) * kw + jw;
                                        if let Some(gx) = gx.as_mut() {
                                            let d = gx.data_mut();
                                            d[xi] = d[xi] + g * wv[wi];
                                        }
                                        if let Some(gw) = gw.as_mut() {
                                            let d = gw.data_mut();
                                            d[wi] = d[wi] + g * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Depthwise 3-d variant: x (B,C,T,H,W), w (C,Kt,Kh,Kw), stride 1.
pub(crate) fn dwconv3d_fwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    pad: (usize, usize, usize),
) -> Tensor<E> {
    let s = x.shape();
    let (b, c, t, h, wd_) = (s[0], s[1], s[2], s[3], s[4]);
    let ws = w.shape();
    let (kt, kh, kw) = (ws[1], ws[2], ws[3]);
    let to = t + 2 * pad.0 + 1 - kt;
    let ho = h + 2 * pad.1 + 1 - kh;
    let wo = wd_ + 2 * pad.2 + 1 - kw;
    let mut out = Tensor::zeros(&[b, c, to, ho, wo]);
    let xd = x.data();
    let wv = w.data();
    let od = out.data_mut();
    let xs = strides_of(s);
    let oss = strides_of(&[b, c, to, ho, wo]);
    for bi in 0..b {
        for ci in 0..c {
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = E::zero();
                        for jt in 0..kt {
                            let it = ot + jt;
                            if it < pad.0 || it - pad.0 >= t {
                                continue;
                            }
                            for jh in 0..kh {
                                let ih = oh + jh;
                                if ih < pad.1 || ih - pad.1 >= h {
                                    continue;
                                }
                                for jw in 0..kw {
                                    let iw = ow + jw;
                                    if iw < pad.2 || iw - pad.2 >= wd_ {
                                        continue;
                                    }
                                    let xi = bi * xs[0]
                                        + ci * xs[1]
                                        + (it - pad.0) * xs[2]
                                        + (ih - pad.1) * xs[3]
                                        + (iw - pad.2);
                                    let wi = ((ci * kt + jt) * kh + jh) * kw + jw;
                                    acc = acc + xd[xi] * wv[wi];
                                }
                            }
                        }
                        od[bi * oss[0] + ci * oss[1] + ot * oss[2] + oh * oss[3] + ow] = acc;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn dwconv3d_bwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    gout: &Tensor<E>,
    pad: (usize, usize, usize),
    want_gx: bool,
    want_gw: bool,
) -> (Option<Tensor<E>>, Option<Tensor<E>>) {
    let s = x.shape();
    let (b, c, t, h, wd_) = (s[0], s[1], s[2], s[3], s[4]);
    let ws = w.shape();
    let (kt, kh, kw) = (ws[1], ws[2], ws[3]);
    let os = gout.shape();
    let (to, ho, wo) = (os[2], os[3], os[4]);
    let mut gx = want_gx.then(|| Tensor::zeros(s));
    let mut gw = want_gw.then(|| Tensor::zeros(ws));
    let xd = x.data();
    let wv = w.data();
    let gd = gout.data();
    let xs = strides_of(s);
    let oss = strides_of(os);
    for bi in 0..b {
        for ci in 0..c {
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let g = gd[bi * oss[0] + ci * oss[1] + ot * oss[2] + oh * oss[3] + ow];
                        for jt in 0..kt {
                            let it = ot + jt;
                            if it < pad.0 || it - pad.0 >= t {
                                continue;
                            }
                            for jh in 0..kh {
                                let ih = oh + jh;
                                if ih < pad.1 || ih - pad.1 >= h {
                                    continue;
                                }
                                for jw in 0..kw {
                                    let iw = ow + jw;
                                    if iw < pad.2 || iw - pad.2 >= wd_ {
                                        continue;
                                    }
                                    let xi = bi * xs[0]
                                        + ci * xs[1]
                                        + (it - pad.0) * xs[2]
                                        + (ih - pad.1) * xs[3]
                                        + (iw - pad.2);
                                    let wi = ((ci * kt + jt) * kh + jh) * kw + jw;
                                    if let Some(gx) = gx.as_mut() {
                                        let d = gx.data_mut();
                                        d[xi] = d[xi] + g * wv[wi];
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        let d = gw.data_mut();
                                        d[wi] = d[wi] + g * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// x: (B,C,T) -> (out, argmax) where argmax holds the flat input index of
/// the winning element per output cell. Ties pick the earliest position;
/// padding cells never win.
pub(crate) fn maxpool1d_fwd<E: Element>(
    x: &Tensor<E>,
    k: usize,
    stride: usize,
    padding: usize,
) -> (Tensor<E>, Vec<usize>) {
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let spec = ConvSpec1d {
        stride,
        dilation: 1,
        padding,
    };
    let to = conv1d_out_len(t, k, spec).expect("validated");
    let mut out = Tensor::zeros(&[b, c, to]);
    let mut argmax = vec![0usize; b * c * to];
    let xd = x.data();
    let od = out.data_mut();
    for bc in 0..b * c {
        let xrow = &xd[bc * t..(bc + 1) * t];
        for oi in 0..to {
            let mut best: Option<(E, usize)> = None;
            for kk in 0..k {
                let ti = oi * stride + kk;
                if ti < padding || ti - padding >= t {
                    continue;
                }
                let v = xrow[ti - padding];
                match best {
                    Some((bv, _)) if v <= bv => {}
                    _ => best = Some((v, ti - padding)),
                }
            }
            let (v, idx) = best.expect("window contains at least one real element");
            od[bc * to + oi] = v;
            argmax[bc * to + oi] = bc * t + idx;
        }
    }
    (out, argmax)
}

/// Sum over `axes`; when `keepdims` those axes stay with size 1.
pub(crate) fn reduce_sum<E: Element>(x: &Tensor<E>, axes: &[usize], keepdims: bool) -> Tensor<E> {
    let shape = x.shape();
    let mut out_shape: Vec<usize> = Vec::new();
    for (d, &s) in shape.iter().enumerate() {
        if axes.contains(&d) {
            if keepdims {
                out_shape.push(1);
            }
        } else {
            out_shape.push(s);
        }
    }
    let mut out = Tensor::zeros(&out_shape);
    if x.numel() == 0 {
        return out;
    }
    // Strides of the output laid over the *input* index space: reduced axes
    // contribute stride 0.
    let ostrides = strides_of(&out_shape);
    let mut mapped = vec![0usize; shape.len()];
    let mut oi = 0;
    for (d, m) in mapped.iter_mut().enumerate() {
        if axes.contains(&d) {
            if keepdims {
                oi += 1;
            }
            *m = 0;
        } else {
            *m = ostrides[oi];
            oi += 1;
        }
    }
    let od = out.data_mut();
    let xd = x.data();
    let mut idx = vec![0usize; shape.len()];
    let mut o = 0usize;
    for &xv in xd {
        od[o] = od[o] + xv;
        advance_offset(&mut idx, shape, &mapped, &mut o);
    }
    out
}

/// Replicate `x` to `to_shape` under numpy broadcasting rules.
pub(crate) fn broadcast_to<E: Element>(x: &Tensor<E>, to_shape: &[usize]) -> Tensor<E> {
    let from = x.shape();
    let offset = to_shape.len() - from.len();
    let fstrides = strides_of(from);
    let mut mapped = vec![0usize; to_shape.len()];
    for d in 0..from.len() {
        mapped[offset + d] = if from[d] == 1 { 0 } else { fstrides[d] };
    }
    let mut out = Tensor::zeros(to_shape);
    let od = out.data_mut();
    let xd = x.data();
    let mut idx = vec![0usize; to_shape.len()];
    let mut xi = 0usize;
    for o in od.iter_mut() {
        *o = xd[xi];
        advance_offset(&mut idx, to_shape, &mapped, &mut xi);
    }
    out
}

/// Reduce a gradient of `to_shape` back down to `from_shape` by summing the
/// broadcast axes. Inverse of [`broadcast_to`] for gradients.
pub(crate) fn reduce_to<E: Element>(g: &Tensor<E>, from_shape: &[usize]) -> Tensor<E> {
    let to = g.shape();
    let offset = to.len() - from_shape.len();
    let mut axes: Vec<usize> = (0..offset).collect();
    for d in 0..from_shape.len() {
        if from_shape[d] == 1 && to[offset + d] != 1 {
            axes.push(offset + d);
        }
    }
    let summed = reduce_sum(g, &axes, true);
    summed.reshaped(from_shape).expect("same element count")
}

pub(crate) fn permute<E: Element>(x: &Tensor<E>, perm: &[usize]) -> Tensor<E> {
    let shape = x.shape();
    let nd = perm.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let istrides = strides_of(shape);
    let mapped: Vec<usize> = perm.iter().map(|&p| istrides[p]).collect();
    let mut out = Tensor::zeros(&out_shape);
    if x.numel() == 0 {
        return out;
    }
    // Trailing axes that stay in place form contiguous runs; copy those as
    // slabs and walk only the leading axes.
    let mut keep = 0;
    while keep < nd && perm[nd - 1 - keep] == nd - 1 - keep {
        keep += 1;
    }
    let run: usize = shape[nd - keep..].iter().product();
    let od = out.data_mut();
    let xd = x.data();
    if run > 1 {
        let head = &out_shape[..nd - keep];
        let hstrides = &mapped[..nd - keep];
        let mut idx = vec![0usize; head.len()];
        let mut xi = 0usize;
        let mut o = 0usize;
        loop {
            od[o..o + run].copy_from_slice(&xd[xi..xi + run]);
            o += run;
            if !advance_offset(&mut idx, head, hstrides, &mut xi) {
                break;
            }
        }
    } else {
        let mut idx = vec![0usize; nd];
        let mut xi = 0usize;
        for o in od.iter_mut() {
            *o = xd[xi];
            advance_offset(&mut idx, &out_shape, &mapped, &mut xi);
        }
    }
    out
}

pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// View a shape as (outer, axis, inner) around one axis.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `true` when the gather indices are a run `start, start+1, ...`, which
/// lets a selection move whole slabs instead of rows.
fn consecutive(indices: &[usize]) -> bool {
    !indices.is_empty() && indices.windows(2).all(|p| p[1] == p[0] + 1)
}

/// Gather rows along `axis`: out.shape[axis] = indices.len().
pub(crate) fn index_select<E: Element>(x: &Tensor<E>, axis: usize, indices: &[usize]) -> Tensor<E> {
    let (outer, a, inner) = split_at_axis(x.shape(), axis);
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = indices.len();
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    let xd = x.data();
    if consecutive(indices) {
        let chunk = indices.len() * inner;
        for o in 0..outer {
            let src = (o * a + indices[0]) * inner;
            od[o * chunk..(o + 1) * chunk].copy_from_slice(&xd[src..src + chunk]);
        }
    } else if inner == 1 {
        for o in 0..outer {
            let xrow = &xd[o * a..(o + 1) * a];
            let orow = &mut od[o * indices.len()..(o + 1) * indices.len()];
            for (dst, &src) in orow.iter_mut().zip(indices) {
                *dst = xrow[src];
            }
        }
    } else {
        for o in 0..outer {
            for (s, &src) in indices.iter().enumerate() {
                let dst_base = (o * indices.len() + s) * inner;
                let src_base = (o * a + src) * inner;
                od[dst_base..dst_base + inner].copy_from_slice(&xd[src_base..src_base + inner]);
            }
        }
    }
    out
}

/// Scatter-add of the gradient of [`index_select`]: repeated indices
/// accumulate in selection order.
pub(crate) fn index_select_bwd<E: Element>(
    gout: &Tensor<E>,
    in_shape: &[usize],
    axis: usize,
    indices: &[usize],
) -> Tensor<E> {
    let (outer, a, inner) = split_at_axis(in_shape, axis);
    let mut gx = Tensor::zeros(in_shape);
    let gd = gx.data_mut();
    let od = gout.data();
    if consecutive(indices) {
        let chunk = indices.len() * inner;
        for o in 0..outer {
            let dst = (o * a + indices[0]) * inner;
            let grow = &mut gd[dst..dst + chunk];
            let orow = &od[o * chunk..(o + 1) * chunk];
            for (g, &u) in grow.iter_mut().zip(orow) {
                *g = *g + u;
            }
        }
    } else if inner == 1 {
        for o in 0..outer {
            let orow = &od[o * indices.len()..(o + 1) * indices.len()];
            let grow = &mut gd[o * a..(o + 1) * a];
            for (&u, &src) in orow.iter().zip(indices) {
                grow[src] = grow[src] + u;
            }
        }
    } else {
        for o in 0..outer {
            for (s, &src) in indices.iter().enumerate() {
                let src_base = (o * indices.len() + s) * inner;
                let dst_base = (o * a + src) * inner;
                for i in 0..inner {
                    gd[dst_base + i] = gd[dst_base + i] + od[src_base + i];
                }
            }
        }
    }
    gx
}

pub(crate) fn concat<E: Element>(parts: &[&Tensor<E>], axis: usize) -> Tensor<E> {
    let first = parts[0].shape();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out_shape = first.to_vec();
    out_shape[axis] = total;
    let (outer, _, inner) = split_at_axis(&out_shape, axis);
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    for o in 0..outer {
        let mut written = 0usize;
        for p in parts {
            let pa = p.shape()[axis];
            let chunk = pa * inner;
            let src = &p.data()[o * chunk..(o + 1) * chunk];
            let dst_base = (o * total + written) * inner;
            od[dst_base..dst_base + chunk].copy_from_slice(src);
            written += pa;
        }
    }
    out
}

/// Contiguous slab `[start, start+len)` along `axis`.
pub(crate) fn slice_axis<E: Element>(
    x: &Tensor<E>,
    axis: usize,
    start: usize,
    len: usize,
) -> Tensor<E> {
    let (outer, a, inner) = split_at_axis(x.shape(), axis);
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    let xd = x.data();
    for o in 0..outer {
        let src_base = (o * a + start) * inner;
        let dst_base = o * len * inner;
        od[dst_base..dst_base + len * inner]
            .copy_from_slice(&xd[src_base..src_base + len * inner]);
    }
    out
}

/// Numerically stable log-softmax along `axis`.
pub(crate) fn log_softmax<E: Element>(x: &Tensor<E>, axis: usize) -> Tensor<E> {
    let (outer, a, inner) = split_at_axis(x.shape(), axis);
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    let xd = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| xd[(o * a + j) * inner + i];
            let mut m = at(0);
            for j in 1..a {
                if at(j) > m {
                    m = at(j);
                }
            }
            let mut s = E::zero();
            for j in 0..a {
                s = s + (at(j) - m).exp();
            }
            let lse = m + s.ln();
            for j in 0..a {
                od[(o * a + j) * inner + i] = at(j) - lse;
            }
        }
    }
    out
}

/// Gradient of log-softmax given its output `y` and upstream `g`:
/// `g - exp(y) * sum_axis(g)`.
pub(crate) fn log_softmax_bwd<E: Element>(y: &Tensor<E>, g: &Tensor<E>, axis: usize) -> Tensor<E> {
    let (outer, a, inner) = split_at_axis(y.shape(), axis);
    let mut gx = Tensor::zeros(y.shape());
    let gd = gx.data_mut();
    let yd = y.data();
    let ud = g.data();
    for o in 0..outer {
        for i in 0..inner {
            let mut gsum = E::zero();
            for j in 0..a {
                gsum = gsum + ud[(o * a + j) * inner + i];
            }
            for j in 0..a {
                let p = (o * a + j) * inner + i;
                gd[p] = ud[p] - yd[p].exp() * gsum;
            }
        }
    }
    gx
}
