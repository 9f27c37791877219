//! Direct 2-D convolution kernels with grouped and depthwise support.
//!
//! Pointwise (1x1, stride 1) convolutions get a whole-plane saxpy/dot fast
//! path; other stride-1 kernels run contiguous-row saxpy loops over exact
//! subslices so the compiler can vectorize them. Reductions use a fixed
//! 8-lane unroll (deterministic order, vectorizable). Strided convolutions
//! (the 4x4/stride-2 illumination downsamplers) fall back to scalar loops.
//! Parallelism is over independent output/input planes and accumulation
//! within a plane is sequential, so results do not depend on the thread
//! schedule.

use super::{Elem, Result, Shape, TensorError};
use rayon::prelude::*;

pub(super) fn check_conv(
    x: Shape,
    w: Shape,
    bias: Option<Shape>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<(Shape, ())> {
    let err = |msg: String| TensorError::Shape { op: "conv2d", msg };
    if stride == 0 {
        return Err(err("stride must be >= 1".into()));
    }
    if groups == 0 {
        return Err(err("groups must be >= 1".into()));
    }
    let (in_c, out_c) = (x.c(), w.n());
    if in_c % groups != 0 {
        return Err(err(format!(
            "input channels {in_c} not divisible by groups {groups}"
        )));
    }
    if out_c % groups != 0 {
        return Err(err(format!(
            "output channels {out_c} not divisible by groups {groups}"
        )));
    }
    if w.c() != in_c / groups {
        return Err(err(format!(
            "kernel input-channel dim {} does not match input channels {in_c} / groups {groups}",
            w.c()
        )));
    }
    if let Some(b) = bias {
        if b != Shape::new(1, out_c, 1, 1) {
            return Err(err(format!("bias must be 1x{out_c}x1x1, got {b}")));
        }
    }
    let (kh, kw) = (w.h(), w.w());
    if x.h() + 2 * padding < kh || x.w() + 2 * padding < kw {
        return Err(err(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            x.h() + 2 * padding,
            x.w() + 2 * padding
        )));
    }
    let oh = (x.h() + 2 * padding - kh) / stride + 1;
    let ow = (x.w() + 2 * padding - kw) / stride + 1;
    Ok((Shape::new(x.n(), out_c, oh, ow), ()))
}

#[inline]
fn saxpy<E: Elem>(dst: &mut [E], src: &[E], a: E) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * *s;
    }
}

/// Dot product with a fixed 8-lane unroll: deterministic order and amenable
/// to vectorization (a plain serial reduction cannot be reordered by the
/// compiler).
#[inline]
pub(super) fn dot<E: Elem>(a: &[E], b: &[E]) -> E {
    let mut lanes = [E::ZERO; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (aa, bb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            lanes[l] += aa[l] * bb[l];
        }
    }
    let mut tail = E::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let mut acc = tail;
    for l in lanes {
        acc += l;
    }
    acc
}

struct ConvDims {
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    icpg: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    ocpg: usize,
}

fn dims(xs: Shape, ws: Shape, out: Shape, groups: usize) -> ConvDims {
    ConvDims {
        in_c: xs.c(),
        h: xs.h(),
        w: xs.w(),
        out_c: ws.n(),
        icpg: ws.c(),
        kh: ws.h(),
        kw: ws.w(),
        oh: out.h(),
        ow: out.w(),
        ocpg: ws.n() / groups,
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn forward<E: Elem>(
    x: &[E],
    xs: Shape,
    w: &[E],
    ws: Shape,
    bias: Option<&[E]>,
    stride: usize,
    padding: usize,
    groups: usize,
    out_shape: Shape,
) -> Vec<E> {
    let d = dims(xs, ws, out_shape, groups);
    let pointwise = d.kh == 1 && d.kw == 1 && stride == 1 && padding == 0;
    let mut out = vec![E::ZERO; out_shape.numel()];

    out.par_chunks_mut(d.oh * d.ow).enumerate().for_each(|(plane, o)| {
        let (ni, oc) = (plane / d.out_c, plane % d.out_c);
        let g = oc / d.ocpg;
        if let Some(b) = bias {
            let bv = b[oc];
            for v in o.iter_mut() {
                *v = bv;
            }
        }
        if pointwise {
            let hw = d.h * d.w;
            for icg in 0..d.icpg {
                let ic = g * d.icpg + icg;
                let wv = w[oc * d.icpg + icg];
                saxpy(o, &x[(ni * d.in_c + ic) * hw..(ni * d.in_c + ic + 1) * hw], wv);
            }
            return;
        }
        for icg in 0..d.icpg {
            let ic = g * d.icpg + icg;
            let x_plane = &x[(ni * d.in_c + ic) * d.h * d.w..(ni * d.in_c + ic + 1) * d.h * d.w];
            for khi in 0..d.kh {
                for kwi in 0..d.kw {
                    let wv = w[((oc * d.icpg + icg) * d.kh + khi) * d.kw + kwi];
                    if stride == 1 {
                        // iw = ow + kwi - padding must land in [0, w)
                        let lo = padding.saturating_sub(kwi);
                        let hi = (d.w + padding - kwi).min(d.ow);
                        if lo >= hi {
                            continue;
                        }
                        let shift = kwi as isize - padding as isize;
                        let src_start = (lo as isize + shift) as usize;
                        let len = hi - lo;
                        for ohi in 0..d.oh {
                            let ih = ohi + khi;
                            if ih < padding || ih - padding >= d.h {
                                continue;
                            }
                            let src =
                                &x_plane[(ih - padding) * d.w + src_start..][..len];
                            let dst = &mut o[ohi * d.ow + lo..][..len];
                            saxpy(dst, src, wv);
                        }
                    } else {
                        for ohi in 0..d.oh {
                            let ih = (ohi * stride + khi) as isize - padding as isize;
                            if ih < 0 || ih as usize >= d.h {
                                continue;
                            }
                            let x_row = &x_plane[ih as usize * d.w..];
                            for owi in 0..d.ow {
                                let iw = (owi * stride + kwi) as isize - padding as isize;
                                if iw < 0 || iw as usize >= d.w {
                                    continue;
                                }
                                o[ohi * d.ow + owi] += wv * x_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward_x<E: Elem>(
    g: &[E],
    out_shape: Shape,
    w: &[E],
    ws: Shape,
    xs: Shape,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Vec<E> {
    let d = dims(xs, ws, out_shape, groups);
    let pointwise = d.kh == 1 && d.kw == 1 && stride == 1 && padding == 0;
    let mut gx = vec![E::ZERO; xs.numel()];

    gx.par_chunks_mut(d.h * d.w).enumerate().for_each(|(plane, gxp)| {
        let (ni, ic) = (plane / d.in_c, plane % d.in_c);
        let grp = ic / d.icpg;
        let icg = ic % d.icpg;
        if pointwise {
            let hw = d.h * d.w;
            for ocg in 0..d.ocpg {
                let oc = grp * d.ocpg + ocg;
                let wv = w[oc * d.icpg + icg];
                saxpy(gxp, &g[(ni * d.out_c + oc) * hw..(ni * d.out_c + oc + 1) * hw], wv);
            }
            return;
        }
        for ocg in 0..d.ocpg {
            let oc = grp * d.ocpg + ocg;
            let g_plane =
                &g[(ni * d.out_c + oc) * d.oh * d.ow..(ni * d.out_c + oc + 1) * d.oh * d.ow];
            for khi in 0..d.kh {
                for kwi in 0..d.kw {
                    let wv = w[((oc * d.icpg + icg) * d.kh + khi) * d.kw + kwi];
                    if stride == 1 {
                        let lo = padding.saturating_sub(kwi);
                        let hi = (d.w + padding - kwi).min(d.ow);
                        if lo >= hi {
                            continue;
                        }
                        let shift = kwi as isize - padding as isize;
                        let dst_start = (lo as isize + shift) as usize;
                        let len = hi - lo;
                        for ohi in 0..d.oh {
                            let ih = ohi + khi;
                            if ih < padding || ih - padding >= d.h {
                                continue;
                            }
                            let dst = &mut gxp[(ih - padding) * d.w + dst_start..][..len];
                            let src = &g_plane[ohi * d.ow + lo..][..len];
                            saxpy(dst, src, wv);
                        }
                    } else {
                        for ohi in 0..d.oh {
                            let ih = (ohi * stride + khi) as isize - padding as isize;
                            if ih < 0 || ih as usize >= d.h {
                                continue;
                            }
                            for owi in 0..d.ow {
                                let iw = (owi * stride + kwi) as isize - padding as isize;
                                if iw < 0 || iw as usize >= d.w {
                                    continue;
                                }
                                gxp[ih as usize * d.w + iw as usize] +=
                                    wv * g_plane[ohi * d.ow + owi];
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward_w<E: Elem>(
    g: &[E],
    out_shape: Shape,
    x: &[E],
    xs: Shape,
    ws: Shape,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Vec<E> {
    let d = dims(xs, ws, out_shape, groups);
    let n = xs.n();
    let pointwise = d.kh == 1 && d.kw == 1 && stride == 1 && padding == 0;
    let mut gw = vec![E::ZERO; ws.numel()];

    gw.par_chunks_mut(d.icpg * d.kh * d.kw)
        .enumerate()
        .for_each(|(oc, gwc)| {
            let grp = oc / d.ocpg;
            for ni in 0..n {
                let g_plane =
                    &g[(ni * d.out_c + oc) * d.oh * d.ow..(ni * d.out_c + oc + 1) * d.oh * d.ow];
                for icg in 0..d.icpg {
                    let ic = grp * d.icpg + icg;
                    let x_plane =
                        &x[(ni * d.in_c + ic) * d.h * d.w..(ni * d.in_c + ic + 1) * d.h * d.w];
                    if pointwise {
                        gwc[icg] += dot(x_plane, g_plane);
                        continue;
                    }
                    for khi in 0..d.kh {
                        for kwi in 0..d.kw {
                            let mut acc = E::ZERO;
                            if stride == 1 {
                                let lo = padding.saturating_sub(kwi);
                                let hi = (d.w + padding - kwi).min(d.ow);
                                if lo >= hi {
                                    continue;
                                }
                                let shift = kwi as isize - padding as isize;
                                let src_start = (lo as isize + shift) as usize;
                                let len = hi - lo;
                                for ohi in 0..d.oh {
                                    let ih = ohi + khi;
                                    if ih < padding || ih - padding >= d.h {
                                        continue;
                                    }
                                    acc += dot(
                                        &x_plane[(ih - padding) * d.w + src_start..][..len],
                                        &g_plane[ohi * d.ow + lo..][..len],
                                    );
                                }
                            } else {
                                for ohi in 0..d.oh {
                                    let ih = (ohi * stride + khi) as isize - padding as isize;
                                    if ih < 0 || ih as usize >= d.h {
                                        continue;
                                    }
                                    for owi in 0..d.ow {
                                        let iw =
                                            (owi * stride + kwi) as isize - padding as isize;
                                        if iw < 0 || iw as usize >= d.w {
                                            continue;
                                        }
                                        acc += x_plane[ih as usize * d.w + iw as usize]
                                            * g_plane[ohi * d.ow + owi];
                                    }
                                }
                            }
                            gwc[(icg * d.kh + khi) * d.kw + kwi] += acc;
                        }
                    }
                }
            }
        });
    gw
}

pub(super) fn backward_b<E: Elem>(g: &[E], out_shape: Shape) -> Vec<E> {
    let (n, out_c, oh, ow) = (out_shape.n(), out_shape.c(), out_shape.h(), out_shape.w());
    let mut gb = vec![E::ZERO; out_c];
    for ni in 0..n {
        for oc in 0..out_c {
            let plane = &g[(ni * out_c + oc) * oh * ow..(ni * out_c + oc + 1) * oh * ow];
            let mut acc = E::ZERO;
            for v in plane {
                acc += *v;
            }
            gb[oc] += acc;
        }
    }
    gb
}
