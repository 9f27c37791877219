//! Data-level kernels for the elementwise, normalization and layout ops.

use super::{BinaryKind, Elem, Result, Shape, Tensor, TensorError, UnaryKind};
use rayon::prelude::*;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

pub(super) fn broadcast_shape(a: Shape, b: Shape, op: &'static str) -> Result<Shape> {
    let mut dims = [0usize; 4];
    for ax in 0..4 {
        let (da, db) = (a.dim(ax), b.dim(ax));
        if da == db || db == 1 {
            dims[ax] = da;
        } else if da == 1 {
            dims[ax] = db;
        } else {
            return Err(TensorError::Shape {
                op,
                msg: format!("axis {ax} not broadcastable: {a} vs {b}"),
            });
        }
    }
    Ok(Shape(dims))
}

/// Strides for reading `shape` as if it had `out` dims (0 on broadcast axes).
fn bcast_strides(shape: Shape, out: Shape) -> [usize; 4] {
    let s = shape.strides();
    let mut r = [0usize; 4];
    for ax in 0..4 {
        r[ax] = if shape.dim(ax) == out.dim(ax) { s[ax] } else { 0 };
    }
    r
}

/// Elementwise kernels switch to rayon above this size.
const PAR_THRESHOLD: usize = 1 << 15;

fn apply_binary<E: Elem>(kind: BinaryKind, a: E, b: E) -> E {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
        BinaryKind::Div => a / b,
    }
}

pub(super) fn binary_forward<E: Elem>(
    kind: BinaryKind,
    a: &Tensor<E>,
    b: &Tensor<E>,
    out_shape: Shape,
) -> Vec<E> {
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == out_shape && b.shape() == out_shape {
        let mut out = vec![E::ZERO; ad.len()];
        let work = |(o, (x, y)): (&mut E, (&E, &E))| *o = apply_binary(kind, *x, *y);
        if ad.len() >= PAR_THRESHOLD {
            out.par_iter_mut()
                .zip_eq(ad.par_iter().zip_eq(bd))
                .for_each(work);
        } else {
            out.iter_mut().zip(ad.iter().zip(bd)).for_each(work);
        }
        return out;
    }
    let sa = bcast_strides(a.shape(), out_shape);
    let sb = bcast_strides(b.shape(), out_shape);
    let [on, oc, oh, ow] = out_shape.0;
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..on {
        for c in 0..oc {
            for h in 0..oh {
                let base_a = n * sa[0] + c * sa[1] + h * sa[2];
                let base_b = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..ow {
                    out.push(apply_binary(
                        kind,
                        ad[base_a + w * sa[3]],
                        bd[base_b + w * sb[3]],
                    ));
                }
            }
        }
    }
    out
}

/// Sum `grad` (shaped `from`) down to `to` over broadcast axes.
fn reduce_to_shape<E: Elem>(grad: &[E], from: Shape, to: Shape) -> Vec<E> {
    if from == to {
        return grad.to_vec();
    }
    let st = bcast_strides(to, from);
    let [fnn, fc, fh, fw] = from.0;
    let mut out = vec![E::ZERO; to.numel()];
    let mut i = 0;
    for n in 0..fnn {
        for c in 0..fc {
            for h in 0..fh {
                let base = n * st[0] + c * st[1] + h * st[2];
                for w in 0..fw {
                    out[base + w * st[3]] += grad[i];
                    i += 1;
                }
            }
        }
    }
    out
}

pub(super) fn binary_backward<E: Elem>(
    kind: BinaryKind,
    a: &Tensor<E>,
    b: &Tensor<E>,
    out: &Tensor<E>,
    g: &[E],
) -> (Vec<E>, Vec<E>) {
    let out_shape = out.shape();
    if a.shape() == out_shape && b.shape() == out_shape {
        let (ad, bd) = (a.data(), b.data());
        let mut ga = vec![E::ZERO; g.len()];
        let mut gb = vec![E::ZERO; g.len()];
        let work = |((ga, gb), ((av, bv), gv)): ((&mut E, &mut E), ((&E, &E), &E))| {
            let (da, db) = match kind {
                BinaryKind::Add => (*gv, *gv),
                BinaryKind::Sub => (*gv, -*gv),
                BinaryKind::Mul => (*gv * *bv, *gv * *av),
                BinaryKind::Div => (*gv / *bv, -*gv * *av / (*bv * *bv)),
            };
            *ga = da;
            *gb = db;
        };
        if g.len() >= PAR_THRESHOLD {
            ga.par_iter_mut()
                .zip_eq(gb.par_iter_mut())
                .zip_eq(ad.par_iter().zip_eq(bd).zip_eq(g))
                .for_each(work);
        } else {
            ga.iter_mut()
                .zip(gb.iter_mut())
                .zip(ad.iter().zip(bd).zip(g))
                .for_each(work);
        }
        return (ga, gb);
    }
    let sa = bcast_strides(a.shape(), out_shape);
    let sb = bcast_strides(b.shape(), out_shape);
    let (ad, bd) = (a.data(), b.data());
    let [on, oc, oh, ow] = out_shape.0;
    let mut ga_full = Vec::with_capacity(g.len());
    let mut gb_full = Vec::with_capacity(g.len());
    let mut i = 0;
    for n in 0..on {
        for c in 0..oc {
            for h in 0..oh {
                let base_a = n * sa[0] + c * sa[1] + h * sa[2];
                let base_b = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..ow {
                    let av = ad[base_a + w * sa[3]];
                    let bv = bd[base_b + w * sb[3]];
                    let gv = g[i];
                    let (da, db) = match kind {
                        BinaryKind::Add => (gv, gv),
                        BinaryKind::Sub => (gv, -gv),
                        BinaryKind::Mul => (gv * bv, gv * av),
                        BinaryKind::Div => (gv / bv, -gv * av / (bv * bv)),
                    };
                    ga_full.push(da);
                    gb_full.push(db);
                    i += 1;
                }
            }
        }
    }
    (
        reduce_to_shape(&ga_full, out_shape, a.shape()),
        reduce_to_shape(&gb_full, out_shape, b.shape()),
    )
}

fn elementwise_map<E: Elem>(x: &[E], f: impl Fn(E) -> E + Send + Sync) -> Vec<E> {
    let mut out = vec![E::ZERO; x.len()];
    if x.len() >= PAR_THRESHOLD {
        out.par_iter_mut()
            .zip_eq(x)
            .for_each(|(o, v)| *o = f(*v));
    } else {
        for (o, v) in out.iter_mut().zip(x) {
            *o = f(*v);
        }
    }
    out
}

fn elementwise_map2<E: Elem>(x: &[E], y: &[E], f: impl Fn(E, E) -> E + Send + Sync) -> Vec<E> {
    let mut out = vec![E::ZERO; x.len()];
    if x.len() >= PAR_THRESHOLD {
        out.par_iter_mut()
            .zip_eq(x.par_iter().zip_eq(y))
            .for_each(|(o, (a, b))| *o = f(*a, *b));
    } else {
        for (o, (a, b)) in out.iter_mut().zip(x.iter().zip(y)) {
            *o = f(*a, *b);
        }
    }
    out
}

pub(super) fn unary_forward<E: Elem>(kind: UnaryKind, x: &[E]) -> Vec<E> {
    match kind {
        UnaryKind::Gelu => elementwise_map(x, |v| {
            let t = (v / E::from_f64(SQRT_2)).erf();
            E::from_f64(0.5) * v * (E::ONE + t)
        }),
        UnaryKind::Sigmoid => elementwise_map(x, |v| E::ONE / (E::ONE + (-v).exp())),
        UnaryKind::Softplus => elementwise_map(x, |v| {
            // max(x, 0) + ln(1 + exp(-|x|)) avoids overflow on both tails
            v.max(E::ZERO) + (E::ONE + (-v.abs()).exp()).ln()
        }),
        UnaryKind::Abs => elementwise_map(x, |v| v.abs()),
    }
}

pub(super) fn unary_backward<E: Elem>(kind: UnaryKind, x: &[E], y: &[E], g: &[E]) -> Vec<E> {
    match kind {
        UnaryKind::Gelu => elementwise_map2(x, g, |v, gv| {
            let phi = E::from_f64(0.5) * (E::ONE + (v / E::from_f64(SQRT_2)).erf());
            let dens = E::from_f64(INV_SQRT_2PI) * (-v * v * E::from_f64(0.5)).exp();
            gv * (phi + v * dens)
        }),
        UnaryKind::Sigmoid => elementwise_map2(y, g, |s, gv| gv * s * (E::ONE - s)),
        UnaryKind::Softplus => elementwise_map2(x, g, |v, gv| gv / (E::ONE + (-v).exp())),
        UnaryKind::Abs => elementwise_map2(x, g, |v, gv| {
            if v > E::ZERO {
                gv
            } else if v < E::ZERO {
                -gv
            } else {
                E::ZERO
            }
        }),
    }
}

// ---- layer norm ----

/// Per-location channel mean and inverse std for one batch element, swept
/// channel-plane by channel-plane so every pass is contiguous.
fn ln_stats<E: Elem>(xn: &[E], c: usize, hw: usize, eps: f64) -> (Vec<E>, Vec<E>) {
    let inv_c = E::from_f64(1.0 / c as f64);
    let eps_e = E::from_f64(eps);
    let mut mean = vec![E::ZERO; hw];
    for ci in 0..c {
        for (m, v) in mean.iter_mut().zip(&xn[ci * hw..(ci + 1) * hw]) {
            *m += *v;
        }
    }
    for m in mean.iter_mut() {
        *m *= inv_c;
    }
    let mut inv_std = vec![E::ZERO; hw];
    for ci in 0..c {
        for (s, (v, m)) in inv_std
            .iter_mut()
            .zip(xn[ci * hw..(ci + 1) * hw].iter().zip(&mean))
        {
            let d = *v - *m;
            *s += d * d;
        }
    }
    for s in inv_std.iter_mut() {
        *s = E::ONE / (*s * inv_c + eps_e).sqrt();
    }
    (mean, inv_std)
}

pub(super) fn layer_norm_forward<E: Elem>(
    x: &Tensor<E>,
    gain: &[E],
    bias: &[E],
    eps: f64,
) -> Vec<E> {
    let s = x.shape();
    let (c, hw) = (s.c(), s.h() * s.w());
    let xd = x.data();
    let mut out = vec![E::ZERO; xd.len()];
    out.par_chunks_mut(c * hw)
        .zip_eq(xd.par_chunks(c * hw))
        .for_each(|(on, xn)| {
            let (mean, inv_std) = ln_stats(xn, c, hw, eps);
            for ci in 0..c {
                let (gc, bc) = (gain[ci], bias[ci]);
                for ((o, v), (m, s)) in on[ci * hw..(ci + 1) * hw]
                    .iter_mut()
                    .zip(&xn[ci * hw..(ci + 1) * hw])
                    .zip(mean.iter().zip(&inv_std))
                {
                    *o = (*v - *m) * *s * gc + bc;
                }
            }
        });
    out
}

pub(super) fn layer_norm_backward<E: Elem>(
    x: &Tensor<E>,
    gain: &[E],
    eps: f64,
    g: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let s = x.shape();
    let (n, c, hw) = (s.n(), s.c(), s.h() * s.w());
    let xd = x.data();
    let inv_c = E::from_f64(1.0 / c as f64);
    let mut gx = vec![E::ZERO; xd.len()];

    // per-element gradients in parallel over the batch, per-channel affine
    // gradients as deterministic per-batch partial sums
    let partials: Vec<(Vec<E>, Vec<E>)> = gx
        .par_chunks_mut(c * hw)
        .enumerate()
        .map(|(ni, gxn)| {
            let xn = &xd[ni * c * hw..(ni + 1) * c * hw];
            let gn = &g[ni * c * hw..(ni + 1) * c * hw];
            let (mean, inv_std) = ln_stats(xn, c, hw, eps);
            let mut s1 = vec![E::ZERO; hw]; // sum_c dy * gain
            let mut s2 = vec![E::ZERO; hw]; // sum_c dy * gain * xhat
            let mut gg = vec![E::ZERO; c];
            let mut gb = vec![E::ZERO; c];
            for ci in 0..c {
                let gc = gain[ci];
                let xs = &xn[ci * hw..(ci + 1) * hw];
                let gs = &gn[ci * hw..(ci + 1) * hw];
                let (mut gg_c, mut gb_c) = (E::ZERO, E::ZERO);
                for p in 0..hw {
                    let xhat = (xs[p] - mean[p]) * inv_std[p];
                    let dxhat = gs[p] * gc;
                    s1[p] += dxhat;
                    s2[p] += dxhat * xhat;
                    gg_c += gs[p] * xhat;
                    gb_c += gs[p];
                }
                gg[ci] = gg_c;
                gb[ci] = gb_c;
            }
            for ci in 0..c {
                let gc = gain[ci];
                let xs = &xn[ci * hw..(ci + 1) * hw];
                let gs = &gn[ci * hw..(ci + 1) * hw];
                let out = &mut gxn[ci * hw..(ci + 1) * hw];
                for p in 0..hw {
                    let xhat = (xs[p] - mean[p]) * inv_std[p];
                    let dxhat = gs[p] * gc;
                    out[p] = inv_std[p] * (dxhat - s1[p] * inv_c - xhat * s2[p] * inv_c);
                }
            }
            (gg, gb)
        })
        .collect();

    let mut gg = vec![E::ZERO; c];
    let mut gb = vec![E::ZERO; c];
    let _ = n;
    for (pg, pb) in &partials {
        for ci in 0..c {
            gg[ci] += pg[ci];
            gb[ci] += pb[ci];
        }
    }
    (gx, gg, gb)
}

// ---- softmax ----

/// Iterate all 1-D lines along `axis`: calls `f(base, stride, len)`.
fn for_each_line(shape: Shape, axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape.dim(axis);
    let stride = shape.strides()[axis];
    let numel = shape.numel();
    let block = len * stride;
    let outer = numel / block;
    for o in 0..outer {
        for i in 0..stride {
            f(o * block + i, stride, len);
        }
    }
}

pub(super) fn softmax_forward<E: Elem>(x: &Tensor<E>, axis: usize) -> Vec<E> {
    let xd = x.data();
    let mut out = vec![E::ZERO; xd.len()];
    for_each_line(x.shape(), axis, |base, stride, len| {
        let mut m = xd[base];
        for k in 1..len {
            m = m.max(xd[base + k * stride]);
        }
        let mut sum = E::ZERO;
        for k in 0..len {
            let e = (xd[base + k * stride] - m).exp();
            out[base + k * stride] = e;
            sum += e;
        }
        for k in 0..len {
            out[base + k * stride] = out[base + k * stride] / sum;
        }
    });
    out
}

pub(super) fn softmax_backward<E: Elem>(y: &Tensor<E>, axis: usize, g: &[E]) -> Vec<E> {
    let yd = y.data();
    let mut gx = vec![E::ZERO; yd.len()];
    for_each_line(y.shape(), axis, |base, stride, len| {
        let mut dot = E::ZERO;
        for k in 0..len {
            dot += g[base + k * stride] * yd[base + k * stride];
        }
        for k in 0..len {
            let i = base + k * stride;
            gx[i] = yd[i] * (g[i] - dot);
        }
    });
    gx
}

// ---- pixel shuffle / unshuffle ----

pub(super) fn pixel_unshuffle<E: Elem>(x: &Tensor<E>, r: usize) -> (Vec<E>, Shape) {
    let s = x.shape();
    let (n, c, h, w) = (s.n(), s.c(), s.h(), s.w());
    let (oh, ow) = (h / r, w / r);
    let out_shape = Shape::new(n, c * r * r, oh, ow);
    let xd = x.data();
    let mut out = vec![E::ZERO; out_shape.numel()];
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let oc = ci * r * r + dy * r + dx;
                    for y in 0..oh {
                        let src_row = s.idx(ni, ci, y * r + dy, dx);
                        let dst_row = out_shape.idx(ni, oc, y, 0);
                        for xcol in 0..ow {
                            out[dst_row + xcol] = xd[src_row + xcol * r];
                        }
                    }
                }
            }
        }
    }
    (out, out_shape)
}

pub(super) fn pixel_unshuffle_backward<E: Elem>(out_shape: Shape, r: usize, g: &[E]) -> Vec<E> {
    // Inverse permutation: shuffle the gradient.
    let t = Tensor::<E>::from_vec(out_shape, g.to_vec(), false).expect("grad shape");
    let (data, _) = pixel_shuffle(&t, r);
    data
}

pub(super) fn pixel_shuffle<E: Elem>(x: &Tensor<E>, r: usize) -> (Vec<E>, Shape) {
    let s = x.shape();
    let (n, c, h, w) = (s.n(), s.c(), s.h(), s.w());
    let oc = c / (r * r);
    let out_shape = Shape::new(n, oc, h * r, w * r);
    let xd = x.data();
    let mut out = vec![E::ZERO; out_shape.numel()];
    for ni in 0..n {
        for co in 0..oc {
            for dy in 0..r {
                for dx in 0..r {
                    let ic = co * r * r + dy * r + dx;
                    for y in 0..h {
                        let src_row = s.idx(ni, ic, y, 0);
                        let dst_row = out_shape.idx(ni, co, y * r + dy, dx);
                        for xcol in 0..w {
                            out[dst_row + xcol * r] = xd[src_row + xcol];
                        }
                    }
                }
            }
        }
    }
    (out, out_shape)
}

pub(super) fn pixel_shuffle_backward<E: Elem>(out_shape: Shape, r: usize, g: &[E]) -> Vec<E> {
    let t = Tensor::<E>::from_vec(out_shape, g.to_vec(), false).expect("grad shape");
    let (data, _) = pixel_unshuffle(&t, r);
    data
}

// ---- matmul / transpose ----

/// out[m x n] += a[m x k] * b[k x n]
fn gemm_nn<E: Elem>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

/// out[m x n] += a[m x k] * b^T where b is [n x k]
fn gemm_nt<E: Elem>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::ZERO;
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[m x n] += a^T * b where a is [k x m], b is [k x n]
fn gemm_tn<E: Elem>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

pub(super) fn matmul_forward<E: Elem>(a: &Tensor<E>, b: &Tensor<E>, out_shape: Shape) -> Vec<E> {
    let (m, k, n) = (a.shape().h(), a.shape().w(), b.shape().w());
    let mut out = vec![E::ZERO; out_shape.numel()];
    let (ad, bd) = (a.data(), b.data());
    out.par_chunks_mut(m * n).enumerate().for_each(|(i, chunk)| {
        gemm_nn(&ad[i * m * k..(i + 1) * m * k], &bd[i * k * n..(i + 1) * k * n], chunk, m, k, n);
    });
    out
}

pub(super) fn matmul_backward<E: Elem>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    g: &[E],
) -> (Vec<E>, Vec<E>) {
    let (m, k, n) = (a.shape().h(), a.shape().w(), b.shape().w());
    let (ad, bd) = (a.data(), b.data());
    let mut ga = vec![E::ZERO; ad.len()];
    let mut gb = vec![E::ZERO; bd.len()];
    // dA = G * B^T ; dB = A^T * G
    ga.par_chunks_mut(m * k).enumerate().for_each(|(i, chunk)| {
        gemm_nt(&g[i * m * n..(i + 1) * m * n], &bd[i * k * n..(i + 1) * k * n], chunk, m, n, k);
    });
    gb.par_chunks_mut(k * n).enumerate().for_each(|(i, chunk)| {
        gemm_tn(&ad[i * m * k..(i + 1) * m * k], &g[i * m * n..(i + 1) * m * n], chunk, k, m, n);
    });
    (ga, gb)
}

/// out[(N,G,R,C)] = A (R x K) * B^T where B is (C x K); rows of both
/// operands are contiguous, so each output element is one long dot product.
pub(super) fn matmul_nt_forward<E: Elem>(a: &Tensor<E>, b: &Tensor<E>, out_shape: Shape) -> Vec<E> {
    let (m, k, n) = (a.shape().h(), a.shape().w(), b.shape().h());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![E::ZERO; out_shape.numel()];
    out.par_chunks_mut(m * n).enumerate().for_each(|(i, chunk)| {
        let abase = &ad[i * m * k..(i + 1) * m * k];
        let bbase = &bd[i * n * k..(i + 1) * n * k];
        for r in 0..m {
            let a_row = &abase[r * k..(r + 1) * k];
            for c in 0..n {
                chunk[r * n + c] = super::conv::dot(a_row, &bbase[c * k..(c + 1) * k]);
            }
        }
    });
    out
}

pub(super) fn matmul_nt_backward<E: Elem>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    g: &[E],
) -> (Vec<E>, Vec<E>) {
    let (m, k, n) = (a.shape().h(), a.shape().w(), b.shape().h());
    let (ad, bd) = (a.data(), b.data());
    let mut ga = vec![E::ZERO; ad.len()];
    let mut gb = vec![E::ZERO; bd.len()];
    // dA = G * B ((m x n)(n x k)); dB = G^T * A ((n x m)(m x k))
    ga.par_chunks_mut(m * k).enumerate().for_each(|(i, chunk)| {
        gemm_nn(&g[i * m * n..(i + 1) * m * n], &bd[i * n * k..(i + 1) * n * k], chunk, m, n, k);
    });
    gb.par_chunks_mut(n * k).enumerate().for_each(|(i, chunk)| {
        gemm_tn(&g[i * m * n..(i + 1) * m * n], &ad[i * m * k..(i + 1) * m * k], chunk, n, m, k);
    });
    (ga, gb)
}

pub(super) fn transpose_hw<E: Elem>(x: &Tensor<E>) -> (Vec<E>, Shape) {
    let s = x.shape();
    let out_shape = Shape::new(s.n(), s.c(), s.w(), s.h());
    (transpose_hw_raw(x.data(), s), out_shape)
}

/// Transpose the last two axes of raw data shaped `from` (used both by the
/// forward op and to route gradients back, since the op is an involution).
pub(super) fn transpose_hw_raw<E: Elem>(data: &[E], from: Shape) -> Vec<E> {
    let (b, h, w) = (from.n() * from.c(), from.h(), from.w());
    let mut out = vec![E::ZERO; data.len()];
    for bi in 0..b {
        let src = &data[bi * h * w..(bi + 1) * h * w];
        let dst = &mut out[bi * h * w..(bi + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[j * h + i] = src[i * w + j];
            }
        }
    }
    out
}

// ---- concat / slice ----

fn outer_inner(shape: Shape, axis: usize) -> (usize, usize) {
    let outer: usize = shape.0[..axis].iter().product();
    let inner: usize = shape.0[axis + 1..].iter().product();
    (outer, inner)
}

pub(super) fn concat_forward<E: Elem>(parts: &[Tensor<E>], axis: usize, out_shape: Shape) -> Vec<E> {
    let (outer, inner) = outer_inner(out_shape, axis);
    let total = out_shape.dim(axis);
    let mut out = vec![E::ZERO; out_shape.numel()];
    for o in 0..outer {
        let mut offset = 0;
        for p in parts {
            let len = p.shape().dim(axis);
            let block = len * inner;
            let src = &p.data()[o * block..(o + 1) * block];
            let dst_start = o * total * inner + offset * inner;
            out[dst_start..dst_start + block].copy_from_slice(src);
            offset += len;
        }
    }
    out
}

pub(super) fn concat_backward<E: Elem>(
    parts: &[Tensor<E>],
    axis: usize,
    out_shape: Shape,
    g: &[E],
) -> Vec<Vec<E>> {
    let (outer, inner) = outer_inner(out_shape, axis);
    let total = out_shape.dim(axis);
    let mut grads: Vec<Vec<E>> = parts.iter().map(|p| vec![E::ZERO; p.numel()]).collect();
    for o in 0..outer {
        let mut offset = 0;
        for (pi, p) in parts.iter().enumerate() {
            let len = p.shape().dim(axis);
            let block = len * inner;
            let src_start = o * total * inner + offset * inner;
            grads[pi][o * block..(o + 1) * block]
                .copy_from_slice(&g[src_start..src_start + block]);
            offset += len;
        }
    }
    grads
}

pub(super) fn slice_forward<E: Elem>(x: &Tensor<E>, axis: usize, start: usize, len: usize) -> Vec<E> {
    let s = x.shape();
    let (outer, inner) = outer_inner(s, axis);
    let total = s.dim(axis);
    let mut out = vec![E::ZERO; outer * len * inner];
    for o in 0..outer {
        let src_start = (o * total + start) * inner;
        out[o * len * inner..(o + 1) * len * inner]
            .copy_from_slice(&x.data()[src_start..src_start + len * inner]);
    }
    out
}

pub(super) fn slice_backward<E: Elem>(
    x_shape: Shape,
    axis: usize,
    start: usize,
    out_shape: Shape,
    g: &[E],
) -> Vec<E> {
    let (outer, inner) = outer_inner(x_shape, axis);
    let total = x_shape.dim(axis);
    let len = out_shape.dim(axis);
    let mut gx = vec![E::ZERO; x_shape.numel()];
    for o in 0..outer {
        let dst_start = (o * total + start) * inner;
        gx[dst_start..dst_start + len * inner]
            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
    }
    gx
}
