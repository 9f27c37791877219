//! The dynamic box-sum graph op: per-pixel fractional box sums over
//! per-channel summed-area tables, differentiable w.r.t. the corner fields.

use super::{Elem, Result, Shape, Tensor, TensorError};
use crate::sat::{BoxQuery, SummedAreaTable};

fn corner_query<E: Elem>(corners: [&[E]; 4], i: usize) -> BoxQuery {
    BoxQuery {
        x0: corners[0][i].to_f64(),
        x1: corners[1][i].to_f64(),
        y0: corners[2][i].to_f64(),
        y1: corners[3][i].to_f64(),
    }
}

pub(super) fn forward<E: Elem>(
    xlo: &Tensor<E>,
    xhi: &Tensor<E>,
    ylo: &Tensor<E>,
    yhi: &Tensor<E>,
    sats: &[SummedAreaTable],
) -> Result<(Vec<E>, Shape)> {
    let s = xlo.shape();
    for (name, t) in [("xhi", xhi), ("ylo", ylo), ("yhi", yhi)] {
        if t.shape() != s {
            return Err(TensorError::Shape {
                op: "dyn_box_sum",
                msg: format!("corner field {name} is {}, expected {s}", t.shape()),
            });
        }
    }
    if s.c() != 1 {
        return Err(TensorError::Shape {
            op: "dyn_box_sum",
            msg: format!("corner fields must have one channel, got {s}"),
        });
    }
    let n = s.n();
    if sats.is_empty() || sats.len() % n != 0 {
        return Err(TensorError::Shape {
            op: "dyn_box_sum",
            msg: format!("{} tables cannot cover batch of {n}", sats.len()),
        });
    }
    let channels = sats.len() / n;
    let hw = s.h() * s.w();
    let data = [xlo.data(), xhi.data(), ylo.data(), yhi.data()];
    for (slot, d) in data.iter().enumerate() {
        if let Some(i) = d.iter().position(|v| v.is_nan()) {
            let _ = slot;
            return Err(TensorError::NanCorner {
                op: "dyn_box_sum",
                index: i,
            });
        }
    }
    let out_shape = Shape::new(n, channels, s.h(), s.w());
    let mut out = vec![E::ZERO; out_shape.numel()];
    for ni in 0..n {
        for p in 0..hw {
            let q = corner_query(data, ni * hw + p);
            for c in 0..channels {
                let sat = &sats[ni * channels + c];
                let v = sat
                    .box_sum_fractional(&q)
                    .expect("NaN corners already rejected");
                out[(ni * channels + c) * hw + p] = E::from_f64(v);
            }
        }
    }
    Ok((out, out_shape))
}

pub(super) fn backward<E: Elem>(
    corners: &[Tensor<E>; 4],
    sats: &[SummedAreaTable],
    out_shape: Shape,
    g: &[E],
) -> [Vec<E>; 4] {
    let s = corners[0].shape();
    let (n, channels) = (out_shape.n(), out_shape.c());
    let hw = s.h() * s.w();
    let data = [
        corners[0].data(),
        corners[1].data(),
        corners[2].data(),
        corners[3].data(),
    ];
    let mut grads = [
        vec![E::ZERO; s.numel()],
        vec![E::ZERO; s.numel()],
        vec![E::ZERO; s.numel()],
        vec![E::ZERO; s.numel()],
    ];
    for ni in 0..n {
        for p in 0..hw {
            let i = ni * hw + p;
            let q = corner_query(data, i);
            let mut acc = [0.0f64; 4];
            for c in 0..channels {
                let sat = &sats[ni * channels + c];
                let d = sat
                    .box_sum_fractional_grad(&q)
                    .expect("NaN corners already rejected");
                let gv = g[(ni * channels + c) * hw + p].to_f64();
                for k in 0..4 {
                    acc[k] += gv * d[k];
                }
            }
            for k in 0..4 {
                grads[k][i] = E::from_f64(acc[k]);
            }
        }
    }
    grads
}
