//! Spatially-Adaptive Integral Illumination Estimator.
//!
//! Two tiny sub-networks predict, per pixel, a deformable integration window
//! (Offset-Net) and a modulation coefficient (Modulation-Net). Each channel
//! of the input image is reduced to one summed-area table, the window sums
//! are read off with four interpolated lookups per pixel, normalized by the
//! window area, and rescaled by the reciprocal modulation.
//!
//! Offsets are normalized extents in `(0, 1)`: a pixel's window reaches
//! `offset * dim / 2` pixels from its center in each direction, so the area
//! term `(t + b)(l + r) h w / 4` is consistent at any resolution. Window
//! corners are clamped to the image for lookups while the area keeps the
//! unclamped extents, which attenuates the estimate near borders.

use crate::nn::{visit_nested, visit_nested_mut, Conv2dLayer, ParamSet};
use crate::sat::SummedAreaTable;
use crate::tensor::{Elem, Result, Shape, Tensor, TensorError};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Floor added to modulation coefficients so their reciprocal stays finite.
pub const EPS_MOD: f64 = 1e-4;

/// Which illumination estimator the model uses; `AvgPool2x2` is the
/// fixed-window ablation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Sai2e,
    Avgpool2x2,
}

/// Per-pixel window extents, `(N, 4, H, W)`, channels ordered `(t, l, b, r)`,
/// every entry in `(0, 1)`.
#[derive(Clone)]
pub struct OffsetMap<E: Elem>(pub Tensor<E>);

/// Per-pixel modulation coefficients, `(N, 3, H, W)`, entries `>= EPS_MOD`.
#[derive(Clone)]
pub struct ModulationMap<E: Elem>(pub Tensor<E>);

/// Conv3x3 -> GELU -> Conv1x1, the shape of both sub-networks.
#[derive(Clone)]
pub struct SubNet<E: Elem> {
    pub conv1: Conv2dLayer<E>,
    pub conv2: Conv2dLayer<E>,
}

impl<E: Elem> SubNet<E> {
    pub fn init<R: Rng>(rng: &mut R, hidden: usize, out: usize) -> Self {
        SubNet {
            conv1: Conv2dLayer::init(rng, hidden, 3, 3, 1, 1, 1, true),
            conv2: Conv2dLayer::init(rng, out, hidden, 1, 1, 0, 1, true),
        }
    }

    fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.conv2.apply(&self.conv1.apply(x)?.gelu())
    }
}

impl<E: Elem> ParamSet<E> for SubNet<E> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        visit_nested("conv1", &self.conv1, f);
        visit_nested("conv2", &self.conv2, f);
    }
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        visit_nested_mut("conv1", &mut self.conv1, f);
        visit_nested_mut("conv2", &mut self.conv2, f);
    }
}

/// Offset-Net plus an optional Modulation-Net (absent in the
/// "without modulation map" ablation, where coefficients are fixed at 1).
#[derive(Clone)]
pub struct Sai2eWeights<E: Elem> {
    pub hidden: usize,
    pub offset_net: SubNet<E>,
    pub modulation_net: Option<SubNet<E>>,
}

impl<E: Elem> Sai2eWeights<E> {
    pub fn init<R: Rng>(rng: &mut R, hidden: usize, use_modulation: bool) -> Self {
        Sai2eWeights {
            hidden,
            offset_net: SubNet::init(rng, hidden, 4),
            modulation_net: use_modulation.then(|| SubNet::init(rng, hidden, 3)),
        }
    }

    pub fn random<R: Rng>(hidden: usize, rng: &mut R) -> Self {
        Self::init(rng, hidden, true)
    }
}

impl<E: Elem> ParamSet<E> for Sai2eWeights<E> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        visit_nested("offset_net", &self.offset_net, f);
        if let Some(m) = &self.modulation_net {
            visit_nested("modulation_net", m, f);
        }
    }
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        visit_nested_mut("offset_net", &mut self.offset_net, f);
        if let Some(m) = &mut self.modulation_net {
            visit_nested_mut("modulation_net", m, f);
        }
    }
}

fn check_rgb<E: Elem>(op: &'static str, image: &Tensor<E>) -> Result<()> {
    if image.shape().c() != 3 {
        return Err(TensorError::Shape {
            op,
            msg: format!("expected a 3-channel image, got {}", image.shape()),
        });
    }
    Ok(())
}

/// Offset-Net: sigmoid keeps the extents in `(0, 1)`.
pub fn predict_offsets<E: Elem>(image: &Tensor<E>, net: &SubNet<E>) -> Result<OffsetMap<E>> {
    check_rgb("predict_offsets", image)?;
    Ok(OffsetMap(net.apply(image)?.sigmoid()))
}

/// Modulation-Net: softplus plus a small floor keeps coefficients positive.
pub fn predict_modulation<E: Elem>(image: &Tensor<E>, net: &SubNet<E>) -> Result<ModulationMap<E>> {
    check_rgb("predict_modulation", image)?;
    Ok(ModulationMap(net.apply(image)?.softplus().add_scalar(EPS_MOD)))
}

/// Unclamped corner coordinate fields `(x_lo, x_hi, y_lo, y_hi)`, each
/// `(N, 1, H, W)`, in padded-table coordinates (pixel centers at `j + 0.5`).
pub fn corner_tensors<E: Elem>(offsets: &OffsetMap<E>) -> Result<[Tensor<E>; 4]> {
    let s = offsets.0.shape();
    let (h, w) = (s.h(), s.w());
    let t = offsets.0.slice(1, 0, 1)?;
    let l = offsets.0.slice(1, 1, 1)?;
    let b = offsets.0.slice(1, 2, 1)?;
    let r = offsets.0.slice(1, 3, 1)?;
    let grid = Shape::new(1, 1, h, w);
    let xc = Tensor::from_fn(grid, false, |i| (i % w) as f64 + 0.5);
    let yc = Tensor::from_fn(grid, false, |i| (i / w) as f64 + 0.5);
    let half_w = w as f64 / 2.0;
    let half_h = h as f64 / 2.0;
    let x_lo = xc.sub(&l.mul_scalar(half_w))?;
    let x_hi = xc.add(&r.mul_scalar(half_w))?;
    let y_lo = yc.sub(&t.mul_scalar(half_h))?;
    let y_hi = yc.add(&b.mul_scalar(half_h))?;
    Ok([x_lo, x_hi, y_lo, y_hi])
}

/// Window area from unclamped extents: `(t + b)(l + r) h w / 4`, `(N, 1, H, W)`.
pub fn area_tensor<E: Elem>(offsets: &OffsetMap<E>) -> Result<Tensor<E>> {
    let s = offsets.0.shape();
    let t = offsets.0.slice(1, 0, 1)?;
    let l = offsets.0.slice(1, 1, 1)?;
    let b = offsets.0.slice(1, 2, 1)?;
    let r = offsets.0.slice(1, 3, 1)?;
    let tb = t.add(&b)?;
    let lr = l.add(&r)?;
    Ok(tb.mul(&lr)?.mul_scalar(s.h() as f64 * s.w() as f64 / 4.0))
}

/// One summed-area table per `(batch, channel)` pair, channel-major.
pub fn build_sats<E: Elem>(image: &Tensor<E>) -> Result<Vec<SummedAreaTable>> {
    let s = image.shape();
    let (h, w) = (s.h(), s.w());
    let hw = h * w;
    let mut sats = Vec::with_capacity(s.n() * s.c());
    for plane in 0..s.n() * s.c() {
        let sat = SummedAreaTable::build(h, w, &image.data()[plane * hw..(plane + 1) * hw])
            .map_err(|e| TensorError::Shape {
                op: "estimate_illumination",
                msg: e.to_string(),
            })?;
        sats.push(sat);
    }
    Ok(sats)
}

/// Full SAI2E pipeline: offsets, per-channel box sums, area normalization,
/// modulation. Differentiable w.r.t. both sub-networks.
pub fn estimate_illumination<E: Elem>(
    image: &Tensor<E>,
    weights: &Sai2eWeights<E>,
) -> Result<Tensor<E>> {
    check_rgb("estimate_illumination", image)?;
    let offsets = predict_offsets(image, &weights.offset_net)?;
    let [x_lo, x_hi, y_lo, y_hi] = corner_tensors(&offsets)?;
    let sats = Arc::new(build_sats(image)?);
    let sums = Tensor::dyn_box_sum(&x_lo, &x_hi, &y_lo, &y_hi, sats)?;
    let area = area_tensor(&offsets)?;
    let iprime = sums.div(&area)?;
    match &weights.modulation_net {
        Some(net) => {
            let m = predict_modulation(image, net)?;
            iprime.div(&m.0)
        }
        None => Ok(iprime),
    }
}

/// Fixed-window ablation: every pixel's illumination is the mean of its
/// aligned 2x2 block (the block mean broadcast back to the pixel grid).
pub fn avgpool2x2_illumination<E: Elem>(image: &Tensor<E>) -> Result<Tensor<E>> {
    let s = image.shape();
    if s.h() % 2 != 0 || s.w() % 2 != 0 {
        return Err(TensorError::Shape {
            op: "avgpool2x2_illumination",
            msg: format!("spatial dims must be even, got {s}"),
        });
    }
    let (h, w) = (s.h(), s.w());
    let quarter = E::from_f64(0.25);
    let mut out = vec![E::ZERO; s.numel()];
    let data = image.data();
    for plane in 0..s.n() * s.c() {
        let src = &data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for i in (0..h).step_by(2) {
            for j in (0..w).step_by(2) {
                let m = (src[i * w + j] + src[i * w + j + 1]
                    + src[(i + 1) * w + j]
                    + src[(i + 1) * w + j + 1])
                    * quarter;
                dst[i * w + j] = m;
                dst[i * w + j + 1] = m;
                dst[(i + 1) * w + j] = m;
                dst[(i + 1) * w + j + 1] = m;
            }
        }
    }
    Tensor::from_vec(s, out, false)
}

/// The corner field that freezes every window to its aligned 2x2 block, for
/// driving the dynamic-integral path in the ablation configuration.
pub fn frozen_2x2_corners<E: Elem>(batch: usize, h: usize, w: usize) -> [Tensor<E>; 4] {
    let shape = Shape::new(batch, 1, h, w);
    let x_lo = Tensor::from_fn(shape, false, |i| ((i % w) / 2 * 2) as f64);
    let x_hi = Tensor::from_fn(shape, false, |i| ((i % w) / 2 * 2 + 2) as f64);
    let y_lo = Tensor::from_fn(shape, false, |i| (i / w % h / 2 * 2) as f64);
    let y_hi = Tensor::from_fn(shape, false, |i| (i / w % h / 2 * 2 + 2) as f64);
    [x_lo, x_hi, y_lo, y_hi]
}

/// Learned stride-2 illumination downsampler: depthwise 4x4 then pointwise
/// 1x1, halving each spatial dimension.
#[derive(Clone)]
pub struct IllumDownsample<E: Elem> {
    pub depthwise: Conv2dLayer<E>,
    pub pointwise: Conv2dLayer<E>,
}

impl<E: Elem> IllumDownsample<E> {
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        IllumDownsample {
            depthwise: Conv2dLayer::init(rng, 3, 3, 4, 2, 1, 3, true),
            pointwise: Conv2dLayer::init(rng, 3, 3, 1, 1, 0, 1, true),
        }
    }

    pub fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        downsample_illumination(x, self)
    }
}

impl<E: Elem> ParamSet<E> for IllumDownsample<E> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        visit_nested("depthwise", &self.depthwise, f);
        visit_nested("pointwise", &self.pointwise, f);
    }
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        visit_nested_mut("depthwise", &mut self.depthwise, f);
        visit_nested_mut("pointwise", &mut self.pointwise, f);
    }
}

pub fn downsample_illumination<E: Elem>(
    level: &Tensor<E>,
    weights: &IllumDownsample<E>,
) -> Result<Tensor<E>> {
    let s = level.shape();
    if s.h() % 2 != 0 || s.w() % 2 != 0 {
        return Err(TensorError::Shape {
            op: "downsample_illumination",
            msg: format!("spatial dims must be even, got {s}"),
        });
    }
    weights.pointwise.apply(&weights.depthwise.apply(level)?)
}

// ---- diagnostics ----

/// Eagerly evaluated per-pixel window corners (unclamped, Eq-style four
/// corner formulas) and areas, for inspection and statistics.
pub struct CornerField {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub tl: Vec<(f64, f64)>,
    pub tr: Vec<(f64, f64)>,
    pub bl: Vec<(f64, f64)>,
    pub br: Vec<(f64, f64)>,
    /// Window area in px^2 from unclamped extents.
    pub area: Vec<f64>,
}

impl CornerField {
    /// Corners of pixel `idx` clamped to the image bounds, as
    /// `(x_lo, y_lo, x_hi, y_hi)`.
    pub fn clamped_box(&self, idx: usize) -> (f64, f64, f64, f64) {
        let (w, h) = (self.width as f64, self.height as f64);
        (
            self.tl[idx].0.clamp(0.0, w),
            self.tl[idx].1.clamp(0.0, h),
            self.br[idx].0.clamp(0.0, w),
            self.br[idx].1.clamp(0.0, h),
        )
    }
}

/// Evaluate the corner field at crop resolution `(h, w)`.
pub fn corner_field<E: Elem>(offsets: &OffsetMap<E>, crop: (usize, usize)) -> Result<CornerField> {
    let (h, w) = crop;
    if h == 0 || w == 0 {
        return Err(TensorError::Shape {
            op: "corner_field",
            msg: format!("crop dimensions must be positive, got {h}x{w}"),
        });
    }
    let s = offsets.0.shape();
    let (n, mh, mw) = (s.n(), s.h(), s.w());
    let d = offsets.0.data();
    let hw = mh * mw;
    let (half_w, half_h) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut field = CornerField {
        batch: n,
        height: h,
        width: w,
        tl: Vec::with_capacity(n * hw),
        tr: Vec::with_capacity(n * hw),
        bl: Vec::with_capacity(n * hw),
        br: Vec::with_capacity(n * hw),
        area: Vec::with_capacity(n * hw),
    };
    for ni in 0..n {
        for p in 0..hw {
            let (i, j) = (p / mw, p % mw);
            let (xc, yc) = (j as f64 + 0.5, i as f64 + 0.5);
            let t = d[(ni * 4) * hw + p].to_f64();
            let l = d[(ni * 4 + 1) * hw + p].to_f64();
            let b = d[(ni * 4 + 2) * hw + p].to_f64();
            let r = d[(ni * 4 + 3) * hw + p].to_f64();
            field.tl.push((xc - l * half_w, yc - t * half_h));
            field.tr.push((xc + r * half_w, yc - t * half_h));
            field.bl.push((xc - l * half_w, yc + b * half_h));
            field.br.push((xc + r * half_w, yc + b * half_h));
            field.area.push((t + b) * (l + r) * (h * w) as f64 / 4.0);
        }
    }
    Ok(field)
}

/// Per-pixel integration area (px^2) for heatmaps, one map per batch element.
pub fn integration_area_map<E: Elem>(offsets: &OffsetMap<E>, crop: (usize, usize)) -> Vec<f64> {
    let s = offsets.0.shape();
    let (n, mh, mw) = (s.n(), s.h(), s.w());
    let hw = mh * mw;
    let d = offsets.0.data();
    let scale = (crop.0 * crop.1) as f64 / 4.0;
    let mut out = Vec::with_capacity(n * hw);
    for ni in 0..n {
        for p in 0..hw {
            let t = d[(ni * 4) * hw + p].to_f64();
            let l = d[(ni * 4 + 1) * hw + p].to_f64();
            let b = d[(ni * 4 + 2) * hw + p].to_f64();
            let r = d[(ni * 4 + 3) * hw + p].to_f64();
            out.push((t + b) * (l + r) * scale);
        }
    }
    out
}

/// Mean and standard deviation of window widths and heights, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetStats {
    pub mean_w: f64,
    pub std_w: f64,
    pub mean_h: f64,
    pub std_h: f64,
}

pub fn offset_stats<E: Elem>(offsets: &OffsetMap<E>) -> OffsetStats {
    let s = offsets.0.shape();
    let (n, h, w) = (s.n(), s.h(), s.w());
    let hw = h * w;
    let d = offsets.0.data();
    let (half_w, half_h) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut widths = Vec::with_capacity(n * hw);
    let mut heights = Vec::with_capacity(n * hw);
    for ni in 0..n {
        for p in 0..hw {
            let t = d[(ni * 4) * hw + p].to_f64();
            let l = d[(ni * 4 + 1) * hw + p].to_f64();
            let b = d[(ni * 4 + 2) * hw + p].to_f64();
            let r = d[(ni * 4 + 3) * hw + p].to_f64();
            widths.push((l + r) * half_w);
            heights.push((t + b) * half_h);
        }
    }
    let stats = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        (mean, var.sqrt())
    };
    let (mean_w, std_w) = stats(&widths);
    let (mean_h, std_h) = stats(&heights);
    OffsetStats {
        mean_w,
        std_w,
        mean_h,
        std_h,
    }
}
