//! Training: L1 + SSIM losses, PSNR, cosine schedule, Adam, paired
//! augmentation, the synthetic desk corpus and the fit loop.
//!
//! Determinism: the batch drawn at iteration `t` and its augmentation seeds
//! are pure functions of `(config seed, t)`, so resuming from a snapshot
//! reproduces the uninterrupted run's metric log exactly (in `f64` mode
//! bit-for-bit).

use crate::checkpoint::{self, CheckpointError, TrainState};
use crate::imageio::{self, ImageIoError};
use crate::network::{forward, ModelWeights};
use crate::nn::ParamSet;
use crate::sai2e::{self, OffsetStats};
use crate::tensor::{Elem, GradStore, Shape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const ADAM_EPS: f64 = 1e-8;
/// SSIM window: 11x11 Gaussian, sigma 1.5, K1 = 0.01, K2 = 0.03, peak 1.
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("crop {crop} larger than image {height}x{width}")]
    CropTooLarge {
        crop: usize,
        height: usize,
        width: usize,
    },
    #[error("non-finite loss at iteration {iteration}{}", match .dump { Some(d) => format!("; offending batch dumped to {}", d.display()), None => String::new() })]
    NanLoss {
        iteration: u64,
        dump: Option<PathBuf>,
    },
    #[error("optimizer state mismatch: {0}")]
    StateMismatch(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_l1: f64,
    pub lambda_ssim: f64,
    pub seed: u64,
    pub snapshot_interval: u64,
    /// Optional global-norm gradient clipping; off by default.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    /// Desk-scale defaults; the paper-scale run uses 300k iterations and
    /// 128-pixel crops.
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 8,
            crop_size: 64,
            lr_start: 2e-4,
            lr_end: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            lambda_l1: 1.0,
            lambda_ssim: 1.0,
            seed: 0,
            snapshot_interval: 250,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_end > self.lr_start {
            return Err(TrainError::Config(format!(
                "lr_end {} exceeds lr_start {}",
                self.lr_end, self.lr_start
            )));
        }
        if self.crop_size % 8 != 0 || self.crop_size == 0 {
            return Err(TrainError::Config(format!(
                "crop_size {} must be a positive multiple of 8",
                self.crop_size
            )));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(TrainError::Config(
                "batch_size and iterations must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A low/normal training pair, each `(1, 3, h, w)` in `[0, 1]`.
#[derive(Clone)]
pub struct PairedSample<E: Elem> {
    pub low: Tensor<E>,
    pub normal: Tensor<E>,
    pub provenance: String,
}

// ---- losses and metrics ----

/// Mean absolute difference, as a graph scalar.
pub fn l1_loss<E: Elem>(x: &Tensor<E>, y: &Tensor<E>) -> crate::tensor::Result<Tensor<E>> {
    if x.shape() != y.shape() {
        return Err(TensorError::Shape {
            op: "l1_loss",
            msg: format!("{} vs {}", x.shape(), y.shape()),
        });
    }
    Ok(x.sub(y)?.abs_val().mean_all())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - mid) * (i as f64 - mid)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable Gaussian blur (valid, no padding) via two depthwise convs.
fn ssim_blur<E: Elem>(x: &Tensor<E>, kv: &Tensor<E>, kh: &Tensor<E>) -> crate::tensor::Result<Tensor<E>> {
    let c = x.shape().c();
    x.conv2d(kv, None, 1, 0, c)?.conv2d(kh, None, 1, 0, c)
}

/// Per-pixel SSIM map between same-shape images in `[0, 1]`.
pub fn ssim_map<E: Elem>(x: &Tensor<E>, y: &Tensor<E>) -> crate::tensor::Result<Tensor<E>> {
    if x.shape() != y.shape() {
        return Err(TensorError::Shape {
            op: "ssim",
            msg: format!("{} vs {}", x.shape(), y.shape()),
        });
    }
    let s = x.shape();
    if s.h() < SSIM_WINDOW || s.w() < SSIM_WINDOW {
        return Err(TensorError::Shape {
            op: "ssim",
            msg: format!(
                "image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
                s.h(),
                s.w()
            ),
        });
    }
    let c = s.c();
    let g = gaussian_window();
    let kv = Tensor::from_fn(Shape::new(c, 1, SSIM_WINDOW, 1), false, |i| g[i % SSIM_WINDOW]);
    let kh = Tensor::from_fn(Shape::new(c, 1, 1, SSIM_WINDOW), false, |i| g[i % SSIM_WINDOW]);

    let mu_x = ssim_blur(x, &kv, &kh)?;
    let mu_y = ssim_blur(y, &kv, &kh)?;
    let sigma_x = ssim_blur(&x.mul(x)?, &kv, &kh)?.sub(&mu_x.mul(&mu_x)?)?;
    let sigma_y = ssim_blur(&y.mul(y)?, &kv, &kh)?.sub(&mu_y.mul(&mu_y)?)?;
    let sigma_xy = ssim_blur(&x.mul(y)?, &kv, &kh)?.sub(&mu_x.mul(&mu_y)?)?;

    let num = mu_x
        .mul(&mu_y)?
        .mul_scalar(2.0)
        .add_scalar(SSIM_C1)
        .mul(&sigma_xy.mul_scalar(2.0).add_scalar(SSIM_C2))?;
    let den = mu_x
        .mul(&mu_x)?
        .add(&mu_y.mul(&mu_y)?)?
        .add_scalar(SSIM_C1)
        .mul(&sigma_x.add(&sigma_y)?.add_scalar(SSIM_C2))?;
    num.div(&den)
}

/// Mean SSIM in `[-1, 1]`, averaged over channels and space.
pub fn ssim<E: Elem>(x: &Tensor<E>, y: &Tensor<E>) -> crate::tensor::Result<f64> {
    Ok(ssim_map(x, y)?.mean_all().scalar_value().to_f64())
}

/// `mean(1 - SSIM)` as a graph scalar; range `[0, 2]`.
pub fn ssim_loss<E: Elem>(x: &Tensor<E>, y: &Tensor<E>) -> crate::tensor::Result<Tensor<E>> {
    Ok(ssim_map(x, y)?.mul_scalar(-1.0).add_scalar(1.0).mean_all())
}

/// Peak signal-to-noise ratio in dB; identical images yield the infinity
/// sentinel (printed as `inf`), never a finite number.
pub fn psnr<E: Elem>(x: &Tensor<E>, y: &Tensor<E>, peak: f64) -> f64 {
    assert_eq!(x.shape(), y.shape(), "psnr shape mismatch");
    let mut mse = 0.0f64;
    for (a, b) in x.data().iter().zip(y.data()) {
        let d = a.to_f64() - b.to_f64();
        mse += d * d;
    }
    mse /= x.numel() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Cosine annealing: `lr(0) = lr_start`, `lr(T) = lr_end`.
pub fn cosine_lr(iter: u64, cfg: &TrainConfig) -> f64 {
    let t = iter as f64 / cfg.iterations as f64;
    cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
}

// ---- optimizer ----

pub struct AdamState<E: Elem> {
    pub step: u64,
    pub m: Vec<Vec<E>>,
    pub v: Vec<Vec<E>>,
}

impl<E: Elem> AdamState<E> {
    pub fn new(model: &ModelWeights<E>) -> Self {
        let mut m = Vec::new();
        model.for_each_param(&mut |_, t| m.push(vec![E::ZERO; t.numel()]));
        let v = m.clone();
        AdamState { step: 0, m, v }
    }

    pub fn from_parts(step: u64, m: Vec<Vec<E>>, v: Vec<Vec<E>>) -> Self {
        AdamState { step, m, v }
    }
}

/// One Adam update with bias correction; parameters without a gradient this
/// step keep decaying their moments, which leaves them unchanged from zero.
pub fn adam_step<E: Elem>(
    model: &mut ModelWeights<E>,
    grads: &GradStore<E>,
    state: &mut AdamState<E>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    grad_scale: f64,
) -> Result<()> {
    let n_params = {
        let mut n = 0;
        model.for_each_param(&mut |_, _| n += 1);
        n
    };
    if state.m.len() != n_params || state.v.len() != n_params {
        return Err(TrainError::StateMismatch(format!(
            "state holds {} tensors, model has {n_params}",
            state.m.len()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let (b1, b2) = (E::from_f64(beta1), E::from_f64(beta2));
    let one_m_b1 = E::from_f64(1.0 - beta1);
    let one_m_b2 = E::from_f64(1.0 - beta2);
    let scale = E::from_f64(grad_scale);
    let eps = E::from_f64(ADAM_EPS);
    let step_size = E::from_f64(lr / bc1);
    let inv_sqrt_bc2 = E::from_f64(1.0 / bc2.sqrt());

    let mut idx = 0;
    let mut bad: Option<String> = None;
    model.for_each_param_mut(&mut |name, t| {
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        idx += 1;
        if m.len() != t.numel() {
            bad = Some(format!("state tensor {idx} does not match '{name}'"));
            return;
        }
        let g = grads.get(t);
        let mut data = t.data().to_vec();
        for i in 0..data.len() {
            let gi = g.map(|g| g[i] * scale).unwrap_or(E::ZERO);
            m[i] = b1 * m[i] + one_m_b1 * gi;
            v[i] = b2 * v[i] + one_m_b2 * gi * gi;
            let v_hat_sqrt = v[i].sqrt() * inv_sqrt_bc2;
            data[i] = data[i] - step_size * m[i] / (v_hat_sqrt + eps);
        }
        match Tensor::from_vec(t.shape(), data, true) {
            Ok(nt) => *t = nt,
            Err(e) => bad = Some(e.to_string()),
        }
    });
    if let Some(msg) = bad {
        return Err(TrainError::StateMismatch(msg));
    }
    Ok(())
}

/// Global-norm clip factor for this step's gradients (1.0 when disabled or
/// under the threshold).
pub fn clip_scale<E: Elem>(model: &ModelWeights<E>, grads: &GradStore<E>, max_norm: Option<f64>) -> f64 {
    let Some(max_norm) = max_norm else {
        return 1.0;
    };
    let mut sq = 0.0f64;
    model.for_each_param(&mut |_, t| {
        if let Some(g) = grads.get(t) {
            for v in g {
                let x = v.to_f64();
                sq += x * x;
            }
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        max_norm / norm
    } else {
        1.0
    }
}

// ---- augmentation and synthetic data ----

fn rotate90<E: Elem>(data: &[E], c: usize, h: usize, w: usize) -> Vec<E> {
    // 90 degrees clockwise: out(i, j) = in(h - 1 - j, i); out is w x h.
    let mut out = vec![E::ZERO; data.len()];
    for ci in 0..c {
        let src = &data[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for i in 0..w {
            for j in 0..h {
                dst[i * h + j] = src[(h - 1 - j) * w + i];
            }
        }
    }
    out
}

fn flip_horizontal<E: Elem>(data: &[E], c: usize, h: usize, w: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; data.len()];
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(ci * h + i) * w + j] = data[(ci * h + i) * w + (w - 1 - j)];
            }
        }
    }
    out
}

/// Apply dihedral element `d` (0..8): optional horizontal flip then
/// `d % 4` clockwise quarter turns.
fn dihedral<E: Elem>(t: &Tensor<E>, d: u8) -> Tensor<E> {
    let s = t.shape();
    let (c, mut h, mut w) = (s.c(), s.h(), s.w());
    let mut data = t.data().to_vec();
    if d >= 4 {
        data = flip_horizontal(&data, c, h, w);
    }
    for _ in 0..(d % 4) {
        data = rotate90(&data, c, h, w);
        std::mem::swap(&mut h, &mut w);
    }
    Tensor::from_vec(Shape::new(s.n(), c, h, w), data, false).expect("dihedral shape")
}

fn crop<E: Elem>(t: &Tensor<E>, top: usize, left: usize, size: usize) -> Tensor<E> {
    let s = t.shape();
    let (c, w) = (s.c(), s.w());
    let mut out = Vec::with_capacity(s.n() * c * size * size);
    let data = t.data();
    for ci in 0..s.n() * c {
        for i in 0..size {
            let row = (ci * s.h() + top + i) * w + left;
            out.extend_from_slice(&data[row..row + size]);
        }
    }
    Tensor::from_vec(Shape::new(s.n(), c, size, size), out, false).expect("crop shape")
}

/// Random crop then a uniform dihedral transform, identical on both images.
pub fn augment<E: Elem>(
    sample: &PairedSample<E>,
    crop_size: usize,
    seed: u64,
) -> Result<PairedSample<E>> {
    let s = sample.low.shape();
    if sample.normal.shape() != s {
        return Err(TrainError::Dataset(format!(
            "pair shapes differ: {} vs {}",
            s,
            sample.normal.shape()
        )));
    }
    if crop_size > s.h() || crop_size > s.w() {
        return Err(TrainError::CropTooLarge {
            crop: crop_size,
            height: s.h(),
            width: s.w(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.gen_range(0..=s.h() - crop_size);
    let left = rng.gen_range(0..=s.w() - crop_size);
    let d = rng.gen_range(0..8u8);
    let low = dihedral(&crop(&sample.low, top, left, crop_size), d);
    let normal = dihedral(&crop(&sample.normal, top, left, crop_size), d);
    Ok(PairedSample {
        low,
        normal,
        provenance: format!("{}+aug(seed={seed})", sample.provenance),
    })
}

/// Bilinearly upsample a coarse grid to `size x size`.
fn smooth_field(rng: &mut ChaCha8Rng, grid: usize, size: usize, lo: f64, hi: f64) -> Vec<f64> {
    let coarse: Vec<f64> = (0..grid * grid).map(|_| rng.gen_range(lo..hi)).collect();
    let mut out = Vec::with_capacity(size * size);
    let scale = (grid - 1) as f64 / (size - 1) as f64;
    for i in 0..size {
        let fy = i as f64 * scale;
        let y0 = (fy as usize).min(grid - 2);
        let wy = fy - y0 as f64;
        for j in 0..size {
            let fx = j as f64 * scale;
            let x0 = (fx as usize).min(grid - 2);
            let wx = fx - x0 as f64;
            let v = (1.0 - wy)
                * ((1.0 - wx) * coarse[y0 * grid + x0] + wx * coarse[y0 * grid + x0 + 1])
                + wy * ((1.0 - wx) * coarse[(y0 + 1) * grid + x0]
                    + wx * coarse[(y0 + 1) * grid + x0 + 1]);
            out.push(v);
        }
    }
    out
}

/// Synthetic paired sample: a smooth colored scene with shapes, darkened by
/// a spatially varying gamma field, a global scale and truncated noise.
pub fn synth_pair<E: Elem>(seed: u64, size: usize) -> PairedSample<E> {
    assert!(size % 8 == 0 && size >= 16, "size must be a multiple of 8");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x53594e54); // "SYNT"
    let hw = size * size;

    let mut normal = vec![0.0f64; 3 * hw];
    for ch in 0..3 {
        let field = smooth_field(&mut rng, 4, size, 0.2, 0.9);
        normal[ch * hw..(ch + 1) * hw].copy_from_slice(&field);
    }
    let shapes = rng.gen_range(3..=7);
    for _ in 0..shapes {
        let color = [
            rng.gen_range(0.1..1.0),
            rng.gen_range(0.1..1.0),
            rng.gen_range(0.1..1.0),
        ];
        let alpha = rng.gen_range(0.6..1.0);
        let cx = rng.gen_range(0.0..size as f64);
        let cy = rng.gen_range(0.0..size as f64);
        let extent = rng.gen_range(size as f64 * 0.08..size as f64 * 0.35);
        let disk = rng.gen_bool(0.5);
        for i in 0..size {
            for j in 0..size {
                let (dx, dy) = (j as f64 - cx, i as f64 - cy);
                let inside = if disk {
                    dx * dx + dy * dy <= extent * extent
                } else {
                    dx.abs() <= extent && dy.abs() <= extent * 0.7
                };
                if inside {
                    for ch in 0..3 {
                        let p = &mut normal[ch * hw + i * size + j];
                        *p = (1.0 - alpha) * *p + alpha * color[ch];
                    }
                }
            }
        }
    }
    for v in normal.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    let gamma = smooth_field(&mut rng, 3, size, 1.5, 3.5);
    let scale = rng.gen_range(0.1..0.4);
    let sigma = rng.gen_range(0.01..0.05);
    let noise_dist = Normal::new(0.0, sigma).expect("sigma > 0");
    let mut low = vec![0.0f64; 3 * hw];
    for ch in 0..3 {
        for p in 0..hw {
            let n = normal[ch * hw + p];
            // truncate at 3 sigma so low <= normal + 3 sigma holds pointwise
            let noise: f64 = noise_dist.sample(&mut rng);
            let noise = noise.clamp(-3.0 * sigma, 3.0 * sigma);
            low[ch * hw + p] = (n.powf(gamma[p]) * scale + noise).clamp(0.0, 1.0);
        }
    }

    let shape = Shape::new(1, 3, size, size);
    PairedSample {
        low: Tensor::from_fn(shape, false, |i| low[i]),
        normal: Tensor::from_fn(shape, false, |i| normal[i]),
        provenance: format!("synthetic(seed={seed},size={size})"),
    }
}

/// Where training data comes from.
pub enum DataSource {
    Synthetic { count: usize, size: usize, seed: u64 },
    Dir(PathBuf),
}

/// Load the dataset into memory. A directory source expects `low/` and
/// `normal/` subdirectories with matching PNG filenames; orphans on either
/// side are an error.
pub fn load_dataset<E: Elem>(src: &DataSource) -> Result<Vec<PairedSample<E>>> {
    match src {
        DataSource::Synthetic { count, size, seed } => Ok((0..*count)
            .map(|i| synth_pair(seed.wrapping_add(i as u64), *size))
            .collect()),
        DataSource::Dir(dir) => {
            let list = |sub: &str| -> Result<Vec<String>> {
                let mut names = Vec::new();
                let path = dir.join(sub);
                let entries = fs::read_dir(&path).map_err(|e| {
                    TrainError::Dataset(format!("cannot read {}: {e}", path.display()))
                })?;
                for entry in entries {
                    let entry = entry?;
                    let name = entry.file_name().to_string_lossy().to_string();
                    if name.ends_with(".png") {
                        names.push(name);
                    }
                }
                names.sort();
                Ok(names)
            };
            let lows = list("low")?;
            let normals = list("normal")?;
            let orphan_low: Vec<&String> = lows.iter().filter(|n| !normals.contains(n)).collect();
            let orphan_normal: Vec<&String> =
                normals.iter().filter(|n| !lows.contains(n)).collect();
            if !orphan_low.is_empty() || !orphan_normal.is_empty() {
                return Err(TrainError::Dataset(format!(
                    "unmatched files; low-only: [{}], normal-only: [{}]",
                    orphan_low.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", "),
                    orphan_normal.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
                )));
            }
            if lows.is_empty() {
                return Err(TrainError::Dataset(format!(
                    "no paired PNGs under {}",
                    dir.display()
                )));
            }
            let mut pairs = Vec::with_capacity(lows.len());
            for name in &lows {
                let low = imageio::to_tensor::<E>(&imageio::load_png(&dir.join("low").join(name))?);
                let normal =
                    imageio::to_tensor::<E>(&imageio::load_png(&dir.join("normal").join(name))?);
                if low.shape() != normal.shape() {
                    return Err(TrainError::Dataset(format!(
                        "pair '{name}' has mismatched sizes: {} vs {}",
                        low.shape(),
                        normal.shape()
                    )));
                }
                pairs.push(PairedSample {
                    low,
                    normal,
                    provenance: format!("{}:{name}", dir.display()),
                });
            }
            Ok(pairs)
        }
    }
}

// ---- the fit loop ----

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub l1: f64,
    pub ssim_loss: f64,
    pub psnr_train: f64,
}

#[derive(Debug, Clone)]
pub struct OffsetRow {
    pub iter: u64,
    pub stats: OffsetStats,
}

#[derive(Debug, Default)]
pub struct FitReport {
    pub metrics: Vec<MetricRow>,
    pub offset_rows: Vec<OffsetRow>,
    pub per_iter_loss: Vec<f64>,
    pub final_psnr: f64,
}

fn derive_seed(seed: u64, iter: u64, k: u64) -> u64 {
    // splitmix64 over a combined word; any fixed mixing works, this keeps
    // every (iteration, slot) stream independent of run segmentation
    let mut z = seed
        .wrapping_add(iter.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(k.wrapping_mul(0xD1B54A32D192ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn batch_tensor<E: Elem>(samples: &[PairedSample<E>], pick_low: bool) -> Tensor<E> {
    let s = samples[0].low.shape();
    let mut data = Vec::with_capacity(samples.len() * s.c() * s.h() * s.w());
    for sample in samples {
        let t = if pick_low { &sample.low } else { &sample.normal };
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(
        Shape::new(samples.len(), s.c(), s.h(), s.w()),
        data,
        false,
    )
    .expect("batch shape")
}

/// Mean PSNR of the current model over the clean (unaugmented) dataset.
pub fn eval_psnr<E: Elem>(model: &ModelWeights<E>, data: &[PairedSample<E>]) -> Result<f64> {
    let mut total = 0.0f64;
    for pair in data {
        let out = forward(model, &pair.low)?;
        total += psnr(&out.detach(), &pair.normal, 1.0);
    }
    Ok(total / data.len() as f64)
}

fn append_csv(path: &Path, header: &str, line: &str) -> Result<()> {
    let mut f = if path.exists() {
        fs::OpenOptions::new().append(true).open(path)?
    } else {
        let mut f = fs::File::create(path)?;
        writeln!(f, "{header}")?;
        f
    };
    writeln!(f, "{line}")?;
    Ok(())
}

fn dump_batch<E: Elem>(
    dir: &Path,
    iteration: u64,
    lows: &[PairedSample<E>],
) -> Result<PathBuf> {
    let dump = dir.join(format!("nan_batch_iter{iteration:06}"));
    fs::create_dir_all(&dump)?;
    for (k, s) in lows.iter().enumerate() {
        imageio::save_png(&imageio::from_tensor(&s.low)?, &dump.join(format!("low_{k}.png")))?;
        imageio::save_png(
            &imageio::from_tensor(&s.normal)?,
            &dump.join(format!("normal_{k}.png")),
        )?;
    }
    Ok(dump)
}

/// Train `model` on `data`. Snapshots, the metric CSV and the offset-stats
/// CSV land in `out_dir` when given; `resume` carries `(m, v, adam_step,
/// start_iteration)` recovered from a snapshot.
#[allow(clippy::type_complexity)]
pub fn fit<E: Elem>(
    model: &mut ModelWeights<E>,
    data: &[PairedSample<E>],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<(Vec<Vec<E>>, Vec<Vec<E>>, u64, u64)>,
) -> Result<FitReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Dataset("empty dataset".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let (mut state, start_iter) = match resume {
        Some((m, v, step, start)) => (AdamState::from_parts(step, m, v), start),
        None => (AdamState::new(model), 0),
    };

    let mut report = FitReport::default();
    for t in start_iter..cfg.iterations {
        let lr = cosine_lr(t, cfg);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for k in 0..cfg.batch_size {
            let idx = (t as usize * cfg.batch_size + k) % data.len();
            batch.push(augment(
                &data[idx],
                cfg.crop_size,
                derive_seed(cfg.seed, t, k as u64),
            )?);
        }
        let low = batch_tensor(&batch, true);
        let gt = batch_tensor(&batch, false);

        let out = forward(model, &low)?;
        let l1 = l1_loss(&out, &gt)?;
        let sl = ssim_loss(&out, &gt)?;
        let loss = l1
            .mul_scalar(cfg.lambda_l1)
            .add(&sl.mul_scalar(cfg.lambda_ssim))?;
        let loss_val = loss.scalar_value().to_f64();
        if !loss_val.is_finite() {
            let dump = match out_dir {
                Some(dir) => Some(dump_batch(dir, t, &batch)?),
                None => None,
            };
            return Err(TrainError::NanLoss { iteration: t, dump });
        }
        report.per_iter_loss.push(loss_val);

        let grads = loss.backward()?;
        let scale = clip_scale(model, &grads, cfg.clip_grad_norm);
        adam_step(model, &grads, &mut state, lr, cfg.beta1, cfg.beta2, scale)?;

        let done = t + 1;
        if done % cfg.snapshot_interval == 0 || done == cfg.iterations {
            let psnr_train = eval_psnr(model, data)?;
            let row = MetricRow {
                iter: done,
                lr,
                loss: loss_val,
                l1: l1.scalar_value().to_f64(),
                ssim_loss: sl.scalar_value().to_f64(),
                psnr_train,
            };
            if let Some(dir) = out_dir {
                append_csv(
                    &dir.join("metrics.csv"),
                    "iter,lr,loss,l1,ssim_loss,psnr_train",
                    &format!(
                        "{},{},{},{},{},{}",
                        row.iter, row.lr, row.loss, row.l1, row.ssim_loss, row.psnr_train
                    ),
                )?;
            }
            report.metrics.push(row);

            if let Some(sw) = &model.sai2e {
                let offsets = sai2e::predict_offsets(&data[0].low, &sw.offset_net)?;
                let stats = sai2e::offset_stats(&offsets);
                if let Some(dir) = out_dir {
                    append_csv(
                        &dir.join("offset_stats.csv"),
                        "iter,mean_w,std_w,mean_h,std_h",
                        &format!(
                            "{},{},{},{},{}",
                            done, stats.mean_w, stats.std_w, stats.mean_h, stats.std_h
                        ),
                    )?;
                }
                report.offset_rows.push(OffsetRow { iter: done, stats });
            }

            if let Some(dir) = out_dir {
                checkpoint::save_with_state(
                    model,
                    Some((
                        &state.m,
                        &state.v,
                        TrainState {
                            iteration: done,
                            adam_step: state.step,
                            train_config: cfg.clone(),
                        },
                    )),
                    &dir.join(format!("iter_{done:06}.ckpt")),
                )?;
            }
        }
    }
    report.final_psnr = report
        .metrics
        .last()
        .map(|r| r.psnr_train)
        .unwrap_or(f64::NAN);
    Ok(report)
}
