//! PNG decoding/encoding and the bridges between 8-bit images, tensors and
//! diagnostic heatmaps. Only 8-bit RGB and grayscale PNGs are accepted;
//! grayscale is replicated to three channels, alpha and 16-bit files are
//! rejected.

use crate::tensor::{Elem, Shape, Tensor, TensorError};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("cannot open '{path}': {source}")]
    Open {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot decode '{path}': {detail}")]
    Decode { path: String, detail: String },
    #[error("unsupported PNG format in '{path}': {detail}")]
    Unsupported { path: String, detail: String },
    #[error("cannot write '{path}': {detail}")]
    Write { path: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, ImageIoError>;

/// 8-bit sRGB image, row-major RGB triples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert!(width >= 1 && height >= 1, "dimensions must be >= 1");
        assert_eq!(pixels.len(), 3 * width * height, "buffer length");
        RgbImage {
            width,
            height,
            pixels,
        }
    }
}

pub fn load_png(path: &Path) -> Result<RgbImage> {
    let display = path.display().to_string();
    let reader = image::ImageReader::open(path).map_err(|source| ImageIoError::Open {
        path: display.clone(),
        source,
    })?;
    let img = reader.decode().map_err(|e| ImageIoError::Decode {
        path: display.clone(),
        detail: e.to_string(),
    })?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(im) => im,
        image::DynamicImage::ImageLuma8(im) => {
            let (w, h) = im.dimensions();
            let mut pixels = Vec::with_capacity((3 * w * h) as usize);
            for p in im.pixels() {
                pixels.extend_from_slice(&[p[0], p[0], p[0]]);
            }
            return Ok(RgbImage::new(w as usize, h as usize, pixels));
        }
        image::DynamicImage::ImageRgba8(_) | image::DynamicImage::ImageLumaA8(_) => {
            return Err(ImageIoError::Unsupported {
                path: display,
                detail: "alpha channels are not supported".into(),
            })
        }
        other => {
            return Err(ImageIoError::Unsupported {
                path: display,
                detail: format!("only 8-bit RGB or grayscale is supported, got {other:?}"),
            })
        }
    };
    let (w, h) = rgb.dimensions();
    Ok(RgbImage::new(w as usize, h as usize, rgb.into_raw()))
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
            .expect("consistent buffer");
    buf.save(path).map_err(|e| ImageIoError::Write {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Decode to a `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn to_tensor<E: Elem>(img: &RgbImage) -> Tensor<E> {
    let (w, h) = (img.width, img.height);
    let shape = Shape::new(1, 3, h, w);
    let mut data = vec![E::ZERO; 3 * w * h];
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                data[(c * h + i) * w + j] =
                    E::from_f64(img.pixels[(i * w + j) * 3 + c] as f64 / 255.0);
            }
        }
    }
    Tensor::from_vec(shape, data, false).expect("image shape")
}

/// Clamp to `[0, 1]` and quantize by `round(v * 255)`. Batch must be 1.
pub fn from_tensor<E: Elem>(t: &Tensor<E>) -> Result<RgbImage> {
    let s = t.shape();
    if s.n() != 1 || s.c() != 3 {
        return Err(TensorError::Shape {
            op: "from_tensor",
            msg: format!("expected 1x3xHxW, got {s}"),
        }
        .into());
    }
    let (h, w) = (s.h(), s.w());
    let mut pixels = vec![0u8; 3 * w * h];
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let v = t.get(0, c, i, j).to_f64().clamp(0.0, 1.0);
                pixels[(i * w + j) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    Ok(RgbImage::new(w, h, pixels))
}

/// BT.601 luma of `[0, 1]`-scaled pixels, row-major `H x W` map.
pub fn luminance_y(img: &RgbImage) -> Vec<f64> {
    img.pixels
        .chunks_exact(3)
        .map(|p| {
            (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0
        })
        .collect()
}

/// Mirror an out-of-range index into `[0, n)` without repeating the edge
/// sample (reflect-101), bouncing for very small images.
fn mirror_index(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// Reflect-pad on the right/bottom so both spatial dims are multiples of
/// `multiple`. Returns the padded tensor and the original `(h, w)`.
pub fn pad_reflect<E: Elem>(t: &Tensor<E>, multiple: usize) -> (Tensor<E>, (usize, usize)) {
    let s = t.shape();
    let (h, w) = (s.h(), s.w());
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if ph == h && pw == w {
        return (t.detach(), (h, w));
    }
    let out_shape = Shape::new(s.n(), s.c(), ph, pw);
    let data = t.data();
    let mut out = vec![E::ZERO; out_shape.numel()];
    for plane in 0..s.n() * s.c() {
        for i in 0..ph {
            let si = mirror_index(i as isize, h);
            for j in 0..pw {
                let sj = mirror_index(j as isize, w);
                out[(plane * ph + i) * pw + j] = data[(plane * h + si) * w + sj];
            }
        }
    }
    (
        Tensor::from_vec(out_shape, out, false).expect("padded shape"),
        (h, w),
    )
}

/// Undo [`pad_reflect`]: crop back to the original `(h, w)`.
pub fn crop_back<E: Elem>(t: &Tensor<E>, original: (usize, usize)) -> Tensor<E> {
    let s = t.shape();
    let (h, w) = original;
    let data = t.data();
    let mut out = Vec::with_capacity(s.n() * s.c() * h * w);
    for plane in 0..s.n() * s.c() {
        for i in 0..h {
            let row = (plane * s.h() + i) * s.w();
            out.extend_from_slice(&data[row..row + w]);
        }
    }
    Tensor::from_vec(Shape::new(s.n(), s.c(), h, w), out, false).expect("crop shape")
}

/// Min-max normalize into `[0, 1]`; a flat map renders mid-gray (0.5).
pub fn min_max_normalize(map: &[f64]) -> Vec<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return vec![0.5; map.len()];
    }
    map.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Save a min-max normalized map as an 8-bit grayscale PNG.
pub fn save_heatmap_png(map: &[f64], width: usize, height: usize, path: &Path) -> Result<()> {
    assert_eq!(map.len(), width * height, "map length");
    let normalized = min_max_normalize(map);
    let bytes: Vec<u8> = normalized
        .iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect();
    let buf: image::GrayImage =
        image::ImageBuffer::from_raw(width as u32, height as u32, bytes).expect("buffer");
    buf.save(path).map_err(|e| ImageIoError::Write {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}
