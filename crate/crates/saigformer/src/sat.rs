//! Summed-area tables with O(1) box sums at integer and fractional corners.
//!
//! The table is padded with a zero top row and left column so that every
//! query is four reads and three additions, with no branching on the box
//! position. Pixel `(row i, col j)` of the source image occupies table cell
//! `(i + 1, j + 1)`; a box `[y0, y1) x [x0, x1)` in padded coordinates sums
//! the pixels with `y0 <= row < y1` and `x0 <= col < x1`.
//!
//! Accumulation is always in `f64`, even for `f32` sources, so that the
//! four-corner combination does not lose mass to cancellation on large
//! images.

use crate::tensor::Elem;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SatError {
    #[error("cannot build a summed-area table from an empty image ({height}x{width})")]
    EmptyImage { height: usize, width: usize },
    #[error("image data length {got} does not match {height}x{width}")]
    DataLength {
        height: usize,
        width: usize,
        got: usize,
    },
    #[error("non-finite value at pixel (row {row}, col {col})")]
    NonFinite { row: usize, col: usize },
    #[error("box corner out of range: {name}={value} not in [0, {max}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        max: f64,
    },
    #[error("box corner {name} is not an integer: {value}")]
    NonInteger { name: &'static str, value: f64 },
    #[error("NaN box corner: {name}")]
    NanCorner { name: &'static str },
    #[error("box corners not ordered: {0}")]
    Unordered(String),
}

/// Rectangular query in padded-table coordinates.
///
/// `(x0, y0)` is the top-left corner and `(x1, y1)` the bottom-right;
/// coordinates may be fractional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxQuery {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxQuery {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, SatError> {
        for (name, v) in [("x0", x0), ("y0", y0), ("x1", x1), ("y1", y1)] {
            if v.is_nan() {
                return Err(SatError::NanCorner { name });
            }
        }
        if x0 > x1 || y0 > y1 {
            return Err(SatError::Unordered(format!(
                "x0={x0} x1={x1} y0={y0} y1={y1}"
            )));
        }
        Ok(BoxQuery { x0, y0, x1, y1 })
    }

    /// Clamp all corners into `[0, w] x [0, h]`.
    pub fn clamped(self, w: f64, h: f64) -> Self {
        BoxQuery {
            x0: self.x0.clamp(0.0, w),
            y0: self.y0.clamp(0.0, h),
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
        }
    }
}

/// Cost of a single query, for the constant-work property check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryCost {
    pub table_reads: u32,
    pub additions: u32,
}

#[derive(Debug, Clone)]
pub struct SummedAreaTable {
    height: usize,
    width: usize,
    /// (height+1) x (width+1), row-major, zero top row and left column.
    table: Vec<f64>,
    checksum: u64,
}

impl SummedAreaTable {
    /// Build the table from a row-major `height x width` image.
    pub fn build<E: Elem>(height: usize, width: usize, data: &[E]) -> Result<Self, SatError> {
        if height == 0 || width == 0 {
            return Err(SatError::EmptyImage { height, width });
        }
        if data.len() != height * width {
            return Err(SatError::DataLength {
                height,
                width,
                got: data.len(),
            });
        }
        let tw = width + 1;
        let mut table = vec![0.0f64; (height + 1) * tw];
        let mut checksum = 0xcbf29ce484222325u64; // FNV-1a offset basis
        for row in 0..height {
            let mut running = 0.0f64;
            for col in 0..width {
                let v = data[row * width + col].to_f64();
                if !v.is_finite() {
                    return Err(SatError::NonFinite { row, col });
                }
                for byte in v.to_bits().to_le_bytes() {
                    checksum ^= u64::from(byte);
                    checksum = checksum.wrapping_mul(0x100000001b3);
                }
                running += v;
                table[(row + 1) * tw + col + 1] = table[row * tw + col + 1] + running;
            }
        }
        Ok(SummedAreaTable {
            height,
            width,
            table,
            checksum,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    /// FNV-1a hash of the source pixel bits, for cache validation.
    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    #[inline]
    fn at(&self, iy: usize, ix: usize) -> f64 {
        self.table[iy * (self.width + 1) + ix]
    }

    /// Exact sum of pixels in `[y0, y1) x [x0, x1)`; corners must be integers
    /// already inside the table.
    pub fn box_sum(&self, q: &BoxQuery) -> Result<f64, SatError> {
        Ok(self.box_sum_instrumented(q)?.0)
    }

    /// `box_sum` plus its constant per-query cost.
    pub fn box_sum_instrumented(&self, q: &BoxQuery) -> Result<(f64, QueryCost), SatError> {
        let (w, h) = (self.width as f64, self.height as f64);
        let mut corners = [0usize; 4];
        for (slot, (name, v, max)) in [
            ("x0", q.x0, w),
            ("x1", q.x1, w),
            ("y0", q.y0, h),
            ("y1", q.y1, h),
        ]
        .iter()
        .enumerate()
        {
            if v.fract() != 0.0 {
                return Err(SatError::NonInteger { name, value: *v });
            }
            if *v < 0.0 || *v > *max {
                return Err(SatError::OutOfRange {
                    name,
                    value: *v,
                    max: *max,
                });
            }
            corners[slot] = *v as usize;
        }
        let [x0, x1, y0, y1] = corners;
        // Four reads, three additions: Eq-of-the-table form br + tl - tr - bl.
        let sum = self.at(y1, x1) + self.at(y0, x0) - self.at(y0, x1) - self.at(y1, x0);
        Ok((
            sum,
            QueryCost {
                table_reads: 4,
                additions: 3,
            },
        ))
    }

    /// Bilinear table value at clamped real coordinates.
    ///
    /// Exact: the continuous prefix integral of a piecewise-constant image is
    /// bilinear within each table cell, so interpolation reproduces the true
    /// fractional-cover integral up to rounding.
    fn interp(&self, x: f64, y: f64) -> f64 {
        let (ix0, wx) = split_coord(x, self.width);
        let (iy0, wy) = split_coord(y, self.height);
        let (ix1, iy1) = (ix0 + 1, iy0 + 1);
        (1.0 - wy) * ((1.0 - wx) * self.at(iy0, ix0) + wx * self.at(iy0, ix1))
            + wy * ((1.0 - wx) * self.at(iy1, ix0) + wx * self.at(iy1, ix1))
    }

    fn interp_dx(&self, x: f64, y: f64) -> f64 {
        let (ix0, _) = split_coord(x, self.width);
        let (iy0, wy) = split_coord(y, self.height);
        (1.0 - wy) * (self.at(iy0, ix0 + 1) - self.at(iy0, ix0))
            + wy * (self.at(iy0 + 1, ix0 + 1) - self.at(iy0 + 1, ix0))
    }

    fn interp_dy(&self, x: f64, y: f64) -> f64 {
        let (ix0, wx) = split_coord(x, self.width);
        let (iy0, _) = split_coord(y, self.height);
        (1.0 - wx) * (self.at(iy0 + 1, ix0) - self.at(iy0, ix0))
            + wx * (self.at(iy0 + 1, ix0 + 1) - self.at(iy0, ix0 + 1))
    }

    /// Box sum with real corners, clamped to the table domain.
    ///
    /// Reduces exactly to [`box_sum`](Self::box_sum) at integer corners.
    pub fn box_sum_fractional(&self, q: &BoxQuery) -> Result<f64, SatError> {
        Ok(self.box_sum_fractional_instrumented(q)?.0)
    }

    pub fn box_sum_fractional_instrumented(
        &self,
        q: &BoxQuery,
    ) -> Result<(f64, QueryCost), SatError> {
        for (name, v) in [("x0", q.x0), ("y0", q.y0), ("x1", q.x1), ("y1", q.y1)] {
            if v.is_nan() {
                return Err(SatError::NanCorner { name });
            }
        }
        let c = q.clamped(self.width as f64, self.height as f64);
        let sum = self.interp(c.x1, c.y1) + self.interp(c.x0, c.y0)
            - self.interp(c.x1, c.y0)
            - self.interp(c.x0, c.y1);
        Ok((
            sum,
            QueryCost {
                table_reads: 16,
                additions: 3,
            },
        ))
    }

    /// Partial derivatives of `box_sum_fractional` w.r.t. `(x0, x1, y0, y1)`.
    ///
    /// Corners clamped away from the domain contribute zero slope.
    pub fn box_sum_fractional_grad(&self, q: &BoxQuery) -> Result<[f64; 4], SatError> {
        for (name, v) in [("x0", q.x0), ("y0", q.y0), ("x1", q.x1), ("y1", q.y1)] {
            if v.is_nan() {
                return Err(SatError::NanCorner { name });
            }
        }
        let (w, h) = (self.width as f64, self.height as f64);
        let c = q.clamped(w, h);
        let live = |v: f64, max: f64| -> f64 {
            if (0.0..=max).contains(&v) {
                1.0
            } else {
                0.0
            }
        };
        let d_x0 = (self.interp_dx(c.x0, c.y0) - self.interp_dx(c.x0, c.y1)) * live(q.x0, w);
        let d_x1 = (self.interp_dx(c.x1, c.y1) - self.interp_dx(c.x1, c.y0)) * live(q.x1, w);
        let d_y0 = (self.interp_dy(c.x0, c.y0) - self.interp_dy(c.x1, c.y0)) * live(q.y0, h);
        let d_y1 = (self.interp_dy(c.x1, c.y1) - self.interp_dy(c.x0, c.y1)) * live(q.y1, h);
        Ok([d_x0, d_x1, d_y0, d_y1])
    }
}

/// Split a clamped coordinate into a base cell index and fractional weight,
/// keeping the lookup of `base + 1` inside the padded table.
#[inline]
fn split_coord(v: f64, max: usize) -> (usize, f64) {
    let base = (v.floor() as usize).min(max.saturating_sub(1));
    (base, v - base as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(h: usize, w: usize) -> SummedAreaTable {
        SummedAreaTable::build(h, w, &vec![1.0f64; h * w]).unwrap()
    }

    #[test]
    fn ones_2x2_interior() {
        let sat = ones(2, 2);
        // interior table (skipping the zero padding) is [[1,2],[2,4]]
        assert_eq!(sat.at(1, 1), 1.0);
        assert_eq!(sat.at(1, 2), 2.0);
        assert_eq!(sat.at(2, 1), 2.0);
        assert_eq!(sat.at(2, 2), 4.0);
    }

    #[test]
    fn bottom_right_is_total() {
        let data: Vec<f64> = (0..35).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let sat = SummedAreaTable::build(5, 7, &data).unwrap();
        let total: f64 = data.iter().sum();
        assert!((sat.at(5, 7) - total).abs() < 1e-12);
    }

    #[test]
    fn empty_image_rejected() {
        assert!(matches!(
            SummedAreaTable::build::<f64>(0, 4, &[]),
            Err(SatError::EmptyImage { .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let err = SummedAreaTable::build(1, 2, &[1.0f64, f64::INFINITY]).unwrap_err();
        assert!(matches!(err, SatError::NonFinite { row: 0, col: 1 }));
    }

    #[test]
    fn full_box_on_ones() {
        let sat = ones(2, 2);
        let q = BoxQuery::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert_eq!(sat.box_sum(&q).unwrap(), 4.0);
    }

    #[test]
    fn degenerate_box_is_zero() {
        let sat = ones(4, 4);
        let q = BoxQuery::new(2.0, 1.0, 2.0, 3.0).unwrap();
        assert_eq!(sat.box_sum(&q).unwrap(), 0.0);
    }

    #[test]
    fn integer_corners_must_be_integer_and_in_range() {
        let sat = ones(4, 4);
        let q = BoxQuery::new(0.5, 0.0, 2.0, 2.0).unwrap();
        assert!(matches!(
            sat.box_sum(&q),
            Err(SatError::NonInteger { name: "x0", .. })
        ));
        let q = BoxQuery::new(0.0, 0.0, 5.0, 2.0).unwrap();
        assert!(matches!(sat.box_sum(&q), Err(SatError::OutOfRange { .. })));
    }

    #[test]
    fn fractional_matches_integer_exactly() {
        let data: Vec<f64> = (0..48).map(|i| ((i * 7919) % 13) as f64 * 0.11).collect();
        let sat = SummedAreaTable::build(6, 8, &data).unwrap();
        for (x0, y0, x1, y1) in [(0.0, 0.0, 8.0, 6.0), (1.0, 2.0, 5.0, 4.0), (3.0, 0.0, 3.0, 6.0)] {
            let q = BoxQuery::new(x0, y0, x1, y1).unwrap();
            assert_eq!(
                sat.box_sum_fractional(&q).unwrap(),
                sat.box_sum(&q).unwrap()
            );
        }
    }

    #[test]
    fn constant_image_gives_area_times_value() {
        let c = 0.731;
        let sat = SummedAreaTable::build(9, 9, &vec![c; 81]).unwrap();
        let q = BoxQuery::new(1.25, 2.5, 6.75, 7.0).unwrap();
        let expect = c * (6.75 - 1.25) * (7.0 - 2.5);
        let got = sat.box_sum_fractional(&q).unwrap();
        assert!((got - expect).abs() / expect.abs() < 1e-6);
    }

    #[test]
    fn nan_corner_rejected() {
        let sat = ones(3, 3);
        let q = BoxQuery {
            x0: f64::NAN,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        };
        assert!(matches!(
            sat.box_sum_fractional(&q),
            Err(SatError::NanCorner { name: "x0" })
        ));
    }

    #[test]
    fn query_cost_is_constant() {
        let sat = ones(16, 16);
        let tiny = BoxQuery::new(7.0, 7.0, 8.0, 8.0).unwrap();
        let huge = BoxQuery::new(0.0, 0.0, 16.0, 16.0).unwrap();
        let (_, c1) = sat.box_sum_instrumented(&tiny).unwrap();
        let (_, c2) = sat.box_sum_instrumented(&huge).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(c1.table_reads, 4);
        assert_eq!(c1.additions, 3);
        let f1 = sat
            .box_sum_fractional_instrumented(&BoxQuery::new(0.1, 0.1, 1.3, 2.9).unwrap())
            .unwrap()
            .1;
        let f2 = sat
            .box_sum_fractional_instrumented(&BoxQuery::new(0.1, 0.1, 15.8, 15.2).unwrap())
            .unwrap()
            .1;
        assert_eq!(f1, f2);
    }

    #[test]
    fn clamped_corner_has_zero_slope() {
        let data: Vec<f64> = (0..64).map(|i| (i as f64).sin().abs()).collect();
        let sat = SummedAreaTable::build(8, 8, &data).unwrap();
        let q = BoxQuery {
            x0: -3.0,
            y0: 1.3,
            x1: 4.6,
            y1: 6.2,
        };
        let g = sat.box_sum_fractional_grad(&q).unwrap();
        assert_eq!(g[0], 0.0);
        assert!(g[1] != 0.0);
    }
}
