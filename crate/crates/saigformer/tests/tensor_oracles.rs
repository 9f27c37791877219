//! Oracle and invariant tests for the tensor engine: named example values,
//! an independent direct-convolution oracle, finite-difference suites and
//! the layout-op round trips.

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use saigformer::{gradcheck, Shape, Tensor};

/// Independent direct convolution: plain nested loops, no shared code with
/// the engine's kernels.
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    (n, in_c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (out_c, icpg, kh, kw): (usize, usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Vec<f64> {
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let ocpg = out_c / groups;
    let mut out = vec![0.0; n * out_c * oh * ow];
    for ni in 0..n {
        for oc in 0..out_c {
            let g = oc / ocpg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map(|b| b[oc]).unwrap_or(0.0);
                    for ic in 0..icpg {
                        let xc = g * icpg + ic;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((ni * in_c + xc) * h + iy as usize) * w + ix as usize]
                                    * wt[((oc * icpg + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((ni * out_c + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn rand_vec(rng: &mut StdRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn conv_identity_kernel_is_identity() {
    let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 3, 3), false, |i| i as f64 * 0.7 - 2.0);
    let w = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 1.0, false);
    let y = x.conv2d(&w, None, 1, 0, 1).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_quarter_kernel_averages() {
    let x = Tensor::<f64>::from_vec(
        Shape::new(1, 1, 2, 2),
        vec![1.0, 2.0, 3.0, 4.0],
        false,
    )
    .unwrap();
    let w = Tensor::<f64>::full(Shape::new(1, 1, 2, 2), 0.25, false);
    let y = x.conv2d(&w, None, 2, 0, 1).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
    assert!((y.data()[0] - 2.5).abs() < 1e-12);
}

#[test]
fn conv_matches_naive_oracle() {
    let mut rng = StdRng::seed_from_u64(11);
    // (shape, kernel, bias, stride, padding, groups)
    let cases = [
        ((1, 4, 8, 8), (4, 1, 3, 3), false, 1, 1, 4), // depthwise
        ((2, 6, 7, 9), (4, 3, 3, 3), true, 1, 1, 2),  // grouped
        ((1, 3, 10, 10), (5, 3, 4, 4), true, 2, 1, 1), // strided 4x4
        ((2, 4, 6, 6), (8, 4, 1, 1), true, 1, 0, 1),  // pointwise
        ((1, 2, 5, 5), (3, 2, 5, 5), false, 1, 2, 1), // kernel = image
    ];
    for ((n, c, h, w), (oc, icpg, kh, kw), with_bias, stride, pad, groups) in cases {
        let xd = rand_vec(&mut rng, n * c * h * w);
        let wd = rand_vec(&mut rng, oc * icpg * kh * kw);
        let bd = with_bias.then(|| rand_vec(&mut rng, oc));
        let x = Tensor::<f64>::from_vec(Shape::new(n, c, h, w), xd.clone(), false).unwrap();
        let wt = Tensor::<f64>::from_vec(Shape::new(oc, icpg, kh, kw), wd.clone(), false).unwrap();
        let bt = bd
            .as_ref()
            .map(|b| Tensor::<f64>::from_vec(Shape::new(1, oc, 1, 1), b.clone(), false).unwrap());
        let y = x.conv2d(&wt, bt.as_ref(), stride, pad, groups).unwrap();
        let expect = naive_conv(
            &xd,
            (n, c, h, w),
            &wd,
            (oc, icpg, kh, kw),
            bd.as_deref(),
            stride,
            pad,
            groups,
        );
        for (a, b) in y.data().iter().zip(&expect) {
            let rel = (a - b).abs() / b.abs().max(1.0);
            assert!(rel < 1e-6, "conv mismatch: {a} vs {b}");
        }
    }
}

#[test]
fn conv_shape_errors_name_the_dimension() {
    let x = Tensor::<f64>::zeros(Shape::new(1, 5, 4, 4), false);
    let w = Tensor::<f64>::zeros(Shape::new(4, 2, 3, 3), false);
    let err = x.conv2d(&w, None, 1, 1, 2).unwrap_err().to_string();
    assert!(err.contains("input channels 5"), "got: {err}");
    let x = Tensor::<f64>::zeros(Shape::new(1, 4, 4, 4), false);
    let w = Tensor::<f64>::zeros(Shape::new(4, 3, 3, 3), false);
    let err = x.conv2d(&w, None, 1, 1, 2).unwrap_err().to_string();
    assert!(err.contains("kernel input-channel dim"), "got: {err}");
}

#[test]
fn layer_norm_constant_channels_are_zero() {
    let x = Tensor::<f64>::full(Shape::new(1, 4, 2, 2), 3.7, false);
    let gain = Tensor::<f64>::full(Shape::new(1, 4, 1, 1), 1.0, false);
    let bias = Tensor::<f64>::zeros(Shape::new(1, 4, 1, 1), false);
    let y = x.layer_norm(&gain, &bias, 1e-6).unwrap();
    for v in y.data() {
        assert!(v.abs() < 1e-9);
    }
}

#[test]
fn layer_norm_two_channel_example() {
    let x = Tensor::<f64>::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 3.0], false).unwrap();
    let gain = Tensor::<f64>::full(Shape::new(1, 2, 1, 1), 1.0, false);
    let bias = Tensor::<f64>::zeros(Shape::new(1, 2, 1, 1), false);
    let y = x.layer_norm(&gain, &bias, 0.0).unwrap();
    assert!((y.data()[0] + 1.0).abs() < 1e-12);
    assert!((y.data()[1] - 1.0).abs() < 1e-12);
}

#[test]
fn layer_norm_statistics() {
    let mut rng = StdRng::seed_from_u64(3);
    let shape = Shape::new(2, 8, 4, 4);
    let x = Tensor::<f64>::from_fn(shape, false, |_| rng.gen_range(-2.0..2.0));
    let gain = Tensor::<f64>::full(Shape::new(1, 8, 1, 1), 1.0, false);
    let bias = Tensor::<f64>::zeros(Shape::new(1, 8, 1, 1), false);
    let y = x.layer_norm(&gain, &bias, 1e-6).unwrap();
    for n in 0..2 {
        for i in 0..4 {
            for j in 0..4 {
                let vals: Vec<f64> = (0..8).map(|c| y.get(n, c, i, j)).collect();
                let mean = vals.iter().sum::<f64>() / 8.0;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
                assert!(mean.abs() < 1e-5, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "var {var}");
            }
        }
    }
}

#[test]
fn layer_norm_rejects_zero_channels() {
    let x = Tensor::<f64>::zeros(Shape::new(1, 0, 2, 2), false);
    let g = Tensor::<f64>::zeros(Shape::new(1, 0, 1, 1), false);
    assert!(x.layer_norm(&g, &g, 1e-6).is_err());
}

#[test]
fn softmax_examples() {
    let x = Tensor::<f64>::full(Shape::new(1, 5, 1, 1), 0.42, false);
    let y = x.softmax(1).unwrap();
    for v in y.data() {
        assert!((v - 0.2).abs() < 1e-12);
    }
    let x = Tensor::<f64>::from_vec(
        Shape::new(1, 2, 1, 1),
        vec![0.0, std::f64::consts::LN_2],
        false,
    )
    .unwrap();
    let y = x.softmax(1).unwrap();
    assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-12);
    assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn softmax_is_stable_for_large_inputs() {
    let x = Tensor::<f64>::from_vec(Shape::new(1, 3, 1, 1), vec![1000.0, 1001.0, 999.0], false)
        .unwrap();
    let y = x.softmax(1).unwrap();
    let total: f64 = y.data().iter().sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert!(y.data().iter().all(|v| v.is_finite() && *v > 0.0));
}

#[test]
fn activation_reference_points() {
    let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 1.0], false).unwrap();
    let g = x.gelu();
    assert_eq!(g.data()[0], 0.0);
    // gelu(1) = 0.5 * (1 + erf(1/sqrt(2))) = Phi(1)
    assert!((g.data()[1] - 0.8413447460685429).abs() < 1e-12);
    let s = x.sigmoid();
    assert_eq!(s.data()[0], 0.5);
}

#[test]
fn sigmoid_symmetry() {
    let mut rng = StdRng::seed_from_u64(5);
    let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 4, 4), false, |_| rng.gen_range(-4.0..4.0));
    let neg = x.mul_scalar(-1.0);
    for (a, b) in x.sigmoid().data().iter().zip(neg.sigmoid().data()) {
        assert!((a + b - 1.0).abs() < 1e-6);
    }
}

#[test]
fn pixel_unshuffle_channel_order() {
    let x = Tensor::<f64>::from_vec(
        Shape::new(1, 1, 2, 2),
        vec![1.0, 2.0, 3.0, 4.0],
        false,
    )
    .unwrap();
    let y = x.pixel_unshuffle(2).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 4, 1, 1));
    // channel c*r^2 + dy*r + dx: row-major within the 2x2 cell
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn pixel_unshuffle_mean_equals_avgpool() {
    let mut rng = StdRng::seed_from_u64(9);
    let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 6, 6), false, |_| rng.gen_range(0.0..1.0));
    let u = x.pixel_unshuffle(2).unwrap();
    for oy in 0..3 {
        for ox in 0..3 {
            let mean = (0..4).map(|c| u.get(0, c, oy, ox)).sum::<f64>() / 4.0;
            let mut pool = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    pool += x.get(0, 0, oy * 2 + dy, ox * 2 + dx);
                }
            }
            pool /= 4.0;
            assert!((mean - pool).abs() < 1e-12);
        }
    }
}

#[test]
fn pixel_resample_divisibility_errors() {
    let x = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 4), false);
    assert!(x.pixel_unshuffle(2).is_err());
    let x = Tensor::<f64>::zeros(Shape::new(1, 6, 2, 2), false);
    assert!(x.pixel_shuffle(2).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let x = Tensor::<f64>::from_fn(Shape::new(2, 3, 2, 2), true, |i| i as f64);
    let grads = x.sum_all().backward().unwrap();
    let g = grads.get(&x).unwrap();
    assert!(g.iter().all(|v| *v == 1.0));
}

#[test]
fn backward_of_sum_of_squares_is_2x() {
    let x = Tensor::<f64>::from_fn(Shape::new(1, 2, 2, 2), true, |i| i as f64 * 0.3 - 1.0);
    let grads = x.mul(&x).unwrap().sum_all().backward().unwrap();
    let g = grads.get(&x).unwrap();
    for (gi, xi) in g.iter().zip(x.data()) {
        assert!((gi - 2.0 * xi).abs() < 1e-12);
    }
}

#[test]
fn backward_requires_scalar() {
    let x = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2), true);
    assert!(x.add_scalar(1.0).backward().is_err());
}

#[test]
fn matmul_hand_example() {
    // [1 2; 3 4] x [5 6; 7 8] = [19 22; 43 50]
    let a = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0], false)
        .unwrap();
    let b = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![5.0, 6.0, 7.0, 8.0], false)
        .unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn forward_determinism_bit_identical() {
    let mut rng = StdRng::seed_from_u64(21);
    let x = Tensor::<f64>::from_fn(Shape::new(2, 4, 8, 8), false, |_| rng.gen_range(-1.0..1.0));
    let w = Tensor::<f64>::from_fn(Shape::new(4, 4, 3, 3), false, |_| rng.gen_range(-0.5..0.5));
    let run = || {
        let y = x.conv2d(&w, None, 1, 1, 1).unwrap().gelu();
        let s = y.softmax(1).unwrap();
        s.mul(&y).unwrap().sum_all().scalar_value()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn gradcheck_tensor_suite_passes() {
    for report in gradcheck::suite_tensor(42) {
        assert!(
            report.passed(),
            "{} failed with rel err {:.3e}",
            report.name,
            report.max_rel_err
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pixel_resample_round_trips_bit_exactly(
        seed in 0u64..1000,
        c in 1usize..4,
        hw in 1usize..5,
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let shape = Shape::new(1, c * 4, hw * 2, hw * 2);
        let x = Tensor::<f64>::from_fn(shape, false, |_| rng.gen_range(-1.0..1.0));
        let back = x.pixel_unshuffle(2).unwrap().pixel_shuffle(2).unwrap();
        prop_assert_eq!(x.data(), back.data());
        let back2 = x.pixel_shuffle(2).unwrap().pixel_unshuffle(2).unwrap();
        prop_assert_eq!(x.data(), back2.data());
    }

    #[test]
    fn softmax_slices_sum_to_one(seed in 0u64..1000, axis in 0usize..4) {
        let mut rng = StdRng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(Shape::new(2, 3, 4, 5), false, |_| rng.gen_range(-5.0..5.0));
        let y = x.softmax(axis).unwrap();
        let dims = y.shape().0;
        // sum along `axis` for a few random slice anchors
        for _ in 0..8 {
            let mut idx = [0usize; 4];
            for (k, v) in idx.iter_mut().enumerate() {
                *v = rng.gen_range(0..dims[k]);
            }
            let mut total = 0.0;
            for k in 0..dims[axis] {
                let mut q = idx;
                q[axis] = k;
                total += y.get(q[0], q[1], q[2], q[3]);
            }
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn transpose_hw_is_involution(seed in 0u64..1000) {
        let mut rng = StdRng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(Shape::new(2, 2, 3, 4), false, |_| rng.gen_range(-1.0..1.0));
        let round = x.transpose_hw().transpose_hw();
        prop_assert_eq!(round.data(), x.data());
    }
}
