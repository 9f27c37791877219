//! Block-level oracles: a fully independent loop-based IG-MSA reference,
//! the softmax-column and convex-combination invariants, DG-FFN structure
//! checks, block identity at init and the attention cost law.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use saigformer::blocks::{
    self, attention_matmul_flops, AttentionWeights, BlockWeights, FfnWeights, HeadIllumMode,
};
use saigformer::gradcheck;
use saigformer::nn::{Conv2dLayer, LayerNormLayer};
use saigformer::sai2e::IllumDownsample;
use saigformer::{Shape, Tensor};

fn rand_tensor(rng: &mut StdRng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, false, |_| rng.gen_range(lo..hi))
}

/// Plain-loop IG-MSA reference, sharing no code with the engine.
fn naive_ig_msa(
    f: &Tensor<f64>,
    il: &Tensor<f64>,
    w: &AttentionWeights<f64>,
) -> Vec<f64> {
    let s = f.shape();
    let (c, h, wd) = (s.c(), s.h(), s.w());
    let len = h * wd;
    let heads = w.heads;
    let d = c / heads;

    // pointwise C -> 3C (no bias)
    let wpw = w.qkv_pointwise.weight.data();
    let mut qkv1 = vec![0.0; 3 * c * len];
    for oc in 0..3 * c {
        for p in 0..len {
            let mut acc = 0.0;
            for ic in 0..c {
                acc += wpw[oc * c + ic] * f.data()[ic * len + p];
            }
            qkv1[oc * len + p] = acc;
        }
    }
    // depthwise 3x3 pad 1 (no bias)
    let wdw = w.qkv_depthwise.weight.data();
    let mut qkv = vec![0.0; 3 * c * len];
    for oc in 0..3 * c {
        for i in 0..h {
            for j in 0..wd {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = i as isize + ky - 1;
                        let ix = j as isize + kx - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        acc += wdw[(oc * 3 + ky as usize) * 3 + kx as usize]
                            * qkv1[oc * len + iy as usize * wd + ix as usize];
                    }
                }
                qkv[oc * len + i * wd + j] = acc;
            }
        }
    }
    let q = &qkv[0..c * len];
    let k = &qkv[c * len..2 * c * len];
    let v = &qkv[2 * c * len..3 * c * len];

    // illumination projection 3 -> 3 with bias
    let wil = w.illum_proj.weight.data();
    let bil = w.illum_proj.bias.as_ref().unwrap().data();
    let mut ilp = vec![0.0; 3 * len];
    for oc in 0..3 {
        for p in 0..len {
            let mut acc = bil[oc];
            for ic in 0..3 {
                acc += wil[oc * 3 + ic] * il.data()[ic * len + p];
            }
            ilp[oc * len + p] = acc;
        }
    }

    // per-head attention
    let alpha = w.alpha.data();
    let scale = 1.0 / (len as f64).sqrt();
    let mut pre = vec![0.0; heads * (d + 3) * len];
    for head in 0..heads {
        // q_lg rows: d head-query channels then the 3 illumination channels
        let q_row = |r: usize, p: usize| -> f64 {
            if r < d {
                q[(head * d + r) * len + p]
            } else {
                ilp[(r - d) * len + p]
            }
        };
        // logits[i][j] = sum_p k_i(p) q_lg_j(p) / (alpha * sqrt(L))
        let mut a = vec![0.0; d * (d + 3)];
        for i in 0..d {
            for j in 0..d + 3 {
                let mut acc = 0.0;
                for p in 0..len {
                    acc += k[(head * d + i) * len + p] * q_row(j, p);
                }
                a[i * (d + 3) + j] = acc / alpha[head] * scale;
            }
        }
        // softmax over i (each column sums to 1)
        for j in 0..d + 3 {
            let mut m = f64::NEG_INFINITY;
            for i in 0..d {
                m = m.max(a[i * (d + 3) + j]);
            }
            let mut total = 0.0;
            for i in 0..d {
                let e = (a[i * (d + 3) + j] - m).exp();
                a[i * (d + 3) + j] = e;
                total += e;
            }
            for i in 0..d {
                a[i * (d + 3) + j] /= total;
            }
        }
        // out_j(p) = sum_i A[i][j] v_i(p)
        for j in 0..d + 3 {
            for p in 0..len {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += a[i * (d + 3) + j] * v[(head * d + i) * len + p];
                }
                pre[(head * (d + 3) + j) * len + p] = acc;
            }
        }
    }

    // output projection (C + 3*heads) -> C with bias
    let wo = w.out_proj.weight.data();
    let bo = w.out_proj.bias.as_ref().unwrap().data();
    let width = c + 3 * heads;
    let mut out = vec![0.0; c * len];
    for oc in 0..c {
        for p in 0..len {
            let mut acc = bo[oc];
            for ic in 0..width {
                acc += wo[oc * width + ic] * pre[ic * len + p];
            }
            out[oc * len + p] = acc;
        }
    }
    out
}

#[test]
fn ig_msa_matches_naive_oracle() {
    let mut rng = StdRng::seed_from_u64(31);
    let (c, heads) = (8, 2);
    let w = AttentionWeights::<f64>::random(c, heads, HeadIllumMode::Replicate, &mut rng);
    let f = rand_tensor(&mut rng, Shape::new(1, c, 4, 4), -1.0, 1.0);
    let il = rand_tensor(&mut rng, Shape::new(1, 3, 4, 4), 0.0, 1.0);
    let got = blocks::ig_msa(&f, &il, &w, None).unwrap();
    let want = naive_ig_msa(&f, &il, &w);
    for (a, b) in got.data().iter().zip(&want) {
        let rel = (a - b).abs() / b.abs().max(1e-3);
        assert!(rel < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn ig_msa_single_mode_matches_naive_oracle() {
    let mut rng = StdRng::seed_from_u64(32);
    let c = 8;
    let w = AttentionWeights::<f64>::random(c, 4, HeadIllumMode::Single, &mut rng);
    assert_eq!(w.heads, 1, "single mode collapses to one head");
    assert_eq!(w.out_proj.weight.shape().c(), c + 3);
    let f = rand_tensor(&mut rng, Shape::new(1, c, 4, 4), -1.0, 1.0);
    let il = rand_tensor(&mut rng, Shape::new(1, 3, 4, 4), 0.0, 1.0);
    let got = blocks::ig_msa(&f, &il, &w, None).unwrap();
    let want = naive_ig_msa(&f, &il, &w);
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() / b.abs().max(1e-3) < 1e-5);
    }
}

#[test]
fn attention_columns_sum_to_one() {
    let mut rng = StdRng::seed_from_u64(33);
    let (c, heads) = (8, 4);
    let w = AttentionWeights::<f64>::random(c, heads, HeadIllumMode::Replicate, &mut rng);
    let f = rand_tensor(&mut rng, Shape::new(2, c, 4, 4), -1.0, 1.0);
    let il = rand_tensor(&mut rng, Shape::new(2, 3, 4, 4), 0.0, 1.0);
    let parts = blocks::ig_msa_parts(&f, &il, &w, None).unwrap();
    let a = &parts.attention;
    let s = a.shape();
    let d = c / heads;
    assert_eq!(s, Shape::new(2, heads, d, d + 3));
    for n in 0..2 {
        for head in 0..heads {
            for j in 0..d + 3 {
                let total: f64 = (0..d).map(|i| a.get(n, head, i, j)).sum();
                assert!((total - 1.0).abs() < 1e-6, "column ({n},{head},{j})");
            }
        }
    }
}

#[test]
fn constant_value_channels_pass_through_before_projection() {
    let mut rng = StdRng::seed_from_u64(34);
    let (c, heads) = (6, 2);
    let mut w = AttentionWeights::<f64>::random(c, heads, HeadIllumMode::Replicate, &mut rng);
    // make all value channels identical: duplicate one pointwise row and one
    // depthwise kernel across the V section (channels 2C..3C)
    let mut pw = w.qkv_pointwise.weight.data().to_vec();
    let row: Vec<f64> = pw[2 * c * c..2 * c * c + c].to_vec();
    for vc in 0..c {
        pw[(2 * c + vc) * c..(2 * c + vc + 1) * c].copy_from_slice(&row);
    }
    w.qkv_pointwise.weight =
        Tensor::from_vec(w.qkv_pointwise.weight.shape(), pw, true).unwrap();
    let mut dw = w.qkv_depthwise.weight.data().to_vec();
    let kernel: Vec<f64> = dw[2 * c * 9..2 * c * 9 + 9].to_vec();
    for vc in 0..c {
        dw[(2 * c + vc) * 9..(2 * c + vc + 1) * 9].copy_from_slice(&kernel);
    }
    w.qkv_depthwise.weight =
        Tensor::from_vec(w.qkv_depthwise.weight.shape(), dw, true).unwrap();

    let f = rand_tensor(&mut rng, Shape::new(1, c, 4, 4), -1.0, 1.0);
    let il = rand_tensor(&mut rng, Shape::new(1, 3, 4, 4), 0.0, 1.0);
    let parts = blocks::ig_msa_parts(&f, &il, &w, None).unwrap();
    // every pre-projection channel is a convex combination of identical value
    // channels, hence equals that shared spatial pattern
    let hw = 16;
    let shared = &parts.value.data()[0..hw];
    for ch in 0..parts.pre_projection.shape().c() {
        for p in 0..hw {
            let got = parts.pre_projection.data()[ch * hw + p];
            assert!(
                (got - shared[p]).abs() < 1e-6,
                "channel {ch} deviates from the shared value pattern"
            );
        }
    }
}

#[test]
fn illumination_bypasses_layer_norms() {
    let mut rng = StdRng::seed_from_u64(35);
    let (c, heads) = (8, 2);
    let bw = BlockWeights::<f64>::random(c, heads, 2.0, HeadIllumMode::Replicate, &mut rng);
    let f = rand_tensor(&mut rng, Shape::new(1, c, 4, 4), -1.0, 1.0);
    let il = rand_tensor(&mut rng, Shape::new(1, 3, 4, 4), 0.0, 1.0);

    let run = |ln: &LayerNormLayer<f64>| {
        let x = ln.apply(&f).unwrap();
        blocks::ig_msa_parts(&x, &il, &bw.attn, None).unwrap()
    };
    let p1 = run(&bw.ln1);
    let perturbed = LayerNormLayer {
        gain: Tensor::full(Shape::new(1, c, 1, 1), 1.7, true),
        bias: Tensor::full(Shape::new(1, c, 1, 1), -0.3, true),
    };
    let p2 = run(&perturbed);
    // the projected illumination contribution to the query is untouched by
    // the layer-norm parameters
    assert_eq!(p1.illum_projected.data(), p2.illum_projected.data());
    // while the feature-derived query does change
    assert_ne!(p1.query.data(), p2.query.data());
}

#[test]
fn ig_msa_resolution_rules() {
    let mut rng = StdRng::seed_from_u64(36);
    let (c, heads) = (4, 1);
    let w = AttentionWeights::<f64>::random(c, heads, HeadIllumMode::Replicate, &mut rng);
    let down = IllumDownsample::<f64>::init(&mut rng);
    let f = rand_tensor(&mut rng, Shape::new(1, c, 4, 4), -1.0, 1.0);

    // matching resolution works without a downsampler
    let il = rand_tensor(&mut rng, Shape::new(1, 3, 4, 4), 0.0, 1.0);
    assert!(blocks::ig_msa(&f, &il, &w, None).is_ok());

    // one level up requires the downsampler
    let il2 = rand_tensor(&mut rng, Shape::new(1, 3, 8, 8), 0.0, 1.0);
    assert!(blocks::ig_msa(&f, &il2, &w, None).is_err());
    assert!(blocks::ig_msa(&f, &il2, &w, Some(&down)).is_ok());

    // two levels up is out of contract
    let il4 = rand_tensor(&mut rng, Shape::new(1, 3, 16, 16), 0.0, 1.0);
    assert!(blocks::ig_msa(&f, &il4, &w, Some(&down)).is_err());
}

#[test]
fn dg_ffn_zero_weights_give_zero() {
    let c = 6;
    let w = FfnWeights::<f64> {
        w1: Conv2dLayer::zeroed(12, c, 1, 1, 0, 1, true),
        w2: Conv2dLayer::zeroed(12, c, 1, 1, 0, 1, true),
        out: Conv2dLayer::zeroed(c, 12, 1, 1, 0, 1, true),
    };
    let mut rng = StdRng::seed_from_u64(37);
    let f = rand_tensor(&mut rng, Shape::new(1, c, 3, 3), -1.0, 1.0);
    let y = blocks::dg_ffn(&f, &w).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn dg_ffn_tied_weights_match_elementwise_oracle() {
    let mut rng = StdRng::seed_from_u64(38);
    let c = 4;
    let mut w = FfnWeights::<f64>::random(c, 2.0, &mut rng);
    w.w2 = w.w1.clone(); // tie the two branches

    let f = rand_tensor(&mut rng, Shape::new(1, c, 3, 3), -1.0, 1.0);
    let got = blocks::dg_ffn(&f, &w).unwrap();

    // independent elementwise evaluation: u = W1 f (pointwise), then
    // W_out(gelu(u) u + sigmoid(u) u)
    let hw = 9;
    let hidden = w.w1.out_channels();
    let w1 = w.w1.weight.data();
    let b1 = w.w1.bias.as_ref().unwrap().data();
    let mut u = vec![0.0; hidden * hw];
    for oc in 0..hidden {
        for p in 0..hw {
            let mut acc = b1[oc];
            for ic in 0..c {
                acc += w1[oc * c + ic] * f.data()[ic * hw + p];
            }
            u[oc * hw + p] = acc;
        }
    }
    let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let gated: Vec<f64> = u
        .iter()
        .map(|x| gelu(*x) * x + sigmoid(*x) * x)
        .collect();
    let wo = w.out.weight.data();
    let bo = w.out.bias.as_ref().unwrap().data();
    for oc in 0..c {
        for p in 0..hw {
            let mut acc = bo[oc];
            for ic in 0..hidden {
                acc += wo[oc * hidden + ic] * gated[ic * hw + p];
            }
            let gv = got.data()[oc * hw + p];
            assert!((gv - acc).abs() < 1e-9, "{gv} vs {acc}");
        }
    }
}

#[test]
fn block_is_identity_with_zero_output_projections() {
    let mut rng = StdRng::seed_from_u64(39);
    let (c, heads) = (8, 2);
    let w = BlockWeights::<f64>::init(c, heads, 2.66, HeadIllumMode::Replicate, &mut rng, true);
    let f = rand_tensor(&mut rng, Shape::new(2, c, 8, 8), -1.0, 1.0);
    let il = rand_tensor(&mut rng, Shape::new(2, 3, 8, 8), 0.0, 1.0);
    let y = blocks::saigt_block(&f, &il, &w, None).unwrap();
    assert_eq!(y.data(), f.data(), "residual-only path must be exact");
}

#[test]
fn block_preserves_shape_at_every_pyramid_level() {
    let mut rng = StdRng::seed_from_u64(40);
    for (level, (c, heads, hw)) in [(8usize, 1usize, 32usize), (16, 2, 16), (32, 4, 8), (64, 8, 4)]
        .into_iter()
        .enumerate()
    {
        let w = BlockWeights::<f64>::random(c, heads, 2.0, HeadIllumMode::Replicate, &mut rng);
        let f = rand_tensor(&mut rng, Shape::new(1, c, hw, hw), -1.0, 1.0);
        let il = rand_tensor(&mut rng, Shape::new(1, 3, hw, hw), 0.0, 1.0);
        let y = blocks::saigt_block(&f, &il, &w, None).unwrap();
        assert_eq!(y.shape(), f.shape(), "level {level}");
    }
}

#[test]
fn attention_cost_is_linear_in_spatial_size_quadratic_in_channels() {
    let base = attention_matmul_flops(32, 4, 16, 16);
    let double_spatial = attention_matmul_flops(32, 4, 32, 32);
    // linear in H*W: 4x pixels -> 4x flops, not 16x
    assert_eq!(double_spatial, 4 * base);
    let double_channels = attention_matmul_flops(64, 4, 16, 16);
    // quadratic-ish in C (d(d+3) term): strictly more than 2x, less than 8x
    assert!(double_channels > 2 * base && double_channels < 8 * base);
    let ratio = double_channels as f64 / base as f64;
    assert!((3.0..5.0).contains(&ratio), "got {ratio}");
}

#[test]
fn block_gradients_pass_finite_differences() {
    for report in gradcheck::suite_blocks(41) {
        assert!(
            report.passed(),
            "{} failed with rel err {:.3e}",
            report.name,
            report.max_rel_err
        );
    }
}
