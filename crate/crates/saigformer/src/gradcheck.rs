//! Central finite-difference verification of analytic gradients.
//!
//! Every differentiable operation in the crate is exercised here in `f64`
//! and compared against central differences with step `1e-4 * max(1, |x|)`.
//! The same suites back the `saig gradcheck` command, which prints one
//! `name max_rel_err` line per check and exits non-zero if any exceeds
//! `1e-4`.

use crate::blocks::{self, AttentionWeights, BlockWeights, FfnWeights, HeadIllumMode};
use crate::network::{self, ModelConfig, Precision};
use crate::nn::ParamSet;
use crate::sai2e::{self, Sai2eWeights};
use crate::sat::SummedAreaTable;
use crate::tensor::{Shape, Tensor};
use crate::train;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::sync::Arc;

pub const TOLERANCE: f64 = 1e-4;
/// Relative error uses `max(|analytic|, |numeric|, DENOM_FLOOR)` in the
/// denominator, so near-zero gradients are judged on absolute error.
const DENOM_FLOOR: f64 = 1e-2;
/// Finite-difference probes per parameter tensor.
const PROBES_PER_TENSOR: usize = 6;

/// Negative-control hook: when this env var is set, analytic gradients of
/// checks whose name contains its value are corrupted before comparison,
/// which the suite must then flag.
pub const FAULT_ENV: &str = "SAIG_GRADCHECK_FAULT";

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

type LossFn<'a> = dyn Fn(&[Tensor<f64>]) -> Tensor<f64> + 'a;

/// Compare analytic gradients of `loss` w.r.t. `leaves` against central
/// finite differences at sampled positions.
pub fn check(name: &str, leaves: &[Tensor<f64>], loss: &LossFn) -> CheckReport {
    let out = loss(leaves);
    assert!(
        out.shape().is_scalar(),
        "gradcheck loss for {name} must be scalar"
    );
    let grads = out.backward().expect("backward failed in gradcheck");
    let fault = match std::env::var(FAULT_ENV) {
        Ok(v) if !v.is_empty() && name.contains(&v) => 1.01,
        _ => 1.0,
    };

    let mut max_rel = 0.0f64;
    let mut probe_rng = StdRng::seed_from_u64(0x5eed_c0de);
    for (li, leaf) in leaves.iter().enumerate() {
        if !leaf.requires_grad() {
            continue;
        }
        let analytic = grads.get(leaf);
        let numel = leaf.numel();
        let positions: Vec<usize> = if numel <= PROBES_PER_TENSOR {
            (0..numel).collect()
        } else {
            (0..PROBES_PER_TENSOR)
                .map(|_| probe_rng.gen_range(0..numel))
                .collect()
        };
        for pos in positions {
            let x0 = leaf.data()[pos];
            let step = 1e-4 * x0.abs().max(1.0);
            let eval = |v: f64| -> f64 {
                let mut replaced: Vec<Tensor<f64>> = leaves.to_vec();
                let mut data = leaf.data().to_vec();
                data[pos] = v;
                replaced[li] = Tensor::from_vec(leaf.shape(), data, true).expect("leaf shape");
                loss(&replaced).scalar_value()
            };
            let numeric = (eval(x0 + step) - eval(x0 - step)) / (2.0 * step);
            let a = analytic.map(|g| g[pos]).unwrap_or(0.0) * fault;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    CheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
    }
}

fn rand_tensor(rng: &mut StdRng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, true, |_| rng.gen_range(lo..hi))
}

/// Gradient suite for the core tensor operations.
pub fn suite_tensor(seed: u64) -> Vec<CheckReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut reports = Vec::new();

    for instance in 0..3 {
        let tag = |op: &str| format!("tensor.{op}[{instance}]");
        let x = rand_tensor(&mut rng, Shape::new(2, 3, 4, 5), -1.5, 1.5);
        let y = rand_tensor(&mut rng, Shape::new(2, 3, 4, 5), 0.3, 1.8);
        let per_c = rand_tensor(&mut rng, Shape::new(1, 3, 1, 1), 0.5, 1.5);

        reports.push(check(&tag("add"), &[x.clone(), y.clone()], &|l| {
            l[0].add(&l[1]).unwrap().sum_all()
        }));
        reports.push(check(&tag("sub"), &[x.clone(), y.clone()], &|l| {
            l[0].sub(&l[1]).unwrap().mean_all()
        }));
        reports.push(check(&tag("mul"), &[x.clone(), y.clone()], &|l| {
            l[0].mul(&l[1]).unwrap().sum_all()
        }));
        reports.push(check(&tag("div"), &[x.clone(), y.clone()], &|l| {
            l[0].div(&l[1]).unwrap().sum_all()
        }));
        reports.push(check(
            &tag("div_broadcast"),
            &[x.clone(), per_c.clone()],
            &|l| l[0].div(&l[1]).unwrap().sum_all(),
        ));
        reports.push(check(&tag("gelu"), &[x.clone()], &|l| {
            l[0].gelu().sum_all()
        }));
        reports.push(check(&tag("sigmoid"), &[x.clone()], &|l| {
            l[0].sigmoid().sum_all()
        }));
        reports.push(check(&tag("softplus"), &[x.clone()], &|l| {
            l[0].softplus().sum_all()
        }));
        reports.push(check(&tag("scalar_ops"), &[x.clone()], &|l| {
            l[0].mul_scalar(1.7).add_scalar(0.3).sum_all()
        }));
        reports.push(check(&tag("softmax"), &[x.clone()], &|l| {
            // weighted sum so the gradient is not uniform across the slice
            let s = l[0].softmax(1).unwrap();
            let w = Tensor::from_fn(s.shape(), false, |i| (i % 7) as f64 * 0.31 - 0.8);
            s.mul(&w).unwrap().sum_all()
        }));

        let gain = rand_tensor(&mut rng, Shape::new(1, 3, 1, 1), 0.5, 1.5);
        let bias = rand_tensor(&mut rng, Shape::new(1, 3, 1, 1), -0.5, 0.5);
        reports.push(check(
            &tag("layer_norm"),
            &[x.clone(), gain.clone(), bias.clone()],
            &|l| {
                let y = l[0].layer_norm(&l[1], &l[2], 1e-6).unwrap();
                let w = Tensor::from_fn(y.shape(), false, |i| ((i % 5) as f64) * 0.2 - 0.4);
                y.mul(&w).unwrap().sum_all()
            },
        ));

        let cx = rand_tensor(&mut rng, Shape::new(1, 4, 6, 6), -1.0, 1.0);
        let cw = rand_tensor(&mut rng, Shape::new(3, 4, 3, 3), -0.5, 0.5);
        let cb = rand_tensor(&mut rng, Shape::new(1, 3, 1, 1), -0.2, 0.2);
        reports.push(check(
            &tag("conv2d_3x3"),
            &[cx.clone(), cw.clone(), cb.clone()],
            &|l| l[0].conv2d(&l[1], Some(&l[2]), 1, 1, 1).unwrap().sum_all(),
        ));

        let dwx = rand_tensor(&mut rng, Shape::new(1, 4, 6, 6), -1.0, 1.0);
        let dww = rand_tensor(&mut rng, Shape::new(4, 1, 3, 3), -0.5, 0.5);
        reports.push(check(&tag("conv2d_depthwise"), &[dwx, dww], &|l| {
            l[0].conv2d(&l[1], None, 1, 1, 4).unwrap().sum_all()
        }));

        let sx = rand_tensor(&mut rng, Shape::new(1, 3, 6, 6), -1.0, 1.0);
        let sw = rand_tensor(&mut rng, Shape::new(3, 1, 4, 4), -0.5, 0.5);
        reports.push(check(&tag("conv2d_4x4_stride2"), &[sx, sw], &|l| {
            l[0].conv2d(&l[1], None, 2, 1, 3).unwrap().sum_all()
        }));

        let px = rand_tensor(&mut rng, Shape::new(1, 4, 4, 4), -1.0, 1.0);
        reports.push(check(&tag("pixel_resample"), &[px], &|l| {
            let u = l[0].pixel_unshuffle(2).unwrap();
            let w = Tensor::from_fn(u.shape(), false, |i| (i % 3) as f64 - 1.0);
            u.mul(&w).unwrap().pixel_shuffle(2).unwrap().sum_all()
        }));

        let ma = rand_tensor(&mut rng, Shape::new(2, 2, 3, 4), -1.0, 1.0);
        let mb = rand_tensor(&mut rng, Shape::new(2, 2, 4, 5), -1.0, 1.0);
        reports.push(check(&tag("matmul"), &[ma, mb], &|l| {
            let w = Tensor::from_fn(Shape::new(2, 2, 3, 5), false, |i| (i % 4) as f64 * 0.25);
            l[0].matmul(&l[1]).unwrap().mul(&w).unwrap().sum_all()
        }));

        let na = rand_tensor(&mut rng, Shape::new(2, 2, 3, 4), -1.0, 1.0);
        let nb = rand_tensor(&mut rng, Shape::new(2, 2, 5, 4), -1.0, 1.0);
        reports.push(check(&tag("matmul_nt"), &[na, nb], &|l| {
            let w = Tensor::from_fn(Shape::new(2, 2, 3, 5), false, |i| (i % 3) as f64 * 0.5 - 0.5);
            l[0].matmul_nt(&l[1]).unwrap().mul(&w).unwrap().sum_all()
        }));

        let tx = rand_tensor(&mut rng, Shape::new(1, 2, 3, 4), -1.0, 1.0);
        reports.push(check(&tag("transpose_reshape"), &[tx], &|l| {
            let t = l[0].transpose_hw().reshape([1, 1, 4, 6]).unwrap();
            let w = Tensor::from_fn(t.shape(), false, |i| i as f64 * 0.05);
            t.mul(&w).unwrap().sum_all()
        }));

        let c1 = rand_tensor(&mut rng, Shape::new(1, 2, 3, 3), -1.0, 1.0);
        let c2 = rand_tensor(&mut rng, Shape::new(1, 3, 3, 3), -1.0, 1.0);
        reports.push(check(&tag("concat_slice"), &[c1, c2], &|l| {
            let cat = Tensor::concat(&[l[0].clone(), l[1].clone()], 1).unwrap();
            let sl = cat.slice(1, 1, 3).unwrap();
            let w = Tensor::from_fn(sl.shape(), false, |i| (i % 2) as f64 + 0.5);
            sl.mul(&w).unwrap().sum_all()
        }));

        reports.push(check(&tag("abs"), &[x.clone()], &|l| {
            // keep probes away from the kink at zero
            l[0].add_scalar(3.0).abs_val().sum_all()
        }));
    }
    reports
}

/// Gradient of fractional box sums w.r.t. the corner fields.
pub fn suite_sat(seed: u64) -> Vec<CheckReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for instance in 0..3 {
        let (h, w) = (7, 9);
        let img: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sat = SummedAreaTable::build(h, w, &img).unwrap();
        let sats = Arc::new(vec![sat]);
        let shape = Shape::new(1, 1, 3, 3);
        // fractional, interior, away from integer-coordinate kinks
        let xlo = Tensor::from_fn(shape, true, |_| rng.gen_range(0.2..3.3) + 0.137);
        let xhi = Tensor::from_fn(shape, true, |_| rng.gen_range(4.2..8.3) + 0.211);
        let ylo = Tensor::from_fn(shape, true, |_| rng.gen_range(0.2..2.8) + 0.173);
        let yhi = Tensor::from_fn(shape, true, |_| rng.gen_range(3.6..6.3) + 0.149);
        let sats_c = Arc::clone(&sats);
        reports.push(check(
            &format!("sat.box_sum_fractional[{instance}]"),
            &[xlo, xhi, ylo, yhi],
            &move |l| {
                Tensor::dyn_box_sum(&l[0], &l[1], &l[2], &l[3], Arc::clone(&sats_c))
                    .unwrap()
                    .sum_all()
            },
        ));
    }
    reports
}

/// SAI2E end to end: gradients of sum(I_L) w.r.t. both sub-networks.
pub fn suite_sai2e(seed: u64) -> Vec<CheckReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for instance in 0..2 {
        let weights = Sai2eWeights::<f64>::random(8, &mut rng);
        let image = Tensor::from_fn(Shape::new(1, 3, 6, 6), false, |_| rng.gen_range(0.05..0.95));
        let w0 = weights.clone();
        let img = image.clone();
        reports.push(check(
            &format!("sai2e.estimate_illumination[{instance}]"),
            &weights.params(),
            &move |l| {
                let w = w0.with_params(l);
                sai2e::estimate_illumination(&img, &w).unwrap().sum_all()
            },
        ));
    }
    reports
}

/// IG-MSA, DG-FFN and the full SAIGT block.
pub fn suite_blocks(seed: u64) -> Vec<CheckReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let (c, heads) = (8, 2);
    for instance in 0..2 {
        let f = Tensor::from_fn(Shape::new(1, c, 4, 4), false, |_| rng.gen_range(-1.0..1.0));
        let il = Tensor::from_fn(Shape::new(1, 3, 4, 4), false, |_| rng.gen_range(0.0..1.0));

        let aw = AttentionWeights::<f64>::random(c, heads, HeadIllumMode::Replicate, &mut rng);
        let (w0, fc, ilc) = (aw.clone(), f.clone(), il.clone());
        reports.push(check(
            &format!("blocks.ig_msa[{instance}]"),
            &aw.params(),
            &move |l| {
                let w = w0.with_params(l);
                blocks::ig_msa(&fc, &ilc, &w, None).unwrap().sum_all()
            },
        ));

        let fw = FfnWeights::<f64>::random(c, 2.0, &mut rng);
        let (w0, fc) = (fw.clone(), f.clone());
        reports.push(check(
            &format!("blocks.dg_ffn[{instance}]"),
            &fw.params(),
            &move |l| {
                let w = w0.with_params(l);
                blocks::dg_ffn(&fc, &w).unwrap().sum_all()
            },
        ));

        let bw = BlockWeights::<f64>::random(c, heads, 2.0, HeadIllumMode::Replicate, &mut rng);
        let (w0, fc, ilc) = (bw.clone(), f.clone(), il.clone());
        reports.push(check(
            &format!("blocks.saigt_block[{instance}]"),
            &bw.params(),
            &move |l| {
                let w = w0.with_params(l);
                blocks::saigt_block(&fc, &ilc, &w, None).unwrap().sum_all()
            },
        ));
    }
    reports
}

/// Full tiny network: output-sum gradients w.r.t. every parameter tensor
/// (sampled positions within each).
pub fn suite_network(seed: u64) -> Vec<CheckReport> {
    let cfg = ModelConfig {
        base_channels: 4,
        block_counts: [1, 1, 1, 1, 1, 1, 1, 1],
        heads: [1, 1, 2, 2],
        ffn_expansion: 2.0,
        sai2e_hidden: 4,
        precision: Precision::F64,
        seed,
        ..ModelConfig::default()
    };
    let model = network::init_model_randomized::<f64>(&cfg).expect("toy model");
    let input = {
        let mut rng = StdRng::seed_from_u64(seed ^ 0x77);
        Tensor::from_fn(Shape::new(1, 3, 8, 8), false, |_| rng.gen_range(0.05..0.95))
    };
    let (m0, inp) = (model.clone(), input.clone());
    vec![check("network.forward[toy]", &model.params(), &move |l| {
        let m = m0.with_params(l);
        network::forward(&m, &inp).unwrap().sum_all()
    })]
}

/// Losses: L1 and the SSIM pipeline.
pub fn suite_train(seed: u64) -> Vec<CheckReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for instance in 0..2 {
        let x = Tensor::from_fn(Shape::new(1, 3, 12, 12), true, |_| rng.gen_range(0.1..0.9));
        let y = Tensor::from_fn(Shape::new(1, 3, 12, 12), false, |_| rng.gen_range(0.1..0.9));
        let yc = y.clone();
        reports.push(check(
            &format!("train.l1_loss[{instance}]"),
            &[x.clone()],
            &move |l| train::l1_loss(&l[0], &yc).unwrap(),
        ));
        let yc = y.clone();
        reports.push(check(
            &format!("train.ssim_loss[{instance}]"),
            &[x.clone()],
            &move |l| train::ssim_loss(&l[0], &yc).unwrap(),
        ));
    }
    reports
}

pub const ALL_MODULES: [&str; 6] = ["tensor", "sat", "sai2e", "blocks", "network", "train"];

pub fn suite(module: &str, seed: u64) -> Vec<CheckReport> {
    match module {
        "tensor" => suite_tensor(seed),
        "sat" => suite_sat(seed),
        "sai2e" => suite_sai2e(seed),
        "blocks" => suite_blocks(seed),
        "network" => suite_network(seed),
        "train" => suite_train(seed),
        _ => Vec::new(),
    }
}

pub fn suite_all(seed: u64) -> Vec<CheckReport> {
    ALL_MODULES.iter().flat_map(|m| suite(m, seed)).collect()
}
