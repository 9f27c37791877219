//! SAIGFormer assembly: shallow embedding, four-resolution U-shaped
//! encoder/decoder with pixel unshuffle/shuffle transitions, a shared
//! illumination pyramid, refinement blocks and the global residual.
//!
//! Channel ladder is `C, 2C, 4C, 8C` over resolutions `H, H/2, H/4, H/8`.
//! Downsizing is pixel-unshuffle followed by a 1x1 conv halving the widened
//! channels; upsizing is a 1x1 conv doubling channels followed by
//! pixel-shuffle. Decoder levels at H/4 and H/2 fuse their encoder skip with
//! a 1x1 conv back to the ladder width; the full-resolution decoder keeps the
//! concatenated `2C` channels through the refinement stage, and the final
//! 3x3 conv maps `2C` to the 3-channel residual added onto the input.
//!
//! All residual output projections and the final conv are zero-initialized,
//! so a fresh model is exactly the identity map.

use crate::blocks::{self, BlockWeights, HeadIllumMode};
use crate::nn::{visit_nested, visit_nested_mut, Conv2dLayer, ParamSet};
use crate::sai2e::{self, EstimatorKind, IllumDownsample, Sai2eWeights};
use crate::tensor::{Elem, Result, Shape, Tensor, TensorError};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    /// Blocks per stage: encoder levels 0-2, bottleneck, decoder levels
    /// 2-0, refinement.
    pub block_counts: [usize; 8],
    /// Attention heads per resolution level (mirrored in the decoder).
    pub heads: [usize; 4],
    pub ffn_expansion: f64,
    pub head_illum_mode: HeadIllumMode,
    pub estimator: EstimatorKind,
    pub use_modulation: bool,
    /// Hidden width of the Offset-Net / Modulation-Net 3x3 stage.
    pub sai2e_hidden: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 32,
            block_counts: [4, 6, 6, 8, 6, 6, 4, 4],
            heads: [1, 2, 4, 8],
            ffn_expansion: 2.66,
            head_illum_mode: HeadIllumMode::Replicate,
            estimator: EstimatorKind::Sai2e,
            use_modulation: true,
            sai2e_hidden: 16,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Channel width at resolution level `k` (0 = full resolution).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| TensorError::Shape {
            op: "model_config",
            msg,
        };
        if self.base_channels == 0 {
            return Err(err("base_channels must be positive".into()));
        }
        if self.sai2e_hidden == 0 {
            return Err(err("sai2e_hidden must be positive".into()));
        }
        for (k, &h) in self.heads.iter().enumerate() {
            if h == 0 {
                return Err(err(format!("heads[{k}] must be positive")));
            }
            if self.head_illum_mode == HeadIllumMode::Replicate && self.channels_at(k) % h != 0 {
                return Err(err(format!(
                    "channels at level {k} ({}) not divisible by heads[{k}] = {h}",
                    self.channels_at(k)
                )));
            }
        }
        if blocks::ffn_hidden(self.base_channels, self.ffn_expansion) == 0 {
            return Err(err("ffn_expansion too small for base_channels".into()));
        }
        Ok(())
    }

    /// Names of fields that differ between two configs.
    pub fn diff(&self, other: &ModelConfig) -> Vec<&'static str> {
        let mut d = Vec::new();
        if self.base_channels != other.base_channels {
            d.push("base_channels");
        }
        if self.block_counts != other.block_counts {
            d.push("block_counts");
        }
        if self.heads != other.heads {
            d.push("heads");
        }
        if self.ffn_expansion != other.ffn_expansion {
            d.push("ffn_expansion");
        }
        if self.head_illum_mode != other.head_illum_mode {
            d.push("head_illum_mode");
        }
        if self.estimator != other.estimator {
            d.push("estimator");
        }
        if self.use_modulation != other.use_modulation {
            d.push("use_modulation");
        }
        if self.sai2e_hidden != other.sai2e_hidden {
            d.push("sai2e_hidden");
        }
        if self.precision != other.precision {
            d.push("precision");
        }
        if self.seed != other.seed {
            d.push("seed");
        }
        d
    }
}

#[derive(Clone)]
pub struct ModelWeights<E: Elem> {
    pub config: ModelConfig,
    pub sai2e: Option<Sai2eWeights<E>>,
    pub illum_down: Vec<IllumDownsample<E>>,
    pub shallow: Conv2dLayer<E>,
    pub encoder: [Vec<BlockWeights<E>>; 3],
    pub down_transition: [Conv2dLayer<E>; 3],
    pub bottleneck: Vec<BlockWeights<E>>,
    pub up_transition: [Conv2dLayer<E>; 3],
    /// Skip fusion at decoder levels 2 (H/4) and 1 (H/2).
    pub skip_fuse: [Conv2dLayer<E>; 2],
    pub decoder: [Vec<BlockWeights<E>>; 3],
    pub refinement: Vec<BlockWeights<E>>,
    pub final_conv: Conv2dLayer<E>,
}

impl<E: Elem> ParamSet<E> for ModelWeights<E> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        if let Some(s) = &self.sai2e {
            visit_nested("sai2e", s, f);
        }
        for (k, d) in self.illum_down.iter().enumerate() {
            visit_nested(&format!("illum_down.{k}"), d, f);
        }
        visit_nested("shallow", &self.shallow, f);
        for k in 0..3 {
            for (i, b) in self.encoder[k].iter().enumerate() {
                visit_nested(&format!("encoder{k}.{i}"), b, f);
            }
            visit_nested(&format!("down{k}"), &self.down_transition[k], f);
        }
        for (i, b) in self.bottleneck.iter().enumerate() {
            visit_nested(&format!("bottleneck.{i}"), b, f);
        }
        for k in (0..3).rev() {
            visit_nested(&format!("up{k}"), &self.up_transition[k], f);
            if k >= 1 {
                visit_nested(&format!("fuse{k}"), &self.skip_fuse[k - 1], f);
            }
            for (i, b) in self.decoder[k].iter().enumerate() {
                visit_nested(&format!("decoder{k}.{i}"), b, f);
            }
        }
        for (i, b) in self.refinement.iter().enumerate() {
            visit_nested(&format!("refinement.{i}"), b, f);
        }
        visit_nested("final", &self.final_conv, f);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        if let Some(s) = &mut self.sai2e {
            visit_nested_mut("sai2e", s, f);
        }
        for (k, d) in self.illum_down.iter_mut().enumerate() {
            visit_nested_mut(&format!("illum_down.{k}"), d, f);
        }
        visit_nested_mut("shallow", &mut self.shallow, f);
        for k in 0..3 {
            for (i, b) in self.encoder[k].iter_mut().enumerate() {
                visit_nested_mut(&format!("encoder{k}.{i}"), b, f);
            }
            visit_nested_mut(&format!("down{k}"), &mut self.down_transition[k], f);
        }
        for (i, b) in self.bottleneck.iter_mut().enumerate() {
            visit_nested_mut(&format!("bottleneck.{i}"), b, f);
        }
        for k in (0..3).rev() {
            visit_nested_mut(&format!("up{k}"), &mut self.up_transition[k], f);
            if k >= 1 {
                visit_nested_mut(&format!("fuse{k}"), &mut self.skip_fuse[k - 1], f);
            }
            for (i, b) in self.decoder[k].iter_mut().enumerate() {
                visit_nested_mut(&format!("decoder{k}.{i}"), b, f);
            }
        }
        for (i, b) in self.refinement.iter_mut().enumerate() {
            visit_nested_mut(&format!("refinement.{i}"), b, f);
        }
        visit_nested_mut("final", &mut self.final_conv, f);
    }
}

/// Channel width of the decoder/refinement stage at level `k`.
fn decoder_channels(cfg: &ModelConfig, level: usize) -> usize {
    if level == 0 {
        2 * cfg.base_channels
    } else {
        cfg.channels_at(level)
    }
}

fn build_model<E: Elem>(cfg: &ModelConfig, zero_residual: bool) -> Result<ModelWeights<E>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gamma = cfg.ffn_expansion;
    let mode = cfg.head_illum_mode;

    let sai2e = match cfg.estimator {
        EstimatorKind::Sai2e => Some(Sai2eWeights::init(
            &mut rng,
            cfg.sai2e_hidden,
            cfg.use_modulation,
        )),
        EstimatorKind::Avgpool2x2 => None,
    };
    let illum_down = (0..3).map(|_| IllumDownsample::init(&mut rng)).collect();
    let shallow = Conv2dLayer::init(&mut rng, cfg.base_channels, 3, 3, 1, 1, 1, true);

    let stage =
        |rng: &mut ChaCha8Rng, count: usize, c: usize, heads: usize| -> Vec<BlockWeights<E>> {
            (0..count)
                .map(|_| BlockWeights::init(c, heads, gamma, mode, rng, zero_residual))
                .collect()
        };

    let mut encoder: [Vec<BlockWeights<E>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut down: Vec<Conv2dLayer<E>> = Vec::new();
    for k in 0..3 {
        let c = cfg.channels_at(k);
        encoder[k] = stage(&mut rng, cfg.block_counts[k], c, cfg.heads[k]);
        down.push(Conv2dLayer::init(&mut rng, 2 * c, 4 * c, 1, 1, 0, 1, true));
    }
    let bottleneck = stage(
        &mut rng,
        cfg.block_counts[3],
        cfg.channels_at(3),
        cfg.heads[3],
    );

    let mut up_rev: Vec<Conv2dLayer<E>> = Vec::new();
    let mut fuse_rev: Vec<Conv2dLayer<E>> = Vec::new();
    let mut decoder: [Vec<BlockWeights<E>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for k in (0..3).rev() {
        let c = cfg.channels_at(k);
        up_rev.push(Conv2dLayer::init(&mut rng, 4 * c, 2 * c, 1, 1, 0, 1, true));
        if k >= 1 {
            fuse_rev.push(Conv2dLayer::init(&mut rng, c, 2 * c, 1, 1, 0, 1, true));
        }
        let dc = decoder_channels(cfg, k);
        decoder[k] = stage(&mut rng, cfg.block_counts[6 - k], dc, cfg.heads[k]);
    }
    up_rev.reverse();
    fuse_rev.reverse();

    let refinement = stage(
        &mut rng,
        cfg.block_counts[7],
        decoder_channels(cfg, 0),
        cfg.heads[0],
    );
    let final_conv = if zero_residual {
        Conv2dLayer::zeroed(3, decoder_channels(cfg, 0), 3, 1, 1, 1, true)
    } else {
        Conv2dLayer::init(&mut rng, 3, decoder_channels(cfg, 0), 3, 1, 1, 1, true)
    };

    Ok(ModelWeights {
        config: cfg.clone(),
        sai2e,
        illum_down,
        shallow,
        encoder,
        down_transition: down.try_into().map_err(|_| TensorError::Shape {
            op: "init_model",
            msg: "transition count".into(),
        })?,
        bottleneck,
        up_transition: up_rev.try_into().map_err(|_| TensorError::Shape {
            op: "init_model",
            msg: "transition count".into(),
        })?,
        skip_fuse: fuse_rev.try_into().map_err(|_| TensorError::Shape {
            op: "init_model",
            msg: "fuse count".into(),
        })?,
        decoder,
        refinement,
        final_conv,
    })
}

/// Deterministic initialization; residual projections and the final conv are
/// zeroed so the fresh model is the identity map.
pub fn init_model<E: Elem>(cfg: &ModelConfig) -> Result<ModelWeights<E>> {
    build_model(cfg, true)
}

/// Fully randomized variant (no zeroed projections); used by gradient flow
/// checks, where zero projections would block gradients by construction.
pub fn init_model_randomized<E: Elem>(cfg: &ModelConfig) -> Result<ModelWeights<E>> {
    build_model(cfg, false)
}

/// Invocation counts and per-stage shapes from one forward pass.
#[derive(Debug, Default, Clone)]
pub struct ForwardTrace {
    pub estimator_calls: usize,
    pub downsampler_calls: usize,
    /// Feature shapes entering each stage, in execution order.
    pub stage_shapes: Vec<(String, Shape)>,
}

pub fn forward<E: Elem>(w: &ModelWeights<E>, input: &Tensor<E>) -> Result<Tensor<E>> {
    Ok(forward_traced(w, input)?.0)
}

pub fn forward_traced<E: Elem>(
    w: &ModelWeights<E>,
    input: &Tensor<E>,
) -> Result<(Tensor<E>, ForwardTrace)> {
    let s = input.shape();
    if s.c() != 3 {
        return Err(TensorError::Shape {
            op: "forward",
            msg: format!("expected a 3-channel image tensor, got {s}"),
        });
    }
    if s.h() % 8 != 0 || s.w() % 8 != 0 {
        return Err(TensorError::Shape {
            op: "forward",
            msg: format!(
                "spatial dims {}x{} must be divisible by 8; reflect-pad first (the CLI's enhance command does this automatically)",
                s.h(),
                s.w()
            ),
        });
    }
    let mut trace = ForwardTrace::default();

    // Illumination pyramid, computed once and shared by encoder and decoder.
    let il0 = match (&w.sai2e, w.config.estimator) {
        (Some(sw), EstimatorKind::Sai2e) => sai2e::estimate_illumination(input, sw)?,
        _ => sai2e::avgpool2x2_illumination(input)?,
    };
    trace.estimator_calls += 1;
    let mut il = vec![il0];
    for k in 0..3 {
        let next = w.illum_down[k].apply(&il[k])?;
        trace.downsampler_calls += 1;
        il.push(next);
    }

    let run_stage = |f: Tensor<E>, blocks_w: &[BlockWeights<E>], level: usize| -> Result<Tensor<E>> {
        let mut f = f;
        for b in blocks_w {
            f = blocks::saigt_block(&f, &il[level], b, None)?;
        }
        Ok(f)
    };

    let f0 = w.shallow.apply(input)?;
    trace.stage_shapes.push(("encoder0".into(), f0.shape()));
    let e0 = run_stage(f0, &w.encoder[0], 0)?;

    let f1 = w.down_transition[0].apply(&e0.pixel_unshuffle(2)?)?;
    trace.stage_shapes.push(("encoder1".into(), f1.shape()));
    let e1 = run_stage(f1, &w.encoder[1], 1)?;

    let f2 = w.down_transition[1].apply(&e1.pixel_unshuffle(2)?)?;
    trace.stage_shapes.push(("encoder2".into(), f2.shape()));
    let e2 = run_stage(f2, &w.encoder[2], 2)?;

    let f3 = w.down_transition[2].apply(&e2.pixel_unshuffle(2)?)?;
    trace.stage_shapes.push(("bottleneck".into(), f3.shape()));
    let b = run_stage(f3, &w.bottleneck, 3)?;

    let up2 = w.up_transition[2].apply(&b)?.pixel_shuffle(2)?;
    let d2 = w
        .skip_fuse[1]
        .apply(&Tensor::concat(&[up2, e2], 1)?)?;
    trace.stage_shapes.push(("decoder2".into(), d2.shape()));
    let d2 = run_stage(d2, &w.decoder[2], 2)?;

    let up1 = w.up_transition[1].apply(&d2)?.pixel_shuffle(2)?;
    let d1 = w
        .skip_fuse[0]
        .apply(&Tensor::concat(&[up1, e1], 1)?)?;
    trace.stage_shapes.push(("decoder1".into(), d1.shape()));
    let d1 = run_stage(d1, &w.decoder[1], 1)?;

    let up0 = w.up_transition[0].apply(&d1)?.pixel_shuffle(2)?;
    // Full-resolution decoder keeps the concatenated width (no fusion conv).
    let d0 = Tensor::concat(&[up0, e0], 1)?;
    trace.stage_shapes.push(("decoder0".into(), d0.shape()));
    let d0 = run_stage(d0, &w.decoder[0], 0)?;

    trace.stage_shapes.push(("refinement".into(), d0.shape()));
    let refined = run_stage(d0, &w.refinement, 0)?;

    let residual = w.final_conv.apply(&refined)?;
    let out = input.add(&residual)?;
    Ok((out, trace))
}

/// Exact parameter count from shapes alone; no weights are allocated.
pub fn param_count(cfg: &ModelConfig) -> Result<u64> {
    let mut total = 0u64;
    for_each_param_spec(cfg, &mut |_, shape| total += shape.numel() as u64)?;
    Ok(total)
}

/// Walk the `(name, shape)` layout that `init_model` produces, without
/// building tensors. Kept in lock-step with the weight structs; a unit test
/// asserts the two walks agree exactly.
pub fn for_each_param_spec(
    cfg: &ModelConfig,
    f: &mut dyn FnMut(&str, Shape),
) -> Result<()> {
    cfg.validate()?;
    let conv = |f: &mut dyn FnMut(&str, Shape),
                prefix: &str,
                out_c: usize,
                in_c_per_group: usize,
                k: usize,
                bias: bool| {
        f(&format!("{prefix}.weight"), Shape::new(out_c, in_c_per_group, k, k));
        if bias {
            f(&format!("{prefix}.bias"), Shape::new(1, out_c, 1, 1));
        }
    };
    let subnet = |f: &mut dyn FnMut(&str, Shape), prefix: &str, hidden: usize, out: usize| {
        conv(f, &format!("{prefix}.conv1"), hidden, 3, 3, true);
        conv(f, &format!("{prefix}.conv2"), out, hidden, 1, true);
    };
    let block = |f: &mut dyn FnMut(&str, Shape), prefix: &str, c: usize, heads: usize| {
        let heads = match cfg.head_illum_mode {
            HeadIllumMode::Replicate => heads,
            HeadIllumMode::Single => 1,
        };
        f(&format!("{prefix}.ln1.gain"), Shape::new(1, c, 1, 1));
        f(&format!("{prefix}.ln1.bias"), Shape::new(1, c, 1, 1));
        conv(f, &format!("{prefix}.attn.qkv_pw"), 3 * c, c, 1, false);
        conv(f, &format!("{prefix}.attn.qkv_dw"), 3 * c, 1, 3, false);
        conv(f, &format!("{prefix}.attn.illum_proj"), 3, 3, 1, true);
        conv(
            f,
            &format!("{prefix}.attn.out_proj"),
            c,
            c + 3 * heads,
            1,
            true,
        );
        f(&format!("{prefix}.attn.alpha"), Shape::new(1, heads, 1, 1));
        f(&format!("{prefix}.ln2.gain"), Shape::new(1, c, 1, 1));
        f(&format!("{prefix}.ln2.bias"), Shape::new(1, c, 1, 1));
        let hidden = blocks::ffn_hidden(c, cfg.ffn_expansion);
        conv(f, &format!("{prefix}.ffn.w1"), hidden, c, 1, true);
        conv(f, &format!("{prefix}.ffn.w2"), hidden, c, 1, true);
        conv(f, &format!("{prefix}.ffn.out"), c, hidden, 1, true);
    };

    if cfg.estimator == EstimatorKind::Sai2e {
        subnet(f, "sai2e.offset_net", cfg.sai2e_hidden, 4);
        if cfg.use_modulation {
            subnet(f, "sai2e.modulation_net", cfg.sai2e_hidden, 3);
        }
    }
    for k in 0..3 {
        conv(f, &format!("illum_down.{k}.depthwise"), 3, 1, 4, true);
        conv(f, &format!("illum_down.{k}.pointwise"), 3, 3, 1, true);
    }
    conv(f, "shallow", cfg.base_channels, 3, 3, true);
    for k in 0..3 {
        let c = cfg.channels_at(k);
        for i in 0..cfg.block_counts[k] {
            block(f, &format!("encoder{k}.{i}"), c, cfg.heads[k]);
        }
        conv(f, &format!("down{k}"), 2 * c, 4 * c, 1, true);
    }
    for i in 0..cfg.block_counts[3] {
        block(f, &format!("bottleneck.{i}"), cfg.channels_at(3), cfg.heads[3]);
    }
    for k in (0..3).rev() {
        let c = cfg.channels_at(k);
        conv(f, &format!("up{k}"), 4 * c, 2 * c, 1, true);
        if k >= 1 {
            conv(f, &format!("fuse{k}"), c, 2 * c, 1, true);
        }
        let dc = decoder_channels(cfg, k);
        for i in 0..cfg.block_counts[6 - k] {
            block(f, &format!("decoder{k}.{i}"), dc, cfg.heads[k]);
        }
    }
    for i in 0..cfg.block_counts[7] {
        block(
            f,
            &format!("refinement.{i}"),
            decoder_channels(cfg, 0),
            cfg.heads[0],
        );
    }
    conv(f, "final", 3, decoder_channels(cfg, 0), 3, true);
    Ok(())
}
