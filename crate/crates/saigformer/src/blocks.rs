//! SAIGT blocks: illumination-guided multi-head channel attention (IG-MSA)
//! and the dual-gated feed-forward network (DG-FFN).
//!
//! Attention is transposed (channel-as-token): per head, the affinity matrix
//! is `d x (d + 3)` between key channels and illumination-augmented query
//! channels, so the cost grows with C^2 and only linearly with spatial size.
//! The illumination map enters through its own 1x1 projection, bypassing
//! both layer norms.

use crate::nn::{visit_nested, visit_nested_mut, Conv2dLayer, LayerNormLayer, ParamSet};
use crate::sai2e::IllumDownsample;
use crate::tensor::{Elem, Result, Shape, Tensor, TensorError};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// How the three projected illumination channels join the query.
///
/// `Replicate` appends them to every head's query (output projection maps
/// `C + 3 * heads -> C`); `Single` reads the attention equation literally as
/// single-head (`C + 3 -> C`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadIllumMode {
    Replicate,
    Single,
}

fn effective_heads(heads: usize, mode: HeadIllumMode) -> usize {
    match mode {
        HeadIllumMode::Replicate => heads,
        HeadIllumMode::Single => 1,
    }
}

#[derive(Clone)]
pub struct AttentionWeights<E: Elem> {
    /// Effective head count (forced to 1 in `Single` mode).
    pub heads: usize,
    pub qkv_pointwise: Conv2dLayer<E>,
    pub qkv_depthwise: Conv2dLayer<E>,
    pub illum_proj: Conv2dLayer<E>,
    pub out_proj: Conv2dLayer<E>,
    /// Learnable temperature, one scalar per head, shaped `(1, heads, 1, 1)`.
    pub alpha: Tensor<E>,
}

impl<E: Elem> AttentionWeights<E> {
    pub fn init<R: Rng>(
        c: usize,
        heads: usize,
        mode: HeadIllumMode,
        rng: &mut R,
        zero_out_proj: bool,
    ) -> Self {
        let heads = effective_heads(heads, mode);
        assert!(c % heads == 0, "head count {heads} must divide channels {c}");
        let out_in = c + 3 * heads;
        AttentionWeights {
            heads,
            qkv_pointwise: Conv2dLayer::init(rng, 3 * c, c, 1, 1, 0, 1, false),
            qkv_depthwise: Conv2dLayer::init(rng, 3 * c, 3 * c, 3, 1, 1, 3 * c, false),
            illum_proj: Conv2dLayer::init(rng, 3, 3, 1, 1, 0, 1, true),
            out_proj: if zero_out_proj {
                Conv2dLayer::zeroed(c, out_in, 1, 1, 0, 1, true)
            } else {
                Conv2dLayer::init(rng, c, out_in, 1, 1, 0, 1, true)
            },
            alpha: Tensor::full(Shape::new(1, heads, 1, 1), 1.0, true),
        }
    }

    pub fn random<R: Rng>(c: usize, heads: usize, mode: HeadIllumMode, rng: &mut R) -> Self {
        Self::init(c, heads, mode, rng, false)
    }
}

impl<E: Elem> ParamSet<E> for AttentionWeights<E> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        visit_nested("qkv_pw", &self.qkv_pointwise, f);
        visit_nested("qkv_dw", &self.qkv_depthwise, f);
        visit_nested("illum_proj", &self.illum_proj, f);
        visit_nested("out_proj", &self.out_proj, f);
        f("alpha", &self.alpha);
    }
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        visit_nested_mut("qkv_pw", &mut self.qkv_pointwise, f);
        visit_nested_mut("qkv_dw", &mut self.qkv_depthwise, f);
        visit_nested_mut("illum_proj", &mut self.illum_proj, f);
        visit_nested_mut("out_proj", &mut self.out_proj, f);
        f("alpha", &mut self.alpha);
    }
}

/// Intermediate tensors of one IG-MSA evaluation, for diagnostics and the
/// invariant tests (attention-column sums, illumination LN bypass).
pub struct IgMsaParts<E: Elem> {
    pub query: Tensor<E>,
    pub key: Tensor<E>,
    pub value: Tensor<E>,
    /// Projected illumination, `(N, 3, H, W)`.
    pub illum_projected: Tensor<E>,
    /// Attention matrix after softmax, `(N, heads, d, d + 3)`; every column
    /// sums to 1.
    pub attention: Tensor<E>,
    /// Head outputs before the final projection, `(N, heads * (d + 3), H, W)`.
    pub pre_projection: Tensor<E>,
    pub output: Tensor<E>,
}

/// Illumination-guided multi-head channel attention.
///
/// `f` is the layer-normed block input; `i_l` is the matching-resolution
/// illumination map, or one level coarser-facing (2x the feature resolution),
/// in which case `down` must supply the stride-2 downsampler.
pub fn ig_msa<E: Elem>(
    f: &Tensor<E>,
    i_l: &Tensor<E>,
    w: &AttentionWeights<E>,
    down: Option<&IllumDownsample<E>>,
) -> Result<Tensor<E>> {
    Ok(ig_msa_parts(f, i_l, w, down)?.output)
}

pub fn ig_msa_parts<E: Elem>(
    f: &Tensor<E>,
    i_l: &Tensor<E>,
    w: &AttentionWeights<E>,
    down: Option<&IllumDownsample<E>>,
) -> Result<IgMsaParts<E>> {
    let fs = f.shape();
    let (n, c, h, wd) = (fs.n(), fs.c(), fs.h(), fs.w());
    let il_s = i_l.shape();
    let il = if il_s.h() == h && il_s.w() == wd {
        i_l.clone()
    } else if il_s.h() == 2 * h && il_s.w() == 2 * wd {
        match down {
            Some(d) => d.apply(i_l)?,
            None => {
                return Err(TensorError::Shape {
                    op: "ig_msa",
                    msg: format!(
                        "illumination {il_s} is one level above features {fs} but no downsampler was provided"
                    ),
                })
            }
        }
    } else {
        return Err(TensorError::Shape {
            op: "ig_msa",
            msg: format!(
                "illumination {il_s} must match features {fs} or be exactly 2x their resolution"
            ),
        });
    };

    let heads = w.heads;
    let d = c / heads;
    let len = h * wd;

    let qkv = w.qkv_depthwise.apply(&w.qkv_pointwise.apply(f)?)?;
    let query = qkv.slice(1, 0, c)?;
    let key = qkv.slice(1, c, c)?;
    let value = qkv.slice(1, 2 * c, c)?;
    let illum_projected = w.illum_proj.apply(&il)?;

    // Channel-major matrices per head: rows are channels, columns spatial.
    let q_m = query.reshape([n, heads, d, len])?;
    let k_m = key.reshape([n, heads, d, len])?;
    let v_m = value.reshape([n, heads, d, len])?;
    let il_m = illum_projected.reshape([n, 1, 3, len])?;
    let il_rep = if heads == 1 {
        il_m
    } else {
        Tensor::concat(&vec![il_m; heads], 1)?
    };
    let q_lg = Tensor::concat(&[q_m, il_rep], 2)?;

    // K^T Q_lg, scaled by the learnable per-head temperature and 1/sqrt(L).
    let logits = k_m
        .matmul_nt(&q_lg)?
        .div(&w.alpha)?
        .mul_scalar(1.0 / (len as f64).sqrt());
    // Softmax over the key-channel axis: each column is a convex weighting
    // of value channels.
    let attention = logits.softmax(2)?;

    let out_m = attention.transpose_hw().matmul(&v_m)?;
    let pre_projection = out_m.reshape([n, heads * (d + 3), h, wd])?;
    let output = w.out_proj.apply(&pre_projection)?;
    Ok(IgMsaParts {
        query,
        key,
        value,
        illum_projected,
        attention,
        pre_projection,
        output,
    })
}

/// Analytic FLOP count of the attention matrices for one evaluation; used to
/// assert the channel-attention cost law (quadratic in C, linear in H*W).
pub fn attention_matmul_flops(c: usize, heads: usize, h: usize, w: usize) -> u64 {
    let d = (c / heads) as u64;
    let len = (h * w) as u64;
    let per_head = 2 * d * (d + 3) * len /* K^T Q_lg */ + 2 * (d + 3) * d * len /* V A */;
    heads as u64 * per_head
}

#[derive(Clone)]
pub struct FfnWeights<E: Elem> {
    pub w1: Conv2dLayer<E>,
    pub w2: Conv2dLayer<E>,
    pub out: Conv2dLayer<E>,
}

/// Hidden width of the DG-FFN: `floor(gamma * C)`.
pub fn ffn_hidden(c: usize, gamma: f64) -> usize {
    (gamma * c as f64) as usize
}

impl<E: Elem> FfnWeights<E> {
    pub fn init<R: Rng>(c: usize, gamma: f64, rng: &mut R, zero_out: bool) -> Self {
        let hidden = ffn_hidden(c, gamma);
        FfnWeights {
            w1: Conv2dLayer::init(rng, hidden, c, 1, 1, 0, 1, true),
            w2: Conv2dLayer::init(rng, hidden, c, 1, 1, 0, 1, true),
            out: if zero_out {
                Conv2dLayer::zeroed(c, hidden, 1, 1, 0, 1, true)
            } else {
                Conv2dLayer::init(rng, c, hidden, 1, 1, 0, 1, true)
            },
        }
    }

    pub fn random<R: Rng>(c: usize, gamma: f64, rng: &mut R) -> Self {
        Self::init(c, gamma, rng, false)
    }
}

impl<E: Elem> ParamSet<E> for FfnWeights<E> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        visit_nested("w1", &self.w1, f);
        visit_nested("w2", &self.w2, f);
        visit_nested("out", &self.out, f);
    }
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        visit_nested_mut("w1", &mut self.w1, f);
        visit_nested_mut("w2", &mut self.w2, f);
        visit_nested_mut("out", &mut self.out, f);
    }
}

/// Dual-gated feed-forward:
/// `W_p(GELU(W_p1 x) . W_p2 x + Sigmoid(W_p2 x) . W_p1 x)`.
pub fn dg_ffn<E: Elem>(f: &Tensor<E>, w: &FfnWeights<E>) -> Result<Tensor<E>> {
    let u = w.w1.apply(f)?;
    let v = w.w2.apply(f)?;
    let gated = u.gelu().mul(&v)?.add(&v.sigmoid().mul(&u)?)?;
    w.out.apply(&gated)
}

#[derive(Clone)]
pub struct BlockWeights<E: Elem> {
    pub ln1: LayerNormLayer<E>,
    pub attn: AttentionWeights<E>,
    pub ln2: LayerNormLayer<E>,
    pub ffn: FfnWeights<E>,
}

impl<E: Elem> BlockWeights<E> {
    pub fn init<R: Rng>(
        c: usize,
        heads: usize,
        gamma: f64,
        mode: HeadIllumMode,
        rng: &mut R,
        zero_out: bool,
    ) -> Self {
        BlockWeights {
            ln1: LayerNormLayer::init(c),
            attn: AttentionWeights::init(c, heads, mode, rng, zero_out),
            ln2: LayerNormLayer::init(c),
            ffn: FfnWeights::init(c, gamma, rng, zero_out),
        }
    }

    pub fn random<R: Rng>(
        c: usize,
        heads: usize,
        gamma: f64,
        mode: HeadIllumMode,
        rng: &mut R,
    ) -> Self {
        Self::init(c, heads, gamma, mode, rng, false)
    }
}

impl<E: Elem> ParamSet<E> for BlockWeights<E> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        visit_nested("ln1", &self.ln1, f);
        visit_nested("attn", &self.attn, f);
        visit_nested("ln2", &self.ln2, f);
        visit_nested("ffn", &self.ffn, f);
    }
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        visit_nested_mut("ln1", &mut self.ln1, f);
        visit_nested_mut("attn", &mut self.attn, f);
        visit_nested_mut("ln2", &mut self.ln2, f);
        visit_nested_mut("ffn", &mut self.ffn, f);
    }
}

/// One SAIGT block:
/// `F' = F + IG-MSA(LN(F), I_L)`, `F_out = F' + DG-FFN(LN(F'))`.
/// The illumination map skips both layer norms.
pub fn saigt_block<E: Elem>(
    f: &Tensor<E>,
    i_l: &Tensor<E>,
    w: &BlockWeights<E>,
    down: Option<&IllumDownsample<E>>,
) -> Result<Tensor<E>> {
    let attn_out = ig_msa(&w.ln1.apply(f)?, i_l, &w.attn, down)?;
    let f1 = f.add(&attn_out)?;
    let ffn_out = dg_ffn(&w.ln2.apply(&f1)?, &w.ffn)?;
    f1.add(&ffn_out)
}
