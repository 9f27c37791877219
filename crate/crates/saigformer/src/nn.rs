//! Small layer primitives shared by the estimator, the transformer blocks
//! and the network assembly: convolution and layer-norm parameter bundles
//! plus ordered parameter visitation.

use crate::tensor::{Elem, Result, Shape, Tensor};
use rand::Rng;

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

/// Ordered access to the parameters of a weight bundle.
///
/// Visit order is fixed by construction, which makes checkpoints, optimizer
/// state and gradient checks line up without any extra bookkeeping.
pub trait ParamSet<E: Elem>: Clone {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor<E>));
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>));

    fn params(&self) -> Vec<Tensor<E>> {
        let mut v = Vec::new();
        self.for_each_param(&mut |_, t| v.push(t.clone()));
        v
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.numel());
        n
    }

    /// Copy of `self` with all parameters replaced, in visit order.
    fn with_params(&self, params: &[Tensor<E>]) -> Self {
        let mut c = self.clone();
        let mut i = 0;
        c.for_each_param_mut(&mut |_, t| {
            *t = params[i].clone();
            i += 1;
        });
        assert_eq!(i, params.len(), "parameter count mismatch");
        c
    }
}

/// A convolution with its hyperparameters.
#[derive(Clone)]
pub struct Conv2dLayer<E: Elem> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<E: Elem> Conv2dLayer<E> {
    /// Fan-in-scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        rng: &mut R,
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (in_c / groups) * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let wshape = Shape::new(out_c, in_c / groups, k, k);
        let weight = Tensor::from_fn(wshape, true, |_| rng.gen_range(-bound..bound));
        let bias = bias.then(|| {
            Tensor::from_fn(Shape::new(1, out_c, 1, 1), true, |_| {
                rng.gen_range(-bound..bound)
            })
        });
        Conv2dLayer {
            weight,
            bias,
            stride,
            padding,
            groups,
        }
    }

    /// All-zero weights (and bias); used for the identity-at-init residual
    /// projections.
    pub fn zeroed(
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        Conv2dLayer {
            weight: Tensor::zeros(Shape::new(out_c, in_c / groups, k, k), true),
            bias: bias.then(|| Tensor::zeros(Shape::new(1, out_c, 1, 1), true)),
            stride,
            padding,
            groups,
        }
    }

    pub fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.conv2d(
            &self.weight,
            self.bias.as_ref(),
            self.stride,
            self.padding,
            self.groups,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n()
    }
}

impl<E: Elem> ParamSet<E> for Conv2dLayer<E> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f("weight", &self.weight);
        if let Some(b) = &self.bias {
            f("bias", b);
        }
    }
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f("weight", &mut self.weight);
        if let Some(b) = &mut self.bias {
            f("bias", b);
        }
    }
}

/// Per-channel affine layer norm over the channel axis.
#[derive(Clone)]
pub struct LayerNormLayer<E: Elem> {
    pub gain: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Elem> LayerNormLayer<E> {
    pub fn init(c: usize) -> Self {
        LayerNormLayer {
            gain: Tensor::full(Shape::new(1, c, 1, 1), 1.0, true),
            bias: Tensor::zeros(Shape::new(1, c, 1, 1), true),
        }
    }

    pub fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.layer_norm(&self.gain, &self.bias, LN_EPS)
    }
}

impl<E: Elem> ParamSet<E> for LayerNormLayer<E> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f("gain", &self.gain);
        f("bias", &self.bias);
    }
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f("gain", &mut self.gain);
        f("bias", &mut self.bias);
    }
}

/// Visit a nested parameter set under a dotted name prefix.
pub fn visit_nested<E: Elem, P: ParamSet<E>>(
    prefix: &str,
    p: &P,
    f: &mut dyn FnMut(&str, &Tensor<E>),
) {
    p.for_each_param(&mut |name, t| f(&format!("{prefix}.{name}"), t));
}

pub fn visit_nested_mut<E: Elem, P: ParamSet<E>>(
    prefix: &str,
    p: &mut P,
    f: &mut dyn FnMut(&str, &mut Tensor<E>),
) {
    p.for_each_param_mut(&mut |name, t| f(&format!("{prefix}.{name}"), t));
}
