//! Parameterized building blocks shared by the networks.

use octmorph_autograd::params::kaiming_uniform;
use octmorph_autograd::{Bound, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

/// Negative slope of every leaky ReLU in the networks.
pub const LEAKY_SLOPE: f32 = 0.2;

/// Epsilon of every instance normalization.
pub const NORM_EPS: f32 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// A `kernel×kernel` convolution with "same"-style padding `kernel / 2`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = params.add(
            format!("{name}.weight"),
            kaiming_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, LEAKY_SLOPE, rng),
        );
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let b = self.bias.map(|b| p.var(b));
        x.conv2d(&p.var(self.weight), b.as_ref(), self.stride, self.padding)
    }

    /// Same convolution with an externally supplied (e.g. spectrally
    /// normalized) weight.
    pub fn forward_with<'g>(&self, p: &Bound<'g>, weight: Var<'g>, x: Var<'g>) -> Var<'g> {
        let b = self.bias.map(|b| p.var(b));
        x.conv2d(&weight, b.as_ref(), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Dense {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_bound(params, name, in_features, out_features, None, rng)
    }

    /// Like [`Dense::new`] but with weights drawn from `U(−bound, bound)`
    /// when `bound` is given.
    pub fn with_bound(
        params: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        bound: Option<f32>,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [out_features, in_features];
        let w = match bound {
            Some(b) => octmorph_autograd::params::uniform(&shape, b, rng),
            None => kaiming_uniform(&shape, in_features, LEAKY_SLOPE, rng),
        };
        let weight = params.add(format!("{name}.weight"), w);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out_features]));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.linear(&p.var(self.weight), Some(&p.var(self.bias)))
    }
}
