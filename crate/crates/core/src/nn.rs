//! Parameterized layers shared by the image encoder and the attention model.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Bound, ParamId, ParamStore, Tensor, Var};

/// Uniform in `[-1/√fan_in, 1/√fan_in]`.
pub fn init_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound))
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut Rng) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init_uniform(rng, &[inputs, outputs], inputs))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([outputs]))?;
        Ok(Linear { weight, bias, inputs, outputs })
    }

    /// `x · W + b` for `x` of shape `[.., inputs]` with two axes.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(p.get(self.weight))?.add(p.get(self.bias))
    }
}

/// Layer normalization over the last axis with a learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::ones([width]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([width]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm()?.mul(p.get(self.gain))?.add(p.get(self.bias))
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    hidden: Linear,
    out: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Mlp {
            hidden: Linear::new(store, &format!("{name}.fc1"), width, hidden, rng)?,
            out: Linear::new(store, &format!("{name}.fc2"), hidden, width, rng)?,
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        self.out.forward(p, self.hidden.forward(p, x)?.gelu()?)
    }
}

/// Square-kernel convolution over `[H, W, C]` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = kernel * kernel * inputs;
        let weight = store.add(format!("{name}.weight"), init_uniform(rng, &[fan_in, outputs], fan_in))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([outputs]))?;
        Ok(Conv2d { weight, bias, kernel, stride, pad, inputs, outputs })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.inputs {
            return Err(Error::shape("conv2d", format!("expected [H, W, {}], got {shape:?}", self.inputs)));
        }
        let ho = (shape[0] + 2 * self.pad - self.kernel) / self.stride + 1;
        let wo = (shape[1] + 2 * self.pad - self.kernel) / self.stride + 1;
        x.im2col(self.kernel, self.stride, self.pad)?
            .matmul(p.get(self.weight))?
            .add(p.get(self.bias))?
            .reshape(&[ho, wo, self.outputs])
    }
}
