//! Parameterised layers shared by the backbone and the agent networks.

use mid_tensor::{Graph, NormMode, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Leaf for a stored parameter; frozen parameters take part in the forward
/// pass but receive no gradient.
pub fn bind(g: &mut Graph, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
    if trainable {
        g.param(store, id)
    } else {
        g.frozen_param(store, id)
    }
}

/// Bias-free square convolution with He-normal initialization.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (2.0 / (c_in * kernel * kernel) as f32).sqrt();
        let w = Tensor::randn(&[c_out, c_in, kernel, kernel], std, rng);
        Ok(Self { weight: store.add_param(&format!("{name}.weight"), w)?, stride, pad })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, trainable: bool) -> Result<Var> {
        let w = bind(g, store, self.weight, trainable);
        Ok(g.conv2d(x, w, self.stride, self.pad)?)
    }
}

/// Batch normalization over `[B, C]` or `[B, C, H, W]` inputs.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_param(&format!("{name}.weight"), Tensor::full(&[channels], 1.0))?,
            beta: store.add_param(&format!("{name}.bias"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0))?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Var,
        mode: NormMode,
        trainable: bool,
    ) -> Result<Var> {
        let gamma = bind(g, store, self.gamma, trainable);
        let beta = bind(g, store, self.beta, trainable);
        let mut mean = store.get(self.running_mean).clone();
        let mut var = store.get(self.running_var).clone();
        let y = g.batch_norm2d(x, gamma, beta, &mut mean, &mut var, mode)?;
        if let NormMode::Train { update_stats: true } = mode {
            *store.get_mut(self.running_mean) = mean;
            *store.get_mut(self.running_var) = var;
        }
        Ok(y)
    }
}

/// Fully connected layer `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (inputs as f32).sqrt();
        Ok(Self {
            weight: store
                .add_param(&format!("{name}.weight"), Tensor::rand_uniform(&[inputs, outputs], -bound, bound, rng))?,
            bias: store.add_param(&format!("{name}.bias"), Tensor::zeros(&[outputs]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, trainable: bool) -> Result<Var> {
        let w = bind(g, store, self.weight, trainable);
        let b = bind(g, store, self.bias, trainable);
        Ok(g.linear(x, w, b)?)
    }
}
