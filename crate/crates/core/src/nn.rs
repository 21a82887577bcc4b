//! Layer helpers shared by the generator, discriminator and SR models.

use rand::Rng;
use stochsr_tensor::{conv_weight, Bound, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Square convolution with bias and "same"-style padding `k / 2`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), conv_weight(c_out, c_in, k, gain, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(vec![c_out, c_in, k, k]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
        Self {
            weight,
            bias,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.conv2d(x, p[self.weight], Some(p[self.bias]), self.stride, self.pad)?)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

pub fn lrelu(g: &mut Graph, x: Var) -> Var {
    g.leaky_relu(x, LEAKY_SLOPE)
}

/// `conv → lrelu → conv`, the body of a residual block (skip added by caller).
#[derive(Clone, Debug)]
pub struct ResidualBranch {
    pub first: Conv,
    pub second: Conv,
}

impl ResidualBranch {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            first: Conv::new(store, &format!("{name}.conv1"), width, width, 3, 1, 1.0, rng),
            // Small second conv keeps deep residual stacks close to identity at init.
            second: Conv::new(store, &format!("{name}.conv2"), width, width, 3, 1, 0.1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.first.forward(g, p, x)?;
        let h = lrelu(g, h);
        self.second.forward(g, p, h)
    }
}

/// Squeeze-and-excite style channel attention over a feature map.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub squeeze: Conv,
    pub excite: Conv,
}

impl ChannelAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        let hidden = (width / 4).max(1);
        Self {
            squeeze: Conv::new(store, &format!("{name}.squeeze"), width, hidden, 1, 1, 1.0, rng),
            excite: Conv::new(store, &format!("{name}.excite"), hidden, width, 1, 1, 1.0, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        let s = self.squeeze.forward(g, p, pooled)?;
        let s = lrelu(g, s);
        let s = self.excite.forward(g, p, s)?;
        let a = g.sigmoid(s);
        Ok(g.mul_channel(x, a)?)
    }
}
