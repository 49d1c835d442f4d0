//! Parameter-carrying layers shared by the backbones, fusion blocks and heads:
//! 3x3 / 1x1 convolutions and a fully-connected layer, all with bias.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// He-style init: weights ~ N(0, 2 / fan_in), biases zero. Keeps activation
/// variance roughly constant through SiLU stacks.
fn he_weights(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("he init: finite std");
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("he init: shape/len agree").with_requires_grad()
}

/// 3x3 convolution, zero padding 1, configurable stride.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: Tensor, // [3, 3, c_in, c_out]
    pub bias: Tensor,   // [c_out]
    pub stride: usize,
}

impl Conv3x3 {
    pub fn init(c_in: usize, c_out: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Conv3x3 {
            weight: he_weights(rng, &[3, 3, c_in, c_out], 9 * c_in),
            bias: Tensor::zeros(&[c_out]).with_requires_grad(),
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.leaf(&self.weight);
        let b = g.leaf(&self.bias);
        g.conv3x3(x, w, b, self.stride)
    }

    pub fn param_count(&self) -> u64 {
        (self.weight.len() + self.bias.len()) as u64
    }
}

/// 1x1 convolution: a per-pixel linear map across channels.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub weight: Tensor, // [c_in, c_out]
    pub bias: Tensor,   // [c_out]
}

impl Conv1x1 {
    pub fn init(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Conv1x1 {
            weight: he_weights(rng, &[c_in, c_out], c_in),
            bias: Tensor::zeros(&[c_out]).with_requires_grad(),
        }
    }

    /// All-zero projection: output is identically zero until training moves it.
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Conv1x1 {
            weight: Tensor::zeros(&[c_in, c_out]).with_requires_grad(),
            bias: Tensor::zeros(&[c_out]).with_requires_grad(),
        }
    }

    /// Identity map (square only); handy for tests and worked examples.
    pub fn identity(c: usize) -> Result<Self> {
        if c == 0 {
            return Err(Error::Config("identity conv needs at least one channel".into()));
        }
        let mut w = Tensor::zeros(&[c, c]);
        for i in 0..c {
            w.data_mut()[i * c + i] = 1.0;
        }
        Ok(Conv1x1 { weight: w.with_requires_grad(), bias: Tensor::zeros(&[c]).with_requires_grad() })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.leaf(&self.weight);
        let b = g.leaf(&self.bias);
        g.conv1x1(x, w, b)
    }

    pub fn param_count(&self) -> u64 {
        (self.weight.len() + self.bias.len()) as u64
    }
}

/// Fully-connected layer on rank-1 inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [out]
}

impl Linear {
    pub fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: he_weights(rng, &[d_in, d_out], d_in),
            bias: Tensor::zeros(&[d_out]).with_requires_grad(),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.leaf(&self.weight);
        let b = g.leaf(&self.bias);
        g.linear(x, w, b)
    }

    pub fn param_count(&self) -> u64 {
        (self.weight.len() + self.bias.len()) as u64
    }
}
