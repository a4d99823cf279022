//! Parameterized building blocks shared by the matching and reasoning models.

use crate::error::Result;
use crate::harness::rng::CitRng;
use crate::kernel::graph::{Graph, Var};
use crate::kernel::params::{ParamId, ParamStore};

/// `y = x W + b` over rows of `x: [L × d_in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut CitRng) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[d_in, d_out], bound, rng)?;
        let bias = if bias {
            Some(store.add_uniform(format!("{name}.bias"), &[d_out], bound, rng)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear_project(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add_const(format!("{name}.gamma"), &[d], 1.0)?,
            beta: store.add_const(format!("{name}.beta"), &[d], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut CitRng,
    ) -> Result<Self> {
        // He-uniform keeps ReLU stacks from shrinking activations layer by layer.
        let fan_in = (c_in * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Ok(Conv2d {
            weight: store.add_uniform(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], bound, rng)?,
            bias: store.add_const(format!("{name}.bias"), &[c_out], 0.0)?,
            stride,
            pad,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Token-axis convolution `[L × d_in] -> [L × d_out]`, no bias.
#[derive(Clone, Debug)]
pub struct TemporalConv {
    pub kernel: ParamId,
}

impl TemporalConv {
    pub fn new(store: &mut ParamStore, name: &str, k: usize, d_in: usize, d_out: usize, rng: &mut CitRng) -> Result<Self> {
        let bound = 1.0 / ((k * d_in) as f64).sqrt();
        Ok(TemporalConv {
            kernel: store.add_uniform(format!("{name}.kernel"), &[k, d_in, d_out], bound, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let k = g.param(self.kernel);
        g.temporal_conv1d(x, k)
    }
}
