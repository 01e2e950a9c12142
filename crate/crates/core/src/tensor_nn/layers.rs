//! Parameterised building blocks shared by the three networks.

use super::{join, Graph, Module, Parameter, RngState, Scalar, Var};
use crate::Result;

/// Dense layer, `y = x·Wᵀ + b` with `W` stored `[d_out×d_in]`.
#[derive(Clone, Debug)]
pub struct Linear<F: Scalar = f32> {
    pub weight: Parameter<F>,
    pub bias: Option<Parameter<F>>,
}

impl<F: Scalar> Linear<F> {
    /// Truncated-normal weights, zero bias.
    pub fn trunc_normal(d_in: usize, d_out: usize, std: f64, bias: bool, rng: &mut RngState) -> Self {
        Self { weight: Parameter::trunc_normal([d_out, d_in], std, rng), bias: bias.then(|| Parameter::zeros([d_out])) }
    }

    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Self { weight: Parameter::zeros([d_out, d_in]), bias: bias.then(|| Parameter::zeros([d_out])) }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

impl<F: Scalar> Module<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<F>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Affine parameters of a normalisation layer (gain 1, bias 0 at init).
#[derive(Clone, Debug)]
pub struct Norm<F: Scalar = f32> {
    pub gain: Parameter<F>,
    pub bias: Parameter<F>,
    pub eps: f64,
}

pub const NORM_EPS: f64 = 1e-5;

impl<F: Scalar> Norm<F> {
    pub fn new(width: usize) -> Self {
        Self { gain: Parameter::ones([width]), bias: Parameter::zeros([width]), eps: NORM_EPS }
    }

    /// Layer norm over the last axis.
    pub fn layer(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(&self.gain), g.param(&self.bias));
        g.layer_norm(x, gain, bias, F::lit(self.eps))
    }

    /// Per-channel normalisation over spatial positions.
    pub fn spatial(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(&self.gain), g.param(&self.bias));
        g.instance_norm(x, gain, bias, F::lit(self.eps))
    }
}

impl<F: Scalar> Module<F> for Norm<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<F>)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<F>)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Dropout as a graph op: identity in evaluation mode or at rate 0.
pub fn dropout<F: Scalar>(g: &mut Graph<F>, x: Var, rate: f64, train: bool, rng: &mut RngState) -> Result<Var> {
    if !train || rate == 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let mask = super::dropout_mask(&shape, rate, rng)?;
    g.mul_const(x, mask)
}
