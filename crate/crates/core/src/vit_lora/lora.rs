//! Frozen dense layer plus a trainable low-rank update.

use super::LoraConfig;
use crate::tensor_nn::layers::dropout;
use crate::tensor_nn::{join, matmul, Graph, Linear, Module, Parameter, RngState, Scalar, Tensor, Var};
use crate::{Error, Result};

/// Rank-`r` factors `A[r×d_in]`, `B[d_out×r]` and the `alpha / r` scale.
#[derive(Clone, Debug)]
pub struct LowRank<F: Scalar = f32> {
    pub a: Parameter<F>,
    pub b: Parameter<F>,
    pub scale: f64,
    pub dropout: f64,
}

impl<F: Scalar> LowRank<F> {
    /// `A ~ N(0, 1/r)`, `B = 0`, so the update starts at exactly zero.
    pub fn new(d_in: usize, d_out: usize, cfg: &LoraConfig, rng: &mut RngState) -> Self {
        let r = cfg.rank;
        Self {
            a: Parameter::normal([r, d_in], (1.0 / r as f64).sqrt(), rng),
            b: Parameter::zeros([d_out, r]),
            scale: cfg.scale(),
            dropout: cfg.dropout,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.value.shape()[0]
    }

    /// Dense `scale·B·A`.
    pub fn delta(&self) -> Tensor<F> {
        matmul(&self.b.value, &self.a.value).expect("factor shapes agree").map(|v| v * F::lit(self.scale))
    }
}

/// `y = W·x + bias + scale·B·(A·drop(x))`.
///
/// Dropout touches only the low-rank path and only in training mode.
#[derive(Clone, Debug)]
pub struct LoraLinear<F: Scalar = f32> {
    pub base: Linear<F>,
    pub lora: Option<LowRank<F>>,
}

impl<F: Scalar> LoraLinear<F> {
    pub fn plain(base: Linear<F>) -> Self {
        Self { base, lora: None }
    }

    /// Attaches fresh factors and freezes the base weight and bias.
    pub fn attach(&mut self, cfg: &LoraConfig, rng: &mut RngState) {
        self.base.set_trainable(false);
        self.lora = Some(LowRank::new(self.base.d_in(), self.base.d_out(), cfg, rng));
    }

    pub fn forward(&self, g: &mut Graph<F>, x: Var, train: bool, rng: &mut RngState) -> Result<Var> {
        let y = self.base.forward(g, x)?;
        let Some(lora) = &self.lora else { return Ok(y) };
        let xd = dropout(g, x, lora.dropout, train, rng)?;
        let a = g.param(&lora.a);
        let b = g.param(&lora.b);
        let h = g.linear(xd, a, None)?;
        let u = g.linear(h, b, None)?;
        let u = g.scale(u, F::lit(lora.scale));
        g.add(y, u)
    }

    /// Folds the update into a plain layer with weight `W + scale·B·A`.
    pub fn merge(&self) -> Linear<F> {
        let mut merged = self.base.clone();
        if let Some(lora) = &self.lora {
            merged.weight.value.add_assign(&lora.delta()).expect("delta matches base weight shape");
        }
        merged
    }

    pub fn merged(&self) -> LoraLinear<F> {
        LoraLinear { base: self.merge(), lora: None }
    }
}

impl<F: Scalar> Module<F> for LoraLinear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<F>)) {
        self.base.visit(prefix, f);
        if let Some(l) = &self.lora {
            f(&join(prefix, "lora.A"), &l.a);
            f(&join(prefix, "lora.B"), &l.b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<F>)) {
        self.base.visit_mut(prefix, f);
        if let Some(l) = &mut self.lora {
            f(&join(prefix, "lora.A"), &mut l.a);
            f(&join(prefix, "lora.B"), &mut l.b);
        }
    }
}

/// Eval-mode forward on a plain tensor, for tests and deployment checks.
pub fn lora_forward_eval<F: Scalar>(layer: &LoraLinear<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = layer.forward(&mut g, xv, false, &mut RngState::new(0))?;
    Ok(g.value(y).clone())
}

pub(crate) fn ensure_rank_fits(cfg: &LoraConfig, name: &str, layer: &Linear<impl Scalar>) -> Result<()> {
    cfg.check_layer(name, layer.d_in(), layer.d_out()).map_err(|e| Error::Config(e.to_string()))
}
