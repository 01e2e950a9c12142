use super::{Graph, Module, Tensor, Var};
use crate::{Error, Result};

/// Finite-difference settings.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4 }
    }
}

/// Comparison for one named parameter.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub trainable: bool,
    pub scalars: usize,
    /// `max |a−n| / max(|a|, |n|, 1e-8)` over the parameter's scalars.
    /// Always 0 for frozen parameters, which are not perturbed.
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude seen.
    pub max_abs_grad: f64,
    pub analytic: Tensor<f64>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares reverse-mode gradients of `loss` against central differences
/// for every trainable scalar of `model` (64-bit only).
///
/// `loss` must be a deterministic function of the model: any randomness
/// (dropout) has to be re-seeded inside the closure.
pub fn grad_check<M, L>(model: &mut M, loss: L, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    M: Module<f64>,
    L: Fn(&M, &mut Graph<f64>) -> Result<Var>,
{
    if cfg.step <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {}", cfg.step)));
    }
    model.zero_grad();
    let mut graph = Graph::new();
    let out = loss(model, &mut graph)?;
    let grads = graph.backward(out)?;
    grads.accumulate(&graph, model);
    drop(graph);

    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::inference();
        let v = loss(m, &mut g)?;
        let value = g.value(v).data()[0];
        if !value.is_finite() {
            return Err(Error::Evaluation(format!("loss evaluated to {value}")));
        }
        Ok(value)
    };

    let mut infos = Vec::new();
    model.visit("", &mut |n, p| infos.push((n.to_string(), p.is_trainable(), p.grad.clone())));

    let mut params = Vec::with_capacity(infos.len());
    for (index, (name, trainable, analytic)) in infos.into_iter().enumerate() {
        let max_abs_grad = analytic.max_abs();
        let mut max_rel_error = 0.0f64;
        if trainable {
            for k in 0..analytic.len() {
                let original = nth_scalar(model, index, k, None);
                nth_scalar(model, index, k, Some(original + cfg.step));
                let plus = eval(model);
                nth_scalar(model, index, k, Some(original - cfg.step));
                let minus = eval(model);
                nth_scalar(model, index, k, Some(original));
                let numeric = (plus? - minus?) / (2.0 * cfg.step);
                let a = analytic.data()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                max_rel_error = max_rel_error.max(rel);
            }
        }
        params.push(ParamCheck { name, trainable, scalars: analytic.len(), max_rel_error, max_abs_grad, analytic });
    }
    Ok(GradCheckReport { params, tolerance: cfg.tolerance })
}

/// Reads (and optionally overwrites) scalar `k` of the `index`-th parameter.
fn nth_scalar<M: Module<f64>>(model: &mut M, index: usize, k: usize, set: Option<f64>) -> f64 {
    let mut i = 0;
    let mut old = f64::NAN;
    model.visit_mut("", &mut |_, p| {
        if i == index {
            old = p.value.data()[k];
            if let Some(v) = set {
                p.value.data_mut()[k] = v;
            }
        }
        i += 1;
    });
    old
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_nn::{param::join, Parameter};

    struct Quad {
        theta: Parameter<f64>,
        frozen: Parameter<f64>,
    }

    impl Module<f64> for Quad {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<f64>)) {
            f(&join(prefix, "theta"), &self.theta);
            f(&join(prefix, "frozen"), &self.frozen);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<f64>)) {
            f(&join(prefix, "theta"), &mut self.theta);
            f(&join(prefix, "frozen"), &mut self.frozen);
        }
    }

    #[test]
    fn quadratic_gradient() {
        let mut frozen = Parameter::new(Tensor::from_f64([1], &[3.0]).unwrap());
        frozen.set_trainable(false);
        let mut m = Quad { theta: Parameter::new(Tensor::from_f64([2], &[1.0, 2.0]).unwrap()), frozen };
        let report = grad_check(
            &mut m,
            |m, g| {
                let t = g.param(&m.theta);
                let f = g.param(&m.frozen);
                let sq = g.mul(t, t)?;
                let s = g.sum(sq);
                let fs = g.sum(f);
                let scaled = g.mul(s, fs)?;
                Ok(g.scale(scaled, 1.0 / 3.0))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        let theta = report.get("theta").unwrap();
        assert_eq!(theta.analytic.data(), &[2.0, 4.0]);
        assert!(theta.max_rel_error < 1e-8, "{}", theta.max_rel_error);
        let frozen = report.get("frozen").unwrap();
        assert_eq!(frozen.analytic.data(), &[0.0]);
        assert!(report.passed());
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut m = Quad { theta: Parameter::zeros([1]), frozen: Parameter::zeros([1]) };
        let r = grad_check(
            &mut m,
            |m, g| {
                let t = g.param(&m.theta);
                let s = g.sum(t);
                Ok(g.scale(s, f64::INFINITY))
            },
            GradCheckConfig::default(),
        );
        assert!(r.is_err());
    }
}
