use std::collections::HashMap;

use crate::tensor_nn::{Module, Scalar, Tensor};

/// Adam with bias correction. Moments are keyed by parameter id, so one
/// optimiser serves exactly one model.
#[derive(Clone, Debug)]
pub struct Adam<F: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<u64, (Tensor<F>, Tensor<F>)>,
}

impl<F: Scalar> Default for Adam<F> {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: HashMap::new() }
    }
}

impl<F: Scalar> Adam<F> {
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter from its accumulated gradient.
    /// Frozen parameters are never touched.
    pub fn step<M: Module<F> + ?Sized>(&mut self, model: &mut M, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let eps = self.eps;
        let moments = &mut self.moments;
        model.visit_mut("", &mut |_, p| {
            if !p.is_trainable() {
                return;
            }
            let (m, v) = moments
                .entry(p.id())
                .or_insert_with(|| (Tensor::zeros(p.value.shape().to_vec()), Tensor::zeros(p.value.shape().to_vec())));
            let grad = p.grad.data();
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g.to_f64().unwrap();
                let mf = b1 * m.to_f64().unwrap() + (1.0 - b1) * g;
                let vf = b2 * v.to_f64().unwrap() + (1.0 - b2) * g * g;
                *m = F::lit(mf);
                *v = F::lit(vf);
                let update = lr * (mf / c1) / ((vf / c2).sqrt() + eps);
                *w = F::lit(w.to_f64().unwrap() - update);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_nn::{Linear, RngState};

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut layer = Linear::<f64>::zeros(2, 1, true);
        layer.weight.grad = Tensor::from_f64([1, 2], &[3.0, -0.5]).unwrap();
        layer.bias.as_mut().unwrap().set_trainable(false);
        let mut adam = Adam::default();
        adam.step(&mut layer, 0.1);
        let w = layer.weight.value.data();
        assert!((w[0] + 0.1).abs() < 1e-7 && (w[1] - 0.1).abs() < 1e-7);
        assert_eq!(layer.bias.as_ref().unwrap().value.data(), &[0.0]);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut layer = Linear::<f64>::trunc_normal(3, 1, 1.0, false, &mut RngState::new(1));
        let mut adam = Adam::default();
        for _ in 0..500 {
            layer.weight.grad = layer.weight.value.map(|w| 2.0 * (w - 1.0));
            adam.step(&mut layer, 0.05);
        }
        assert!(layer.weight.value.data().iter().all(|w| (w - 1.0).abs() < 1e-3));
    }
}
