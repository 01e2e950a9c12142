//! Residual adapter mapping teacher embeddings into the student's width.
//!
//! `p = L1(x)`, `h = L3(drop(GELU(LN(L2(p)))))`, output `p + h`. The residual
//! is taken from the projection because `d_in` and `d_out` generally differ.

use serde::{Deserialize, Serialize};

use crate::tensor_nn::{join, layers, Graph, Linear, Mode, Module, Norm, Parameter, RngState, Scalar, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub d_in: usize,
    pub d_out: usize,
    /// Defaults to `2·d_out` when absent.
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
}

fn default_dropout() -> f64 {
    0.1
}

impl AdapterConfig {
    pub fn new(d_in: usize, d_out: usize) -> Self {
        Self { d_in, d_out, hidden: None, dropout_rate: default_dropout() }
    }

    pub fn hidden(&self) -> usize {
        self.hidden.unwrap_or(2 * self.d_out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.hidden() == 0 {
            return Err(Error::Config(format!(
                "adapter widths must be positive: d_in {}, d_out {}, hidden {}",
                self.d_in,
                self.d_out,
                self.hidden()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("adapter.dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn expected_param_count(&self) -> usize {
        let (i, o, h) = (self.d_in, self.d_out, self.hidden());
        i * o + o + (o * h + h) + (h * o + o) + 2 * h
    }
}

#[derive(Clone, Debug)]
pub struct Adapter<F: Scalar = f32> {
    cfg: AdapterConfig,
    pub project: Linear<F>,
    pub expand: Linear<F>,
    pub norm: Norm<F>,
    /// Zero at construction so the adapter starts as a pure projection.
    pub contract: Linear<F>,
}

impl<F: Scalar> Adapter<F> {
    pub fn new(cfg: &AdapterConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden();
        Ok(Self {
            project: Linear::trunc_normal(cfg.d_in, cfg.d_out, (1.0 / cfg.d_in as f64).sqrt(), true, rng),
            expand: Linear::trunc_normal(cfg.d_out, h, (1.0 / cfg.d_out as f64).sqrt(), true, rng),
            norm: Norm::new(h),
            contract: Linear::zeros(h, cfg.d_out, true),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn forward_graph(&self, g: &mut Graph<F>, x: Var, mode: Mode, rng: &mut RngState) -> Result<Var> {
        let width = g.value(x).last_dim();
        if g.value(x).rank() != 2 || width != self.cfg.d_in {
            return Err(Error::dim(format!(
                "adapter expects [batch×{}] embeddings, got {:?}",
                self.cfg.d_in,
                g.value(x).shape()
            )));
        }
        let p = self.project.forward(g, x)?;
        let h = self.expand.forward(g, p)?;
        let h = self.norm.layer(g, h)?;
        let h = g.gelu(h);
        let h = layers::dropout(g, h, self.cfg.dropout_rate, mode.is_train(), rng)?;
        let h = self.contract.forward(g, h)?;
        g.add(p, h)
    }

    pub fn forward(&self, teacher_emb: &Tensor<F>, mode: Mode, rng: &mut RngState) -> Result<Tensor<F>> {
        let mut g = Graph::inference();
        let x = g.constant(teacher_emb.clone());
        let y = self.forward_graph(&mut g, x, mode, rng)?;
        let out = g.value(y).clone();
        if !out.all_finite() {
            return Err(Error::Anomaly("adapter produced non-finite embeddings".into()));
        }
        Ok(out)
    }

    /// Dotted names of every adapter parameter (all trainable).
    pub fn trainables(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("adapter", &mut |n, p| {
            if p.is_trainable() {
                names.push(n.to_string())
            }
        });
        names
    }
}

impl<F: Scalar> Module<F> for Adapter<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<F>)) {
        self.project.visit(&join(prefix, "project"), f);
        self.expand.visit(&join(prefix, "expand"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.contract.visit(&join(prefix, "contract"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<F>)) {
        self.project.visit_mut(&join(prefix, "project"), f);
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.contract.visit_mut(&join(prefix, "contract"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_nn::{grad_check, ops, GradCheckConfig};
    use proptest::prelude::*;

    fn random(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
        let n = shape.iter().product::<usize>();
        Tensor::from_f64(shape.to_vec(), &(0..n).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap()
    }

    fn randomise(a: &mut Adapter<f64>, rng: &mut RngState) {
        a.visit_mut("", &mut |_, p| {
            let s = p.value.shape().to_vec();
            p.value = random(&s, rng);
        });
    }

    #[test]
    fn count_matches_formula() {
        let cfg = AdapterConfig { d_in: 64, d_out: 32, hidden: Some(48), dropout_rate: 0.1 };
        let a = Adapter::<f32>::new(&cfg, &mut RngState::new(1)).unwrap();
        let (_, total) = a.param_counts();
        assert_eq!(total, cfg.expected_param_count());
        assert_eq!(total, 64 * 32 + 32 + (32 * 48 + 48) + (48 * 32 + 32) + 2 * 48);
        assert_eq!(a.trainables().len(), 8);
        assert!(a.trainables().iter().all(|n| n.starts_with("adapter.")));
        assert_eq!(AdapterConfig::new(8, 8).hidden(), 16);
    }

    #[test]
    fn rejects_bad_config_and_width() {
        assert!(AdapterConfig { dropout_rate: 1.0, ..AdapterConfig::new(4, 4) }.validate().is_err());
        assert!(AdapterConfig { hidden: Some(0), ..AdapterConfig::new(4, 4) }.validate().is_err());
        let a = Adapter::<f32>::new(&AdapterConfig::new(4, 6), &mut RngState::new(2)).unwrap();
        assert!(matches!(
            a.forward(&Tensor::zeros([2, 5]), Mode::Eval, &mut RngState::new(0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn identity_projection_with_zero_branch_is_identity() {
        let mut a = Adapter::<f64>::new(&AdapterConfig::new(5, 5), &mut RngState::new(3)).unwrap();
        a.project.weight.value = Tensor::eye(5);
        a.project.bias.as_mut().unwrap().value.fill(0.0);
        let x = random(&[3, 5], &mut RngState::new(4));
        assert_eq!(a.forward(&x, Mode::Eval, &mut RngState::new(0)).unwrap(), x);
    }

    #[test]
    fn matches_stage_by_stage_reference() {
        let mut rng = RngState::new(5);
        let mut a = Adapter::<f64>::new(&AdapterConfig::new(6, 4), &mut rng).unwrap();
        randomise(&mut a, &mut rng);
        let x = random(&[3, 6], &mut rng);
        let got = a.forward(&x, Mode::Eval, &mut rng).unwrap();
        // Independent composition with plain loops.
        let lin = |x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
            let [o, i] = [w.shape()[0], w.shape()[1]];
            (0..o).map(|r| b.data()[r] + (0..i).map(|c| w.data()[r * i + c] * x[c]).sum::<f64>()).collect()
        };
        for r in 0..3 {
            let p = lin(x.row(r), &a.project.weight.value, &a.project.bias.as_ref().unwrap().value);
            let h = lin(&p, &a.expand.weight.value, &a.expand.bias.as_ref().unwrap().value);
            let n = h.len() as f64;
            let mu = h.iter().sum::<f64>() / n;
            let var = h.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let h: Vec<f64> = h
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    (v - mu) / (var + 1e-5).sqrt() * a.norm.gain.value.data()[j] + a.norm.bias.value.data()[j]
                })
                .map(|v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
                .collect();
            let h = lin(&h, &a.contract.weight.value, &a.contract.bias.as_ref().unwrap().value);
            for j in 0..4 {
                assert!((got.row(r)[j] - (p[j] + h[j])).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn zero_branch_is_pure_projection(seed in any::<u64>(), d_in in 1usize..10, d_out in 1usize..10, b in 1usize..5) {
            let mut rng = RngState::new(seed);
            let a = Adapter::<f32>::new(&AdapterConfig::new(d_in, d_out), &mut rng).unwrap();
            let x: Tensor<f32> = random(&[b, d_in], &mut rng).cast();
            let got = a.forward(&x, Mode::Eval, &mut rng).unwrap();
            let want = ops::linear(&x, &a.project.weight.value, a.project.bias.as_ref().map(|p| &p.value)).unwrap();
            prop_assert_eq!(got.shape(), &[b, d_out]);
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = RngState::new(6);
        let mut a =
            Adapter::<f64>::new(&AdapterConfig { dropout_rate: 0.0, ..AdapterConfig::new(8, 4) }, &mut rng).unwrap();
        randomise(&mut a, &mut rng);
        let x = random(&[3, 8], &mut rng);
        let target = random(&[3, 4], &mut rng);
        let report = grad_check(
            &mut a,
            |m, g| {
                let xv = g.constant(x.clone());
                let y = m.forward_graph(g, xv, Mode::Eval, &mut RngState::new(0))?;
                let t = g.constant(target.clone());
                let prod = g.mul(y, t)?;
                let sq = g.mul(y, y)?;
                let sq = g.scale(sq, 0.5);
                let s = g.add(prod, sq)?;
                Ok(g.sum(s))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst().map(|w| (&w.name, w.max_rel_error)));
    }

    #[test]
    fn projection_receives_gradient_when_branch_saturates() {
        let mut rng = RngState::new(7);
        let mut a =
            Adapter::<f64>::new(&AdapterConfig { dropout_rate: 0.0, ..AdapterConfig::new(3, 3) }, &mut rng).unwrap();
        // Norm output pinned far negative: GELU is flat and the branch is dead.
        a.norm.gain.value.fill(0.0);
        a.norm.bias.value.fill(-50.0);
        let mut g = Graph::new();
        let x = g.constant(random(&[2, 3], &mut rng));
        let y = a.forward_graph(&mut g, x, Mode::Eval, &mut rng).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap().accumulate(&g, &mut a);
        assert!(a.project.weight.grad.max_abs() > 0.0);
        assert_eq!(a.expand.weight.grad.max_abs(), 0.0);
    }
}
