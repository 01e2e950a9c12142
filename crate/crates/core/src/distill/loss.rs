//! Classification, softening and distillation losses in plain tensor form
//! (the oracle-friendly path) and as graph nodes (the training path).

use crate::adapter::Adapter;
use crate::tensor_nn::{ops, Graph, Mode, RngState, Scalar, Tensor, Var, KL_PROB_FLOOR};
use crate::{Error, Result};

/// Batch mean of `−log softmax(z)[y]`, through log-sum-exp.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<f64> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::dim(format!("{} labels for {b} logit rows", labels.len())));
    }
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        if y >= c {
            return Err(Error::Data(format!("label {y} outside 0..{c}")));
        }
        total -= ops::log_softmax_row(row)[y].to_f64().unwrap();
    }
    Ok(total / b as f64)
}

/// Row-stochastic `softmax(v / T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftDistribution<F: Scalar = f32> {
    pub probs: Tensor<F>,
    pub temperature: f64,
}

pub fn soften<F: Scalar>(v: &Tensor<F>, temperature: f64) -> Result<SoftDistribution<F>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    v.dims2()?;
    let t = F::lit(temperature);
    Ok(SoftDistribution { probs: ops::softmax_rows(&v.map(|x| x / t)), temperature })
}

/// Batch mean of `Σ_j p_t·ln(p_t / max(p_s, floor))`, skipping `p_t = 0`.
pub fn kl_divergence<F: Scalar>(p_t: &SoftDistribution<F>, p_s: &SoftDistribution<F>) -> Result<f64> {
    p_t.probs.expect_same_shape(&p_s.probs)?;
    if p_t.temperature != p_s.temperature {
        return Err(Error::Config(format!(
            "distributions softened at different temperatures ({} vs {})",
            p_t.temperature, p_s.temperature
        )));
    }
    let (b, d) = p_t.probs.dims2()?;
    let mut total = 0.0;
    for (t, s) in p_t.probs.data().chunks(d).zip(p_s.probs.data().chunks(d)) {
        for (&pt, &ps) in t.iter().zip(s) {
            let (pt, ps) = (pt.to_f64().unwrap(), ps.to_f64().unwrap());
            if pt > 0.0 {
                total += pt * (pt / ps.max(KL_PROB_FLOOR)).ln();
            }
        }
    }
    Ok(total / b as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub kl: f64,
    pub ce: f64,
}

impl LossParts {
    pub fn combine(kl: f64, ce: f64, lambda: f64) -> Self {
        Self { total: lambda * kl + ce, kl, ce }
    }
}

/// `λ·KL(soften(adapter(f_t)), soften(f_s)) + CE(z_s, y)` with the adapter in
/// evaluation mode. No `T²` factor on the KL term.
pub fn combined_loss<F: Scalar>(
    logits: &Tensor<F>,
    labels: &[usize],
    teacher_emb: &Tensor<F>,
    student_emb: &Tensor<F>,
    adapter: &Adapter<F>,
    lambda: f64,
    temperature: f64,
) -> Result<LossParts> {
    let adapted = adapter.forward(teacher_emb, Mode::Eval, &mut RngState::new(0))?;
    if adapted.shape() != student_emb.shape() {
        return Err(Error::dim(format!(
            "adapted teacher embedding {:?} vs student embedding {:?}",
            adapted.shape(),
            student_emb.shape()
        )));
    }
    let kl = kl_divergence(&soften(&adapted, temperature)?, &soften(student_emb, temperature)?)?;
    Ok(LossParts::combine(kl, cross_entropy(logits, labels)?, lambda))
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub kl: Var,
    pub ce: Var,
}

/// Graph form of [`combined_loss`]; `adapted` is the adapter output node.
pub fn combined_loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    logits: Var,
    labels: &[usize],
    adapted: Var,
    student_emb: Var,
    lambda: f64,
    temperature: f64,
) -> Result<LossVars> {
    let kl = g.soft_kl(adapted, student_emb, F::lit(temperature))?;
    let ce = g.cross_entropy(logits, labels)?;
    let weighted = g.scale(kl, F::lit(lambda));
    let total = g.add(weighted, ce)?;
    Ok(LossVars { total, kl, ce })
}
