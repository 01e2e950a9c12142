use std::time::Instant;

use log::{debug, info};

use super::loss::{combined_loss_graph, LossVars};
use super::{cosine_lr, Adam, DistillConfig, EpochRecord, StopReason, TrainReport};
use crate::adapter::Adapter;
use crate::data_synth::{batch, epoch_samples, LabeledSample};
use crate::teacher_cnn::TeacherCnn;
use crate::tensor_nn::{join, Graph, Mode, Module, Parameter, RngState, Tensor};
use crate::vit_lora::VitModel;
use crate::{Error, Result};

/// The jointly trained half of distillation: LoRA student plus adapter.
/// Parameters are named under `student.` and `adapter.`.
#[derive(Clone, Debug)]
pub struct StudentWithAdapter<F: crate::tensor_nn::Scalar = f32> {
    pub student: VitModel<F>,
    pub adapter: Adapter<F>,
}

impl<F: crate::tensor_nn::Scalar> Module<F> for StudentWithAdapter<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<F>)) {
        self.student.visit(&join(prefix, "student"), f);
        self.adapter.visit(&join(prefix, "adapter"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<F>)) {
        self.student.visit_mut(&join(prefix, "student"), f);
        self.adapter.visit_mut(&join(prefix, "adapter"), f);
    }
}

impl<F: crate::tensor_nn::Scalar> StudentWithAdapter<F> {
    /// Combined loss for one batch. `teacher_emb` must come from the frozen
    /// teacher in evaluation mode.
    pub fn loss_graph(
        &self,
        g: &mut Graph<F>,
        images: &Tensor<F>,
        labels: &[usize],
        teacher_emb: &Tensor<F>,
        cfg: &DistillConfig,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<LossVars> {
        let s = self.student.forward_graph(g, images, mode, rng)?;
        let t = g.constant(teacher_emb.clone());
        let adapted = self.adapter.forward_graph(g, t, mode, rng)?;
        combined_loss_graph(g, s.logits, labels, adapted, s.embedding, cfg.lambda, cfg.temperature)
    }
}

/// Digest of the non-trainable parameters only.
pub fn frozen_fingerprint<F: crate::tensor_nn::Scalar, M: Module<F> + ?Sized>(model: &M) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    model.visit("", &mut |n, p| {
        if p.is_trainable() {
            return;
        }
        for b in n.bytes().chain(p.value.data().iter().flat_map(|v| v.to_f64_lossy().to_bits().to_le_bytes())) {
            h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
        }
    });
    h
}

type BatchLoss<'a, M> = dyn Fn(&M, &mut Graph<f32>, &[&LabeledSample], Mode, &mut RngState) -> Result<LossVars> + 'a;

fn scalar(g: &Graph<f32>, v: crate::tensor_nn::Var) -> f64 {
    g.value(v).data()[0] as f64
}

fn evaluate<M: Module<f32>>(
    model: &M,
    samples: &[LabeledSample],
    cfg: &DistillConfig,
    loss: &BatchLoss<'_, M>,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(cfg.batch_size) {
        let refs: Vec<&LabeledSample> = chunk.iter().collect();
        let mut g = Graph::inference();
        let v = loss(model, &mut g, &refs, Mode::Eval, &mut RngState::new(0))?;
        total += scalar(&g, v.total) * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// The shared loop: augmentation, shuffled minibatches, Adam, per-epoch
/// cosine lr, validation, early stopping with best-state restore.
fn fit<M: Module<f32>>(
    model: &mut M,
    train: &[LabeledSample],
    val: &[LabeledSample],
    cfg: &DistillConfig,
    lr0: f64,
    rng: &RngState,
    loss: &BatchLoss<'_, M>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!("training needs non-empty splits (train {}, val {})", train.len(), val.len())));
    }
    let frozen = frozen_fingerprint(model);
    let mut adam = Adam::default();
    let mut records = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.snapshot());
    let mut stop = StopReason::Completed;
    for e in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cosine_lr(e, cfg.epochs, lr0, cfg.min_lr)?;
        let (mut entries, log) = epoch_samples(train, &mut rng.stream("augment").substream(e as u64));
        rng.stream("shuffle").substream(e as u64).shuffle(&mut entries);
        debug!("epoch {} augmented {} bona fide and {} morph entries", e + 1, log.bonafide_events, log.morph_events);
        let dropout = rng.stream("dropout").substream(e as u64);
        let (mut sum, mut kl_sum, mut ce_sum) = (0.0, 0.0, 0.0);
        for (k, chunk) in entries.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&LabeledSample> = chunk.iter().collect();
            let mut g = Graph::new();
            let v = loss(model, &mut g, &refs, Mode::Train, &mut dropout.substream(k as u64))?;
            let (total, kl, ce) = (scalar(&g, v.total), scalar(&g, v.kl), scalar(&g, v.ce));
            if !total.is_finite() {
                return Err(Error::Anomaly(format!("non-finite training loss at epoch {} batch {}", e + 1, k + 1)));
            }
            if kl < -1e-6 {
                return Err(Error::Anomaly(format!("negative KL {kl} at epoch {} batch {}", e + 1, k + 1)));
            }
            let recombined = cfg.lambda * kl + ce;
            if (recombined - total).abs() > 1e-5 * total.abs().max(1.0) {
                return Err(Error::Anomaly(format!("loss {total} does not decompose into λ·KL + CE = {recombined}")));
            }
            model.zero_grad();
            g.backward(v.total)?.accumulate(&g, model);
            adam.step(model, lr);
            let n = chunk.len() as f64;
            // Reported in f64 from the components so the decomposition is exact.
            sum += recombined * n;
            kl_sum += cfg.lambda * kl * n;
            ce_sum += ce * n;
        }
        model.zero_grad();
        if frozen_fingerprint(model) != frozen {
            return Err(Error::Anomaly(format!("frozen parameters changed during epoch {}", e + 1)));
        }
        let val_loss = evaluate(model, val, cfg, loss)?;
        if !val_loss.is_finite() {
            return Err(Error::Anomaly(format!("non-finite validation loss at epoch {}", e + 1)));
        }
        let n = entries.len() as f64;
        records.push(EpochRecord {
            epoch: e + 1,
            train_loss: sum / n,
            val_loss,
            kl_component: kl_sum / n,
            ce_component: ce_sum / n,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        });
        info!("epoch {:>3}  train {:.5}  val {:.5}  lr {:.2e}", e + 1, sum / n, val_loss, lr);
        if val_loss < best.0 {
            best = (val_loss, e + 1, model.snapshot());
        } else if e + 1 - best.1 >= cfg.patience {
            stop = StopReason::EarlyStopped;
            break;
        }
    }
    model.restore(&best.2);
    Ok(TrainReport { records, stop, best_epoch: best.1 })
}

/// Cross-entropy fine-tuning of the teacher.
pub fn train_teacher(
    teacher: &mut TeacherCnn<f32>,
    train: &[LabeledSample],
    val: &[LabeledSample],
    cfg: &DistillConfig,
    rng: &RngState,
) -> Result<TrainReport> {
    if teacher.is_frozen() {
        return Err(Error::Contract("teacher training needs a trainable teacher".into()));
    }
    let loss = |m: &TeacherCnn<f32>, g: &mut Graph<f32>, b: &[&LabeledSample], mode: Mode, _: &mut RngState| {
        let (images, labels) = batch(b)?;
        let v = m.forward_graph(g, &images, mode)?;
        let ce = g.cross_entropy(v.logits, &labels)?;
        let kl = g.constant(Tensor::scalar(0.0));
        Ok(LossVars { total: ce, kl, ce })
    };
    fit(teacher, train, val, cfg, cfg.teacher_lr, &rng.stream("teacher"), &loss)
}

/// Knowledge distillation into the LoRA student. Only the LoRA factors, the
/// student head and the adapter are updated.
pub fn train_student(
    bundle: &mut StudentWithAdapter<f32>,
    teacher: &TeacherCnn<f32>,
    train: &[LabeledSample],
    val: &[LabeledSample],
    cfg: &DistillConfig,
    rng: &RngState,
) -> Result<TrainReport> {
    if !teacher.is_frozen() {
        return Err(Error::Contract("distillation needs a frozen teacher; call freeze() first".into()));
    }
    if bundle.student.lora_config().is_none() {
        return Err(Error::Contract("distillation needs a LoRA-attached student".into()));
    }
    let loss = |m: &StudentWithAdapter<f32>, g: &mut Graph<f32>, b: &[&LabeledSample], mode: Mode, r: &mut RngState| {
        let (images, labels) = batch(b)?;
        let teacher_emb = teacher.forward(&images, Mode::Eval)?.embedding;
        m.loss_graph(g, &images, &labels, &teacher_emb, cfg, mode, r)
    };
    fit(bundle, train, val, cfg, cfg.student_lr, &rng.stream("student"), &loss)
}
