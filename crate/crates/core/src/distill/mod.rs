//! Losses, schedule, optimiser and the two training stages: teacher
//! fine-tuning, then distillation into the LoRA student.

mod loss;
mod optim;
mod report;
mod schedule;
mod train;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use loss::{
    combined_loss, combined_loss_graph, cross_entropy, kl_divergence, soften, LossParts, LossVars, SoftDistribution,
};
pub use optim::Adam;
pub use report::{EpochRecord, StopReason, TrainReport, REPORT_HEADER};
pub use schedule::cosine_lr;
pub use train::{frozen_fingerprint, train_student, train_teacher, StudentWithAdapter};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lambda: f64,
    pub temperature: f64,
    pub teacher_lr: f64,
    pub student_lr: f64,
    pub min_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            temperature: 3.0,
            teacher_lr: 1e-4,
            student_lr: 5e-4,
            min_lr: 1e-5,
            epochs: 30,
            batch_size: 64,
            patience: 5,
            seed: 42,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.temperature > 0.0) {
            return fail(format!("distill.temperature must be positive, got {}", self.temperature));
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("distill.lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.min_lr >= 0.0) || self.min_lr > self.teacher_lr || self.min_lr > self.student_lr {
            return fail(format!(
                "distill.min_lr {} must be non-negative and at most teacher_lr {} and student_lr {}",
                self.min_lr, self.teacher_lr, self.student_lr
            ));
        }
        if self.patience == 0 || self.epochs == 0 || self.batch_size == 0 {
            return fail("distill.patience, epochs and batch_size must be at least 1".into());
        }
        Ok(())
    }
}
