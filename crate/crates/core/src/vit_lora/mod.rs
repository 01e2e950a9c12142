//! The student: a patch transformer whose QKV and fully connected layers
//! carry low-rank adapters.

mod config;
mod lora;
mod model;

pub use config::{LoraConfig, LoraTarget, VitConfig};
pub use lora::{lora_forward_eval, LoraLinear, LowRank};
pub(crate) use model::morph_probabilities;
pub use model::{Block, StudentOutput, StudentVars, VitModel, INIT_STD};

#[cfg(test)]
mod tests;
