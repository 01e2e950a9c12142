use serde::{Deserialize, Serialize};

use super::{Generator, LabeledSample, Technique};
use crate::tensor_nn::RngState;
use crate::{Error, Result};

/// Sizes per split, indexed `[DS-A, DS-B, DS-C]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub image_size: usize,
    pub subjects: [usize; 3],
    pub bonafide_per_subject: usize,
    /// Distinct subject pairs per split; each pair yields one morph per
    /// technique of that split.
    pub pairs: [usize; 3],
    pub techniques: [Vec<Technique>; 3],
    pub val_fraction: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            subjects: [20, 20, 20],
            bonafide_per_subject: 4,
            pairs: [40, 40, 40],
            techniques: [Technique::ALL.to_vec(), Technique::ALL.to_vec(), Technique::ALL.to_vec()],
            val_fraction: 0.2,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, name) in ["a", "b", "c"].iter().enumerate() {
            let n = self.subjects[k];
            if n < 2 {
                return Err(Error::Config(format!("protocol.subjects for DS-{name} must be at least 2, got {n}")));
            }
            let max_pairs = n * (n - 1) / 2;
            if self.pairs[k] > max_pairs {
                return Err(Error::Config(format!(
                    "DS-{name} asks for {} distinct pairs but {n} subjects allow only {max_pairs}",
                    self.pairs[k]
                )));
            }
            if self.pairs[k] > 0 && self.techniques[k].is_empty() {
                return Err(Error::Config(format!("DS-{name} has morph pairs but no techniques")));
            }
        }
        if self.bonafide_per_subject == 0 {
            return Err(Error::Config("protocol.bonafide_per_subject must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("protocol.val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolSplits {
    pub a_train: Vec<LabeledSample>,
    pub a_val: Vec<LabeledSample>,
    pub b_train: Vec<LabeledSample>,
    pub b_val: Vec<LabeledSample>,
    /// Evaluation only.
    pub c: Vec<LabeledSample>,
}

impl ProtocolSplits {
    /// `(split label, samples)` in manifest order.
    pub fn parts(&self) -> [(&'static str, &[LabeledSample]); 5] {
        [
            ("a-train", &self.a_train),
            ("a-val", &self.a_val),
            ("b-train", &self.b_train),
            ("b-val", &self.b_val),
            ("c", &self.c),
        ]
    }
}

fn build_split(
    gen: &Generator,
    cfg: &ProtocolConfig,
    k: usize,
    first_id: u64,
    rng: &mut RngState,
) -> Result<Vec<LabeledSample>> {
    let ids: Vec<u64> = (first_id..first_id + cfg.subjects[k] as u64).collect();
    let mut samples = Vec::new();
    let mut capture = rng.stream("bonafide");
    for &id in &ids {
        for _ in 0..cfg.bonafide_per_subject {
            samples.push(gen.bonafide(id, &mut capture));
        }
    }
    let mut pairs: Vec<(u64, u64)> =
        ids.iter().enumerate().flat_map(|(i, &a)| ids[i + 1..].iter().map(move |&b| (a, b))).collect();
    rng.stream("pairs").shuffle(&mut pairs);
    let mut morph_rng = rng.stream("morph");
    for &(a, b) in &pairs[..cfg.pairs[k]] {
        for &t in &cfg.techniques[k] {
            samples.push(gen.morph(a, b, t, &mut morph_rng)?);
        }
    }
    Ok(samples)
}

fn partition(
    mut samples: Vec<LabeledSample>,
    val_fraction: f64,
    rng: &mut RngState,
) -> (Vec<LabeledSample>, Vec<LabeledSample>) {
    rng.shuffle(&mut samples);
    let n_val = (samples.len() as f64 * val_fraction).round() as usize;
    let train = samples.split_off(n_val);
    (train, samples)
}

/// Disjoint subject pools: DS-A takes ids `[0, n_a)`, DS-B the next `n_b`,
/// DS-C the rest.
pub fn build_protocol(cfg: &ProtocolConfig, rng: &RngState) -> Result<ProtocolSplits> {
    cfg.validate()?;
    let gen = Generator::new(cfg.image_size, rng)?;
    let mut first = 0u64;
    let mut splits = Vec::with_capacity(3);
    for (k, tag) in ["ds-a", "ds-b", "ds-c"].iter().enumerate() {
        let mut r = rng.stream(tag);
        splits.push(build_split(&gen, cfg, k, first, &mut r)?);
        first += cfg.subjects[k] as u64;
    }
    let c = splits.pop().unwrap();
    let b = splits.pop().unwrap();
    let a = splits.pop().unwrap();
    let (a_train, a_val) = partition(a, cfg.val_fraction, &mut rng.stream("partition-a"));
    let (b_train, b_val) = partition(b, cfg.val_fraction, &mut rng.stream("partition-b"));
    Ok(ProtocolSplits { a_train, a_val, b_train, b_val, c })
}
