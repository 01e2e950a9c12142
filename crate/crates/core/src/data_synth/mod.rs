//! Procedural bona fide and morph-like images, the augmentation policy and
//! the three-way subject-disjoint protocol.

mod augment;
mod generate;
mod manifest;
mod pgm;
mod protocol;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor_nn::Tensor;
use crate::{Error, Result};

pub use augment::{
    augment, augment_with, epoch_samples, AugmentLog, AugmentOp, AUGMENT_BASE_RATE, BONAFIDE_AUGMENT_WEIGHT,
};
pub use generate::{ghost_band_rows, Generator};
pub use manifest::{load_split, read_manifest, write_dataset, AccessLog, ManifestRow, MANIFEST_FILE, SPLIT_NAMES};
pub use pgm::{load_pgm, read_pgm, save_pgm, write_pgm};
pub use protocol::{build_protocol, ProtocolConfig, ProtocolSplits};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Bonafide = 0,
    Morph = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Bonafide),
            1 => Ok(Label::Morph),
            _ => Err(Error::Data(format!("label {i} is neither 0 (bona fide) nor 1 (morph)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Technique {
    Landmark,
    Generative,
    BlendOnly,
}

impl Technique {
    pub const ALL: [Technique; 3] = [Technique::Landmark, Technique::Generative, Technique::BlendOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Technique::Landmark => "landmark",
            Technique::Generative => "generative",
            Technique::BlendOnly => "blend-only",
        }
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Technique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Technique::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown morph technique {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `[1×S×S]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: Label,
    /// One id for bona fide, two distinct ids for a morph.
    pub subjects: Vec<u64>,
    pub technique: Option<Technique>,
}

impl LabeledSample {
    pub fn new(image: Tensor<f32>, label: Label, subjects: Vec<u64>, technique: Option<Technique>) -> Result<Self> {
        let s = Self { image, label, subjects, technique };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.label, self.subjects.as_slice()) {
            (Label::Bonafide, [_]) if self.technique.is_none() => {}
            (Label::Morph, [a, b]) if a != b => {}
            _ => {
                return Err(Error::Data(format!(
                    "{:?} sample with subjects {:?} and technique {:?} violates the label contract",
                    self.label, self.subjects, self.technique
                )))
            }
        }
        if self.image.rank() != 3 || self.image.shape()[0] != 1 {
            return Err(Error::dim(format!("sample image must be [1×S×S], got {:?}", self.image.shape())));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("sample pixels must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn is_morph(&self) -> bool {
        self.label == Label::Morph
    }
}

/// Stacks sample images into `[n×1×S×S]` plus labels.
pub fn batch(samples: &[&LabeledSample]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    Ok((Tensor::stack(&images)?, samples.iter().map(|s| s.label.index()).collect()))
}
