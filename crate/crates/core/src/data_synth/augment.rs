use super::generate::{bilinear, warp};
use super::{Label, LabeledSample};
use crate::tensor_nn::{RngState, Tensor};

/// Augmentation probability for a weight-1 (morph) entry.
pub const AUGMENT_BASE_RATE: f64 = 0.5;
/// Bona fide entries are augmented twice as often as morphs.
pub const BONAFIDE_AUGMENT_WEIGHT: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentOp {
    Flip,
    Rotate,
    Brightness,
    Contrast,
    CropResize,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] =
        [AugmentOp::Flip, AugmentOp::Rotate, AugmentOp::Brightness, AugmentOp::Contrast, AugmentOp::CropResize];
}

pub fn augment(sample: &LabeledSample, rng: &mut RngState) -> LabeledSample {
    let op = AugmentOp::ALL[rng.below(AugmentOp::ALL.len())];
    augment_with(sample, op, rng)
}

/// Applies `op` with its parameter drawn from `rng`. Label, subjects and
/// technique are carried over untouched.
pub fn augment_with(sample: &LabeledSample, op: AugmentOp, rng: &mut RngState) -> LabeledSample {
    let img = &sample.image;
    let s = img.shape()[1];
    let image = match op {
        AugmentOp::Flip => {
            let mut out = img.clone();
            for (dst, src) in out.data_mut().chunks_mut(s).zip(img.data().chunks(s)) {
                dst.iter_mut().zip(src.iter().rev()).for_each(|(d, v)| *d = *v);
            }
            out
        }
        AugmentOp::Rotate => warp(img, rng.uniform_range(-10.0, 10.0).to_radians(), 1.0, [0.0, 0.0]),
        AugmentOp::Brightness => {
            let delta = rng.uniform_range(-0.1, 0.1) as f32;
            img.map(|v| (v + delta).clamp(0.0, 1.0))
        }
        AugmentOp::Contrast => {
            let k = rng.uniform_range(0.9, 1.1) as f32;
            let mean = img.mean();
            img.map(|v| ((v - mean) * k + mean).clamp(0.0, 1.0))
        }
        AugmentOp::CropResize => crop_resize(img, 0.9, rng),
    };
    LabeledSample { image, ..sample.clone() }
}

fn crop_resize(img: &Tensor<f32>, fraction: f64, rng: &mut RngState) -> Tensor<f32> {
    let s = img.shape()[1];
    let side = ((s as f64 * fraction).round() as usize).clamp(1, s);
    let (oy, ox) = (rng.below(s - side + 1), rng.below(s - side + 1));
    let step = if s > 1 { (side - 1) as f64 / (s - 1) as f64 } else { 0.0 };
    let mut out = img.clone();
    let dst = out.data_mut();
    for i in 0..s {
        for j in 0..s {
            dst[i * s + j] = bilinear(img.data(), s, oy as f64 + i as f64 * step, ox as f64 + j as f64 * step);
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AugmentLog {
    pub bonafide_entries: usize,
    pub morph_entries: usize,
    pub bonafide_events: usize,
    pub morph_events: usize,
}

impl AugmentLog {
    /// Per-capita bona fide augmentation rate over the morph rate.
    pub fn per_capita_ratio(&self) -> f64 {
        let b = self.bonafide_events as f64 / self.bonafide_entries.max(1) as f64;
        let m = self.morph_events as f64 / self.morph_entries.max(1) as f64;
        b / m
    }
}

/// One epoch's training entries: every original plus the augmented copies.
/// An entry of weight `w` is augmented with probability `w·AUGMENT_BASE_RATE`,
/// which makes every bona fide image contribute exactly one copy.
pub fn epoch_samples(train: &[LabeledSample], rng: &mut RngState) -> (Vec<LabeledSample>, AugmentLog) {
    let mut out = train.to_vec();
    let mut log = AugmentLog::default();
    for (k, s) in train.iter().enumerate() {
        let mut r = rng.substream(k as u64);
        let (weight, entries) = match s.label {
            Label::Bonafide => (BONAFIDE_AUGMENT_WEIGHT, &mut log.bonafide_entries),
            Label::Morph => (1.0, &mut log.morph_entries),
        };
        *entries += 1;
        if r.bernoulli((weight * AUGMENT_BASE_RATE).min(1.0)) {
            match s.label {
                Label::Bonafide => log.bonafide_events += 1,
                Label::Morph => log.morph_events += 1,
            }
            out.push(augment(s, &mut r));
        }
    }
    *rng = rng.substream(u64::MAX);
    (out, log)
}
