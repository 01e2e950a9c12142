//! Detection error rates for morphing attack detection.
//!
//! Scores are attack likelihoods: a record is classified as an attack when
//! `score ≥ threshold`. MACER is the fraction of morphs below the threshold,
//! BPCER the fraction of bona fide samples at or above it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_synth::Label;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub label: Label,
    pub score: f64,
    pub technique: Option<String>,
}

impl ScoreRecord {
    pub fn new(sample_id: impl Into<String>, label: Label, score: f64, technique: Option<String>) -> Self {
        Self { sample_id: sample_id.into(), label, score, technique }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub macer: f64,
    pub bpcer: f64,
}

fn check(records: &[ScoreRecord]) -> Result<(usize, usize)> {
    if let Some(r) = records.iter().find(|r| !(0.0..=1.0).contains(&r.score)) {
        return Err(Error::Evaluation(format!(
            "score {} of {:?} is not a finite value in [0, 1]",
            r.score, r.sample_id
        )));
    }
    let morphs = records.iter().filter(|r| r.label == Label::Morph).count();
    let bonafide = records.len() - morphs;
    if morphs == 0 || bonafide == 0 {
        return Err(Error::Protocol(format!(
            "error rates need both classes, got {bonafide} bona fide and {morphs} morph records"
        )));
    }
    Ok((bonafide, morphs))
}

/// `(MACER, BPCER)` at one threshold.
pub fn error_rates_at(records: &[ScoreRecord], threshold: f64) -> Result<(f64, f64)> {
    let (bonafide, morphs) = check(records)?;
    let missed = records.iter().filter(|r| r.label == Label::Morph && r.score < threshold).count();
    let rejected = records.iter().filter(|r| r.label == Label::Bonafide && r.score >= threshold).count();
    Ok((missed as f64 / morphs as f64, rejected as f64 / bonafide as f64))
}

/// Sweep over `−∞`, every distinct score in ascending order, then `+∞`.
pub fn det_curve(records: &[ScoreRecord]) -> Result<Vec<DetPoint>> {
    let (bonafide, morphs) = check(records)?;
    let mut sorted: Vec<(f64, Label)> = records.iter().map(|r| (r.score, r.label)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = vec![DetPoint { threshold: f64::NEG_INFINITY, macer: 0.0, bpcer: 1.0 }];
    // Counts of records strictly below the current threshold.
    let (mut morph_below, mut bona_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        points.push(DetPoint {
            threshold: t,
            macer: morph_below as f64 / morphs as f64,
            bpcer: (bonafide - bona_below) as f64 / bonafide as f64,
        });
        while i < sorted.len() && sorted[i].0 == t {
            match sorted[i].1 {
                Label::Morph => morph_below += 1,
                Label::Bonafide => bona_below += 1,
            }
            i += 1;
        }
    }
    points.push(DetPoint { threshold: f64::INFINITY, macer: 1.0, bpcer: 0.0 });
    Ok(points)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate by linear interpolation between the two sweep points
/// where `MACER − BPCER` changes sign. An exact tie on the sweep is returned
/// directly, preferring the smallest threshold.
pub fn d_eer(records: &[ScoreRecord]) -> Result<Eer> {
    eer_from_curve(&det_curve(records)?)
}

pub fn eer_from_curve(points: &[DetPoint]) -> Result<Eer> {
    let gap = |p: &DetPoint| p.macer - p.bpcer;
    let i = points
        .iter()
        .position(|p| gap(p) >= 0.0)
        .ok_or_else(|| Error::Evaluation("DET sweep never reaches MACER ≥ BPCER".into()))?;
    let p1 = points[i];
    if gap(&p1) == 0.0 || i == 0 {
        return Ok(Eer { eer: p1.macer, threshold: p1.threshold });
    }
    let p0 = points[i - 1];
    let (d0, d1) = (gap(&p0), gap(&p1));
    let alpha = -d0 / (d1 - d0);
    let eer = p0.macer + alpha * (p1.macer - p0.macer);
    // A sentinel has no finite position to interpolate towards; its finite
    // neighbour is the operating threshold.
    let threshold = match (p0.threshold.is_finite(), p1.threshold.is_finite()) {
        (true, true) => p0.threshold + alpha * (p1.threshold - p0.threshold),
        (true, false) => p0.threshold,
        (false, true) => p1.threshold,
        (false, false) => 0.5,
    };
    Ok(Eer { eer, threshold })
}

/// Lowest BPCER among sweep thresholds with `MACER ≤ target`. The `−∞`
/// sentinel always qualifies, so the worst case is 1.
pub fn bpcer_at_macer(records: &[ScoreRecord], target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Evaluation(format!("MACER target {target} outside (0, 1)")));
    }
    Ok(bpcer_at_macer_curve(&det_curve(records)?, target))
}

fn bpcer_at_macer_curve(points: &[DetPoint], target: f64) -> f64 {
    points.iter().filter(|p| p.macer <= target).map(|p| p.bpcer).fold(1.0, f64::min)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub d_eer: f64,
    pub eer_threshold: f64,
    pub bpcer_at_5: f64,
    pub bpcer_at_10: f64,
    pub bonafide: usize,
    pub morphs: usize,
}

pub fn summarize(records: &[ScoreRecord]) -> Result<Summary> {
    let (bonafide, morphs) = check(records)?;
    let curve = det_curve(records)?;
    let eer = eer_from_curve(&curve)?;
    Ok(Summary {
        d_eer: eer.eer,
        eer_threshold: eer.threshold,
        bpcer_at_5: bpcer_at_macer_curve(&curve, 0.05),
        bpcer_at_10: bpcer_at_macer_curve(&curve, 0.10),
        bonafide,
        morphs,
    })
}

pub const UNTAGGED: &str = "untagged";

#[derive(Clone, Debug, PartialEq)]
pub struct TechniqueRow {
    pub technique: String,
    pub summary: Summary,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TechniqueReport {
    /// Sorted by technique tag.
    pub rows: Vec<TechniqueRow>,
    /// Tags seen on records but carried by no morph.
    pub warnings: Vec<String>,
}

/// Metrics per morph technique, each over all bona fide records plus that
/// technique's morphs.
pub fn per_technique_report(records: &[ScoreRecord]) -> Result<TechniqueReport> {
    check(records)?;
    let bonafide: Vec<&ScoreRecord> = records.iter().filter(|r| r.label == Label::Bonafide).collect();
    let mut groups: BTreeMap<&str, Vec<&ScoreRecord>> = BTreeMap::new();
    for r in records {
        let tag = r.technique.as_deref().unwrap_or(UNTAGGED);
        let group = groups.entry(tag).or_default();
        if r.label == Label::Morph {
            group.push(r);
        }
    }
    let mut report = TechniqueReport::default();
    for (tag, morphs) in groups {
        if morphs.is_empty() {
            if tag != UNTAGGED {
                report.warnings.push(format!("technique {tag:?} has no morph records; omitted"));
            }
            continue;
        }
        let subset: Vec<ScoreRecord> = bonafide.iter().chain(&morphs).map(|r| (*r).clone()).collect();
        report.rows.push(TechniqueRow { technique: tag.to_string(), summary: summarize(&subset)? });
    }
    Ok(report)
}

#[derive(Serialize, Deserialize)]
struct ScoreRow {
    sample_id: String,
    label: String,
    score: f64,
    technique: Option<String>,
}

fn label_name(l: Label) -> &'static str {
    match l {
        Label::Bonafide => "bonafide",
        Label::Morph => "morph",
    }
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(ScoreRow {
            sample_id: r.sample_id.clone(),
            label: label_name(r.label).into(),
            score: r.score,
            technique: r.technique.clone(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let row: ScoreRow = row?;
        let label = match row.label.as_str() {
            "bonafide" => Label::Bonafide,
            "morph" => Label::Morph,
            other => return Err(Error::Data(format!("score file label {other:?} is neither bonafide nor morph"))),
        };
        out.push(ScoreRecord { sample_id: row.sample_id, label, score: row.score, technique: row.technique });
    }
    Ok(out)
}

pub fn write_det(path: &Path, points: &[DetPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "macer", "bpcer"])?;
    for p in points {
        w.write_record([p.threshold.to_string(), p.macer.to_string(), p.bpcer.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_det(path: &Path) -> Result<Vec<DetPoint>> {
    let mut out = Vec::new();
    for row in csv::Reader::from_path(path)?.records() {
        let row = row?;
        let num = |i: usize| {
            row.get(i)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Data(format!("DET row {:?} is malformed", row)))
        };
        out.push(DetPoint { threshold: num(0)?, macer: num(1)?, bpcer: num(2)? });
    }
    Ok(out)
}
