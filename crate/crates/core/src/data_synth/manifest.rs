//! On-disk dataset: PGM images under `ds_a/`, `ds_b/`, `ds_c/` and a CSV
//! manifest `path,label,subject_a,subject_b,technique,split`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_pgm, save_pgm, Label, LabeledSample, ProtocolSplits, Technique};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SPLIT_NAMES: [&str; 5] = ["a-train", "a-val", "b-train", "b-val", "c"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// Relative to the dataset root, `/`-separated.
    pub path: String,
    pub label: usize,
    pub subject_a: u64,
    pub subject_b: Option<u64>,
    pub technique: Option<String>,
    pub split: String,
}

impl ManifestRow {
    fn to_sample_meta(&self) -> Result<(Label, Vec<u64>, Option<Technique>)> {
        let label = Label::from_index(self.label)?;
        let subjects = std::iter::once(self.subject_a).chain(self.subject_b).collect();
        let technique = self.technique.as_deref().map(str::parse).transpose()?;
        Ok((label, subjects, technique))
    }
}

fn directory(split: &str) -> &'static str {
    match split.as_bytes()[0] {
        b'a' => "ds_a",
        b'b' => "ds_b",
        _ => "ds_c",
    }
}

/// Writes every split's images and the manifest. Returns the rows in write
/// order.
pub fn write_dataset(root: &Path, splits: &ProtocolSplits) -> Result<Vec<ManifestRow>> {
    for d in ["ds_a", "ds_b", "ds_c"] {
        std::fs::create_dir_all(root.join(d))?;
    }
    let mut rows = Vec::new();
    for (split, samples) in splits.parts() {
        for (k, s) in samples.iter().enumerate() {
            let path = format!("{}/{split}-{k:05}.pgm", directory(split));
            std::fs::write(root.join(&path), save_pgm(&s.image)?)?;
            rows.push(ManifestRow {
                path,
                label: s.label.index(),
                subject_a: s.subjects[0],
                subject_b: s.subjects.get(1).copied(),
                technique: s.technique.map(|t| t.as_str().to_string()),
                split: split.to_string(),
            });
        }
    }
    let mut w = csv::Writer::from_path(root.join(MANIFEST_FILE))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Data(format!("no {MANIFEST_FILE} under {}", root.display())));
    }
    let mut rows = Vec::new();
    for r in csv::Reader::from_path(&path)?.deserialize() {
        let row: ManifestRow = r?;
        if !SPLIT_NAMES.contains(&row.split.as_str()) {
            return Err(Error::Data(format!("manifest row {:?} has unknown split {:?}", row.path, row.split)));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Every image file a command opened, in order. Lets the protocol audit
/// prove that training never touched the evaluation split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessLog {
    pub opened: Vec<PathBuf>,
}

impl AccessLog {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for p in &self.opened {
            text.push_str(&p.to_string_lossy());
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Loads the samples of the named splits. Only the matching files are read.
pub fn load_split(root: &Path, splits: &[&str], log: &mut AccessLog) -> Result<Vec<LabeledSample>> {
    if let Some(bad) = splits.iter().find(|s| !SPLIT_NAMES.contains(s)) {
        return Err(Error::Data(format!("unknown split {bad:?}; expected one of {SPLIT_NAMES:?}")));
    }
    let mut out = Vec::new();
    for row in read_manifest(root)?.iter().filter(|r| splits.contains(&r.split.as_str())) {
        let (label, subjects, technique) = row.to_sample_meta()?;
        let path = PathBuf::from(&row.path);
        log.opened.push(path.clone());
        let image = read_pgm(&root.join(path))?;
        out.push(LabeledSample::new(image, label, subjects, technique)?);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("splits {splits:?} hold no samples under {}", root.display())));
    }
    Ok(out)
}
