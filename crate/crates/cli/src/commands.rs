//! One function per subcommand. Each writes its human-readable summary to
//! `out` so tests can capture it.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;

use dmad_core::adapter::Adapter;
use dmad_core::data_synth::{build_protocol, load_split, read_manifest, read_pgm, write_dataset, write_pgm, AccessLog};
use dmad_core::distill::{train_student, train_teacher, StudentWithAdapter, TrainReport};
use dmad_core::explain_lime::{explain, Scorer};
use dmad_core::metrics::{det_curve, per_technique_report, summarize, write_det, write_scores, ScoreRecord, Summary};
use dmad_core::teacher_cnn::TeacherCnn;
use dmad_core::tensor_nn::{Checkpoint, RngState, Tensor};
use dmad_core::vit_lora::VitModel;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const TEACHER_REPORT: &str = "teacher_report.csv";
pub const STUDENT_REPORT: &str = "student_report.csv";
pub const TEACHER_ACCESS: &str = "teacher_access.log";
pub const STUDENT_ACCESS: &str = "student_access.log";

const EVAL_BATCH: usize = 256;

/// Evaluation split selector: DS-A, DS-B or DS-C.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    A,
    B,
    C,
}

impl Split {
    pub fn parts(self) -> &'static [&'static str] {
        match self {
            Split::A => &["a-train", "a-val"],
            Split::B => &["b-train", "b-val"],
            Split::C => &["c"],
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Split::A => "a",
            Split::B => "b",
            Split::C => "c",
        }
    }
}

fn data_rng(cfg: &RunConfig) -> RngState {
    RngState::new(cfg.distill.seed)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub fn out_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> CliResult<PathBuf> {
    flag.or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set output_dir in the config".into()))
}

pub fn cmd_gen(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> CliResult<()> {
    create_dir(dir)?;
    let splits = build_protocol(&cfg.data, &data_rng(cfg).stream("data"))?;
    let rows = write_dataset(dir, &splits)?;
    writeln!(out, "{:<8} {:>8} {:>8} {:>8}", "split", "bonafide", "morph", "subjects")?;
    for (name, samples) in splits.parts() {
        let morphs = samples.iter().filter(|s| s.is_morph()).count();
        let mut subjects: Vec<u64> = samples.iter().flat_map(|s| s.subjects.iter().copied()).collect();
        subjects.sort_unstable();
        subjects.dedup();
        writeln!(out, "{:<8} {:>8} {:>8} {:>8}", name, samples.len() - morphs, morphs, subjects.len())?;
    }
    writeln!(out, "wrote {} images to {}", rows.len(), dir.display())?;
    Ok(())
}

fn stalled_check(report: &TrainReport) -> CliResult<()> {
    if report.stalled() {
        return Err(CliError::Anomaly(format!(
            "validation loss never improved after epoch 1 (stopped at epoch {})",
            report.records.len()
        )));
    }
    Ok(())
}

fn report_line(out: &mut dyn Write, what: &str, report: &TrainReport) -> CliResult<()> {
    writeln!(
        out,
        "{what}: {} epochs, best epoch {} (val loss {:.6}), {:?}",
        report.records.len(),
        report.best_epoch,
        report.best().val_loss,
        report.stop
    )?;
    Ok(())
}

pub fn cmd_train_teacher(cfg: &RunConfig, data: &Path, dir: &Path, out: &mut dyn Write) -> CliResult<()> {
    create_dir(dir)?;
    let mut log = AccessLog::default();
    let train = load_split(data, &["a-train"], &mut log)?;
    let val = load_split(data, &["a-val"], &mut log)?;
    log.write(&dir.join(TEACHER_ACCESS))?;
    let mut rng = data_rng(cfg).stream("init-teacher");
    let mut teacher = TeacherCnn::<f32>::new(&cfg.teacher, &mut rng)?;
    info!("teacher: {} train / {} val samples", train.len(), val.len());
    let report = train_teacher(&mut teacher, &train, &val, &cfg.distill, &data_rng(cfg))?;
    let mut ckpt = Checkpoint::new();
    ckpt.add_module("teacher", &teacher);
    ckpt.write_file(dir.join(TEACHER_CKPT))?;
    report.write_csv(&dir.join(TEACHER_REPORT))?;
    report_line(out, "teacher", &report)?;
    stalled_check(&report)
}

pub fn load_teacher(cfg: &RunConfig, path: &Path) -> CliResult<TeacherCnn<f32>> {
    if !path.exists() {
        return Err(CliError::Dependency(format!(
            "teacher checkpoint {} not found; run train-teacher first",
            path.display()
        )));
    }
    let ckpt = Checkpoint::read_file(path)?;
    if !ckpt.has_prefix("teacher") {
        return Err(CliError::Dependency(format!("{} holds no teacher parameters", path.display())));
    }
    let mut teacher = TeacherCnn::<f32>::new(&cfg.teacher, &mut RngState::new(0))?;
    ckpt.load_into("teacher", &mut teacher)?;
    teacher.freeze();
    Ok(teacher)
}

pub fn new_bundle(cfg: &RunConfig, rng: &mut RngState) -> CliResult<StudentWithAdapter<f32>> {
    let mut student = VitModel::<f32>::new(&cfg.student, rng)?;
    student.attach_lora(&cfg.lora, rng)?;
    let adapter = Adapter::new(&cfg.adapter_config(), rng)?;
    Ok(StudentWithAdapter { student, adapter })
}

pub fn cmd_train_student(
    cfg: &RunConfig,
    data: &Path,
    dir: &Path,
    teacher_path: &Path,
    out: &mut dyn Write,
) -> CliResult<()> {
    let teacher = load_teacher(cfg, teacher_path)?;
    create_dir(dir)?;
    let mut log = AccessLog::default();
    let train = load_split(data, &["b-train"], &mut log)?;
    let val = load_split(data, &["b-val"], &mut log)?;
    log.write(&dir.join(STUDENT_ACCESS))?;
    let mut bundle = new_bundle(cfg, &mut data_rng(cfg).stream("init-student"))?;
    info!("student: {} train / {} val samples", train.len(), val.len());
    let report = train_student(&mut bundle, &teacher, &train, &val, &cfg.distill, &data_rng(cfg))?;
    let mut ckpt = Checkpoint::new();
    ckpt.add_module("", &bundle);
    ckpt.write_file(dir.join(STUDENT_CKPT))?;
    report.write_csv(&dir.join(STUDENT_REPORT))?;
    report_line(out, "student", &report)?;
    stalled_check(&report)
}

/// A detector restored from either checkpoint kind.
pub enum Detector {
    Teacher(Box<TeacherCnn<f32>>),
    Student(Box<StudentWithAdapter<f32>>),
}

impl Detector {
    pub fn load(cfg: &RunConfig, path: &Path) -> CliResult<Self> {
        if !path.exists() {
            return Err(CliError::Dependency(format!(
                "checkpoint {} not found; run train-teacher or train-student first",
                path.display()
            )));
        }
        let ckpt = Checkpoint::read_file(path)?;
        if ckpt.has_prefix("student") {
            let mut bundle = new_bundle(cfg, &mut RngState::new(0))?;
            ckpt.load_into("", &mut bundle)?;
            Ok(Detector::Student(Box::new(bundle)))
        } else if ckpt.has_prefix("teacher") {
            let mut teacher = TeacherCnn::<f32>::new(&cfg.teacher, &mut RngState::new(0))?;
            ckpt.load_into("teacher", &mut teacher)?;
            teacher.freeze();
            Ok(Detector::Teacher(Box::new(teacher)))
        } else {
            Err(CliError::Core(dmad_core::Error::Checkpoint(format!(
                "{} holds neither teacher nor student parameters",
                path.display()
            ))))
        }
    }

    pub fn scorer(&self) -> &dyn Scorer {
        match self {
            Detector::Teacher(t) => t.as_ref(),
            Detector::Student(b) => &b.student,
        }
    }
}

fn summary_row(label: &str, s: &Summary) -> String {
    format!("{label},{},{},{},{},{},{}", s.bonafide, s.morphs, s.d_eer, s.eer_threshold, s.bpcer_at_5, s.bpcer_at_10)
}

pub const SUMMARY_HEADER: &str = "technique,bonafide,morphs,d_eer,eer_threshold,bpcer_at_5,bpcer_at_10";

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    split: Split,
    dir: &Path,
    out: &mut dyn Write,
) -> CliResult<Summary> {
    let detector = Detector::load(cfg, checkpoint)?;
    let rows: Vec<_> = read_manifest(data)?.into_iter().filter(|r| split.parts().contains(&r.split.as_str())).collect();
    let mut log = AccessLog::default();
    let samples = load_split(data, split.parts(), &mut log)?;
    let scorer = detector.scorer();
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images = Tensor::stack(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        scores.extend(scorer.score(&images)?);
    }
    let records: Vec<ScoreRecord> = rows
        .iter()
        .zip(&samples)
        .zip(&scores)
        .map(|((r, s), &score)| ScoreRecord::new(r.path.clone(), s.label, score, r.technique.clone()))
        .collect();
    create_dir(dir)?;
    let tag = split.tag();
    write_scores(&dir.join(format!("scores_{tag}.csv")), &records)?;
    write_det(&dir.join(format!("det_{tag}.csv")), &det_curve(&records)?)?;
    let summary = summarize(&records)?;
    let techniques = per_technique_report(&records)?;

    let mut csv = format!("{SUMMARY_HEADER}\n{}\n", summary_row("all", &summary));
    for row in &techniques.rows {
        writeln!(csv, "{}", summary_row(&row.technique, &row.summary)).unwrap();
    }
    std::fs::write(dir.join(format!("summary_{tag}.csv")), csv)?;

    writeln!(out, "split {tag}: {} bona fide, {} morphs", summary.bonafide, summary.morphs)?;
    writeln!(out, "D-EER            {:.2}%", 100.0 * summary.d_eer)?;
    writeln!(out, "BPCER@MACER=5%   {:.2}%", 100.0 * summary.bpcer_at_5)?;
    writeln!(out, "BPCER@MACER=10%  {:.2}%", 100.0 * summary.bpcer_at_10)?;
    writeln!(out, "{:<12} {:>6} {:>8} {:>10} {:>11}", "technique", "morphs", "D-EER", "BPCER@5%", "BPCER@10%")?;
    for row in &techniques.rows {
        let s = &row.summary;
        writeln!(
            out,
            "{:<12} {:>6} {:>7.2}% {:>9.2}% {:>10.2}%",
            row.technique,
            s.morphs,
            100.0 * s.d_eer,
            100.0 * s.bpcer_at_5,
            100.0 * s.bpcer_at_10
        )?;
    }
    for w in &techniques.warnings {
        writeln!(out, "warning: {w}")?;
    }
    Ok(summary)
}

pub fn cmd_explain(
    cfg: &RunConfig,
    checkpoint: &Path,
    image_path: &Path,
    dir: &Path,
    top_k: Option<usize>,
    out: &mut dyn Write,
) -> CliResult<()> {
    let detector = Detector::load(cfg, checkpoint)?;
    let image = read_pgm(image_path)?;
    let mut lime = cfg.lime.clone();
    if let Some(k) = top_k {
        lime.top_k = k;
    }
    let explanation = explain(detector.scorer(), &image, &lime)?;
    create_dir(dir)?;
    let stem = image_path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    explanation.attribution.write_csv(&dir.join(format!("{stem}_lime.csv")))?;
    write_pgm(&dir.join(format!("{stem}_overlay.pgm")), &explanation.overlay)?;
    let a = &explanation.attribution;
    writeln!(out, "local fidelity R² {:.4}, intercept {:.6}", a.local_fidelity_r2, a.intercept)?;
    writeln!(out, "{:>4} {:>4} {:>12}", "row", "col", "weight")?;
    for (r, c, w) in a.top_regions(lime.top_k) {
        writeln!(out, "{r:>4} {c:>4} {w:>12.6}")?;
    }
    Ok(())
}
