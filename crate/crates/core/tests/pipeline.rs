//! The public API end to end on a tiny protocol: disk round trip, training,
//! checkpoint reload, metrics and explanation.

use dmad_core::adapter::{Adapter, AdapterConfig};
use dmad_core::data_synth::{build_protocol, load_split, write_dataset, AccessLog, ProtocolConfig};
use dmad_core::distill::{train_student, train_teacher, DistillConfig, StudentWithAdapter};
use dmad_core::explain_lime::{explain, LimeConfig};
use dmad_core::metrics::{summarize, ScoreRecord};
use dmad_core::teacher_cnn::{TeacherCnn, TeacherConfig};
use dmad_core::tensor_nn::{Checkpoint, Module, RngState, Tensor};
use dmad_core::vit_lora::{LoraConfig, VitConfig, VitModel};

fn images(samples: &[dmad_core::data_synth::LabeledSample]) -> Tensor<f32> {
    Tensor::stack(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn tiny_protocol_trains_reloads_and_explains() {
    let root = std::env::temp_dir().join(format!("dmad-pipeline-{}", std::process::id()));
    let protocol = ProtocolConfig {
        image_size: 16,
        subjects: [4, 4, 4],
        bonafide_per_subject: 2,
        pairs: [3, 3, 3],
        ..Default::default()
    };
    write_dataset(&root, &build_protocol(&protocol, &RngState::new(5)).unwrap()).unwrap();
    let mut log = AccessLog::default();
    let a_train = load_split(&root, &["a-train"], &mut log).unwrap();
    let a_val = load_split(&root, &["a-val"], &mut log).unwrap();
    let b_train = load_split(&root, &["b-train"], &mut log).unwrap();
    let b_val = load_split(&root, &["b-val"], &mut log).unwrap();
    assert!(log.opened.iter().all(|p| !p.starts_with("ds_c")));
    let c = load_split(&root, &["c"], &mut log).unwrap();
    std::fs::remove_dir_all(&root).unwrap();

    let cfg =
        DistillConfig { epochs: 2, batch_size: 8, teacher_lr: 3e-3, student_lr: 3e-3, ..DistillConfig::default() };
    let tcfg = TeacherConfig {
        image_size: 16,
        channels: vec![4, 8],
        blocks: vec![1, 1],
        embed_dim: 8,
        ..TeacherConfig::default()
    };
    let mut rng = RngState::new(6);
    let mut teacher = TeacherCnn::<f32>::new(&tcfg, &mut rng).unwrap();
    let report = train_teacher(&mut teacher, &a_train, &a_val, &cfg, &RngState::new(6)).unwrap();
    assert_eq!(report.records.len(), 2);
    teacher.freeze();

    let vit = VitConfig { image_size: 16, patch_size: 4, dim: 16, depth: 1, heads: 2, ..VitConfig::default() };
    let mut student = VitModel::<f32>::new(&vit, &mut rng).unwrap();
    student.attach_lora(&LoraConfig::default(), &mut rng).unwrap();
    let adapter = Adapter::new(&AdapterConfig::new(8, 16), &mut rng).unwrap();
    let mut bundle = StudentWithAdapter { student, adapter };
    let before = teacher.fingerprint();
    train_student(&mut bundle, &teacher, &b_train, &b_val, &cfg, &RngState::new(6)).unwrap();
    assert_eq!(teacher.fingerprint(), before);

    let mut ckpt = Checkpoint::new();
    ckpt.add_module("", &bundle);
    let restored_ckpt = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    let mut student = VitModel::<f32>::new(&vit, &mut RngState::new(0)).unwrap();
    student.attach_lora(&LoraConfig::default(), &mut RngState::new(0)).unwrap();
    let adapter = Adapter::new(&AdapterConfig::new(8, 16), &mut RngState::new(0)).unwrap();
    let mut restored = StudentWithAdapter { student, adapter };
    restored_ckpt.load_into("", &mut restored).unwrap();
    let x = images(&c);
    assert_eq!(restored.student.attack_scores(&x).unwrap(), bundle.student.attack_scores(&x).unwrap());

    let records: Vec<ScoreRecord> = c
        .iter()
        .zip(bundle.student.attack_scores(&x).unwrap())
        .enumerate()
        .map(|(k, (s, score))| ScoreRecord::new(k.to_string(), s.label, score, None))
        .collect();
    let summary = summarize(&records).unwrap();
    assert!((0.0..=1.0).contains(&summary.d_eer));
    assert_eq!(summary.bonafide + summary.morphs, c.len());

    let lime = LimeConfig { grid: 4, num_samples: 64, ..LimeConfig::default() };
    let e = explain(&restored.student, &c[0].image, &lime).unwrap();
    assert_eq!(e.attribution.weights.shape(), &[4, 4]);
    assert_eq!(explain(&bundle.student, &c[0].image, &lime).unwrap(), e);
}
