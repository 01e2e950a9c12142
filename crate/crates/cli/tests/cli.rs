use std::path::Path;
use std::process::{Command, Output};

use dmad_cli::RunConfig;

fn dmad(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmad")).args(args).current_dir(cwd).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
[data]
image_size = 16
subjects = [3, 3, 3]
bonafide_per_subject = 2
pairs = [2, 2, 2]

[teacher]
image_size = 16
channels = [4, 8]
blocks = [1, 1]
embed_dim = 8

[student]
image_size = 16
patch_size = 4
dim = 16
depth = 1
heads = 2

[distill]
epochs = 2
batch_size = 8
teacher_lr = 3e-3
student_lr = 3e-3
"#;

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dmad(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(dmad(&["--version"], dir.path()).status.code(), Some(0));
    assert_eq!(dmad(&["no-such-command"], dir.path()).status.code(), Some(1));
}

#[test]
fn config_errors_name_the_key_and_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[distill]\nlamda = 0.5\n").unwrap();
    let o = dmad(&["--config", "bad.toml", "print-config"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("distill.lamda"), "{}", stderr(&o));

    std::fs::write(dir.path().join("sizes.toml"), "[student]\nimage_size = 16\n").unwrap();
    let o = dmad(&["--config", "sizes.toml", "print-config"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = dmad(&["--seed", "9", "print-config"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let cfg = RunConfig::parse(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::default().with_seed(Some(9)));
}

#[test]
fn missing_inputs_map_to_their_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = dmad(&["--config", "small.toml", "gen"], dir.path());
    assert_eq!(o.status.code(), Some(1), "no output directory is a usage error");

    let o = dmad(&["--config", "small.toml", "gen", "--out", "data"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("wrote"));

    let o = dmad(&["--config", "small.toml", "train-student", "--data", "data", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train-teacher"), "{}", stderr(&o));

    let o = dmad(
        &["--config", "small.toml", "eval", "--checkpoint", "nowhere.ckpt", "--data", "data", "--out", "run"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));

    std::fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = dmad(
        &["--config", "small.toml", "eval", "--checkpoint", "junk.ckpt", "--data", "data", "--out", "run"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "small.toml"];
        all.extend_from_slice(args);
        let o = dmad(&all, dir.path());
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    run(&["gen", "--out", "data"]);
    run(&["train-teacher", "--data", "data", "--out", "run"]);
    run(&["train-student", "--data", "data", "--out", "run"]);
    let eval = run(&["eval", "--checkpoint", "run/student.ckpt", "--data", "data", "--out", "run"]);
    assert!(eval.contains("D-EER") && eval.contains("BPCER@MACER=5%"), "{eval}");
    for f in ["scores_c.csv", "det_c.csv", "summary_c.csv"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    let explain = run(&[
        "explain",
        "--checkpoint",
        "run/teacher.ckpt",
        "--image",
        "data/ds_c/c-00000.pgm",
        "--out",
        "run",
        "--topk",
        "3",
    ]);
    assert!(explain.contains("local fidelity"), "{explain}");
    assert!(dir.path().join("run/c-00000_lime.csv").exists());
    assert!(dir.path().join("run/c-00000_overlay.pgm").exists());
}
