use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use caat_ehr::data::{generate_synthetic, write_processed, SynthConfig};
use caat_ehr::downstream::EvalReport;

const CONFIG: &str = r#"
seed = 5
classifiers = ["linear"]

[synth]
subjects = 60
max_stays_per_subject = 2
t_min = 4
t_max = 8
missing_rate = 0.1

[model]
d_model = 8
heads = 2

[pretrain]
epochs = 2

[folds]
folds = 3
repeats = 1
"#;

fn caat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caat"))
        .args(args)
        .env("CAAT_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// synth → preprocess → pretrain → embed → eval inside `root`.
fn chain(root: &Path) {
    let cfg = root.join("run.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let c = s(&cfg);
    let d = |n: &str| root.join(n);
    ok(&caat(&["synth", "--config", c, "--out", s(&d("synth"))]));
    ok(&caat(&[
        "preprocess",
        "--config",
        c,
        "--data",
        s(&d("synth/raw.csv")),
        "--schema",
        s(&d("synth/schema.toml")),
        "--out",
        s(&d("prep")),
    ]));
    ok(&caat(&["pretrain", "--config", c, "--data", s(&d("prep/embedding.csv")), "--out", s(&d("model"))]));
    ok(&caat(&[
        "embed",
        "--config",
        c,
        "--data",
        s(&d("prep/downstream.csv")),
        "--checkpoint",
        s(&d("model/checkpoint.caat")),
        "--out",
        s(&d("emb")),
    ]));
    ok(&caat(&[
        "eval",
        "--config",
        c,
        "--data",
        s(&d("prep/downstream.csv")),
        "--embeddings",
        &format!("caat={}", s(&d("emb/embeddings.csv"))),
        "--out",
        s(&d("eval")),
    ]));
}

#[test]
fn pipeline_is_reproducible_end_to_end() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    chain(a.path());
    chain(b.path());
    for f in [
        "synth/raw.csv",
        "prep/embedding.csv",
        "prep/manifest.csv",
        "prep/normstats.csv",
        "model/checkpoint.caat",
        "model/losscurve.csv",
        "emb/embeddings.csv",
        "eval/report.csv",
    ] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let report = EvalReport::from_csv(&fs::read_to_string(a.path().join("eval/report.csv")).unwrap()).unwrap();
    assert!(report.row("synthetic", "raw", "linear").is_some());
    assert!(report.row("synthetic", "caat", "linear").is_some());
    let lock = fs::read_to_string(a.path().join("eval/run.lock")).unwrap();
    assert!(lock.contains("command = \"eval\"") && lock.contains("seed = 5"));
}

#[test]
fn seed_flag_overrides_config_and_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let out = |n: &str| dir.path().join(n);
    ok(&caat(&["synth", "--config", s(&cfg), "--out", s(&out("a"))]));
    ok(&caat(&["synth", "--config", s(&cfg), "--seed", "6", "--out", s(&out("b"))]));
    assert_ne!(fs::read(out("a/raw.csv")).unwrap(), fs::read(out("b/raw.csv")).unwrap());
    let lock = fs::read_to_string(out("b/run.lock")).unwrap();
    assert!(lock.contains("seed = 6"));
}

#[test]
fn refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let o = dir.path().join("x");
    ok(&caat(&["synth", "--config", s(&cfg), "--out", s(&o)]));
    let again = caat(&["synth", "--config", s(&cfg), "--out", s(&o)]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&caat(&["synth", "--config", s(&cfg), "--out", s(&o), "--force"]));
}

#[test]
fn short_stay_is_a_data_error_naming_the_stay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        subjects: 6,
        ..SynthConfig::default()
    };
    let mut data = generate_synthetic(&cfg, 1).unwrap();
    let victim = data.samples[2].stay_id.clone();
    data.samples[2] = data.samples[2].slice_time(0, 2);
    let path = dir.path().join("short.csv");
    let mut buf = Vec::new();
    write_processed(&mut buf, &data).unwrap();
    fs::write(&path, buf).unwrap();
    let out = caat(&["pretrain", "--data", s(&path), "--out", s(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ERROR 2") && err.contains(&victim), "{err}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(caat(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(caat(&["synth"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = caat(&["eval", "--task", "nope", "--out", s(dir.path())]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn ablate_reports_all_three_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&caat(&["synth", "--config", s(&cfg), "--out", s(&p("synth"))]));
    ok(&caat(&[
        "preprocess",
        "--config",
        s(&cfg),
        "--data",
        s(&p("synth/raw.csv")),
        "--schema",
        s(&p("synth/schema.toml")),
        "--out",
        s(&p("prep")),
    ]));
    ok(&caat(&["ablate", "--config", s(&cfg), "--data", s(&p("prep")), "--out", s(&p("abl"))]));
    let report = EvalReport::from_csv(&fs::read_to_string(p("abl/report.csv")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 3);
    for a in ["full", "no-ca", "recon"] {
        assert!(report.row("synthetic", a, "linear").is_some(), "{a}");
        assert!(p(&format!("abl/checkpoint-{a}.caat")).exists());
    }
}
