use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn adner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adner")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "\
synth.n_source_labeled = 80
synth.n_target_unlabeled = 60
synth.n_test_shifted = 20
model.d_model = 16
model.n_heads = 2
model.d_ffn = 32
model.head_hidden = 16
train.lr = 0.001
train.max_epochs = 2
train.batch_size = 8
";

/// Writes a small synthetic corpus and a matching config; returns the config path.
fn small_run(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let o = adner(&["data", "synth", "--config", s(&cfg), "--out-dir", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = format!(
        "{SMALL}data.source = {}\ndata.target = {}\n",
        data.join("source.conll").display(),
        data.join("target.txt").display()
    );
    fs::write(&cfg, text).unwrap();
    cfg
}

#[test]
fn validate_clean_and_dirty_files() {
    let dir = TempDir::new().unwrap();
    let clean = dir.path().join("clean.conll");
    fs::write(&clean, "Paris B-LOC\nest O\n\nJean B-PER\nDupont I-PER\n").unwrap();
    let o = adner(&["data", "validate", "--in", s(&clean)]);
    assert_eq!(code(&o), 0);
    assert!(o.stderr.is_empty());

    let dirty = dir.path().join("dirty.conll");
    fs::write(&dirty, "a O\nb I-PER\n\nc B-LOC\nd I-ORG\n").unwrap();
    let o = adner(&["data", "validate", "--in", s(&dirty)]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains(":2:") && err.contains(":5:"), "{err}");
    assert!(err.contains("2 IOB2 violation"), "{err}");

    let o = adner(&["data", "validate", "--in", s(&dir.path().join("missing"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn convert_from_iob1() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.conll");
    let out = dir.path().join("out.conll");
    fs::write(&input, "-DOCSTART- -X- O\n\nx NN I-PER\ny NN I-PER\nz NN O\n").unwrap();
    assert_eq!(code(&adner(&["data", "convert", "--in", s(&input), "--out", s(&out)])), 2);
    let o = adner(&["data", "convert", "--in", s(&input), "--out", s(&out), "--from", "iob1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap(), "x B-PER\ny I-PER\nz O\n\n");
}

#[test]
fn stats_reports_json() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.conll");
    fs::write(&input, "a B-LOC\nb O\n\nc B-PER\nd I-PER\ne B-PER\n").unwrap();
    let o = adner(&["data", "stats", "--in", s(&input)]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["sentences"], 2);
    assert_eq!(v["tokens"], 5);
    assert_eq!(v["labeled"], true);
    assert_eq!(v["entities_per_class"]["PER"], 2);
    assert_eq!(v["length_histogram"]["3"], 1);

    fs::write(&input, "a\nb\n\nc\n").unwrap();
    let v: serde_json::Value = serde_json::from_slice(&adner(&["data", "stats", "--in", s(&input)]).stdout).unwrap();
    assert_eq!(v["labeled"], false);
    assert_eq!(v["tokens"], 3);
}

#[test]
fn synth_writes_all_corpora() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("synth");
    let o = adner(&[
        "data",
        "synth",
        "--out-dir",
        s(&out),
        "--set",
        "synth.n_source_labeled=30",
        "--set",
        "synth.n_target_unlabeled=10",
        "--set",
        "synth.n_test_shifted=5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["source.conll", "target.txt", "test_in.conll", "test_shift.conll", "config.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(code(&adner(&["data", "validate", "--in", s(&out.join("source.conll"))])), 0);
    let cfg = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(cfg.contains("synth.n_source_labeled = 30\n"));
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = TempDir::new().unwrap();
    let cfg = small_run(dir.path());
    let run = dir.path().join("run");
    let o = adner(&["train", "--config", s(&cfg), "--no-adapt", "--out-dir", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    for f in ["checkpoint.bin", "history.json", "config.txt", "test.conll"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let resolved = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(resolved.contains("train.adapt = false\n"));
    assert!(resolved.contains("model.vocab_size = "));

    let history: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("history.json")).unwrap()).unwrap();
    let records = history.as_array().unwrap();
    assert!(!records.is_empty() && records.len() <= 2);
    for key in ["epoch", "l_ner", "l_adv", "l_total", "val_metric", "lr_last"] {
        assert!(records[0].get(key).is_some(), "{key}");
    }

    let report = dir.path().join("report.json");
    let test_in = dir.path().join("data/test_in.conll");
    let o = adner(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--data",
        s(&test_in),
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let f1 = r["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert!(fs::read_to_string(dir.path().join("report.txt")).unwrap().contains("micro"));

    let raw = dir.path().join("raw.txt");
    let tagged = dir.path().join("tagged.conll");
    fs::write(&raw, "first sentence here\nand another\n").unwrap();
    let o = adner(&[
        "predict",
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--in",
        s(&raw),
        "--out",
        s(&tagged),
        "--format",
        "lines",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = fs::read_to_string(&tagged).unwrap();
    assert_eq!(out.split("\n\n").filter(|b| !b.trim().is_empty()).count(), 2);
    assert!(out.starts_with("first "));
    assert_eq!(code(&adner(&["data", "validate", "--in", s(&tagged)])), 0);

    let o = adner(&[
        "predict",
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--in",
        s(&dir.path().join("data/target.txt")),
        "--out",
        s(&tagged),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn adapted_training_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = small_run(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = adner(&["train", "--config", s(&cfg), "--adapt", "--out-dir", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["history.json", "checkpoint.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let history = fs::read_to_string(a.join("history.json")).unwrap();
    assert!(!history.contains("\"l_adv\": 0.0"));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&adner(&[])), 1);
    assert_eq!(code(&adner(&["train", "--bogus"])), 1);
    assert_eq!(code(&adner(&["--help"])), 0);

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "train.learning_rate = 0.1\n").unwrap();
    let o = adner(&["train", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("train.learning_rate"));

    fs::write(&cfg, "data.source = /nonexistent/file.conll\n").unwrap();
    assert_eq!(code(&adner(&["train", "--config", s(&cfg), "--out-dir", s(dir.path())])), 2);

    let cfg = small_run(dir.path());
    fs::write(
        &cfg,
        fs::read_to_string(&cfg).unwrap().replace("data.target", "# data.target"),
    )
    .unwrap();
    assert_eq!(code(&adner(&["train", "--config", s(&cfg), "--adapt", "--out-dir", s(dir.path())])), 1);

    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = adner(&["eval", "--checkpoint", s(&junk), "--data", s(&junk), "--report", s(&dir.path().join("r.json"))]);
    assert_eq!(code(&o), 2);
    assert!(o.stdout.is_empty());
}
