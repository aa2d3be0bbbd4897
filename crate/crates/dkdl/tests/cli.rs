use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use dkdl::config::Config;

fn dkdl(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dkdl"))
        .arg("--work-dir")
        .arg(work)
        .args(args)
        .env_remove("DKDL_WORK_DIR")
        .output()
        .unwrap()
}

fn ok(work: &Path, args: &[&str]) -> String {
    let out = dkdl(work, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const FAST: [&str; 8] = ["--set", "epochs.teacher=2", "--set", "epochs.distill=3", "--set", "epochs.finetune=2", "--seed", "0"];

fn pipeline(work: &Path) {
    ok(work, &["synth", "--per-class", "20", "--seed", "0"]);
    ok(work, &[&["train-teacher"], &FAST[..]].concat());
    ok(work, &[&["distill"], &FAST[..]].concat());
    ok(work, &[&["finetune"], &FAST[..]].concat());
    ok(work, &["eval", "--seed", "0"]);
}

/// RunLog CSV without the wall-clock column.
fn strip_wall(csv: &str) -> String {
    csv.lines()
        .map(|l| l.split(',').enumerate().filter(|(i, _)| *i != 5).map(|(_, f)| f).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn end_to_end_pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in ["teacher.ckpt", "student.ckpt", "dkdl-net.ckpt"] {
        let x = std::fs::read(a.path().join("checkpoints").join(f)).unwrap();
        let y = std::fs::read(b.path().join("checkpoints").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    for f in ["reports/dkdl-net.eval.json", "reports/dkdl-net.confusion.csv", "reports/dkdl-net.roc.csv", "cache/manifest.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    for stage in ["teacher", "distill", "finetune"] {
        let read = |d: &Path| std::fs::read_to_string(d.join("logs").join(format!("{stage}.csv"))).unwrap();
        assert_eq!(strip_wall(&read(a.path())), strip_wall(&read(b.path())));
        assert_eq!(read(a.path()).lines().count(), 1 + 1 + if stage == "distill" { 3 } else { 2 });
    }

    // Every produced file is indexed with its hash.
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("outputs.json")).unwrap()).unwrap();
    let files = index["files"].as_object().unwrap();
    for f in ["checkpoints/teacher.ckpt", "logs/distill.csv", "logs/finetune.config.json", "reports/dkdl-net.roc.svg"] {
        assert_eq!(files[f]["sha256"].as_str().unwrap().len(), 64, "{f}");
    }

    // The effective config is echoed to the logs directory and checkpoints.
    let cfg: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("logs/teacher.config.json")).unwrap()).unwrap();
    assert_eq!(cfg["epochs.teacher"], 2);
    let described = ok(a.path(), &["describe", a.path().join("checkpoints/dkdl-net.ckpt").to_str().unwrap()]);
    assert!(described.contains("config.epochs.finetune = 2"));
    assert!(described.contains("Total parameters: 6838"));
    assert!(described.contains("Trainable parameters: 4008"));

    // Merging keeps the report and drops the adapters from the parameter count.
    ok(a.path(), &["merge"]);
    let merged = a.path().join("checkpoints/dkdl-net-merged.ckpt");
    ok(a.path(), &["eval", merged.to_str().unwrap()]);
    let r1: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("reports/dkdl-net.eval.json")).unwrap()).unwrap();
    let r2: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("reports/dkdl-net-merged.eval.json")).unwrap()).unwrap();
    assert_eq!(r1["confusion"], r2["confusion"]);
    assert!(ok(a.path(), &["describe", merged.to_str().unwrap()]).contains("Trainable parameters: 0"));

    let bench = ok(a.path(), &["bench", "--set", "bench.samples=20", "--set", "bench.warmup=2"]);
    assert!(bench.contains("teacher:") && bench.contains("dkdl-net:"));
}

#[test]
fn describe_teacher_totals_69626() {
    let w = tempfile::tempdir().unwrap();
    ok(w.path(), &["synth", "--per-class", "4"]);
    ok(w.path(), &["train-teacher", "--set", "epochs.teacher=0"]);
    let out = ok(w.path(), &["describe", w.path().join("checkpoints/teacher.ckpt").to_str().unwrap()]);
    assert!(out.contains("Total parameters: 69626"), "{out}");
    assert!(out.contains("Conv1D_1"));
    assert_eq!(out.lines().filter(|l| l.starts_with("Conv1D")).count(), 6);
}

#[test]
fn missing_checkpoint_exits_2_with_path() {
    let w = tempfile::tempdir().unwrap();
    ok(w.path(), &["synth", "--per-class", "4"]);
    let out = dkdl(w.path(), &["eval", "no/such/model.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no/such/model.ckpt"));
}

#[test]
fn commands_need_a_dataset() {
    let w = tempfile::tempdir().unwrap();
    let out = dkdl(w.path(), &["train-teacher"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dkdl synth"));
}

#[test]
fn usage_errors_exit_1() {
    let w = tempfile::tempdir().unwrap();
    let out = dkdl(w.path(), &["eval", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(out.stdout.is_empty());
    for bad in [&["synth", "--set", "nope=1"][..], &["synth", "--set", "lr=-1"], &["synth", "--set", "lr"]] {
        assert_eq!(dkdl(w.path(), bad).status.code(), Some(1), "{bad:?}");
    }
}

#[test]
fn help_lists_every_config_key() {
    let w = tempfile::tempdir().unwrap();
    let keys: Vec<String> = Config::default().flat().into_keys().collect();
    assert!(keys.contains(&"dkd.alpha".to_string()));
    for sub in ["synth", "ingest", "train-teacher", "distill", "finetune", "merge", "eval", "bench", "describe"] {
        let out = dkdl(w.path(), &[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0));
        let text = String::from_utf8(out.stdout).unwrap();
        for k in &keys {
            assert!(text.contains(k.as_str()), "{sub} --help lacks {k}");
        }
    }
}

#[test]
fn config_file_then_flags() {
    let w = tempfile::tempdir().unwrap();
    let cfg = w.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"data": {"per_class": 5}, "seed": 9}"#).unwrap();
    let out = ok(w.path(), &["--config", cfg.to_str().unwrap(), "synth", "--set", "data.split_ratio=0.6"]);
    assert!(out.contains("[3, 3, 3, 3, 3, 3, 3, 3, 3, 3]"), "{out}");
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.path().join("cache/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
    assert_eq!(m["per_class"], 5);
}

#[test]
fn work_dir_defaults_to_environment() {
    let w = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_dkdl"))
        .args(["synth", "--per-class", "2"])
        .env("DKDL_WORK_DIR", w.path())
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert!(w.path().join("cache/manifest.json").exists());
}
