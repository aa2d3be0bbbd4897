//! One PASS/FAIL line per acceptance criterion.
//!
//! Run with `cargo test -p dkdl --test acceptance -- --nocapture` to see
//! the lines. Set `DKDL_CWRU_DIR` to a directory of CWRU drive-end MAT files
//! to run the real-data criterion; it is skipped otherwise.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use dkdl::config::Config;
use dkdl::data::{build_manifest, Dataset, LabelMap, Split};
use dkdl::eval::{bench_latency, evaluate};
use dkdl::mat::{parse_mat, MatError};
use dkdl::train::{distill_student, finetune_lora, predict_logits, train_student_ce, train_teacher, RunLog};
use dkdl_core::checkpoint::Checkpoint;
use dkdl_core::distill::sample_terms;
use dkdl_core::gradcheck::run_suite;
use dkdl_core::metrics::EvalReport;
use dkdl_core::model::{build_dkdl_net_spec, build_student, build_teacher, count_parameters, LoraSettings, Model, INPUT_LEN};
use dkdl_core::signal::magnitude_spectrum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn params(spec: &dkdl_core::model::ModelSpec) -> Vec<usize> {
    spec.table_rows().unwrap().iter().map(|r| r.params).collect()
}

fn parameter_counts() -> Outcome {
    let teacher = build_teacher();
    let student = build_student();
    let net = build_dkdl_net_spec(&student, LoraSettings::default()).unwrap();
    let want_teacher = [1072, 0, 1632, 0, 6336, 0, 12480, 0, 12480, 0, 24960, 0, 8256, 2080, 330];
    ensure(params(&teacher) == want_teacher, || format!("teacher rows {:?}", params(&teacher)))?;
    ensure(params(&student) == [260, 0, 2570], || format!("student rows {:?}", params(&student)))?;
    ensure(params(&net) == [816, 260, 0, 3192, 2570], || format!("dkdl-net rows {:?}", params(&net)))?;
    let totals = (count_parameters(&teacher, true), count_parameters(&student, true), count_parameters(&net, false));
    ensure(totals == (69_626, 2_830, 6_838), || format!("totals {totals:?}"))?;
    Ok(format!(
        "teacher {}, student {}, dkdl-net {} ({} trainable with the base frozen); all rows match",
        totals.0,
        totals.1,
        totals.2,
        count_parameters(&net, true)
    ))
}

fn dkd_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for &n in &[2usize, 3, 10] {
        for &t in &[1.0, 2.0, 4.0] {
            for _ in 0..1112 {
                let scale = rng.random_range(0.1..8.0);
                let teacher: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
                let student: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
                let target = rng.random_range(0..n);
                let s = sample_terms(&teacher, &student, target, t).unwrap();
                worst = worst.max((s.kd - (s.tckd + (1.0 - s.teacher_target_prob) * s.nckd)).abs());
                count += 1;
            }
        }
    }
    ensure(count >= 10_000 && worst < 1e-9, || format!("max deviation {worst:e} over {count} pairs"))?;
    Ok(format!("max deviation {worst:.1e} over {count} pairs"))
}

fn gradient_suite() -> Outcome {
    let results = run_suite(100, 0xacce).unwrap();
    let failed: Vec<String> =
        results.iter().filter(|r| !r.passed()).map(|r| format!("{} ({:.1e}, {} kinks)", r.name, r.max_rel_err, r.kinks)).collect();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let kinks: usize = results.iter().map(|r| r.kinks).sum();
    ensure(failed.is_empty(), || format!("failing cases: {}", failed.join(", ")))?;
    Ok(format!("{} cases x 100 trials, worst relative error {worst:.1e}, {kinks} kink-straddling steps", results.len()))
}

/// Seed-0 artifacts shared by the LoRA and latency criteria.
struct Pipeline {
    data: Dataset,
    teacher: Model,
    teacher_log: RunLog,
    student: Model,
    student_ce: Model,
    net: Model,
}

fn pipeline_config(seed: u64) -> Config {
    Config::default()
        .with_overrides(&[
            format!("seed={seed}"),
            "epochs.teacher=5".into(),
            "epochs.distill=10".into(),
            "epochs.finetune=5".into(),
        ])
        .unwrap()
}

fn run_pipeline(seed: u64) -> Pipeline {
    let cfg = pipeline_config(seed);
    let data = Dataset::synthetic(280, 0.8, seed).unwrap();
    let t = train_teacher(&data, &cfg, None).unwrap();
    let student = distill_student(&t.model, &data, &cfg, None).unwrap().model;
    let student_ce = train_student_ce(&data, &cfg, None).unwrap().model;
    let net = finetune_lora(&student, &data, &cfg, None).unwrap().model;
    Pipeline { data, teacher: t.model, teacher_log: t.log, student, student_ce, net }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn synthetic_end_to_end(runs: &[Pipeline]) -> Outcome {
    let (mut teacher_acc, mut kd_acc, mut ce_acc, mut before_f1, mut after_f1) = (vec![], vec![], vec![], vec![], vec![]);
    for p in runs {
        let best = p.teacher_log.records.iter().filter_map(|r| r.eval_acc).fold(0.0, f64::max);
        teacher_acc.push(best);
        let kd = evaluate(&p.student, &p.data.test).unwrap();
        kd_acc.push(kd.accuracy);
        ce_acc.push(evaluate(&p.student_ce, &p.data.test).unwrap().accuracy);
        before_f1.push(kd.macro_f1);
        after_f1.push(evaluate(&p.net, &p.data.test).unwrap().macro_f1);
    }
    let detail = format!(
        "teacher acc {teacher_acc:?}; student acc KD {:.4} vs CE {:.4}; macro-F1 before/after LoRA {:.4}/{:.4}",
        mean(&kd_acc),
        mean(&ce_acc),
        mean(&before_f1),
        mean(&after_f1)
    );
    ensure(teacher_acc.iter().all(|&a| a >= 0.99), || detail.clone())?;
    ensure(mean(&kd_acc) >= mean(&ce_acc), || detail.clone())?;
    ensure(mean(&after_f1) >= mean(&before_f1), || detail.clone())?;
    Ok(detail)
}

fn random_split(n: usize, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Split {
        features: (0..n * INPUT_LEN).map(|_| rng.random_range(-3.0..3.0)).collect(),
        labels: vec![0; n],
        origins: (0..n).map(|i| (0, i)).collect(),
    }
}

fn lora_contracts(p: &Pipeline) -> Outcome {
    // Fresh adapters leave the logits untouched, bit for bit.
    let fresh = Model::dkdl_from_student(&p.student, LoraSettings::default(), 99).unwrap();
    let a = predict_logits(&fresh, &p.data.test).unwrap();
    let b = predict_logits(&p.student, &p.data.test).unwrap();
    ensure(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), || "fresh adapters changed the logits".into())?;

    // Merged and unmerged agree on random inputs.
    let inputs = random_split(1000, 5);
    let mut merged = p.net.clone();
    merged.merge_adapters().unwrap();
    let u = predict_logits(&p.net, &inputs).unwrap();
    let m = predict_logits(&merged, &inputs).unwrap();
    let diff = u.iter().zip(&m).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    ensure(diff < 1e-6, || format!("merged logits differ by {diff:e}"))?;

    // Fine-tuning left every student tensor alone.
    for s in p.student.params() {
        let same = p.net.get(&s.name).is_some_and(|t| t.bit_eq(&s.value));
        ensure(same, || format!("{} changed during fine-tuning", s.name))?;
    }
    let moved = p.net.params().iter().any(|t| t.name.ends_with(".B") && t.value.data().iter().any(|&v| v != 0.0));
    Ok(format!(
        "fresh identity exact; merge deviation {diff:.1e} over 1000 inputs; {} frozen tensors unchanged{}",
        p.student.params().len(),
        if moved { "; adapters moved" } else { "" }
    ))
}

fn cwru_soft_target(dir: &Path) -> Outcome {
    let cfg = Config::default();
    let m = build_manifest(dir, &LabelMap::default(), 280, 0.8, 2048, cfg.seed).map_err(|e| e.to_string())?;
    let data = Dataset::from_manifest(m).map_err(|e| e.to_string())?;
    let teacher = train_teacher(&data, &cfg, None).map_err(|e| e.to_string())?.model;
    let student = distill_student(&teacher, &data, &cfg, None).map_err(|e| e.to_string())?.model;
    let net = finetune_lora(&student, &data, &cfg, None).map_err(|e| e.to_string())?.model;
    let f1 = |m: &Model| evaluate(m, &data.test).map(|r| r.macro_f1).map_err(|e| e.to_string());
    let (t, s, n) = (f1(&teacher)?, f1(&student)?, f1(&net)?);
    let detail = format!("macro-F1 teacher {t:.4}, student {s:.4}, dkdl-net {n:.4} on {} test windows", data.test.len());
    ensure(n >= 0.97 && t >= n && n >= s, || detail.clone())?;
    Ok(detail)
}

fn latency(p: &Pipeline) -> Outcome {
    let inputs: Vec<Vec<f32>> =
        (0..p.data.test.len()).map(|i| p.data.test.input(i).iter().map(|&v| v as f32).collect()).collect();
    let r = bench_latency(&[("teacher", &p.teacher), ("dkdl-net", &p.net)], &inputs, 2500, 100).unwrap();
    let ratio = r[0].mean_us / r[1].mean_us;
    let detail = format!("teacher {:.1} us, merged dkdl-net {:.1} us per sample, ratio {ratio:.2}", r[0].mean_us, r[1].mean_us);
    ensure(ratio >= 1.5, || detail.clone())?;
    Ok(detail)
}

fn mat_fixtures() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let expected: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("expected.json")).unwrap()).unwrap();
    let mut arrays = 0;
    for (file, want) in expected.as_object().unwrap() {
        let got = parse_mat(&std::fs::read(dir.join(file)).unwrap()).map_err(|e| format!("{file}: {e}"))?;
        for (name, w) in want.as_object().unwrap() {
            let a = got.get(name).ok_or_else(|| format!("{file}: {name} missing"))?;
            let vals: Vec<f64> = w["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
            let same = a.data.len() == vals.len() && a.data.iter().zip(&vals).all(|(x, y)| format!("{x:.14e}") == format!("{y:.14e}"));
            ensure(same, || format!("{file}: {name} values differ"))?;
            arrays += 1;
        }
    }
    let read = |f: &str| parse_mat(&std::fs::read(dir.join(f)).unwrap());
    ensure(matches!(read("empty.mat"), Err(MatError::NotMat(_))), || "empty file".into())?;
    ensure(matches!(read("bad_header.mat"), Err(MatError::NotMat(_))), || "bad header".into())?;
    ensure(matches!(read("truncated.mat"), Err(MatError::Truncated { .. })), || "truncated file".into())?;
    Ok(format!("{arrays} arrays exact to 15 digits; malformed files give typed errors"))
}

struct Run {
    checkpoints: Vec<Vec<u8>>,
    logs: Vec<RunLog>,
    reports: Vec<EvalReport>,
}

fn small_run() -> Run {
    let cfg = Config::default()
        .with_overrides(&["seed=3", "epochs.teacher=2", "epochs.distill=3", "epochs.finetune=2"])
        .unwrap();
    let data = Dataset::synthetic(40, 0.8, 3).unwrap();
    let t = train_teacher(&data, &cfg, None).unwrap();
    let s = distill_student(&t.model, &data, &cfg, None).unwrap();
    let n = finetune_lora(&s.model, &data, &cfg, None).unwrap();
    let outs = [t, s, n];
    Run {
        checkpoints: outs.iter().map(|o| Checkpoint::from_model(&o.model, Default::default()).encode()).collect(),
        reports: outs.iter().map(|o| evaluate(&o.model, &data.test).unwrap()).collect(),
        logs: outs.into_iter().map(|o| o.log).collect(),
    }
}

fn determinism() -> Outcome {
    let a = small_run();
    let b = small_run();
    ensure(a.checkpoints == b.checkpoints, || "checkpoints differ".into())?;
    ensure(a.logs.iter().zip(&b.logs).all(|(x, y)| x.same_trajectory(y)), || "run logs differ".into())?;
    ensure(a.reports == b.reports, || "eval reports differ".into())?;
    Ok("checkpoints, run logs (excluding wall-clock) and eval reports identical across two runs".into())
}

fn fft_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let x: Vec<f64> = (0..2048).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = magnitude_spectrum(&x, 1024, true).unwrap();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        for (k, f) in fast.iter().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in x.iter().enumerate() {
                let a = -2.0 * std::f64::consts::PI * ((k * n) % 2048) as f64 / 2048.0;
                re += (v - mean) * a.cos();
                im += (v - mean) * a.sin();
            }
            worst = worst.max((re.hypot(im) - f).abs());
        }
    }
    ensure(worst < 1e-8, || format!("max deviation {worst:e}"))?;
    Ok(format!("8 random windows of 2048, max deviation {worst:.1e}"))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    })
}

#[test]
fn acceptance() {
    let mut lines = Vec::new();
    let mut report = |n: usize, name: &str, r: Option<Outcome>| {
        let line = match &r {
            Some(Ok(d)) => format!("PASS {n:>2} {name}: {d}"),
            Some(Err(d)) => format!("FAIL {n:>2} {name}: {d}"),
            None => format!("SKIP {n:>2} {name}: set DKDL_CWRU_DIR to run"),
        };
        println!("{line}");
        lines.push((r.is_none_or(|r| r.is_ok()), line));
    };
    report(1, "parameter counts", Some(guarded(parameter_counts)));
    report(2, "DKD identity", Some(guarded(dkd_identity)));
    report(3, "gradient suite", Some(guarded(gradient_suite)));
    let runs: Vec<Pipeline> = (0..3).map(run_pipeline).collect();
    report(4, "LoRA contracts", Some(guarded(|| lora_contracts(&runs[0]))));
    report(5, "synthetic end-to-end", Some(guarded(|| synthetic_end_to_end(&runs))));
    let cwru = std::env::var_os("DKDL_CWRU_DIR").map(PathBuf::from);
    report(6, "CWRU soft target", cwru.map(|d| guarded(|| cwru_soft_target(&d))));
    report(7, "latency ordering", Some(guarded(|| latency(&runs[0]))));
    report(8, "MAT-v5 parser", Some(guarded(mat_fixtures)));
    report(9, "determinism", Some(guarded(determinism)));
    report(10, "FFT correctness", Some(guarded(fft_correctness)));
    let failed: Vec<&String> = lines.iter().filter(|(ok, _)| !ok).map(|(_, l)| l).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}
