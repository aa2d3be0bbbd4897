//! Test-split evaluation, report files, and the latency benchmark.

use std::fmt::Write as _;
use std::hint::black_box;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dkdl_core::kernels::softmax;
use dkdl_core::metrics::{evaluate_scores, EvalReport};
use dkdl_core::model::{InferenceModel, Model, ModelKind, Workspace, NUM_CLASSES};
use serde::{Deserialize, Serialize};

use crate::data::{Split, CLASS_NAMES};
use crate::io::{write_atomic, write_json};
use crate::train::predict_logits;
use crate::{Error, Result};

/// Metrics of `model` (eval mode) on `split`. Scores for the ROC curves
/// are softmax probabilities.
pub fn evaluate(model: &Model, split: &Split) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let logits = predict_logits(model, split)?;
    let scores: Vec<Vec<f64>> = logits
        .chunks(NUM_CLASSES)
        .map(|row| {
            let mut p = vec![0.0; NUM_CLASSES];
            softmax(row, 1.0, &mut p);
            p
        })
        .collect();
    Ok(evaluate_scores(&split.labels, &scores, NUM_CLASSES)?)
}

pub fn confusion_csv(report: &EvalReport) -> String {
    let mut s = String::from("true\\pred");
    for c in 0..report.confusion.len() {
        let _ = write!(s, ",{c}");
    }
    s.push('\n');
    for (t, row) in report.confusion.iter().enumerate() {
        let _ = write!(s, "{t}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn roc_csv(report: &EvalReport) -> String {
    let mut s = String::from("class,fpr,tpr\n");
    for (c, roc) in report.roc.iter().enumerate() {
        for (f, t) in &roc.points {
            let _ = writeln!(s, "{c},{f:?},{t:?}");
        }
    }
    s
}

fn svg_header(w: u32, h: u32) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" \
         font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

/// Row-normalized confusion heatmap with counts.
pub fn confusion_svg(report: &EvalReport, title: &str) -> String {
    let n = report.confusion.len();
    let (cell, left, top) = (40.0, 90.0, 40.0);
    let size = left + cell * n as f64 + 20.0;
    let mut s = svg_header(size as u32, (top + cell * n as f64 + 60.0) as u32);
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>", size / 2.0, escape(title));
    for (t, row) in report.confusion.iter().enumerate() {
        let total: u64 = row.iter().sum();
        for (p, &v) in row.iter().enumerate() {
            let frac = if total == 0 { 0.0 } else { v as f64 / total as f64 };
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let (x, y) = (left + cell * p as f64, top + cell * t as f64);
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\" stroke=\"#ccc\"/>"
            );
            let ink = if frac > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{ink}\">{v}</text>",
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            left - 6.0,
            top + cell * t as f64 + cell / 2.0 + 4.0,
            CLASS_NAMES.get(t).copied().unwrap_or("")
        );
    }
    for p in 0..n {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{p}</text>",
            left + cell * p as f64 + cell / 2.0,
            top + cell * n as f64 + 16.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">predicted class</text>",
        left + cell * n as f64 / 2.0,
        top + cell * n as f64 + 40.0
    );
    s.push_str("</svg>\n");
    s
}

/// One polyline per class in the unit square.
pub fn roc_svg(report: &EvalReport, title: &str) -> String {
    const COLORS: [&str; 10] = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    ];
    let (left, top, side) = (50.0, 40.0, 360.0);
    let mut s = svg_header(560, 450);
    let _ = writeln!(s, "<text x=\"230\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>", escape(title));
    let _ = writeln!(s, "<rect x=\"{left}\" y=\"{top}\" width=\"{side}\" height=\"{side}\" fill=\"none\" stroke=\"black\"/>");
    let _ = writeln!(
        s,
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{top}\" stroke=\"#aaa\" stroke-dasharray=\"4 4\"/>",
        top + side,
        left + side
    );
    for (c, roc) in report.roc.iter().enumerate() {
        let color = COLORS[c % COLORS.len()];
        let pts: Vec<String> = roc
            .points
            .iter()
            .map(|(f, t)| format!("{:.2},{:.2}", left + f * side, top + (1.0 - t) * side))
            .collect();
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>", pts.join(" "));
        let auc = roc.auc.map_or("n/a".to_owned(), |a| format!("{a:.4}"));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">class {c} AUC {auc}</text>",
            left + side + 10.0,
            top + 14.0 * (c as f64 + 1.0)
        );
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">false positive rate</text>", left + side / 2.0, top + side + 30.0);
    let _ = writeln!(
        s,
        "<text x=\"15\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 15 {})\">true positive rate</text>",
        top + side / 2.0,
        top + side / 2.0
    );
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `<name>.eval.json`, `.confusion.csv`, `.roc.csv`,
/// `.confusion.svg` and `.roc.svg` into `dir`.
pub fn write_report(dir: &Path, name: &str, report: &EvalReport) -> Result<Vec<PathBuf>> {
    let files = [
        (format!("{name}.confusion.csv"), confusion_csv(report)),
        (format!("{name}.roc.csv"), roc_csv(report)),
        (format!("{name}.confusion.svg"), confusion_svg(report, &format!("{name} confusion matrix"))),
        (format!("{name}.roc.svg"), roc_svg(report, &format!("{name} ROC"))),
    ];
    let json = dir.join(format!("{name}.eval.json"));
    write_json(&json, report)?;
    let mut out = vec![json];
    for (f, body) in files {
        let p = dir.join(f);
        write_atomic(&p, body.as_bytes())?;
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub model_name: String,
    pub num_samples: usize,
    pub warmup: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
    pub cpu: String,
}

/// CPU model string from `/proc/cpuinfo`, or the architecture name.
pub fn cpu_model() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_owned())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_owned())
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Per-sample single-threaded latency of the `f32` inference path.
///
/// DKDL-Net models are merged first. Every model sees the same `inputs`
/// (cycled) and the timer wraps only the forward call.
pub fn bench_latency(models: &[(&str, &Model)], inputs: &[Vec<f32>], num_samples: usize, warmup: usize) -> Result<Vec<LatencyReport>> {
    if inputs.is_empty() || num_samples == 0 {
        return Err(Error::Config("benchmark needs at least one input and one sample".into()));
    }
    let cpu = cpu_model();
    let mut out = Vec::new();
    for (name, model) in models {
        let merged;
        let model = if model.kind() == ModelKind::DkdlNet && !model.is_merged() {
            let mut m = (*model).clone();
            m.merge_adapters()?;
            merged = m;
            &merged
        } else {
            *model
        };
        let inf = InferenceModel::<f32>::new(model)?;
        let mut ws = Workspace::new(&inf);
        for i in 0..warmup {
            black_box(inf.forward_with(black_box(&inputs[i % inputs.len()]), &mut ws)?);
        }
        let mut times = Vec::with_capacity(num_samples);
        for i in 0..num_samples {
            let x = &inputs[i % inputs.len()];
            let t = Instant::now();
            black_box(inf.forward_with(black_box(x), &mut ws)?);
            times.push(t.elapsed().as_secs_f64() * 1e6);
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        times.sort_by(f64::total_cmp);
        out.push(LatencyReport {
            model_name: (*name).to_owned(),
            num_samples,
            warmup,
            mean_us: mean,
            median_us: percentile(&times, 0.5),
            p95_us: percentile(&times, 0.95),
            cpu: cpu.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_use_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 10.0);
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
    }
}
