//! The `dkdl` command line.
//!
//! All outputs go under the work directory (`--work-dir`, else
//! `$DKDL_WORK_DIR`, else `./dkdl-work`):
//!
//! ```text
//! checkpoints/  teacher.ckpt student.ckpt student-ce.ckpt dkdl-net.ckpt dkdl-net-merged.ckpt
//! reports/      <model>.eval.json, .confusion.csv, .roc.csv, .confusion.svg, .roc.svg, bench.json
//! logs/         <stage>.csv and <stage>.config.json
//! cache/        manifest.json and feature blobs
//! outputs.json  every file written, with its SHA-256
//! ```

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use dkdl_core::model::count_parameters;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{build_manifest, synth_manifest, Dataset, LabelMap, Manifest};
use crate::eval::{bench_latency, evaluate, write_report};
use crate::io::{load_checkpoint, load_model, read, save_checkpoint, sha256_hex, write_json};
use crate::train::{distill_student, finetune_lora, train_student_ce, train_teacher, Outcome};
use crate::{Error, Result};

pub const WORK_DIR_ENV: &str = "DKDL_WORK_DIR";

#[derive(Debug, Parser)]
#[command(name = "dkdl", version, about = "Distill a bearing-fault CNN into a small student and fine-tune it with LoRA adapters")]
pub struct Cli {
    /// Output directory [default: $DKDL_WORK_DIR or ./dkdl-work]
    #[arg(long, global = true)]
    pub work_dir: Option<PathBuf>,
    /// JSON config file (nested or dotted keys)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override `key=value`; repeatable, applied after --config
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for --set seed=N
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log progress to stderr
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset manifest and features
    Synth {
        /// Windows per class (data.per_class)
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Index a directory of MAT-v5 recordings and compute features
    Ingest {
        #[arg(long)]
        data_dir: PathBuf,
        /// Tab-separated `glob<TAB>label<TAB>fault_mm` file; defaults to the built-in map
        #[arg(long)]
        label_map: Option<PathBuf>,
    },
    /// Train the teacher with cross-entropy
    TrainTeacher,
    /// Train the student against the teacher
    Distill {
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Train on labels only (the distillation baseline), saved as student-ce.ckpt
        #[arg(long)]
        ce_only: bool,
    },
    /// Attach LoRA adapters to the frozen student and train them
    Finetune {
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Fold adapters into the base weights
    Merge {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate checkpoints on the test split
    Eval {
        /// Checkpoints to evaluate [default: checkpoints/dkdl-net.ckpt]
        checkpoints: Vec<PathBuf>,
    },
    /// Single-threaded per-sample latency of checkpoints
    Bench {
        /// Checkpoints to time [default: teacher and dkdl-net]
        checkpoints: Vec<PathBuf>,
    },
    /// Print the layer table of a checkpoint
    Describe { checkpoint: PathBuf },
}

pub fn command() -> clap::Command {
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_owned()).collect();
    let listing = Config::help_listing();
    for n in &names {
        let l = listing.clone();
        cmd = cmd.mut_subcommand(n, |s| s.after_help(l));
    }
    cmd
}

struct WorkDir {
    root: PathBuf,
    produced: Vec<PathBuf>,
}

#[derive(Serialize, Deserialize, Default)]
struct Outputs {
    files: BTreeMap<String, OutputEntry>,
}

#[derive(Serialize, Deserialize)]
struct OutputEntry {
    command: String,
    bytes: u64,
    sha256: String,
}

impl WorkDir {
    fn new(root: PathBuf) -> Result<Self> {
        for d in ["checkpoints", "reports", "logs", "cache"] {
            let p = root.join(d);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Self { root, produced: Vec::new() })
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    fn log(&self, stage: &str) -> PathBuf {
        self.root.join("logs").join(format!("{stage}.csv"))
    }

    fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }

    fn manifest(&self) -> PathBuf {
        self.cache().join("manifest.json")
    }

    fn record(&mut self, p: PathBuf) {
        self.produced.push(p);
    }

    /// Merges this command's files into `outputs.json`.
    fn finish(&self, command: &str) -> Result<()> {
        let index = self.root.join("outputs.json");
        let mut outputs: Outputs = if index.exists() { crate::io::read_json(&index)? } else { Outputs::default() };
        for p in &self.produced {
            let bytes = read(p)?;
            let rel = p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().into_owned();
            outputs.files.insert(
                rel,
                OutputEntry { command: command.to_owned(), bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) },
            );
        }
        write_json(&index, &outputs)
    }

    fn dataset(&mut self) -> Result<Dataset> {
        let path = self.manifest();
        if !path.exists() {
            return Err(Error::Data(format!("{}: no dataset; run `dkdl synth` or `dkdl ingest` first", path.display())));
        }
        let manifest = Manifest::load(&path)?;
        Dataset::load_cached(manifest, &self.cache())
    }
}

fn existing(path: PathBuf) -> Result<PathBuf> {
    if !path.exists() {
        return Err(Error::Data(format!("{}: checkpoint not found", path.display())));
    }
    Ok(path)
}

fn save_stage(wd: &mut WorkDir, cfg: &Config, stage: &str, ckpt: &str, out: &Outcome, manifest_hash: &str) -> Result<()> {
    let path = wd.checkpoint(ckpt);
    save_checkpoint(&path, &out.model, out.metadata(cfg, stage, manifest_hash))?;
    wd.record(path);
    let cfg_path = wd.root.join("logs").join(format!("{stage}.config.json"));
    write_json(&cfg_path, &cfg.flat())?;
    wd.record(cfg_path);
    wd.record(wd.log(stage));
    let last = out.log.last();
    println!(
        "{stage}: {} epochs, best epoch {} (eval acc {}), saved {}",
        last.epoch,
        out.best_epoch,
        out.log.records[out.best_epoch].eval_acc.map_or("n/a".into(), |a| format!("{a:.4}")),
        wd.checkpoint(ckpt).display()
    );
    Ok(())
}

fn ingest_report(m: &Manifest) {
    println!("train windows per class: {:?}", m.train_counts);
    println!("test windows per class:  {:?}", m.test_counts);
    println!("manifest hash {}", m.hash);
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let name = subcommand_name(&cli.command);
    if let Command::Describe { checkpoint } = &cli.command {
        let ckpt = load_checkpoint(&existing(checkpoint.clone())?)?;
        let model = ckpt.to_model().map_err(|e| Error::Checkpoint { path: checkpoint.clone(), source: e })?;
        let spec = model.spec();
        let _ = writeln!(out, "{} ({})", spec.kind.name(), checkpoint.display());
        let _ = writeln!(out, "{:<12} {:<14} {:<10} {:<10} {:<10} {:>8}", "Layer", "Kernel/Stride", "Input", "Output", "Activation", "Params");
        for row in spec.table_rows()? {
            let _ = writeln!(out, "{row}");
        }
        let _ = writeln!(out, "Total parameters: {}", count_parameters(spec, false));
        let _ = writeln!(out, "Trainable parameters: {}", model.trainable_count());
        if !ckpt.metadata.is_empty() {
            let _ = writeln!(out, "Metadata:");
            for (k, v) in &ckpt.metadata {
                let _ = writeln!(out, "  {k} = {v}");
            }
        }
        return Ok(());
    }

    let root = cli
        .work_dir
        .clone()
        .or_else(|| std::env::var_os(WORK_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("dkdl-work"));
    let mut wd = WorkDir::new(root)?;
    let mut cfg = Config::default();
    if let Some(p) = &cli.config {
        cfg = cfg.with_file(p)?;
    }
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Command::Synth { per_class: Some(n) } = &cli.command {
        overrides.push(format!("data.per_class={n}"));
    }
    cfg = cfg.with_overrides(&overrides)?;

    match cli.command {
        Command::Synth { .. } => {
            let m = synth_manifest(cfg.data.per_class, cfg.data.split_ratio, cfg.data.window_raw, cfg.seed)?;
            m.save(&wd.manifest())?;
            wd.record(wd.manifest());
            Dataset::load_cached(m.clone(), &wd.cache())?;
            ingest_report(&m);
        }
        Command::Ingest { data_dir, label_map } => {
            let labels = match label_map {
                Some(p) => LabelMap::load(&p)?,
                None => LabelMap::default(),
            };
            let m = build_manifest(&data_dir, &labels, cfg.data.per_class, cfg.data.split_ratio, cfg.data.window_raw, cfg.seed)?;
            m.save(&wd.manifest())?;
            wd.record(wd.manifest());
            Dataset::load_cached(m.clone(), &wd.cache())?;
            ingest_report(&m);
        }
        Command::TrainTeacher => {
            let data = wd.dataset()?;
            let o = train_teacher(&data, &cfg, Some(&wd.log("teacher")))?;
            save_stage(&mut wd, &cfg, "teacher", "teacher", &o, &data.manifest.hash)?;
        }
        Command::Distill { teacher, ce_only } => {
            let data = wd.dataset()?;
            if ce_only {
                let o = train_student_ce(&data, &cfg, Some(&wd.log("student-ce")))?;
                save_stage(&mut wd, &cfg, "student-ce", "student-ce", &o, &data.manifest.hash)?;
            } else {
                let path = existing(teacher.unwrap_or_else(|| wd.checkpoint("teacher")))?;
                let (t, _) = load_model(&path)?;
                let o = distill_student(&t, &data, &cfg, Some(&wd.log("distill")))?;
                save_stage(&mut wd, &cfg, "distill", "student", &o, &data.manifest.hash)?;
            }
        }
        Command::Finetune { student } => {
            let data = wd.dataset()?;
            let path = existing(student.unwrap_or_else(|| wd.checkpoint("student")))?;
            let (s, _) = load_model(&path)?;
            let o = finetune_lora(&s, &data, &cfg, Some(&wd.log("finetune")))?;
            save_stage(&mut wd, &cfg, "finetune", "dkdl-net", &o, &data.manifest.hash)?;
        }
        Command::Merge { input, output } => {
            let input = existing(input.unwrap_or_else(|| wd.checkpoint("dkdl-net")))?;
            let (mut m, ckpt) = load_model(&input)?;
            m.merge_adapters().map_err(|e| Error::Checkpoint { path: input.clone(), source: e })?;
            let output = output.unwrap_or_else(|| wd.checkpoint("dkdl-net-merged"));
            save_checkpoint(&output, &m, ckpt.metadata)?;
            println!("merged {} -> {}", input.display(), output.display());
            wd.record(output);
        }
        Command::Eval { checkpoints } => {
            let paths = if checkpoints.is_empty() { vec![wd.checkpoint("dkdl-net")] } else { checkpoints };
            let paths = paths.into_iter().map(existing).collect::<Result<Vec<_>>>()?;
            let data = wd.dataset()?;
            for p in paths {
                let (m, _) = load_model(&p)?;
                let report = evaluate(&m, &data.test)?;
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_owned();
                for f in write_report(&wd.reports(), &stem, &report)? {
                    wd.record(f);
                }
                println!(
                    "{stem}: accuracy {:.4}, macro P/R/F1 {:.4}/{:.4}/{:.4}, micro F1 {:.4} on {} windows",
                    report.accuracy, report.macro_precision, report.macro_recall, report.macro_f1, report.micro_f1, report.total
                );
            }
        }
        Command::Bench { checkpoints } => {
            let paths = if checkpoints.is_empty() {
                vec![wd.checkpoint("teacher"), wd.checkpoint("dkdl-net")]
            } else {
                checkpoints
            };
            let paths = paths.into_iter().map(existing).collect::<Result<Vec<_>>>()?;
            let data = wd.dataset()?;
            let split = if data.test.is_empty() { &data.train } else { &data.test };
            let inputs: Vec<Vec<f32>> = (0..split.len()).map(|i| split.input(i).iter().map(|&v| v as f32).collect()).collect();
            let mut models = Vec::new();
            for p in &paths {
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_owned();
                models.push((stem, load_model(p)?.0));
            }
            let refs: Vec<(&str, &dkdl_core::model::Model)> = models.iter().map(|(n, m)| (n.as_str(), m)).collect();
            let reports = bench_latency(&refs, &inputs, cfg.bench.samples, cfg.bench.warmup)?;
            for r in &reports {
                println!(
                    "{}: mean {:.1} us, median {:.1} us, p95 {:.1} us over {} samples",
                    r.model_name, r.mean_us, r.median_us, r.p95_us, r.num_samples
                );
            }
            let path = wd.reports().join("bench.json");
            write_json(&path, &reports)?;
            wd.record(path);
        }
        Command::Describe { .. } => unreachable!("handled above"),
    }
    wd.finish(&name)
}

fn subcommand_name(c: &Command) -> String {
    let s = match c {
        Command::Synth { .. } => "synth",
        Command::Ingest { .. } => "ingest",
        Command::TrainTeacher => "train-teacher",
        Command::Distill { .. } => "distill",
        Command::Finetune { .. } => "finetune",
        Command::Merge { .. } => "merge",
        Command::Eval { .. } => "eval",
        Command::Bench { .. } => "bench",
        Command::Describe { .. } => "describe",
    };
    s.to_owned()
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(cli, &mut std::io::stdout()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
