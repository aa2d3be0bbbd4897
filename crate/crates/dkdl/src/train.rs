//! The three training procedures: teacher with cross-entropy, student with
//! the combined distillation objective, and adapter fine-tuning of the
//! frozen student.
//!
//! Training is single-threaded and every random choice derives from
//! `Config::seed`, so repeated runs are bitwise identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use dkdl_core::autodiff::sigmoid;
use dkdl_core::distill::{self, DkdConfig, GammaMode};
use dkdl_core::metrics::argmax;
use dkdl_core::model::{build_student_with, build_teacher_with, InferenceModel, Mode, Model, ModelKind, Workspace, NUM_CLASSES};
use dkdl_core::optim::{Adam, AdamConfig, Update};
use dkdl_core::{Tape, Tensor, Var};
use log::info;

use crate::config::Config;
use crate::data::{load_batches, Batch, Dataset, Split, SplitKind};
use crate::io::write_atomic;
use crate::{Error, Result};

const GAMMA_PARAM: &str = "dkd.gamma_theta";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_loss: Option<f64>,
    pub eval_acc: Option<f64>,
    pub wall_ms: u64,
    /// Current `γ` in learnable mode.
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:?}")).unwrap_or_default()
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let gamma = self.records.iter().any(|r| r.gamma.is_some());
        let mut s = String::from("epoch,train_loss,train_acc,eval_loss,eval_acc,wall_ms");
        s.push_str(if gamma { ",gamma\n" } else { "\n" });
        for r in &self.records {
            let _ = write!(
                s,
                "{},{:?},{:?},{},{},{}",
                r.epoch,
                r.train_loss,
                r.train_acc,
                opt(r.eval_loss),
                opt(r.eval_acc),
                r.wall_ms
            );
            if gamma {
                let _ = write!(s, ",{}", opt(r.gamma));
            }
            s.push('\n');
        }
        s
    }

    /// Equality of everything except wall-clock times.
    pub fn same_trajectory(&self, other: &RunLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                EpochRecord { wall_ms: 0, ..a.clone() } == EpochRecord { wall_ms: 0, ..b.clone() }
            })
    }

    pub fn first(&self) -> &EpochRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("epoch 0 is always recorded")
    }
}

/// What a run optimizes.
#[derive(Debug, Clone)]
pub enum Objective {
    CrossEntropy,
    /// Combined distillation loss against precomputed teacher logits,
    /// `[n, 10]` row-major per split.
    Distill { teacher_train: Vec<f64>, teacher_test: Vec<f64>, dkd: DkdConfig },
}

#[derive(Debug, Clone)]
pub struct Outcome {
    /// Best-eval-accuracy model (ties go to the later epoch).
    pub model: Model,
    pub best_epoch: usize,
    pub log: RunLog,
    /// Final `γ` in learnable mode.
    pub gamma: Option<f64>,
}

impl Outcome {
    pub fn metadata(&self, cfg: &Config, stage: &str, manifest_hash: &str) -> BTreeMap<String, String> {
        let mut m = cfg.metadata();
        m.insert("stage".into(), stage.into());
        m.insert("best_epoch".into(), self.best_epoch.to_string());
        if let Some(acc) = self.log.records[self.best_epoch].eval_acc {
            m.insert("best_eval_acc".into(), format!("{acc:?}"));
        }
        if let Some(g) = self.gamma {
            m.insert("dkd.gamma_learned".into(), format!("{g:?}"));
        }
        m.insert("manifest.hash".into(), manifest_hash.into());
        m
    }
}

/// Per-epoch shuffle seed; independent of the stage so runs that differ
/// only in their objective see the same batches.
fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Eval-mode logits of `model` for every window of `split`, row-major.
pub fn predict_logits(model: &Model, split: &Split) -> Result<Vec<f64>> {
    let inf = InferenceModel::<f64>::new(model)?;
    let mut ws = Workspace::new(&inf);
    let mut out = Vec::with_capacity(split.len() * NUM_CLASSES);
    for i in 0..split.len() {
        out.extend_from_slice(inf.forward_with(split.input(i), &mut ws)?);
    }
    Ok(out)
}

fn gather(rows: &[f64], indices: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(indices.len() * NUM_CLASSES);
    for &i in indices {
        data.extend_from_slice(&rows[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]);
    }
    Tensor::new(&[indices.len(), NUM_CLASSES], data).expect("logit rows")
}

fn batch_loss(tape: &mut Tape, logits: Var, batch: &Batch, objective: &Objective, kind: SplitKind, theta: Option<Var>) -> Result<Var> {
    Ok(match objective {
        Objective::CrossEntropy => distill::cross_entropy(tape, logits, &batch.labels)?,
        Objective::Distill { teacher_train, teacher_test, dkd } => {
            let rows = if kind == SplitKind::Train { teacher_train } else { teacher_test };
            let teacher = gather(rows, &batch.indices);
            distill::combined_loss(tape, logits, &teacher, &batch.labels, dkd, theta)?
        }
    })
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    logits
        .data()
        .chunks(NUM_CLASSES)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Mean loss and accuracy over `split` without updating anything.
fn measure(model: &Model, split: &Split, kind: SplitKind, objective: &Objective, theta: f64, cfg: &Config, mode: Mode) -> Result<(f64, f64)> {
    let learnable = matches!(objective, Objective::Distill { dkd, .. } if dkd.gamma_mode == GammaMode::Learnable);
    let (mut loss, mut correct) = (0.0, 0);
    for batch in load_batches(split, cfg.batch_size, None)? {
        let mut tape = Tape::new();
        let x = tape.constant(batch.inputs.clone());
        let fwd = model.forward_tape(&mut tape, x, mode)?;
        let th = learnable.then(|| tape.constant(Tensor::scalar(theta)));
        let l = batch_loss(&mut tape, fwd.logits, &batch, objective, kind, th)?;
        loss += tape.value(l).data()[0] * batch.labels.len() as f64;
        correct += count_correct(tape.value(fwd.logits), &batch.labels);
    }
    Ok((loss / split.len() as f64, correct as f64 / split.len() as f64))
}

fn snapshot_frozen(model: &Model) -> Vec<(String, Tensor)> {
    model
        .params()
        .iter()
        .filter(|p| !p.trainable && !p.buffer)
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect()
}

fn check_frozen(model: &Model, snapshot: &[(String, Tensor)], epoch: usize) -> Result<()> {
    for (name, t) in snapshot {
        if !model.get(name).is_some_and(|v| v.bit_eq(t)) {
            return Err(dkdl_core::Error::Contract(format!("frozen tensor {name} changed during epoch {epoch}")).into());
        }
    }
    Ok(())
}

/// Optimizes the trainable tensors of `model` for `epochs` epochs.
///
/// Epoch 0 of the log describes the initial model. When `log_path` is set
/// the CSV is rewritten atomically after every epoch.
pub fn fit(mut model: Model, data: &Dataset, cfg: &Config, objective: &Objective, epochs: usize, log_path: Option<&Path>) -> Result<Outcome> {
    cfg.validate()?;
    let train = &data.train;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let has_eval = !data.test.is_empty();
    let learnable = matches!(objective, Objective::Distill { dkd, .. } if dkd.gamma_mode == GammaMode::Learnable);
    let mut theta = Tensor::scalar(match objective {
        Objective::Distill { dkd, .. } => dkd.gamma_logit(),
        Objective::CrossEntropy => 0.0,
    });
    let gamma_now = |t: &Tensor| learnable.then(|| sigmoid(t.data()[0]));
    let frozen = snapshot_frozen(&model);
    let mut adam = Adam::new(cfg.adam_config());
    // The mixing weight is not a network weight, so it is not decayed.
    let mut theta_adam = Adam::new(AdamConfig { weight_decay: 0.0, ..cfg.adam_config() });

    let eval = |model: &Model, theta: f64| -> Result<(Option<f64>, Option<f64>)> {
        if !has_eval {
            return Ok((None, None));
        }
        let (l, a) = measure(model, &data.test, SplitKind::Test, objective, theta, cfg, Mode::Eval)?;
        Ok((Some(l), Some(a)))
    };
    let mut log = RunLog::default();
    let write_log = |log: &RunLog| -> Result<()> {
        match log_path {
            Some(p) => write_atomic(p, log.to_csv().as_bytes()),
            None => Ok(()),
        }
    };

    let start = Instant::now();
    let (train_loss, train_acc) = measure(&model, train, SplitKind::Train, objective, theta.data()[0], cfg, Mode::Train)?;
    let (eval_loss, eval_acc) = eval(&model, theta.data()[0])?;
    log.records.push(EpochRecord {
        epoch: 0,
        train_loss,
        train_acc,
        eval_loss,
        eval_acc,
        wall_ms: start.elapsed().as_millis() as u64,
        gamma: gamma_now(&theta),
    });
    write_log(&log)?;
    let mut best = (model.clone(), 0, eval_acc);

    for epoch in 1..=epochs {
        let start = Instant::now();
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (b, batch) in load_batches(train, cfg.batch_size, Some(shuffle_seed(cfg.seed, epoch)))?.enumerate() {
            let mut tape = Tape::new();
            let x = tape.constant(batch.inputs.clone());
            let fwd = model.forward_tape(&mut tape, x, Mode::Train)?;
            let th = learnable.then(|| tape.leaf(theta.clone(), true));
            let loss = batch_loss(&mut tape, fwd.logits, &batch, objective, SplitKind::Train, th)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss: lv });
            }
            tape.backward(loss)?;
            loss_sum += lv * batch.labels.len() as f64;
            correct += count_correct(tape.value(fwd.logits), &batch.labels);

            let grads: Vec<Option<Tensor>> = fwd
                .param_vars
                .iter()
                .zip(model.params())
                .map(|(v, p)| {
                    p.trainable.then(|| {
                        v.and_then(|v| tape.grad(v).cloned())
                            .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
                    })
                })
                .collect();
            let mut updates: Vec<Update<'_>> = model
                .params_mut()
                .iter_mut()
                .zip(&grads)
                .filter_map(|(p, g)| g.as_ref().map(|g| Update { name: &p.name, param: &mut p.value, grad: g }))
                .collect();
            adam.step(&mut updates)?;
            if let Some(th) = th {
                let g = tape.grad(th).cloned().unwrap_or_else(|| Tensor::scalar(0.0));
                theta_adam.step(&mut [Update { name: GAMMA_PARAM, param: &mut theta, grad: &g }])?;
            }
            model.update_running_stats(&fwd.bn_stats)?;
        }
        check_frozen(&model, &frozen, epoch)?;
        let (eval_loss, eval_acc) = eval(&model, theta.data()[0])?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            eval_loss,
            eval_acc,
            wall_ms: start.elapsed().as_millis() as u64,
            gamma: gamma_now(&theta),
        };
        info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}, eval acc {}",
            rec.train_loss,
            rec.train_acc,
            opt(rec.eval_acc)
        );
        log.records.push(rec);
        write_log(&log)?;
        match (eval_acc, best.2) {
            (Some(a), Some(b)) if a < b => {}
            _ => best = (model.clone(), epoch, eval_acc),
        }
    }
    Ok(Outcome { model: best.0, best_epoch: best.1, log, gamma: gamma_now(&theta) })
}

pub fn train_teacher(data: &Dataset, cfg: &Config, log_path: Option<&Path>) -> Result<Outcome> {
    let model = Model::init(build_teacher_with(cfg.pool_kind()), cfg.seed)?;
    fit(model, data, cfg, &Objective::CrossEntropy, cfg.epochs.teacher, log_path)
}

/// Student trained on labels alone; the baseline for distillation.
pub fn train_student_ce(data: &Dataset, cfg: &Config, log_path: Option<&Path>) -> Result<Outcome> {
    let model = Model::init(build_student_with(cfg.pool_kind()), cfg.seed)?;
    fit(model, data, cfg, &Objective::CrossEntropy, cfg.epochs.distill, log_path)
}

pub fn distill_student(teacher: &Model, data: &Dataset, cfg: &Config, log_path: Option<&Path>) -> Result<Outcome> {
    if teacher.kind() != ModelKind::Teacher {
        return Err(dkdl_core::Error::ModelMismatch { expected: "teacher".into(), found: teacher.kind().name().into() }.into());
    }
    let objective = Objective::Distill {
        teacher_train: predict_logits(teacher, &data.train)?,
        teacher_test: predict_logits(teacher, &data.test)?,
        dkd: cfg.dkd_config(),
    };
    let model = Model::init(build_student_with(cfg.pool_kind()), cfg.seed)?;
    fit(model, data, cfg, &objective, cfg.epochs.distill, log_path)
}

pub fn finetune_lora(student: &Model, data: &Dataset, cfg: &Config, log_path: Option<&Path>) -> Result<Outcome> {
    if student.kind() != ModelKind::Student {
        return Err(dkdl_core::Error::ModelMismatch { expected: "student".into(), found: student.kind().name().into() }.into());
    }
    let model = Model::dkdl_from_student(student, cfg.lora_settings(), cfg.seed)?;
    fit(model, data, cfg, &Objective::CrossEntropy, cfg.epochs.finetune, log_path)
}
