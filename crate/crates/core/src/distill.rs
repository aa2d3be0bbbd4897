//! Classification and distillation losses.
//!
//! Knowledge distillation compares teacher and student softmax distributions
//! with `KL(p_teacher ‖ p_student)`. Splitting the distribution into the
//! binary target/non-target pair `b = [p_t, 1 − p_t]` and the renormalized
//! non-target distribution `p̃` yields
//!
//! ```text
//! KD = KL(bᵀ ‖ bˢ) + (1 − pᵀ_t) · KL(p̃ᵀ ‖ p̃ˢ) = TCKD + (1 − pᵀ_t) · NCKD
//! ```
//!
//! and the decoupled loss reweights the two terms independently:
//! `DKD = α·TCKD + β·NCKD`. Student training mixes it with cross-entropy as
//! `(1 − γ)·CE + γ·DKD`.
//!
//! Teacher logits are plain tensors: the teacher never receives gradient.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// How the CE/DKD balance `γ` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GammaMode {
    #[default]
    Fixed,
    /// `γ = sigmoid(θ)` with `θ` trained alongside the student.
    Learnable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DkdConfig {
    /// TCKD weight.
    pub alpha: f64,
    /// NCKD weight.
    pub beta: f64,
    /// CE/DKD balance; the initial value in learnable mode.
    pub gamma: f64,
    pub temperature: f64,
    pub gamma_mode: GammaMode,
    /// Multiply the DKD term by `T²`.
    pub t2_scale: bool,
}

impl Default for DkdConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 8.0,
            gamma: 0.5,
            temperature: 1.0,
            gamma_mode: GammaMode::Fixed,
            t2_scale: false,
        }
    }
}

impl DkdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return param_err("dkd", format!("alpha and beta must be nonnegative, got {} and {}", self.alpha, self.beta));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return param_err("dkd", format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if self.gamma_mode == GammaMode::Learnable && (self.gamma <= 0.0 || self.gamma >= 1.0) {
            return param_err("dkd", "learnable gamma needs an initial value strictly inside (0, 1)");
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return param_err("dkd", format!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }

    /// Unconstrained parameter whose sigmoid is the initial `γ`.
    pub fn gamma_logit(&self) -> f64 {
        Float::ln(self.gamma / (1.0 - self.gamma))
    }

    fn dkd_scale(&self) -> f64 {
        if self.t2_scale {
            self.temperature * self.temperature
        } else {
            1.0
        }
    }
}

/// `γ` implied by a learnable-mode parameter.
pub fn gamma_from_logit(theta: f64) -> f64 {
    sigmoid(theta)
}

/// Probabilities of one sample split around its target class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityBundle {
    /// Full softmax.
    pub p: Vec<f64>,
    /// `[p_t, p_¬t]`.
    pub b: [f64; 2],
    /// Non-target distribution in class order with the target removed
    /// (length `N − 1`).
    pub p_tilde: Vec<f64>,
    pub target: usize,
}

impl ProbabilityBundle {
    /// `p̃_i` for a class `i ≠ target`.
    pub fn non_target(&self, class: usize) -> Option<f64> {
        match class {
            c if c == self.target => None,
            c if c < self.target => self.p_tilde.get(c).copied(),
            c => self.p_tilde.get(c - 1).copied(),
        }
    }
}

/// Log-domain view of one temperature-scaled logit row.
struct LogProbs {
    /// `log p_i`
    log_p: Vec<f64>,
    /// `log p_¬t`
    log_not_t: f64,
    /// `log p̃_i`, meaningless at the target index.
    log_tilde: Vec<f64>,
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + Float::ln(it.map(|v| Float::exp(v - max)).sum::<f64>())
}

fn log_probs(logits: &[f64], target: usize, temperature: f64) -> LogProbs {
    let z: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
    let lse = log_sum_exp(z.iter().copied());
    let lse_nt = log_sum_exp(z.iter().enumerate().filter(|&(i, _)| i != target).map(|(_, &v)| v));
    LogProbs {
        log_p: z.iter().map(|&v| v - lse).collect(),
        log_not_t: lse_nt - lse,
        log_tilde: z.iter().map(|&v| v - lse_nt).collect(),
    }
}

fn check_row(op: &'static str, n: usize, target: usize) -> Result<()> {
    if n < 2 {
        return param_err(op, "need at least two classes (the non-target set is empty)");
    }
    if target >= n {
        return Err(Error::Label { label: target, classes: n });
    }
    Ok(())
}

/// Splits one logit row into full, binary and non-target distributions.
pub fn decompose(logits: &[f64], target: usize, temperature: f64) -> Result<ProbabilityBundle> {
    check_row("decompose", logits.len(), target)?;
    if !(temperature > 0.0) {
        return param_err("decompose", format!("temperature must be positive, got {temperature}"));
    }
    let lp = log_probs(logits, target, temperature);
    let p: Vec<f64> = lp.log_p.iter().map(|&v| Float::exp(v)).collect();
    let p_tilde = lp
        .log_tilde
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target)
        .map(|(_, &v)| Float::exp(v))
        .collect();
    Ok(ProbabilityBundle {
        b: [p[target], Float::exp(lp.log_not_t)],
        p,
        p_tilde,
        target,
    })
}

/// `Σ a·(log a − log b)` over entries with `a > 0`.
fn kl_from_logs(log_a: impl Iterator<Item = f64>, log_b: impl Iterator<Item = f64>) -> f64 {
    log_a
        .zip(log_b)
        .map(|(la, lb)| {
            let a = Float::exp(la);
            if a > 0.0 {
                a * (la - lb)
            } else {
                0.0
            }
        })
        .sum()
}

/// Per-sample distillation terms and their gradients with respect to the
/// student logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTerms {
    pub kd: f64,
    pub tckd: f64,
    pub nckd: f64,
    /// Teacher's target probability `pᵀ_t`.
    pub teacher_target_prob: f64,
    pub grad_kd: Vec<f64>,
    pub grad_tckd: Vec<f64>,
    pub grad_nckd: Vec<f64>,
}

pub fn sample_terms(teacher: &[f64], student: &[f64], target: usize, temperature: f64) -> Result<SampleTerms> {
    if teacher.len() != student.len() {
        return shape_err("distillation logits", &[teacher.len()], &[student.len()]);
    }
    check_row("distillation", student.len(), target)?;
    let n = student.len();
    let t = log_probs(teacher, target, temperature);
    let s = log_probs(student, target, temperature);

    let kd = kl_from_logs(t.log_p.iter().copied(), s.log_p.iter().copied());
    let tckd = kl_from_logs(
        [t.log_p[target], t.log_not_t].into_iter(),
        [s.log_p[target], s.log_not_t].into_iter(),
    );
    let nt = |v: &[f64]| -> Vec<f64> {
        v.iter().enumerate().filter(|&(i, _)| i != target).map(|(_, &x)| x).collect()
    };
    let nckd = kl_from_logs(nt(&t.log_tilde).into_iter(), nt(&s.log_tilde).into_iter());

    let inv_t = 1.0 / temperature;
    let bt_t = Float::exp(t.log_p[target]);
    let bt_nt = Float::exp(t.log_not_t);
    let mut grad_kd = vec![0.0; n];
    let mut grad_tckd = vec![0.0; n];
    let mut grad_nckd = vec![0.0; n];
    for j in 0..n {
        let ps = Float::exp(s.log_p[j]);
        grad_kd[j] = (ps - Float::exp(t.log_p[j])) * inv_t;
        if j == target {
            grad_tckd[j] = (ps - bt_t) * inv_t;
        } else {
            let ps_tilde = Float::exp(s.log_tilde[j]);
            grad_tckd[j] = (ps - bt_nt * ps_tilde) * inv_t;
            grad_nckd[j] = (ps_tilde - Float::exp(t.log_tilde[j])) * inv_t;
        }
    }
    Ok(SampleTerms {
        kd,
        tckd,
        nckd,
        teacher_target_prob: bt_t,
        grad_kd,
        grad_tckd,
        grad_nckd,
    })
}

/// Returns `(batch, classes)` for a `[B, N]` or `[N]` logit tensor.
fn batch_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n] => Ok((1, *n)),
        [b, n] => Ok((*b, *n)),
        s => shape_err("logits", &[0, 0], s),
    }
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (batch, n) = batch_dims(tape.value(logits).shape())?;
    if labels.len() != batch {
        return shape_err("cross_entropy labels", &[batch], &[labels.len()]);
    }
    let data = tape.value(logits).data();
    let mut total = 0.0;
    let mut grad = vec![0.0; batch * n];
    let mut logp = vec![0.0; n];
    let inv_b = 1.0 / batch as f64;
    for (s, &label) in labels.iter().enumerate() {
        if label >= n {
            return Err(Error::Label { label, classes: n });
        }
        crate::kernels::log_softmax(&data[s * n..(s + 1) * n], 1.0, &mut logp);
        total -= logp[label];
        for j in 0..n {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad[s * n + j] = (Float::exp(logp[j]) - onehot) * inv_b;
        }
    }
    Ok(tape.precomputed_scalar(logits, total * inv_b, grad))
}

#[derive(Clone, Copy)]
enum Term {
    Kd,
    Tckd,
    Nckd,
}

fn distill_term(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    targets: &[usize],
    temperature: f64,
    term: Term,
) -> Result<Var> {
    let (batch, n) = batch_dims(tape.value(student).shape())?;
    if teacher.shape() != tape.value(student).shape() {
        return shape_err("teacher logits", tape.value(student).shape(), teacher.shape());
    }
    if targets.len() != batch {
        return shape_err("distillation targets", &[batch], &[targets.len()]);
    }
    if !(temperature > 0.0) {
        return param_err("distillation", format!("temperature must be positive, got {temperature}"));
    }
    let sv = tape.value(student).data();
    let tv = teacher.data();
    let inv_b = 1.0 / batch as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; batch * n];
    for (s, &target) in targets.iter().enumerate() {
        let r = s * n..(s + 1) * n;
        let st = sample_terms(&tv[r.clone()], &sv[r.clone()], target, temperature)?;
        let (v, g) = match term {
            Term::Kd => (st.kd, st.grad_kd),
            Term::Tckd => (st.tckd, st.grad_tckd),
            Term::Nckd => (st.nckd, st.grad_nckd),
        };
        total += v;
        for (d, gv) in grad[r].iter_mut().zip(g) {
            *d = gv * inv_b;
        }
    }
    Ok(tape.precomputed_scalar(student, total * inv_b, grad))
}

/// Classical KD, `KL(pᵀ ‖ pˢ)` at the given temperature, batch mean.
/// `targets` only determine the shape check; KD itself is target-free.
pub fn kd_loss(tape: &mut Tape, student: Var, teacher: &Tensor, targets: &[usize], temperature: f64) -> Result<Var> {
    distill_term(tape, student, teacher, targets, temperature, Term::Kd)
}

/// Target-class term `KL(bᵀ ‖ bˢ)`, batch mean.
pub fn tckd(tape: &mut Tape, student: Var, teacher: &Tensor, targets: &[usize], temperature: f64) -> Result<Var> {
    distill_term(tape, student, teacher, targets, temperature, Term::Tckd)
}

/// Non-target term `KL(p̃ᵀ ‖ p̃ˢ)`, batch mean. Zero for two classes.
pub fn nckd(tape: &mut Tape, student: Var, teacher: &Tensor, targets: &[usize], temperature: f64) -> Result<Var> {
    distill_term(tape, student, teacher, targets, temperature, Term::Nckd)
}

/// `α·TCKD + β·NCKD` (times `T²` when `t2_scale` is set).
pub fn dkd_loss(tape: &mut Tape, student: Var, teacher: &Tensor, targets: &[usize], cfg: &DkdConfig) -> Result<Var> {
    let tc = tckd(tape, student, teacher, targets, cfg.temperature)?;
    let nc = nckd(tape, student, teacher, targets, cfg.temperature)?;
    let a = tape.scale(tc, cfg.alpha * cfg.dkd_scale());
    let b = tape.scale(nc, cfg.beta * cfg.dkd_scale());
    tape.add(a, b)
}

/// Student objective `(1 − γ)·CE + γ·DKD`.
///
/// In learnable mode `gamma_logit` must hold the `θ` parameter (`γ =
/// sigmoid(θ)`); it is ignored in fixed mode.
pub fn combined_loss(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    labels: &[usize],
    cfg: &DkdConfig,
    gamma_logit: Option<Var>,
) -> Result<Var> {
    cfg.validate()?;
    let ce = cross_entropy(tape, student, labels)?;
    let dkd = dkd_loss(tape, student, teacher, labels, cfg)?;
    match cfg.gamma_mode {
        GammaMode::Fixed => {
            let a = tape.scale(ce, 1.0 - cfg.gamma);
            let b = tape.scale(dkd, cfg.gamma);
            tape.add(a, b)
        }
        GammaMode::Learnable => {
            let theta = gamma_logit
                .ok_or_else(|| Error::Contract("learnable gamma needs its parameter on the tape".into()))?;
            if tape.value(theta).len() != 1 {
                return shape_err("gamma parameter", &[1], tape.value(theta).shape());
            }
            let gamma = tape.sigmoid(theta);
            let keep = tape.affine(gamma, -1.0, 1.0);
            let a = tape.mul(keep, ce)?;
            let b = tape.mul(gamma, dkd)?;
            tape.add(a, b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn uniform_logits_decompose_symmetrically() {
        let bundle = decompose(&[0.7; 10], 3, 1.0).unwrap();
        assert!(bundle.p.iter().all(|&p| close(p, 0.1, 1e-15)));
        assert!(close(bundle.b[0], 0.1, 1e-15) && close(bundle.b[1], 0.9, 1e-15));
        assert_eq!(bundle.p_tilde.len(), 9);
        assert!(bundle.p_tilde.iter().all(|&p| close(p, 1.0 / 9.0, 1e-15)));
        assert_eq!(bundle.non_target(3), None);
    }

    #[test]
    fn analytic_decomposition() {
        let l = [Float::ln(2.0), 0.0, 0.0];
        let bundle = decompose(&l, 0, 1.0).unwrap();
        for (p, e) in bundle.p.iter().zip([0.5, 0.25, 0.25]) {
            assert!(close(*p, e, 1e-15));
        }
        assert!(close(bundle.b[0], 0.5, 1e-15) && close(bundle.b[1], 0.5, 1e-15));
        assert!(bundle.p_tilde.iter().all(|&p| close(p, 0.5, 1e-15)));
    }

    #[test]
    fn decompose_rejects_single_class() {
        assert!(decompose(&[1.0], 0, 1.0).is_err());
        assert!(matches!(decompose(&[1.0, 2.0], 2, 1.0), Err(Error::Label { .. })));
    }

    #[test]
    fn uniform_cross_entropy_is_ln_n() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 10], vec![0.3; 20]).unwrap(), true);
        let ce = cross_entropy(&mut tape, x, &[0, 7]).unwrap();
        assert!(close(tape.value(ce).data()[0], Float::ln(10.0), 1e-12));
    }

    #[test]
    fn confident_cross_entropy_vanishes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![60.0, 0.0, 0.0]), true);
        let ce = cross_entropy(&mut tape, x, &[0]).unwrap();
        assert!(tape.value(ce).data()[0] < 1e-25);
    }

    #[test]
    fn out_of_range_label() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.0, 1.0]), true);
        assert!(matches!(cross_entropy(&mut tape, x, &[2]), Err(Error::Label { label: 2, classes: 2 })));
    }

    #[test]
    fn identical_logits_give_zero_kl() {
        let l = [0.3, -1.0, 2.5, 0.0];
        let t = sample_terms(&l, &l, 2, 2.0).unwrap();
        assert_eq!((t.kd, t.tckd, t.nckd), (0.0, 0.0, 0.0));
    }

    #[test]
    fn two_class_nckd_is_zero() {
        let t = sample_terms(&[1.0, -2.0], &[0.5, 3.0], 1, 1.0).unwrap();
        assert_eq!(t.nckd, 0.0);
        assert!(t.grad_nckd.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_weights_zero_dkd() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::from_vec(vec![0.1, 0.4, -0.3]), true);
        let teacher = Tensor::from_vec(vec![1.0, 0.0, 0.2]);
        let cfg = DkdConfig { alpha: 0.0, beta: 0.0, ..DkdConfig::default() };
        let d = dkd_loss(&mut tape, s, &teacher, &[1], &cfg).unwrap();
        assert_eq!(tape.value(d).data()[0], 0.0);
    }

    #[test]
    fn learnable_mode_needs_parameter() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::from_vec(vec![0.1, 0.4, -0.3]), true);
        let teacher = Tensor::from_vec(vec![1.0, 0.0, 0.2]);
        let cfg = DkdConfig { gamma_mode: GammaMode::Learnable, ..DkdConfig::default() };
        assert!(combined_loss(&mut tape, s, &teacher, &[1], &cfg, None).is_err());
        let theta = tape.leaf(Tensor::scalar(cfg.gamma_logit()), true);
        let l = combined_loss(&mut tape, s, &teacher, &[1], &cfg, Some(theta)).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(theta).is_some());
    }

    #[test]
    fn config_validation() {
        assert!(DkdConfig::default().validate().is_ok());
        assert!(DkdConfig { gamma: 1.5, ..DkdConfig::default() }.validate().is_err());
        assert!(DkdConfig { temperature: 0.0, ..DkdConfig::default() }.validate().is_err());
        assert!(DkdConfig { beta: -1.0, ..DkdConfig::default() }.validate().is_err());
        assert!(close(gamma_from_logit(DkdConfig::default().gamma_logit()), 0.5, 1e-15));
    }
}
