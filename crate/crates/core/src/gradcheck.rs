//! Central finite-difference checks of the tape's analytic gradients.
//!
//! [`check`] compares the gradient of a scalar-valued graph against
//! `(f(x + h) − f(x − h)) / 2h` coordinate by coordinate. [`run_suite`] runs
//! the check over every differentiable op and every loss with seeded random
//! inputs.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormMode, Tape, Var};
use crate::distill::{self, DkdConfig, GammaMode};
use crate::error::Result;
use crate::lora::{self, BaseLayer};
use crate::model::{build_dkdl_net_spec, build_student, LoraSettings, Mode, Model};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Gradients smaller than this are compared on an absolute scale.
const FLOOR: f64 = 1e-5;

type Graph<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Slopes on the two sides of a point disagreeing by more than this
/// (relative) mark a kink inside the step.
const KINK: f64 = 1e-3;

fn rel_err(a: f64, b: f64) -> f64 {
    Float::abs(a - b) / Float::abs(a).max(Float::abs(b)).max(FLOOR)
}

/// Outcome of one trial.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Check {
    pub max_rel_err: f64,
    /// Coordinates whose step straddled a relu or max-pooling kink. These
    /// are scored against the nearer one-sided slope, which the analytic
    /// gradient must still match.
    pub kinks: usize,
}

/// Worst relative error of one trial.
///
/// `coords` caps how many coordinates of each input are perturbed; `None`
/// checks all of them.
pub fn check(graph: &Graph<'_>, inputs: &[Tensor], coords: Option<usize>, rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = graph(&mut tape, &vars)?;
    tape.backward(out)?;
    let f0 = tape.value(out).data()[0];
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = graph(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    let mut res = Check::default();
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut idx: Vec<usize> = (0..inputs[i].len()).collect();
        if let Some(c) = coords {
            idx.shuffle(rng);
            idx.truncate(c);
        }
        for j in idx {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + STEP;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - STEP;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let a = analytic[j];
            let mut err = rel_err(a, (up - down) / (2.0 * STEP));
            let (fwd, bwd) = ((up - f0) / STEP, (f0 - down) / STEP);
            if err >= TOLERANCE && rel_err(fwd, bwd) > KINK {
                res.kinks += 1;
                err = rel_err(a, fwd).min(rel_err(a, bwd));
            }
            res.max_rel_err = res.max_rel_err.max(err);
        }
    }
    Ok(res)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
    pub kinks: usize,
}

impl CaseResult {
    /// Errors under tolerance, and kinks rare enough that they cannot be
    /// hiding a systematic mismatch.
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.kinks * 10 <= self.trials
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect();
    Tensor::new(shape, data).expect("nonzero shape")
}

/// Values kept at least `gap` away from each other and from zero, so kinks
/// of relu and max-pooling are never straddled by the finite difference.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n)
        .map(|i| {
            let mag = (i as f64 + 1.0) * gap + rng.random::<f64>() * gap * 0.5;
            if i % 2 == 0 { mag } else { -mag }
        })
        .collect();
    data.shuffle(rng);
    Tensor::new(shape, data).expect("nonzero shape")
}

fn labels(rng: &mut ChaCha8Rng, batch: usize, classes: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..classes)).collect()
}

/// Contracts a tensor-valued result to a scalar with fixed random weights so
/// every output coordinate contributes a distinct gradient.
fn project(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone().reshape(tape.value(y).shape())?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

struct Case {
    name: &'static str,
    /// Builds inputs and a graph for one trial.
    make: Box<dyn Fn(&mut ChaCha8Rng) -> Trial>,
}

struct Trial {
    inputs: Vec<Tensor>,
    coords: Option<usize>,
    graph: Box<Graph<'static>>,
}

fn projected(
    out_len: usize,
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Trial {
    let w = normal(rng, &[out_len], 1.0);
    Trial {
        inputs,
        coords: None,
        graph: Box::new(move |t, v| {
            let y = f(t, v)?;
            project(t, y, &w)
        }),
    }
}

fn cases() -> Vec<Case> {
    let mut c: Vec<Case> = Vec::new();
    c.push(Case {
        name: "conv1d",
        make: Box::new(|r| {
            let (stride, pad) = (r.random_range(1..=3), r.random_range(0..=2));
            let (b, ci, co, l, k) = (2, 2, 3, 11, 3);
            let lo = (l + 2 * pad - k) / stride + 1;
            let inputs = vec![normal(r, &[b, ci, l], 1.0), normal(r, &[co, ci, k], 1.0), normal(r, &[co], 1.0)];
            projected(b * co * lo, r, inputs, move |t, v| t.conv1d(v[0], v[1], Some(v[2]), stride, pad))
        }),
    });
    c.push(Case {
        name: "maxpool1d",
        make: Box::new(|r| {
            let inputs = vec![separated(r, &[2, 3, 9], 0.01)];
            projected(2 * 3 * 4, r, inputs, |t, v| t.maxpool1d(v[0], 2, 2))
        }),
    });
    c.push(Case {
        name: "avgpool1d",
        make: Box::new(|r| {
            let inputs = vec![normal(r, &[2, 3, 9], 1.0)];
            projected(2 * 3 * 3, r, inputs, |t, v| t.avgpool1d(v[0], 3, 3))
        }),
    });
    c.push(Case {
        name: "linear",
        make: Box::new(|r| {
            let inputs = vec![normal(r, &[3, 5], 1.0), normal(r, &[4, 5], 1.0), normal(r, &[4], 1.0)];
            projected(12, r, inputs, |t, v| t.linear(v[0], v[1], Some(v[2])))
        }),
    });
    c.push(Case {
        name: "matmul",
        make: Box::new(|r| {
            let inputs = vec![normal(r, &[3, 4], 1.0), normal(r, &[4, 2], 1.0)];
            projected(6, r, inputs, |t, v| t.matmul(v[0], v[1]))
        }),
    });
    c.push(Case {
        name: "relu",
        make: Box::new(|r| {
            let inputs = vec![separated(r, &[4, 5], 0.01)];
            projected(20, r, inputs, |t, v| Ok(t.relu(v[0])))
        }),
    });
    c.push(Case {
        name: "batchnorm1d/train",
        make: Box::new(|r| {
            let inputs = vec![normal(r, &[3, 2, 5], 1.0), normal(r, &[2], 1.0), normal(r, &[2], 1.0)];
            projected(30, r, inputs, |t, v| Ok(t.batchnorm1d(v[0], v[1], v[2], BatchNormMode::Train { eps: 1e-5 })?.0))
        }),
    });
    c.push(Case {
        name: "batchnorm1d/eval",
        make: Box::new(|r| {
            let mean = normal(r, &[2], 1.0).into_data();
            let var: Vec<f64> = normal(r, &[2], 1.0).into_data().iter().map(|v| v.abs() + 0.5).collect();
            let inputs = vec![normal(r, &[3, 2, 5], 1.0), normal(r, &[2], 1.0), normal(r, &[2], 1.0)];
            projected(30, r, inputs, move |t, v| {
                Ok(t.batchnorm1d(v[0], v[1], v[2], BatchNormMode::Eval { mean: &mean, var: &var, eps: 1e-5 })?.0)
            })
        }),
    });
    c.push(Case {
        name: "reshape/flatten",
        make: Box::new(|r| {
            let inputs = vec![normal(r, &[2, 3, 4], 1.0)];
            projected(24, r, inputs, |t, v| {
                let f = t.flatten(v[0], true)?;
                t.reshape(f, &[4, 6])
            })
        }),
    });
    c.push(Case {
        name: "add/sub/mul",
        make: Box::new(|r| {
            let inputs = vec![normal(r, &[3, 4], 1.0), normal(r, &[3, 4], 1.0), normal(r, &[3, 4], 1.0)];
            projected(12, r, inputs, |t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(s, v[2])?;
                t.mul(d, v[1])
            })
        }),
    });
    c.push(Case {
        name: "scale/affine/sigmoid",
        make: Box::new(|r| {
            let inputs = vec![normal(r, &[7], 3.0)];
            projected(7, r, inputs, |t, v| {
                let s = t.sigmoid(v[0]);
                let a = t.affine(s, -1.7, 0.3);
                Ok(t.scale(a, 2.5))
            })
        }),
    });
    c.push(Case {
        name: "sum/mean",
        make: Box::new(|r| Trial {
            inputs: vec![normal(r, &[3, 4], 1.0), normal(r, &[5], 1.0)],
            coords: None,
            graph: Box::new(|t, v| {
                let s = t.sum(v[0]);
                let m = t.mean(v[1]);
                let p = t.mul(s, m)?;
                t.add(p, s)
            }),
        }),
    });
    for (name, temp) in [("softmax", 1.0), ("softmax/T=4", 4.0)] {
        c.push(Case {
            name,
            make: Box::new(move |r| {
                let inputs = vec![normal(r, &[3, 6], 3.0)];
                projected(18, r, inputs, move |t, v| t.softmax(v[0], temp))
            }),
        });
    }
    for (name, temp) in [("log_softmax", 1.0), ("log_softmax/T=2", 2.0)] {
        c.push(Case {
            name,
            make: Box::new(move |r| {
                let inputs = vec![normal(r, &[3, 6], 3.0)];
                projected(18, r, inputs, move |t, v| t.log_softmax(v[0], temp))
            }),
        });
    }
    c.push(Case {
        name: "lora/linear",
        make: Box::new(|r| {
            let inputs = vec![
                normal(r, &[2, 6], 1.0),
                normal(r, &[4, 6], 1.0),
                normal(r, &[4], 1.0),
                normal(r, &[3, 6], 1.0),
                normal(r, &[4, 3], 1.0),
            ];
            projected(8, r, inputs, |t, v| lora::adapted_forward_tape(t, BaseLayer::Linear, v[1], Some(v[2]), v[3], v[4], 0.7, v[0]))
        }),
    });
    c.push(Case {
        name: "lora/conv1d",
        make: Box::new(|r| {
            let inputs = vec![
                normal(r, &[2, 2, 12], 1.0),
                normal(r, &[3, 2, 4], 1.0),
                normal(r, &[3], 1.0),
                normal(r, &[2, 8], 1.0),
                normal(r, &[3, 2], 1.0),
            ];
            let lo = (12 + 2 - 4) / 2 + 1;
            projected(2 * 3 * lo, r, inputs, |t, v| {
                lora::adapted_forward_tape(t, BaseLayer::Conv1d { stride: 2, padding: 1 }, v[1], Some(v[2]), v[3], v[4], 1.0, v[0])
            })
        }),
    });
    c.push(Case {
        name: "cross_entropy",
        make: Box::new(|r| {
            let y = labels(r, 4, 5);
            Trial {
                inputs: vec![normal(r, &[4, 5], 3.0)],
                coords: None,
                graph: Box::new(move |t, v| distill::cross_entropy(t, v[0], &y)),
            }
        }),
    });
    type TermFn = fn(&mut Tape, Var, &Tensor, &[usize], f64) -> Result<Var>;
    let terms: [(&'static str, TermFn); 3] = [("kd", distill::kd_loss), ("tckd", distill::tckd), ("nckd", distill::nckd)];
    for (name, f) in terms {
        c.push(Case {
            name,
            make: Box::new(move |r| {
                let n = [2, 3, 10][r.random_range(0..3)];
                let temp = [1.0, 2.0, 4.0][r.random_range(0..3)];
                let y = labels(r, 3, n);
                let teacher = normal(r, &[3, n], 4.0);
                Trial {
                    inputs: vec![normal(r, &[3, n], 4.0)],
                    coords: None,
                    graph: Box::new(move |t, v| f(t, v[0], &teacher, &y, temp)),
                }
            }),
        });
    }
    c.push(Case {
        name: "dkd",
        make: Box::new(|r| {
            let y = labels(r, 3, 10);
            let teacher = normal(r, &[3, 10], 4.0);
            let cfg = DkdConfig { temperature: 2.0, t2_scale: r.random(), ..DkdConfig::default() };
            Trial {
                inputs: vec![normal(r, &[3, 10], 4.0)],
                coords: None,
                graph: Box::new(move |t, v| distill::dkd_loss(t, v[0], &teacher, &y, &cfg)),
            }
        }),
    });
    c.push(Case {
        name: "combined/fixed",
        make: Box::new(|r| {
            let y = labels(r, 3, 10);
            let teacher = normal(r, &[3, 10], 4.0);
            let cfg = DkdConfig { gamma: r.random(), ..DkdConfig::default() };
            Trial {
                inputs: vec![normal(r, &[3, 10], 4.0)],
                coords: None,
                graph: Box::new(move |t, v| distill::combined_loss(t, v[0], &teacher, &y, &cfg, None)),
            }
        }),
    });
    c.push(Case {
        name: "combined/learnable",
        make: Box::new(|r| {
            let y = labels(r, 3, 10);
            let teacher = normal(r, &[3, 10], 4.0);
            let cfg = DkdConfig { gamma_mode: GammaMode::Learnable, ..DkdConfig::default() };
            Trial {
                inputs: vec![normal(r, &[3, 10], 4.0), normal(r, &[1], 2.0)],
                coords: None,
                graph: Box::new(move |t, v| distill::combined_loss(t, v[0], &teacher, &y, &cfg, Some(v[1]))),
            }
        }),
    });
    c.push(Case {
        name: "dkdl-net/adapters",
        make: Box::new(|r| {
            let seed = r.random();
            let settings = LoraSettings { rank: 2, ..LoraSettings::default() };
            let spec = build_dkdl_net_spec(&build_student(), settings).expect("student spec");
            let mut model = Model::init(spec, seed).expect("init");
            // Nonzero B so the gradient reaches A as well.
            for p in model.params_mut() {
                if p.trainable {
                    let shape = p.value.shape().to_vec();
                    p.value = normal(r, &shape, 0.1);
                }
            }
            let inputs: Vec<Tensor> = model.params().iter().filter(|p| p.trainable).map(|p| p.value.clone()).collect();
            let x = normal(r, &[2, 1, 1024], 1.0);
            let y = labels(r, 2, 10);
            let teacher = normal(r, &[2, 10], 4.0);
            let cfg = DkdConfig::default();
            Trial {
                inputs,
                coords: Some(6),
                graph: Box::new(move |t, v| {
                    let mut free = v.iter();
                    let bound = model
                        .params()
                        .iter()
                        .map(|p| match (p.buffer, p.trainable) {
                            (true, _) => None,
                            (false, true) => free.next().copied(),
                            (false, false) => Some(t.constant(p.value.clone())),
                        })
                        .collect();
                    let xv = t.constant(x.clone());
                    let fwd = model.forward_bound(t, xv, Mode::Train, bound)?;
                    distill::combined_loss(t, fwd.logits, &teacher, &y, &cfg, None)
                }),
            }
        }),
    });
    c
}

/// Runs every case for `trials` seeded trials and reports the worst error.
pub fn run_suite(trials: usize, seed: u64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for (i, case) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (mut worst, mut kinks): (f64, usize) = (0.0, 0);
        for _ in 0..trials {
            let trial = (case.make)(&mut rng);
            let c = check(&*trial.graph, &trial.inputs, trial.coords, &mut rng)?;
            worst = worst.max(c.max_rel_err);
            kinks += c.kinks;
        }
        out.push(CaseResult { name: case.name, trials, max_rel_err: worst, kinks });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straddled_relu_kink_is_scored_one_sided() {
        let graph = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let r = t.relu(v[0]);
            Ok(t.sum(r))
        };
        let x = Tensor::from_vec(vec![3e-6, 1.0, -0.5]);
        let c = check(&graph, &[x], None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(c.kinks, 1);
        assert!(c.max_rel_err < 1e-9);
    }

    #[test]
    fn a_wrong_gradient_still_fails_at_a_kink() {
        // The value is |x| but the tape only sees a constant shift for x < 0,
        // so the analytic slope 0 matches neither side (-1 and 1).
        let graph = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let x = t.value(v[0]).data()[0];
            let r = t.relu(v[0]);
            let s = t.sum(r);
            let bent = if x < 0.0 { t.scale(s, 0.0) } else { s };
            let shift = t.constant(Tensor::scalar(-x.min(0.0)));
            t.add(bent, shift)
        };
        let x = Tensor::from_vec(vec![-3e-6]);
        let c = check(&graph, &[x], None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(c.max_rel_err > TOLERANCE);
    }
}
