//! Low-rank adapters over frozen linear and conv1d weights.
//!
//! An adapter holds `A ∈ R^{r×fan_in}` and `B ∈ R^{fan_out×r}`; the adapted
//! layer computes `base(x) + layer(x; B·A)`, with `B·A` reshaped to the base
//! weight's shape and applied without bias. For a conv layer `fan_in` is
//! `C_in·K` and the update runs with the base layer's stride and padding.

use alloc::format;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{matmul_raw, Tape, Var};
use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Default standard deviation of the Gaussian used for `A`.
pub const DEFAULT_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub sigma: f64,
    /// Multiplier on `B·A`; 1 unless an `alpha/r` scale was requested.
    pub scaling: f64,
    pub merged: bool,
}

/// Layer type an adapter is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseLayer {
    Linear,
    Conv1d { stride: usize, padding: usize },
}

/// Fresh adapter: `A ~ N(0, σ²)` from a ChaCha8 stream seeded by `seed`, `B = 0`.
pub fn init_adapter(fan_in: usize, fan_out: usize, rank: usize, sigma: f64, seed: u64) -> Result<LoraAdapter> {
    if rank == 0 {
        return param_err("lora", "rank must be at least 1");
    }
    if fan_in == 0 || fan_out == 0 {
        return param_err("lora", "fan_in and fan_out must be positive");
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Param {
        op: "lora",
        msg: format!("invalid sigma {sigma}: {e}"),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = (0..rank * fan_in).map(|_| normal.sample(&mut rng)).collect();
    Ok(LoraAdapter {
        a: Tensor::new(&[rank, fan_in], a)?,
        b: Tensor::zeros(&[fan_out, rank]),
        rank,
        sigma,
        scaling: 1.0,
        merged: false,
    })
}

impl LoraAdapter {
    /// Enables the `alpha / rank` multiplier.
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.scaling = alpha / self.rank as f64;
        self
    }

    pub fn fan_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Merged adapters no longer train.
    pub fn trainable_params(&self) -> usize {
        if self.merged {
            0
        } else {
            self.num_params()
        }
    }

    /// `scaling · B·A` as a `[fan_out, fan_in]` matrix.
    pub fn delta_weight(&self) -> Tensor {
        let mut d = matmul_raw(self.b.data(), self.a.data(), self.fan_out(), self.rank, self.fan_in());
        if self.scaling != 1.0 {
            d.iter_mut().for_each(|v| *v *= self.scaling);
        }
        Tensor::new(&[self.fan_out(), self.fan_in()], d).expect("adapter shapes")
    }

    fn check_base(&self, base_weight: &[usize]) -> Result<()> {
        let fan_out = base_weight[0];
        let fan_in: usize = base_weight[1..].iter().product();
        if fan_out != self.fan_out() || fan_in != self.fan_in() {
            return shape_err("lora base weight", &[self.fan_out(), self.fan_in()], base_weight);
        }
        Ok(())
    }
}

/// Folds the adapter into the base weight, `W' = W₀ + reshape(B·A)`, and marks
/// the adapter merged.
pub fn merge(base_weight: &Tensor, adapter: &mut LoraAdapter) -> Result<Tensor> {
    if adapter.merged {
        return Err(Error::Contract("adapter is already merged".into()));
    }
    adapter.check_base(base_weight.shape())?;
    let delta = adapter.delta_weight();
    let data = base_weight.data().iter().zip(delta.data()).map(|(w, d)| w + d).collect();
    adapter.merged = true;
    Tensor::new(base_weight.shape(), data)
}

/// Records `base(x) + layer(x; scaling·B·A)` on the tape. Gradients reach `a`
/// and `b`; base tensors receive gradient only if they were recorded as
/// trainable leaves.
#[allow(clippy::too_many_arguments)]
pub fn adapted_forward_tape(
    tape: &mut Tape,
    layer: BaseLayer,
    base_weight: Var,
    base_bias: Option<Var>,
    a: Var,
    b: Var,
    scaling: f64,
    input: Var,
) -> Result<Var> {
    let wshape = tape.value(base_weight).shape().to_vec();
    let mut delta = tape.matmul(b, a)?;
    if scaling != 1.0 {
        delta = tape.scale(delta, scaling);
    }
    let fan: usize = wshape[1..].iter().product();
    if tape.value(delta).shape() != [wshape[0], fan] {
        return shape_err("lora delta", &[wshape[0], fan], tape.value(delta).shape());
    }
    let (base, update) = match layer {
        BaseLayer::Linear => {
            let base = tape.linear(input, base_weight, base_bias)?;
            let update = tape.linear(input, delta, None)?;
            (base, update)
        }
        BaseLayer::Conv1d { stride, padding } => {
            let kernel = tape.reshape(delta, &wshape)?;
            let base = tape.conv1d(input, base_weight, base_bias, stride, padding)?;
            let update = tape.conv1d(input, kernel, None, stride, padding)?;
            (base, update)
        }
    };
    tape.add(base, update)
}

/// Tensor-level adapted layer for callers outside a training step.
pub fn adapted_forward(
    layer: BaseLayer,
    base_weight: &Tensor,
    base_bias: Option<&Tensor>,
    adapter: &LoraAdapter,
    input: &Tensor,
) -> Result<Tensor> {
    if adapter.merged {
        return Err(Error::Contract("merged adapter used in adapted_forward".into()));
    }
    adapter.check_base(base_weight.shape())?;
    let mut tape = Tape::new();
    let w = tape.constant(base_weight.clone());
    let bias = base_bias.map(|t| tape.constant(t.clone()));
    let a = tape.constant(adapter.a.clone());
    let b = tape.constant(adapter.b.clone());
    let x = tape.constant(input.clone());
    let out = adapted_forward_tape(&mut tape, layer, w, bias, a, b, adapter.scaling, x)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    #[test]
    fn parameter_counts_match_adapter_rows() {
        let conv = init_adapter(64, 4, 12, DEFAULT_SIGMA, 0).unwrap();
        let fc = init_adapter(256, 10, 12, DEFAULT_SIGMA, 1).unwrap();
        assert_eq!(conv.num_params(), 816);
        assert_eq!(fc.num_params(), 3192);
    }

    #[test]
    fn rank_zero_rejected() {
        assert!(matches!(init_adapter(4, 4, 0, 0.01, 0), Err(Error::Param { .. })));
    }

    #[test]
    fn fresh_delta_is_zero() {
        let ad = init_adapter(64, 4, 12, 0.5, 3).unwrap();
        assert!(ad.delta_weight().data().iter().all(|&v| v == 0.0));
        assert!(ad.a.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let ad = init_adapter(6, 3, 4, 0.3, 9).unwrap();
        let w = Tensor::new(&[3, 2, 3], (0..18).map(|i| i as f64 * 0.1 - 0.7).collect()).unwrap();
        let b = Tensor::from_vec(vec![0.1, -0.2, 0.3]);
        let x = Tensor::new(&[2, 7], (0..14).map(|i| (i as f64).sin()).collect()).unwrap();
        let layer = BaseLayer::Conv1d { stride: 2, padding: 1 };
        let out = adapted_forward(layer, &w, Some(&b), &ad, &x).unwrap();
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
        let base = tape.conv1d(xv, wv, Some(bv), 2, 1).unwrap();
        assert!(out.bit_eq(tape.value(base)));
    }

    #[test]
    fn cancelling_adapter_zeroes_output() {
        let w = Tensor::new(&[4, 1, 64], (0..256).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect()).unwrap();
        let mut ad = init_adapter(64, 4, 4, 0.01, 0).unwrap();
        ad.a = w.clone().reshape(&[4, 64]).unwrap();
        let mut eye = vec![0.0; 16];
        (0..4).for_each(|i| eye[i * 5] = -1.0);
        ad.b = Tensor::new(&[4, 4], eye).unwrap();
        let x = Tensor::new(&[1, 1024], (0..1024).map(|i| ((i as f64) * 0.37).cos()).collect()).unwrap();
        let zero_bias = Tensor::zeros(&[4]);
        let out = adapted_forward(BaseLayer::Conv1d { stride: 8, padding: 28 }, &w, Some(&zero_bias), &ad, &x).unwrap();
        assert_eq!(out.shape(), &[4, 128]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn merge_of_fresh_adapter_is_bitwise_noop() {
        let w = Tensor::new(&[10, 256], (0..2560).map(|i| (i as f64).cos()).collect()).unwrap();
        let mut ad = init_adapter(256, 10, 12, 0.01, 5).unwrap();
        let merged = merge(&w, &mut ad).unwrap();
        assert!(merged.bit_eq(&w));
        assert!(ad.merged);
        assert_eq!(ad.trainable_params(), 0);
    }

    #[test]
    fn double_merge_and_merged_forward_are_errors() {
        let w = Tensor::new(&[2, 3], vec![1.0; 6]).unwrap();
        let mut ad = init_adapter(3, 2, 2, 0.1, 1).unwrap();
        merge(&w, &mut ad).unwrap();
        assert!(matches!(merge(&w, &mut ad), Err(Error::Contract(_))));
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(adapted_forward(BaseLayer::Linear, &w, None, &ad, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn adapted_linear_matches_dense_recomputation() {
        let mut ad = init_adapter(5, 3, 2, 0.7, 11).unwrap();
        ad.b = Tensor::new(&[3, 2], vec![0.3, -0.1, 0.8, 0.5, -0.6, 0.2]).unwrap();
        let w = Tensor::new(&[3, 5], (0..15).map(|i| i as f64 * 0.05).collect()).unwrap();
        let bias = Tensor::from_vec(vec![0.1, 0.2, 0.3]);
        let x = Tensor::from_vec(vec![1.0, -1.0, 0.5, 2.0, 0.25]);
        let out = adapted_forward(BaseLayer::Linear, &w, Some(&bias), &ad, &x).unwrap();
        let mut dense: Vec<f64> = w.data().to_vec();
        for o in 0..3 {
            for i in 0..5 {
                let mut d = 0.0;
                for r in 0..2 {
                    d += ad.b.data()[o * 2 + r] * ad.a.data()[r * 5 + i];
                }
                dense[o * 5 + i] += d;
            }
        }
        for o in 0..3 {
            let y: f64 = bias.data()[o] + (0..5).map(|i| dense[o * 5 + i] * x.data()[i]).sum::<f64>();
            assert!((out.data()[o] - y).abs() < 1e-10);
        }
    }
}
