//! Deterministic synthetic vibration recordings for ten bearing classes.
//!
//! Class `c` carries harmonics of a `50·(c+1)` Hz shaft tone. Fault classes
//! (`c ≥ 1`) add decaying resonance bursts whose repetition rate and ringing
//! frequency depend on the class. Gaussian noise is added at 10 dB SNR.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const SAMPLE_RATE: f64 = 12_000.0;
pub const SNR_DB: f64 = 10.0;

fn class_rng(seed: u64, class: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class as u64 + 1);
    rng
}

/// `len` samples of class `class`, reproducible from `seed`.
pub fn synth_recording(class: usize, len: usize, seed: u64) -> Vec<f64> {
    use core::f64::consts::TAU;
    let mut rng = class_rng(seed, class);
    let f0 = 50.0 * (class as f64 + 1.0);
    let phases: [f64; 3] = [rng.random::<f64>() * TAU, rng.random::<f64>() * TAU, rng.random::<f64>() * TAU];
    let mut x = vec![0.0; len];
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / SAMPLE_RATE;
        *v = Float::sin(TAU * f0 * t + phases[0])
            + 0.5 * Float::sin(TAU * 2.0 * f0 * t + phases[1])
            + 0.25 * Float::sin(TAU * 3.0 * f0 * t + phases[2]);
    }
    if class > 0 {
        let period = (SAMPLE_RATE / (20.0 + 9.0 * class as f64)) as usize;
        let resonance = 1500.0 + 300.0 * class as f64;
        let decay = 0.004 * SAMPLE_RATE;
        let ring = (5.0 * decay) as usize;
        let mut start = rng.random_range(0..period);
        while start < len {
            let amp = 1.5 + 0.5 * rng.random::<f64>();
            for (j, v) in x[start..(start + ring).min(len)].iter_mut().enumerate() {
                let t = j as f64;
                *v += amp * Float::exp(-t / decay) * Float::sin(TAU * resonance * t / SAMPLE_RATE);
            }
            start += period;
        }
    }
    let power = x.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64;
    let noise_sd = Float::sqrt(power / Float::powf(10.0, SNR_DB / 10.0));
    for v in &mut x {
        let n: f64 = rng.sample(StandardNormal);
        *v += noise_sd * n;
    }
    x
}
