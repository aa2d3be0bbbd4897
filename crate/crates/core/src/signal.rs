//! Windowing and FFT-magnitude features.
//!
//! Each raw window of `2·bins` samples is de-meaned, transformed with a
//! radix-2 FFT, reduced to the magnitudes of the one-sided bins `0..bins`,
//! and standardized to zero mean and unit variance.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{param_err, Result};

/// In-place iterative radix-2 FFT (forward, no normalization).
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) -> Result<()> {
    let n = re.len();
    if n != im.len() || !n.is_power_of_two() {
        return param_err("fft", "length must be a power of two");
    }
    let bits = n.trailing_zeros();
    if bits > 0 {
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let twiddles: Vec<(f64, f64)> = (0..half)
            .map(|k| {
                let ang = -2.0 * core::f64::consts::PI * k as f64 / len as f64;
                (Float::cos(ang), Float::sin(ang))
            })
            .collect();
        for start in (0..n).step_by(len) {
            for (k, &(wr, wi)) in twiddles.iter().enumerate() {
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len *= 2;
    }
    Ok(())
}

/// Magnitudes `|X_k|` for `k < bins` of a real window.
pub fn magnitude_spectrum(window: &[f64], bins: usize, remove_mean: bool) -> Result<Vec<f64>> {
    if bins > window.len() / 2 + 1 {
        return param_err("spectrum", "more bins requested than the one-sided spectrum holds");
    }
    let mean = if remove_mean {
        window.iter().sum::<f64>() / window.len() as f64
    } else {
        0.0
    };
    let mut re: Vec<f64> = window.iter().map(|&v| v - mean).collect();
    let mut im = vec![0.0; window.len()];
    fft_in_place(&mut re, &mut im)?;
    Ok((0..bins).map(|k| Float::hypot(re[k], im[k])).collect())
}

/// Zero mean, unit (population) variance. A constant vector becomes all zeros.
pub fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = Float::sqrt(var);
    for x in v.iter_mut() {
        *x = if sd > 0.0 { (*x - mean) / sd } else { 0.0 };
    }
}

/// Model features of one raw window of `2·bins` samples.
pub fn window_features(raw: &[f64]) -> Result<Vec<f64>> {
    let mut f = magnitude_spectrum(raw, raw.len() / 2, true)?;
    standardize(&mut f);
    Ok(f)
}

/// Start offsets of every full window.
pub fn window_offsets(len: usize, window: usize, hop: usize) -> Vec<usize> {
    if hop == 0 || len < window {
        return Vec::new();
    }
    (0..=(len - window) / hop).map(|i| i * hop).collect()
}

/// Features for every window of `signal`; empty when the signal is shorter
/// than one window.
pub fn preprocess(signal: &[f64], window_raw: usize, hop: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    if hop == 0 {
        return param_err("preprocess", "hop must be at least 1");
    }
    if !window_raw.is_power_of_two() || window_raw < 2 {
        return param_err("preprocess", "window length must be a power of two");
    }
    window_offsets(signal.len(), window_raw, hop)
        .into_iter()
        .map(|o| Ok((o, window_features(&signal[o..o + window_raw])?)))
        .collect()
}
