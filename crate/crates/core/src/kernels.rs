//! Single-sample numeric kernels shared by the autodiff tape (f64) and the
//! inference path (f32 or f64).
//!
//! Layouts are row-major: conv/pool activations are `channels × length`,
//! conv weights `c_out × c_in × k`, linear weights `out × in`.

use num_traits::Float;

/// Output length of a 1-D convolution, `None` when the window does not fit.
pub fn conv1d_out_len(l_in: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = l_in + 2 * padding;
    if stride == 0 || k == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub fn pool_out_len(l_in: usize, window: usize, stride: usize) -> Option<usize> {
    if stride == 0 || window == 0 || l_in < window {
        return None;
    }
    Some((l_in - window) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub l_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub l_out: usize,
}

impl ConvGeom {
    /// Valid tap range `[lo, hi)` for output position `t`.
    #[inline]
    fn taps(&self, t: usize) -> (usize, usize, isize) {
        let start = (t * self.stride) as isize - self.padding as isize;
        let lo = if start < 0 { (-start) as usize } else { 0 };
        let hi = (self.l_in as isize - start).clamp(0, self.k as isize) as usize;
        (lo.min(hi), hi, start)
    }

    /// Width of one unfolded input patch.
    #[inline]
    pub fn patch(&self) -> usize {
        self.c_in * self.k
    }
}

/// Unfolds `x` into `l_out` rows of `c_in·k` values (zero where the window
/// hangs over the padding).
pub fn im2col<T: Float>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let ck = g.patch();
    for t in 0..g.l_out {
        let (lo, hi, start) = g.taps(t);
        let row = &mut col[t * ck..(t + 1) * ck];
        for ci in 0..g.c_in {
            let dst = &mut row[ci * g.k..(ci + 1) * g.k];
            dst[..lo].iter_mut().for_each(|v| *v = T::zero());
            dst[hi..].iter_mut().for_each(|v| *v = T::zero());
            if lo < hi {
                let s = ci * g.l_in + (start + lo as isize) as usize;
                dst[lo..hi].copy_from_slice(&x[s..s + hi - lo]);
            }
        }
    }
}

/// Dot product with four independent accumulators so it vectorizes.
#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let chunks = n / 4;
    for i in 0..chunks {
        for j in 0..4 {
            acc[j] = acc[j] + a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 4..n {
        tail = tail + a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// Cross-correlation (no kernel flip) with zero padding at both ends.
/// `col` is scratch of at least `l_out · c_in · k` values.
pub fn conv1d_forward_with<T: Float>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom, col: &mut [T], out: &mut [T]) {
    let ck = g.patch();
    im2col(x, g, col);
    for co in 0..g.c_out {
        let wr = &w[co * ck..(co + 1) * ck];
        let b = bias.map_or(T::zero(), |b| b[co]);
        for (t, o) in out[co * g.l_out..(co + 1) * g.l_out].iter_mut().enumerate() {
            *o = b + dot(wr, &col[t * ck..(t + 1) * ck]);
        }
    }
}

/// [`conv1d_forward_with`] with its own scratch.
pub fn conv1d_forward<T: Float>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom, out: &mut [T]) {
    let mut col = alloc::vec![T::zero(); g.l_out * g.patch()];
    conv1d_forward_with(x, w, bias, g, &mut col, out);
}

/// Accumulates input, weight and bias gradients of [`conv1d_forward`].
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    grad_x: Option<&mut [f64]>,
    grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    let ck = g.patch();
    if let Some(gb) = grad_b {
        for co in 0..g.c_out {
            gb[co] += grad_out[co * g.l_out..(co + 1) * g.l_out].iter().sum::<f64>();
        }
    }
    if let Some(gw) = grad_w {
        let mut col = alloc::vec![0.0; g.l_out * ck];
        im2col(x, g, &mut col);
        for co in 0..g.c_out {
            let gwr = &mut gw[co * ck..(co + 1) * ck];
            for t in 0..g.l_out {
                let gv = grad_out[co * g.l_out + t];
                if gv != 0.0 {
                    axpy(gwr, gv, &col[t * ck..(t + 1) * ck]);
                }
            }
        }
    }
    if let Some(gx) = grad_x {
        let mut gcol = alloc::vec![0.0; ck];
        for t in 0..g.l_out {
            gcol.iter_mut().for_each(|v| *v = 0.0);
            for co in 0..g.c_out {
                let gv = grad_out[co * g.l_out + t];
                if gv != 0.0 {
                    axpy(&mut gcol, gv, &w[co * ck..(co + 1) * ck]);
                }
            }
            let (lo, hi, start) = g.taps(t);
            for ci in 0..g.c_in {
                let s = ci * g.l_in;
                for kk in lo..hi {
                    gx[s + (start + kk as isize) as usize] += gcol[ci * g.k + kk];
                }
            }
        }
    }
}

/// Max pooling per channel; `argmax` receives the winning input index of every
/// output (lowest index on ties).
pub fn maxpool1d_forward<T: Float>(
    x: &[T],
    channels: usize,
    l_in: usize,
    window: usize,
    stride: usize,
    out: &mut [T],
    mut argmax: Option<&mut [usize]>,
) {
    let l_out = (l_in - window) / stride + 1;
    for c in 0..channels {
        for t in 0..l_out {
            let s = c * l_in + t * stride;
            let mut best = s;
            for i in s + 1..s + window {
                if x[i] > x[best] {
                    best = i;
                }
            }
            out[c * l_out + t] = x[best];
            if let Some(am) = argmax.as_deref_mut() {
                am[c * l_out + t] = best;
            }
        }
    }
}

pub fn avgpool1d_forward<T: Float>(
    x: &[T],
    channels: usize,
    l_in: usize,
    window: usize,
    stride: usize,
    out: &mut [T],
) {
    let l_out = (l_in - window) / stride + 1;
    let inv = T::one() / T::from(window).unwrap();
    for c in 0..channels {
        for t in 0..l_out {
            let s = c * l_in + t * stride;
            let acc = x[s..s + window].iter().fold(T::zero(), |a, &v| a + v);
            out[c * l_out + t] = acc * inv;
        }
    }
}

/// `out = w · x + b` for one sample.
pub fn linear_forward<T: Float>(x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let n_in = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        *y = dot(&w[o * n_in..(o + 1) * n_in], x) + bias.map_or(T::zero(), |b| b[o]);
    }
}

pub fn relu_inplace<T: Float>(x: &mut [T]) {
    for v in x {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Batchnorm with frozen statistics: `(x − mean)/sqrt(var + eps)·gamma + beta`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_eval<T: Float>(
    x: &mut [T],
    channels: usize,
    len: usize,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) {
    for c in 0..channels {
        let inv = T::one() / (var[c] + eps).sqrt();
        for v in &mut x[c * len..(c + 1) * len] {
            *v = (*v - mean[c]) * inv * gamma[c] + beta[c];
        }
    }
}

/// Numerically stable `log softmax(x / temperature)`.
pub fn log_softmax<T: Float>(x: &[T], temperature: T, out: &mut [T]) {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v / temperature));
    let mut sum = T::zero();
    for &v in x {
        sum = sum + (v / temperature - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v / temperature - lse;
    }
}

pub fn softmax<T: Float>(x: &[T], temperature: T, out: &mut [T]) {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v / temperature));
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v / temperature - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn naive_conv(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.c_out * g.l_out];
        for co in 0..g.c_out {
            for t in 0..g.l_out {
                let mut acc = b[co];
                for ci in 0..g.c_in {
                    for kk in 0..g.k {
                        let pos = (t * g.stride + kk) as isize - g.padding as isize;
                        if pos >= 0 && (pos as usize) < g.l_in {
                            acc += w[(co * g.c_in + ci) * g.k + kk] * x[ci * g.l_in + pos as usize];
                        }
                    }
                }
                out[co * g.l_out + t] = acc;
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        for &(c_in, l_in, c_out, k, stride, padding) in
            &[(1, 5, 1, 3, 1, 0), (2, 17, 3, 4, 3, 2), (3, 9, 2, 3, 1, 1), (1, 40, 2, 8, 8, 3)]
        {
            let l_out = conv1d_out_len(l_in, k, stride, padding).unwrap();
            let g = ConvGeom { c_in, l_in, c_out, k, stride, padding, l_out };
            let x: Vec<f64> = (0..c_in * l_in).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..c_out * c_in * k).map(|i| ((i * 5 % 7) as f64) * 0.25 - 0.5).collect();
            let b: Vec<f64> = (0..c_out).map(|i| i as f64 * 0.1).collect();
            let mut out = vec![0.0; c_out * l_out];
            conv1d_forward(&x, &w, Some(&b), &g, &mut out);
            let expect = naive_conv(&x, &w, &b, &g);
            for (a, e) in out.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_ties_pick_lowest_index() {
        let x = [2.0, 2.0, 1.0, 1.0];
        let mut out = [0.0; 2];
        let mut am = [0usize; 2];
        maxpool1d_forward(&x, 1, 4, 2, 2, &mut out, Some(&mut am));
        assert_eq!(am, [0, 2]);
    }

    #[test]
    fn out_len_rejects_oversized_kernel() {
        assert_eq!(conv1d_out_len(1024, 64, 8, 28), Some(128));
        assert_eq!(conv1d_out_len(2, 5, 1, 0), None);
        assert_eq!(pool_out_len(3, 4, 1), None);
    }
}
