//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the data its
//! backward rule needs. Inputs are always recorded before their consumers, so
//! walking the node list backwards is a valid reverse topological order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{param_err, shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batchnorm statistics source.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Normalize with the batch statistics over (batch, length).
    Train { eps: f64 },
    /// Normalize with frozen running statistics.
    Eval {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Per-channel statistics observed by a training-mode batchnorm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (divides by the element count).
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        window: usize,
        stride: usize,
        channels: usize,
        l_in: usize,
        batch: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        batch: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Relu {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        channels: usize,
        len: usize,
        batch: usize,
        train: bool,
    },
    Reshape {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        input: Var,
        scale: f64,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Softmax {
        input: Var,
        temperature: f64,
        cols: usize,
    },
    LogSoftmax {
        input: Var,
        temperature: f64,
        cols: usize,
    },
    /// Scalar whose derivative with respect to `input` was computed during the
    /// forward pass.
    Precomputed {
        input: Var,
        local_grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Single-threaded recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

fn split_batch(shape: &[usize], rank: usize) -> Option<(usize, &[usize])> {
    match shape.len() {
        r if r == rank => Some((1, shape)),
        r if r == rank + 1 => Some((shape[0], &shape[1..])),
        _ => None,
    }
}

fn with_batch(batched: bool, batch: usize, rest: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(rest.len() + 1);
    if batched {
        s.push(batch);
    }
    s.extend_from_slice(rest);
    s
}

fn check_temperature(op: &'static str, t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return param_err(op, format!("temperature must be positive, got {t}"));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// 1-D cross-correlation. `x` is `[C_in, L]` or `[B, C_in, L]`, `w` is
    /// `[C_out, C_in, K]`, `b` is `[C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let Some((batch, inner)) = split_batch(&xs, 2) else {
            return shape_err("conv1d input", &[0, 0], &xs);
        };
        if ws.len() != 3 || ws[1] != inner[0] {
            return Err(Error::Shape {
                op: "conv1d",
                expected: xs.clone(),
                got: ws,
            });
        }
        let (c_in, l_in, c_out, k) = (inner[0], inner[1], ws[0], ws[2]);
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return shape_err("conv1d bias", &[c_out], self.value(b).shape());
            }
        }
        if stride == 0 {
            return param_err("conv1d", "stride must be positive");
        }
        let Some(l_out) = kernels::conv1d_out_len(l_in, k, stride, padding) else {
            return shape_err("conv1d output length", &[k], &[l_in + 2 * padding]);
        };
        let geom = ConvGeom { c_in, l_in, c_out, k, stride, padding, l_out };
        let mut out = vec![0.0; batch * c_out * l_out];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            let mut col = vec![0.0; l_out * geom.patch()];
            for s in 0..batch {
                kernels::conv1d_forward_with(
                    &xv[s * c_in * l_in..(s + 1) * c_in * l_in],
                    wv,
                    bv,
                    &geom,
                    &mut col,
                    &mut out[s * c_out * l_out..(s + 1) * c_out * l_out],
                );
            }
        }
        let shape = with_batch(xs.len() == 3, batch, &[c_out, l_out]);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            rg,
            Op::Conv1d { input: x, weight: w, bias: b, geom, batch },
        ))
    }

    /// Max pooling over the last axis of `[C, L]` or `[B, C, L]`.
    pub fn maxpool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let Some((batch, inner)) = split_batch(&xs, 2) else {
            return shape_err("maxpool1d input", &[0, 0], &xs);
        };
        let (channels, l_in) = (inner[0], inner[1]);
        let Some(l_out) = kernels::pool_out_len(l_in, window, stride) else {
            return shape_err("maxpool1d window", &[l_in], &[window]);
        };
        let per_in = channels * l_in;
        let per_out = channels * l_out;
        let mut out = vec![0.0; batch * per_out];
        let mut argmax = vec![0usize; batch * per_out];
        let xv = self.value(x).data();
        for s in 0..batch {
            kernels::maxpool1d_forward(
                &xv[s * per_in..(s + 1) * per_in],
                channels,
                l_in,
                window,
                stride,
                &mut out[s * per_out..(s + 1) * per_out],
                Some(&mut argmax[s * per_out..(s + 1) * per_out]),
            );
            for a in &mut argmax[s * per_out..(s + 1) * per_out] {
                *a += s * per_in;
            }
        }
        let shape = with_batch(xs.len() == 3, batch, &[channels, l_out]);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::MaxPool { input: x, argmax }))
    }

    pub fn avgpool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let Some((batch, inner)) = split_batch(&xs, 2) else {
            return shape_err("avgpool1d input", &[0, 0], &xs);
        };
        let (channels, l_in) = (inner[0], inner[1]);
        let Some(l_out) = kernels::pool_out_len(l_in, window, stride) else {
            return shape_err("avgpool1d window", &[l_in], &[window]);
        };
        let mut out = vec![0.0; batch * channels * l_out];
        let xv = self.value(x).data();
        for s in 0..batch {
            kernels::avgpool1d_forward(
                &xv[s * channels * l_in..(s + 1) * channels * l_in],
                channels,
                l_in,
                window,
                stride,
                &mut out[s * channels * l_out..(s + 1) * channels * l_out],
            );
        }
        let shape = with_batch(xs.len() == 3, batch, &[channels, l_out]);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            rg,
            Op::AvgPool { input: x, window, stride, channels, l_in, batch },
        ))
    }

    /// `y = W x + b` for `x` of shape `[N_in]` or `[B, N_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let Some((batch, inner)) = split_batch(&xs, 1) else {
            return shape_err("linear input", &[0], &xs);
        };
        if ws.len() != 2 || ws[1] != inner[0] {
            return Err(Error::Shape { op: "linear", expected: ws, got: xs });
        }
        let (n_in, n_out) = (ws[1], ws[0]);
        if let Some(b) = b {
            if self.value(b).shape() != [n_out] {
                return shape_err("linear bias", &[n_out], self.value(b).shape());
            }
        }
        let mut out = vec![0.0; batch * n_out];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for s in 0..batch {
                kernels::linear_forward(
                    &xv[s * n_in..(s + 1) * n_in],
                    wv,
                    bv,
                    &mut out[s * n_out..(s + 1) * n_out],
                );
            }
        }
        let shape = with_batch(xs.len() == 2, batch, &[n_out]);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            rg,
            Op::Linear { input: x, weight: w, bias: b, batch },
        ))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.value(a).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(Error::Shape { op: "matmul", expected: as_, got: bs });
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::MatMul { a, b, m, k, n }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        kernels::relu_inplace(v.data_mut());
        let rg = self.rg(x);
        self.push(v, rg, Op::Relu { input: x })
    }

    /// Batchnorm over channels of `[C, L]` or `[B, C, L]`. Training mode also
    /// returns the batch statistics so the caller can update running buffers.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.value(x).shape().to_vec();
        let Some((batch, inner)) = split_batch(&xs, 2) else {
            return shape_err("batchnorm1d input", &[0, 0], &xs);
        };
        let (channels, len) = (inner[0], inner[1]);
        for p in [gamma, beta] {
            if self.value(p).shape() != [channels] {
                return shape_err("batchnorm1d parameter", &[channels], self.value(p).shape());
            }
        }
        let count = batch * len;
        let xv = self.value(x).data();
        let (mean, var, eps, train) = match mode {
            BatchNormMode::Train { eps } => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut s = 0.0;
                    for b in 0..batch {
                        s += xv[(b * channels + c) * len..(b * channels + c + 1) * len].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut q = 0.0;
                    for b in 0..batch {
                        for &v in &xv[(b * channels + c) * len..(b * channels + c + 1) * len] {
                            q += (v - m) * (v - m);
                        }
                    }
                    mean[c] = m;
                    var[c] = q / count as f64;
                }
                (mean, var, eps, true)
            }
            BatchNormMode::Eval { mean, var, eps } => {
                if mean.len() != channels || var.len() != channels {
                    return shape_err("batchnorm1d running stats", &[channels], &[mean.len()]);
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / Float::sqrt(v + eps)).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for c in 0..channels {
                let r = (b * channels + c) * len..(b * channels + c + 1) * len;
                for i in r {
                    let h = (xv[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = h * gv[c] + bv[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(&xs, out)?,
            rg,
            Op::BatchNorm { input: x, gamma, beta, xhat, inv_std, channels, len, batch, train },
        );
        let stats = train.then_some(BatchStats { mean, var, count });
        Ok((v, stats))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, rg, Op::Reshape { input: x }))
    }

    /// Collapses `[B, C, L]` to `[B, C·L]` (or `[C, L]` to `[C·L]`).
    pub fn flatten(&mut self, x: Var, batched: bool) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let shape = if batched {
            vec![s[0], s[1..].iter().product()]
        } else {
            vec![s.iter().product()]
        };
        self.reshape(x, &shape)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(op, self.value(a).shape(), self.value(b).shape());
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data).expect("shape already checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(x).map(|e| e * scale + shift);
        let rg = self.rg(x);
        self.push(v, rg, Op::Affine { input: x, scale })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum { input: x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Mean { input: x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(v, rg, Op::Sigmoid { input: x })
    }

    /// Row-wise `softmax(x / T)` over the last axis.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        check_temperature("softmax", temperature)?;
        let v = self.value(x);
        let cols = *v.shape().last().unwrap();
        let mut out = vec![0.0; v.len()];
        for (row, o) in v.data().chunks(cols).zip(out.chunks_mut(cols)) {
            kernels::softmax(row, temperature, o);
        }
        let t = Tensor::new(v.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Softmax { input: x, temperature, cols }))
    }

    pub fn log_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        check_temperature("log_softmax", temperature)?;
        let v = self.value(x);
        let cols = *v.shape().last().unwrap();
        let mut out = vec![0.0; v.len()];
        for (row, o) in v.data().chunks(cols).zip(out.chunks_mut(cols)) {
            kernels::log_softmax(row, temperature, o);
        }
        let t = Tensor::new(v.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::LogSoftmax { input: x, temperature, cols }))
    }

    /// Records a scalar `value` whose gradient with respect to `input` is
    /// `local_grad` (same length as `input`).
    pub(crate) fn precomputed_scalar(&mut self, input: Var, value: f64, local_grad: Vec<f64>) -> Var {
        debug_assert_eq!(local_grad.len(), self.value(input).len());
        let rg = self.rg(input);
        self.push(Tensor::scalar(value), rg, Op::Precomputed { input, local_grad })
    }

    /// Back-propagates from the scalar `output`, populating gradients of every
    /// node that requires them. A tape supports exactly one backward pass.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match g {
                Some(g) if n.requires_grad => Some(Tensor::new(n.value.shape(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv1d { input, weight, bias, geom, batch } => {
                let (pin, pout) = (geom.c_in * geom.l_in, geom.c_out * geom.l_out);
                let xv = val(*input);
                let wv = val(*weight);
                let mut gw = slot(nodes, grads, *weight).map(core::mem::take);
                let mut gb = bias.and_then(|b| slot(nodes, grads, b).map(core::mem::take));
                let mut gx = slot(nodes, grads, *input).map(core::mem::take);
                for s in 0..*batch {
                    kernels::conv1d_backward(
                        &xv[s * pin..(s + 1) * pin],
                        wv,
                        &g[s * pout..(s + 1) * pout],
                        geom,
                        gx.as_mut().map(|v| &mut v[s * pin..(s + 1) * pin]),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                }
                if let Some(v) = gw {
                    *slot(nodes, grads, *weight).unwrap() = v;
                }
                if let (Some(v), Some(b)) = (gb, bias) {
                    *slot(nodes, grads, *b).unwrap() = v;
                }
                if let Some(v) = gx {
                    *slot(nodes, grads, *input).unwrap() = v;
                }
            }
            Op::MaxPool { input, argmax } => {
                if let Some(gx) = slot(nodes, grads, *input) {
                    for (&a, &gv) in argmax.iter().zip(g) {
                        gx[a] += gv;
                    }
                }
            }
            Op::AvgPool { input, window, stride, channels, l_in, batch } => {
                if let Some(gx) = slot(nodes, grads, *input) {
                    let l_out = (l_in - window) / stride + 1;
                    let inv = 1.0 / *window as f64;
                    for s in 0..*batch {
                        for c in 0..*channels {
                            for t in 0..l_out {
                                let gv = g[(s * channels + c) * l_out + t] * inv;
                                let base = (s * channels + c) * l_in + t * stride;
                                for e in &mut gx[base..base + window] {
                                    *e += gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Linear { input, weight, bias, batch } => {
                let ws = nodes[weight.0].value.shape();
                let (n_out, n_in) = (ws[0], ws[1]);
                let xv = val(*input);
                let wv = val(*weight);
                if let Some(gw) = slot(nodes, grads, *weight) {
                    for s in 0..*batch {
                        let xr = &xv[s * n_in..(s + 1) * n_in];
                        for o in 0..n_out {
                            let gv = g[s * n_out + o];
                            if gv != 0.0 {
                                for (e, &xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(xr) {
                                    *e += gv * xi;
                                }
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    if let Some(gb) = slot(nodes, grads, *b) {
                        for s in 0..*batch {
                            for o in 0..n_out {
                                gb[o] += g[s * n_out + o];
                            }
                        }
                    }
                }
                if let Some(gx) = slot(nodes, grads, *input) {
                    for s in 0..*batch {
                        let gr = &mut gx[s * n_in..(s + 1) * n_in];
                        for o in 0..n_out {
                            let gv = g[s * n_out + o];
                            if gv != 0.0 {
                                for (e, &wi) in gr.iter_mut().zip(&wv[o * n_in..(o + 1) * n_in]) {
                                    *e += gv * wi;
                                }
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = slot(nodes, grads, *a) {
                    for r in 0..*m {
                        for c in 0..*k {
                            let mut acc = 0.0;
                            for j in 0..*n {
                                acc += g[r * n + j] * bv[c * n + j];
                            }
                            ga[r * k + c] += acc;
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for c in 0..*k {
                        for j in 0..*n {
                            let mut acc = 0.0;
                            for r in 0..*m {
                                acc += av[r * k + c] * g[r * n + j];
                            }
                            gb[c * n + j] += acc;
                        }
                    }
                }
            }
            Op::Relu { input } => {
                let xv = val(*input);
                if let Some(gx) = slot(nodes, grads, *input) {
                    for ((e, &gv), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *e += gv;
                        }
                    }
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, channels, len, batch, train } => {
                let gam = val(*gamma);
                let count = (batch * len) as f64;
                let mut sum_g = vec![0.0; *channels];
                let mut sum_gx = vec![0.0; *channels];
                for b in 0..*batch {
                    for c in 0..*channels {
                        for idx in (b * channels + c) * len..(b * channels + c + 1) * len {
                            sum_g[c] += g[idx];
                            sum_gx[c] += g[idx] * xhat[idx];
                        }
                    }
                }
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    for c in 0..*channels {
                        gg[c] += sum_gx[c];
                    }
                }
                if let Some(gb) = slot(nodes, grads, *beta) {
                    for c in 0..*channels {
                        gb[c] += sum_g[c];
                    }
                }
                if let Some(gx) = slot(nodes, grads, *input) {
                    for b in 0..*batch {
                        for c in 0..*channels {
                            let scale = gam[c] * inv_std[c];
                            for idx in (b * channels + c) * len..(b * channels + c + 1) * len {
                                gx[idx] += if *train {
                                    scale * (g[idx] - sum_g[c] / count - xhat[idx] * sum_gx[c] / count)
                                } else {
                                    scale * g[idx]
                                };
                            }
                        }
                    }
                }
            }
            Op::Reshape { input } => {
                if let Some(gx) = slot(nodes, grads, *input) {
                    add_into(gx, g);
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (e, &gv) in gb.iter_mut().zip(g) {
                        *e -= gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((e, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *e += gv * y;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((e, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *e += gv * x;
                    }
                }
            }
            Op::Affine { input, scale } => {
                if let Some(gx) = slot(nodes, grads, *input) {
                    for (e, &gv) in gx.iter_mut().zip(g) {
                        *e += gv * scale;
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(gx) = slot(nodes, grads, *input) {
                    gx.iter_mut().for_each(|e| *e += g[0]);
                }
            }
            Op::Mean { input } => {
                if let Some(gx) = slot(nodes, grads, *input) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|e| *e += s);
                }
            }
            Op::Sigmoid { input } => {
                let y = nodes[i].value.data();
                if let Some(gx) = slot(nodes, grads, *input) {
                    for ((e, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *e += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Softmax { input, temperature, cols } => {
                let y = nodes[i].value.data();
                if let Some(gx) = slot(nodes, grads, *input) {
                    for ((gr, yr), er) in g.chunks(*cols).zip(y.chunks(*cols)).zip(gx.chunks_mut(*cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((e, &gv), &yv) in er.iter_mut().zip(gr).zip(yr) {
                            *e += yv * (gv - dot) / temperature;
                        }
                    }
                }
            }
            Op::LogSoftmax { input, temperature, cols } => {
                let y = nodes[i].value.data();
                if let Some(gx) = slot(nodes, grads, *input) {
                    for ((gr, yr), er) in g.chunks(*cols).zip(y.chunks(*cols)).zip(gx.chunks_mut(*cols)) {
                        let total: f64 = gr.iter().sum();
                        for ((e, &gv), &lv) in er.iter_mut().zip(gr).zip(yr) {
                            *e += (gv - Float::exp(lv) * total) / temperature;
                        }
                    }
                }
            }
            Op::Precomputed { input, local_grad } => {
                if let Some(gx) = slot(nodes, grads, *input) {
                    for (e, &l) in gx.iter_mut().zip(local_grad) {
                        *e += g[0] * l;
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + Float::exp(-x))
    } else {
        let e = Float::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..k {
            let av = a[r * k + c];
            for j in 0..n {
                out[r * n + j] += av * b[c * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap(), true);
        let y = tape.sum(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn relu_grad_is_zero_at_and_below_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]), true);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let y = tape.sum(r);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.scale(x, 3.0);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
        assert!(matches!(Tape::new().backward(Var(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn reuse_accumulates() {
        let xs = vec![0.3, -1.2, 2.0];
        let single = {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::from_vec(xs.clone()), true);
            let s = t.sigmoid(x);
            let y = t.sum(s);
            t.backward(y).unwrap();
            t.grad(x).unwrap().clone()
        };
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(xs), true);
        let s1 = t.sigmoid(x);
        let s2 = t.sigmoid(x);
        let a = t.add(s1, s2).unwrap();
        let y = t.sum(a);
        t.backward(y).unwrap();
        for (d, s) in t.grad(x).unwrap().data().iter().zip(single.data()) {
            assert_eq!(*d, 2.0 * s);
        }
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let x = t.leaf(Tensor::from_vec(vec![3.0, 4.0]), true);
        let m = t.mul(c, x).unwrap();
        let y = t.sum(m);
        t.backward(y).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(t.softmax(x, 0.0), Err(Error::Param { .. })));
        assert!(matches!(t.log_softmax(x, -1.0), Err(Error::Param { .. })));
    }
}
