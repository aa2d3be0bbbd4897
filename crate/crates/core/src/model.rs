//! Teacher, student and adapted-student architectures.
//!
//! Parameter counts per table row:
//!
//! | model    | rows                                                                 | total  |
//! |----------|----------------------------------------------------------------------|--------|
//! | teacher  | 1072, 1632, 6336, 12480, 12480, 24960, 8256, 2080, 330               | 69,626 |
//! | student  | 260, 2570                                                            | 2,830  |
//! | dkdl-net | 816 (conv adapter), 260, 3192 (fc adapter), 2570                     | 6,838  |
//!
//! Teacher conv rows carry `C_out·C_in·K + C_out` conv parameters plus
//! `2·C_out` batchnorm parameters. The adapted student's total includes the
//! frozen copy of the student; only the 4,008 adapter values train.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{BatchNormMode, BatchStats, Tape, Var};
use crate::error::{param_err, shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::lora::{self, BaseLayer, LoraAdapter};
use crate::tensor::Tensor;

pub const INPUT_LEN: usize = 1024;
pub const NUM_CLASSES: usize = 10;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Adapter rank reproducing the 816 / 3192 adapter rows.
pub const DEFAULT_RANK: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Teacher,
    Student,
    DkdlNet,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Teacher => "teacher",
            ModelKind::Student => "student",
            ModelKind::DkdlNet => "dkdl-net",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "teacher" => Some(ModelKind::Teacher),
            "student" => Some(ModelKind::Student),
            "dkdl-net" => Some(ModelKind::DkdlNet),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolKind {
    #[default]
    Max,
    Avg,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm1d {
        channels: usize,
    },
    MaxPool1d {
        window: usize,
        stride: usize,
    },
    AvgPool1d {
        window: usize,
        stride: usize,
    },
    Relu,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// Adapter on the conv layer that immediately follows it.
    LoraConv1d {
        rank: usize,
        fan_in: usize,
        fan_out: usize,
    },
    /// Adapter on the linear layer that immediately follows it.
    LoraLinear {
        rank: usize,
        fan_in: usize,
        fan_out: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    /// Tensor-name prefix, e.g. `conv1` → `conv1.weight`.
    pub key: String,
    /// Row label used by the layer table.
    pub label: String,
    pub kind: LayerKind,
    pub frozen: bool,
    /// Adapters only: folded into the base weight.
    pub merged: bool,
}

impl LayerSpec {
    fn new(key: &str, label: &str, kind: LayerKind) -> Self {
        Self {
            key: key.into(),
            label: label.into(),
            kind,
            frozen: false,
            merged: false,
        }
    }

    pub fn num_params(&self) -> usize {
        match self.kind {
            LayerKind::Conv1d { in_channels, out_channels, kernel, .. } => out_channels * in_channels * kernel + out_channels,
            LayerKind::BatchNorm1d { channels } => 2 * channels,
            LayerKind::Linear { in_features, out_features } => out_features * in_features + out_features,
            LayerKind::LoraConv1d { rank, fan_in, fan_out } | LayerKind::LoraLinear { rank, fan_in, fan_out } => {
                rank * (fan_in + fan_out)
            }
            _ => 0,
        }
    }

    pub fn is_trainable(&self) -> bool {
        !self.frozen && !self.merged
    }

    fn is_adapter(&self) -> bool {
        matches!(self.kind, LayerKind::LoraConv1d { .. } | LayerKind::LoraLinear { .. })
    }

    /// Learnable tensors as (name, shape).
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = &self.key;
        match self.kind {
            LayerKind::Conv1d { in_channels, out_channels, kernel, .. } => vec![
                (format!("{k}.weight"), vec![out_channels, in_channels, kernel]),
                (format!("{k}.bias"), vec![out_channels]),
            ],
            LayerKind::BatchNorm1d { channels } => vec![
                (format!("{k}.gamma"), vec![channels]),
                (format!("{k}.beta"), vec![channels]),
            ],
            LayerKind::Linear { in_features, out_features } => vec![
                (format!("{k}.weight"), vec![out_features, in_features]),
                (format!("{k}.bias"), vec![out_features]),
            ],
            LayerKind::LoraConv1d { rank, fan_in, fan_out } | LayerKind::LoraLinear { rank, fan_in, fan_out } => vec![
                (format!("{k}.A"), vec![rank, fan_in]),
                (format!("{k}.B"), vec![fan_out, rank]),
            ],
            _ => Vec::new(),
        }
    }

    /// Non-learnable state (batchnorm running statistics).
    pub fn buffer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self.kind {
            LayerKind::BatchNorm1d { channels } => vec![
                (format!("{}.running_mean", self.key), vec![channels]),
                (format!("{}.running_var", self.key), vec![channels]),
            ],
            _ => Vec::new(),
        }
    }
}

/// LoRA settings of an adapted model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraSettings {
    pub rank: usize,
    pub sigma: f64,
    /// `Some(alpha)` enables the `alpha / rank` multiplier.
    pub alpha: Option<f64>,
}

impl Default for LoraSettings {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK,
            sigma: lora::DEFAULT_SIGMA,
            alpha: None,
        }
    }
}

impl LoraSettings {
    pub fn scaling(&self) -> f64 {
        self.alpha.map_or(1.0, |a| a / self.rank as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    /// `[channels, length]` of one input sample.
    pub input_shape: [usize; 2],
    pub lora: Option<LoraSettings>,
}

fn conv(key: &str, label: &str, c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::new(
        key,
        label,
        LayerKind::Conv1d { in_channels: c_in, out_channels: c_out, kernel: k, stride, padding },
    )
}

fn pool(key: &str, label: &str, kind: PoolKind) -> LayerSpec {
    let k = match kind {
        PoolKind::Max => LayerKind::MaxPool1d { window: 2, stride: 2 },
        PoolKind::Avg => LayerKind::AvgPool1d { window: 2, stride: 2 },
    };
    LayerSpec::new(key, label, k)
}

fn linear(key: &str, label: &str, n_in: usize, n_out: usize) -> LayerSpec {
    LayerSpec::new(key, label, LayerKind::Linear { in_features: n_in, out_features: n_out })
}

fn relu(key: &str) -> LayerSpec {
    LayerSpec::new(key, "", LayerKind::Relu)
}

/// Six conv blocks (conv → batchnorm → ReLU → pool 2/2) and three FC layers.
pub fn build_teacher() -> ModelSpec {
    build_teacher_with(PoolKind::Max)
}

pub fn build_teacher_with(pooling: PoolKind) -> ModelSpec {
    // (C_out, K, stride, padding); paddings solve the row shapes.
    let blocks = [(16, 64, 8, 28), (32, 3, 1, 1), (64, 3, 1, 1), (64, 3, 1, 1), (64, 3, 1, 1), (128, 3, 1, 0)];
    let mut layers = Vec::new();
    let mut c_in = 1;
    for (i, &(c_out, k, stride, padding)) in blocks.iter().enumerate() {
        let n = i + 1;
        layers.push(conv(&format!("conv{n}"), &format!("Conv1D_{n}"), c_in, c_out, k, stride, padding));
        layers.push(LayerSpec::new(&format!("bn{n}"), "", LayerKind::BatchNorm1d { channels: c_out }));
        layers.push(relu(&format!("relu{n}")));
        layers.push(pool(&format!("pool{n}"), &format!("Pooling_{n}"), pooling));
        c_in = c_out;
    }
    layers.push(LayerSpec::new("flatten", "", LayerKind::Flatten));
    layers.push(linear("fc1", "FC_1", 128, 64));
    layers.push(relu("relu_fc1"));
    layers.push(linear("fc2", "FC_2", 64, 32));
    layers.push(linear("fc3", "FC_3", 32, NUM_CLASSES));
    ModelSpec {
        kind: ModelKind::Teacher,
        layers,
        num_classes: NUM_CLASSES,
        input_shape: [1, INPUT_LEN],
        lora: None,
    }
}

/// One conv (1→4, K 64, stride 8), ReLU, pool 2/2, FC 256→10. No batchnorm.
pub fn build_student() -> ModelSpec {
    build_student_with(PoolKind::Max)
}

pub fn build_student_with(pooling: PoolKind) -> ModelSpec {
    ModelSpec {
        kind: ModelKind::Student,
        layers: vec![
            conv("conv", "Conv1D", 1, 4, 64, 8, 28),
            relu("relu"),
            pool("pool", "Pooling", pooling),
            LayerSpec::new("flatten", "", LayerKind::Flatten),
            linear("fc", "FC", 256, NUM_CLASSES),
        ],
        num_classes: NUM_CLASSES,
        input_shape: [1, INPUT_LEN],
        lora: None,
    }
}

/// Student layers with frozen base weights and an adapter in front of the
/// conv and the FC layer.
pub fn build_dkdl_net_spec(student: &ModelSpec, settings: LoraSettings) -> Result<ModelSpec> {
    if student.kind != ModelKind::Student {
        return Err(Error::ModelMismatch {
            expected: ModelKind::Student.name().into(),
            found: student.kind.name().into(),
        });
    }
    if settings.rank == 0 {
        return param_err("lora", "rank must be at least 1");
    }
    let mut layers = Vec::new();
    for l in &student.layers {
        let mut base = l.clone();
        match l.kind {
            LayerKind::Conv1d { in_channels, out_channels, kernel, .. } => {
                layers.push(LayerSpec::new(
                    "adapter.conv",
                    "Conv1D_LoRA",
                    LayerKind::LoraConv1d { rank: settings.rank, fan_in: in_channels * kernel, fan_out: out_channels },
                ));
                base.frozen = true;
            }
            LayerKind::Linear { in_features, out_features } => {
                layers.push(LayerSpec::new(
                    "adapter.fc",
                    "FC_LoRA",
                    LayerKind::LoraLinear { rank: settings.rank, fan_in: in_features, fan_out: out_features },
                ));
                base.frozen = true;
            }
            _ => {}
        }
        layers.push(base);
    }
    Ok(ModelSpec {
        kind: ModelKind::DkdlNet,
        layers,
        num_classes: student.num_classes,
        input_shape: student.input_shape,
        lora: Some(settings),
    })
}

/// Sum of per-layer parameter counts; frozen layers and merged adapters are
/// skipped when `trainable_only`.
pub fn count_parameters(spec: &ModelSpec, trainable_only: bool) -> usize {
    spec.layers
        .iter()
        .filter(|l| !trainable_only || l.is_trainable())
        .map(LayerSpec::num_params)
        .sum()
}

/// One row of a layer table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub name: String,
    /// `(K, ) / stride` for conv rows, `window / stride` for pooling rows.
    pub kernel_stride: Option<String>,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    pub activation: Option<&'static str>,
    pub params: usize,
}

impl ModelSpec {
    /// Per-layer `(input, output)` sample shapes, validated along the chain.
    pub fn layer_shapes(&self) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        let mut out = vec![(Vec::new(), Vec::new()); self.layers.len()];
        let mut pending_adapter: Option<usize> = None;
        for (i, l) in self.layers.iter().enumerate() {
            let next = match l.kind {
                LayerKind::Conv1d { in_channels, out_channels, kernel, stride, padding } => {
                    if shape.len() != 2 || shape[0] != in_channels {
                        return shape_err("conv1d chain", &[in_channels, 0], &shape);
                    }
                    let Some(l_out) = kernels::conv1d_out_len(shape[1], kernel, stride, padding) else {
                        return shape_err("conv1d chain", &[kernel], &shape);
                    };
                    vec![out_channels, l_out]
                }
                LayerKind::BatchNorm1d { channels } => {
                    if shape.len() != 2 || shape[0] != channels {
                        return shape_err("batchnorm chain", &[channels, 0], &shape);
                    }
                    shape.clone()
                }
                LayerKind::MaxPool1d { window, stride } | LayerKind::AvgPool1d { window, stride } => {
                    let Some(l_out) = (shape.len() == 2).then(|| kernels::pool_out_len(shape[1], window, stride)).flatten()
                    else {
                        return shape_err("pool chain", &[window], &shape);
                    };
                    vec![shape[0], l_out]
                }
                LayerKind::Relu => shape.clone(),
                LayerKind::Flatten => vec![shape.iter().product()],
                LayerKind::Linear { in_features, out_features } => {
                    if shape != [in_features] {
                        return shape_err("linear chain", &[in_features], &shape);
                    }
                    vec![out_features]
                }
                LayerKind::LoraConv1d { .. } | LayerKind::LoraLinear { .. } => {
                    pending_adapter = Some(i);
                    out[i] = (shape.clone(), shape.clone());
                    continue;
                }
            };
            if let Some(a) = pending_adapter.take() {
                let ok = match (&self.layers[a].kind, &l.kind) {
                    (
                        LayerKind::LoraConv1d { fan_in, fan_out, .. },
                        LayerKind::Conv1d { in_channels, out_channels, kernel, .. },
                    ) => *fan_in == in_channels * kernel && fan_out == out_channels,
                    (LayerKind::LoraLinear { fan_in, fan_out, .. }, LayerKind::Linear { in_features, out_features }) => {
                        fan_in == in_features && fan_out == out_features
                    }
                    _ => false,
                };
                if !ok {
                    return Err(Error::Contract(format!(
                        "adapter `{}` does not match the layer after it",
                        self.layers[a].key
                    )));
                }
                out[a] = (shape.clone(), next.clone());
            }
            out[i] = (shape, next.clone());
            shape = next;
        }
        if pending_adapter.is_some() {
            return Err(Error::Contract("adapter at the end of the layer list".into()));
        }
        if shape != [self.num_classes] {
            return shape_err("model output", &[self.num_classes], &shape);
        }
        Ok(out)
    }

    /// Rows grouped the way layer tables are usually printed. A conv row
    /// absorbs its batchnorm and activations fold into the row that feeds
    /// them. Flatten gets no row.
    pub fn table_rows(&self) -> Result<Vec<TableRow>> {
        let shapes = self.layer_shapes()?;
        let mut rows: Vec<TableRow> = Vec::new();
        for (l, (input, output)) in self.layers.iter().zip(shapes) {
            match l.kind {
                LayerKind::BatchNorm1d { .. } => {
                    if let Some(r) = rows.last_mut() {
                        r.params += l.num_params();
                    }
                }
                LayerKind::Relu => {
                    if let Some(r) = rows.last_mut() {
                        r.activation = Some("ReLU");
                    }
                }
                LayerKind::Flatten => {}
                _ => {
                    let kernel_stride = match l.kind {
                        LayerKind::Conv1d { kernel, stride, .. } => Some(format!("({kernel}, ) / {stride}")),
                        LayerKind::MaxPool1d { window, stride } | LayerKind::AvgPool1d { window, stride } => {
                            Some(format!("{window} / {stride}"))
                        }
                        _ => None,
                    };
                    rows.push(TableRow {
                        name: l.label.clone(),
                        kernel_stride,
                        input,
                        output,
                        activation: None,
                        params: l.num_params(),
                    });
                }
            }
        }
        Ok(rows)
    }
}

/// A named tensor owned by a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    /// Running statistics: saved with the model but never optimized.
    pub buffer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
}

/// Tape handles produced by [`Model::forward_tape`].
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// Leaf variable of every parameter, indexed like [`Model::params`].
    pub param_vars: Vec<Option<Var>>,
    /// Training-mode batchnorm statistics keyed by layer key.
    pub bn_stats: Vec<(String, BatchStats)>,
}

fn uniform_fill(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl Model {
    /// Fresh weights: conv/linear weights and biases uniform in
    /// `±1/sqrt(fan_in)`, batchnorm scale 1 and shift 0, adapters per
    /// [`lora::init_adapter`] with `B = 0`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.layer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (li, l) in spec.layers.iter().enumerate() {
            let trainable = l.is_trainable();
            let tensors: Vec<Tensor> = match l.kind {
                LayerKind::Conv1d { in_channels, out_channels, kernel, .. } => {
                    let bound = 1.0 / Float::sqrt((in_channels * kernel) as f64);
                    vec![
                        Tensor::new(
                            &[out_channels, in_channels, kernel],
                            uniform_fill(&mut rng, out_channels * in_channels * kernel, bound),
                        )?,
                        Tensor::new(&[out_channels], uniform_fill(&mut rng, out_channels, bound))?,
                    ]
                }
                LayerKind::Linear { in_features, out_features } => {
                    let bound = 1.0 / Float::sqrt(in_features as f64);
                    vec![
                        Tensor::new(&[out_features, in_features], uniform_fill(&mut rng, out_features * in_features, bound))?,
                        Tensor::new(&[out_features], uniform_fill(&mut rng, out_features, bound))?,
                    ]
                }
                LayerKind::BatchNorm1d { channels } => vec![Tensor::full(&[channels], 1.0), Tensor::zeros(&[channels])],
                LayerKind::LoraConv1d { rank, fan_in, fan_out } | LayerKind::LoraLinear { rank, fan_in, fan_out } => {
                    let sigma = spec.lora.map_or(lora::DEFAULT_SIGMA, |s| s.sigma);
                    let ad = lora::init_adapter(fan_in, fan_out, rank, sigma, adapter_seed(seed, li))?;
                    vec![ad.a, ad.b]
                }
                _ => Vec::new(),
            };
            for ((name, _), value) in l.param_shapes().into_iter().zip(tensors) {
                params.push(Param { name, value, trainable, buffer: false });
            }
            for (i, (name, shape)) in l.buffer_shapes().into_iter().enumerate() {
                let fill = if i == 0 { 0.0 } else { 1.0 };
                params.push(Param { name, value: Tensor::full(&shape, fill), trainable: false, buffer: true });
            }
        }
        Ok(Self { spec, params })
    }

    /// Wraps existing tensors, checking names and shapes against the spec.
    pub fn from_params(spec: ModelSpec, mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        spec.layer_shapes()?;
        let mut params = Vec::new();
        for l in &spec.layers {
            let learnable = l.param_shapes().into_iter().map(|p| (p, false));
            let buffers = l.buffer_shapes().into_iter().map(|p| (p, true));
            for ((name, shape), buffer) in learnable.chain(buffers) {
                let pos = tensors
                    .iter()
                    .position(|(n, _)| *n == name)
                    .ok_or_else(|| Error::MissingTensor(name.clone()))?;
                let (_, value) = tensors.swap_remove(pos);
                if value.shape() != shape.as_slice() {
                    return shape_err("parameter shape", &shape, value.shape());
                }
                params.push(Param { name, value, trainable: !buffer && l.is_trainable(), buffer });
            }
        }
        if let Some((name, _)) = tensors.first() {
            return Err(Error::Malformed(format!("unexpected tensor `{name}`")));
        }
        Ok(Self { spec, params })
    }

    /// Adapted student: a frozen copy of `student` plus fresh adapters.
    pub fn dkdl_from_student(student: &Model, settings: LoraSettings, seed: u64) -> Result<Self> {
        let spec = build_dkdl_net_spec(&student.spec, settings)?;
        let fresh = Model::init(spec.clone(), seed)?;
        let tensors = fresh
            .params
            .into_iter()
            .map(|p| match student.get(&p.name) {
                Some(t) => (p.name, t.clone()),
                None => (p.name, p.value),
            })
            .collect();
        Model::from_params(spec, tensors)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_owned()))
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn is_merged(&self) -> bool {
        self.spec.layers.iter().any(|l| l.merged)
    }

    /// The adapter stored under `key` (`adapter.conv` or `adapter.fc`).
    pub fn adapter(&self, key: &str) -> Result<LoraAdapter> {
        let layer = self
            .spec
            .layers
            .iter()
            .find(|l| l.key == key && l.is_adapter())
            .ok_or_else(|| Error::MissingTensor(format!("{key}.A")))?;
        let settings = self.spec.lora.unwrap_or_default();
        Ok(LoraAdapter {
            a: self.require(&format!("{key}.A"))?.clone(),
            b: self.require(&format!("{key}.B"))?.clone(),
            rank: settings.rank,
            sigma: settings.sigma,
            scaling: settings.scaling(),
            merged: layer.merged,
        })
    }

    /// Folds every adapter into the base weight that follows it.
    pub fn merge_adapters(&mut self) -> Result<()> {
        if self.spec.kind != ModelKind::DkdlNet {
            return Err(Error::Contract(format!("{} has no adapters to merge", self.spec.kind.name())));
        }
        for i in 0..self.spec.layers.len() {
            if !self.spec.layers[i].is_adapter() {
                continue;
            }
            let key = self.spec.layers[i].key.clone();
            let base_key = self.spec.layers[i + 1].key.clone();
            let mut adapter = self.adapter(&key)?;
            let wname = format!("{base_key}.weight");
            let merged = lora::merge(self.require(&wname)?, &mut adapter)?;
            *self.get_mut(&wname).expect("checked") = merged;
            self.spec.layers[i].merged = true;
            for p in self.params.iter_mut().filter(|p| p.name.starts_with(&format!("{key}."))) {
                p.trainable = false;
            }
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<bool> {
        let [c, l] = self.spec.input_shape;
        match shape {
            [a, b] if *a == c && *b == l => Ok(false),
            [_, a, b] if *a == c && *b == l => Ok(true),
            s => Err(Error::Shape { op: "model input (expected length 1024)", expected: vec![c, l], got: s.to_vec() }),
        }
    }

    /// Records the forward pass on `tape`. Trainable parameters become
    /// gradient-carrying leaves, everything else constants. `input` is
    /// `[1, 1024]` or `[B, 1, 1024]`; logits are `[10]` or `[B, 10]`.
    pub fn forward_tape(&self, tape: &mut Tape, input: Var, mode: Mode) -> Result<ForwardPass> {
        let param_vars: Vec<Option<Var>> = self
            .params
            .iter()
            .map(|p| (!p.buffer).then(|| tape.leaf(p.value.clone(), p.trainable)))
            .collect();
        self.forward_bound(tape, input, mode, param_vars)
    }

    /// Like [`Model::forward_tape`] but reads learnable parameters from
    /// caller-recorded vars, one per entry of [`Model::params`] (`None` for
    /// buffers). Buffers are always read from the model.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        input: Var,
        mode: Mode,
        param_vars: Vec<Option<Var>>,
    ) -> Result<ForwardPass> {
        let batched = self.check_input(tape.value(input).shape())?;
        if param_vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} parameter vars for {} parameters",
                param_vars.len(),
                self.params.len()
            )));
        }
        let var = |name: &str| -> Result<Var> {
            let i = self.params.iter().position(|p| p.name == name).ok_or_else(|| Error::MissingTensor(name.to_owned()))?;
            param_vars[i].ok_or_else(|| Error::MissingTensor(name.to_owned()))
        };
        let scaling = self.spec.lora.map_or(1.0, |s| s.scaling());
        let mut bn_stats = Vec::new();
        let mut x = input;
        let mut pending: Option<&LayerSpec> = None;
        for l in &self.spec.layers {
            let k = &l.key;
            match l.kind {
                LayerKind::LoraConv1d { .. } | LayerKind::LoraLinear { .. } => {
                    if !l.merged {
                        pending = Some(l);
                    }
                }
                LayerKind::Conv1d { stride, padding, .. } => {
                    let (w, b) = (var(&format!("{k}.weight"))?, var(&format!("{k}.bias"))?);
                    x = match pending.take() {
                        Some(a) => {
                            let (av, bv) = (var(&format!("{}.A", a.key))?, var(&format!("{}.B", a.key))?);
                            lora::adapted_forward_tape(tape, BaseLayer::Conv1d { stride, padding }, w, Some(b), av, bv, scaling, x)?
                        }
                        None => tape.conv1d(x, w, Some(b), stride, padding)?,
                    };
                }
                LayerKind::Linear { .. } => {
                    let (w, b) = (var(&format!("{k}.weight"))?, var(&format!("{k}.bias"))?);
                    x = match pending.take() {
                        Some(a) => {
                            let (av, bv) = (var(&format!("{}.A", a.key))?, var(&format!("{}.B", a.key))?);
                            lora::adapted_forward_tape(tape, BaseLayer::Linear, w, Some(b), av, bv, scaling, x)?
                        }
                        None => tape.linear(x, w, Some(b))?,
                    };
                }
                LayerKind::BatchNorm1d { .. } => {
                    let (g, b) = (var(&format!("{k}.gamma"))?, var(&format!("{k}.beta"))?);
                    let (y, stats) = match mode {
                        Mode::Train => tape.batchnorm1d(x, g, b, BatchNormMode::Train { eps: BN_EPS })?,
                        Mode::Eval => {
                            let mean = self.require(&format!("{k}.running_mean"))?.data();
                            let var = self.require(&format!("{k}.running_var"))?.data();
                            tape.batchnorm1d(x, g, b, BatchNormMode::Eval { mean, var, eps: BN_EPS })?
                        }
                    };
                    if let Some(s) = stats {
                        bn_stats.push((k.clone(), s));
                    }
                    x = y;
                }
                LayerKind::Relu => x = tape.relu(x),
                LayerKind::MaxPool1d { window, stride } => x = tape.maxpool1d(x, window, stride)?,
                LayerKind::AvgPool1d { window, stride } => x = tape.avgpool1d(x, window, stride)?,
                LayerKind::Flatten => x = tape.flatten(x, batched)?,
            }
        }
        Ok(ForwardPass { logits: x, param_vars, bn_stats })
    }

    /// Folds training-mode batch statistics into the running buffers with
    /// momentum [`BN_MOMENTUM`]; the running variance uses the unbiased
    /// estimate.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (key, s) in stats {
            let unbias = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
            let mean = self
                .get_mut(&format!("{key}.running_mean"))
                .ok_or_else(|| Error::MissingTensor(format!("{key}.running_mean")))?;
            for (r, &m) in mean.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let var = self
                .get_mut(&format!("{key}.running_var"))
                .ok_or_else(|| Error::MissingTensor(format!("{key}.running_var")))?;
            for (r, &v) in var.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
        Ok(())
    }

    /// Eval-mode logits through the tape (no gradients).
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let fwd = self.forward_tape(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(fwd.logits).clone())
    }
}

fn adapter_seed(seed: u64, layer_index: usize) -> u64 {
    seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(layer_index as u64 + 1))
}

enum InferLayer<T> {
    Conv {
        w: Vec<T>,
        b: Vec<T>,
        geom: ConvGeom,
        /// Unmerged adapter update `B·A` as a bias-free kernel.
        delta: Option<Vec<T>>,
    },
    Linear {
        w: Vec<T>,
        b: Vec<T>,
        n_in: usize,
        n_out: usize,
        delta: Option<Vec<T>>,
    },
    BatchNorm {
        gamma: Vec<T>,
        beta: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
        channels: usize,
        len: usize,
    },
    Relu,
    MaxPool {
        channels: usize,
        l_in: usize,
        window: usize,
        stride: usize,
    },
    AvgPool {
        channels: usize,
        l_in: usize,
        window: usize,
        stride: usize,
    },
}

/// Eval-mode, single-sample forward pass in `f32` or `f64`, without a tape.
pub struct InferenceModel<T> {
    layers: Vec<InferLayer<T>>,
    input_len: usize,
    output_len: usize,
    max_width: usize,
    /// Largest unfolded conv input.
    max_col: usize,
}

/// Reusable activation buffers for [`InferenceModel::forward_with`].
pub struct Workspace<T> {
    bufs: [Vec<T>; 3],
    col: Vec<T>,
}

impl<T: Float> Workspace<T> {
    pub fn new<M>(model: &InferenceModel<M>) -> Self {
        let n = model.max_width;
        Self {
            bufs: [vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]],
            col: vec![T::zero(); model.max_col],
        }
    }
}

fn cast<T: Float>(t: &Tensor) -> Vec<T> {
    t.data().iter().map(|&v| T::from(v).expect("finite")).collect()
}

impl<T: Float> InferenceModel<T> {
    pub fn new(model: &Model) -> Result<Self> {
        let spec = model.spec();
        let shapes = spec.layer_shapes()?;
        let scaling = spec.lora.map_or(1.0, |s| s.scaling());
        let mut layers = Vec::new();
        let mut pending: Option<String> = None;
        let mut max_width = spec.input_shape.iter().product::<usize>();
        let mut max_col = 0;
        for (l, (input, output)) in spec.layers.iter().zip(&shapes) {
            max_width = max_width.max(output.iter().product());
            let k = &l.key;
            let delta = |pending: &mut Option<String>| -> Result<Option<Vec<T>>> {
                match pending.take() {
                    Some(key) => {
                        let mut ad = model.adapter(&key)?;
                        ad.scaling = scaling;
                        Ok(Some(cast(&ad.delta_weight())))
                    }
                    None => Ok(None),
                }
            };
            match l.kind {
                LayerKind::LoraConv1d { .. } | LayerKind::LoraLinear { .. } => {
                    if !l.merged {
                        pending = Some(k.clone());
                    }
                }
                LayerKind::Conv1d { in_channels, out_channels, kernel, stride, padding } => {
                    max_col = max_col.max(output[1] * in_channels * kernel);
                    layers.push(InferLayer::Conv {
                        w: cast(model.require(&format!("{k}.weight"))?),
                        b: cast(model.require(&format!("{k}.bias"))?),
                        geom: ConvGeom {
                            c_in: in_channels,
                            l_in: input[1],
                            c_out: out_channels,
                            k: kernel,
                            stride,
                            padding,
                            l_out: output[1],
                        },
                        delta: delta(&mut pending)?,
                    });
                }
                LayerKind::Linear { in_features, out_features } => {
                    layers.push(InferLayer::Linear {
                        w: cast(model.require(&format!("{k}.weight"))?),
                        b: cast(model.require(&format!("{k}.bias"))?),
                        n_in: in_features,
                        n_out: out_features,
                        delta: delta(&mut pending)?,
                    });
                }
                LayerKind::BatchNorm1d { channels } => layers.push(InferLayer::BatchNorm {
                    gamma: cast(model.require(&format!("{k}.gamma"))?),
                    beta: cast(model.require(&format!("{k}.beta"))?),
                    mean: cast(model.require(&format!("{k}.running_mean"))?),
                    var: cast(model.require(&format!("{k}.running_var"))?),
                    channels,
                    len: input[1],
                }),
                LayerKind::Relu => layers.push(InferLayer::Relu),
                LayerKind::MaxPool1d { window, stride } => layers.push(InferLayer::MaxPool {
                    channels: input[0],
                    l_in: input[1],
                    window,
                    stride,
                }),
                LayerKind::AvgPool1d { window, stride } => layers.push(InferLayer::AvgPool {
                    channels: input[0],
                    l_in: input[1],
                    window,
                    stride,
                }),
                LayerKind::Flatten => {}
            }
        }
        Ok(Self {
            layers,
            input_len: spec.input_shape.iter().product(),
            output_len: spec.num_classes,
            max_width,
            max_col,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    /// Logits for one sample of `input_len` values, using caller-owned
    /// buffers. The returned slice borrows the workspace.
    pub fn forward_with<'w>(&self, x: &[T], ws: &'w mut Workspace<T>) -> Result<&'w [T]> {
        if x.len() != self.input_len {
            return shape_err("model input (expected length 1024)", &[self.input_len], &[x.len()]);
        }
        let [a, b, c] = &mut ws.bufs;
        let col = &mut ws.col;
        a[..x.len()].copy_from_slice(x);
        let (mut cur, mut nxt, tmp) = (a, b, c);
        let mut len = x.len();
        for layer in &self.layers {
            match layer {
                InferLayer::Conv { w, b, geom, delta } => {
                    let n = geom.c_out * geom.l_out;
                    kernels::conv1d_forward_with(&cur[..len], w, Some(b), geom, col, &mut nxt[..n]);
                    if let Some(d) = delta {
                        kernels::conv1d_forward_with(&cur[..len], d, None, geom, col, &mut tmp[..n]);
                        for (o, u) in nxt[..n].iter_mut().zip(&tmp[..n]) {
                            *o = *o + *u;
                        }
                    }
                    len = n;
                    core::mem::swap(&mut cur, &mut nxt);
                }
                InferLayer::Linear { w, b, n_in, n_out, delta } => {
                    kernels::linear_forward(&cur[..*n_in], w, Some(b), &mut nxt[..*n_out]);
                    if let Some(d) = delta {
                        kernels::linear_forward(&cur[..*n_in], d, None, &mut tmp[..*n_out]);
                        for (o, u) in nxt[..*n_out].iter_mut().zip(&tmp[..*n_out]) {
                            *o = *o + *u;
                        }
                    }
                    len = *n_out;
                    core::mem::swap(&mut cur, &mut nxt);
                }
                InferLayer::BatchNorm { gamma, beta, mean, var, channels, len: l } => {
                    kernels::batchnorm_eval(&mut cur[..len], *channels, *l, gamma, beta, mean, var, T::from(BN_EPS).unwrap());
                }
                InferLayer::Relu => kernels::relu_inplace(&mut cur[..len]),
                InferLayer::MaxPool { channels, l_in, window, stride } => {
                    let n = channels * ((l_in - window) / stride + 1);
                    kernels::maxpool1d_forward(&cur[..len], *channels, *l_in, *window, *stride, &mut nxt[..n], None);
                    len = n;
                    core::mem::swap(&mut cur, &mut nxt);
                }
                InferLayer::AvgPool { channels, l_in, window, stride } => {
                    let n = channels * ((l_in - window) / stride + 1);
                    kernels::avgpool1d_forward(&cur[..len], *channels, *l_in, *window, *stride, &mut nxt[..n]);
                    len = n;
                    core::mem::swap(&mut cur, &mut nxt);
                }
            }
        }
        debug_assert_eq!(len, self.output_len);
        Ok(&cur[..len])
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        let mut ws = Workspace::new(self);
        Ok(self.forward_with(x, &mut ws)?.to_vec())
    }
}

impl core::fmt::Display for TableRow {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let dims = |d: &[usize]| d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" × ");
        write!(
            f,
            "{:<12} {:<14} {:<12} {:<12} {:<6} {}",
            self.name,
            self.kernel_stride.as_deref().unwrap_or(""),
            dims(&self.input),
            dims(&self.output),
            self.activation.unwrap_or(""),
            self.params
        )
    }
}
