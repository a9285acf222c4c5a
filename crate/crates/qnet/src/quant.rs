//! Post-training quantization: f16 narrowing, activation-range calibration,
//! symmetric per-channel i8 weight quantization with asymmetric per-tensor
//! activations, batch-norm folding, and the integer inference path.
//!
//! Weights quantize symmetrically per output channel (zero point 0);
//! activations asymmetrically per tensor from calibrated min/max ranges.
//! Convolutions and dense layers accumulate in i32 and requantize through a
//! fixed-point multiplier with round-half-away-from-zero semantics. Softmax
//! stays in f32.

use std::collections::{BTreeMap, HashMap};

use half::f16;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{execute, ExecMode};
use crate::graph::{Graph, GraphError, LayerKind, WeightStore};
use crate::tensor::{conv_out_dim, same_padding, ActivationKind, Padding, PoolKind, Tensor};

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("non-finite weight in layer {layer:?} ({param})")]
    NonFinite { layer: String, param: String },
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("calibration profile does not cover layer {0:?}")]
    Coverage(String),
    #[error("batch norm layer {0:?} does not directly follow a conv/depthwise layer")]
    Structure(String),
    #[error("graph still contains batch norm layer {0:?}; fold it first")]
    Unfolded(String),
    #[error("quantized graph cannot evaluate layer {layer:?}: {reason}")]
    Unsupported { layer: String, reason: String },
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Format(#[from] Box<crate::format::FormatError>),
}

// ---------------------------------------------------------------------------
// f16

/// Raw binary16 encodings of every weight tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F16Tensor {
    pub shape: Vec<usize>,
    pub bits: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct F16Blob {
    pub tensors: BTreeMap<String, BTreeMap<String, F16Tensor>>,
}

/// Narrows every weight to IEEE binary16, round-to-nearest-even, saturating
/// values beyond f16 range to +/-65504.
pub fn quantize_f16(weights: &WeightStore) -> Result<F16Blob, QuantError> {
    let f16_max = f16::MAX.to_f32();
    let mut blob = F16Blob::default();
    for (layer, params) in weights.iter() {
        for (param, tensor) in params {
            let mut bits = Vec::with_capacity(tensor.len());
            for &x in tensor.data() {
                if x.is_nan() {
                    return Err(QuantError::NonFinite {
                        layer: layer.clone(),
                        param: param.clone(),
                    });
                }
                let clamped = x.clamp(-f16_max, f16_max);
                bits.push(f16::from_f32(clamped).to_bits());
            }
            blob.tensors.entry(layer.clone()).or_default().insert(
                param.clone(),
                F16Tensor {
                    shape: tensor.shape().to_vec(),
                    bits,
                },
            );
        }
    }
    Ok(blob)
}

impl F16Blob {
    /// Re-widens every tensor to f32 for execution.
    pub fn widen(&self) -> WeightStore {
        let mut ws = WeightStore::new();
        for (layer, params) in &self.tensors {
            for (param, t) in params {
                let data: Vec<f32> = t.bits.iter().map(|&b| f16::from_bits(b).to_f32()).collect();
                ws.insert(layer, param, Tensor::new(t.shape.clone(), data).unwrap());
            }
        }
        ws
    }
}

// ---------------------------------------------------------------------------
// Calibration

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeEntry {
    pub min: f32,
    pub max: f32,
}

/// Per-layer activation ranges observed over a calibration set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub ranges: BTreeMap<String, RangeEntry>,
    pub samples: usize,
}

/// Runs infer-mode forwards over the calibration set, recording the running
/// min/max of every layer output.
pub fn calibrate(
    graph: &Graph,
    weights: &WeightStore,
    calibration_set: &[Tensor],
) -> Result<CalibrationProfile, QuantError> {
    if calibration_set.is_empty() {
        return Err(QuantError::EmptyCalibration);
    }
    let mut ranges: BTreeMap<String, RangeEntry> = BTreeMap::new();
    for sample in calibration_set {
        let mut observe = |name: &str, out: &Tensor| {
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for &x in out.data() {
                lo = lo.min(x);
                hi = hi.max(x);
            }
            ranges
                .entry(name.to_string())
                .and_modify(|r| {
                    r.min = r.min.min(lo);
                    r.max = r.max.max(hi);
                })
                .or_insert(RangeEntry { min: lo, max: hi });
        };
        execute(
            graph,
            weights,
            sample,
            ExecMode::Infer,
            0,
            Some(&mut observe),
            None,
        )?;
    }
    Ok(CalibrationProfile {
        ranges,
        samples: calibration_set.len(),
    })
}

// ---------------------------------------------------------------------------
// Affine quantization primitives

/// Rounds to nearest, ties away from zero (f64 route).
fn round_half_away(x: f64) -> i64 {
    x.round() as i64
}

/// Asymmetric per-tensor activation parameters: real = scale * (q - zero_point).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActQuant {
    pub scale: f32,
    pub zero_point: i32,
}

impl ActQuant {
    /// Derives parameters from a calibrated range. The range is extended to
    /// include zero; a degenerate range widens by 1e-3 on both sides.
    pub fn from_range(min: f32, max: f32) -> Self {
        let mut lo = min.min(0.0);
        let mut hi = max.max(0.0);
        if lo == hi {
            lo -= 1e-3;
            hi += 1e-3;
        }
        let scale = (hi - lo) / 255.0;
        let zero_point =
            (round_half_away(-128.0 - lo as f64 / scale as f64) as i32).clamp(-128, 127);
        Self { scale, zero_point }
    }

    pub fn quantize(&self, x: f32) -> i8 {
        let q = round_half_away(x as f64 / self.scale as f64) + self.zero_point as i64;
        q.clamp(-128, 127) as i8
    }

    pub fn dequantize(&self, q: i8) -> f32 {
        self.scale * (q as i32 - self.zero_point) as f32
    }
}

/// Weight scale layout: one scale, or one per channel along an axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QuantScale {
    PerTensor(f32),
    PerChannel { axis: usize, scales: Vec<f32> },
}

/// i8 tensor with affine parameters. Weight quantization is symmetric, so
/// `zero_point` is 0 there; activations carry nonzero offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i8>,
    pub scale: QuantScale,
    pub zero_point: i32,
}

impl QuantizedTensor {
    pub fn scale_for_channel(&self, c: usize) -> f32 {
        match &self.scale {
            QuantScale::PerTensor(s) => *s,
            QuantScale::PerChannel { scales, .. } => scales[c],
        }
    }
}

/// x = scale * (code - zero_point), per channel where applicable.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let n = q.data.len();
    let mut data = vec![0.0f32; n];
    match &q.scale {
        QuantScale::PerTensor(s) => {
            for (d, &code) in data.iter_mut().zip(&q.data) {
                *d = s * (code as i32 - q.zero_point) as f32;
            }
        }
        QuantScale::PerChannel { axis, scales } => {
            // stride between consecutive elements along the axis
            let inner: usize = q.shape[axis + 1..].iter().product();
            for (i, (d, &code)) in data.iter_mut().zip(&q.data).enumerate() {
                let c = (i / inner) % q.shape[*axis];
                *d = scales[c] * (code as i32 - q.zero_point) as f32;
            }
        }
    }
    Tensor::new(q.shape.clone(), data).unwrap()
}

/// Symmetric per-channel weight quantization: scale_c = max|w_c| / 127,
/// codes rounded half away from zero into [-127, 127].
pub fn quantize_weights_per_channel(w: &Tensor, axis: usize) -> QuantizedTensor {
    let channels = w.shape()[axis];
    let inner: usize = w.shape()[axis + 1..].iter().product();
    let mut max_abs = vec![0.0f32; channels];
    for (i, &x) in w.data().iter().enumerate() {
        let c = (i / inner) % channels;
        max_abs[c] = max_abs[c].max(x.abs());
    }
    let scales: Vec<f32> = max_abs
        .iter()
        .map(|&m| if m > 0.0 { m / 127.0 } else { 1.0 })
        .collect();
    let data: Vec<i8> = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = (i / inner) % channels;
            round_half_away(x as f64 / scales[c] as f64).clamp(-127, 127) as i8
        })
        .collect();
    QuantizedTensor {
        shape: w.shape().to_vec(),
        data,
        scale: QuantScale::PerChannel { axis, scales },
        zero_point: 0,
    }
}

// ---------------------------------------------------------------------------
// Fixed-point requantization

/// Positive real multiplier decomposed as `mult * 2^-shift` with
/// `mult` in [2^30, 2^31). Applied to i32 accumulators with exact integer
/// arithmetic, rounding half away from zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requant {
    pub mult: i32,
    pub shift: u32,
}

impl Requant {
    pub fn from_multiplier(m: f64) -> Self {
        assert!(
            m > 0.0 && m.is_finite(),
            "requant multiplier must be positive"
        );
        let mut f = m;
        let mut e = 0i32;
        while f >= 1.0 {
            f /= 2.0;
            e += 1;
        }
        while f < 0.5 {
            f *= 2.0;
            e -= 1;
        }
        let mut mult = (f * (1u64 << 31) as f64).round() as i64;
        if mult == 1 << 31 {
            mult >>= 1;
            e += 1;
        }
        // shift = 31 - e; multipliers above 2^31 are out of scope here
        let shift = (31 - e).clamp(0, 62) as u32;
        Self {
            mult: mult as i32,
            shift,
        }
    }

    /// The multiplier this decomposition actually encodes.
    pub fn effective(&self) -> f64 {
        self.mult as f64 * (-(self.shift as i32) as f64).exp2()
    }

    /// round_half_away(acc * mult / 2^shift) in pure integer arithmetic.
    pub fn apply(&self, acc: i32) -> i32 {
        let prod = acc as i64 * self.mult as i64;
        let shifted = if self.shift == 0 {
            prod
        } else {
            let half = 1i64 << (self.shift - 1);
            if prod >= 0 {
                (prod + half) >> self.shift
            } else {
                -((-prod + half) >> self.shift)
            }
        };
        shifted.clamp(i32::MIN as i64, i32::MAX as i64) as i32
    }
}

// ---------------------------------------------------------------------------
// Batch-norm folding

/// Absorbs every inference-mode batch norm into the preceding convolution's
/// kernel and bias. Errors when a batch norm does not directly follow a
/// conv/depthwise layer.
pub fn fold_batchnorm(
    graph: &Graph,
    weights: &WeightStore,
) -> Result<(Graph, WeightStore), QuantError> {
    let mut consumers: HashMap<&str, usize> = HashMap::new();
    for l in graph.layers() {
        for i in &l.inputs {
            *consumers.entry(i.as_str()).or_insert(0) += 1;
        }
    }

    // bn name -> (conv name, scale, shift) with scale = gamma/sqrt(var+eps)
    let mut folds: HashMap<String, String> = HashMap::new();
    let mut new_weights = weights.clone();
    for l in graph.layers() {
        let LayerKind::BatchNorm { epsilon } = l.kind else {
            continue;
        };
        let src_name = &l.inputs[0];
        let src = graph.layer(src_name).expect("validated graph");
        let (is_conv, channel_axis) = match src.kind {
            LayerKind::Conv2d { .. } => (true, 3),
            LayerKind::Depthwise { .. } => (true, 2),
            _ => (false, 0),
        };
        if !is_conv || consumers[src_name.as_str()] != 1 {
            return Err(QuantError::Structure(l.name.clone()));
        }
        let gamma = weights.require(&l.name, "gamma")?.data().to_vec();
        let beta = weights.require(&l.name, "beta")?.data().to_vec();
        let mean = weights.require(&l.name, "mean")?.data().to_vec();
        let variance = weights.require(&l.name, "variance")?.data().to_vec();
        let channels = gamma.len();
        let scale: Vec<f32> = gamma
            .iter()
            .zip(&variance)
            .map(|(&g, &v)| g / (v + epsilon).sqrt())
            .collect();

        let kernel = new_weights.require(src_name, "kernel")?.clone();
        let inner: usize = kernel.shape()[channel_axis + 1..].iter().product();
        let mut kdata = kernel.data().to_vec();
        for (i, k) in kdata.iter_mut().enumerate() {
            let c = (i / inner) % channels;
            *k *= scale[c];
        }
        let old_bias: Vec<f32> = new_weights
            .get(src_name, "bias")
            .map(|b| b.data().to_vec())
            .unwrap_or_else(|| vec![0.0; channels]);
        let new_bias: Vec<f32> = (0..channels)
            .map(|c| (old_bias[c] - mean[c]) * scale[c] + beta[c])
            .collect();
        new_weights.insert(
            src_name,
            "kernel",
            Tensor::new(kernel.shape().to_vec(), kdata).unwrap(),
        );
        new_weights.insert(
            src_name,
            "bias",
            Tensor::new(vec![channels], new_bias).unwrap(),
        );
        new_weights.remove_layer(&l.name);
        folds.insert(l.name.clone(), src_name.clone());
    }

    // rebuild the graph without bn nodes, rewiring consumers and enabling bias
    let mut new_layers = Vec::with_capacity(graph.layers().len());
    for l in graph.layers() {
        if folds.contains_key(&l.name) {
            continue;
        }
        let mut nl = l.clone();
        for input in nl.inputs.iter_mut() {
            if let Some(conv) = folds.get(input) {
                *input = conv.clone();
            }
        }
        match &mut nl.kind {
            LayerKind::Conv2d { bias, .. } | LayerKind::Depthwise { bias, .. }
                if folds.values().any(|c| c == &nl.name) =>
            {
                *bias = true;
            }
            _ => {}
        }
        new_layers.push(nl);
    }
    let folded = Graph::new(new_layers, graph.metadata.clone())?;
    Ok((folded, new_weights))
}

// ---------------------------------------------------------------------------
// i8 model

/// Quantized parameters of one conv/depthwise/dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantLayer {
    pub kernel: QuantizedTensor,
    /// Bias in i32 at scale input_scale * weight_scale[c].
    pub bias: Option<Vec<i32>>,
}

/// A fully quantized model: folded graph, i8 weights, and per-tensor
/// activation parameters for every layer output.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub graph: Graph,
    pub weights: BTreeMap<String, QuantLayer>,
    pub activations: BTreeMap<String, ActQuant>,
}

fn weight_axis(kind: &LayerKind) -> Option<usize> {
    match kind {
        LayerKind::Conv2d { .. } => Some(3),
        LayerKind::Depthwise { .. } => Some(2),
        LayerKind::Dense { .. } => Some(1),
        _ => None,
    }
}

/// Quantizes a folded f32 model to i8 using the calibration profile.
pub fn quantize_i8(
    graph: &Graph,
    weights: &WeightStore,
    profile: &CalibrationProfile,
) -> Result<QuantizedModel, QuantError> {
    for l in graph.layers() {
        if matches!(l.kind, LayerKind::BatchNorm { .. }) {
            return Err(QuantError::Unfolded(l.name.clone()));
        }
    }
    // every layer output participates in the integer dataflow
    let mut activations: BTreeMap<String, ActQuant> = BTreeMap::new();
    for l in graph.layers() {
        match l.kind {
            // identity nodes reuse their input's parameters exactly
            LayerKind::Dropout { .. } | LayerKind::Flatten => {
                let inherit = activations
                    .get(&l.inputs[0])
                    .copied()
                    .ok_or_else(|| QuantError::Coverage(l.inputs[0].clone()))?;
                activations.insert(l.name.clone(), inherit);
            }
            _ => {
                let r = profile
                    .ranges
                    .get(&l.name)
                    .ok_or_else(|| QuantError::Coverage(l.name.clone()))?;
                activations.insert(l.name.clone(), ActQuant::from_range(r.min, r.max));
            }
        }
    }

    let mut qweights = BTreeMap::new();
    for l in graph.layers() {
        let Some(axis) = weight_axis(&l.kind) else {
            continue;
        };
        let param = if matches!(l.kind, LayerKind::Dense { .. }) {
            "weight"
        } else {
            "kernel"
        };
        let kernel = weights.require(&l.name, param)?;
        for &x in kernel.data() {
            if !x.is_finite() {
                return Err(QuantError::NonFinite {
                    layer: l.name.clone(),
                    param: param.into(),
                });
            }
        }
        let qkernel = quantize_weights_per_channel(kernel, axis);
        let in_scale = activations[&l.inputs[0]].scale;
        let bias = match weights.get(&l.name, "bias") {
            Some(b) => {
                let q: Vec<i32> = b
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(c, &v)| {
                        let s = in_scale as f64 * qkernel.scale_for_channel(c) as f64;
                        round_half_away(v as f64 / s).clamp(i32::MIN as i64, i32::MAX as i64) as i32
                    })
                    .collect();
                Some(q)
            }
            None => None,
        };
        qweights.insert(
            l.name.clone(),
            QuantLayer {
                kernel: qkernel,
                bias,
            },
        );
    }

    Ok(QuantizedModel {
        graph: graph.clone(),
        weights: qweights,
        activations,
    })
}

// ---------------------------------------------------------------------------
// Quantized execution

struct QBuf {
    shape: Vec<usize>,
    codes: Vec<i8>,
}

impl QuantizedModel {
    /// Integer forward pass. The f32 input is quantized at the input layer;
    /// softmax dequantizes its logits and runs in f32, so the returned
    /// tensor holds class probabilities.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, QuantError> {
        let n = if input.rank() == 4 { input.batch() } else { 1 };
        if n > 1 && crate::runtime::threads() > 1 {
            let images = input.split_batch();
            let results = crate::runtime::par_map(images.len(), |i| self.forward_one(&images[i]));
            let mut outs = Vec::with_capacity(results.len());
            for r in results {
                outs.push(r?);
            }
            return Ok(Tensor::stack_batch(&outs));
        }
        self.forward_one(input)
    }

    fn forward_one(&self, input: &Tensor) -> Result<Tensor, QuantError> {
        let mut live: HashMap<String, QBuf> = HashMap::new();
        let mut float_out: Option<Tensor> = None;
        let output_name = self.graph.output_layer();

        for l in self.graph.layers() {
            let aq = self.activations[&l.name];
            let unsupported = |reason: &str| QuantError::Unsupported {
                layer: l.name.clone(),
                reason: reason.into(),
            };
            let buf = match &l.kind {
                LayerKind::Input {
                    height,
                    width,
                    channels,
                } => {
                    let s = input.shape();
                    if s.len() != 4 || s[1] != *height || s[2] != *width || s[3] != *channels {
                        return Err(unsupported("input shape mismatch"));
                    }
                    QBuf {
                        shape: s.to_vec(),
                        codes: input.data().iter().map(|&x| aq.quantize(x)).collect(),
                    }
                }
                LayerKind::Conv2d {
                    stride, padding, ..
                } => {
                    let src = &live[&l.inputs[0]];
                    let in_q = self.activations[&l.inputs[0]];
                    let ql = &self.weights[&l.name];
                    conv2d_i8(src, in_q, ql, aq, *stride, *padding, false)
                }
                LayerKind::Depthwise {
                    stride, padding, ..
                } => {
                    let src = &live[&l.inputs[0]];
                    let in_q = self.activations[&l.inputs[0]];
                    let ql = &self.weights[&l.name];
                    conv2d_i8(src, in_q, ql, aq, *stride, *padding, true)
                }
                LayerKind::Dense { .. } => {
                    let src = &live[&l.inputs[0]];
                    let in_q = self.activations[&l.inputs[0]];
                    let ql = &self.weights[&l.name];
                    dense_i8(src, in_q, ql, aq)
                }
                LayerKind::Activation { activation } => {
                    let src = &live[&l.inputs[0]];
                    let in_q = self.activations[&l.inputs[0]];
                    match activation {
                        ActivationKind::Softmax => {
                            if l.name != output_name {
                                return Err(unsupported(
                                    "softmax is only supported as the output layer",
                                ));
                            }
                            let logits: Vec<f32> =
                                src.codes.iter().map(|&q| in_q.dequantize(q)).collect();
                            let t = Tensor::new(src.shape.clone(), logits).unwrap();
                            float_out = Some(crate::ops::activation(&t, ActivationKind::Softmax));
                            continue;
                        }
                        kind => relu_i8(src, in_q, aq, *kind),
                    }
                }
                LayerKind::Pool {
                    pool,
                    window,
                    stride,
                } => {
                    let src = &live[&l.inputs[0]];
                    let in_q = self.activations[&l.inputs[0]];
                    match pool {
                        PoolKind::GlobalAvg => global_avg_i8(src, in_q, aq),
                        PoolKind::Max => max_pool_i8(src, in_q, aq, *window, *stride),
                    }
                }
                LayerKind::Add => {
                    let a = &live[&l.inputs[0]];
                    let b = &live[&l.inputs[1]];
                    add_i8(
                        a,
                        self.activations[&l.inputs[0]],
                        b,
                        self.activations[&l.inputs[1]],
                        aq,
                    )
                }
                LayerKind::Dropout { .. } => {
                    let src = &live[&l.inputs[0]];
                    QBuf {
                        shape: src.shape.clone(),
                        codes: src.codes.clone(),
                    }
                }
                LayerKind::Flatten => {
                    let src = &live[&l.inputs[0]];
                    let n = src.shape[0];
                    let rest: usize = src.shape[1..].iter().product();
                    QBuf {
                        shape: vec![n, rest],
                        codes: src.codes.clone(),
                    }
                }
                LayerKind::BatchNorm { .. } => return Err(QuantError::Unfolded(l.name.clone())),
            };
            live.insert(l.name.clone(), buf);
        }

        if let Some(out) = float_out {
            return Ok(out);
        }
        // graphs without a softmax sink dequantize the final codes
        let sink = &live[output_name];
        let aq = self.activations[output_name];
        let data: Vec<f32> = sink.codes.iter().map(|&q| aq.dequantize(q)).collect();
        Ok(Tensor::new(sink.shape.clone(), data).unwrap())
    }
}

// ---------------------------------------------------------------------------
// Size report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub path: String,
    pub dtype: String,
    pub bytes: u64,
    pub ratio_vs_f32: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub architecture: String,
    pub rows: Vec<SizeRow>,
}

/// Exact on-disk byte counts of the same architecture serialized at several
/// dtypes, with ratios against the f32 container.
pub fn size_report(paths: &[std::path::PathBuf]) -> Result<SizeReport, QuantError> {
    if paths.len() < 2 {
        return Err(QuantError::Usage(
            "size report needs at least two model files".into(),
        ));
    }
    let mut entries = Vec::new();
    let mut architecture: Option<String> = None;
    for path in paths {
        let model = crate::format::load_model(path).map_err(Box::new)?;
        let arch = model.graph().metadata.architecture.clone();
        match &architecture {
            None => architecture = Some(arch),
            Some(a) if *a != arch => {
                return Err(QuantError::Usage(format!(
                    "mismatched architectures: {a} vs {arch}"
                )))
            }
            _ => {}
        }
        let bytes = std::fs::metadata(path)
            .map_err(|e| QuantError::Usage(format!("cannot stat {}: {e}", path.display())))?
            .len();
        entries.push((path.display().to_string(), model.dtype(), bytes));
    }
    let f32_bytes = entries
        .iter()
        .find(|(_, d, _)| *d == crate::format::DType::F32)
        .map(|(_, _, b)| *b)
        .ok_or_else(|| QuantError::Usage("size report needs an f32 model as baseline".into()))?;
    let rows = entries
        .into_iter()
        .map(|(path, dtype, bytes)| SizeRow {
            path,
            dtype: dtype.name().to_string(),
            bytes,
            ratio_vs_f32: bytes as f64 / f32_bytes as f64,
        })
        .collect();
    Ok(SizeReport {
        architecture: architecture.unwrap(),
        rows,
    })
}

fn requant_to(out_q: ActQuant, r: Requant, acc: i32) -> i8 {
    (out_q.zero_point + r.apply(acc)).clamp(-128, 127) as i8
}

fn conv2d_i8(
    src: &QBuf,
    in_q: ActQuant,
    ql: &QuantLayer,
    out_q: ActQuant,
    stride: (usize, usize),
    padding: Padding,
    depthwise: bool,
) -> QBuf {
    let [n, h, w, cin] = [src.shape[0], src.shape[1], src.shape[2], src.shape[3]];
    let k = &ql.kernel;
    let (kh, kw) = (k.shape[0], k.shape[1]);
    let cout = if depthwise { cin } else { k.shape[3] };
    let oh = conv_out_dim(h, kh, stride.0, padding).expect("validated graph");
    let ow = conv_out_dim(w, kw, stride.1, padding).expect("validated graph");
    let (pad_top, pad_left) = match padding {
        Padding::Same => (
            same_padding(h, kh, stride.0).0,
            same_padding(w, kw, stride.1).0,
        ),
        Padding::Valid => (0, 0),
    };
    let zin = in_q.zero_point;

    let requants: Vec<Requant> = (0..cout)
        .map(|c| {
            let m = in_q.scale as f64 * k.scale_for_channel(c) as f64 / out_q.scale as f64;
            Requant::from_multiplier(m)
        })
        .collect();

    let mut out = vec![0i8; n * oh * ow * cout];
    let img_len = h * w * cin;
    let out_len = oh * ow * cout;

    if depthwise {
        // per-channel taps; zero-point correction per channel
        let mut wsum = vec![0i32; cin];
        for (i, &q) in k.data.iter().enumerate() {
            wsum[i % cin] += q as i32;
        }
        for img in 0..n {
            let codes = &src.codes[img * img_len..(img + 1) * img_len];
            let dst = &mut out[img * out_len..(img + 1) * out_len];
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (oy * ow + ox) * cin;
                    for c in 0..cin {
                        let mut acc: i32 = 0;
                        for ky in 0..kh {
                            let iy = (oy * stride.0 + ky) as isize - pad_top as isize;
                            for kx in 0..kw {
                                let ix = (ox * stride.1 + kx) as isize - pad_left as isize;
                                let q_in =
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        zin
                                    } else {
                                        codes[(iy as usize * w + ix as usize) * cin + c] as i32
                                    };
                                let q_w = k.data[(ky * kw + kx) * cin + c] as i32;
                                acc += q_in * q_w;
                            }
                        }
                        acc -= zin * wsum[c];
                        if let Some(b) = &ql.bias {
                            acc += b[c];
                        }
                        dst[base + c] = requant_to(out_q, requants[c], acc);
                    }
                }
            }
        }
        return QBuf {
            shape: vec![n, oh, ow, cout],
            codes: out,
        };
    }

    let patch = kh * kw * cin;
    let mut wsum = vec![0i32; cout];
    for (i, &q) in k.data.iter().enumerate() {
        wsum[i % cout] += q as i32;
    }
    let mut col = vec![0i8; oh * ow * patch];
    for img in 0..n {
        let codes = &src.codes[img * img_len..(img + 1) * img_len];
        // im2col with zero-point fill so padded taps contribute zero
        for oy in 0..oh {
            for ox in 0..ow {
                let dst0 = (oy * ow + ox) * patch;
                for ky in 0..kh {
                    let iy = (oy * stride.0 + ky) as isize - pad_top as isize;
                    let row = dst0 + ky * kw * cin;
                    if iy < 0 || iy >= h as isize {
                        col[row..row + kw * cin].fill(zin as i8);
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride.1 + kx) as isize - pad_left as isize;
                        let dst = row + kx * cin;
                        if ix < 0 || ix >= w as isize {
                            col[dst..dst + cin].fill(zin as i8);
                        } else {
                            let s = (iy as usize * w + ix as usize) * cin;
                            col[dst..dst + cin].copy_from_slice(&codes[s..s + cin]);
                        }
                    }
                }
            }
        }
        let dst = &mut out[img * out_len..(img + 1) * out_len];
        for (m, row) in col.chunks_exact(patch).enumerate() {
            for oc in 0..cout {
                let mut acc: i32 = 0;
                for (p, &q_in) in row.iter().enumerate() {
                    acc += q_in as i32 * k.data[p * cout + oc] as i32;
                }
                acc -= zin * wsum[oc];
                if let Some(b) = &ql.bias {
                    acc += b[oc];
                }
                dst[m * cout + oc] = requant_to(out_q, requants[oc], acc);
            }
        }
    }
    QBuf {
        shape: vec![n, oh, ow, cout],
        codes: out,
    }
}

fn dense_i8(src: &QBuf, in_q: ActQuant, ql: &QuantLayer, out_q: ActQuant) -> QBuf {
    let (n, d_in) = (src.shape[0], src.shape[1]);
    let d_out = ql.kernel.shape[1];
    let zin = in_q.zero_point;
    let mut wsum = vec![0i32; d_out];
    for (i, &q) in ql.kernel.data.iter().enumerate() {
        wsum[i % d_out] += q as i32;
    }
    let requants: Vec<Requant> = (0..d_out)
        .map(|c| {
            let m = in_q.scale as f64 * ql.kernel.scale_for_channel(c) as f64 / out_q.scale as f64;
            Requant::from_multiplier(m)
        })
        .collect();
    let mut out = vec![0i8; n * d_out];
    for row in 0..n {
        let x = &src.codes[row * d_in..(row + 1) * d_in];
        for oc in 0..d_out {
            let mut acc: i32 = 0;
            for (i, &q) in x.iter().enumerate() {
                acc += q as i32 * ql.kernel.data[i * d_out + oc] as i32;
            }
            acc -= zin * wsum[oc];
            if let Some(b) = &ql.bias {
                acc += b[oc];
            }
            out[row * d_out + oc] = requant_to(out_q, requants[oc], acc);
        }
    }
    QBuf {
        shape: vec![n, d_out],
        codes: out,
    }
}

fn relu_i8(src: &QBuf, in_q: ActQuant, out_q: ActQuant, kind: ActivationKind) -> QBuf {
    let r = Requant::from_multiplier(in_q.scale as f64 / out_q.scale as f64);
    let cap = match kind {
        ActivationKind::Relu6 => round_half_away(6.0 / out_q.scale as f64).clamp(0, 255) as i32,
        _ => i32::MAX,
    };
    let codes = src
        .codes
        .iter()
        .map(|&q| {
            let rescaled = r.apply(q as i32 - in_q.zero_point).max(0).min(cap);
            (out_q.zero_point + rescaled).clamp(-128, 127) as i8
        })
        .collect();
    QBuf {
        shape: src.shape.clone(),
        codes,
    }
}

fn global_avg_i8(src: &QBuf, in_q: ActQuant, out_q: ActQuant) -> QBuf {
    let [n, h, w, c] = [src.shape[0], src.shape[1], src.shape[2], src.shape[3]];
    let hw = (h * w) as i32;
    let r = Requant::from_multiplier(in_q.scale as f64 / (out_q.scale as f64 * hw as f64));
    let mut out = vec![0i8; n * c];
    for img in 0..n {
        let codes = &src.codes[img * h * w * c..(img + 1) * h * w * c];
        for ch in 0..c {
            let mut acc: i32 = 0;
            for row in codes.chunks_exact(c) {
                acc += row[ch] as i32;
            }
            acc -= hw * in_q.zero_point;
            out[img * c + ch] = requant_to(out_q, r, acc);
        }
    }
    QBuf {
        shape: vec![n, c],
        codes: out,
    }
}

fn max_pool_i8(
    src: &QBuf,
    in_q: ActQuant,
    out_q: ActQuant,
    window: (usize, usize),
    stride: (usize, usize),
) -> QBuf {
    let [n, h, w, c] = [src.shape[0], src.shape[1], src.shape[2], src.shape[3]];
    let oh = (h - window.0) / stride.0 + 1;
    let ow = (w - window.1) / stride.1 + 1;
    let r = Requant::from_multiplier(in_q.scale as f64 / out_q.scale as f64);
    let mut out = vec![0i8; n * oh * ow * c];
    for img in 0..n {
        let codes = &src.codes[img * h * w * c..(img + 1) * h * w * c];
        let dst = &mut out[img * oh * ow * c..(img + 1) * oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut m = i8::MIN;
                    for ky in 0..window.0 {
                        for kx in 0..window.1 {
                            let q = codes[((oy * stride.0 + ky) * w + ox * stride.1 + kx) * c + ch];
                            m = m.max(q);
                        }
                    }
                    dst[(oy * ow + ox) * c + ch] = requant_to(out_q, r, m as i32 - in_q.zero_point);
                }
            }
        }
    }
    QBuf {
        shape: vec![n, oh, ow, c],
        codes: out,
    }
}

fn add_i8(a: &QBuf, a_q: ActQuant, b: &QBuf, b_q: ActQuant, out_q: ActQuant) -> QBuf {
    let ra = Requant::from_multiplier(a_q.scale as f64 / out_q.scale as f64);
    let rb = Requant::from_multiplier(b_q.scale as f64 / out_q.scale as f64);
    let codes = a
        .codes
        .iter()
        .zip(&b.codes)
        .map(|(&qa, &qb)| {
            let v = ra.apply(qa as i32 - a_q.zero_point) + rb.apply(qb as i32 - b_q.zero_point);
            (out_q.zero_point + v).clamp(-128, 127) as i8
        })
        .collect();
    QBuf {
        shape: a.shape.clone(),
        codes,
    }
}
