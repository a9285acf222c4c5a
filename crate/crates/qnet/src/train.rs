//! Transfer-learning fine-tuning: cross-entropy loss, backpropagation
//! through a trailing set of trainable layers, Adam and SGD with step
//! decay, and the epoch loop with train/validation monitoring.
//!
//! Freezing counts conv/depthwise/dense/batch-norm/dropout/flatten nodes as
//! layers; activation, pool and add nodes are glue and do not count. Batch
//! norm stays frozen in every stage (inference statistics only), though
//! gradients still flow through it.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{augment, preprocess, AugmentOps, LoadedDataset, PreprocessScheme};
use crate::exec::{dropout_rng, execute, ExecMode};
use crate::graph::{Graph, GraphError, LayerKind, WeightStore};
use crate::runtime;
use crate::tensor::{ActivationKind, Padding, PoolKind, Tensor};

/// Images per deterministic gradient-accumulation chunk. Chunk boundaries
/// are fixed so summation order does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset has {dataset} classes but the graph head has {graph}")]
    ClassMismatch { dataset: usize, graph: usize },
    #[error("non-finite gradient for {layer}/{param}; aborting epoch")]
    NonFiniteGradient { layer: String, param: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decay {
    None,
    Step { factor: f32, every_n_epochs: usize },
}

fn default_batch() -> usize {
    64
}

fn default_augment() -> AugmentSelection {
    AugmentSelection {
        hflip: true,
        random_crop: true,
        random_zoom: true,
        random_rotate: true,
    }
}

/// Serializable mirror of [`AugmentOps`] for config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentSelection {
    pub hflip: bool,
    pub random_crop: bool,
    pub random_zoom: bool,
    pub random_rotate: bool,
}

impl From<AugmentSelection> for AugmentOps {
    fn from(s: AugmentSelection) -> Self {
        AugmentOps {
            hflip: s.hflip,
            random_crop: s.random_crop,
            random_zoom: s.random_zoom,
            random_rotate: s.random_rotate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub optimizer: OptimizerKind,
    pub initial_lr: f32,
    pub decay: Decay,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Trailing counted layers with gradients enabled.
    pub trainable_tail: usize,
    pub seed: u64,
    #[serde(default = "default_augment")]
    pub augment: AugmentSelection,
}

impl Default for TrainingConfig {
    /// Defaults mirror the fine-tuning recipe: Adam at 1e-4 with step decay
    /// (x0.5 every 10 epochs), 30 epochs, batch 64, head-only tail.
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            initial_lr: 1e-4,
            decay: Decay::Step {
                factor: 0.5,
                every_n_epochs: 10,
            },
            epochs: 30,
            batch_size: 64,
            trainable_tail: 2,
            seed: 0,
            augment: default_augment(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.initial_lr <= 0.0
            || self.epochs < 1
            || self.batch_size < 1
            || self.trainable_tail < 1
        {
            return Err(TrainError::Graph(GraphError::Config(format!(
                "invalid training config: lr {} epochs {} batch {} tail {}",
                self.initial_lr, self.epochs, self.batch_size, self.trainable_tail
            ))));
        }
        Ok(())
    }
}

/// Learning rate for a (0-based) epoch under the config's schedule.
pub fn lr_schedule(config: &TrainingConfig, epoch: usize) -> f32 {
    match config.decay {
        Decay::None => config.initial_lr,
        Decay::Step {
            factor,
            every_n_epochs,
        } => config.initial_lr * factor.powi((epoch / every_n_epochs.max(1)) as i32),
    }
}

/// Mean over the batch of -log(p[label]), with probabilities clamped to
/// 1e-12.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f32, TrainError> {
    let classes = *probs.shape().last().unwrap();
    let n = probs.shape()[0];
    assert_eq!(n, labels.len(), "one label per row");
    let mut total = 0.0f32;
    for (row, &label) in probs.data().chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(TrainError::LabelOutOfRange { label, classes });
        }
        total += -(row[label].max(1e-12).ln());
    }
    Ok(total / n as f32)
}

// ---------------------------------------------------------------------------
// Trainable-tail selection

#[derive(Debug, Clone)]
pub struct TrainablePlan {
    /// Layers whose parameters receive gradients.
    pub param_layers: BTreeSet<String>,
    /// Layers that need an output gradient during the backward sweep.
    active: HashSet<String>,
    /// Layer outputs the forward tape must keep for backward.
    retain: HashSet<String>,
    pub effective_tail: usize,
    pub clamped: bool,
}

/// Resolves a trailing-layer count into the set of trainable layers.
pub fn select_trainable(graph: &Graph, trainable_tail: usize) -> TrainablePlan {
    let counted: Vec<&str> = graph
        .layers()
        .iter()
        .filter(|l| l.kind.counts_as_layer())
        .map(|l| l.name.as_str())
        .collect();
    let clamped = trainable_tail > counted.len();
    let effective_tail = trainable_tail.min(counted.len());
    let tail: HashSet<&str> = counted[counted.len() - effective_tail..]
        .iter()
        .copied()
        .collect();

    let mut param_layers = BTreeSet::new();
    for l in graph.layers() {
        // batch norm stays frozen: inference statistics only
        if tail.contains(l.name.as_str())
            && l.kind.parameterized()
            && !matches!(l.kind, LayerKind::BatchNorm { .. })
        {
            param_layers.insert(l.name.clone());
        }
    }

    // active = trainable layers plus everything downstream of one
    let mut active: HashSet<String> = HashSet::new();
    for l in graph.layers() {
        let from_inputs = l.inputs.iter().any(|i| active.contains(i));
        if from_inputs || param_layers.contains(&l.name) {
            active.insert(l.name.clone());
        }
    }

    // retain what each active layer's backward reads
    let mut retain: HashSet<String> = HashSet::new();
    for l in graph.layers() {
        if !active.contains(&l.name) {
            continue;
        }
        match l.kind {
            LayerKind::Conv2d { .. }
            | LayerKind::Depthwise { .. }
            | LayerKind::Dense { .. }
            | LayerKind::Pool { .. } => {
                retain.insert(l.inputs[0].clone());
            }
            LayerKind::Activation { .. } => {
                retain.insert(l.name.clone());
            }
            _ => {}
        }
    }

    TrainablePlan {
        param_layers,
        active,
        retain,
        effective_tail,
        clamped,
    }
}

// ---------------------------------------------------------------------------
// Backward kernels

fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for (c, &v) in a[r * cols..(r + 1) * cols].iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}

fn gemm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, n: usize, k: usize) {
    // c[m,n] += a[m,k] . b[n,k]^T, routed through the tiled kernel
    let bt = transpose(b, n, k);
    crate::ops::gemm_acc(a, &bt, c, m, k, n);
}

fn gemm_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    // c[k,n] += a[m,k]^T . b[m,n]
    let at = transpose(a, m, k);
    crate::ops::gemm_acc(&at, b, c, k, m, n);
}

fn im2col_single(
    img: &Tensor,
    kernel_hw: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> (Vec<f32>, (usize, usize)) {
    let [_, h, w, c] = [
        img.shape()[0],
        img.shape()[1],
        img.shape()[2],
        img.shape()[3],
    ];
    let (kh, kw) = kernel_hw;
    let oh = crate::tensor::conv_out_dim(h, kh, stride.0, padding).unwrap();
    let ow = crate::tensor::conv_out_dim(w, kw, stride.1, padding).unwrap();
    let (pad_top, pad_left) = match padding {
        Padding::Same => (
            crate::tensor::same_padding(h, kh, stride.0).0,
            crate::tensor::same_padding(w, kw, stride.1).0,
        ),
        Padding::Valid => (0, 0),
    };
    let patch = kh * kw * c;
    let mut col = vec![0.0f32; oh * ow * patch];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst0 = (oy * ow + ox) * patch;
            for ky in 0..kh {
                let iy = (oy * stride.0 + ky) as isize - pad_top as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride.1 + kx) as isize - pad_left as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = dst0 + (ky * kw + kx) * c;
                    col[dst..dst + c].copy_from_slice(&img.data()[src..src + c]);
                }
            }
        }
    }
    (col, (oh, ow))
}

struct LayerGrads {
    input_grads: Vec<(String, Tensor)>,
    param_grads: Vec<(&'static str, Tensor)>,
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    l: &crate::graph::LayerSpec,
    weights: &WeightStore,
    tape: &HashMap<String, Tensor>,
    grad_out: &Tensor,
    want_params: bool,
    want_input: impl Fn(&str) -> bool,
    dropout_seed: u64,
    image_index: usize,
) -> Result<LayerGrads, TrainError> {
    let mut out = LayerGrads {
        input_grads: Vec::new(),
        param_grads: Vec::new(),
    };
    match &l.kind {
        LayerKind::Input { .. } => {}
        LayerKind::Dense { bias, .. } => {
            let x = &tape[&l.inputs[0]];
            let w = weights.require(&l.name, "weight")?;
            let (n, d_in) = (x.shape()[0], x.shape()[1]);
            let d_out = w.shape()[1];
            if want_params {
                let mut dw = Tensor::zeros(vec![d_in, d_out]);
                gemm_tn(x.data(), grad_out.data(), dw.data_mut(), n, d_in, d_out);
                out.param_grads.push(("weight", dw));
                if *bias {
                    let mut db = vec![0.0f32; d_out];
                    for row in grad_out.data().chunks_exact(d_out) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    out.param_grads
                        .push(("bias", Tensor::new(vec![d_out], db).unwrap()));
                }
            }
            if want_input(&l.inputs[0]) {
                let mut dx = Tensor::zeros(vec![n, d_in]);
                gemm_nt(grad_out.data(), w.data(), dx.data_mut(), n, d_in, d_out);
                out.input_grads.push((l.inputs[0].clone(), dx));
            }
        }
        LayerKind::Conv2d {
            kernel,
            stride,
            padding,
            bias,
            ..
        } => {
            let x = &tape[&l.inputs[0]];
            let k = weights.require(&l.name, "kernel")?;
            let cout = k.shape()[3];
            let (col, (oh, ow)) = im2col_single(x, *kernel, *stride, *padding);
            let m = oh * ow;
            let patch = k.shape()[0] * k.shape()[1] * k.shape()[2];
            if want_params {
                let mut dk = Tensor::zeros(k.shape().to_vec());
                gemm_tn(&col, grad_out.data(), dk.data_mut(), m, patch, cout);
                out.param_grads.push(("kernel", dk));
                if *bias {
                    let mut db = vec![0.0f32; cout];
                    for row in grad_out.data().chunks_exact(cout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    out.param_grads
                        .push(("bias", Tensor::new(vec![cout], db).unwrap()));
                }
            }
            if want_input(&l.inputs[0]) {
                let mut dcol = vec![0.0f32; m * patch];
                gemm_nt(grad_out.data(), k.data(), &mut dcol, m, patch, cout);
                // col2im: scatter patch gradients back onto the input
                let [_, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                let (kh, kw) = *kernel;
                let (pad_top, pad_left) = match padding {
                    Padding::Same => (
                        crate::tensor::same_padding(h, kh, stride.0).0,
                        crate::tensor::same_padding(w, kw, stride.1).0,
                    ),
                    Padding::Valid => (0, 0),
                };
                let mut dx = Tensor::zeros(x.shape().to_vec());
                for oy in 0..oh {
                    for ox in 0..ow {
                        let src0 = (oy * ow + ox) * patch;
                        for ky in 0..kh {
                            let iy = (oy * stride.0 + ky) as isize - pad_top as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride.1 + kx) as isize - pad_left as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let dst = (iy as usize * w + ix as usize) * c;
                                let src = src0 + (ky * kw + kx) * c;
                                let dst_row = &mut dx.data_mut()[dst..dst + c];
                                for (d, &g) in dst_row.iter_mut().zip(&dcol[src..src + c]) {
                                    *d += g;
                                }
                            }
                        }
                    }
                }
                out.input_grads.push((l.inputs[0].clone(), dx));
            }
        }
        LayerKind::Depthwise {
            kernel,
            stride,
            padding,
            bias,
        } => {
            let x = &tape[&l.inputs[0]];
            let k = weights.require(&l.name, "kernel")?;
            let [_, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
            let (kh, kw) = *kernel;
            let oh = grad_out.shape()[1];
            let ow = grad_out.shape()[2];
            let (pad_top, pad_left) = match padding {
                Padding::Same => (
                    crate::tensor::same_padding(h, kh, stride.0).0,
                    crate::tensor::same_padding(w, kw, stride.1).0,
                ),
                Padding::Valid => (0, 0),
            };
            let mut dk = Tensor::zeros(k.shape().to_vec());
            let mut dx = Tensor::zeros(x.shape().to_vec());
            let need_dx = want_input(&l.inputs[0]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let g_row = &grad_out.data()[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                    for ky in 0..kh {
                        let iy = (oy * stride.0 + ky) as isize - pad_top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride.1 + kx) as isize - pad_left as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = (iy as usize * w + ix as usize) * c;
                            let tap = (ky * kw + kx) * c;
                            if want_params {
                                let x_row = &x.data()[src..src + c];
                                let dk_row = &mut dk.data_mut()[tap..tap + c];
                                for ((d, &g), &xv) in dk_row.iter_mut().zip(g_row).zip(x_row) {
                                    *d += g * xv;
                                }
                            }
                            if need_dx {
                                let k_row = &k.data()[tap..tap + c];
                                let dx_row = &mut dx.data_mut()[src..src + c];
                                for ((d, &g), &kv) in dx_row.iter_mut().zip(g_row).zip(k_row) {
                                    *d += g * kv;
                                }
                            }
                        }
                    }
                }
            }
            if want_params {
                out.param_grads.push(("kernel", dk));
                if *bias {
                    let mut db = vec![0.0f32; c];
                    for row in grad_out.data().chunks_exact(c) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    out.param_grads
                        .push(("bias", Tensor::new(vec![c], db).unwrap()));
                }
            }
            if need_dx {
                out.input_grads.push((l.inputs[0].clone(), dx));
            }
        }
        LayerKind::BatchNorm { epsilon } => {
            if want_input(&l.inputs[0]) {
                let gamma = weights.require(&l.name, "gamma")?.data();
                let variance = weights.require(&l.name, "variance")?.data();
                let scale: Vec<f32> = gamma
                    .iter()
                    .zip(variance)
                    .map(|(&g, &v)| g / (v + epsilon).sqrt())
                    .collect();
                let c = scale.len();
                let mut dx = grad_out.clone();
                for row in dx.data_mut().chunks_exact_mut(c) {
                    for (d, &s) in row.iter_mut().zip(&scale) {
                        *d *= s;
                    }
                }
                out.input_grads.push((l.inputs[0].clone(), dx));
            }
        }
        LayerKind::Activation { activation } => {
            if want_input(&l.inputs[0]) {
                let y = &tape[&l.name];
                let dx = match activation {
                    ActivationKind::Relu => {
                        let mut dx = grad_out.clone();
                        for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                            if yv <= 0.0 {
                                *d = 0.0;
                            }
                        }
                        dx
                    }
                    ActivationKind::Relu6 => {
                        let mut dx = grad_out.clone();
                        for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                            if yv <= 0.0 || yv >= 6.0 {
                                *d = 0.0;
                            }
                        }
                        dx
                    }
                    ActivationKind::Softmax => {
                        let c = *y.shape().last().unwrap();
                        let mut dx = grad_out.clone();
                        for (dx_row, y_row) in dx
                            .data_mut()
                            .chunks_exact_mut(c)
                            .zip(y.data().chunks_exact(c))
                        {
                            let dot: f32 = dx_row.iter().zip(y_row).map(|(&g, &p)| g * p).sum();
                            for (d, &p) in dx_row.iter_mut().zip(y_row) {
                                *d = p * (*d - dot);
                            }
                        }
                        dx
                    }
                };
                out.input_grads.push((l.inputs[0].clone(), dx));
            }
        }
        LayerKind::Pool {
            pool,
            window,
            stride,
        } => {
            if want_input(&l.inputs[0]) {
                let x = &tape[&l.inputs[0]];
                let [_, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                let mut dx = Tensor::zeros(x.shape().to_vec());
                match pool {
                    PoolKind::GlobalAvg => {
                        let inv = 1.0 / (h * w) as f32;
                        let g = grad_out.data();
                        for row in dx.data_mut().chunks_exact_mut(c) {
                            for (d, &gv) in row.iter_mut().zip(&g[..c]) {
                                *d = gv * inv;
                            }
                        }
                    }
                    PoolKind::Max => {
                        let oh = grad_out.shape()[1];
                        let ow = grad_out.shape()[2];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                for ch in 0..c {
                                    // first maximum in scan order receives the gradient
                                    let mut best = f32::NEG_INFINITY;
                                    let mut best_idx = 0;
                                    for ky in 0..window.0 {
                                        for kx in 0..window.1 {
                                            let idx =
                                                ((oy * stride.0 + ky) * w + ox * stride.1 + kx) * c
                                                    + ch;
                                            if x.data()[idx] > best {
                                                best = x.data()[idx];
                                                best_idx = idx;
                                            }
                                        }
                                    }
                                    dx.data_mut()[best_idx] +=
                                        grad_out.data()[(oy * ow + ox) * c + ch];
                                }
                            }
                        }
                    }
                }
                out.input_grads.push((l.inputs[0].clone(), dx));
            }
        }
        LayerKind::Add => {
            for input in &l.inputs {
                if want_input(input) {
                    out.input_grads.push((input.clone(), grad_out.clone()));
                }
            }
        }
        LayerKind::Dropout { rate } => {
            if want_input(&l.inputs[0]) {
                let mut dx = grad_out.clone();
                if *rate > 0.0 {
                    // replay the forward mask stream
                    use rand::Rng;
                    let mut rng = dropout_rng(dropout_seed, &l.name, image_index);
                    let scale = 1.0 / (1.0 - rate);
                    for d in dx.data_mut().iter_mut() {
                        if rng.random::<f32>() < *rate {
                            *d = 0.0;
                        } else {
                            *d *= scale;
                        }
                    }
                }
                out.input_grads.push((l.inputs[0].clone(), dx));
            }
        }
        LayerKind::Flatten => {
            if want_input(&l.inputs[0]) {
                let shape = tape
                    .get(&l.inputs[0])
                    .map(|t| t.shape().to_vec())
                    .unwrap_or_else(|| grad_out.shape().to_vec());
                out.input_grads.push((
                    l.inputs[0].clone(),
                    grad_out.clone().reshape(shape).unwrap(),
                ));
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Per-image forward + backward

struct ImageResult {
    grads: WeightStore,
    loss: f32,
    correct: bool,
}

fn backward_image(
    graph: &Graph,
    weights: &WeightStore,
    plan: &TrainablePlan,
    input: &Tensor,
    label: usize,
    dropout_seed: u64,
    image_index: usize,
) -> Result<ImageResult, TrainError> {
    let mut retain = plan.retain.clone();
    // flatten backward reshapes to its input's shape
    for l in graph.layers() {
        if plan.active.contains(&l.name) && matches!(l.kind, LayerKind::Flatten) {
            retain.insert(l.inputs[0].clone());
        }
    }
    let (probs, tape) = execute(
        graph,
        weights,
        input,
        ExecMode::Train { seed: dropout_seed },
        image_index,
        None,
        Some(&retain),
    )?;
    let classes = *probs.shape().last().unwrap();
    if label >= classes {
        return Err(TrainError::LabelOutOfRange { label, classes });
    }
    let p = probs.data()[label].max(1e-12);
    let loss = -p.ln();
    let argmax = probs
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0);

    // seed the sweep with d(-log p_label)/d(probs)
    let mut seed_grad = Tensor::zeros(probs.shape().to_vec());
    seed_grad.data_mut()[label] = -1.0 / p;

    let output_name = graph.output_layer().to_string();
    let mut out_grads: HashMap<String, Tensor> = HashMap::new();
    out_grads.insert(output_name, seed_grad);

    let mut grads = WeightStore::new();
    for l in graph.layers().iter().rev() {
        if !plan.active.contains(&l.name) {
            continue;
        }
        let Some(grad_out) = out_grads.remove(&l.name) else {
            continue;
        };
        let want_params = plan.param_layers.contains(&l.name);
        let lg = layer_backward(
            l,
            weights,
            &tape,
            &grad_out,
            want_params,
            |name| plan.active.contains(name),
            dropout_seed,
            image_index,
        )?;
        for (param, g) in lg.param_grads {
            grads.insert(&l.name, param, g);
        }
        for (input_name, g) in lg.input_grads {
            match out_grads.get_mut(&input_name) {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    out_grads.insert(input_name, g);
                }
            }
        }
    }
    Ok(ImageResult {
        grads,
        loss,
        correct: argmax == label,
    })
}

fn add_scaled(acc: &mut WeightStore, add: &WeightStore, scale: f32) {
    for (layer, params) in add.iter() {
        for (param, g) in params {
            match acc.get_mut(layer, param) {
                Some(t) => {
                    for (a, &b) in t.data_mut().iter_mut().zip(g.data()) {
                        *a += b * scale;
                    }
                }
                None => {
                    let mut t = g.clone();
                    if scale != 1.0 {
                        for v in t.data_mut().iter_mut() {
                            *v *= scale;
                        }
                    }
                    acc.insert(layer, param, t);
                }
            }
        }
    }
}

/// Batch statistics plus mean-scaled gradients for the trainable layers.
pub struct BatchResult {
    pub grads: WeightStore,
    pub loss: f32,
    pub correct: usize,
}

/// Runs forward+backward over per-image tensors, returning gradients of the
/// mean cross-entropy. Images process in fixed chunks so results do not
/// depend on the thread count; frozen layers receive no gradient entries.
pub fn forward_backward_batch(
    graph: &Graph,
    weights: &WeightStore,
    plan: &TrainablePlan,
    inputs: &[Tensor],
    labels: &[usize],
    dropout_seed: u64,
) -> Result<BatchResult, TrainError> {
    assert_eq!(inputs.len(), labels.len());
    let n = inputs.len();
    let chunks = n.div_ceil(GRAD_CHUNK);
    let partials = runtime::par_map(
        chunks,
        |ci| -> Result<(WeightStore, f32, usize), TrainError> {
            let lo = ci * GRAD_CHUNK;
            let hi = ((ci + 1) * GRAD_CHUNK).min(n);
            let mut acc = WeightStore::new();
            let mut loss = 0.0f32;
            let mut correct = 0usize;
            for i in lo..hi {
                let r =
                    backward_image(graph, weights, plan, &inputs[i], labels[i], dropout_seed, i)?;
                add_scaled(&mut acc, &r.grads, 1.0);
                loss += r.loss;
                correct += r.correct as usize;
            }
            Ok((acc, loss, correct))
        },
    );

    let mut grads = WeightStore::new();
    let mut loss = 0.0f32;
    let mut correct = 0usize;
    for p in partials {
        let (acc, l, c) = p?;
        add_scaled(&mut grads, &acc, 1.0);
        loss += l;
        correct += c;
    }
    let inv = 1.0 / n as f32;
    for (_, params) in grads.iter_mut() {
        for t in params.values_mut() {
            for v in t.data_mut().iter_mut() {
                *v *= inv;
            }
        }
    }
    Ok(BatchResult {
        grads,
        loss: loss * inv,
        correct,
    })
}

// ---------------------------------------------------------------------------
// Optimizers

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    /// First/second moment estimates, shaped like the trainable parameters.
    moments: Option<(WeightStore, WeightStore)>,
    pub timestep: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Applies one optimizer step in place. SGD: w -= lr * g. Adam: standard
/// bias-corrected update with beta1 0.9, beta2 0.999, eps 1e-8.
pub fn optimizer_step(
    state: &mut OptimizerState,
    kind: OptimizerKind,
    weights: &mut WeightStore,
    grads: &WeightStore,
    lr: f32,
) -> Result<(), TrainError> {
    for (layer, params) in grads.iter() {
        for (param, g) in params {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    layer: layer.clone(),
                    param: param.clone(),
                });
            }
        }
    }
    match kind {
        OptimizerKind::Sgd => {
            for (layer, params) in grads.iter() {
                for (param, g) in params {
                    let w = weights
                        .get_mut(layer, param)
                        .expect("gradient matches an existing parameter");
                    for (wv, &gv) in w.data_mut().iter_mut().zip(g.data()) {
                        *wv -= lr * gv;
                    }
                }
            }
        }
        OptimizerKind::Adam => {
            state.timestep += 1;
            let t = state.timestep;
            if state.moments.is_none() {
                state.moments = Some((WeightStore::new(), WeightStore::new()));
            }
            let (m_store, v_store) = state.moments.as_mut().unwrap();
            let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
            for (layer, params) in grads.iter() {
                for (param, g) in params {
                    if m_store.get(layer, param).is_none() {
                        m_store.insert(layer, param, Tensor::zeros(g.shape().to_vec()));
                        v_store.insert(layer, param, Tensor::zeros(g.shape().to_vec()));
                    }
                    let m = m_store.get_mut(layer, param).unwrap();
                    let v = v_store.get_mut(layer, param).unwrap();
                    let w = weights
                        .get_mut(layer, param)
                        .expect("gradient matches an existing parameter");
                    for ((wv, &gv), (mv, vv)) in w
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                    {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *wv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Fit loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f32,
    pub train_acc: f32,
    pub val_loss: f32,
    pub val_acc: f32,
    pub stage: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    /// Index into `records` where stage 2 begins, for staged runs.
    pub stage_boundary: Option<usize>,
    /// Total optimizer steps taken.
    pub steps: usize,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,train_acc,val_loss,val_acc,stage\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.stage
            ));
        }
        out
    }

    pub fn save_csv(&self, path: &std::path::Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv())
    }
}

fn check_dataset(graph: &Graph, ds: &LoadedDataset) -> Result<(), TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let classes = graph.metadata.num_classes;
    if ds.classes.len() != classes {
        return Err(TrainError::ClassMismatch {
            dataset: ds.classes.len(),
            graph: classes,
        });
    }
    for &l in &ds.labels {
        if l >= classes {
            return Err(TrainError::LabelOutOfRange { label: l, classes });
        }
    }
    Ok(())
}

/// Loss and accuracy of a dataset under infer mode (no augmentation).
pub fn evaluate_loss(
    graph: &Graph,
    weights: &WeightStore,
    ds: &LoadedDataset,
    scheme: PreprocessScheme,
    batch_size: usize,
) -> Result<(f32, f32), TrainError> {
    let n = ds.len();
    let mut loss_sum = 0.0f32;
    let mut correct = 0usize;
    for start in (0..n).step_by(batch_size) {
        let end = (start + batch_size).min(n);
        let tensors = runtime::par_map(end - start, |i| preprocess(&ds.images[start + i], scheme));
        let batch = Tensor::stack_batch(&tensors);
        let probs = crate::exec::forward(graph, weights, &batch, ExecMode::Infer)?;
        let classes = *probs.shape().last().unwrap();
        for (row, &label) in probs
            .data()
            .chunks_exact(classes)
            .zip(&ds.labels[start..end])
        {
            loss_sum += -(row[label].max(1e-12).ln());
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap();
            correct += (argmax == label) as usize;
        }
    }
    Ok((loss_sum / n as f32, correct as f32 / n as f32))
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    graph: &Graph,
    weights: &mut WeightStore,
    train: &LoadedDataset,
    val: &LoadedDataset,
    config: &TrainingConfig,
    scheme: PreprocessScheme,
    history: &mut TrainingHistory,
    stage: usize,
    epoch_offset: usize,
) -> Result<(), TrainError> {
    config.validate()?;
    check_dataset(graph, train)?;
    check_dataset(graph, val)?;
    let plan = select_trainable(graph, config.trainable_tail);
    if plan.clamped {
        eprintln!(
            "trainable_tail {} exceeds the {} counted layers; training all of them",
            config.trainable_tail, plan.effective_tail
        );
    }
    let mut state = OptimizerState::new();
    let n = train.len();
    let aug_ops: AugmentOps = config.augment.into();

    for epoch in 0..config.epochs {
        let lr = lr_schedule(config, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(runtime::derive_seed(config.seed, &[0, epoch as u64]));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f32;
        let mut seen = 0usize;
        let mut correct = 0usize;
        for (step, batch_idx) in order.chunks(config.batch_size).enumerate() {
            let tensors = runtime::par_map(batch_idx.len(), |i| {
                let idx = batch_idx[i];
                let aug_seed = runtime::derive_seed(config.seed, &[1, epoch as u64, idx as u64]);
                let img = augment(&train.images[idx], aug_ops, aug_seed);
                preprocess(&img, scheme)
            });
            let labels: Vec<usize> = batch_idx.iter().map(|&i| train.labels[i]).collect();
            let dropout_seed = runtime::derive_seed(config.seed, &[2, epoch as u64, step as u64]);
            let result =
                forward_backward_batch(graph, weights, &plan, &tensors, &labels, dropout_seed)?;
            optimizer_step(&mut state, config.optimizer, weights, &result.grads, lr)?;
            history.steps += 1;
            loss_sum += result.loss * batch_idx.len() as f32;
            correct += result.correct;
            seen += batch_idx.len();
        }
        let (val_loss, val_acc) = evaluate_loss(graph, weights, val, scheme, config.batch_size)?;
        history.records.push(EpochRecord {
            epoch: epoch_offset + epoch + 1,
            lr,
            train_loss: loss_sum / seen as f32,
            train_acc: correct as f32 / seen as f32,
            val_loss,
            val_acc,
            stage,
        });
    }
    Ok(())
}

/// Fine-tunes for `config.epochs` epochs of shuffled mini-batches with
/// augmentation on train batches only. Returns final weights and history.
pub fn fit(
    graph: &Graph,
    mut weights: WeightStore,
    train: &LoadedDataset,
    val: &LoadedDataset,
    config: &TrainingConfig,
) -> Result<(WeightStore, TrainingHistory), TrainError> {
    let scheme = PreprocessScheme::for_architecture(&graph.metadata.architecture);
    let mut history = TrainingHistory::default();
    run_stage(
        graph,
        &mut weights,
        train,
        val,
        config,
        scheme,
        &mut history,
        1,
        0,
    )?;
    Ok((weights, history))
}

/// Two-stage fine-tuning: a warm-up stage, then a second stage (typically a
/// deeper trainable tail and a different optimizer). Histories concatenate
/// with the stage boundary recorded.
pub fn staged_fit(
    graph: &Graph,
    mut weights: WeightStore,
    train: &LoadedDataset,
    val: &LoadedDataset,
    stage1: &TrainingConfig,
    stage2: &TrainingConfig,
) -> Result<(WeightStore, TrainingHistory), TrainError> {
    let scheme = PreprocessScheme::for_architecture(&graph.metadata.architecture);
    let mut history = TrainingHistory::default();
    run_stage(
        graph,
        &mut weights,
        train,
        val,
        stage1,
        scheme,
        &mut history,
        1,
        0,
    )?;
    history.stage_boundary = Some(history.records.len());
    run_stage(
        graph,
        &mut weights,
        train,
        val,
        stage2,
        scheme,
        &mut history,
        2,
        stage1.epochs,
    )?;
    Ok((weights, history))
}
