//! Forward execution of a layer graph over a weight store.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, GraphError, LayerKind, LayerSpec, WeightStore};
use crate::ops;
use crate::runtime;
use crate::tensor::{BatchNormParams, ConvParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Dropout is the identity; output is deterministic.
    Infer,
    /// Dropout applies seeded Bernoulli masking scaled by 1/(1-rate).
    Train { seed: u64 },
}

/// Runs the graph on `input` and returns the final layer output.
///
/// Multi-image batches split across the thread budget; results are stitched
/// in batch order, so the output does not depend on the thread count.
pub fn forward(
    graph: &Graph,
    weights: &WeightStore,
    input: &Tensor,
    mode: ExecMode,
) -> Result<Tensor, GraphError> {
    let n = if input.rank() == 4 { input.batch() } else { 1 };
    if n > 1 && runtime::threads() > 1 {
        let images = input.split_batch();
        let results = runtime::par_map(images.len(), |i| {
            execute(graph, weights, &images[i], mode, i, None, None).map(|(out, _)| out)
        });
        let mut outs = Vec::with_capacity(results.len());
        for r in results {
            outs.push(r?);
        }
        return Ok(Tensor::stack_batch(&outs));
    }
    execute(graph, weights, input, mode, 0, None, None).map(|(out, _)| out)
}

/// Core executor. `image_offset` is the global index of the first image in
/// `input`, used to derive per-image dropout streams so that splitting a
/// batch does not change the masks. `observer` sees every layer output in
/// topological order; `retain` keeps the named activations for the caller.
#[allow(clippy::type_complexity)]
pub(crate) fn execute(
    graph: &Graph,
    weights: &WeightStore,
    input: &Tensor,
    mode: ExecMode,
    image_offset: usize,
    mut observer: Option<&mut dyn FnMut(&str, &Tensor)>,
    retain: Option<&HashSet<String>>,
) -> Result<(Tensor, HashMap<String, Tensor>), GraphError> {
    let mut refcount: HashMap<&str, usize> = HashMap::new();
    for l in graph.layers() {
        for i in &l.inputs {
            *refcount.entry(i.as_str()).or_insert(0) += 1;
        }
    }
    let output_name = graph.output_layer();
    let mut live: HashMap<String, Tensor> = HashMap::new();
    let mut kept: HashMap<String, Tensor> = HashMap::new();

    for l in graph.layers() {
        let out = run_layer(l, weights, &live, input, mode, image_offset)?;
        if let Some(obs) = observer.as_deref_mut() {
            obs(&l.name, &out);
        }
        if retain.is_some_and(|r| r.contains(&l.name)) {
            kept.insert(l.name.clone(), out.clone());
        }
        live.insert(l.name.clone(), out);
        for i in &l.inputs {
            let c = refcount.get_mut(i.as_str()).unwrap();
            *c -= 1;
            if *c == 0 && i != output_name {
                live.remove(i.as_str());
            }
        }
    }
    let out = live.remove(output_name).expect("output layer executed");
    Ok((out, kept))
}

pub(crate) fn run_layer(
    l: &LayerSpec,
    weights: &WeightStore,
    live: &HashMap<String, Tensor>,
    input: &Tensor,
    mode: ExecMode,
    image_offset: usize,
) -> Result<Tensor, GraphError> {
    let fail = |source| GraphError::LayerFailed {
        layer: l.name.clone(),
        source,
    };
    let arg = |idx: usize| &live[&l.inputs[idx]];
    Ok(match &l.kind {
        LayerKind::Input {
            height,
            width,
            channels,
        } => {
            let s = input.shape();
            if s.len() != 4 || s[1] != *height || s[2] != *width || s[3] != *channels {
                return Err(fail(crate::tensor::TensorError::ShapeMismatch {
                    op: "input",
                    left: s.to_vec(),
                    right: vec![1, *height, *width, *channels],
                }));
            }
            input.clone()
        }
        LayerKind::Conv2d {
            stride,
            padding,
            bias,
            ..
        } => {
            let kernel = weights.require(&l.name, "kernel")?;
            let b = if *bias {
                Some(weights.require(&l.name, "bias")?.data())
            } else {
                None
            };
            let params = ConvParams {
                stride: *stride,
                padding: *padding,
            };
            ops::conv2d(arg(0), kernel, b, &params).map_err(fail)?
        }
        LayerKind::Depthwise {
            stride,
            padding,
            bias,
            ..
        } => {
            let kernel = weights.require(&l.name, "kernel")?;
            let b = if *bias {
                Some(weights.require(&l.name, "bias")?.data())
            } else {
                None
            };
            let params = ConvParams {
                stride: *stride,
                padding: *padding,
            };
            ops::depthwise_conv2d(arg(0), kernel, b, &params).map_err(fail)?
        }
        LayerKind::Dense { bias, .. } => {
            let weight = weights.require(&l.name, "weight")?;
            let b = if *bias {
                Some(weights.require(&l.name, "bias")?.data())
            } else {
                None
            };
            ops::dense(arg(0), weight, b).map_err(fail)?
        }
        LayerKind::BatchNorm { epsilon } => {
            let p = BatchNormParams {
                gamma: weights.require(&l.name, "gamma")?.data().to_vec(),
                beta: weights.require(&l.name, "beta")?.data().to_vec(),
                mean: weights.require(&l.name, "mean")?.data().to_vec(),
                variance: weights.require(&l.name, "variance")?.data().to_vec(),
                epsilon: *epsilon,
            };
            ops::batch_norm_inference(arg(0), &p).map_err(fail)?
        }
        LayerKind::Activation { activation } => ops::activation(arg(0), *activation),
        LayerKind::Pool {
            pool,
            window,
            stride,
        } => ops::pool(arg(0), *pool, *window, *stride).map_err(fail)?,
        LayerKind::Add => ops::residual_add(arg(0), arg(1)).map_err(fail)?,
        LayerKind::Dropout { rate } => match mode {
            ExecMode::Infer => arg(0).clone(),
            ExecMode::Train { seed } => dropout_train(arg(0), *rate, seed, &l.name, image_offset),
        },
        LayerKind::Flatten => {
            let x = arg(0);
            let n = x.shape()[0];
            let rest = x.len() / n;
            x.clone().reshape(vec![n, rest]).map_err(fail)?
        }
    })
}

/// Bernoulli mask scaled by 1/(1-rate), drawn per image from a stream keyed
/// on (seed, layer name, global image index).
pub(crate) fn dropout_train(
    x: &Tensor,
    rate: f32,
    seed: u64,
    layer: &str,
    image_offset: usize,
) -> Tensor {
    if rate == 0.0 {
        return x.clone();
    }
    let n = x.shape()[0];
    let per = x.len() / n;
    let scale = 1.0 / (1.0 - rate);
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_exact_mut(per).enumerate() {
        let mut rng = dropout_rng(seed, layer, image_offset + i);
        for v in chunk.iter_mut() {
            if rng.random::<f32>() < rate {
                *v = 0.0;
            } else {
                *v *= scale;
            }
        }
    }
    out
}

/// The mask stream for one (layer, image) pair; the trainer replays it when
/// backpropagating through dropout.
pub(crate) fn dropout_rng(seed: u64, layer: &str, image_index: usize) -> ChaCha8Rng {
    let key = runtime::derive_seed(
        seed,
        &[runtime::fnv1a(layer.as_bytes()), image_index as u64],
    );
    ChaCha8Rng::seed_from_u64(key)
}
