//! Layer-graph representation: a DAG of named layers, the weight store
//! backing it, shape inference, and validation.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{conv_out_dim, ActivationKind, Padding, PoolKind, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("duplicate layer name {0:?}")]
    DuplicateName(String),
    #[error("layer {layer:?} references unknown input {input:?}")]
    UnknownInput { layer: String, input: String },
    #[error("layer {layer:?} takes {expected} input(s), got {got}")]
    InputArity {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error("graph must contain exactly one input layer, found {0}")]
    InputCount(usize),
    #[error("graph must have exactly one output layer, found {found:?}")]
    OutputCount { found: Vec<String> },
    #[error("graph contains a cycle involving {0:?}")]
    Cycle(String),
    #[error("missing weights for layer {layer:?}: {param}")]
    MissingWeight { layer: String, param: &'static str },
    #[error("layer {layer:?}: {source}")]
    LayerFailed { layer: String, source: TensorError },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// One node of the layer graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Input {
        height: usize,
        width: usize,
        channels: usize,
    },
    Conv2d {
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        bias: bool,
    },
    Depthwise {
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        bias: bool,
    },
    Dense {
        out_features: usize,
        bias: bool,
        /// Start from zero weights instead of random fan-in scaling. Used
        /// by replacement classifier heads so early logits reflect learned
        /// signal rather than initialization noise.
        #[serde(default)]
        zero_init: bool,
    },
    BatchNorm {
        epsilon: f32,
    },
    Activation {
        activation: ActivationKind,
    },
    Pool {
        pool: PoolKind,
        window: (usize, usize),
        stride: (usize, usize),
    },
    Add,
    Dropout {
        rate: f32,
    },
    Flatten,
}

impl LayerKind {
    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Input { .. } => 0,
            LayerKind::Add => 2,
            _ => 1,
        }
    }

    /// True for kinds that own parameters.
    pub fn parameterized(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. }
                | LayerKind::Depthwise { .. }
                | LayerKind::Dense { .. }
                | LayerKind::BatchNorm { .. }
        )
    }

    /// Nodes counted when freezing a trailing tail: activation, pool and
    /// add nodes are glue and do not count as layers.
    pub fn counts_as_layer(&self) -> bool {
        !matches!(
            self,
            LayerKind::Activation { .. } | LayerKind::Pool { .. } | LayerKind::Add
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMetadata {
    pub architecture: String,
    pub num_classes: usize,
    pub alpha: f32,
    pub resolution: usize,
    /// Human-readable description of the classifier head.
    pub head: String,
}

/// Validated, topologically ordered layer graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    layers: Vec<LayerSpec>,
    pub metadata: GraphMetadata,
}

impl Graph {
    /// Builds a graph from layers in any storage order; layers are sorted
    /// topologically and validated.
    pub fn new(layers: Vec<LayerSpec>, metadata: GraphMetadata) -> Result<Self, GraphError> {
        if metadata.num_classes < 2 {
            return Err(GraphError::Config(format!(
                "class count must be >= 2, got {}",
                metadata.num_classes
            )));
        }
        if metadata.alpha <= 0.0 {
            return Err(GraphError::Config(format!(
                "alpha must be > 0, got {}",
                metadata.alpha
            )));
        }
        let layers = toposort(layers)?;
        let g = Self { layers, metadata };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<(), GraphError> {
        let mut inputs = 0usize;
        for l in &self.layers {
            let expected = l.kind.arity();
            if l.inputs.len() != expected {
                return Err(GraphError::InputArity {
                    layer: l.name.clone(),
                    expected,
                    got: l.inputs.len(),
                });
            }
            if matches!(l.kind, LayerKind::Input { .. }) {
                inputs += 1;
            }
            if let LayerKind::Dropout { rate } = l.kind {
                if !(0.0..1.0).contains(&rate) {
                    return Err(GraphError::Config(format!(
                        "dropout rate must be in [0, 1), got {rate}"
                    )));
                }
            }
        }
        if inputs != 1 {
            return Err(GraphError::InputCount(inputs));
        }
        let consumed: HashSet<&str> = self
            .layers
            .iter()
            .flat_map(|l| l.inputs.iter().map(String::as_str))
            .collect();
        let sinks: Vec<String> = self
            .layers
            .iter()
            .filter(|l| !consumed.contains(l.name.as_str()))
            .map(|l| l.name.clone())
            .collect();
        if sinks.len() != 1 {
            return Err(GraphError::OutputCount { found: sinks });
        }
        Ok(())
    }

    /// Layers in topological order.
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Name of the single sink layer.
    pub fn output_layer(&self) -> &str {
        let consumed: HashSet<&str> = self
            .layers
            .iter()
            .flat_map(|l| l.inputs.iter().map(String::as_str))
            .collect();
        self.layers
            .iter()
            .find(|l| !consumed.contains(l.name.as_str()))
            .map(|l| l.name.as_str())
            .expect("validated graph has one sink")
    }

    /// Name of the input layer.
    pub fn input_layer(&self) -> &str {
        self.layers
            .iter()
            .find(|l| matches!(l.kind, LayerKind::Input { .. }))
            .map(|l| l.name.as_str())
            .expect("validated graph has one input")
    }

    /// Per-layer output shapes for batch 1, without touching any weights.
    pub fn infer_shapes(&self) -> Result<BTreeMap<String, Vec<usize>>, GraphError> {
        let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for l in &self.layers {
            let shape = infer_layer_shape(l, &shapes)?;
            if shape.contains(&0) {
                return Err(GraphError::LayerFailed {
                    layer: l.name.clone(),
                    source: TensorError::Shape {
                        shape,
                        reason: "inferred dim of zero",
                    },
                });
            }
            shapes.insert(l.name.clone(), shape);
        }
        Ok(shapes)
    }

    /// Shapes of every parameter tensor, in serialization order.
    pub fn parameter_plan(&self) -> Result<Vec<ParamSpec>, GraphError> {
        let shapes = self.infer_shapes()?;
        let mut plan = Vec::new();
        for l in &self.layers {
            let in_shape = l
                .inputs
                .first()
                .map(|i| shapes[i].clone())
                .unwrap_or_default();
            match &l.kind {
                LayerKind::Conv2d {
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => {
                    let cin = *in_shape.last().unwrap();
                    plan.push(ParamSpec::weight(
                        &l.name,
                        "kernel",
                        vec![kernel.0, kernel.1, cin, *out_channels],
                    ));
                    if *bias {
                        plan.push(ParamSpec::bias(&l.name, "bias", vec![*out_channels]));
                    }
                }
                LayerKind::Depthwise { kernel, bias, .. } => {
                    let c = *in_shape.last().unwrap();
                    plan.push(ParamSpec::weight(
                        &l.name,
                        "kernel",
                        vec![kernel.0, kernel.1, c, 1],
                    ));
                    if *bias {
                        plan.push(ParamSpec::bias(&l.name, "bias", vec![c]));
                    }
                }
                LayerKind::Dense {
                    out_features, bias, ..
                } => {
                    let d_in = *in_shape.last().unwrap();
                    plan.push(ParamSpec::weight(
                        &l.name,
                        "weight",
                        vec![d_in, *out_features],
                    ));
                    if *bias {
                        plan.push(ParamSpec::bias(&l.name, "bias", vec![*out_features]));
                    }
                }
                LayerKind::BatchNorm { .. } => {
                    let c = *in_shape.last().unwrap();
                    for param in ["gamma", "beta", "mean", "variance"] {
                        plan.push(ParamSpec::bias(&l.name, param, vec![c]));
                    }
                }
                _ => {}
            }
        }
        Ok(plan)
    }
}

/// One parameter tensor a graph expects in its weight store.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub layer: String,
    pub param: &'static str,
    pub shape: Vec<usize>,
    /// Kernels/weight matrices quantize to i8 codes; vectors stay wide.
    pub is_weight: bool,
}

impl ParamSpec {
    fn weight(layer: &str, param: &'static str, shape: Vec<usize>) -> Self {
        Self {
            layer: layer.to_string(),
            param,
            shape,
            is_weight: true,
        }
    }

    fn bias(layer: &str, param: &'static str, shape: Vec<usize>) -> Self {
        Self {
            layer: layer.to_string(),
            param,
            shape,
            is_weight: false,
        }
    }

    pub fn count(&self) -> usize {
        self.shape.iter().product()
    }
}

fn toposort(layers: Vec<LayerSpec>) -> Result<Vec<LayerSpec>, GraphError> {
    let mut seen = HashSet::new();
    for l in &layers {
        if !seen.insert(l.name.clone()) {
            return Err(GraphError::DuplicateName(l.name.clone()));
        }
    }
    let by_name: HashMap<&str, &LayerSpec> = layers.iter().map(|l| (l.name.as_str(), l)).collect();
    for l in &layers {
        for input in &l.inputs {
            if !by_name.contains_key(input.as_str()) {
                return Err(GraphError::UnknownInput {
                    layer: l.name.clone(),
                    input: input.clone(),
                });
            }
        }
    }
    // Stable repeated scan: keeps the given order where it is already
    // topological, detects cycles otherwise.
    let mut placed: HashSet<&str> = HashSet::new();
    let mut order: Vec<usize> = Vec::with_capacity(layers.len());
    let mut remaining: Vec<usize> = (0..layers.len()).collect();
    while !remaining.is_empty() {
        let before = order.len();
        remaining.retain(|&idx| {
            let ready = layers[idx]
                .inputs
                .iter()
                .all(|i| placed.contains(i.as_str()));
            if ready {
                order.push(idx);
                false
            } else {
                true
            }
        });
        for &idx in &order[before..] {
            placed.insert(layers[idx].name.as_str());
        }
        if order.len() == before {
            return Err(GraphError::Cycle(layers[remaining[0]].name.clone()));
        }
    }
    let mut slots: Vec<Option<LayerSpec>> = layers.into_iter().map(Some).collect();
    Ok(order
        .into_iter()
        .map(|i| slots[i].take().unwrap())
        .collect())
}

fn infer_layer_shape(
    l: &LayerSpec,
    shapes: &BTreeMap<String, Vec<usize>>,
) -> Result<Vec<usize>, GraphError> {
    let fail = |source: TensorError| GraphError::LayerFailed {
        layer: l.name.clone(),
        source,
    };
    let input = |idx: usize| -> &Vec<usize> { &shapes[&l.inputs[idx]] };
    let spatial = |shape: &[usize]| -> Result<(usize, usize, usize), GraphError> {
        if shape.len() != 4 {
            return Err(fail(TensorError::Rank {
                op: "shape_inference",
                expected: 4,
                shape: shape.to_vec(),
            }));
        }
        Ok((shape[1], shape[2], shape[3]))
    };
    Ok(match &l.kind {
        LayerKind::Input {
            height,
            width,
            channels,
        } => vec![1, *height, *width, *channels],
        LayerKind::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let (h, w, _) = spatial(input(0))?;
            let oh = conv_out_dim(h, kernel.0, stride.0, *padding);
            let ow = conv_out_dim(w, kernel.1, stride.1, *padding);
            match (oh, ow) {
                (Some(oh), Some(ow)) => vec![1, oh, ow, *out_channels],
                _ => {
                    return Err(fail(TensorError::EmptyOutput {
                        op: "conv2d",
                        input: input(0).clone(),
                        kernel: vec![kernel.0, kernel.1],
                        stride: *stride,
                    }))
                }
            }
        }
        LayerKind::Depthwise {
            kernel,
            stride,
            padding,
            ..
        } => {
            let (h, w, c) = spatial(input(0))?;
            let oh = conv_out_dim(h, kernel.0, stride.0, *padding);
            let ow = conv_out_dim(w, kernel.1, stride.1, *padding);
            match (oh, ow) {
                (Some(oh), Some(ow)) => vec![1, oh, ow, c],
                _ => {
                    return Err(fail(TensorError::EmptyOutput {
                        op: "depthwise_conv2d",
                        input: input(0).clone(),
                        kernel: vec![kernel.0, kernel.1],
                        stride: *stride,
                    }))
                }
            }
        }
        LayerKind::Dense { out_features, .. } => {
            let shape = input(0);
            if shape.len() != 2 {
                return Err(fail(TensorError::Rank {
                    op: "dense",
                    expected: 2,
                    shape: shape.clone(),
                }));
            }
            vec![shape[0], *out_features]
        }
        LayerKind::BatchNorm { .. } | LayerKind::Activation { .. } | LayerKind::Dropout { .. } => {
            input(0).clone()
        }
        LayerKind::Pool {
            pool,
            window,
            stride,
        } => {
            let (h, w, c) = spatial(input(0))?;
            match pool {
                PoolKind::GlobalAvg => vec![1, c],
                PoolKind::Max => {
                    if window.0 > h || window.1 > w {
                        return Err(fail(TensorError::ShapeMismatch {
                            op: "max_pool",
                            left: input(0).clone(),
                            right: vec![window.0, window.1],
                        }));
                    }
                    vec![
                        1,
                        (h - window.0) / stride.0 + 1,
                        (w - window.1) / stride.1 + 1,
                        c,
                    ]
                }
            }
        }
        LayerKind::Add => {
            let (a, b) = (input(0), input(1));
            if a != b {
                return Err(fail(TensorError::ShapeMismatch {
                    op: "residual_add",
                    left: a.clone(),
                    right: b.clone(),
                }));
            }
            a.clone()
        }
        LayerKind::Flatten => {
            let shape = input(0);
            vec![shape[0], shape[1..].iter().product()]
        }
    })
}

/// Named tensors per layer: kernels, biases, batch-norm vectors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WeightStore {
    entries: BTreeMap<String, BTreeMap<String, Tensor>>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: &str, param: &str, tensor: Tensor) {
        self.entries
            .entry(layer.to_string())
            .or_default()
            .insert(param.to_string(), tensor);
    }

    pub fn get(&self, layer: &str, param: &str) -> Option<&Tensor> {
        self.entries.get(layer).and_then(|m| m.get(param))
    }

    pub fn get_mut(&mut self, layer: &str, param: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(layer).and_then(|m| m.get_mut(param))
    }

    pub fn remove_layer(&mut self, layer: &str) -> Option<BTreeMap<String, Tensor>> {
        self.entries.remove(layer)
    }

    pub fn require(&self, layer: &str, param: &'static str) -> Result<&Tensor, GraphError> {
        self.get(layer, param)
            .ok_or_else(|| GraphError::MissingWeight {
                layer: layer.to_string(),
                param,
            })
    }

    /// Total element count across all tensors.
    pub fn parameter_count(&self) -> usize {
        self.entries
            .values()
            .flat_map(|m| m.values())
            .map(|t| t.len())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeMap<String, Tensor>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut BTreeMap<String, Tensor>)> {
        self.entries.iter_mut()
    }

    pub fn layers(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }
}
