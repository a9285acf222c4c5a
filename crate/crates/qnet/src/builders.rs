//! Builders for the three supported architectures with their replacement
//! classifier heads, plus random weight initialization.
//!
//! Heads: ResNet50 gets global-average-pool -> dense(256) -> relu ->
//! dropout(0.5) -> dense(classes) -> softmax; the MobileNets swap in
//! global-average-pool -> dropout(0.25) -> dense(classes) -> softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, GraphError, GraphMetadata, LayerKind, LayerSpec, WeightStore};
use crate::runtime;
use crate::tensor::{ActivationKind, Padding, PoolKind, Tensor};

const RESNET_HEAD: &str = "gap-dense256-relu-dropout0.5-dense-softmax";
const MOBILENET_HEAD: &str = "gap-dropout0.25-dense-softmax";
const BN_EPSILON: f32 = 1e-3;

struct Stack {
    layers: Vec<LayerSpec>,
    tail: String,
}

impl Stack {
    fn new(height: usize, width: usize, channels: usize) -> Self {
        let input = LayerSpec {
            name: "input".into(),
            kind: LayerKind::Input {
                height,
                width,
                channels,
            },
            inputs: vec![],
        };
        Self {
            layers: vec![input],
            tail: "input".into(),
        }
    }

    /// Appends a layer fed by the current tail.
    fn push(&mut self, name: &str, kind: LayerKind) -> String {
        self.layers.push(LayerSpec {
            name: name.into(),
            kind,
            inputs: vec![self.tail.clone()],
        });
        self.tail = name.into();
        self.tail.clone()
    }

    fn push_from(&mut self, name: &str, kind: LayerKind, inputs: Vec<String>) -> String {
        self.layers.push(LayerSpec {
            name: name.into(),
            kind,
            inputs,
        });
        self.tail = name.into();
        self.tail.clone()
    }

    fn conv_bn_act(
        &mut self,
        name: &str,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        act: Option<ActivationKind>,
    ) {
        self.push(
            name,
            LayerKind::Conv2d {
                out_channels,
                kernel: (kernel, kernel),
                stride: (stride, stride),
                padding: Padding::Same,
                bias: false,
            },
        );
        self.push(
            &format!("{name}_bn"),
            LayerKind::BatchNorm {
                epsilon: BN_EPSILON,
            },
        );
        if let Some(a) = act {
            self.push(
                &format!("{name}_act"),
                LayerKind::Activation { activation: a },
            );
        }
    }

    fn depthwise_bn_act(&mut self, name: &str, stride: usize, act: ActivationKind) {
        self.push(
            name,
            LayerKind::Depthwise {
                kernel: (3, 3),
                stride: (stride, stride),
                padding: Padding::Same,
                bias: false,
            },
        );
        self.push(
            &format!("{name}_bn"),
            LayerKind::BatchNorm {
                epsilon: BN_EPSILON,
            },
        );
        self.push(
            &format!("{name}_act"),
            LayerKind::Activation { activation: act },
        );
    }
}

/// Standard ResNet50 body (bottleneck stages 3/4/6/3) with the replacement
/// head, ending in softmax over `num_classes`.
pub fn build_resnet50(num_classes: usize) -> Result<Graph, GraphError> {
    build_resnet50_at(num_classes, 224)
}

/// ResNet50 at a non-default input resolution (for desk-scale experiments).
pub fn build_resnet50_at(num_classes: usize, resolution: usize) -> Result<Graph, GraphError> {
    let mut s = Stack::new(resolution, resolution, 3);
    s.conv_bn_act("stem_conv", 64, 7, 2, Some(ActivationKind::Relu));
    s.push(
        "stem_pool",
        LayerKind::Pool {
            pool: PoolKind::Max,
            window: (3, 3),
            stride: (2, 2),
        },
    );

    let mut in_channels = 64;
    for (stage, &(planes, blocks, stage_stride)) in
        [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)]
            .iter()
            .enumerate()
    {
        for block in 0..blocks {
            let stride = if block == 0 { stage_stride } else { 1 };
            let out_channels = planes * 4;
            let prefix = format!("s{}_b{}", stage + 2, block + 1);
            let block_input = s.tail.clone();

            s.conv_bn_act(
                &format!("{prefix}_conv1"),
                planes,
                1,
                1,
                Some(ActivationKind::Relu),
            );
            s.conv_bn_act(
                &format!("{prefix}_conv2"),
                planes,
                3,
                stride,
                Some(ActivationKind::Relu),
            );
            s.conv_bn_act(&format!("{prefix}_conv3"), out_channels, 1, 1, None);
            let main = s.tail.clone();

            let shortcut = if stride != 1 || in_channels != out_channels {
                s.tail = block_input.clone();
                s.conv_bn_act(&format!("{prefix}_proj"), out_channels, 1, stride, None);
                s.tail.clone()
            } else {
                block_input
            };
            s.push_from(
                &format!("{prefix}_add"),
                LayerKind::Add,
                vec![main, shortcut],
            );
            s.push(
                &format!("{prefix}_relu"),
                LayerKind::Activation {
                    activation: ActivationKind::Relu,
                },
            );
            in_channels = out_channels;
        }
    }

    s.push(
        "gap",
        LayerKind::Pool {
            pool: PoolKind::GlobalAvg,
            window: (0, 0),
            stride: (1, 1),
        },
    );
    s.push(
        "head_dense1",
        LayerKind::Dense {
            out_features: 256,
            bias: true,
            zero_init: false,
        },
    );
    s.push(
        "head_relu",
        LayerKind::Activation {
            activation: ActivationKind::Relu,
        },
    );
    s.push("head_dropout", LayerKind::Dropout { rate: 0.5 });
    s.push(
        "head_dense2",
        LayerKind::Dense {
            out_features: num_classes,
            bias: true,
            zero_init: true,
        },
    );
    s.push(
        "softmax",
        LayerKind::Activation {
            activation: ActivationKind::Softmax,
        },
    );

    Graph::new(
        s.layers,
        GraphMetadata {
            architecture: "resnet50".into(),
            num_classes,
            alpha: 1.0,
            resolution,
            head: RESNET_HEAD.into(),
        },
    )
}

/// Channel width under multiplier `alpha`: nearest multiple of 8, min 8.
pub fn scale_channels(channels: usize, alpha: f32) -> usize {
    let scaled = channels as f32 * alpha;
    (((scaled / 8.0).round() as usize) * 8).max(8)
}

fn check_mobilenet_config(alpha: f32, resolution: usize) -> Result<(), GraphError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(GraphError::Config(format!(
            "alpha must be in (0, 1], got {alpha}"
        )));
    }
    if ![96, 128, 160, 192, 224].contains(&resolution) {
        return Err(GraphError::Config(format!(
            "resolution must be one of 96/128/160/192/224, got {resolution}"
        )));
    }
    Ok(())
}

/// MobileNetV1: conv stem plus 13 depthwise-separable blocks, each
/// depthwise -> BN -> relu6 -> pointwise -> BN -> relu6.
pub fn build_mobilenet_v1(
    alpha: f32,
    resolution: usize,
    num_classes: usize,
) -> Result<Graph, GraphError> {
    check_mobilenet_config(alpha, resolution)?;
    let mut s = Stack::new(resolution, resolution, 3);
    s.conv_bn_act(
        "stem_conv",
        scale_channels(32, alpha),
        3,
        2,
        Some(ActivationKind::Relu6),
    );

    let blocks: [(usize, usize); 13] = [
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    ];
    for (i, &(out, stride)) in blocks.iter().enumerate() {
        let prefix = format!("b{}", i + 1);
        s.depthwise_bn_act(&format!("{prefix}_dw"), stride, ActivationKind::Relu6);
        s.conv_bn_act(
            &format!("{prefix}_pw"),
            scale_channels(out, alpha),
            1,
            1,
            Some(ActivationKind::Relu6),
        );
    }

    s.push(
        "gap",
        LayerKind::Pool {
            pool: PoolKind::GlobalAvg,
            window: (0, 0),
            stride: (1, 1),
        },
    );
    s.push("head_dropout", LayerKind::Dropout { rate: 0.25 });
    s.push(
        "head_dense",
        LayerKind::Dense {
            out_features: num_classes,
            bias: true,
            zero_init: true,
        },
    );
    s.push(
        "softmax",
        LayerKind::Activation {
            activation: ActivationKind::Softmax,
        },
    );

    Graph::new(
        s.layers,
        GraphMetadata {
            architecture: "mobilenetv1".into(),
            num_classes,
            alpha,
            resolution,
            head: MOBILENET_HEAD.into(),
        },
    )
}

/// MobileNetV2: 17 inverted-residual bottlenecks (expand -> depthwise ->
/// linear projection, shortcut at stride 1 with matching channels), then a
/// 1x1 conv to 1280.
pub fn build_mobilenet_v2(
    alpha: f32,
    resolution: usize,
    num_classes: usize,
) -> Result<Graph, GraphError> {
    check_mobilenet_config(alpha, resolution)?;
    let mut s = Stack::new(resolution, resolution, 3);
    let mut in_channels = scale_channels(32, alpha);
    s.conv_bn_act("stem_conv", in_channels, 3, 2, Some(ActivationKind::Relu6));

    // (expansion t, output channels c, repeats n, first stride s)
    let settings: [(usize, usize, usize, usize); 7] = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let mut block_idx = 0;
    for &(t, c, n, first_stride) in &settings {
        let out_channels = scale_channels(c, alpha);
        for rep in 0..n {
            block_idx += 1;
            let stride = if rep == 0 { first_stride } else { 1 };
            let prefix = format!("b{block_idx}");
            let block_input = s.tail.clone();
            let hidden = in_channels * t;

            if t != 1 {
                s.conv_bn_act(
                    &format!("{prefix}_expand"),
                    hidden,
                    1,
                    1,
                    Some(ActivationKind::Relu6),
                );
            }
            s.depthwise_bn_act(&format!("{prefix}_dw"), stride, ActivationKind::Relu6);
            s.conv_bn_act(&format!("{prefix}_project"), out_channels, 1, 1, None);

            if stride == 1 && in_channels == out_channels {
                let main = s.tail.clone();
                s.push_from(
                    &format!("{prefix}_add"),
                    LayerKind::Add,
                    vec![main, block_input],
                );
            }
            in_channels = out_channels;
        }
    }

    let last = if alpha > 1.0 {
        scale_channels(1280, alpha)
    } else {
        1280
    };
    s.conv_bn_act("last_conv", last, 1, 1, Some(ActivationKind::Relu6));
    s.push(
        "gap",
        LayerKind::Pool {
            pool: PoolKind::GlobalAvg,
            window: (0, 0),
            stride: (1, 1),
        },
    );
    s.push("head_dropout", LayerKind::Dropout { rate: 0.25 });
    s.push(
        "head_dense",
        LayerKind::Dense {
            out_features: num_classes,
            bias: true,
            zero_init: true,
        },
    );
    s.push(
        "softmax",
        LayerKind::Activation {
            activation: ActivationKind::Softmax,
        },
    );

    Graph::new(
        s.layers,
        GraphMetadata {
            architecture: "mobilenetv2".into(),
            num_classes,
            alpha,
            resolution,
            head: MOBILENET_HEAD.into(),
        },
    )
}

pub fn build_by_name(
    arch: &str,
    num_classes: usize,
    alpha: f32,
    resolution: usize,
) -> Result<Graph, GraphError> {
    match arch {
        "resnet50" => build_resnet50_at(num_classes, resolution),
        "mobilenetv1" => build_mobilenet_v1(alpha, resolution, num_classes),
        "mobilenetv2" => build_mobilenet_v2(alpha, resolution, num_classes),
        other => Err(GraphError::Config(format!(
            "unknown architecture {other:?} (expected resnet50, mobilenetv1 or mobilenetv2)"
        ))),
    }
}

/// Random initialization: He-style uniform fan-in scaling for kernels,
/// zeros for biases, identity statistics for batch norm. Each tensor draws
/// from its own stream keyed on (seed, layer, param), so values do not
/// depend on traversal order.
pub fn init_weights(graph: &Graph, seed: u64) -> Result<WeightStore, GraphError> {
    let plan = graph.parameter_plan()?;
    let mut ws = WeightStore::new();
    for spec in &plan {
        let kind = graph.layer(&spec.layer).map(|l| &l.kind);
        if let Some(LayerKind::Dense {
            zero_init: true, ..
        }) = kind
        {
            ws.insert(&spec.layer, spec.param, Tensor::zeros(spec.shape.clone()));
            continue;
        }
        let tensor = if spec.is_weight {
            let fan_in = match kind {
                Some(LayerKind::Depthwise { .. }) => spec.shape[0] * spec.shape[1],
                Some(LayerKind::Dense { .. }) => spec.shape[0],
                _ => spec.shape[0] * spec.shape[1] * spec.shape[2],
            };
            let limit = (6.0 / fan_in as f32).sqrt();
            let key = runtime::derive_seed(
                seed,
                &[
                    runtime::fnv1a(spec.layer.as_bytes()),
                    runtime::fnv1a(spec.param.as_bytes()),
                ],
            );
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let data: Vec<f32> = (0..spec.count())
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            Tensor::new(spec.shape.clone(), data).expect("plan shape is valid")
        } else {
            let fill = match spec.param {
                "gamma" | "variance" => 1.0,
                _ => 0.0,
            };
            Tensor::filled(spec.shape.clone(), fill)
        };
        ws.insert(&spec.layer, spec.param, tensor);
    }
    Ok(ws)
}
