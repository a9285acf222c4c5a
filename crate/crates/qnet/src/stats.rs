//! Parameter, FLOP and memory accounting for one single-image forward pass.
//!
//! A fused multiply-add counts as one operation, matching the convention
//! behind the usual "4 GFlops for ResNet50 at 224x224" figure; elementwise
//! layers contribute their per-element op counts on top.

use serde::{Deserialize, Serialize};

use crate::format::DType;
use crate::graph::{Graph, GraphError, LayerKind};
use crate::tensor::{ActivationKind, PoolKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub parameter_count: u64,
    pub flops: u64,
    pub bytes: u64,
}

/// Accounts parameters, forward FLOPs (batch 1) and serialized size at the
/// given element width.
pub fn stats(graph: &Graph, dtype: DType) -> Result<GraphStats, GraphError> {
    let shapes = graph.infer_shapes()?;
    let plan = graph.parameter_plan()?;

    let parameter_count: u64 = plan.iter().map(|p| p.count() as u64).sum();

    let mut flops: u64 = 0;
    for l in graph.layers() {
        let out_shape = &shapes[&l.name];
        let numel: u64 = out_shape.iter().product::<usize>() as u64;
        flops += match &l.kind {
            LayerKind::Conv2d { kernel, bias, .. } => {
                let cin = *shapes[&l.inputs[0]].last().unwrap() as u64;
                let macs = numel * kernel.0 as u64 * kernel.1 as u64 * cin;
                macs + if *bias { numel } else { 0 }
            }
            LayerKind::Depthwise { kernel, bias, .. } => {
                let macs = numel * kernel.0 as u64 * kernel.1 as u64;
                macs + if *bias { numel } else { 0 }
            }
            LayerKind::Dense { bias, .. } => {
                let d_in = *shapes[&l.inputs[0]].last().unwrap() as u64;
                numel * d_in + if *bias { numel } else { 0 }
            }
            // scale and shift
            LayerKind::BatchNorm { .. } => 2 * numel,
            LayerKind::Activation { activation } => match activation {
                ActivationKind::Softmax => 3 * numel,
                _ => numel,
            },
            LayerKind::Pool { pool, window, .. } => match pool {
                PoolKind::Max => numel * window.0 as u64 * window.1 as u64,
                PoolKind::GlobalAvg => {
                    shapes[&l.inputs[0]].iter().product::<usize>() as u64 + numel
                }
            },
            LayerKind::Add => numel,
            LayerKind::Input { .. } | LayerKind::Dropout { .. } | LayerKind::Flatten => 0,
        };
    }

    // Payload bytes plus the container overhead that the on-disk format
    // carries: graph JSON, per-blob headers, and i8 quantization parameters.
    let mut bytes: u64 = crate::format::header_overhead(graph) as u64;
    for p in &plan {
        bytes += crate::format::blob_header_len(&p.layer, p.param, p.shape.len()) as u64;
        bytes += match dtype {
            DType::F32 => 4 * p.count() as u64,
            DType::F16 => 2 * p.count() as u64,
            DType::I8 => {
                if p.is_weight {
                    // i8 codes + per-output-channel scales + zero point
                    let channels = *p.shape.last().unwrap().max(&1) as u64;
                    let channels = if p.shape.len() == 4 && p.shape[3] == 1 {
                        p.shape[2] as u64 // depthwise: channel axis is dim 2
                    } else {
                        channels
                    };
                    p.count() as u64 + 8 + 4 * channels + 4
                } else {
                    4 * p.count() as u64
                }
            }
        };
    }

    Ok(GraphStats {
        parameter_count,
        flops,
        bytes,
    })
}
