//! Dense f32 tensor type and the parameter containers shared by every kernel.
//!
//! Activations are 4-D `[N, H, W, C]` (NHWC). Convolution weights are
//! `[KH, KW, Cin, Cout]`, depthwise weights `[KH, KW, C, 1]`, dense weights
//! `[In, Out]`. Vectors (biases, batch-norm parameters) are rank 1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error(
        "{op}: output would be empty for input {input:?}, kernel {kernel:?}, stride {stride:?}"
    )]
    EmptyOutput {
        op: &'static str,
        input: Vec<usize>,
        kernel: Vec<usize>,
        stride: (usize, usize),
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements, got {actual}")]
    Size {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    Shape {
        shape: Vec<usize>,
        reason: &'static str,
    },
}

/// Dense row-major f32 tensor. Rank is 1, 2 or 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::Size {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        check_shape(&shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        check_shape(&shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Batch dim of a 4-D activation.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Channel count: last dim.
    pub fn channels(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Splits a 4-D batch into per-image tensors (views copied out).
    pub fn split_batch(&self) -> Vec<Tensor> {
        assert_eq!(self.rank(), 4, "split_batch needs a 4-D tensor");
        let per = self.len() / self.shape[0];
        let mut single = self.shape.clone();
        single[0] = 1;
        self.data
            .chunks_exact(per)
            .map(|chunk| Tensor {
                shape: single.clone(),
                data: chunk.to_vec(),
            })
            .collect()
    }

    /// Concatenates same-shape single-image tensors along the batch dim.
    pub fn stack_batch(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let mut shape = parts[0].shape.clone();
        shape[0] = parts.iter().map(|p| p.shape[0]).sum();
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            assert_eq!(
                p.shape[1..],
                parts[0].shape[1..],
                "stack_batch shape mismatch"
            );
            data.extend_from_slice(&p.data);
        }
        Tensor { shape, data }
    }
}

fn check_shape(shape: &[usize]) -> Result<(), TensorError> {
    if !matches!(shape.len(), 1 | 2 | 4) {
        return Err(TensorError::Shape {
            shape: shape.to_vec(),
            reason: "rank must be 1, 2 or 4",
        });
    }
    if shape.contains(&0) {
        return Err(TensorError::Shape {
            shape: shape.to_vec(),
            reason: "dims must be >= 1",
        });
    }
    Ok(())
}

/// Spatial padding rule for convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output spatial dim is `ceil(in / stride)`; zero padding, the extra
    /// cell of an odd total goes to the bottom/right.
    Same,
    /// No padding; output is `floor((in - k) / stride) + 1`.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl ConvParams {
    pub fn new(stride: usize, padding: Padding) -> Self {
        Self {
            stride: (stride, stride),
            padding,
        }
    }
}

/// Inference-mode batch normalization parameters, one entry per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub mean: Vec<f32>,
    pub variance: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNormParams {
    /// Identity normalization for `channels` channels.
    pub fn identity(channels: usize, epsilon: f32) -> Self {
        Self {
            mean: vec![0.0; channels],
            variance: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let c = self.mean.len();
        if self.variance.len() != c || self.gamma.len() != c || self.beta.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                left: vec![c],
                right: vec![self.variance.len(), self.gamma.len(), self.beta.len()],
            });
        }
        if self.variance.iter().any(|&v| v < 0.0) {
            return Err(TensorError::Shape {
                shape: vec![c],
                reason: "variance must be non-negative",
            });
        }
        if self.epsilon <= 0.0 {
            return Err(TensorError::Shape {
                shape: vec![c],
                reason: "epsilon must be positive",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Relu6,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    GlobalAvg,
}

/// Output spatial extent for one axis. `None` when the output would be empty.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Same => Some(input.div_ceil(stride)),
        Padding::Valid => {
            if input < kernel {
                None
            } else {
                Some((input - kernel) / stride + 1)
            }
        }
    }
}

/// Padding cells before (top/left) and after (bottom/right) for one axis.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (total / 2, total - total / 2)
}
