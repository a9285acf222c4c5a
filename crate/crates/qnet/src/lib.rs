//! A self-contained CNN inference engine with post-training quantization
//! (f16/i8), a transfer-learning trainer, and a latency/accuracy benchmark
//! harness.
//!
//! The crate is organized around a small layer-graph IR:
//!
//! - [`tensor`] / [`ops`]: dense NHWC tensors and the forward kernels.
//! - [`graph`] / [`builders`] / [`exec`]: layer graphs, ResNet50 and
//!   MobileNetV1/V2 builders with replacement classifier heads, forward
//!   execution.
//! - [`stats`]: parameter / FLOP / memory accounting.
//! - [`quant`]: f16 narrowing, range calibration, symmetric per-channel i8
//!   quantization, batch-norm folding, integer inference.
//! - [`train`]: cross-entropy, backprop through a trainable tail, Adam and
//!   SGD with step decay, the fine-tuning loop.
//! - [`data`]: manifests, image decoding, preprocessing, augmentation, and
//!   the synthetic dataset generator.
//! - [`eval`]: accuracy reports, the single-image latency benchmark, and
//!   report emission.
//! - [`format`]: the `QNET` model container shared by all dtypes.

pub mod builders;
pub mod data;
pub mod eval;
pub mod exec;
pub mod format;
pub mod graph;
pub mod ops;
pub mod quant;
pub mod runtime;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod train;

pub use exec::{forward, ExecMode};
pub use format::{load_model, save_model, DType, Model};
pub use graph::{Graph, GraphError, LayerKind, LayerSpec, WeightStore};
pub use stats::{stats, GraphStats};
pub use tensor::{Tensor, TensorError};
