//! Accuracy evaluation (per-class + top-1 + confusion matrix) and the
//! single-image latency benchmark, plus report emission in json/csv/text.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{preprocess, LoadedDataset, PreprocessScheme};
use crate::exec::{forward, ExecMode};
use crate::format::{DType, Model};
use crate::graph::{Graph, GraphError, WeightStore};
use crate::quant::{QuantError, QuantizedModel};
use crate::runtime;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("capability: {0}")]
    Capability(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// A loaded model ready for inference. f16 weights widen to f32 at load
/// time; the host executes them through the same f32 kernels.
pub enum Engine {
    Float {
        graph: Graph,
        weights: WeightStore,
        dtype: DType,
    },
    Quantized(QuantizedModel),
}

impl Engine {
    pub fn from_model(model: Model) -> Engine {
        match model {
            Model::F32 { graph, weights } => Engine::Float {
                graph,
                weights,
                dtype: DType::F32,
            },
            Model::F16 { graph, weights } => Engine::Float {
                weights: weights.widen(),
                graph,
                dtype: DType::F16,
            },
            Model::I8(m) => Engine::Quantized(m),
        }
    }

    pub fn graph(&self) -> &Graph {
        match self {
            Engine::Float { graph, .. } => graph,
            Engine::Quantized(m) => &m.graph,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Engine::Float { dtype, .. } => *dtype,
            Engine::Quantized(_) => DType::I8,
        }
    }

    pub fn infer(&self, input: &Tensor) -> Result<Tensor, EvalError> {
        match self {
            Engine::Float { graph, weights, .. } => {
                Ok(forward(graph, weights, input, ExecMode::Infer)?)
            }
            Engine::Quantized(m) => Ok(m.forward(input)?),
        }
    }
}

/// First index holding the maximum: ties break toward the lowest class.
pub fn argmax_lowest(row: &[f32]) -> usize {
    let mut best = f32::NEG_INFINITY;
    let mut idx = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > best {
            best = v;
            idx = i;
        }
    }
    idx
}

/// Per-class accuracy, top-1 and the confusion matrix (rows = true class,
/// cols = predicted). Internal identities are asserted at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub per_class_accuracy: Vec<f64>,
    pub top1: f64,
    pub confusion: Vec<Vec<u64>>,
    pub samples_per_class: Vec<u64>,
}

impl EvalReport {
    /// Builds the report from a confusion matrix and verifies that top-1
    /// equals trace/total and each per-class accuracy equals its diagonal
    /// over its row sum.
    pub fn from_confusion(classes: Vec<String>, confusion: Vec<Vec<u64>>) -> Self {
        let c = classes.len();
        assert_eq!(confusion.len(), c, "confusion must be CxC");
        for row in &confusion {
            assert_eq!(row.len(), c, "confusion must be CxC");
        }
        let samples_per_class: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let total: u64 = samples_per_class.iter().sum();
        let trace: u64 = (0..c).map(|i| confusion[i][i]).sum();
        let top1 = trace as f64 / total.max(1) as f64;
        let per_class_accuracy: Vec<f64> = (0..c)
            .map(|i| confusion[i][i] as f64 / samples_per_class[i].max(1) as f64)
            .collect();
        let report = Self {
            classes,
            per_class_accuracy,
            top1,
            confusion,
            samples_per_class,
        };
        report.assert_consistent();
        report
    }

    pub fn assert_consistent(&self) {
        let total: u64 = self.samples_per_class.iter().sum();
        let trace: u64 = (0..self.classes.len()).map(|i| self.confusion[i][i]).sum();
        assert!(
            (self.top1 - trace as f64 / total.max(1) as f64).abs() < 1e-12,
            "top1 != trace/total"
        );
        for (i, &acc) in self.per_class_accuracy.iter().enumerate() {
            let row_sum: u64 = self.confusion[i].iter().sum();
            assert_eq!(row_sum, self.samples_per_class[i]);
            assert!(
                (acc - self.confusion[i][i] as f64 / row_sum.max(1) as f64).abs() < 1e-12,
                "per-class accuracy mismatch for {i}"
            );
        }
    }
}

pub struct Evaluation {
    pub report: EvalReport,
    /// (true label, predicted label) per sample, in dataset order.
    pub predictions: Vec<(usize, usize)>,
}

/// Evaluates an engine over a dataset split.
pub fn evaluate_detailed(
    engine: &Engine,
    ds: &LoadedDataset,
    batch_size: usize,
) -> Result<Evaluation, EvalError> {
    if ds.is_empty() {
        return Err(EvalError::Usage("cannot evaluate an empty split".into()));
    }
    let classes = engine.graph().metadata.num_classes;
    if ds.classes.len() != classes {
        return Err(EvalError::Usage(format!(
            "dataset has {} classes but the model head has {}",
            ds.classes.len(),
            classes
        )));
    }
    let scheme = PreprocessScheme::for_architecture(&engine.graph().metadata.architecture);
    let mut confusion = vec![vec![0u64; classes]; classes];
    let mut predictions = Vec::with_capacity(ds.len());
    for start in (0..ds.len()).step_by(batch_size.max(1)) {
        let end = (start + batch_size.max(1)).min(ds.len());
        let tensors = runtime::par_map(end - start, |i| preprocess(&ds.images[start + i], scheme));
        let batch = Tensor::stack_batch(&tensors);
        let probs = engine.infer(&batch)?;
        let width = *probs.shape().last().unwrap();
        for (row, &label) in probs.data().chunks_exact(width).zip(&ds.labels[start..end]) {
            let pred = argmax_lowest(row);
            confusion[label][pred] += 1;
            predictions.push((label, pred));
        }
    }
    Ok(Evaluation {
        report: EvalReport::from_confusion(ds.classes.clone(), confusion),
        predictions,
    })
}

pub fn evaluate(
    engine: &Engine,
    ds: &LoadedDataset,
    batch_size: usize,
) -> Result<EvalReport, EvalError> {
    evaluate_detailed(engine, ds, batch_size).map(|e| e.report)
}

/// Latency statistics over `runs` timed single-image forward passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub dtype: String,
    pub runs: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub fps: f64,
    pub host: String,
}

fn host_description() -> String {
    let cpus = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    format!(
        "{}-{} ({} cpus)",
        std::env::consts::ARCH,
        std::env::consts::OS,
        cpus
    )
}

/// Runs `warmup` untimed then `runs` timed single-image passes on a fixed
/// random input. Execution is single-threaded while the clock runs.
pub fn benchmark(engine: &Engine, runs: usize, warmup: usize) -> Result<BenchReport, EvalError> {
    if runs < 1 {
        return Err(EvalError::Usage("benchmark needs runs >= 1".into()));
    }
    let meta = &engine.graph().metadata;
    let shapes = engine.graph().infer_shapes()?;
    let input_shape = shapes[engine.graph().input_layer()].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let data: Vec<f32> = (0..input_shape.iter().product())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let input = Tensor::new(input_shape, data).expect("input shape from inference");

    let saved_threads = runtime::threads();
    runtime::set_threads(1);
    let result = (|| -> Result<BenchReport, EvalError> {
        for _ in 0..warmup {
            engine.infer(&input)?;
        }
        let mut samples_ms = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t0 = Instant::now();
            engine.infer(&input)?;
            let dt = t0.elapsed();
            // Instant is monotonic; a negative duration cannot happen
            samples_ms.push(dt.as_secs_f64() * 1e3);
        }
        let mean = samples_ms.iter().sum::<f64>() / runs as f64;
        let var = samples_ms
            .iter()
            .map(|&x| (x - mean) * (x - mean))
            .sum::<f64>()
            / runs as f64;
        let min = samples_ms.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = samples_ms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(min >= 0.0 && min <= mean && mean <= max);
        Ok(BenchReport {
            model: meta.architecture.clone(),
            dtype: engine.dtype().name().to_string(),
            runs,
            warmup,
            mean_ms: mean,
            std_ms: var.sqrt(),
            min_ms: min,
            max_ms: max,
            fps: 1e3 / mean,
            host: host_description(),
        })
    })();
    runtime::set_threads(saved_threads);
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    TextTable,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "text" | "table" => Ok(ReportFormat::TextTable),
            other => Err(format!("unknown report format {other:?} (json/csv/text)")),
        }
    }
}

/// Serializes an eval report. The JSON form has stable field ordering and
/// round-trips losslessly; csv emits the per-class section (header plus one
/// row per class).
pub fn emit_eval_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string(report).expect("report serializes"),
        ReportFormat::Csv => {
            let mut out = String::from("class,accuracy,samples\n");
            for (i, class) in report.classes.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{}\n",
                    class, report.per_class_accuracy[i], report.samples_per_class[i]
                ));
            }
            out
        }
        ReportFormat::TextTable => {
            let mut out = String::new();
            out.push_str(&format!(
                "{:<16} {:>10} {:>10}\n",
                "class", "accuracy", "samples"
            ));
            for (i, class) in report.classes.iter().enumerate() {
                out.push_str(&format!(
                    "{:<16} {:>10.5} {:>10}\n",
                    class, report.per_class_accuracy[i], report.samples_per_class[i]
                ));
            }
            out.push_str(&format!("{:<16} {:>10.5}\n", "top-1", report.top1));
            out
        }
    }
}

/// Serializes bench reports: one row per (model, dtype) pair.
pub fn emit_bench_reports(reports: &[BenchReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string(reports).expect("reports serialize"),
        ReportFormat::Csv => {
            let mut out =
                String::from("model,dtype,runs,warmup,mean_ms,std_ms,min_ms,max_ms,fps\n");
            for r in reports {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    r.model,
                    r.dtype,
                    r.runs,
                    r.warmup,
                    r.mean_ms,
                    r.std_ms,
                    r.min_ms,
                    r.max_ms,
                    r.fps
                ));
            }
            out
        }
        ReportFormat::TextTable => {
            let mut out = String::new();
            out.push_str(&format!(
                "{:<14} {:>5} {:>12} {:>10} {:>10} {:>10} {:>8}\n",
                "model", "dtype", "mean_ms", "std_ms", "min_ms", "max_ms", "fps"
            ));
            for r in reports {
                out.push_str(&format!(
                    "{:<14} {:>5} {:>12.3} {:>10.3} {:>10.3} {:>10.3} {:>8.1}\n",
                    r.model, r.dtype, r.mean_ms, r.std_ms, r.min_ms, r.max_ms, r.fps
                ));
            }
            out
        }
    }
}
