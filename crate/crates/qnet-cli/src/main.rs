//! qnet: build, fine-tune, quantize, evaluate and benchmark CNN models.
//!
//! Exit codes: 0 success, 2 usage, 3 file/format, 4 capability, 1 internal.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qnet::data::{load_split, preprocess, PreprocessScheme, Split};
use qnet::eval::{
    benchmark, emit_bench_reports, emit_eval_report, evaluate, Engine, EvalError, ReportFormat,
};
use qnet::format::{load_model, save_model, write_atomic, DType, FormatError, Model};
use qnet::quant::{calibrate, fold_batchnorm, quantize_f16, quantize_i8, size_report, QuantError};
use qnet::train::{fit, staged_fit, OptimizerKind, TrainingConfig};
use qnet::{GraphError, Tensor};

#[derive(Parser)]
#[command(
    name = "qnet",
    version,
    about = "CNN inference, quantization and fine-tuning workbench"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a randomly initialized model
    Build(BuildArgs),
    /// Fine-tune a model on a dataset manifest
    Train(TrainArgs),
    /// Post-training quantization to f16 or i8
    Quantize(QuantizeArgs),
    /// Evaluate accuracy on a manifest split
    Eval(EvalArgs),
    /// Measure single-image inference latency
    Bench(BenchArgs),
    /// Print parameter count, FLOPs and serialized sizes
    Stats(StatsArgs),
    /// Compare on-disk sizes of models serialized at several dtypes
    SizeReport(SizeReportArgs),
    /// Generate the synthetic three-class dataset
    SynthData(SynthArgs),
}

#[derive(Args)]
struct BuildArgs {
    /// resnet50, mobilenetv1 or mobilenetv2
    #[arg(long)]
    arch: String,
    #[arg(long)]
    classes: usize,
    /// MobileNet width multiplier
    #[arg(long, default_value_t = 1.0)]
    alpha: f32,
    /// Input resolution in pixels
    #[arg(long, default_value_t = 224)]
    res: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Training config as JSON; defaults encode the standard recipe
    #[arg(long)]
    config: Option<PathBuf>,
    /// Second-stage config; runs staged fine-tuning when present
    #[arg(long)]
    stage2_config: Option<PathBuf>,
    /// Crop images to their bbox before resizing
    #[arg(long, default_value_t = false)]
    crop: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    trainable_tail: Option<usize>,
    /// adam or sgd
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    /// f16 or i8
    #[arg(long)]
    dtype: String,
    /// Manifest supplying calibration images (required for i8)
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Split of the calibration manifest to use
    #[arg(long, default_value = "val")]
    calib_split: String,
    /// Cap on calibration images
    #[arg(long, default_value_t = 32)]
    calib_samples: usize,
    /// Also write the calibration profile as JSON
    #[arg(long)]
    profile_out: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = false)]
    crop: bool,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// json, csv or text
    #[arg(long, default_value = "json")]
    format: String,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1000)]
    runs: usize,
    #[arg(long, default_value_t = 50)]
    warmup: usize,
    #[arg(long, default_value = "json")]
    format: String,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct SizeReportArgs {
    /// Model files of the same architecture (one must be f32)
    #[arg(required = true)]
    models: Vec<PathBuf>,
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long)]
    per_class: usize,
    #[arg(long, default_value_t = 96)]
    res: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn file(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::file(e.to_string())
    }
}

impl From<qnet::data::DataError> for CliError {
    fn from(e: qnet::data::DataError) -> Self {
        match e {
            qnet::data::DataError::Usage(_) => CliError::usage(e.to_string()),
            _ => CliError::file(e.to_string()),
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::Config(_) => CliError::usage(e.to_string()),
            _ => CliError::internal(e.to_string()),
        }
    }
}

impl From<qnet::train::TrainError> for CliError {
    fn from(e: qnet::train::TrainError) -> Self {
        match e {
            qnet::train::TrainError::EmptyDataset
            | qnet::train::TrainError::ClassMismatch { .. }
            | qnet::train::TrainError::LabelOutOfRange { .. } => CliError::usage(e.to_string()),
            _ => CliError::internal(e.to_string()),
        }
    }
}

impl From<QuantError> for CliError {
    fn from(e: QuantError) -> Self {
        match e {
            QuantError::Usage(_) | QuantError::EmptyCalibration => CliError::usage(e.to_string()),
            QuantError::Format(_) => CliError::file(e.to_string()),
            _ => CliError::internal(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Usage(_) => CliError::usage(e.to_string()),
            EvalError::Capability(_) => CliError {
                code: 4,
                message: e.to_string(),
            },
            _ => CliError::internal(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    s.parse::<Split>().map_err(CliError::usage)
}

fn parse_format(s: &str) -> Result<ReportFormat, CliError> {
    s.parse::<ReportFormat>().map_err(CliError::usage)
}

fn emit(output: Option<&Path>, text: &str) -> Result<(), CliError> {
    match output {
        Some(path) => {
            write_atomic(path, text.as_bytes())?;
            Ok(())
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Build(args) => {
            let graph =
                qnet::builders::build_by_name(&args.arch, args.classes, args.alpha, args.res)?;
            let weights = qnet::builders::init_weights(&graph, args.seed)?;
            save_model(&args.output, &Model::F32 { graph, weights })?;
            eprintln!("wrote {}", args.output.display());
            Ok(())
        }
        Command::Train(args) => train_cmd(args),
        Command::Quantize(args) => quantize_cmd(args),
        Command::Eval(args) => {
            let model = load_model(&args.model)?;
            let engine = Engine::from_model(model);
            let split = parse_split(&args.split)?;
            let res = engine.graph().metadata.resolution;
            let ds = load_split(&args.manifest, split, res, args.crop)?;
            let report = evaluate(&engine, &ds, args.batch_size)?;
            let text = emit_eval_report(&report, parse_format(&args.format)?);
            emit(args.output.as_deref(), &text)
        }
        Command::Bench(args) => {
            let model = load_model(&args.model)?;
            let engine = Engine::from_model(model);
            let report = benchmark(&engine, args.runs, args.warmup)?;
            let text =
                emit_bench_reports(std::slice::from_ref(&report), parse_format(&args.format)?);
            emit(args.output.as_deref(), &text)
        }
        Command::Stats(args) => {
            let model = load_model(&args.model)?;
            let graph = model.graph();
            let rows: Vec<(DType, qnet::GraphStats)> = [DType::F32, DType::F16, DType::I8]
                .into_iter()
                .map(|d| Ok((d, qnet::stats(graph, d)?)))
                .collect::<Result<_, GraphError>>()?;
            match args.format.as_str() {
                "json" => {
                    let obj = serde_json::json!({
                        "architecture": graph.metadata.architecture,
                        "num_classes": graph.metadata.num_classes,
                        "alpha": graph.metadata.alpha,
                        "resolution": graph.metadata.resolution,
                        "parameter_count": rows[0].1.parameter_count,
                        "flops": rows[0].1.flops,
                        "bytes": rows
                            .iter()
                            .map(|(d, s)| (d.name(), s.bytes))
                            .collect::<std::collections::BTreeMap<_, _>>(),
                    });
                    println!("{obj}");
                }
                "text" => {
                    println!("architecture : {}", graph.metadata.architecture);
                    println!(
                        "classes {} | alpha {} | resolution {}",
                        graph.metadata.num_classes, graph.metadata.alpha, graph.metadata.resolution
                    );
                    println!("parameters   : {}", rows[0].1.parameter_count);
                    println!(
                        "flops        : {} ({:.2} GFlops per image)",
                        rows[0].1.flops,
                        rows[0].1.flops as f64 / 1e9
                    );
                    for (d, s) in &rows {
                        println!(
                            "bytes @ {:<4} : {} ({:.2} MB)",
                            d.name(),
                            s.bytes,
                            s.bytes as f64 / 1e6
                        );
                    }
                }
                other => return Err(CliError::usage(format!("unknown format {other:?}"))),
            }
            Ok(())
        }
        Command::SizeReport(args) => {
            let report = size_report(&args.models)?;
            match args.format.as_str() {
                "json" => println!("{}", serde_json::to_string(&report).expect("serializes")),
                "text" => {
                    println!(
                        "{:<40} {:>6} {:>12} {:>8}",
                        "path", "dtype", "bytes", "ratio"
                    );
                    for row in &report.rows {
                        println!(
                            "{:<40} {:>6} {:>12} {:>8.3}",
                            row.path, row.dtype, row.bytes, row.ratio_vs_f32
                        );
                    }
                }
                other => return Err(CliError::usage(format!("unknown format {other:?}"))),
            }
            Ok(())
        }
        Command::SynthData(args) => {
            if !(2..=3).contains(&args.classes) {
                return Err(CliError::usage("synth-data supports 2 or 3 classes"));
            }
            let manifest = qnet::synth::generate_dataset(
                &args.output,
                args.classes,
                args.per_class,
                args.res,
                args.seed,
            )?;
            eprintln!(
                "wrote {} images and {}",
                manifest.records.len(),
                args.output.join("manifest.jsonl").display()
            );
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainingConfig, CliError> {
    match path {
        None => Ok(TrainingConfig::default()),
        Some(p) => {
            let bytes = std::fs::read(p)
                .map_err(|e| CliError::file(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_slice(&bytes)
                .map_err(|e| CliError::file(format!("bad training config {}: {e}", p.display())))
        }
    }
}

fn apply_overrides(cfg: &mut TrainingConfig, args: &TrainArgs) -> Result<(), CliError> {
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.initial_lr = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(t) = args.trainable_tail {
        cfg.trainable_tail = t;
    }
    if let Some(opt) = &args.optimizer {
        cfg.optimizer = match opt.as_str() {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            other => return Err(CliError::usage(format!("unknown optimizer {other:?}"))),
        };
    }
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let Model::F32 { graph, weights } = model else {
        return Err(CliError::usage(
            "training needs an f32 model; quantized models are inference-only",
        ));
    };
    let mut config = load_config(args.config.as_deref())?;
    apply_overrides(&mut config, &args)?;
    let res = graph.metadata.resolution;
    let train_ds = load_split(&args.manifest, Split::Train, res, args.crop)?;
    let val_ds = load_split(&args.manifest, Split::Val, res, args.crop)?;

    let (weights, history) = match &args.stage2_config {
        None => fit(&graph, weights, &train_ds, &val_ds, &config)?,
        Some(p) => {
            let mut stage2 = load_config(Some(p))?;
            if let Some(s) = args.seed {
                stage2.seed = s;
            }
            staged_fit(&graph, weights, &train_ds, &val_ds, &config, &stage2)?
        }
    };
    let last = history.records.last().expect("at least one epoch");
    eprintln!(
        "final: train_acc {:.4} val_acc {:.4} over {} epochs",
        last.train_acc,
        last.val_acc,
        history.records.len()
    );
    if let Some(h) = &args.history {
        write_atomic(h, history.to_csv().as_bytes())?;
    }
    save_model(&args.output, &Model::F32 { graph, weights })?;
    eprintln!("wrote {}", args.output.display());
    Ok(())
}

fn quantize_cmd(args: QuantizeArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let Model::F32 { graph, weights } = model else {
        return Err(CliError::usage("quantize expects an f32 model as input"));
    };
    match args.dtype.as_str() {
        "f16" => {
            let blob = quantize_f16(&weights)?;
            save_model(
                &args.output,
                &Model::F16 {
                    graph,
                    weights: blob,
                },
            )?;
        }
        "i8" => {
            let manifest = args.calib.as_deref().ok_or_else(|| {
                CliError::usage("i8 quantization needs --calib <manifest> for range calibration")
            })?;
            let split = parse_split(&args.calib_split)?;
            let res = graph.metadata.resolution;
            let ds = load_split(manifest, split, res, false)?;
            if ds.is_empty() {
                return Err(CliError::usage("calibration split is empty"));
            }
            let scheme = PreprocessScheme::for_architecture(&graph.metadata.architecture);
            let count = ds.len().min(args.calib_samples.max(1));
            let samples: Vec<Tensor> = ds.images[..count]
                .iter()
                .map(|img| preprocess(img, scheme))
                .collect();
            let (folded, fweights) = fold_batchnorm(&graph, &weights)?;
            let profile = calibrate(&folded, &fweights, &samples)?;
            if let Some(p) = &args.profile_out {
                let json = serde_json::to_string_pretty(&profile).expect("profile serializes");
                write_atomic(p, json.as_bytes())?;
            }
            let qmodel = quantize_i8(&folded, &fweights, &profile)?;
            save_model(&args.output, &Model::I8(qmodel))?;
        }
        other => {
            return Err(CliError::usage(format!(
                "unknown dtype {other:?} (expected f16 or i8)"
            )))
        }
    }
    eprintln!("wrote {}", args.output.display());
    Ok(())
}
