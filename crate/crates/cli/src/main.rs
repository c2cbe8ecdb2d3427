//! `mce`: build, compress, run, evaluate, benchmark and inspect models.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or model error.

use std::error::Error;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use mce_core::bench::{
    bench_latency, bench_throughput, make_report, measure_power, timer_resolution, BenchReport, BenchRow, FileSampler,
    PowerStats, PowerTrace, ReportMeta,
};
use mce_core::eval::{evaluate, join_scores_labels, read_labels_csv, read_scores_csv, sigmoid, ScoreRow};
use mce_core::exec::{read_tensor, Dataset, ExecOptions, Executor, TensorValue};
use mce_core::ir::{build_mobilenet_v2, read_model, write_model, Graph, Manifest, MobileNetConfig, Precision};
use mce_core::quant::{
    calibrate, lower_fp16, quantize_int8, size_report_files, CalibrationMethod, CalibrationTable, PrecisionPolicy,
    Target,
};

type CmdResult = Result<(), Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "mce", version, about = "Model compression engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a seeded MobileNetV2 binary classifier
    BuildZoo(BuildZooArgs),
    /// Lower a model to FP16 or quantize it to INT8
    Compress(CompressArgs),
    /// Score one tensor file or a dataset directory
    Run(RunArgs),
    /// Metrics from a scores CSV and a labels CSV
    Eval(EvalArgs),
    /// Latency, throughput and power of one model
    Bench(BenchArgs),
    /// Print a model's manifest
    Inspect(InspectArgs),
}

#[derive(Args)]
struct BuildZooArgs {
    #[arg(long, default_value_t = 224)]
    res: usize,
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CompressPrecision {
    Fp32,
    Fp16,
    Int8,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    precision: CompressPrecision,
    /// Calibration dataset directory or a saved calibration table (.json)
    #[arg(long, required_if_eq("precision", "int8"))]
    calib: Option<PathBuf>,
    /// `minmax` or `percentile(P)`
    #[arg(long, default_value = "minmax")]
    method: CalibrationMethod,
    /// JSON file of the form {"keep_fp32": ["mean"]}
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Also write the calibration table here
    #[arg(long)]
    calib_out: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    /// A `.mct` tensor or a dataset directory
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Scores CSV destination (stdout if omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Timed latency batches
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Recorded `timestamp_s,watts` trace (t < 0 idle, t >= 0 run)
    #[arg(long, conflicts_with = "power_file")]
    power_trace: Option<PathBuf>,
    /// Live power source, e.g. a hwmon power1_input file
    #[arg(long)]
    power_file: Option<PathBuf>,
    /// Multiplier from the power file's unit to watts
    #[arg(long, default_value_t = 1e-6)]
    power_scale: f64,
    #[arg(long, default_value_t = 2.0)]
    idle_secs: f64,
    #[arg(long, default_value_t = 50)]
    sample_ms: u64,
    /// Reference power in watts for the ratio column when no `original` row exists
    #[arg(long)]
    reference_w: Option<f64>,
    /// Report to create or extend (.json for JSON, CSV otherwise)
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

fn emit(out: Option<&Path>, text: &str) -> CmdResult {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn build_zoo(args: BuildZooArgs) -> CmdResult {
    let config = MobileNetConfig {
        resolution: args.res,
        width: args.width,
        num_outputs: 1,
        seed: args.seed,
    };
    let graph = build_mobilenet_v2(&config)?;
    let manifest = write_model(&args.out, &graph)?;
    info!("wrote {} ({} nodes)", args.out.display(), manifest.node_count);
    emit(None, &(serde_json::to_string_pretty(&manifest)? + "\n"))
}

fn load_policy(path: Option<&Path>, target: Target) -> Result<PrecisionPolicy, Box<dyn Error>> {
    match path {
        None => Ok(PrecisionPolicy::default_for(target)),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            Ok(PrecisionPolicy::from_json(target, &text)?)
        }
    }
}

fn calibration_table(graph: &Graph, args: &CompressArgs) -> Result<CalibrationTable, Box<dyn Error>> {
    let path = args.calib.as_deref().ok_or("--calib is required for int8")?;
    if path.is_dir() {
        let data = Dataset::load(path)?;
        info!("calibrating on {} images with {}", data.len(), args.method.tag());
        Ok(calibrate(graph, &data, args.method, args.batch)?)
    } else {
        Ok(CalibrationTable::load(path)?)
    }
}

fn compress(args: CompressArgs) -> CmdResult {
    let graph = read_model(&args.model)?;
    let compressed = match args.precision {
        CompressPrecision::Fp32 => {
            let (mut metadata, inputs, nodes, outputs) = graph.into_parts();
            metadata.precision = Precision::Fp32;
            Graph::from_parts(metadata, inputs, nodes.into_values(), outputs)
        }
        CompressPrecision::Fp16 => {
            if args.calib.is_some() {
                warn!("--calib is ignored for fp16");
            }
            lower_fp16(&graph, &load_policy(args.policy.as_deref(), Target::Fp16)?)?
        }
        CompressPrecision::Int8 => {
            let table = calibration_table(&graph, &args)?;
            if let Some(path) = &args.calib_out {
                std::fs::write(path, table.to_json()).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            quantize_int8(&graph, &table, &load_policy(args.policy.as_deref(), Target::Int8)?)?
        }
    };
    write_model(&args.out, &compressed)?;
    let report = size_report_files(&args.model, &args.out)?;
    emit(None, &(serde_json::to_string_pretty(&report)? + "\n"))
}

fn logits_of(exec: &mut Executor, batch: &TensorValue) -> Result<Vec<f64>, Box<dyn Error>> {
    let out = exec.run_one(batch, ExecOptions::default())?;
    let logits = out.outputs.into_values().next().ok_or("model has no outputs")?;
    Ok(logits.to_f32_vec().into_iter().map(f64::from).collect())
}

fn score_rows(names: &[String], logits: &[f64]) -> Result<Vec<ScoreRow>, Box<dyn Error>> {
    if logits.len() != names.len() {
        return Err(format!(
            "model emits {} values for {} images; expected one logit each",
            logits.len(),
            names.len()
        )
        .into());
    }
    Ok(names
        .iter()
        .zip(logits)
        .map(|(n, &l)| ScoreRow {
            filename: n.clone(),
            logit: l,
            score: sigmoid(l),
        })
        .collect())
}

fn run(args: RunArgs) -> CmdResult {
    let graph = read_model(&args.model)?;
    let mut exec = Executor::new(&graph)?;
    let mut rows = Vec::new();
    if args.input.is_dir() {
        let data = Dataset::load(&args.input)?;
        for indices in data.epoch_batches(args.batch) {
            let batch = data.batch(&indices)?;
            let names: Vec<String> = indices.iter().map(|&i| data.samples()[i].name.clone()).collect();
            rows.extend(score_rows(&names, &logits_of(&mut exec, &batch.tensor)?)?);
        }
    } else {
        let mut tensor = read_tensor(&args.input)?;
        if tensor.shape().len() == 3 {
            let shape = [&[1], tensor.shape()].concat();
            tensor = tensor.with_shape(shape)?;
        }
        let base = args
            .input
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let n = tensor.shape()[0];
        let names: Vec<String> = if n == 1 {
            vec![base]
        } else {
            (0..n).map(|i| format!("{base}#{i}")).collect()
        };
        rows = score_rows(&names, &logits_of(&mut exec, &tensor)?)?;
    }
    match &args.out {
        Some(path) => mce_core::eval::write_scores_csv(path, &rows)?,
        None => {
            let mut text = String::from("filename,logit,score\n");
            for r in &rows {
                text += &format!("{},{},{}\n", r.filename, r.logit, r.score);
            }
            emit(None, &text)?;
        }
    }
    Ok(())
}

fn eval(args: EvalArgs) -> CmdResult {
    let scores = read_scores_csv(&args.scores)?;
    let labels = read_labels_csv(&args.labels)?;
    let (scores, labels) = join_scores_labels(&scores, &labels)?;
    let report = evaluate(&scores, &labels, args.threshold)?;
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&report)? + "\n",
        Format::Csv => format!("{}\n{}\n", mce_core::eval::METRICS_CSV_HEADER, report.csv_row()),
    };
    emit(args.out.as_deref(), &text)
}

fn bench(args: BenchArgs) -> CmdResult {
    let size_bytes = std::fs::metadata(&args.model)
        .map_err(|e| format!("{}: {e}", args.model.display()))?
        .len();
    let graph = read_model(&args.model)?;
    let data = Dataset::load(&args.data)?;
    let mut exec = Executor::new(&graph)?;
    let precision = graph.precision().as_str().to_string();

    let latency = bench_latency(&mut exec, &data, args.batch, args.warmup, args.reps)?;
    info!(
        "latency {:.3} ms/image over {} batches",
        latency.stats.mean_ms, args.reps
    );

    let (throughput, power) = if let Some(path) = &args.power_file {
        let mut sampler = FileSampler {
            path: path.clone(),
            scale: args.power_scale,
        };
        let idle = Duration::from_secs_f64(args.idle_secs.max(0.0));
        let interval = Duration::from_millis(args.sample_ms.max(1));
        let (run, trace) = measure_power(&mut sampler, idle, interval, || {
            bench_throughput(&mut exec, &data, args.batch)
        })?;
        (run?, Some(PowerStats::from_trace(&trace, args.reference_w)?))
    } else {
        let run = bench_throughput(&mut exec, &data, args.batch)?;
        let power = match &args.power_trace {
            Some(path) => Some(PowerStats::from_trace(&PowerTrace::load(path)?, args.reference_w)?),
            None => None,
        };
        (run, power)
    };
    info!(
        "throughput {:.2} images/s ({} images, {} invocations)",
        throughput.stats.images_per_second, throughput.stats.images, throughput.stats.invocations
    );

    let row = BenchRow {
        precision: precision.clone(),
        size_bytes,
        mean_latency_ms: latency.stats.mean_ms,
        throughput_ips: throughput.stats.images_per_second,
        power_mean_w: power.map(|p| p.mean_w),
        power_delta_w: power.map(|p| p.delta_w),
        power_ratio: power.and_then(|p| p.ratio),
    };
    let run_seconds = power.map(|p| p.run_seconds).unwrap_or(throughput.stats.seconds);
    let report = match &args.report {
        Some(path) if path.exists() => BenchReport::load(path)?.with_row(row)?,
        _ => make_report(vec![row], ReportMeta::default())?,
    };
    let mut report = report;
    report.meta.timer_resolution_ns = Some(timer_resolution().as_nanos() as u64);
    report.meta.run_seconds.insert(precision, run_seconds);
    if let Some(path) = &args.report {
        report.save(path)?;
    }

    let summary = serde_json::json!({
        "model": args.model.display().to_string(),
        "latency": latency.stats,
        "throughput": throughput.stats,
        "power": power,
        "report": report,
    });
    emit(None, &(serde_json::to_string_pretty(&summary)? + "\n"))
}

fn inspect(args: InspectArgs) -> CmdResult {
    let graph = read_model(&args.model)?;
    emit(None, &(serde_json::to_string_pretty(&Manifest::of(&graph))? + "\n"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MCE_LOG", "warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::BuildZoo(a) => build_zoo(a),
        Command::Compress(a) => compress(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
