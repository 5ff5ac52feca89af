//! `see` — event-based eye-tracking CLI: inference, benchmarking,
//! architecture search, and prediction evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use see_core::container::load_model_file;
use see_core::error::{Error, Result};
use see_core::events::{parse_events, slice_clips, voxelize, EventFormat};
use see_core::head::{run_sequence_with, BackbonePath};
use see_core::io::{read_accuracy_csv, read_predictions_csv, write_candidates_csv, write_predictions_csv};
use see_core::metrics::{format_report, mean_distance, pk_accuracy, LabeledPrediction};
use see_core::model::Model;
use see_core::search::{pareto_front, search_run, synthetic_accuracy, SearchSpace};
use see_core::sim::{HwConfig, SparsityModel};
use see_core::tensor::SparseTensor;

#[derive(Parser)]
#[command(name = "see", version, about = "Sparse event-based eye tracking")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run inference over an event file and write a prediction CSV.
    Run(RunArgs),
    /// Time sparse or dense backbone execution and report MAC counts.
    Bench(BenchArgs),
    /// Sample subnets, filter by simulated latency and weight budget.
    Search(SearchArgs),
    /// Score a prediction CSV against ground truth.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Auto,
    Native,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Sparse,
    Dense,
}

#[derive(Args)]
struct InputArgs {
    /// Event file (native binary or CSV).
    #[arg(long)]
    events: PathBuf,
    /// Weight container produced by this toolchain.
    #[arg(long)]
    weights: PathBuf,
    /// Event file format; auto picks CSV for .csv extensions.
    #[arg(long, value_enum, default_value = "auto")]
    format: FormatArg,
    /// Sensor height; must match the container's voxel geometry.
    #[arg(long)]
    height: Option<u16>,
    /// Sensor width; must match the container's voxel geometry.
    #[arg(long)]
    width: Option<u16>,
    /// Clip window length in microseconds.
    #[arg(long)]
    window_us: u64,
    /// Clip origin timestamp; "first" anchors at the first event.
    #[arg(long, default_value = "first")]
    t0: String,
    /// Emit at least this many clips even if the stream is shorter.
    #[arg(long, default_value_t = 0)]
    min_clips: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Prediction CSV path.
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Number of timed repetitions over the clip sequence.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Backbone execution path to benchmark.
    #[arg(long, value_enum, default_value = "sparse")]
    mode: ModeArg,
    /// Optionally write the predictions of the benchmarked mode.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    /// Search space TOML ([space] plus optional [sparsity]).
    #[arg(long)]
    space: PathBuf,
    /// Hardware config TOML; defaults apply to missing fields.
    #[arg(long)]
    hw: Option<PathBuf>,
    /// Number of subnets to sample.
    #[arg(long, short)]
    n: usize,
    /// Seed; all randomness flows from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Latency cap in seconds.
    #[arg(long)]
    cap: f64,
    /// Candidate CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Accuracy CSV ("spec_hash,accuracy") to join for the frontier.
    #[arg(long)]
    accuracy: Option<PathBuf>,
    /// Join deterministic synthetic accuracies instead of a file.
    #[arg(long, default_value_t = false)]
    synthetic_accuracy: bool,
    /// Frontier CSV output path; required when accuracies are joined.
    #[arg(long)]
    frontier: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction CSV ("clip_index,px,py").
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth CSV ("clip_index,px,py[,valid]").
    #[arg(long)]
    gt: PathBuf,
    /// Comma-separated pixel tolerances.
    #[arg(long, default_value = "5,10")]
    k: String,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Search(args) => cmd_search(args),
        Cmd::Eval(args) => cmd_eval(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(if e.is_io() { 1 } else { 2 });
    }
}

/// Load the container and turn the event file into voxel clips.
fn load_inputs(args: &InputArgs) -> Result<(Model, Vec<SparseTensor<f32>>)> {
    let model = load_model_file(&args.weights)?;
    let format = match args.format {
        FormatArg::Native => EventFormat::NativeBinary,
        FormatArg::Csv => EventFormat::Csv,
        FormatArg::Auto => {
            if args.events.extension().is_some_and(|e| e == "csv") {
                EventFormat::Csv
            } else {
                EventFormat::NativeBinary
            }
        }
    };
    let geometry = (model.voxel.height, model.voxel.width);
    if let Some(h) = args.height {
        if h != geometry.0 {
            return Err(Error::argument(format!(
                "--height {h} does not match container geometry {}",
                geometry.0
            )));
        }
    }
    if let Some(w) = args.width {
        if w != geometry.1 {
            return Err(Error::argument(format!(
                "--width {w} does not match container geometry {}",
                geometry.1
            )));
        }
    }
    let bytes = std::fs::read(&args.events)?;
    let events = parse_events(&bytes, format, geometry)?;
    let t0 = match args.t0.as_str() {
        "first" => events.first().map_or(0, |e| e.t),
        other => other
            .parse::<u64>()
            .map_err(|_| Error::argument(format!("--t0 must be \"first\" or a number, got {other:?}")))?,
    };
    let clips = slice_clips(&events, args.window_us, t0, args.min_clips, geometry)?;
    let tensors = clips
        .iter()
        .map(|c| voxelize(c, &model.voxel))
        .collect::<Result<Vec<_>>>()?;
    Ok((model, tensors))
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let (model, tensors) = load_inputs(&args.input)?;
    let (predictions, _) = run_sequence_with(&model, &tensors, BackbonePath::Sparse)?;
    std::fs::write(&args.output, write_predictions_csv(&predictions))?;
    println!(
        "wrote {} predictions to {}",
        predictions.len(),
        args.output.display()
    );
    Ok(())
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    if args.repeats == 0 {
        return Err(Error::argument("--repeats must be at least 1"));
    }
    let (model, tensors) = load_inputs(&args.input)?;
    let path = match args.mode {
        ModeArg::Sparse => BackbonePath::Sparse,
        ModeArg::Dense => BackbonePath::Dense,
    };
    let mut wall_ms = Vec::with_capacity(args.repeats);
    let mut predictions = Vec::new();
    let mut macs = 0u64;
    for _ in 0..args.repeats {
        let start = Instant::now();
        let (p, m) = run_sequence_with(&model, &tensors, path)?;
        wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
        predictions = p;
        macs = m;
    }
    wall_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let clips = tensors.len().max(1) as f64;
    let mean: f64 = wall_ms.iter().sum::<f64>() / wall_ms.len() as f64;
    let med = median(&wall_ms);
    let mode = match args.mode {
        ModeArg::Sparse => "sparse",
        ModeArg::Dense => "dense",
    };
    println!("mode={mode} clips={} repeats={}", tensors.len(), args.repeats);
    println!("macs_total={macs} macs_per_clip={:.1}", macs as f64 / clips);
    println!(
        "wall_ms mean={mean:.3} median={med:.3} per_clip_mean={:.3} per_clip_median={:.3}",
        mean / clips,
        med / clips
    );
    if let Some(out) = &args.output {
        std::fs::write(out, write_predictions_csv(&predictions))?;
    }
    Ok(())
}

/// Search space file: a [space] table plus an optional [sparsity] table.
#[derive(Deserialize)]
struct SpaceFile {
    space: SearchSpace,
    #[serde(default)]
    sparsity: Option<SparsityModel>,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::config(format!("{what} {}: {e}", path.display())))
}

fn cmd_search(args: SearchArgs) -> Result<()> {
    let space_file: SpaceFile = read_toml(&args.space, "space file")?;
    let hw: HwConfig = match &args.hw {
        Some(path) => read_toml(path, "hw file")?,
        None => HwConfig::default(),
    };
    let sparsity = space_file.sparsity.unwrap_or_default();
    let threads = match std::env::var("SEE_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map_err(|_| Error::config(format!("SEE_THREADS={v:?} is not a number")))?,
        Err(_) => 0,
    };
    let mut candidates = search_run(
        &space_file.space,
        &hw,
        args.cap,
        &sparsity,
        args.n,
        args.seed,
        threads,
    )?;

    let joined = if args.synthetic_accuracy {
        for c in &mut candidates {
            c.accuracy = Some(synthetic_accuracy(&c.spec, args.seed));
        }
        true
    } else if let Some(acc_path) = &args.accuracy {
        let text = std::fs::read_to_string(acc_path)?;
        let map = read_accuracy_csv(&text)?;
        for c in &mut candidates {
            c.accuracy = map.get(&c.spec.spec_hash_hex()).copied();
        }
        true
    } else {
        false
    };

    std::fs::write(&args.out, write_candidates_csv(&candidates))?;
    println!("wrote {} candidates to {}", candidates.len(), args.out.display());

    if joined {
        let Some(frontier_path) = &args.frontier else {
            return Err(Error::argument(
                "--frontier is required when accuracies are joined",
            ));
        };
        let with_acc: Vec<_> = candidates
            .iter()
            .filter(|c| c.accuracy.is_some())
            .cloned()
            .collect();
        let front = pareto_front(&with_acc)?;
        std::fs::write(frontier_path, write_candidates_csv(&front))?;
        println!(
            "wrote {} frontier members to {}",
            front.len(),
            frontier_path.display()
        );
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let pred_text = std::fs::read_to_string(&args.pred)?;
    let gt_text = std::fs::read_to_string(&args.gt)?;
    let preds = read_predictions_csv(&pred_text)?;
    let gts = read_predictions_csv(&gt_text)?;
    if preds.len() != gts.len() {
        return Err(Error::argument(format!(
            "{} predictions vs {} ground-truth rows",
            preds.len(),
            gts.len()
        )));
    }
    let mut gt_map = std::collections::HashMap::new();
    for (idx, px, py, valid) in &gts {
        if gt_map.insert(*idx, (*px, *py, *valid)).is_some() {
            return Err(Error::argument(format!("duplicate ground-truth index {idx}")));
        }
    }
    let mut samples = Vec::with_capacity(preds.len());
    for (idx, px, py, _) in &preds {
        let Some(&(gx, gy, valid)) = gt_map.get(idx) else {
            return Err(Error::argument(format!(
                "prediction index {idx} has no ground-truth row"
            )));
        };
        samples.push(LabeledPrediction {
            gt: (gx, gy),
            pred: (*px, *py),
            valid,
        });
    }
    let ks = args
        .k
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| Error::argument(format!("bad k value {s:?}")))
        })
        .collect::<Result<Vec<u32>>>()?;
    if ks.is_empty() {
        return Err(Error::argument("at least one k is required"));
    }
    let pk: Vec<(u32, f64)> = ks
        .iter()
        .map(|&k| pk_accuracy(&samples, k as f64).map(|v| (k, v)))
        .collect::<Result<_>>()?;
    let dist = mean_distance(&samples)?;
    let n = samples.iter().filter(|s| s.valid).count();
    println!("{}", format_report(&pk, dist, n));
    Ok(())
}
