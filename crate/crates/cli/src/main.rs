//! Command-line harness for the blockstream encoder: weight generation,
//! dual-path runs, equivalence/leak checks, and encoder-only RTF
//! benchmarking.
//!
//! All reports are stable `key=value` lines and include a digest of the
//! canonical config text so CI can pin goldens. Exit codes: 0 success,
//! 1 check failure, 2 usage/config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use blockstream::io::{load_features, load_weights, save_features_binary, save_features_text,
                      save_weights, FeatureDtype};
use blockstream::{
    check_equivalence, encoder_forward_parallel, gen_weights, plan_blocks, random_features,
    ModelConfig, ModelWeights, Precision, Scalar, StreamingSession, Tensor,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "blockstream", version, about = "Streaming block-processing encoder harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic random weight file for a config.
    GenWeights {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one forward path over a feature file (or synthetic features).
    Run {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value_t = Mode::Parallel)]
        mode: Mode,
        #[command(flatten)]
        input: InputArgs,
        /// Write the output features here (format chosen by --out-format).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = OutFormat::Binary)]
        out_format: OutFormat,
    },
    /// Run both paths, compare them, and probe for lookahead leaks.
    Check {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
    /// Time a forward path on synthetic audio and report the RTF.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        /// Seconds of synthetic audio per repeat.
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        #[arg(long, value_enum, default_value_t = Mode::Streaming)]
        mode: Mode,
        /// Repeats; the median wall clock is reported.
        #[arg(long, default_value_t = 5)]
        repeat: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Config file (flat key=value). Optional when --weights is given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight file; when omitted, weights are generated from --gen-seed.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Seed for generated weights when no --weights file is given.
    #[arg(long, default_value_t = 0)]
    gen_seed: u64,
}

#[derive(Args)]
struct InputArgs {
    /// Feature file (binary or whitespace text), one 10 ms frame per row.
    #[arg(long, conflicts_with = "random")]
    input: Option<PathBuf>,
    /// Synthesize this many random frames instead of reading a file.
    #[arg(long)]
    random: Option<usize>,
    /// Seed for --random features.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Parallel,
    Streaming,
}

impl Mode {
    fn as_str(self) -> &'static str {
        match self {
            Mode::Parallel => "parallel",
            Mode::Streaming => "streaming",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Binary,
    Text,
}

/// Anything that should terminate the process with a specific exit code.
enum CliError {
    /// Bad flags, config, or files: exit 2.
    Usage(String),
    /// A check ran to completion and failed: exit 1.
    CheckFailed,
}

impl From<blockstream::Error> for CliError {
    fn from(e: blockstream::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn read_config(path: &Path) -> Result<ModelConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    Ok(ModelConfig::from_text(&text)?)
}

/// Resolve (config, f64 weights) from the --config/--weights flags, then
/// apply the BLOCKSTREAM_PRECISION env override if set.
fn resolve_model(args: &ModelArgs) -> Result<(ModelConfig, ModelWeights<f64>), CliError> {
    let (mut cfg, weights) = match (&args.config, &args.weights) {
        (_, Some(wpath)) => {
            let (file_cfg, weights) = load_weights(wpath)?;
            if let Some(cpath) = &args.config {
                let cfg = read_config(cpath)?;
                if cfg != file_cfg {
                    return Err(CliError::Usage(format!(
                        "config {} disagrees with the config embedded in {}",
                        cpath.display(),
                        wpath.display()
                    )));
                }
            }
            (file_cfg, weights)
        }
        (Some(cpath), None) => {
            let cfg = read_config(cpath)?;
            let weights = gen_weights(&cfg, args.gen_seed)?;
            (cfg, weights)
        }
        (None, None) => {
            return Err(CliError::Usage(
                "either --config or --weights is required".into(),
            ))
        }
    };
    if let Ok(p) = std::env::var("BLOCKSTREAM_PRECISION") {
        cfg.precision = Precision::parse(&p)?;
    }
    Ok((cfg, weights))
}

fn resolve_input(args: &InputArgs, input_dim: usize) -> Result<Tensor<f64>, CliError> {
    match (&args.input, args.random) {
        (Some(path), _) => {
            let feats = load_features(path)?;
            if feats.cols() != input_dim {
                return Err(CliError::Usage(format!(
                    "feature file has {} columns, config expects input_dim={}",
                    feats.cols(),
                    input_dim
                )));
            }
            Ok(feats)
        }
        (None, Some(t)) => Ok(random_features(t, input_dim, args.seed)),
        (None, None) => Err(CliError::Usage(
            "either --input or --random is required".into(),
        )),
    }
}

fn config_digest(cfg: &ModelConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_text().as_bytes()))
}

fn print_header(cmd: &str, cfg: &ModelConfig) {
    println!("command={cmd}");
    println!("config_digest={}", config_digest(cfg));
    println!("precision={}", cfg.precision.as_str());
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    xs[xs.len() / 2]
}

fn cmd_gen_weights(config: &Path, seed: u64, out: &Path) -> Result<(), CliError> {
    let cfg = read_config(config)?;
    let weights = gen_weights(&cfg, seed)?;
    save_weights(out, &cfg, &weights)?;
    print_header("gen-weights", &cfg);
    println!("seed={seed}");
    println!("tensor_count={}", weights.tensors().len());
    println!("param_count={}", weights.num_params());
    println!("out={}", out.display());
    Ok(())
}

/// Run the selected path at the config's precision and return the output
/// as f64 rows (f32 results are widened for reporting only).
fn run_forward(
    cfg: &ModelConfig,
    weights: &ModelWeights<f64>,
    frames: &Tensor<f64>,
    mode: Mode,
) -> Result<Tensor<f64>, CliError> {
    fn go<S: Scalar>(
        cfg: &ModelConfig,
        weights: &ModelWeights<S>,
        frames: &Tensor<S>,
        mode: Mode,
    ) -> blockstream::Result<Tensor<S>> {
        match mode {
            Mode::Parallel => encoder_forward_parallel(frames, cfg, weights),
            Mode::Streaming => blockstream::encoder_forward_streaming(frames, cfg, weights),
        }
    }
    Ok(match cfg.precision {
        Precision::F64 => go(cfg, weights, frames, mode)?,
        Precision::F32 => {
            go(cfg, &weights.cast::<f32>(), &frames.cast::<f32>(), mode)?.cast::<f64>()
        }
    })
}

fn cmd_run(
    model: &ModelArgs,
    mode: Mode,
    input: &InputArgs,
    out: Option<&Path>,
    out_format: OutFormat,
) -> Result<(), CliError> {
    let (cfg, weights) = resolve_model(model)?;
    let frames = resolve_input(input, cfg.input_dim)?;
    let start = Instant::now();
    let output = run_forward(&cfg, &weights, &frames, mode)?;
    let wall = start.elapsed().as_secs_f64();
    print_header("run", &cfg);
    println!("mode={}", mode.as_str());
    println!("input_frames={}", frames.rows());
    println!("emitted_frames={}", output.rows());
    println!("wall_clock_seconds={wall:.6}");
    if let Some(path) = out {
        match out_format {
            OutFormat::Binary => save_features_binary(path, &output, FeatureDtype::F64)?,
            OutFormat::Text => save_features_text(path, &output)?,
        }
        println!("out={}", path.display());
    }
    Ok(())
}

/// Max |change| in protected rows when a superframe outside every earlier
/// block's receptive field is perturbed. Must be exactly 0.0: block i may
/// see nothing past its lookahead.
fn leak_probe(
    cfg: &ModelConfig,
    weights: &ModelWeights<f64>,
    frames: &Tensor<f64>,
) -> Result<f64, CliError> {
    let baseline = run_forward(cfg, weights, frames, Mode::Parallel)?;
    let n_super = frames.rows() / cfg.stack_factor;
    let plan = plan_blocks(n_super, cfg.block_size, cfg.lookahead);
    let mut worst = 0.0f64;
    for (i, &(_, la_end)) in plan.lookaheads.iter().enumerate() {
        // first raw frame not visible to blocks 0..=i
        let frame = la_end * cfg.stack_factor;
        if frame >= frames.rows() {
            continue;
        }
        let mut perturbed = frames.clone();
        perturbed.data_mut()[frame * cfg.input_dim] += 10.0;
        let out = run_forward(cfg, weights, &perturbed, Mode::Parallel)?;
        let protected_rows = plan.centers[i].1; // rows of blocks 0..=i
        for row in 0..protected_rows {
            for (a, b) in baseline.row(row).iter().zip(out.row(row)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

fn cmd_check(model: &ModelArgs, input: &InputArgs, tolerance: f64) -> Result<(), CliError> {
    let (cfg, weights) = resolve_model(model)?;
    let frames = resolve_input(input, cfg.input_dim)?;
    let report = match cfg.precision {
        Precision::F64 => check_equivalence(&frames, &cfg, &weights)?,
        Precision::F32 => {
            check_equivalence(&frames.cast::<f32>(), &cfg, &weights.cast::<f32>())?
        }
    };
    let leak = leak_probe(&cfg, &weights, &frames)?;
    print_header("check", &cfg);
    println!("input_frames={}", frames.rows());
    println!("emitted_frames={}", report.emitted_rows);
    println!("tolerance={tolerance:e}");
    println!("max_abs_diff={:e}", report.max_abs_diff);
    if let Some((row, col)) = report.argmax {
        println!("argmax_row={row}");
        println!("argmax_col={col}");
    }
    println!("leak_max_abs_change={leak:e}");
    let equiv_ok = report.max_abs_diff <= tolerance;
    let leak_ok = leak == 0.0;
    println!("equivalence_pass={equiv_ok}");
    println!("leak_pass={leak_ok}");
    if equiv_ok && leak_ok {
        println!("status=pass");
        Ok(())
    } else {
        println!("status=fail");
        Err(CliError::CheckFailed)
    }
}

fn cmd_bench(
    model: &ModelArgs,
    seconds: f64,
    mode: Mode,
    repeat: usize,
    seed: u64,
) -> Result<(), CliError> {
    if repeat == 0 || seconds <= 0.0 {
        return Err(CliError::Usage("--repeat and --seconds must be positive".into()));
    }
    let (cfg, weights) = resolve_model(model)?;
    let n_frames = (seconds * 100.0).round() as usize; // 10 ms per frame
    let frames = random_features(n_frames, cfg.input_dim, seed);
    let n_super = n_frames / cfg.stack_factor;
    let audio_seconds = cfg.audio_seconds(n_super);
    let n_blocks = plan_blocks(n_super, cfg.block_size, cfg.lookahead).num_blocks();

    let mut walls = Vec::with_capacity(repeat);
    let mut block_medians = Vec::with_capacity(repeat);
    for _ in 0..repeat {
        match (mode, cfg.precision) {
            (Mode::Parallel, _) => {
                let start = Instant::now();
                run_forward(&cfg, &weights, &frames, Mode::Parallel)?;
                walls.push(start.elapsed().as_secs_f64());
            }
            (Mode::Streaming, Precision::F64) => {
                let (w, b) = bench_streaming(&cfg, &weights, &frames)?;
                walls.push(w);
                block_medians.push(b);
            }
            (Mode::Streaming, Precision::F32) => {
                let (w, b) = bench_streaming(&cfg, &weights.cast::<f32>(), &frames.cast::<f32>())?;
                walls.push(w);
                block_medians.push(b);
            }
        }
    }
    let wall = median(walls);
    print_header("bench", &cfg);
    println!("mode={}", mode.as_str());
    println!("repeat={repeat}");
    println!("input_frames={n_frames}");
    println!("num_blocks={n_blocks}");
    println!("audio_seconds={audio_seconds}");
    println!("wall_clock_seconds={wall:.6}");
    println!("rtf={:.6}", wall / audio_seconds);
    if matches!(mode, Mode::Streaming) {
        println!("per_block_compute_ms={:.6}", median(block_medians) * 1e3);
        println!(
            "first_emission_latency_ms={}",
            cfg.first_emission_latency_ms()
        );
    }
    Ok(())
}

/// One streaming pass pushed block-by-block; returns (total wall clock,
/// median per-block compute time).
fn bench_streaming<S: Scalar>(
    cfg: &ModelConfig,
    weights: &ModelWeights<S>,
    frames: &Tensor<S>,
) -> Result<(f64, f64), CliError> {
    let chunk = cfg.block_size * cfg.stack_factor;
    let mut session = StreamingSession::open(cfg.clone(), Arc::new(weights.clone()))?;
    let mut block_times = Vec::new();
    let start = Instant::now();
    let mut at = 0;
    while at < frames.rows() {
        let end = (at + chunk).min(frames.rows());
        let t0 = Instant::now();
        let emitted = session.push(&frames.slice_rows(at, end))?;
        if emitted.rows() > 0 {
            block_times.push(t0.elapsed().as_secs_f64());
        }
        at = end;
    }
    let t0 = Instant::now();
    let tail = session.flush()?;
    if tail.rows() > 0 {
        block_times.push(t0.elapsed().as_secs_f64());
    }
    let wall = start.elapsed().as_secs_f64();
    let per_block = if block_times.is_empty() { 0.0 } else { median(block_times) };
    Ok((wall, per_block))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenWeights { config, seed, out } => cmd_gen_weights(config, *seed, out),
        Command::Run { model, mode, input, out, out_format } => {
            cmd_run(model, *mode, input, out.as_deref(), *out_format)
        }
        Command::Check { model, input, tolerance } => cmd_check(model, input, *tolerance),
        Command::Bench { model, seconds, mode, repeat, seed } => {
            cmd_bench(model, *seconds, *mode, *repeat, *seed)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::CheckFailed) => ExitCode::from(1),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
