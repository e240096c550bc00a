//! Command-line front end. `run_cli` returns the process exit code:
//! 0 on success, 1 when a verification fails, 2 on usage errors.
//!
//! A `--config <file>` of `key=value` lines (with `#` comments) supplies
//! defaults for any flag not given on the command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{
    approximation_error_sweep, decode_bench, emit_csv, log_log_slope, median_output_mse, DecodeConfig, DecodeKind,
    DecodeMode, SweepConfig,
};
use crate::error::{Result, RfaError};
use crate::toytrain::{eval_toy, gen_recency_task, train_toy, write_curve_csv, ToyKind, ToyTask, TrainConfig};
use crate::verify::{self, CheckOutcome};

#[derive(Debug, Parser)]
#[command(name = "rfa", version, about = "Random feature attention: verification, sweeps, benchmarks, toy training")]
pub struct Cli {
    /// Root seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// File of `key=value` lines supplying defaults for flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Feature-map unbiasedness and variance law.
    VerifyKernel(KernelArgs),
    /// Causal/cross/stateful/unnormalized equivalences.
    VerifyRecurrence(RecurrenceArgs),
    /// Analytic against finite-difference gradients for every kernel.
    GradCheck(GradArgs),
    /// Approximation error against D, written as CSV.
    SweepD(SweepArgs),
    /// Greedy decoding time and memory, written as CSV.
    BenchDecode(BenchArgs),
    /// Train the toy recency model, writing the loss curve as CSV.
    TrainToy(ToyArgs),
    /// Every property suite; exit 0 iff all pass.
    VerifyAll,
}

#[derive(Debug, Args)]
pub struct KernelArgs {
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    /// D for the unbiasedness check.
    #[arg(long, default_value_t = 4)]
    pub feature_dim: usize,
    /// Fresh maps per pair / per (D, z) cell.
    #[arg(long, default_value_t = 100_000)]
    pub maps: usize,
    /// Unbiasedness limit in standard errors.
    #[arg(long, default_value_t = 4.0)]
    pub tolerance: f64,
    /// Relative limit on the variance law.
    #[arg(long, default_value_t = 0.1)]
    pub variance_tolerance: f64,
}

#[derive(Debug, Args)]
pub struct RecurrenceArgs {
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    #[arg(long, default_value_t = 64)]
    pub feature_dim: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 16, 64, 256])]
    pub lengths: Vec<usize>,
    /// Absolute limit for the recurrence against the prefix form.
    #[arg(long, default_value_t = 1e-10)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct GradArgs {
    /// Instances per kernel.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Relative-error limit.
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64, 128, 256])]
    pub feature_dims: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "rfa-gaussian")]
    pub kind: String,
    #[arg(long, default_value = "unconditional")]
    pub mode: String,
    #[arg(long, value_delimiter = ',', default_values_t = [256, 512, 1024, 2048])]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 64)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value = "bench.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long, default_value = "rfa-gated")]
    pub kind: String,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 50)]
    pub pool_size: usize,
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub vocab: usize,
    #[arg(long, default_value_t = 16)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 1)]
    pub lag: usize,
    #[arg(long, default_value = "toy.csv")]
    pub out: PathBuf,
}

/// Reads `key=value` lines, skipping blanks and `#` comments.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| RfaError::Parameter(format!("config line {}: expected key=value, got '{raw}'", i + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(RfaError::Parameter(format!("config line {}: empty key", i + 1)));
        }
        pairs.push((key.replace('_', "-"), value.trim().to_string()));
    }
    Ok(pairs)
}

fn config_path(argv: &[String]) -> Option<String> {
    argv.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            argv.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_owned)
        }
    })
}

/// Appends `--key value` for every config entry whose flag is absent from
/// `argv`, so command-line flags take precedence.
fn merge_config(argv: &[String], pairs: &[(String, String)]) -> Vec<String> {
    let mut merged = argv.to_vec();
    for (key, value) in pairs {
        let flag = format!("--{key}");
        let given = argv.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")));
        if !given {
            merged.push(flag);
            merged.push(value.clone());
        }
    }
    merged
}

fn report(outcomes: &[CheckOutcome]) -> i32 {
    for o in outcomes {
        println!("{}", o.line());
    }
    println!("{}", verify::summary_line(outcomes));
    if outcomes.iter().all(|o| o.passed) {
        0
    } else {
        1
    }
}

fn positive(name: &str, value: usize) -> Result<()> {
    if value == 0 {
        return Err(RfaError::Parameter(format!("--{name} must be at least 1")));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<i32> {
    let seed = cli.seed;
    match &cli.command {
        Command::VerifyKernel(a) => {
            positive("d", a.d)?;
            positive("feature-dim", a.feature_dim)?;
            positive("maps", a.maps)?;
            Ok(report(&[
            verify::check_unbiasedness(seed, a.d, a.feature_dim, 64, a.maps, a.tolerance),
            verify::check_variance_law(seed, a.d, &[1, 4, 16], &[0.5, 1.0, 2.0], a.maps, a.variance_tolerance),
            ]))
        }
        Command::VerifyRecurrence(a) => {
            positive("d", a.d)?;
            positive("feature-dim", a.feature_dim)?;
            let longest = a.lengths.iter().copied().max().unwrap_or(64).max(2);
            Ok(report(&[
                verify::check_exact_recurrence(seed, a.d, a.feature_dim, &a.lengths, 20, a.tolerance),
                verify::check_stateful_carry(seed, a.d, a.feature_dim, longest, 1e-12),
                verify::check_unnormalized(seed, a.d, a.feature_dim, longest.min(64), 1e-12, 1e-10),
            ]))
        }
        Command::GradCheck(a) => Ok(report(&[verify::check_gradients(seed, a.instances, a.tolerance)])),
        Command::SweepD(a) => {
            positive("d", a.d)?;
            let cfg = SweepConfig { d: a.d, instance_seed: seed, ..SweepConfig::default() };
            let records = approximation_error_sweep(&a.feature_dims, a.seeds, seed, &cfg)?;
            emit_csv(&records, &a.out)?;
            for (d, m) in median_output_mse(&records) {
                println!("D={d} median_mse_output={m:.6e}");
            }
            println!("wrote {} rows to {}", records.len(), a.out.display());
            Ok(0)
        }
        Command::BenchDecode(a) => {
            let kind: DecodeKind = a.kind.parse()?;
            let mode: DecodeMode = a.mode.parse()?;
            let cfg = DecodeConfig { d: a.d, num_features: a.feature_dim, warmup: a.warmup, reps: a.reps, seed, ..DecodeConfig::default() };
            let records = decode_bench(kind, mode, &a.lengths, a.batch, &cfg)?;
            emit_csv(&records, &a.out)?;
            if records.len() >= 2 {
                println!("log-log slope of total_seconds vs length: {:.3}", log_log_slope(&records));
            }
            println!("wrote {} rows to {}", records.len(), a.out.display());
            Ok(0)
        }
        Command::TrainToy(a) => {
            let task = ToyTask { vocab: a.vocab, seq_len: a.seq_len, lag: a.lag };
            let cfg = TrainConfig {
                learning_rate: a.lr,
                steps: a.steps,
                batch_size: a.batch,
                seed,
                kind: a.kind.parse::<ToyKind>()?,
                pool_size: a.pool_size,
                d: a.d,
                num_features: a.feature_dim,
                ..TrainConfig::default()
            };
            let (model, curve) = train_toy(seed, &task, &cfg)?;
            write_curve_csv(&curve, &a.out)?;
            let (ce, acc) = eval_toy(&model, &gen_recency_task(&task, seed ^ (1 << 40), 256)?)?;
            println!(
                "parameters={} eval_cross_entropy={ce:.4} eval_accuracy={acc:.4} chance={:.4}",
                model.parameter_count(),
                (task.vocab as f64).ln()
            );
            println!("wrote {} rows to {}", curve.len(), a.out.display());
            Ok(0)
        }
        Command::VerifyAll => Ok(report(&verify::verify_all(seed))),
    }
}

fn usage_error(msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    eprintln!("run `rfa --help` for usage");
    2
}

/// Parses `argv` (program name first), runs the subcommand, and returns the
/// exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<String> = argv.into_iter().map(|a| a.into().to_string_lossy().into_owned()).collect();
    let argv = match config_path(&argv) {
        Some(path) => match std::fs::read_to_string(Path::new(&path)) {
            Ok(text) => match parse_config_file(&text) {
                Ok(pairs) => merge_config(&argv, &pairs),
                Err(e) => return usage_error(e),
            },
            Err(e) => return usage_error(format!("cannot read config file {path}: {e}")),
        },
        None => argv,
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    println!("seed={}", cli.seed);
    println!("config={:?}", cli.command);
    match run(&cli) {
        Ok(code) => code,
        Err(e @ (RfaError::Parameter(_) | RfaError::UnsupportedKind(_))) => usage_error(e),
        Err(e) => {
            eprintln!("error: {e}");
            println!("SUMMARY passed=0 failed=1 failing=error");
            1
        }
    }
}
