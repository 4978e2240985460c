//! Command-line parsing and dispatch for the `tqt` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::run::{run, RunConfig};
use crate::selectors::Selector;
use crate::softmax_bench::{compare_rows, exp_grid, grid_csv, ExpSample, RowSummary};
use crate::sweep::{sweep, to_csv, Axis};
use crate::trace::trace;
use crate::workload::{Workload, WorkloadSpec};

pub const THREADS_ENV: &str = "TQT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "tqt", version, about = "Quantized tiled attention harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic workload as TQT1 tensors plus manifest.json.
    Gen {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prefill and decode one workload and report errors against the reference.
    Run {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// Leave wall-clock timings out of the report.
        #[arg(long)]
        no_timings: bool,
    },
    /// One run per configuration along an axis.
    Sweep {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        output: OutputArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated; defaults depend on the axis.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        values: Vec<i64>,
    },
    /// SAS exponent against exp over a grid, optionally on random rows too.
    SoftmaxBench {
        #[arg(long, default_value_t = -8.0, allow_negative_numbers = true)]
        lo: f32,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        hi: f32,
        #[arg(long, default_value_t = 801)]
        points: usize,
        #[arg(long, default_value_t = -6, allow_negative_numbers = true)]
        nr: i32,
        /// Random softmax rows to compare; 0 skips the row comparison.
        #[arg(long, default_value_t = 0)]
        rows: usize,
        #[arg(long, default_value_t = 128)]
        len: usize,
        #[arg(long, default_value_t = 3.0)]
        sigma: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Dump per-tile m, l, S and P for one head's prefill.
    Trace {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct WorkloadArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f32,
    #[arg(long, value_delimiter = ',')]
    pub outlier_heads: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub outlier_channels: usize,
    #[arg(long, default_value_t = 8.0)]
    pub outlier_magnitude: f32,
    #[arg(long, default_value_t = 16)]
    pub decode_steps: usize,
}

impl WorkloadArgs {
    pub fn spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            seed: self.seed,
            n: self.n,
            d: self.d,
            heads: self.heads,
            sigma: self.sigma,
            outlier_heads: self.outlier_heads.clone(),
            outlier_channels: self.outlier_channels,
            outlier_magnitude: self.outlier_magnitude,
            decode_steps: self.decode_steps,
        }
    }
}

/// A saved workload directory, or generator flags for an in-memory one.
#[derive(Debug, Clone, Args)]
pub struct SourceArgs {
    #[arg(long)]
    pub workload: Option<PathBuf>,
    #[command(flatten)]
    pub generate: WorkloadArgs,
}

impl SourceArgs {
    pub fn load(&self) -> Result<Workload> {
        match &self.workload {
            Some(dir) => Workload::load(dir),
            None => Workload::generate(&self.generate.spec()),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, default_value_t = 64)]
    pub br: usize,
    #[arg(long, default_value_t = 64)]
    pub bc: usize,
    /// Decode buffer size.
    #[arg(long, default_value_t = 64)]
    pub nb: usize,
    #[arg(long, default_value_t = -6, allow_negative_numbers = true)]
    pub nr: i32,
    /// 4 mixes 2- and 4-bit heads, 2 stores every head at 2 bits, 8 keeps INT8.
    #[arg(long, default_value_t = 4, conflicts_with = "no_q2")]
    pub bits: u8,
    /// Same as `--bits 8`.
    #[arg(long)]
    pub no_q2: bool,
    /// 2-bit heads under `--bits 4`; defaults to half.
    #[arg(long)]
    pub heads2bit: Option<usize>,
    #[arg(long, value_enum, default_value_t = Selector::Priority)]
    pub selector: Selector,
    #[arg(long, default_value_t = 0)]
    pub selector_seed: u64,
    #[arg(long)]
    pub causal: bool,
    /// Report the reference as the kernel output.
    #[arg(long)]
    pub oracle_only: bool,
}

impl RunArgs {
    pub fn config(&self) -> RunConfig {
        RunConfig {
            block_rows: self.br,
            block_cols: self.bc,
            buffer_size: self.nb,
            threshold: self.nr,
            bits: if self.no_q2 { 8 } else { self.bits },
            heads2bit: self.heads2bit,
            selector: self.selector,
            selector_seed: self.selector_seed,
            causal: self.causal,
            oracle_only: self.oracle_only,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Defaults to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

impl OutputArgs {
    fn emit(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(path) => {
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
                }
                fs::write(path, text).map_err(|e| CliError::io(path, e))
            }
            None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::io("<stdout>", e)),
        }
    }
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct SoftmaxReport<'a> {
    threshold: i32,
    grid_max_abs_err: f32,
    grid: &'a [ExpSample],
    rows: Option<RowSummary>,
}

/// Caps the rayon pool from `TQT_THREADS` when it is set.
pub fn init_threads(value: Option<&str>) -> Result<()> {
    let Some(v) = value else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::validation(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::validation(format!("thread pool: {e}")))
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { workload, out } => {
            let w = Workload::generate(&workload.spec())?;
            w.save(&out)
        }
        Command::Run { source, run: args, output, no_timings } => {
            let w = source.load()?;
            let mut report = run(&w, &args.config())?;
            if no_timings {
                report.timings = None;
            }
            let text = match output.format.unwrap_or(Format::Json) {
                Format::Json => report.to_json(),
                Format::Csv => report.steps_csv()?,
            };
            output.emit(&text)
        }
        Command::Sweep { source, run: args, output, axis, values } => {
            let w = source.load()?;
            let values = if values.is_empty() { axis.default_values(w.spec.heads) } else { values };
            let rows = sweep(&w, &args.config(), axis, &values)?;
            let text = match output.format.unwrap_or(Format::Csv) {
                Format::Csv => to_csv(&rows)?,
                Format::Json => json(&rows),
            };
            output.emit(&text)
        }
        Command::SoftmaxBench { lo, hi, points, nr, rows, len, sigma, seed, output } => {
            let grid = exp_grid(lo, hi, points, nr)?;
            let text = match output.format.unwrap_or(Format::Csv) {
                Format::Csv => grid_csv(&grid)?,
                Format::Json => {
                    let rows = if rows > 0 { Some(compare_rows(rows, len, sigma, nr, seed)?) } else { None };
                    let grid_max_abs_err = grid.iter().map(|s| s.abs_err).fold(0.0, f32::max);
                    json(&SoftmaxReport { threshold: nr, grid_max_abs_err, grid: &grid, rows })
                }
            };
            output.emit(&text)
        }
        Command::Trace { source, run: args, head, out } => {
            let w = source.load()?;
            trace(&w, &args.config(), head, Path::new(&out)).map(|_| ())
        }
    }
}
