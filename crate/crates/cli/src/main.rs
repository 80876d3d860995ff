//! `ppac`: generate synthetic scenes, train refinement networks, refine
//! estimates and score them.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error,
//! 3 numerical failure. Reports go to stdout, diagnostics to stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ppac_core::net::{NetKind, Task};

#[derive(Parser, Debug)]
#[command(name = "ppac", version, about = "Confidence-aware pixel-adaptive refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic scene bundles and their manifest.
    Gen(GenArgs),
    /// Train a refinement network from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Refine one estimate with a trained checkpoint.
    Refine(RefineArgs),
    /// Score a prediction against ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of every layer and network at 64-bit.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Parameter count per branch.
    Params {
        #[arg(long, value_parser = parse_kind)]
        kind: NetKind,
        #[arg(long, value_parser = parse_task)]
        task: Task,
    },
}

#[derive(clap::Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_task, default_value = "flow")]
    task: Task,
    /// `HxW`, e.g. 96x128.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    outlier_density: Option<f64>,
    #[arg(long)]
    blur_radius: Option<usize>,
}

#[derive(clap::Args, Debug)]
struct RefineArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `.flo` for flow; the channel stem (`<stem>.c<k>.pfm`) for segmentation.
    #[arg(long)]
    estimate: PathBuf,
    /// Scene directory holding `logprob.c<k>.pfm`, or the channel stem itself.
    #[arg(long)]
    logprob: PathBuf,
    #[arg(long)]
    guidance: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    /// `.flo` flow or `.png` class map.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Object label map; enables the boundary metric for flow.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = ppac_core::data::BOUNDARY_RADIUS)]
    band_radius: f64,
}

fn parse_kind(s: &str) -> Result<NetKind, String> {
    s.parse().map_err(|e: ppac_core::Error| e.to_string())
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: ppac_core::Error| e.to_string())
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let dim = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad dimension `{v}`"));
    Ok((dim(h)?, dim(w)?))
}

fn init_threads() -> Result<(), commands::Failure> {
    let Ok(value) = std::env::var("PPAC_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| commands::Failure::Usage(format!("PPAC_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| commands::Failure::Usage(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train { config, seed } => commands::train(&config, seed),
        Command::Refine(a) => commands::refine(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck { seed, tolerance } => commands::gradcheck(seed, tolerance),
        Command::Params { kind, task } => commands::params(kind, task),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
