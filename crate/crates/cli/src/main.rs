use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use nvflow::pricing::render_csv;
use nvflow::qmc::PointSource;
use nvflow::schemes::SchemeKind;
use nvflow_cli::commands::{self, Command, RunOptions};
use nvflow_cli::config::{self, RunConfig};

const EXIT_INVALID: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    /// Price every (scheme, K) cell of the config.
    Price,
    /// Convergence study over the K grid with fitted slopes.
    Converge,
    /// Run-time comparison following the doubling protocol.
    Bench,
}

/// Weak approximation of stochastic-volatility models by splitting schemes.
#[derive(Debug, Parser)]
#[command(name = "nvflow", version)]
struct Args {
    command: Cmd,
    /// JSON config file or preset name (sabr, sabr_fig1, gensabr, multisabr,
    /// multisabr_avg, multisabr_lower).
    config: String,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// CSV destination. Without it the CSV goes to stdout and the report to stderr.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Comma-separated scheme subset, e.g. euler,nv,nvd.
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<String>>,
    /// Merge adjacent drift flows across step boundaries.
    #[arg(long)]
    fusion: bool,
    /// Seed of the Monte Carlo fallback; ignored for Sobol.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the trajectory count.
    #[arg(long)]
    m: Option<u64>,
    /// Override the K grid (comma-separated).
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Leave the wall_seconds column blank.
    #[arg(long)]
    omit_timing: bool,
    /// Print the effective config as JSON and exit.
    #[arg(long)]
    dump_config: bool,
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn apply_overrides(cfg: &mut RunConfig, args: &Args) -> Result<(), String> {
    if let Some(list) = &args.schemes {
        cfg.schemes = list
            .iter()
            .map(|s| s.trim().parse::<SchemeKind>())
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
    }
    if args.fusion {
        cfg.fusion = true;
    }
    if let Some(seed) = args.seed {
        match &mut cfg.sequence {
            PointSource::Sobol => eprintln!("warning: --seed ignored, the sequence is sobol"),
            PointSource::Mc { seed: s } => *s = seed,
        }
    }
    if let Some(m) = args.m {
        cfg.m = m;
    }
    if let Some(k) = &args.k {
        cfg.ks = k.clone();
    }
    if let Some(out) = &args.output {
        cfg.output = Some(out.clone());
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    let mut cfg = match config::load(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_INVALID, e),
    };
    if let Err(e) = apply_overrides(&mut cfg, &args) {
        return fail(EXIT_INVALID, e);
    }
    if args.dump_config {
        print!("{}", cfg.to_json());
        return ExitCode::SUCCESS;
    }
    let model = match cfg.validate() {
        Ok(m) => m,
        Err(e) => return fail(EXIT_INVALID, e),
    };
    let cmd = match args.command {
        Cmd::Price => Command::Price,
        Cmd::Converge => Command::Converge,
        Cmd::Bench => Command::Bench,
    };
    let opts = RunOptions {
        threads: args.threads.unwrap_or(0),
        omit_timing: args.omit_timing,
    };
    let out = match commands::run(cmd, &cfg, &model, &opts) {
        Ok(o) => o,
        Err(e) if e.is_validation() => return fail(EXIT_INVALID, e),
        Err(e) => return fail(EXIT_RUNTIME, e),
    };
    let csv = render_csv(&out.rows);
    match &cfg.output {
        Some(path) => {
            if let Err(e) = std::fs::write(path, &csv) {
                return fail(EXIT_RUNTIME, format!("cannot write {}: {e}", path.display()));
            }
            for line in &out.report {
                println!("{line}");
            }
        }
        None => {
            for line in &out.report {
                eprintln!("{line}");
            }
            print!("{csv}");
        }
    }
    ExitCode::SUCCESS
}
