use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use gph::{parse_config_with, run_experiment, snapshot_read, Command, Snapshot};

#[derive(Parser)]
#[command(name = "gph", version, about = "Truncated Gross-Pitaevskii hierarchy simulator and verification studies")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML config file; omitted means all defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set N=3` (repeatable).
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory, overriding `out_dir`.
    #[arg(short, long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the truncated hierarchy and tabulate norms in time.
    Evolve(RunArgs),
    /// Compare hierarchy levels with the split-step NLS solution.
    NlsCompare(RunArgs),
    /// Cauchy study over pairs of truncations.
    Cauchy(RunArgs),
    /// Free Strichartz ratios over a seeded ensemble.
    Strichartz(RunArgs),
    /// Ratios of Duhamel terms to free collapses.
    Boardgame(RunArgs),
    /// A posteriori norms and theta residual over truncations.
    KmReport(RunArgs),
    /// Print the validated config with defaults filled in.
    CheckConfig(RunArgs),
    /// Print the header and level norms of a snapshot.
    Inspect { path: PathBuf },
}

fn load(args: &RunArgs) -> anyhow::Result<gph::Loaded> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    Ok(parse_config_with(&text, &args.overrides)?)
}

fn run(command: Command, args: &RunArgs) -> anyhow::Result<ExitCode> {
    let loaded = load(args)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let out = run_experiment(&loaded, command, args.out_dir.as_deref())?;
    eprintln!("{command}: wrote {} files in {:.2} s", out.outputs.len(), out.wall_time_s);
    let failed = out.failures();
    if failed.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for f in failed {
        eprintln!("invariant failed: {} = {:e} (tolerance {:e})", f.name, f.value, f.tolerance);
    }
    Ok(ExitCode::from(3))
}

fn inspect(path: &std::path::Path) -> anyhow::Result<()> {
    let snap = snapshot_read(path)?;
    let g = snap.grid();
    println!("d = {}, M = {}, L = {}", g.dim(), g.points(), g.period());
    match snap {
        Snapshot::Marginal(m) => println!("marginal k = {}, trace = {}", m.k(), m.trace()),
        Snapshot::State(s) => {
            for l in s.levels() {
                println!("level {}: trace = {}, L2 norm = {}", l.k(), l.trace(), l.h_alpha_norm(0.0)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Evolve(a) => run(Command::Evolve, a),
        Cmd::NlsCompare(a) => run(Command::NlsCompare, a),
        Cmd::Cauchy(a) => run(Command::Cauchy, a),
        Cmd::Strichartz(a) => run(Command::Strichartz, a),
        Cmd::Boardgame(a) => run(Command::Boardgame, a),
        Cmd::KmReport(a) => run(Command::KmReport, a),
        Cmd::CheckConfig(a) => load(a).and_then(|l| {
            for w in &l.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", toml::to_string(&l.config)?);
            Ok(ExitCode::SUCCESS)
        }),
        Cmd::Inspect { path } => inspect(path).map(|_| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(1)
    })
}
