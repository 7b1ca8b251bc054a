use clap::{Parser, ValueEnum};
use hymlab_core::config::parse_config;
use hymlab_core::lab::{self, Command};
use hymlab_core::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Sub {
    Degree,
    Functional,
    Decompose,
    Flow,
    Report,
}

/// Hermitian-Einstein heat-flow lab on the torus and the Riemann sphere.
///
/// Exit codes: 0 pass, 2 invariant failure, 3 config error, 4 dt underflow.
#[derive(Debug, Parser)]
#[command(name = "hymlab", version)]
struct Cli {
    #[arg(value_enum)]
    command: Sub,
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; for `report`, the finished run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue a flow from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Grid override: N per side on the torus, (N, 2N) on the sphere.
    #[arg(long)]
    grid: Option<usize>,
}

fn execute(cli: &Cli) -> Result<lab::Summary> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| Error::Config(vec![format!("{}: {e}", cli.config.display())]))?;
    let mut cfg = parse_config(&text)?;
    if let Some(n) = cli.grid {
        cfg = cfg.with_grid(n)?;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.outputs.directory.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config(vec!["no output directory: pass --out or set outputs.directory".into()]))?;
    let command = match cli.command {
        Sub::Degree => Command::Degree,
        Sub::Functional => Command::Functional,
        Sub::Decompose => Command::Decompose,
        Sub::Flow => Command::Flow,
        Sub::Report => Command::Report,
    };
    let summary = lab::run(command, &cfg, &out, cli.resume.as_deref())?;
    eprintln!("wrote {}", out.display());
    Ok(summary)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    let outcome = execute(&cli);
    match &outcome {
        Ok(s) => {
            for c in &s.invariants {
                println!("{} {}: {:.3e} (bound {:.1e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.bound);
            }
            if let Some(b) = &s.breakdown {
                eprintln!("error: {b}");
            }
            for c in s.failed() {
                eprintln!("error: invariant violated: {}", c.name);
            }
        }
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(lab::exit_code(&outcome) as u8)
}
