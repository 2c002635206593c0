use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ilf_core::commands::{cmd_bench, cmd_drift, cmd_sample, cmd_train};
use ilf_core::schedule::ModelKind;

/// Inner-loop feedback experiments on a toy diffusion transformer.
///
/// Every run is described by a JSON config; flags only pick the command and
/// output paths.
#[derive(Parser)]
#[command(name = "ilf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the backbone (or load it), then train the feedback module.
    Train { config: PathBuf },
    /// Sample images and write them with a cost report.
    Sample {
        config: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Baseline vs cached feature drift, jointly normalized.
    Drift {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured bench grid and write bench.csv into run_dir.
    Bench { config: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Baseline,
    Ilf,
    Cached,
}

impl From<Kind> for ModelKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Baseline => ModelKind::Baseline,
            Kind::Ilf => ModelKind::Ilf,
            Kind::Cached => ModelKind::Cached,
        }
    }
}

fn run(cli: Cli) -> ilf_core::Result<()> {
    match cli.command {
        Command::Train { config } => {
            let s = cmd_train(&config)?;
            if let Some(last) = s.backbone_curve.last() {
                println!("backbone: {} steps, final loss {last:.5}", s.backbone_curve.len());
            }
            if let Some(last) = s.feedback_curve.last() {
                println!(
                    "feedback: {} steps, final recon {:.5} distill {:.5}",
                    s.feedback_curve.len(),
                    last.recon,
                    last.distill
                );
            }
            println!(
                "wrote {} and {}",
                s.backbone_checkpoint.display(),
                s.feedback_checkpoint.display()
            );
        }
        Command::Sample { config, kind, out } => {
            let r = cmd_sample(&config, kind.into(), &out)?;
            println!(
                "{}: {} steps, {} block forwards, {:.1} ms -> {}",
                r.kind.name(),
                r.steps,
                r.block_forwards,
                r.wall_ms,
                out.display()
            );
        }
        Command::Drift { config, out } => {
            let s = cmd_drift(&config, &out)?;
            let r = &s.report;
            println!(
                "mean drift over cached blocks: baseline {:.4}, cached {:.4}",
                r.baseline_mean, r.cached_mean
            );
            match r.ratio {
                Some(ratio) => println!("cached/baseline ratio {ratio:.4}"),
                None => println!("baseline drift is zero; ratio undefined"),
            }
        }
        Command::Bench { config } => {
            println!(
                "{:<10} {:<28} {:>14} {:>10} {:>8}",
                "kind", "config", "block_forwards", "wall_ms", "speedup"
            );
            for r in cmd_bench(&config)? {
                println!(
                    "{:<10} {:<28} {:>14} {:>10.1} {:>7.2}x",
                    r.kind.name(),
                    r.config,
                    r.block_forwards,
                    r.wall_ms,
                    r.speedup
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
