use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use mdkl::experiment::{self, Overrides, RunError, SweepAxis};

#[derive(Parser)]
#[command(name = "mdkl", version, about = "Measurement-domain KL divergence between Gaussian-mixture priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the σ-node loop.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the left Riemann sum instead of the trapezoid rule.
    #[arg(long)]
    riemann_left: bool,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            riemann_left: self.riemann_left,
            workers: Some(self.workers),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    KeepProb,
    NMeasurements,
    SigmaZ,
}

impl From<Axis> for SweepAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::KeepProb => SweepAxis::KeepProb,
            Axis::NMeasurements => SweepAxis::NMeasurements,
            Axis::SigmaZ => SweepAxis::SigmaZ,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write report.json plus integrand CSVs.
    Run(Common),
    /// Run the experiment once per axis value and write summary.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Quick end-to-end sanity checks.
    SelfTest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the JSON Schema of the config format.
    ShowConfigSchema,
}

fn fail(e: RunError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(common) => match experiment::run(&common.config, &common.overrides()) {
            Ok(report) => {
                for e in &report.estimates {
                    println!(
                        "{:<12} kl={:.6} stderr={:.6} config_hash={} seed={}",
                        e.mode.as_str(),
                        e.value,
                        e.stderr,
                        report.config_hash,
                        report.seed
                    );
                }
                if let Some(a) = &report.adaptation {
                    println!(
                        "adaptation   loss {:.6} -> {:.6} ({:?}), kl_measurement {:.6} -> {:.6}",
                        a.initial_loss,
                        a.best_loss,
                        a.stop_reason,
                        a.kl_measurement_before.value,
                        a.kl_measurement_after.value
                    );
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Sweep { common, axis, values } => {
            match experiment::sweep(&common.config, axis.into(), &values, &common.overrides()) {
                Ok((_, summary)) => {
                    print!("{summary}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::SelfTest { seed } => match experiment::self_test(seed) {
            Ok(lines) => {
                let mut ok = true;
                for l in &lines {
                    println!("[{}] {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
                    ok &= l.passed;
                }
                if ok {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::FAILURE
                }
            }
            Err(e) => fail(e),
        },
        Command::ShowConfigSchema => match print_schema() {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        },
    }
}

fn print_schema() -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(&experiment::config_schema()).context("serializing schema")?;
    println!("{text}");
    Ok(())
}
