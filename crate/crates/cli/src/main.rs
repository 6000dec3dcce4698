use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eesampler::config::{Experiment, ExperimentConfig, Overrides};
use eesampler::diagnostics::{bias_study, rate_study, run_experiment};
use eesampler::verify::verify_suite;
use eesampler::{Error, Result};

#[derive(Parser)]
#[command(name = "eesampler", version, about = "Equi-energy sampler experiments and exact checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the staged sampler and write traces and estimates
    Run(Common),
    /// Replicated error-versus-n study with a log-log slope fit
    RateStudy(Common),
    /// Frozen-feeder run compared with the exact invariant law
    BiasStudy(Common),
    /// Run every exact-oracle check on a finite configuration
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the replicate count
    #[arg(long)]
    replicates: Option<usize>,
    /// Stop with exit code 3 when a feeder ring falls below theta
    #[arg(long)]
    abort_on_stability: bool,
}

impl Common {
    fn experiment(&self) -> Result<Experiment> {
        let mut config = ExperimentConfig::load(&self.config)?;
        config.apply(&Overrides {
            seed: self.seed,
            replicates: self.replicates,
            abort_on_stability: self.abort_on_stability,
        });
        config.build()
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => {
            let exp = c.experiment()?;
            let s = run_experiment(&exp, &c.out)?;
            let m = &s.metadata;
            println!(
                "run: {} replicate(s), {} rounds, min ring mass {}, {} violation(s) -> {}",
                m.replicate_seeds.len(),
                m.total_rounds,
                m.min_ring_mass.map_or("n/a".to_string(), |v| format!("{v:.4}")),
                m.total_violations,
                c.out.display()
            );
        }
        Command::RateStudy(c) => {
            let exp = c.experiment()?;
            let report = rate_study(&exp, &c.out)?;
            for f in &report.fits {
                println!(
                    "{}: slope {:.4} [{:.4}, {:.4}], error {:.3e} -> {:.3e}: {}",
                    f.function,
                    f.slope,
                    f.ci95.0,
                    f.ci95.1,
                    f.initial_error,
                    f.terminal_error,
                    if f.pass { "PASS" } else { "FAIL" }
                );
            }
            if !report.pass {
                return Err(Error::Verification("slope outside the accepted band".into()));
            }
        }
        Command::BiasStudy(c) => {
            let exp = c.experiment()?;
            let r = bias_study(&exp, &c.out)?;
            println!(
                "bias: predicted tv {:.4}, observed tv {:.4}, max z {:.2}: {}",
                r.predicted_bias,
                r.occupancy_tv_to_target,
                r.max_z,
                if r.pass { "PASS" } else { "FAIL" }
            );
            if !r.pass {
                return Err(Error::Verification("occupancy does not match the predicted law".into()));
            }
        }
        Command::Verify(c) => {
            let exp = c.experiment()?;
            let report = verify_suite(&exp, &c.out)?;
            for check in &report.checks {
                println!("{}: {} ({})", check.name, if check.passed { "PASS" } else { "FAIL" }, check.detail);
            }
            report.ensure_passed()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
