use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latent_auction::config::{ExperimentConfig, ScenarioKind};
use latent_auction::experiment::{run_experiment, Overrides};

#[derive(Debug, Parser)]
#[command(
    name = "latent-auction",
    version,
    about = "Simulate latent-type auctions and check their guarantees"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Latent recovery from threshold queries.
    Recover(RunArgs),
    /// Marginal preservation of grid rounding plus resampling.
    Robustify(RunArgs),
    /// Singular-value concentration, nets and influence tensorization.
    Concentration(RunArgs),
    /// Revenue, BIC and IR of the composed mechanism.
    End2end(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for report.json and CSV tables.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the number of runs, draws or trials.
    #[arg(long)]
    trials: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Recover(a) => (ScenarioKind::Recover, a),
        Command::Robustify(a) => (ScenarioKind::Robustify, a),
        Command::Concentration(a) => (ScenarioKind::Concentration, a),
        Command::End2end(a) => (ScenarioKind::End2end, a),
    };
    match run(kind, &args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(kind: ScenarioKind, args: &RunArgs) -> latent_auction::Result<bool> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let actual = cfg.scenario.kind();
    if actual != kind {
        return Err(latent_auction::Error::config(
            "scenario.kind",
            format!(
                "config describes a {} run, not {}",
                actual.name(),
                kind.name()
            ),
        ));
    }
    let report = run_experiment(
        &cfg,
        Overrides {
            seed: args.seed,
            trials: args.trials,
        },
        &args.out,
    )?;
    println!(
        "{} ({}) seed {} [{}]",
        report.name, report.scenario, report.seed, report.build
    );
    for a in &report.assertions {
        let tag = if a.passed { "PASS" } else { "FAIL" };
        println!(
            "{tag} {}: measured {} limit {}",
            a.name, a.measured, a.limit
        );
    }
    println!(
        "report written to {}",
        args.out.join("report.json").display()
    );
    Ok(report.passed)
}
