//! `fairgap`: run the unlearning evaluation pipeline, whole or stage by stage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fairgap::harness::{Experiment, ExperimentConfig, ExperimentReport};
use fairgap::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "fairgap", version, about = "Machine-unlearning evaluation: accuracy, fairness gaps and FGSM robustness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one original model per seed.
    Train(Common),
    /// Run every configured unlearning method on the saved originals.
    Unlearn(Common),
    /// Accuracy quadruple and fairness profile of every saved model.
    Profile(Common),
    /// Clean and FGSM accuracy of every saved model.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Attack magnitude; repeat to sweep. Defaults to the config's list.
        #[arg(long = "eta")]
        etas: Vec<f64>,
    },
    /// Assemble the report, tables and plot from saved artifacts.
    Report(Common),
    /// All stages in order.
    All(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Unlearn(_) => "unlearn",
            Command::Profile(_) => "profile",
            Command::Attack { .. } => "attack",
            Command::Report(_) => "report",
            Command::All(_) => "all",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Train(c) | Command::Unlearn(c) | Command::Profile(c) | Command::Report(c) | Command::All(c) => c,
            Command::Attack { common, .. } => common,
        }
    }
}

fn experiment(common: &Common) -> Result<Experiment, Error> {
    let config = ExperimentConfig::from_path(&common.config)?;
    let data_dir = common.config.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Experiment::new(config, common.out.clone())?.with_data_dir(data_dir))
}

fn summary(report: &ExperimentReport) -> serde_json::Value {
    json!({
        "config_digest": report.config_digest,
        "methods": report.methods,
        "seeds": report.seeds,
        "flagged_seeds": report.flagged_seeds,
        "correlation": report.correlation.as_ref().map(|c| c.value),
    })
}

fn run(command: &Command) -> Result<serde_json::Value, Error> {
    let exp = experiment(command.common())?;
    let report = match command {
        Command::Train(_) => {
            exp.train_stage()?;
            None
        }
        Command::Unlearn(_) => {
            exp.unlearn_stage()?;
            None
        }
        Command::Profile(_) => {
            exp.profile_stage()?;
            None
        }
        Command::Attack { etas, .. } => {
            exp.attack_stage(if etas.is_empty() { None } else { Some(etas) })?;
            None
        }
        Command::Report(_) => Some(exp.report_stage()?),
        Command::All(_) => Some(exp.run_all()?),
    };
    let mut record = json!({
        "status": "ok",
        "command": command.name(),
        "out": exp.out_dir.display().to_string(),
    });
    if let Some(r) = report {
        record["report"] = summary(&r);
    }
    Ok(record)
}

fn error_record(command: &str, err: &Error) -> serde_json::Value {
    let mut record = json!({
        "status": "error",
        "command": command,
        "kind": err.kind(),
        "message": err.to_string(),
    });
    if let Error::Stage { stage, method, seed, .. } = err {
        record["stage"] = json!(stage);
        record["method"] = json!(method);
        record["seed"] = json!(seed);
    }
    record
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(record) => {
            println!("{record}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_record(cli.command.name(), &err));
            ExitCode::FAILURE
        }
    }
}
