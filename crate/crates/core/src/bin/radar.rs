use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use radar_core::attacks::AttackKind;
use radar_core::config::ExperimentConfig;
use radar_core::metrics::render_tables;
use radar_core::pipeline::{cmd_attack, cmd_evaluate, cmd_finetune_radar, cmd_train_classifier, cmd_train_detector};
use radar_core::train::TrainLog;
use radar_core::Error;

/// Detector hardening experiments: train a classifier, train a detector on
/// PGD examples, finetune it against adaptive attacks, evaluate.
#[derive(Parser, Debug)]
#[command(name = "radar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the classifier on clean data.
    TrainClassifier(Common),
    /// Train the detector on PGD examples against the frozen classifier.
    TrainDetector(Common),
    /// Adversarially finetune the detector against OPGD/SPGD.
    FinetuneRadar(Common),
    /// Attack the test set and write the adversarial batch.
    Attack(Common),
    /// Evaluate the initial and finetuned detectors.
    Evaluate(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn summarize(name: &str, log: &TrainLog) {
    if let Some(last) = log.last() {
        println!(
            "{name}: {} epochs, val loss {:.4} -> {:.4}, val {} {:.4}",
            last.epoch, log.initial_val_loss, last.val_loss, log.metric, last.val_metric
        );
    }
}

fn run(command: Command) -> Result<(), (u8, String)> {
    let common = match &command {
        Command::TrainClassifier(c)
        | Command::TrainDetector(c)
        | Command::FinetuneRadar(c)
        | Command::Attack(c)
        | Command::Evaluate(c) => c,
    };
    let mut cfg = ExperimentConfig::from_file(&common.config).map_err(|e| match e {
        Error::Io { .. } => (EXIT_USAGE, e.to_string()),
        other => (EXIT_USAGE, format!("{}: {other}", common.config.display())),
    })?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or((EXIT_USAGE, "no output directory: pass --out or set run.out".to_string()))?;
    let runtime = |e: Error| (EXIT_RUNTIME, e.to_string());

    match command {
        Command::TrainClassifier(_) => summarize("classifier", &cmd_train_classifier(&cfg, &out).map_err(runtime)?),
        Command::TrainDetector(_) => summarize("detector", &cmd_train_detector(&cfg, &out).map_err(runtime)?),
        Command::FinetuneRadar(_) => summarize("finetune", &cmd_finetune_radar(&cfg, &out).map_err(runtime)?),
        Command::Attack(_) => {
            let r = cmd_attack(&cfg, &out).map_err(runtime)?;
            let n = r.classifier_fooled.len();
            let fooled = r.classifier_fooled.iter().filter(|&&b| b).count();
            let evaded = r.detector_evaded.as_ref().map_or(0, |e| e.iter().filter(|&&b| b).count());
            let kind: AttackKind = cfg.attack.kind;
            println!("{kind}: fooled {fooled}/{n}, evaded {evaded}/{n}");
        }
        Command::Evaluate(_) => {
            let evals = cmd_evaluate(&cfg, &out).map_err(runtime)?;
            let reports: Vec<_> = evals.into_iter().map(|e| e.report).collect();
            print!("{}", render_tables(&reports));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
