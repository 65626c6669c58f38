//! `rffi` command line: synthesize or preprocess data, train centrally or
//! federated, evaluate checkpoints, run sweeps and export features.

use clap::{Args, Parser, Subcommand};
use rffi_core::harness::{self, ExperimentConfig, Scenario};
use rffi_core::riei::load_checkpoint;
use rffi_core::{synth, Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rffi", version, about = "Cross-receiver RF fingerprint identification lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset file.
    Synth(Common),
    /// Turn raw captures into a dataset file.
    Preprocess(Common),
    /// Centralized training; writes metrics, summary and checkpoint.
    Train(Common),
    /// Federated training; also writes the round log.
    Fedtrain(Common),
    /// Held-out accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Accuracy over an ISR, sampling-rate or compression grid.
    Sweep(Common),
    /// Feature CSV of the held-out set for a checkpoint.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn write(path: &Path, text: String) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(c) => {
            let cfg = load_config(&c)?;
            let ds = synth::synthesize_dataset(&cfg.synth)?;
            harness::save_dataset(&c.out, &ds)
        }
        Command::Preprocess(c) => {
            let cfg = load_config(&c)?;
            let ds = harness::preprocess(&cfg.preprocess)?;
            harness::save_dataset(&c.out, &ds)
        }
        Command::Train(c) => {
            let mut cfg = load_config(&c)?;
            cfg.scenario = Scenario::Centralized;
            let outcome = harness::execute(&cfg)?;
            harness::write_outputs(&outcome, &c.out)?;
            println!("last5 accuracy {:.4} +/- {:.4}", outcome.report.last5_mean, outcome.report.last5_std);
            Ok(())
        }
        Command::Fedtrain(c) => {
            let mut cfg = load_config(&c)?;
            cfg.scenario = Scenario::Federated;
            let outcome = harness::execute(&cfg)?;
            harness::write_outputs(&outcome, &c.out)?;
            println!("last5 accuracy {:.4} +/- {:.4}", outcome.report.last5_mean, outcome.report.last5_std);
            Ok(())
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let model = load_checkpoint(&checkpoint)?;
            let data = harness::prepare_data(&cfg)?;
            check_arch(&model, &data)?;
            let labels: Vec<usize> = data.test.iter().map(|s| s.emitter).collect();
            let acc = harness::accuracy(&model, &harness::inputs_of(&data.test, model.arch())?, &labels)?;
            let json = serde_json::json!({
                "held_out_receiver": cfg.held_out_receiver,
                "samples": labels.len(),
                "accuracy": acc,
            });
            write(&common.out, format!("{json:#}\n"))?;
            println!("accuracy {acc:.4}");
            Ok(())
        }
        Command::Sweep(c) => {
            let cfg = load_config(&c)?;
            let rows = harness::run_sweep(&cfg)?;
            write(&c.out, harness::sweep_csv(&rows))
        }
        Command::ExportFeatures { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let model = load_checkpoint(&checkpoint)?;
            let data = harness::prepare_data(&cfg)?;
            check_arch(&model, &data)?;
            if let Some(dir) = common.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            harness::export_features(&model, &data.test, &common.out)
        }
    }
}

fn check_arch(model: &rffi_core::riei::Model, data: &harness::Prepared) -> Result<()> {
    let (a, b) = (model.arch(), &data.arch);
    if a.frame_len != b.frame_len || a.emitters != b.emitters || a.receivers != b.receivers {
        return Err(Error::config("checkpoint does not match the configured data"));
    }
    Ok(())
}

fn threads(command: &Command) -> usize {
    match command {
        Command::Synth(c)
        | Command::Preprocess(c)
        | Command::Train(c)
        | Command::Fedtrain(c)
        | Command::Sweep(c)
        | Command::Eval { common: c, .. }
        | Command::ExportFeatures { common: c, .. } => c.threads,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let n = threads(&cli.command).max(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
