use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use deskssl::conformer::Preset;
use deskssl::experiment::{emit_plot_data, run_config_file, Command, ExperimentConfig, MetricsReport, Overrides, RunRecord};

/// Semi-supervised speech recognition experiments on synthetic audio.
#[derive(Parser)]
#[command(name = "deskssl", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesise a corpus of WAV files with a JSONL manifest.
    GenCorpus(RunArgs),
    /// Pre-train an encoder with the masked contrastive objective.
    Pretrain(RunArgs),
    /// Fine-tune with CTC over a matrix of label fractions and inits.
    Finetune(RunArgs),
    /// Pseudo-label, filter and train a noisy student.
    Nst(RunArgs),
    /// Fit layer-wise probes on pooled encoder activations.
    Probe(RunArgs),
    /// Decode greedily and with tuned shallow fusion.
    Evaluate(RunArgs),
    /// Merge the reports of several run directories into one plot table.
    Plot {
        /// Run directories to merge.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Directory receiving reports and artifacts.
    #[arg(long)]
    out_dir: PathBuf,
    /// Replace the config's seed.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Replace the config's architecture with a preset (XS or S).
    #[arg(long)]
    preset: Option<Preset>,
}

fn run(expected: Command, args: &RunArgs) -> deskssl::Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    if cfg.command != expected {
        return Err(deskssl::Error::Config {
            field: "command".into(),
            message: format!("config is for `{}`, not `{}`", cfg.command.name(), expected.name()),
        });
    }
    let overrides = Overrides {
        seed: args.seed_override,
        preset: args.preset,
    };
    let outcome = run_config_file(&args.config, &args.out_dir, &overrides)?;
    for r in &outcome.reports {
        log::info!("{}: {:?}", r.run_id, r.summary);
    }
    println!("{}", outcome.out_dir.join("run.json").display());
    Ok(())
}

fn plot(runs: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    let mut reports = Vec::new();
    for dir in runs {
        let record_path = dir.join("run.json");
        let text = std::fs::read_to_string(&record_path).with_context(|| format!("reading {}", record_path.display()))?;
        let record: RunRecord =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", record_path.display()))?;
        for rel in &record.reports {
            reports.push(MetricsReport::load(&dir.join(rel))?);
        }
    }
    let table = emit_plot_data(&reports)?;
    deskssl::fsutil::write_atomic(out, table.as_bytes())?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (command, args) = match &cli.command {
        Cmd::GenCorpus(a) => (Command::GenCorpus, a),
        Cmd::Pretrain(a) => (Command::Pretrain, a),
        Cmd::Finetune(a) => (Command::Finetune, a),
        Cmd::Nst(a) => (Command::Nst, a),
        Cmd::Probe(a) => (Command::Probe, a),
        Cmd::Evaluate(a) => (Command::Evaluate, a),
        Cmd::Plot { runs, out } => {
            return match plot(runs, out) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::FAILURE
                }
            };
        }
    };
    match run(command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ deskssl::Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
