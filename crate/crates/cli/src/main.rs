use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bovila::commands::{self, CmdResult};
use bovila::config::{load_config, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bovila", version, about = "Self-questioning video QA with evidential filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). `BOVILA_*` environment variables override fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed the command would otherwise take from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FromCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory written by `train` or `ablate`.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and save a checkpoint.
    Train(Common),
    /// Cumulative ablation over seeds.
    Ablate(Common),
    /// Uncertainty under increasing video noise.
    NoiseExp(FromCheckpoint),
    /// Uncertainty under increasing question token destruction.
    TextDestroyExp(FromCheckpoint),
    /// Uncertainty of correct vs incorrect predictions.
    UncertHist(FromCheckpoint),
    /// Correlation of generated-question uncertainty with its losses.
    QualityCorr(FromCheckpoint),
    /// Finite-difference check of the six losses.
    Gradcheck(Common),
    /// Compare evidence parameterizations during training.
    EdlBreakdown(Common),
    /// Print the default config as JSON.
    DefaultConfig,
}

fn config(path: Option<&Path>) -> CmdResult<ExperimentConfig> {
    match path {
        Some(p) => Ok(load_config(p, std::env::vars())?),
        None => {
            let text = serde_json::to_string(&ExperimentConfig::default()).expect("default config serializes");
            Ok(bovila::config::parse_config(&text, std::env::vars())?)
        }
    }
}

fn out_dir(c: &Common, name: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| commands::default_out(name))
}

fn trained(f: &FromCheckpoint) -> CmdResult<commands::Trained> {
    let cfg = match &f.common.config {
        Some(_) => Some(config(f.common.config.as_deref())?),
        None => None,
    };
    commands::load_trained(&f.checkpoint, cfg.as_ref())
}

fn print<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("summary serializes"));
}

fn run(cli: Cli) -> CmdResult<()> {
    match cli.command {
        Command::Train(c) => print(&commands::cmd_train(&config(c.config.as_deref())?, c.seed, &out_dir(&c, "train"))?),
        Command::Ablate(c) => {
            let s = commands::cmd_ablate(&config(c.config.as_deref())?, c.seed, &out_dir(&c, "ablate"))?;
            print(&s.medians);
        }
        Command::NoiseExp(f) => {
            let s = commands::cmd_noise_exp(&trained(&f)?, f.common.seed, &out_dir(&f.common, "noise-exp"))?;
            print(&s);
        }
        Command::TextDestroyExp(f) => {
            let out = out_dir(&f.common, "text-destroy-exp");
            print(&commands::cmd_text_destroy_exp(&trained(&f)?, f.common.seed, &out)?);
        }
        Command::UncertHist(f) => {
            let h = commands::cmd_uncert_hist(&trained(&f)?, f.common.seed, &out_dir(&f.common, "uncert-hist"))?;
            print(&serde_json::json!({
                "manifest": h.manifest,
                "n_correct": h.correct.u.len(),
                "n_incorrect": h.incorrect.u.len(),
                "mean_u_correct": h.correct.mean_u,
                "mean_u_incorrect": h.incorrect.mean_u,
                "p_value": h.p_value,
                "passes": h.passes,
            }));
        }
        Command::QualityCorr(f) => {
            let out = out_dir(&f.common, "quality-corr");
            print(&commands::cmd_quality_corr(&trained(&f)?, f.common.seed, &out)?);
        }
        Command::Gradcheck(c) => {
            let rows = commands::cmd_gradcheck(&config(c.config.as_deref())?, c.seed, &out_dir(&c, "gradcheck"))?;
            for r in rows {
                println!("{:<10} max_rel_error {:.3e}", r.loss, r.max_rel_error);
            }
        }
        Command::EdlBreakdown(c) => {
            let rows = commands::cmd_edl_breakdown(&config(c.config.as_deref())?, c.seed, &out_dir(&c, "edl-breakdown"))?;
            for r in rows {
                println!(
                    "{:?}: epochs {} val acc {:?} divergence {:?}",
                    r.variant, r.epochs_completed, r.final_val_acc, r.divergence
                );
            }
        }
        Command::DefaultConfig => print(&ExperimentConfig::default()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
