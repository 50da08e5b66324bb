use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pnunet::config::RunConfig;
use pnunet::{bench, detect, gendata, train, Error};

#[derive(Parser)]
#[command(name = "pnunet", version, about = "Denoising-reconstruction anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set trainer.iterations=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use this seed for every seeded component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also dump the noise masks at every mask update.
    #[arg(long, global = true)]
    dump_masks: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train a reconstructor with self-updating noise masks.
    Train,
    /// Write anomaly maps and masks for every image in `detector.input_dir`.
    Infer,
    /// Pixel AUROC and threshold report on a labelled dataset.
    Eval,
    /// Time feed-forward inference against latent search.
    Bench,
    /// Write a synthetic defect corpus.
    GenData,
}

fn run(cli: &Cli) -> Result<serde_json::Value, Error> {
    let mut overrides = cli.overrides.clone();
    if let Some(out) = &cli.out {
        overrides.push(format!("output_dir={}", out.display()));
    }
    if let Some(seed) = cli.seed {
        overrides.extend(RunConfig::seed_overrides(seed));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let summary = match cli.command {
        Command::Train => {
            let outcome = train::run_training(&cfg, cli.dump_masks)?;
            serde_json::json!({
                "final_loss": outcome.summary.loss_history.last(),
                "final_weights": cfg.output_dir.join(&outcome.summary.final_weights),
            })
        }
        Command::Infer => {
            let s = detect::infer(&cfg)?;
            serde_json::json!({"images": s.images.len(), "threshold": s.threshold})
        }
        Command::Eval => {
            let s = detect::eval(&cfg)?;
            serde_json::json!({"auroc": s.auroc, "threshold": s.threshold})
        }
        Command::Bench => {
            let r = bench::run_bench(&cfg)?;
            serde_json::json!({
                "mean_forward_seconds": r.mean_forward_seconds,
                "mean_search_seconds": r.mean_search_seconds,
                "ratio": r.ratio,
            })
        }
        Command::GenData => {
            let m = gendata::run_gen_data(&cfg)?;
            serde_json::json!({"images": m.images.len()})
        }
    };
    Ok(serde_json::json!({"status": "ok", "output_dir": cfg.output_dir, "summary": summary}))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let code = if err.is_config() { 2 } else { 1 };
            let line = match err {
                Error::Config { path, message } => {
                    serde_json::json!({"error": "config", "key": path, "message": message})
                }
                other => serde_json::json!({"error": "runtime", "message": format!("{:#}", anyhow::Error::new(other))}),
            };
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
