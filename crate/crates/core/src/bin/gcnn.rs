use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use gcnn::config::ExperimentConfig;
use gcnn::harness;
use gcnn::model::TrainMode;

#[derive(Parser)]
#[command(name = "gcnn", version, about = "Grid-based iterative object detection experiments")]
struct Cli {
    /// TOML experiment configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for both data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    #[arg(long = "s-test", global = true)]
    s_test: Option<usize>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train and test dataset manifests.
    Generate {
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Train regressor and classifier; writes a checkpoint and a loss log.
    Train {
        /// Defaults to `<out>/train_manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run detection on the test split; writes detections and trajectories.
    Detect {
        /// Defaults to `<out>/checkpoint_<mode>.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `<out>/test_manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score a detection dump; writes a metrics report.
    Eval {
        #[arg(long)]
        dump: PathBuf,
        /// Defaults to `<out>/test_manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Defaults to `<out>/metrics.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and evaluate all three methods for each seed.
    Ablation {
        /// Comma-separated seeds; defaults to `ablation_seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse().map_err(|e: gcnn::Error| e.to_string())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(mode) = cli.mode {
        cfg.mode = mode;
    }
    if let Some(s) = cli.s_test {
        cfg.s_test = s;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone();

    match cli.command {
        Command::Generate { n_train, n_test } => {
            let p = harness::cmd_generate(&cfg, n_train.unwrap_or(cfg.n_train), n_test.unwrap_or(cfg.n_test), &out)?;
            println!("{}\n{}", p.train_manifest.display(), p.test_manifest.display());
        }
        Command::Train { manifest } => {
            let manifest = manifest.unwrap_or_else(|| out.join("train_manifest.json"));
            let t = harness::cmd_train(&cfg, &manifest, &out)?;
            println!("{}\n{}", t.checkpoint.display(), t.log.display());
        }
        Command::Detect { checkpoint, manifest } => {
            let checkpoint = checkpoint.unwrap_or_else(|| out.join(format!("checkpoint_{}.json", cfg.mode)));
            let manifest = manifest.unwrap_or_else(|| out.join("test_manifest.json"));
            let d = harness::cmd_detect(&cfg, &checkpoint, &manifest, &out)?;
            println!("{}\n{}", d.detections.display(), d.trajectories.display());
        }
        Command::Eval { dump, manifest, report } => {
            let manifest = manifest.unwrap_or_else(|| out.join("test_manifest.json"));
            let report_path = report.unwrap_or_else(|| out.join("metrics.json"));
            let r = harness::cmd_eval(&cfg, &dump, &manifest, &report_path)?;
            for c in &r.per_class {
                println!("class {:>2}  AP {:.4}  ({} gt, {} det)", c.class_label, c.ap, c.n_gt, c.n_det);
            }
            println!("mAP {:.4}", r.map);
        }
        Command::Ablation { seeds } => {
            let seeds = if seeds.is_empty() { cfg.ablation_seeds.clone() } else { seeds };
            let table = harness::cmd_ablation(&cfg, &seeds, &out)?;
            print!("{}", table.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
