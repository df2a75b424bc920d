use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use fednas::codec::{Branch, ChoiceKey};
use fednas::config::{ExperimentConfig, RunMode};
use fednas::data::make_client_shards;
use fednas::runner::{load_datasets, Experiment};
use fednas::supernet::{
    branch_macs, classifier_macs, count_macs, resnet18_layers, stem_macs, SupernetSpec,
};

#[derive(Parser)]
#[command(
    name = "fednas",
    version,
    about = "Federated evolutionary architecture search simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Realtime,
    ReinitOffspring,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the config's output_dir, else runs/<name>-seed<seed>).
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Print multiply-accumulate counts.
    Macs {
        /// Supernet to describe (default: the full-size CIFAR-10 supernet).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated branch indices, e.g. 1,0,2,2,1,3,2,1,3,0,3,0.
        #[arg(long, conflicts_with = "resnet18")]
        key: Option<String>,
        /// Print the ResNet18 baseline instead.
        #[arg(long)]
        resnet18: bool,
    },
    /// Print per-client shard statistics.
    Partition {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(
    config: PathBuf,
    seed: Option<u64>,
    output: Option<PathBuf>,
    mode: Option<ModeArg>,
) -> Result<()> {
    let mut cfg = load_config(&config, seed)?;
    if let Some(mode) = mode {
        cfg.mode = match mode {
            ModeArg::Realtime => RunMode::Realtime,
            ModeArg::ReinitOffspring => RunMode::ReinitOffspring,
        };
    }
    let output = output
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| {
            let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
            PathBuf::from("runs").join(format!("{stem}-seed{}", cfg.seed))
        });
    cfg.output_dir = Some(output.clone());
    info!("writing results to {}", output.display());
    let outcome = Experiment::prepare(cfg)?.run(Some(&output))?;
    if let Some(last) = outcome.records.last() {
        println!(
            "generation {}: best error {:.4} ({} MACs), knee error {:.4} ({} MACs)",
            last.generation,
            last.best_accuracy.test_error,
            last.best_accuracy.macs,
            last.knee.test_error,
            last.knee.macs
        );
    }
    println!("final front ({} points):", outcome.front.len());
    println!("{:<40} {:>10} {:>14}", "key", "error", "macs");
    for row in &outcome.front {
        println!("{:<40} {:>10.4} {:>14}", row.key, row.test_error, row.macs);
    }
    println!("results in {}", output.display());
    Ok(())
}

fn macs(config: Option<PathBuf>, key: Option<String>, resnet18: bool) -> Result<()> {
    let spec = match &config {
        Some(path) => ExperimentConfig::load(path)?.supernet,
        None => SupernetSpec::cifar10(),
    };
    if resnet18 {
        let rows = resnet18_layers(spec.input_shape);
        for r in &rows {
            println!("{:<16} {:>14}", r.name, r.macs);
        }
        println!(
            "{:<16} {:>14}",
            "total",
            rows.iter().map(|r| r.macs).sum::<u64>()
        );
        return Ok(());
    }
    match key {
        Some(text) => {
            let key: ChoiceKey = text
                .parse()
                .with_context(|| format!("parsing key {text:?}"))?;
            if key.len() != spec.block_count() {
                bail!(
                    "key has {} entries, supernet has {} blocks",
                    key.len(),
                    spec.block_count()
                );
            }
            println!("{:<16} {:>14}", "stem", stem_macs(&spec));
            for (block, &branch) in key.branches().iter().enumerate() {
                let label = format!("block{block} {}", branch.name());
                println!("{label:<16} {:>14}", branch_macs(&spec, block, branch));
            }
            println!("{:<16} {:>14}", "classifier", classifier_macs(&spec));
            println!("{:<16} {:>14}", "total", count_macs(&spec, &key)?);
        }
        None => {
            print!("{:<8}", "block");
            for b in Branch::ALL {
                print!(" {:>14}", b.name());
            }
            println!();
            for block in 0..spec.block_count() {
                print!("{block:<8}");
                for b in Branch::ALL {
                    print!(" {:>14}", branch_macs(&spec, block, b));
                }
                println!();
            }
            println!(
                "stem {}, classifier {}",
                stem_macs(&spec),
                classifier_macs(&spec)
            );
        }
    }
    Ok(())
}

fn partition(config: PathBuf, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&config, seed)?;
    let (train, test) = load_datasets(&cfg)?;
    let shards = make_client_shards(
        Arc::new(train),
        Arc::new(test),
        &cfg.partition_spec(),
        cfg.seed,
    )?;
    println!("{:<8} {:>8} {:>8}  train labels", "client", "train", "test");
    for s in &shards {
        let counts: Vec<String> = s
            .train
            .label_counts()
            .iter()
            .map(usize::to_string)
            .collect();
        println!(
            "{:<8} {:>8} {:>8}  [{}]",
            s.client_id,
            s.n_train(),
            s.n_test(),
            counts.join(" ")
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            output,
            mode,
        } => run(config, seed, output, mode),
        Command::Macs {
            config,
            key,
            resnet18,
        } => macs(config, key, resnet18),
        Command::Partition { config, seed } => partition(config, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
