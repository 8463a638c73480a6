use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evocl::config::{load_config, Method, Overrides};
use evocl::data::DatasetKind;
use evocl::results::{emit_results, emit_summary};
use evocl::runner::{run_experiment, run_repeated};

const DATA_DIR_ENV: &str = "EVOCL_DATA_DIR";

#[derive(Parser)]
#[command(name = "evocl", version, about = "Class-incremental learning with evolution strategies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (or several seeds with --repeat).
    Run(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_dataset)]
    dataset: Option<DatasetKind>,
    /// Directory holding mnist/ and fashion_mnist/ IDX files [env: EVOCL_DATA_DIR].
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run this many consecutive seeds and report mean and standard deviation.
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    /// Results file (JSON); a CSV of the accuracy matrix is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
    /// Override any config key, e.g. --set es.sigma=0.05 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn parse_dataset(s: &str) -> Result<DatasetKind, String> {
    match s {
        "mnist" => Ok(DatasetKind::Mnist),
        "fashion_mnist" | "fashion-mnist" | "fmnist" => Ok(DatasetKind::FashionMnist),
        "synthetic" => Ok(DatasetKind::Synthetic),
        _ => Err(format!("unknown dataset `{s}` (mnist, fashion_mnist, synthetic)")),
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "evocl" => Ok(Method::Evocl),
        "finetune" => Ok(Method::Finetune),
        "joint" => Ok(Method::Joint),
        _ => Err(format!("unknown method `{s}` (evocl, finetune, joint)")),
    }
}

fn run(args: RunArgs) -> evocl::Result<()> {
    let overrides = Overrides {
        dataset: args.dataset,
        data_dir: args.data_dir,
        method: args.method,
        tasks: args.tasks,
        seed: args.seed,
        threads: args.threads,
        output: args.out,
        set: args.set,
        fallback_data_dir: std::env::var_os(DATA_DIR_ENV).map(PathBuf::from),
    };
    let cfg = load_config(args.config.as_deref(), &overrides)?;
    let out = cfg.output.clone();
    if args.repeat <= 1 {
        let result = run_experiment(&cfg)?;
        if let Some(path) = &out {
            emit_results(&result, path)?;
        }
        println!(
            "{} on {} (T={}, seed {}): A_last {:.4}  A_inc {:.4}  ({:.1}s)",
            cfg.method.name(),
            cfg.dataset.dir_name(),
            cfg.tasks,
            cfg.seed,
            result.a_last,
            result.a_inc,
            result.total_seconds
        );
    } else {
        let summary = run_repeated(&cfg, args.repeat)?;
        if let Some(path) = &out {
            emit_summary(&summary, path)?;
        }
        for r in &summary.runs {
            println!("seed {}: A_last {:.4}  A_inc {:.4}", r.config.seed, r.a_last, r.a_inc);
        }
        println!(
            "{} on {} (T={}, {} seeds): A_last {:.4} ± {:.4}  A_inc {:.4} ± {:.4}",
            cfg.method.name(),
            cfg.dataset.dir_name(),
            cfg.tasks,
            args.repeat,
            summary.a_last.mean,
            summary.a_last.std,
            summary.a_inc.mean,
            summary.a_inc.std
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp_secs().init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
