use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use finetune_lab::experiments::{self, mnist, verify};
use finetune_lab::{emit, ExperimentConfig};

#[derive(Parser)]
#[command(name = "finetune-lab", about = "Fine-tuning experiments with seeded CSV output")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Linear risk and bounds against sample size for two task shifts.
    Fig1(RunArgs),
    /// Deep linear predictors across depth and task scale.
    Depth(RunArgs),
    /// Source-side against target-side scaling at fixed depth.
    Scaling(RunArgs),
    /// Frozen first layer against full fine-tuning and training from scratch.
    Frozen(RunArgs),
    /// Bound correlation on MNIST digit pairs (needs the IDX files).
    Mnist(RunArgs),
    /// Wide ReLU networks: drift, loss curves and bounds.
    Ntk(RunArgs),
    /// Quick oracle checks over every model.
    Verify,
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// First seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Run the inline oracle checks and stop at the first violation.
    #[arg(long)]
    verify: bool,
    /// Parameter preset: default or quick.
    #[arg(long, default_value = "default")]
    preset: String,
    /// Extra `key=value` overrides applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn build_config(name: &str, args: &RunArgs) -> finetune_lab::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::preset(name, &args.preset)?;
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    if args.seed.is_some() || args.seeds.is_some() {
        let first = args.seed.unwrap_or_else(|| cfg.seeds.first().copied().unwrap_or(0));
        let count = args.seeds.unwrap_or(cfg.seeds.len());
        cfg.set_seeds(first, count);
    }
    for kv in &args.overrides {
        cfg.apply_text(kv)?;
    }
    Ok(cfg)
}

fn run_experiment(name: &str, args: &RunArgs) -> finetune_lab::Result<()> {
    let cfg = build_config(name, args)?;
    log::info!("running {name} with config hash {}", cfg.hash());
    let table = experiments::run(&cfg, args.verify)?;
    let files = emit(&table, &cfg, &args.out)?;
    println!("{} rows -> {}", table.rows.len(), files.results.display());
    println!("config -> {}", files.config.display());
    println!("plot data -> {}", files.plot.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Verify => {
            let mut failed = false;
            for (check, outcome) in verify::run_verify() {
                match outcome {
                    Ok(()) => println!("PASS {check}"),
                    Err(e) => {
                        failed = true;
                        println!("FAIL {check}: {e}");
                    }
                }
            }
            return if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
        Command::Fig1(a) => ("fig1", a),
        Command::Depth(a) => ("depth", a),
        Command::Scaling(a) => ("scaling", a),
        Command::Frozen(a) => ("frozen", a),
        Command::Mnist(a) => ("mnist", a),
        Command::Ntk(a) => ("ntk", a),
    };
    if name == "mnist" {
        match build_config(name, args) {
            Ok(cfg) if !mnist::dataset_available(&cfg) => {
                eprintln!(
                    "skipping mnist: the four IDX files were not found; set {} or data_dir to their directory",
                    mnist::DATA_ENV
                );
                return ExitCode::SUCCESS;
            }
            _ => {}
        }
    }
    match run_experiment(name, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
