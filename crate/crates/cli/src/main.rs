//! `rmtr`: train, replicate and generate data from the command line.
//!
//! Exit status is 0 when the run converged, 2 when it stopped on its work or
//! epoch budget, and 1 on any error. `RMTR_LOG` sets the log level.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{debug, info, warn};
use rmtr_core::datasets::Generator;
use rmtr_core::engine::{Solver, Termination};
use rmtr_core::harness::{
    replicate, run_csv_line, run_experiment_with, write_run_files, ExperimentConfig, RUN_CSV_HEADER,
};

#[derive(Parser)]
#[command(
    name = "rmtr",
    version,
    about = "Multilevel trust-region training of residual networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network.
    Train(TrainArgs),
    /// Train once per seed and summarize.
    Replicate(ReplicateArgs),
    /// Write a synthetic dataset to CSV.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    solver: Option<Solver>,
    #[arg(long)]
    levels: Option<usize>,
    /// Directory for logs, ledgers and summaries.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Initialization and solver seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReplicateArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Inclusive range `a..b` or a comma-separated list.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<SeedList>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    dataset: Generator,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone)]
struct SeedList(Vec<u64>);

fn parse_seeds(s: &str) -> Result<SeedList, String> {
    let bad = |e: std::num::ParseIntError| format!("bad seed in `{s}`: {e}");
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (
            a.trim().parse::<u64>().map_err(bad)?,
            b.trim().parse::<u64>().map_err(bad)?,
        );
        if a > b {
            return Err(format!("empty seed range `{s}`"));
        }
        return Ok(SeedList((a..=b).collect()));
    }
    s.split(',')
        .map(|t| t.trim().parse::<u64>().map_err(bad))
        .collect::<Result<_, _>>()
        .map(SeedList)
}

fn load_config(args: &ConfigArgs) -> rmtr_core::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.solver {
        cfg.solver.solver = s;
    }
    if let Some(l) = args.levels {
        cfg.solver.levels = l;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_for(t: Termination) -> u8 {
    match t {
        Termination::Converged => 0,
        Termination::Budget | Termination::EpochLimit => 2,
        Termination::Diverged => 1,
    }
}

fn write_csv(path: &Path, lines: &[String]) -> rmtr_core::Result<()> {
    let mut text = String::from(RUN_CSV_HEADER);
    text.push('\n');
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn train(args: TrainArgs) -> rmtr_core::Result<u8> {
    let mut cfg = load_config(&args.common)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.common.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(0);
    }
    info!(
        "training {} with {} level(s), seed {}",
        cfg.solver.label(),
        cfg.solver.levels,
        cfg.seed
    );
    let record = run_experiment_with(&cfg, cfg.seed, &mut |r| {
        debug!(
            "epoch {} level {} W {:.3} loss {:.6} acc {:?} mbs {} delta {:.3e}",
            r.epoch, r.level, r.work, r.train_loss, r.train_acc, r.mbs, r.delta
        )
    })?;
    if let Some(dir) = &args.common.out {
        write_run_files(dir, &record)?;
        write_csv(&dir.join("summary.csv"), &[run_csv_line(&record)])?;
        info!("wrote logs to {}", dir.display());
    }
    println!("{RUN_CSV_HEADER}\n{}", run_csv_line(&record));
    Ok(exit_for(record.summary.termination))
}

fn replicate_cmd(args: ReplicateArgs) -> rmtr_core::Result<u8> {
    let mut cfg = load_config(&args.common)?;
    if let Some(s) = args.seeds {
        cfg.replication.seeds = s.0;
    }
    if args.common.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(0);
    }
    let seeds = cfg.replication.seeds.clone();
    info!("replicating {} over seeds {:?}", cfg.solver.label(), seeds);
    let (summary, outcomes) = replicate(&cfg, &seeds)?;
    let mut lines = Vec::new();
    for (seed, outcome) in &outcomes {
        match outcome {
            Ok(record) => {
                info!(
                    "seed {seed}: {} at W = {:.3}",
                    record.summary.termination.label(),
                    record.summary.work
                );
                if let Some(dir) = &args.common.out {
                    write_run_files(dir, record)?;
                }
                lines.push(run_csv_line(record));
            }
            Err(e) => warn!("seed {seed} failed: {e}"),
        }
    }
    if let Some(dir) = &args.common.out {
        write_csv(&dir.join("runs.csv"), &lines)?;
        std::fs::write(dir.join("summary.csv"), summary.to_csv())?;
    }
    print!("{}", summary.to_csv());
    Ok(if summary.failed == 0 { 0 } else { 2 })
}

fn gen_data(args: GenDataArgs) -> rmtr_core::Result<u8> {
    let ds = args.dataset.generate(args.n, args.seed)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    ds.write_csv(&args.out)?;
    info!("wrote {} samples to {}", ds.len(), args.out.display());
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RMTR_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Replicate(a) => replicate_cmd(a),
        Command::GenData(a) => gen_data(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
