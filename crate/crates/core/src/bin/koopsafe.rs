use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use koopsafe::harness::{self, Completion, ExperimentConfig, MetricsRecord};
use koopsafe::Error;

#[derive(Debug, Parser)]
#[command(
    name = "koopsafe",
    version,
    about = "Lifted linear models and safe MPC for robot arms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Keep wall-clock solve times in CSV output.
    #[arg(long, global = true)]
    record_timing: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample training and held-out rollouts of the nominal plant.
    GenData,
    /// Train the lifted model.
    Train,
    /// Tune the safety index against the scenario's first obstacle.
    TuneSafety,
    /// Adapt the linear operators to the perturbed plant.
    Finetune,
    /// Run closed-loop episodes.
    Run,
    /// Compare prediction error against the analytic linear models.
    Compare,
    /// Time the configured controllers.
    Bench,
    /// Render SVG plots from the CSV output.
    Plot,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_ABORTED: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(Completion::Finished) => ExitCode::SUCCESS,
        Ok(Completion::Aborted) => {
            eprintln!("error: an episode aborted; partial results were written");
            ExitCode::from(EXIT_ABORTED)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::EpisodeAborted { .. } => EXIT_ABORTED,
        Error::DimensionMismatch { .. }
        | Error::IndexOutOfRange { .. }
        | Error::InvalidParameter(_)
        | Error::CoincidentPoints
        | Error::NotConvex(_)
        | Error::Format { .. }
        | Error::Json(_) => EXIT_INVALID,
        Error::Diverged { .. } | Error::Io(_) | Error::Csv(_) => EXIT_FAILURE,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<Completion, Error> {
    let cfg = load_config(cli)?;
    let out = cli.out_dir.as_path();
    let base = harness::config_base(cli.config.as_deref());
    std::fs::create_dir_all(out)?;
    match cli.command {
        Command::GenData => {
            harness::gen_data(&cfg, out)?;
            println!(
                "wrote {} and {}",
                show(out, harness::DATASET_DIR),
                show(out, harness::HOLDOUT_DIR)
            );
        }
        Command::Train => {
            harness::train_model(&cfg, out)?;
            println!("wrote {}", show(out, harness::MODEL_FILE));
        }
        Command::TuneSafety => {
            let index = harness::tune_safety(&cfg, out)?;
            println!("tuned n = {}, beta = {}", index.n, index.beta);
        }
        Command::Finetune => {
            let s = harness::finetune(&cfg, out)?;
            println!(
                "one-step error {:.5} -> {:.5} ({:+.1}%)",
                s.before,
                s.after,
                -100.0 * s.reduction()
            );
        }
        Command::Run => {
            let (records, done) = harness::run(&cfg, out, &base, cli.record_timing)?;
            summarize(&records);
            return Ok(done);
        }
        Command::Compare => {
            let table = harness::compare(&cfg, out)?;
            for (name, errs) in &table.rows {
                let cells: Vec<String> = errs.iter().map(|e| format!("{e:.4}")).collect();
                println!("{name:>5}: {}", cells.join("  "));
            }
        }
        Command::Bench => {
            let (records, done) = harness::bench(&cfg, out, &base, cli.record_timing)?;
            for r in &records {
                println!(
                    "{:>5}: {:.3} ± {:.3} ms per step",
                    r.controller, r.solve_ms_mean, r.solve_ms_std
                );
            }
            return Ok(done);
        }
        Command::Plot => {
            for p in harness::plot(&cfg, out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(Completion::Finished)
}

fn show(out: &Path, name: &str) -> String {
    out.join(name).display().to_string()
}

fn summarize(records: &[MetricsRecord]) {
    for r in records.iter().filter(|r| r.seed.is_none()) {
        println!(
            "{} {}: infeasible {}/{}, min distance {:.3}, target distance {:.3}",
            r.scenario,
            r.controller,
            r.infeasible_count,
            r.total_steps,
            r.min_dist,
            r.avg_target_dist
        );
    }
}
