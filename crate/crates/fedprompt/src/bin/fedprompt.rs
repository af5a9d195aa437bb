use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedprompt::config::{load_experiment_file, resolve_runs, ResolvedRun};
use fedprompt::runner::{resolve_jobs, resolve_out_root, run_all, write_report};

#[derive(Parser)]
#[command(name = "fedprompt", version, about = "Config-driven federated prompt-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment TOML file
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Replace the file's seed before resolving runs
    #[arg(long, value_name = "SEED")]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a config, printing the resolved run plan
    Validate(ConfigArgs),
    /// Execute every run in a config
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output root (overrides the config and FEDPROMPT_OUT)
        #[arg(long, value_name = "DIR")]
        out: Option<String>,
        /// Concurrent runs (overrides FEDPROMPT_JOBS; default 1)
        #[arg(long, value_name = "N")]
        jobs: Option<usize>,
        /// Print the run plan and write nothing
        #[arg(long)]
        dry_run: bool,
    },
    /// Aggregate run summaries under an output root into report.csv
    Report {
        /// Output root to scan (or FEDPROMPT_OUT, or "runs")
        #[arg(long, value_name = "DIR")]
        out: Option<String>,
    },
}

fn print_plan(runs: &[ResolvedRun]) {
    println!("{} run(s):", runs.len());
    for run in runs {
        println!(
            "  {}  seed={}  rho={}  lambda={}  rule={}  rounds={}",
            run.dir_name(),
            run.cfg.seed,
            run.axes.malicious_fraction,
            run.axes.lambda,
            run.axes.rule,
            run.cfg.rounds,
        );
    }
}

fn load_runs(args: &ConfigArgs) -> Result<(Vec<ResolvedRun>, Option<String>), String> {
    let file = load_experiment_file(&args.config).map_err(|e| e.to_string())?;
    let runs = resolve_runs(&file, args.seed_override).map_err(|e| e.to_string())?;
    Ok((runs, file.out_dir))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate(args) => match load_runs(&args) {
            Ok((runs, _)) => {
                print_plan(&runs);
                println!("ok");
                ExitCode::SUCCESS
            }
            Err(msg) => {
                eprintln!("invalid config:\n{msg}");
                ExitCode::FAILURE
            }
        },
        Command::Run {
            config,
            out,
            jobs,
            dry_run,
        } => {
            let (runs, file_out) = match load_runs(&config) {
                Ok(v) => v,
                Err(msg) => {
                    eprintln!("invalid config:\n{msg}");
                    return ExitCode::FAILURE;
                }
            };
            let out_root = resolve_out_root(out.as_deref(), file_out.as_deref());
            if dry_run {
                print_plan(&runs);
                println!("dry run: nothing written (out root would be {})", out_root.display());
                return ExitCode::SUCCESS;
            }
            let jobs = resolve_jobs(jobs);
            match run_all(&runs, &out_root, jobs) {
                Ok(batch) => {
                    for output in &batch.outputs {
                        println!(
                            "{}  acc={:.4}  asr={:.4}  ({:.2}s)",
                            output.dir.display(),
                            output.summary.final_acc,
                            output.summary.final_asr,
                            output.summary.wall_time_s,
                        );
                    }
                    if batch.failures.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        for f in &batch.failures {
                            eprintln!("FAILED {}: {}", f.label, f.error);
                        }
                        eprintln!(
                            "{} of {} runs failed; see failure_manifest.json",
                            batch.failures.len(),
                            runs.len()
                        );
                        ExitCode::FAILURE
                    }
                }
                Err(e) => {
                    eprintln!("run failed: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Report { out } => {
            let out_root = resolve_out_root(out.as_deref(), None);
            match write_report(&out_root) {
                Ok((path, count)) => {
                    println!("{} ({count} runs)", path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("report failed: {e}");
                    ExitCode::FAILURE
                }
            }
        }
    }
}
