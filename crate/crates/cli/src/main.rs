use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evclplus::harness::{
    parse_config, read_results_csv, render_accuracy_svg, run_experiment, write_results_csv,
};
use evclplus::verify;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "evclplus", version, about = "Continual-learning experiments with EVCLplus and baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method and seed in a config file and write CSV tables and a plot.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of runs executed in parallel.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Plot mean average accuracy per method from a raw or aggregate CSV.
    Plot {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check gradients, KL and Fisher estimates against independent oracles.
    Selftest,
}

fn fail(code: u8, err: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(code)
}

fn run(config: PathBuf, out: Option<PathBuf>, workers: Option<usize>) -> ExitCode {
    let mut cfg = match parse_config(&config) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if let Some(dir) = out {
        cfg.out_dir = dir;
    }
    let workers = workers
        .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
        .unwrap_or(1);
    if workers == 0 {
        return fail(EXIT_CONFIG, "--workers must be at least 1");
    }
    if let Err(e) = cfg.validate() {
        return fail(EXIT_CONFIG, e);
    }

    eprintln!(
        "{}: {} method(s) x {} seed(s), {} task(s), {} worker(s)",
        cfg.benchmark,
        cfg.methods.len(),
        cfg.seeds.len(),
        cfg.n_tasks,
        workers
    );
    let table = match run_experiment(&cfg, workers) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_RUNTIME, e),
    };
    if let Err(e) = fs::create_dir_all(&cfg.out_dir) {
        return fail(EXIT_RUNTIME, format!("{}: {e}", cfg.out_dir.display()));
    }
    let csv = cfg.out_dir.join("results.csv");
    let svg = cfg.out_dir.join("accuracy.svg");
    if let Err(e) = write_results_csv(&table, &csv).and_then(|_| render_accuracy_svg(&table, &svg)) {
        return fail(EXIT_RUNTIME, e);
    }

    println!("method               avg_acc   std       forgetting");
    for a in table.aggregates.iter().filter(|a| a.after_task == cfg.n_tasks) {
        println!(
            "{:<20} {:.4}    {:.4}    {:.4}",
            a.method, a.avg_accuracy_mean, a.avg_accuracy_std, a.forgetting_mean
        );
    }
    println!("wrote {} and {}", csv.display(), svg.display());
    ExitCode::SUCCESS
}

fn plot(results: PathBuf, out: PathBuf) -> ExitCode {
    match read_results_csv(&results).and_then(|t| render_accuracy_svg(&t, &out)) {
        Ok(()) => {
            println!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_RUNTIME, e),
    }
}

fn selftest() -> ExitCode {
    let outcomes = verify::selftest();
    let mut failed = 0;
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", o.name, o.detail);
        if !o.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} of {} oracle(s) failed", outcomes.len());
        ExitCode::from(EXIT_RUNTIME)
    } else {
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.command {
        Command::Run {
            config,
            out,
            workers,
        } => run(config, out, workers),
        Command::Plot { results, out } => plot(results, out),
        Command::Selftest => selftest(),
    }
}
