//! `perf-rl`: run experiments, print theorem constants, check grid files.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use perf_rl::experiment::{load_config, run_experiment, write_outputs, ExperimentError};
use perf_rl::gridworld::parse_grid;
use perf_rl::retraining::{theorem_constants, TheoremInputs};

const CONFIG_ERROR: u8 = 1;
const RUNTIME_ERROR: u8 = 2;
const DEFAULT_OUT: &str = "results";

#[derive(Parser)]
#[command(name = "perf-rl", version, about = "Performative reinforcement learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write traces.csv and summary.json.
    Run {
        config: PathBuf,
        /// Output directory; overrides `experiment.output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        jobs: Option<usize>,
        /// Also write every iterate to iterates.csv.
        #[arg(long)]
        dump_iterates: bool,
    },
    /// Print the closed-form theorem constants as JSON.
    Constants(ConstantArgs),
    /// Parse a grid file and print it back.
    ValidateGrid { file: PathBuf },
}

#[derive(Args)]
struct ConstantArgs {
    #[arg(long)]
    states: usize,
    #[arg(long)]
    actions: usize,
    #[arg(long, default_value_t = 0.9)]
    discount: f64,
    #[arg(long)]
    epsilon_r: f64,
    #[arg(long, default_value_t = 0.0)]
    epsilon_p: f64,
    #[arg(long)]
    lambda: f64,
    /// Overlap bound B.
    #[arg(long, default_value_t = 2.0)]
    overlap: f64,
    #[arg(long, default_value_t = 1e-4)]
    delta: f64,
    #[arg(long, default_value_t = 0.05)]
    failure_prob: f64,
    /// Contraction target of the finite-sample recursion.
    #[arg(long, default_value_t = 0.25)]
    beta: f64,
    /// Time index in the per-step sample bound.
    #[arg(long, default_value_t = 1)]
    step: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not errors; bad arguments are input errors.
            return if e.use_stderr() {
                ExitCode::from(CONFIG_ERROR)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.command {
        Command::Run {
            config,
            out,
            jobs,
            dump_iterates,
        } => run(config, out, jobs, dump_iterates),
        Command::Constants(args) => constants(&args),
        Command::ValidateGrid { file } => validate_grid(file),
    }
}

fn run(config: PathBuf, out: Option<PathBuf>, jobs: Option<usize>, dump_iterates: bool) -> ExitCode {
    let config = match load_config(&config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    let dir = out
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let output = match run_experiment(&config, jobs.unwrap_or(0)) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    for family in &output.families {
        for run in &family.runs {
            if let Err(e) = &run.outcome {
                let tag = family.label.as_deref().map(|l| format!("{l} ")).unwrap_or_default();
                eprintln!("warning: {tag}seed {} failed: {e}", run.seed);
            }
        }
    }
    match write_outputs(&output, &dir, dump_iterates) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &ExperimentError) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        ExperimentError::Config(_) => ExitCode::from(CONFIG_ERROR),
        _ => ExitCode::from(RUNTIME_ERROR),
    }
}

fn constants(args: &ConstantArgs) -> ExitCode {
    let inputs = TheoremInputs {
        num_states: args.states,
        num_actions: args.actions,
        discount: args.discount,
        epsilon_r: args.epsilon_r,
        epsilon_p: args.epsilon_p,
        lambda: args.lambda,
        overlap: args.overlap,
        delta: args.delta,
        failure_prob: args.failure_prob,
        beta: args.beta,
        step: args.step,
    };
    match theorem_constants(&inputs) {
        Ok(c) => {
            println!("{}", serde_json::to_string_pretty(&c).expect("constants serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CONFIG_ERROR)
        }
    }
}

fn validate_grid(file: PathBuf) -> ExitCode {
    let text = match std::fs::read_to_string(&file) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", file.display());
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    match parse_grid(&text) {
        Ok(grid) => {
            print!("{grid}");
            println!("{} x {} grid, {} start cell(s)", grid.width(), grid.height(), grid.starts().len());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}: {e}", file.display());
            ExitCode::from(CONFIG_ERROR)
        }
    }
}
