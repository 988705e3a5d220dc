use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dagfl_cli::recipes::{builtin_recipes, recipe};
use dagfl_cli::runner::{experiment_dir, run_experiment, RunOptions};
use dagfl_cli::summary::{format_table, summarize};
use dagfl_cli::{CliError, ExperimentSpec, Result};

#[derive(Parser)]
#[command(name = "dagfl", about = "DAG-based federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment spec (a JSON file, or `recipe:<name>`)
    Run {
        spec: String,

        /// Validate and print the resolved runs without writing anything
        #[arg(long)]
        dry_run: bool,

        /// Include model parameters in dag.jsonl
        #[arg(long)]
        export_params: bool,

        /// Output root. Defaults to the spec's out_dir, then $DAGFL_OUT, then ./runs
        #[arg(long)]
        out: Option<PathBuf>,

        /// Override the number of rounds
        #[arg(long)]
        rounds: Option<usize>,

        /// Override the number of repetitions
        #[arg(long)]
        repetitions: Option<usize>,
    },

    /// List built-in recipes, or write them out as spec files
    Recipes {
        /// Directory to write `<name>.json` files into
        #[arg(long)]
        write: Option<PathBuf>,
    },

    /// Print final-round statistics for every run found under a directory
    Summarize { dir: PathBuf },
}

fn load(source: &str) -> Result<ExperimentSpec> {
    match source.strip_prefix("recipe:") {
        Some(name) => recipe(name).ok_or_else(|| CliError::UnknownRecipe(name.into())),
        None => ExperimentSpec::load(source.as_ref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { spec, dry_run, export_params, out, rounds, repetitions } => {
            (|| {
                let mut s = load(&spec)?;
                if let Some(r) = rounds {
                    s.rounds = r;
                }
                if let Some(r) = repetitions {
                    s.repetitions = r;
                }
                s.validate().map_err(|message| CliError::Schema { path: spec.clone().into(), message })?;
                let out_root = out
                    .or_else(|| s.out_dir.clone())
                    .or_else(|| std::env::var_os("DAGFL_OUT").map(PathBuf::from))
                    .unwrap_or_else(|| PathBuf::from("runs"));
                if dry_run {
                    let resolved = serde_json::json!({
                        "output": experiment_dir(&s, &out_root),
                        "spec": &s,
                        "runs": s.resolve(),
                    });
                    println!("{}", serde_json::to_string_pretty(&resolved).expect("serializes"));
                    return Ok(());
                }
                let summary = run_experiment(&s, &RunOptions { out_root: out_root.clone(), export_params })?;
                for r in &summary.runs {
                    println!("{:<16} {:<8} accuracy {}  loss {}", r.label, r.algorithm, r.accuracy, r.loss);
                }
                println!("wrote {}", experiment_dir(&s, &out_root).display());
                Ok(())
            })()
        }
        Command::Recipes { write } => (|| {
            for r in builtin_recipes() {
                match &write {
                    Some(dir) => {
                        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
                        let path = dir.join(format!("{}.json", r.name));
                        std::fs::write(&path, (r.build)().to_json()).map_err(|e| CliError::io(&path, e))?;
                        println!("{}", path.display());
                    }
                    None => println!("{:<20} {}", r.name, r.about),
                }
            }
            Ok(())
        })(),
        Command::Summarize { dir } => summarize(&dir).map(|rows| print!("{}", format_table(&rows))),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
