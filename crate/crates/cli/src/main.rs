use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dbpairs_cli::{run, task_catalog, Task, EXIT_ERROR};

#[derive(Parser)]
#[command(name = "dbpairs", version, about = "Numerical experiments on admissible pairs (D, V)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the tasks listed in a JSON config.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// RNG seed (overrides the config's seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List the available tasks.
    ListTasks {
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match cli.command {
        Command::ListTasks { json } => {
            if json {
                println!("{}", serde_json::to_string_pretty(&task_catalog()).expect("catalog serializes"));
            } else {
                for t in Task::ALL {
                    println!("{:<16} {}", t.name(), t.summary());
                }
            }
            ExitCode::SUCCESS
        }
        Command::Run { config, out, seed } => match run(&config, out.as_deref(), seed) {
            Ok((report, dir)) => {
                for t in &report.tasks {
                    let reason = t.reason.as_deref().map(|r| format!(" ({r})")).unwrap_or_default();
                    println!("{:<16} {:?}{reason}", t.task.name(), t.verdict);
                }
                println!("report: {}", dir.join(dbpairs_cli::REPORT_FILE).display());
                ExitCode::from(report.exit_code() as u8)
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(EXIT_ERROR as u8)
            }
        },
    }
}
