use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use potsys_cli::{check_bundled, run_path, CliError, RunOptions, BUNDLED};

#[derive(Parser)]
#[command(name = "potsys", version, about = "Run potential-system scenario configs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scenario config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel reductions.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Run whatever task the config names.
    Run,
    Simulate,
    Irf,
    Oracle,
    Estimate,
    Randtest,
    Invert,
    Control,
    /// List the bundled configs; with --out, write them there.
    Scenarios,
}

impl Command {
    fn task(self) -> Option<&'static str> {
        Some(match self {
            Command::Simulate => "simulate",
            Command::Irf => "irf",
            Command::Oracle => "oracle",
            Command::Estimate => "estimate",
            Command::Randtest => "randtest",
            Command::Invert => "invert",
            Command::Control => "control",
            Command::Run | Command::Scenarios => return None,
        })
    }
}

fn scenarios(out: Option<PathBuf>) -> Result<(), CliError> {
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    for (name, text) in BUNDLED {
        let r = check_bundled(name)?;
        println!("{name} task={} T={}", r.config.task.name(), r.spec.horizon);
        if let Some(dir) = &out {
            std::fs::write(dir.join(format!("{name}.json")), text).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error[runtime]: {e}");
            return ExitCode::from(4);
        }
    }
    let result = match cli.command {
        Command::Scenarios => scenarios(cli.out.clone()),
        cmd => match &cli.config {
            None => Err(CliError::Parse("--config is required".into())),
            Some(path) => {
                let opts = RunOptions {
                    seed: cli.seed,
                    out: cli.out.clone(),
                    expect_task: cmd.task().map(String::from),
                };
                run_path(path, &opts).map(|o| {
                    for line in &o.summary {
                        println!("{line}");
                    }
                    eprintln!(
                        "wrote {} files to {} in {:.3}s",
                        o.manifest.outputs.len() + 1,
                        o.out_dir.display(),
                        o.manifest.wall_time_s
                    );
                })
            }
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
