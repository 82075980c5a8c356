use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fairicp::config::{load_config, AuditConfig, GenDataConfig, ParetoConfig, TrainCmdConfig, TvStudyConfig};
use fairicp::experiments::{cmd_audit, cmd_gen_data, cmd_pareto, cmd_train, cmd_tv_study, with_threads};
use fairicp::CliResult;

#[derive(Parser)]
#[command(name = "fairicp", version, about = "Equalized-odds learning and auditing with permuted attribute copies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset, optionally split into train and test files.
    GenData(Common),
    /// Restricted total-variation study of ICP against CP.
    TvStudy(Common),
    /// Prediction loss against equalized-odds violation over a mu grid.
    Pareto(Common),
    /// Equalized-odds test for saved predictions.
    Audit(Common),
    /// One training run, saving the fitted models.
    Train(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 picks one per core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

fn run(cmd: Command) -> CliResult<Vec<PathBuf>> {
    let go = |c: &Common, f: &(dyn Fn(&Path) -> CliResult<Vec<PathBuf>> + Sync)| with_threads(c.threads, || f(&c.out))?;
    match cmd {
        Command::GenData(c) => {
            let cfg: GenDataConfig = load_config(c.config.as_deref(), c.seed)?;
            go(&c, &|out| cmd_gen_data(&cfg, out))
        }
        Command::TvStudy(c) => {
            let cfg: TvStudyConfig = load_config(c.config.as_deref(), c.seed)?;
            go(&c, &|out| cmd_tv_study(&cfg, out))
        }
        Command::Pareto(c) => {
            let cfg: ParetoConfig = load_config(c.config.as_deref(), c.seed)?;
            go(&c, &|out| cmd_pareto(&cfg, out))
        }
        Command::Audit(c) => {
            let cfg: AuditConfig = load_config(c.config.as_deref(), c.seed)?;
            go(&c, &|out| cmd_audit(&cfg, out))
        }
        Command::Train(c) => {
            let cfg: TrainCmdConfig = load_config(c.config.as_deref(), c.seed)?;
            go(&c, &|out| cmd_train(&cfg, out))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
