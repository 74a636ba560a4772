use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use splitmpc::dfg::Mode;
use splitmpc_cli::commands::{self, Overrides, Run};
use splitmpc_cli::CliError;

#[derive(Parser)]
#[command(name = "splitmpc", version, about = "Certified time-split linear MPC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One split solve at the configured initial state.
    Solve(Flags),
    /// Closed-loop simulation.
    Simulate(Flags),
    /// Split solver against the condensed baseline along the closed loop.
    Bench(Flags),
    /// Tightening ledger at the configured initial state.
    Certify(Flags),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Parallel,
    Serialized,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(clap::Args)]
struct Flags {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    oracle: Option<Switch>,
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            mode: self.mode.map(|m| match m {
                ModeArg::Parallel => Mode::Parallel,
                ModeArg::Serialized => Mode::Serialized,
            }),
            out: self.out.clone(),
            seed: self.seed,
            oracle: self.oracle.map(|s| matches!(s, Switch::On)),
        }
    }
}

fn execute(cmd: Command) -> Result<(), CliError> {
    let (flags, which) = match &cmd {
        Command::Solve(f) => (f, "solve"),
        Command::Simulate(f) => (f, "simulate"),
        Command::Bench(f) => (f, "bench"),
        Command::Certify(f) => (f, "certify"),
    };
    let run = Run::load(&flags.config, &flags.overrides())?;
    match which {
        "solve" => {
            let o = commands::solve(&run)?;
            let l = o.record.ledger.as_ref().expect("split solve has a ledger");
            println!("{:>3} {:>10} {:>12} {:>12} {:>8}", "t", "k_bar", "eta", "violation", "cert");
            for t in 0..l.iterations.len() {
                println!(
                    "{t:>3} {:>10} {:>12.4e} {:>12.4e} {:>8}",
                    l.iterations[t],
                    l.accuracy[t],
                    o.report.violation[t],
                    o.report.certified(t)
                );
            }
            println!("u0 = {:?}  V_gamma = {:?}  V* = {:?}  gap = {:?}", o.record.input, o.record.cost, o.record.oracle_cost, o.record.gap);
        }
        "simulate" => {
            let log = commands::simulate(&run)?;
            println!(
                "{} samples ({} MPC), terminal entry {:?}, converged {}",
                log.samples.len(),
                log.mpc_samples().count(),
                log.terminal_entry,
                log.converged
            );
        }
        "bench" => {
            let rows = commands::bench(&run)?;
            print!("{}", commands::bench_markdown(&rows, run.problem.horizon()));
        }
        _ => {
            let d = commands::certify(&run)?;
            println!("k_bar = {:?}", d.ledger.iterations);
            println!("eta   = {:?}", d.ledger.accuracy);
        }
    }
    println!("artifacts in {}", run.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("splitmpc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
