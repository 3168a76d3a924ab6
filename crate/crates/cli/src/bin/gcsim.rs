use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gkm_cli::{parse_scenario, run, RunOptions};

#[derive(Parser)]
#[command(name = "gcsim", version, about = "Group key management scenario simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario script.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the trace here instead of stdout.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write key=value statistics here.
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Print raw key bytes in the trace.
        #[arg(long)]
        insecure_dump_keys: bool,
    },
    /// Diff two trace files.
    Diff { a: PathBuf, b: PathBuf },
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("gcsim: {e}");
            ExitCode::from(1)
        }
    }
}

fn real_main() -> Result<u8, Box<dyn std::error::Error>> {
    match Cli::parse().command {
        Command::Run {
            scenario,
            seed,
            trace,
            stats,
            insecure_dump_keys,
        } => {
            let text = std::fs::read_to_string(&scenario).map_err(|e| format!("{}: {e}", scenario.display()))?;
            let scn = parse_scenario(&text)?;
            let out = run(
                &scn,
                RunOptions {
                    seed,
                    dump_keys: insecure_dump_keys,
                },
            )?;
            match trace {
                Some(p) => std::fs::write(p, &out.trace)?,
                None => print!("{}", out.trace),
            }
            if let Some(p) = stats {
                std::fs::write(p, out.stats.to_kv())?;
            }
            for v in &out.stats.violations {
                eprintln!("gcsim: invariant violated: {v}");
            }
            Ok(out.exit_code() as u8)
        }
        Command::Diff { a, b } => {
            let diff = gkm_cli::compare_runs(&std::fs::read_to_string(a)?, &std::fs::read_to_string(b)?);
            print!("{diff}");
            Ok(u8::from(!diff.is_empty()))
        }
    }
}
