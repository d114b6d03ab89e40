use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scatterlab::cli;

#[derive(Parser)]
#[command(name = "scatterlab", version, about = "Scatter functional experiments")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment of a JSON config and write the results.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the Gaussian calibration constant of a functional.
    Calibrate {
        /// JSON file holding the functional.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        p: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        replicates: usize,
        #[arg(long)]
        seed: u64,
        /// Write the calibrated functional here instead of standard output.
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Print a results table and write convergence CSVs.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c as u8)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return code(if e.use_stderr() { cli::exit::CONFIG } else { cli::exit::OK });
        }
    };
    match args.command {
        Command::Run { config, out } => code(cli::run(&config, &out, &mut std::io::stderr())),
        Command::Calibrate { spec, p, n, replicates, seed, write } => {
            let text = match std::fs::read_to_string(&spec) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("config error: {}: {e}", spec.display());
                    return code(cli::exit::CONFIG);
                }
            };
            match cli::calibrate(&text, p, n, replicates, seed) {
                Ok((constant, se, updated)) => {
                    println!("constant {constant:.6} ± {se:.6} (p = {p}, n = {n}, {replicates} replicates, seed {seed})");
                    let json = serde_json::to_string_pretty(&updated).expect("spec serializes");
                    match write {
                        Some(path) => {
                            if let Err(e) = std::fs::write(&path, json + "\n") {
                                eprintln!("i/o error: {}: {e}", path.display());
                                return code(cli::exit::RUNTIME);
                            }
                        }
                        None => println!("{json}"),
                    }
                    code(cli::exit::OK)
                }
                Err(e) => {
                    eprintln!("{e}");
                    code(e.exit_code())
                }
            }
        }
        Command::Report { dir } => match cli::report(&dir) {
            Ok((table, written)) => {
                let mut out = std::io::stdout().lock();
                let _ = out.write_all(table.as_bytes());
                for path in written {
                    let _ = writeln!(out, "wrote {}", path.display());
                }
                code(cli::exit::OK)
            }
            Err(e) => {
                eprintln!("{e}");
                code(e.exit_code())
            }
        },
    }
}
