use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use udufact::experiment::{self, ExperimentSpec};
use udufact::solver::{self, FactorState, StateDump};
use udufact::{spectra, Error};

#[derive(Parser)]
#[command(name = "udufact", version, about = "Run norm-constrained factorization experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment spec and write its artifacts.
    Run {
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Solver iterations (training epochs for network kinds).
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Check a spec and print it with defaults filled.
    Validate { spec: PathBuf },
    /// Print the singular spectrum of a saved solver state as CSV.
    Spectrum { state: PathBuf },
}

fn fail(code: u8, kind: &str, errors: Vec<String>) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "messages": errors }));
    ExitCode::from(code)
}

fn load(path: &PathBuf) -> Result<ExperimentSpec, ExitCode> {
    let raw = std::fs::read_to_string(path).map_err(|e| fail(1, "io", vec![format!("{}: {e}", path.display())]))?;
    experiment::validate_spec(&raw).map_err(|errs| fail(1, "invalid_spec", errs))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Validate { spec } => match load(&spec) {
            Ok(s) => {
                println!("{}", serde_json::to_string_pretty(&s.to_json()).expect("json"));
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Cmd::Run { spec, out, seed, iters } => {
            let mut s = match load(&spec) {
                Ok(s) => s,
                Err(code) => return code,
            };
            if let Some(o) = out {
                s.output_dir = o;
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
            if let Some(n) = iters {
                s.set_iters(n);
            }
            match experiment::run_experiment(&s, experiment::default_threads()) {
                Ok(o) => {
                    println!("{}", s.output_dir.join("summary.json").display());
                    ExitCode::from(o.exit_code as u8)
                }
                Err(Error::NonFinite { iter, what }) => {
                    let at = iter.map_or(String::new(), |i| format!(" at iteration {i}"));
                    fail(2, "non_finite", vec![format!("{what}{at}")])
                }
                Err(e @ (Error::Spec(_) | Error::Argument(_) | Error::Dimension(_))) => {
                    fail(1, "invalid_spec", vec![e.to_string()])
                }
                Err(e) => fail(1, "runtime", vec![e.to_string()]),
            }
        }
        Cmd::Spectrum { state } => {
            let res = std::fs::read_to_string(&state)
                .map_err(Error::from)
                .and_then(|t| Ok(serde_json::from_str::<StateDump>(&t)?))
                .and_then(|dump| {
                    let scale = dump.scale;
                    let st = FactorState::try_from(dump)?;
                    spectra::singular_values(&(solver::reconstruct(&st) * scale))
                });
            match res {
                Ok(sv) => {
                    print!("{}", spectra::spectrum_csv(&sv));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(1, "bad_state", vec![e.to_string()]),
            }
        }
    }
}
