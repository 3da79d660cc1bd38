use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use modfed::fed::Strategy;
use modfed_harness::config::{ExperimentConfig, Profile};
use modfed_harness::{compare_runs, format_table, run_experiment, suites, write_compare_csv, HarnessError};

#[derive(Parser)]
#[command(name = "modfed", version, about = "Federated unrolled MR reconstruction on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate data, train a federation and write the run artifacts.
    Run {
        /// TOML config; omitted keys take the profile defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        profile: Option<Profile>,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's strategy.
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        /// Output directory (default: the config's `output_dir`, else `runs/<strategy>-seed<seed>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate finished runs; refuses runs trained on different data.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the table as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and the full model.
    Gradcheck,
    /// Fast paths against their reference implementations.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase()))
        .map_err(|_| format!("unknown strategy {s:?}; expected MODFED, FEDAVG, FEDPROX or SINGLESET"))
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::Run {
            config,
            profile,
            seed,
            strategy,
            out,
        } => {
            let mut cfg = match &config {
                Some(path) => ExperimentConfig::load(path, profile)?,
                None => ExperimentConfig::from_toml_str("", profile)?,
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = strategy {
                cfg.strategy = s;
            }
            cfg.validate()?;
            let dir = out
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.strategy, cfg.seed)));
            eprintln!("running {} with seed {} into {}", cfg.strategy, cfg.seed, dir.display());
            let outcome = run_experiment(&cfg, &dir)?;
            let s = &outcome.summary;
            println!(
                "{}: loss {:.4} -> {:.4}, test PSNR {:.2} dB (zero-filled {:.2} dB), SSIM {:.4}, {:.0} s",
                s.strategy,
                s.first_round_loss,
                s.final_round_loss,
                s.mean_psnr,
                s.mean_psnr_zero_filled,
                s.mean_ssim,
                outcome.wall_time_secs
            );
            Ok(true)
        }
        Command::Compare { dirs, out } => {
            let rows = compare_runs(&dirs)?;
            print!("{}", format_table(&rows));
            if let Some(path) = out {
                let file = std::fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
                write_compare_csv(file, &rows)?;
            }
            Ok(true)
        }
        Command::Gradcheck => {
            let mut ok = true;
            for e in modfed::gradcheck::suite() {
                let status = if e.passed() { "PASS" } else { "FAIL" };
                println!("{status} {:<32} max rel error {:.3e} (tol {:.0e})", e.name, e.max_rel_error, e.tolerance);
                ok &= e.passed();
            }
            Ok(ok)
        }
        Command::Selftest { seed } => {
            let mut ok = true;
            for c in suites::selftest(seed) {
                let status = if c.passed() { "PASS" } else { "FAIL" };
                println!("{status} {:<52} error {:.3e} (tol {:.0e})", c.name, c.error, c.tolerance);
                ok &= c.passed();
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
