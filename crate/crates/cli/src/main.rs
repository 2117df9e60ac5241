//! `bnlab`: run scenarios, aggregate moment logs offline, check gradients.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bnlab::experiments::{run_scenario_with_model, Scenario};
use bnlab::io::{describe, params_checkpoint, stats_checkpoint, write_atomic, RunConfig};
use bnlab::net::gradcheck::{run_gradcheck, GradFault, TOLERANCE};
use bnlab::stats::{Aggregator, BatchMomentLog, EmaInit, EmaState};
use bnlab::BnError;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "bnlab", version, about = "Normalization-statistics laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write metrics, summary and checkpoints.
    Run {
        scenario: String,
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the config's output_dir, else runs/<scenario>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a per-batch moment log (CSV) into population statistics.
    Estimate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// EMA momentum: `mean <- momentum * mean + (1 - momentum) * batch_mean`.
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        /// Bessel-correct the precise estimate by N / (N - 1).
        #[arg(long)]
        bessel: bool,
    },
    /// Finite-difference check of every layer's backward pass.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negate BN input gradients, to confirm the check can fail.
        #[arg(long, hide = true)]
        inject_bn_sign_flip: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Ema,
    Precise,
    Naive,
}

/// Config problems exit with 2, everything else with 1.
fn exit_code(e: &BnError) -> u8 {
    match e {
        BnError::ConfigParse(_) | BnError::UnknownScenario { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { scenario, config, seed, out } => run(&scenario, &config, seed, out),
        Command::Estimate { input, method, momentum, bessel } => estimate(&input, method, momentum, bessel),
        Command::CheckGrad { seed, inject_bn_sign_flip } => {
            let fault = if inject_bn_sign_flip { GradFault::FlipBnSign } else { GradFault::None };
            check_grad(seed, fault)
        }
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("bnlab: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(name: &str, config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<u8, BnError> {
    let scenario: Scenario = name.parse()?;
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", scenario.name(), cfg.seed)));
    let (result, model) = run_scenario_with_model(scenario, &cfg)?;

    let mut csv = Vec::new();
    result.write_csv(&mut csv)?;
    write_atomic(&dir.join("metrics.csv"), &csv)?;
    let mut summary = result.summary_json();
    summary["seed"] = json!(cfg.seed);
    summary["layers"] = json!(describe(&model));
    write_atomic(&dir.join("summary.json"), pretty(&summary).as_bytes())?;
    write_atomic(&dir.join("stats.json"), pretty(&stats_checkpoint(&model)).as_bytes())?;
    write_atomic(&dir.join("params.json"), pretty(&params_checkpoint(&model)).as_bytes())?;
    println!("{}: {} metric rows written to {}", scenario, result.rows().len(), dir.display());
    Ok(0)
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes") + "\n"
}

fn estimate(input: &Path, method: Method, momentum: f64, bessel: bool) -> Result<u8, BnError> {
    let file = File::open(input).map_err(|e| BnError::Io(format!("{}: {e}", input.display())))?;
    let log = BatchMomentLog::read_csv(file)?;
    let (stats, conventions) = match method {
        Method::Ema => {
            let first = log.entries().first().ok_or(BnError::EmptyLog)?;
            // the first entry seeds the average, so a one-entry log returns it unchanged
            let mut ema = EmaState::with_init(first.mean.len(), momentum, EmaInit::FirstBatch)?;
            for e in log.entries() {
                ema.update(e)?;
            }
            (ema.as_stats(), json!({"momentum": momentum, "init": "first_batch", "variance": "biased"}))
        }
        Method::Precise => (
            Aggregator::MomentMatching { bessel }.apply(&log)?,
            json!({"variance": if bessel { "bessel_n_over_n_minus_1" } else { "biased" }}),
        ),
        Method::Naive => (Aggregator::Naive.apply(&log)?, json!({"variance": "mean_of_bessel_corrected_batches"})),
    };
    let name = match method {
        Method::Ema => "ema",
        Method::Precise => "precise",
        Method::Naive => "naive",
    };
    let out = json!({
        "method": name,
        "conventions": conventions,
        "batches": log.len(),
        "count": log.total_count(),
        "mean": stats.mean,
        "var": stats.var,
    });
    print!("{}", pretty(&out));
    Ok(0)
}

fn check_grad(seed: u64, fault: GradFault) -> Result<u8, BnError> {
    let report = run_gradcheck(seed, fault)?;
    for (layer, err) in &report.entries {
        let verdict = if *err < TOLERANCE { "ok" } else { "FAIL" };
        println!("{layer:32} {err:.3e} {verdict}");
    }
    println!("max relative error {:.3e} (tolerance {TOLERANCE:e})", report.max_error());
    Ok(if report.passed() { 0 } else { 1 })
}
