//! `regtrack` command line: dataset generation, training, evaluation,
//! ablations, gradient checks and scan benchmarks.
//!
//! Exit codes: 0 success, 2 contract violation (bad input or configuration),
//! 3 failed check, 1 any other error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use regtrack::harness::{
    bench_csv, bench_scan, evaluate, gradcheck_all, run_ablation, train, write_eval_outputs,
    AblationPreset, BenchConfig, RunConfig,
};
use regtrack::synthdata::{generate_dataset, Split};
use regtrack::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "regtrack", version, about = "Register-augmented needle tip tracker")]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset into --out.
    Gen,
    /// Train on a dataset; writes a checkpoint and curve.csv into --out.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Continue from the checkpoint already in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on one split; writes report.json and CSVs into --out.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate the baseline and one ablation preset.
    Ablate {
        /// One of vr1, vr2, vr3, vr4, vM2, vRDL.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
    /// Time the sequential and chunked scans over doubling lengths.
    Bench {
        /// Comma-separated ascending lengths.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Fail (exit 3) if any doubling ratio at length ≥ 8192 exceeds this.
        #[arg(long)]
        max_ratio: Option<f64>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Contract(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Contract(format!("invalid config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let out = &cli.out;
    match cli.command {
        Command::Gen => {
            let index = generate_dataset(&cfg.dataset, cfg.seed, out)?;
            let total: usize = index.splits.values().map(Vec::len).sum();
            log::info!("wrote {total} sequences to {}", out.display());
        }
        Command::Train { dataset, resume } => {
            let outcome = train(&cfg, &dataset, out, resume)?;
            if let Some(last) = outcome.curve.last() {
                log::info!("final loss {:.4} at step {}", last.loss, last.step);
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
        } => {
            let split = Split::parse(&split)?;
            let (report, runs) = evaluate(&checkpoint, &dataset, split, &cfg.grid)?;
            write_eval_outputs(out, &report, &runs)?;
            let m = &report.aggregate;
            println!(
                "{}: AUC {:.2}  P {:.2}  Err {:.3} mm ({:.2} px)  SD {:.3} mm  FPS {:.1}",
                report.split, m.auc, m.precision, m.err_mm, m.err_px, m.sd_mm, report.fps
            );
        }
        Command::Ablate { preset, dataset } => {
            let preset = AblationPreset::parse(&preset)?;
            let outcome = run_ablation(preset, &cfg, &dataset, out)?;
            println!("metric,baseline,{},difference", preset.name());
            for r in &outcome.delta {
                println!("{},{:.4},{:.4},{:+.4}", r.metric, r.baseline, r.preset, r.difference);
            }
        }
        Command::Gradcheck => {
            let report = gradcheck_all(cfg.seed)?;
            fs::create_dir_all(out)?;
            fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&report)?)?;
            for c in &report.checks {
                println!(
                    "{:<24} {:>10.3e} {}",
                    c.op,
                    c.max_relative_error,
                    if c.passed { "ok" } else { "FAIL" }
                );
            }
            if !report.passed {
                let failed: Vec<&str> =
                    report.checks.iter().filter(|c| !c.passed).map(|c| c.op.as_str()).collect();
                return Err(Error::CheckFailed(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
        Command::Bench {
            lengths,
            repeats,
            max_ratio,
        } => {
            let mut bcfg = BenchConfig::default();
            if let Some(l) = lengths {
                bcfg.lengths = l;
            }
            if let Some(r) = repeats {
                bcfg.repeats = r;
            }
            let rows = bench_scan(&bcfg, cfg.seed)?;
            let csv = bench_csv(&rows);
            fs::create_dir_all(out)?;
            fs::write(out.join("bench.csv"), &csv)?;
            print!("{csv}");
            if let Some(limit) = max_ratio {
                let bad: Vec<String> = rows
                    .iter()
                    .filter(|r| r.length >= 8192 && r.doubling_ratio.is_some_and(|q| q > limit))
                    .map(|r| format!("{} at {}", r.variant.as_str(), r.length))
                    .collect();
                if !bad.is_empty() {
                    return Err(Error::CheckFailed(format!(
                        "doubling ratio above {limit}: {}",
                        bad.join(", ")
                    )));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Contract(_) => 2,
                Error::CheckFailed(_) => 3,
                _ => 1,
            })
        }
    }
}
