//! Ablation presets: one override each against the baseline configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::{evaluate, write_eval_outputs, EvalReport};
use super::train::train;
use crate::error::{Error, Result};
use crate::synthdata::Split;

pub const DELTA_FILE: &str = "delta.csv";
pub const ABLATION_FILE: &str = "ablation.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationPreset {
    /// Bank length 100.
    #[serde(rename = "vr1")]
    Vr1,
    /// Unbounded bank.
    #[serde(rename = "vr2")]
    Vr2,
    /// k = 2 register tokens.
    #[serde(rename = "vr3")]
    Vr3,
    /// k = 32 register tokens.
    #[serde(rename = "vr4")]
    Vr4,
    /// No registers: extractor and retriever run plain Mamba blocks.
    #[serde(rename = "vM2")]
    VM2,
    /// No register diversify loss.
    #[serde(rename = "vRDL")]
    VRdl,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 6] = [
        AblationPreset::Vr1,
        AblationPreset::Vr2,
        AblationPreset::Vr3,
        AblationPreset::Vr4,
        AblationPreset::VM2,
        AblationPreset::VRdl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationPreset::Vr1 => "vr1",
            AblationPreset::Vr2 => "vr2",
            AblationPreset::Vr3 => "vr3",
            AblationPreset::Vr4 => "vr4",
            AblationPreset::VM2 => "vM2",
            AblationPreset::VRdl => "vRDL",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Contract(format!("unknown ablation preset '{s}'")))
    }

    /// The baseline configuration with this preset's single override.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        let t = &mut cfg.tracker;
        match self {
            AblationPreset::Vr1 => t.bank_len = Some(100),
            AblationPreset::Vr2 => t.bank_len = None,
            AblationPreset::Vr3 => t.k = 2,
            AblationPreset::Vr4 => t.k = 32,
            AblationPreset::VM2 => t.registers = false,
            AblationPreset::VRdl => {
                t.rd.alpha = 0.0;
                t.rd.beta = 0.0;
            }
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub metric: String,
    pub baseline: f64,
    pub preset: f64,
    pub difference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub preset: AblationPreset,
    pub baseline: EvalReport,
    pub ablated: EvalReport,
    pub delta: Vec<DeltaRow>,
}

/// Metric rows `AUC, P, Err (mm), SD (mm), FPS`, difference = preset − baseline.
pub fn delta_rows(baseline: &EvalReport, preset: &EvalReport) -> Vec<DeltaRow> {
    let pick = |r: &EvalReport| {
        [
            ("AUC", r.aggregate.auc),
            ("P", r.aggregate.precision),
            ("Err", r.aggregate.err_mm),
            ("SD", r.aggregate.sd_mm),
            ("FPS", r.fps),
        ]
    };
    pick(baseline)
        .into_iter()
        .zip(pick(preset))
        .map(|((metric, b), (_, p))| DeltaRow {
            metric: metric.to_string(),
            baseline: b,
            preset: p,
            difference: p - b,
        })
        .collect()
}

pub fn delta_csv(rows: &[DeltaRow]) -> String {
    let mut s = String::from("metric,baseline,preset,difference\n");
    for r in rows {
        writeln!(s, "{},{:?},{:?},{:?}", r.metric, r.baseline, r.preset, r.difference).expect("string write");
    }
    s
}

/// Trains a configuration into `out/train` and evaluates it on `split`,
/// writing the evaluation outputs to `out/eval`.
pub fn train_and_evaluate(cfg: &RunConfig, dataset: &Path, out: &Path, split: Split) -> Result<EvalReport> {
    let outcome = train(cfg, dataset, &out.join("train"), false)?;
    let (report, runs) = evaluate(&outcome.checkpoint, dataset, split, &cfg.grid)?;
    write_eval_outputs(&out.join("eval"), &report, &runs)?;
    Ok(report)
}

/// Trains and evaluates the baseline and the preset with the same seed,
/// then writes `delta.csv` and `ablation.json` under `out`.
pub fn run_ablation(preset: AblationPreset, base: &RunConfig, dataset: &Path, out: &Path) -> Result<AblationOutcome> {
    base.validate()?;
    let baseline = train_and_evaluate(base, dataset, &out.join("baseline"), Split::Test)?;
    let ablated = train_and_evaluate(&preset.apply(base), dataset, &out.join(preset.name()), Split::Test)?;
    let delta = delta_rows(&baseline, &ablated);
    fs::write(out.join(DELTA_FILE), delta_csv(&delta))?;
    let outcome = AblationOutcome {
        preset,
        baseline,
        ablated,
        delta,
    };
    fs::write(out.join(ABLATION_FILE), serde_json::to_string_pretty(&outcome)?)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_override_exactly_one_axis() {
        let base = RunConfig::default();
        assert_eq!(AblationPreset::Vr1.apply(&base).tracker.bank_len, Some(100));
        assert_eq!(AblationPreset::Vr2.apply(&base).tracker.bank_len, None);
        assert_eq!(AblationPreset::Vr3.apply(&base).tracker.k, 2);
        assert_eq!(AblationPreset::Vr4.apply(&base).tracker.k, 32);
        assert!(!AblationPreset::VM2.apply(&base).tracker.registers);
        let rdl = AblationPreset::VRdl.apply(&base);
        assert_eq!((rdl.tracker.rd.alpha, rdl.tracker.rd.beta), (0.0, 0.0));
        for p in AblationPreset::ALL {
            let mut c = p.apply(&base);
            c.tracker = base.tracker.clone();
            assert_eq!(c, base, "{} changed more than the tracker", p.name());
            assert_eq!(AblationPreset::parse(p.name()).unwrap(), p);
        }
        assert!(AblationPreset::parse("v9").is_err());
    }
}
