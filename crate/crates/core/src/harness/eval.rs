//! Online evaluation of a checkpoint on a dataset split.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{center_errors, metrics_from_errors, MetricGrid, Metrics};
use crate::error::{ensure, Result};
use crate::image::Frame;
use crate::numerics::{Real, Tape};
use crate::rdloss::diversify_term;
use crate::registers::RegisterBank;
use crate::synthdata::{load_sequence, read_dataset_index, Phase, SequenceSample, Split};
use crate::tracker::{load_checkpoint, track_step, tracker_init, Model, Prediction, TrackerConfig};
use crate::numerics::DiffArray;

pub const REPORT_FILE: &str = "report.json";
pub const SUCCESS_CURVE_FILE: &str = "success_curve.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

/// How AUC and precision are defined for a point target; recorded in reports.
pub const AUC_DEFINITION: &str =
    "center-error success: fraction of frames with tip error <= threshold (px), averaged over the threshold grid";

/// Metrics of one tracked sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub name: String,
    pub metrics: Metrics,
    /// Metrics over aspiration-phase frames; `None` when there are none.
    pub aspiration: Option<Metrics>,
    pub fps: f64,
    /// `diversify_term` of the final bank; `None` without registers or with
    /// fewer than two entries.
    pub diversify: Option<f64>,
}

/// Evaluation report, written as `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub seed: u64,
    /// SHA-256 of the tracker configuration JSON.
    pub config_hash: String,
    pub grid: MetricGrid,
    pub auc_definition: String,
    /// Frame-weighted metrics over every tracked frame of the split.
    pub aggregate: Metrics,
    pub aspiration: Option<Metrics>,
    /// Tracked frames per second of summed model latency.
    pub fps: f64,
    /// Mean per-sequence `diversify_term` of the final register bank.
    pub held_out_diversify: Option<f64>,
    pub sequences: Vec<SequenceReport>,
}

pub fn config_hash(cfg: &TrackerConfig) -> Result<String> {
    let json = serde_json::to_vec(cfg)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// Initialises on `frames[0]` at `tip0` and tracks every later frame online.
pub fn track_sequence<T: Real>(model: &Model<T>, frames: &[Frame], tip0: [f64; 2]) -> Result<Vec<Prediction>> {
    ensure!(!frames.is_empty(), "cannot track an empty sequence");
    let mut state = tracker_init(model, &frames[0], tip0)?;
    frames[1..].iter().map(|f| track_step(model, &mut state, f)).collect()
}

/// `diversify_term` of a stored bank, evaluated in f64.
pub fn bank_diversify<T: Real>(bank: &RegisterBank<DiffArray<T>>, cfg: &TrackerConfig) -> Result<Option<f64>> {
    if bank.count() < 2 {
        return Ok(None);
    }
    let tape = Tape::<f64>::new();
    let parts: Vec<_> = bank.iter().map(|e| tape.constant_array(&e.cast::<f64>())).collect();
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(bank.entry_shape());
    let stacked = tape.concat(&parts).reshape(&shape);
    Ok(Some(diversify_term(stacked, cfg.rd.pooling)?.item()))
}

/// Raw per-sequence outputs kept for the CSV files.
struct SequenceRun {
    name: String,
    predictions: Vec<Prediction>,
    sample: SequenceSample,
    diversify: Option<f64>,
}

fn run_sequence<T: Real>(model: &Model<T>, name: String, sample: SequenceSample) -> Result<SequenceRun> {
    ensure!(sample.frames.len() >= 2, "sequence {name} has fewer than two frames");
    let mut state = tracker_init(model, &sample.frames[0], sample.tips[0])?;
    let predictions = sample.frames[1..]
        .iter()
        .map(|f| track_step(model, &mut state, f))
        .collect::<Result<Vec<_>>>()?;
    let diversify = match &state.bank {
        Some(bank) => bank_diversify(bank, &model.cfg)?,
        None => None,
    };
    Ok(SequenceRun {
        name,
        predictions,
        sample,
        diversify,
    })
}

fn aspiration_errors(errors: &[f64], phases: &[Phase]) -> Vec<f64> {
    errors
        .iter()
        .zip(phases)
        .filter(|(_, p)| **p == Phase::Aspiration)
        .map(|(e, _)| *e)
        .collect()
}

/// Evaluates a model on every sequence of `split` (in parallel across
/// sequences) and aggregates frame-weighted metrics.
pub fn evaluate_model<T: Real>(
    model: &Model<T>,
    seed: u64,
    dataset: &Path,
    split: Split,
    grid: &MetricGrid,
) -> Result<(EvalReport, Vec<SequenceRunOutput>)> {
    let index = read_dataset_index(dataset)?;
    let dirs = index.sequence_dirs(dataset, split)?;
    let runs = dirs
        .par_iter()
        .map(|dir| {
            let name = dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
            run_sequence(model, name, load_sequence(dir)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mm_per_px = runs[0].sample.mm_per_px;
    ensure!(
        runs.iter().all(|r| r.sample.mm_per_px == mm_per_px),
        "sequences of one split must share a pixel spacing"
    );
    let mut all_errors = Vec::new();
    let mut all_asp = Vec::new();
    let mut total_latency = 0.0;
    let mut sequences = Vec::with_capacity(runs.len());
    let mut outputs = Vec::with_capacity(runs.len());
    for run in runs {
        let tips: Vec<[f64; 2]> = run.predictions.iter().map(|p| p.tip).collect();
        let errors = center_errors(&tips, &run.sample.tips[1..])?;
        let asp = aspiration_errors(&errors, &run.sample.phases[1..]);
        let latency: f64 = run.predictions.iter().map(|p| p.latency).sum();
        total_latency += latency;
        sequences.push(SequenceReport {
            name: run.name.clone(),
            metrics: metrics_from_errors(&errors, mm_per_px, grid)?,
            aspiration: (!asp.is_empty()).then(|| metrics_from_errors(&asp, mm_per_px, grid)).transpose()?,
            fps: errors.len() as f64 / latency.max(f64::MIN_POSITIVE),
            diversify: run.diversify,
        });
        all_errors.extend_from_slice(&errors);
        all_asp.extend_from_slice(&asp);
        outputs.push(SequenceRunOutput {
            name: run.name,
            predictions: run.predictions,
            truth: run.sample.tips[1..].to_vec(),
            phases: run.sample.phases[1..].to_vec(),
        });
    }
    let divs: Vec<f64> = sequences.iter().filter_map(|s| s.diversify).collect();
    let report = EvalReport {
        split: split.name().to_string(),
        seed,
        config_hash: config_hash(&model.cfg)?,
        grid: grid.clone(),
        auc_definition: AUC_DEFINITION.to_string(),
        aggregate: metrics_from_errors(&all_errors, mm_per_px, grid)?,
        aspiration: (!all_asp.is_empty())
            .then(|| metrics_from_errors(&all_asp, mm_per_px, grid))
            .transpose()?,
        fps: all_errors.len() as f64 / total_latency.max(f64::MIN_POSITIVE),
        held_out_diversify: (!divs.is_empty()).then(|| divs.iter().sum::<f64>() / divs.len() as f64),
        sequences,
    };
    Ok((report, outputs))
}

/// Per-frame predictions of one sequence, frame 0 (initialisation) excluded.
#[derive(Clone, Debug)]
pub struct SequenceRunOutput {
    pub name: String,
    pub predictions: Vec<Prediction>,
    pub truth: Vec<[f64; 2]>,
    pub phases: Vec<Phase>,
}

/// Loads a checkpoint and evaluates it; see [`evaluate_model`].
pub fn evaluate(checkpoint: &Path, dataset: &Path, split: Split, grid: &MetricGrid) -> Result<(EvalReport, Vec<SequenceRunOutput>)> {
    let (model, manifest) = load_checkpoint::<f32>(checkpoint)?;
    evaluate_model(&model, manifest.seed, dataset, split, grid)
}

/// Writes `report.json`, `success_curve.csv` and `predictions.csv` under
/// `out`. Latency is kept out of the CSVs so they are reproducible bitwise.
pub fn write_eval_outputs(out: &Path, report: &EvalReport, runs: &[SequenceRunOutput]) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(report)?)?;
    let mut curve = String::from("threshold_px,success\n");
    for (th, s) in report.grid.thresholds().iter().zip(&report.aggregate.success) {
        writeln!(curve, "{th:?},{s:?}").expect("string write");
    }
    fs::write(out.join(SUCCESS_CURVE_FILE), curve)?;
    let mut preds = String::from("sequence,frame,pred_x_px,pred_y_px,truth_x_px,truth_y_px,phase,confidence\n");
    for run in runs {
        for (i, ((p, t), ph)) in run.predictions.iter().zip(&run.truth).zip(&run.phases).enumerate() {
            writeln!(
                preds,
                "{},{},{:?},{:?},{:?},{:?},{},{:?}",
                run.name,
                i + 1,
                p.tip[0],
                p.tip[1],
                t[0],
                t[1],
                ph.as_str(),
                p.confidence
            )
            .expect("string write");
        }
    }
    fs::write(out.join(PREDICTIONS_FILE), preds)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
