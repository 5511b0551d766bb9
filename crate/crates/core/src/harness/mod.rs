//! Experiment harness: training, evaluation, ablations, gradient checks and
//! scan benchmarks, with machine-readable reports.

pub mod ablation;
pub mod bench;
pub mod config;
pub mod eval;
pub mod gradcheck_all;
pub mod metrics;
pub mod train;

pub use ablation::{delta_csv, delta_rows, run_ablation, train_and_evaluate, AblationOutcome, AblationPreset, DeltaRow};
pub use bench::{bench_csv, bench_scan, BenchConfig, BenchRow, ScanVariant};
pub use config::{AugmentConfig, RunConfig};
pub use eval::{
    bank_diversify, config_hash, evaluate, evaluate_model, read_report, track_sequence, write_eval_outputs,
    EvalReport, SequenceReport, SequenceRunOutput,
};
pub use gradcheck_all::{check_composites, check_primitive, gradcheck_all, CheckKind, GradcheckAllReport, OpCheck};
pub use metrics::{center_errors, metrics_compute, metrics_from_errors, MetricGrid, Metrics};
pub use train::{clip_loss, plan_clip, read_curve, train, ClipLoss, ClipPlan, CurveRow, TrainOutcome};
