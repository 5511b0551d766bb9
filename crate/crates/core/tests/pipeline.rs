//! End-to-end harness behaviour on a tiny dataset: training, resume,
//! evaluation reports, ablation tables and the metric oracle.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regtrack::harness::{
    evaluate, metrics_compute, read_curve, read_report, run_ablation, train, write_eval_outputs,
    AblationPreset, AugmentConfig, EvalReport, MetricGrid, RunConfig,
};
use regtrack::numerics::AdamWConfig;
use regtrack::synthdata::{generate_dataset, DatasetConfig, MotionConfig, RenderConfig, Split};
use regtrack::tracker::TrackerConfig;
use regtrack::Error;

fn tiny_config() -> RunConfig {
    RunConfig {
        tracker: TrackerConfig {
            search_size: 48,
            template_size: 24,
            channels: 8,
            k: 2,
            bank_len: Some(6),
            mamba_depth: 1,
            attn_dim: 8,
            head_channels: 8,
            template_extent: 24.0,
            ..Default::default()
        },
        optim: AdamWConfig {
            lr: 3e-3,
            ..Default::default()
        },
        steps: 4,
        batch: 2,
        clip_len: 4,
        augment: AugmentConfig {
            shift_px: 4.0,
            jitter_px: 1.0,
            ..Default::default()
        },
        val_every: 2,
        val_frames: 6,
        dataset: DatasetConfig {
            motion: MotionConfig {
                start_depth: 2.0,
                insertion_depth: 6.0,
                stroke: 4.0,
                cycles: 1,
                entry_px: [30.0, 30.0],
                ..Default::default()
            },
            render: RenderConfig {
                width: 128,
                height: 128,
                ..Default::default()
            },
            n_train: 2,
            n_val: 1,
            n_test: 2,
            n_frames: Some(16),
            entry_jitter: 4.0,
            ..Default::default()
        },
        seed: 3,
        ..Default::default()
    }
}

fn dataset(dir: &Path, cfg: &RunConfig) {
    generate_dataset(&cfg.dataset, 11, dir).unwrap();
}

#[test]
fn metrics_agree_with_a_naive_implementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = MetricGrid::default();
    for _ in 0..100 {
        let n = rng.random_range(1..40);
        let truth: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)]).collect();
        let preds: Vec<[f64; 2]> = truth
            .iter()
            .map(|t| [t[0] + rng.random_range(-40.0..40.0), t[1] + rng.random_range(-40.0..40.0)])
            .collect();
        let m = metrics_compute(&preds, &truth, 0.15, &grid).unwrap();

        let mut errs = Vec::new();
        for i in 0..n {
            let dx = preds[i][0] - truth[i][0];
            let dy = preds[i][1] - truth[i][1];
            errs.push((dx * dx + dy * dy).sqrt());
        }
        let mut mean = 0.0;
        for e in &errs {
            mean += e;
        }
        mean /= n as f64;
        let mut var = 0.0;
        for e in &errs {
            var += (e - mean) * (e - mean);
        }
        let sd = (var / n as f64).sqrt();
        let mut auc = 0.0;
        for th in 0..=50 {
            let mut hits = 0;
            for e in &errs {
                if *e <= th as f64 {
                    hits += 1;
                }
            }
            auc += hits as f64 / n as f64;
        }
        auc = auc / 51.0 * 100.0;
        let mut p = 0;
        for e in &errs {
            if *e <= 20.0 {
                p += 1;
            }
        }
        let p = p as f64 / n as f64 * 100.0;
        for (got, want) in [(m.err_px, mean), (m.sd_px, sd), (m.err_mm, mean * 0.15), (m.sd_mm, sd * 0.15), (m.auc, auc), (m.precision, p)] {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn training_reduces_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.steps = 40;
    cfg.val_every = 0;
    dataset(&dir.path().join("data"), &cfg);
    let out = train(&cfg, &dir.path().join("data"), &dir.path().join("run"), false).unwrap();
    let mean = |rows: &[regtrack::harness::CurveRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    let (first, last) = (mean(&out.curve[..10]), mean(&out.curve[30..]));
    assert!(last < first, "smoothed loss went from {first} to {last}");
    assert_eq!(read_curve(&dir.path().join("run/curve.csv")).unwrap(), out.curve);
}

#[test]
fn resume_reproduces_the_next_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let data = dir.path().join("data");
    dataset(&data, &cfg);
    let straight = train(&cfg, &data, &dir.path().join("a"), false).unwrap();
    let mut short = cfg.clone();
    short.steps = 2;
    train(&short, &data, &dir.path().join("b"), false).unwrap();
    let resumed = train(&cfg, &data, &dir.path().join("b"), true).unwrap();
    assert_eq!(resumed.curve.len(), straight.curve.len());
    for (a, b) in straight.curve.iter().zip(&resumed.curve) {
        assert!((a.loss - b.loss).abs() < 1e-6, "step {}: {} vs {}", a.step, a.loss, b.loss);
    }
    // Validation rows are recorded at the configured cadence.
    assert!(straight.curve[1].val_err_px.is_some() && straight.curve[0].val_err_px.is_none());
}

#[test]
fn vrdl_runs_the_same_loop_with_zero_rd_weight() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AblationPreset::VRdl.apply(&tiny_config());
    let data = dir.path().join("data");
    dataset(&data, &cfg);
    let out = train(&cfg, &data, &dir.path().join("run"), false).unwrap();
    assert!(out.curve.iter().all(|r| r.rd == 0.0 && r.loss == r.tracking));
    let base = train(&tiny_config(), &data, &dir.path().join("base"), false).unwrap();
    assert!(base.curve.iter().all(|r| r.rd > 0.0));
}

#[test]
fn non_finite_loss_aborts_with_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.steps = 1;
    cfg.val_every = 0;
    let data = dir.path().join("data");
    dataset(&data, &cfg);
    let run = dir.path().join("run");
    train(&cfg, &data, &run, false).unwrap();
    // The head's output bias is the last parameter; poison it.
    let params = run.join("checkpoint/params.bin");
    let mut bytes = std::fs::read(&params).unwrap();
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&params, bytes).unwrap();
    cfg.steps = 3;
    match train(&cfg, &data, &run, true) {
        Err(Error::NonFiniteLoss { step, clip_seed, .. }) => assert_eq!((step, clip_seed), (1, cfg.seed)),
        other => panic!("expected a non-finite loss, got {:?}", other.map(|o| o.curve.len())),
    }
}

fn strip_latency(mut r: EvalReport) -> EvalReport {
    r.fps = 0.0;
    r.sequences.iter_mut().for_each(|s| s.fps = 0.0);
    r
}

#[test]
fn evaluation_reports_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let data = dir.path().join("data");
    dataset(&data, &cfg);
    let run = train(&cfg, &data, &dir.path().join("run"), false).unwrap();
    let (report, runs) = evaluate(&run.checkpoint, &data, Split::Test, &cfg.grid).unwrap();

    // Schema and invariants.
    let m = &report.aggregate;
    assert!((0.0..=100.0).contains(&m.auc) && (0.0..=100.0).contains(&m.precision));
    assert!(m.sd_px >= 0.0 && report.fps > 0.0);
    assert_eq!(m.success.len(), 51);
    assert_eq!(m.frames, 2 * 15);
    assert_eq!(report.split, "test");
    assert_eq!(report.config_hash.len(), 64);

    // FPS is frames over summed latency.
    let latency: f64 = runs.iter().flat_map(|r| &r.predictions).map(|p| p.latency).sum();
    assert!((report.fps - m.frames as f64 / latency).abs() / report.fps < 0.01);

    // JSON round trip: parse → serialise → parse is the identity.
    let out = dir.path().join("eval");
    write_eval_outputs(&out, &report, &runs).unwrap();
    let parsed = read_report(&out.join("report.json")).unwrap();
    let again: EvalReport = serde_json::from_str(&serde_json::to_string(&parsed).unwrap()).unwrap();
    assert_eq!(parsed, again);
    assert_eq!(parsed, report);

    // Re-evaluation is identical up to latency.
    let (second, _) = evaluate(&run.checkpoint, &data, Split::Test, &cfg.grid).unwrap();
    assert_eq!(strip_latency(second), strip_latency(report));

    // A split that was not generated is a contract violation.
    assert!(matches!(
        evaluate(&run.checkpoint, &data, Split::TestManual, &cfg.grid),
        Err(Error::Contract(_))
    ));
}

#[test]
fn ablation_writes_a_five_row_delta_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.steps = 1;
    cfg.val_every = 0;
    let data = dir.path().join("data");
    dataset(&data, &cfg);
    let out = dir.path().join("ablate");
    let outcome = run_ablation(AblationPreset::VM2, &cfg, &data, &out).unwrap();
    let csv = std::fs::read_to_string(out.join("delta.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "metric,baseline,preset,difference");
    let metrics: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(metrics, ["AUC", "P", "Err", "SD", "FPS"]);
    assert!(outcome.ablated.held_out_diversify.is_none());
    assert!(outcome.baseline.held_out_diversify.is_some());
}
