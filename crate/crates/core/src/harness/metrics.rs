use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Threshold grid for success curves: `0..=max_px` in steps of `step_px`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricGrid {
    pub max_px: f64,
    pub step_px: f64,
    /// Threshold for the precision score.
    pub precision_px: f64,
}

impl Default for MetricGrid {
    fn default() -> Self {
        Self {
            max_px: 50.0,
            step_px: 1.0,
            precision_px: 20.0,
        }
    }
}

impl MetricGrid {
    pub fn thresholds(&self) -> Vec<f64> {
        let n = (self.max_px / self.step_px).round() as usize;
        (0..=n).map(|i| i as f64 * self.step_px).collect()
    }
}

/// Center-error metrics over a set of frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub frames: usize,
    /// Mean of the success curve × 100.
    pub auc: f64,
    /// Success at the precision threshold × 100.
    pub precision: f64,
    pub err_px: f64,
    pub sd_px: f64,
    pub err_mm: f64,
    pub sd_mm: f64,
    /// Success fraction per grid threshold.
    pub success: Vec<f64>,
}

/// Euclidean center error per frame, px.
pub fn center_errors(predictions: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<Vec<f64>> {
    ensure!(
        predictions.len() == truth.len(),
        "{} predictions for {} ground-truth frames",
        predictions.len(),
        truth.len()
    );
    Ok(predictions
        .iter()
        .zip(truth)
        .map(|(p, t)| (p[0] - t[0]).hypot(p[1] - t[1]))
        .collect())
}

/// Metrics from per-frame pixel errors.
pub fn metrics_from_errors(errors: &[f64], mm_per_px: f64, grid: &MetricGrid) -> Result<Metrics> {
    ensure!(!errors.is_empty(), "metrics need at least one frame");
    ensure!(mm_per_px > 0.0, "mm_per_px must be positive");
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let success_at = |th: f64| errors.iter().filter(|&&e| e <= th).count() as f64 / n;
    let success: Vec<f64> = grid.thresholds().into_iter().map(success_at).collect();
    Ok(Metrics {
        frames: errors.len(),
        auc: 100.0 * success.iter().sum::<f64>() / success.len() as f64,
        precision: 100.0 * success_at(grid.precision_px),
        err_px: mean,
        sd_px: sd,
        err_mm: mean * mm_per_px,
        sd_mm: sd * mm_per_px,
        success,
    })
}

/// Err/SD (population), success curve, AUC and precision for one set of
/// predictions against ground truth.
pub fn metrics_compute(
    predictions: &[[f64; 2]],
    truth: &[[f64; 2]],
    mm_per_px: f64,
    grid: &MetricGrid,
) -> Result<Metrics> {
    metrics_from_errors(&center_errors(predictions, truth)?, mm_per_px, grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let t = vec![[3.0, 4.0]; 5];
        let m = metrics_compute(&t, &t, 0.15, &MetricGrid::default()).unwrap();
        assert_eq!((m.err_px, m.sd_px, m.auc, m.precision), (0.0, 0.0, 100.0, 100.0));
    }

    #[test]
    fn constant_ten_pixel_error() {
        let t = vec![[50.0, 50.0]; 7];
        let p = vec![[56.0, 58.0]; 7];
        let m = metrics_compute(&p, &t, 0.15, &MetricGrid::default()).unwrap();
        assert!((m.auc - 41.0 / 51.0 * 100.0).abs() < 1e-12);
        assert_eq!(m.precision, 100.0);
    }

    #[test]
    fn two_frame_mm_statistics() {
        let t = vec![[0.0, 0.0]; 2];
        let p = vec![[0.0, 0.0], [30.0, 0.0]];
        let m = metrics_compute(&p, &t, 0.15, &MetricGrid::default()).unwrap();
        assert!((m.err_mm - 2.25).abs() < 1e-12);
        assert!((m.sd_mm - 2.25).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(metrics_compute(&[[0.0; 2]], &[], 0.15, &MetricGrid::default()).is_err());
    }
}
