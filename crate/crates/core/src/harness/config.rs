use serde::{Deserialize, Serialize};

use super::metrics::MetricGrid;
use crate::error::{ensure, Result};
use crate::numerics::AdamWConfig;
use crate::synthdata::DatasetConfig;
use crate::tracker::TrackerConfig;

/// Search-crop augmentation during training: scaling, blur and position shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Per-clip crop-centre offset, uniform in ±`shift_px` per axis.
    pub shift_px: f64,
    /// Additional per-frame centre jitter, uniform in ±`jitter_px` per axis.
    pub jitter_px: f64,
    /// Relative crop-extent jitter, uniform in ±`scale`.
    pub scale: f64,
    /// Probability of a radius-1 box blur on a search crop.
    pub blur_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            shift_px: 12.0,
            jitter_px: 3.0,
            scale: 0.1,
            blur_prob: 0.3,
        }
    }
}

/// Everything a training run needs besides the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub tracker: TrackerConfig,
    pub optim: AdamWConfig,
    /// Optimizer steps.
    pub steps: usize,
    /// Clips per optimizer step.
    pub batch: usize,
    /// Frames per training clip, including the initialisation frame.
    pub clip_len: usize,
    pub augment: AugmentConfig,
    /// Validate every this many steps; 0 disables validation.
    pub val_every: usize,
    /// Frames tracked per validation sequence.
    pub val_frames: usize,
    pub grid: MetricGrid,
    /// Used by `gen`.
    pub dataset: DatasetConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tracker: TrackerConfig::default(),
            optim: AdamWConfig {
                lr: 1e-3,
                decay_after: 200,
                ..Default::default()
            },
            steps: 250,
            batch: 8,
            clip_len: 8,
            augment: AugmentConfig::default(),
            val_every: 50,
            val_frames: 60,
            grid: MetricGrid::default(),
            dataset: DatasetConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        ensure!(self.clip_len >= 2, "clip length must be at least 2, got {}", self.clip_len);
        ensure!(self.batch >= 1, "batch must be at least 1");
        ensure!(self.optim.lr > 0.0, "learning rate must be positive");
        ensure!(
            self.augment.shift_px >= 0.0
                && self.augment.jitter_px >= 0.0
                && (0.0..1.0).contains(&self.augment.scale)
                && (0.0..=1.0).contains(&self.augment.blur_prob),
            "augmentation parameters out of range"
        );
        Ok(())
    }
}
