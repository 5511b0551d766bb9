use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rdloss::RdLossConfig;
use crate::ssm::BlockConfig;

/// Shape and wiring of the tracker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Search crop side in crop pixels.
    pub search_size: usize,
    /// Template crop side in crop pixels.
    pub template_size: usize,
    pub patch: usize,
    /// Base channel width `C`; registers and Mamba tokens are `2C` wide.
    pub channels: usize,
    /// Register tokens per frame.
    pub k: usize,
    /// Bank capacity `L`; `None` keeps every register (unbounded).
    pub bank_len: Option<usize>,
    /// Self-attention blocks in the patch-embedding backbone.
    pub backbone_depth: usize,
    /// Mamba blocks in each of the extractor and retriever.
    pub mamba_depth: usize,
    pub block: BlockConfig,
    /// `false` runs the Mamba stacks on image tokens alone (no registers).
    pub registers: bool,
    /// Layer-normalise `x̂` before the prediction head.
    pub final_norm: bool,
    /// Width of the query/key projection in the cross-attention head.
    pub attn_dim: usize,
    /// Hidden width of the convolutional head.
    pub head_channels: usize,
    /// Template crop side in frame pixels.
    pub template_extent: f64,
    /// Search crop side as a multiple of the template extent.
    pub search_factor: f64,
    /// Heatmap Gaussian sigma in score-map cells.
    pub heatmap_sigma: f64,
    pub rd: RdLossConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            search_size: 96,
            template_size: 48,
            patch: 8,
            channels: 64,
            k: 8,
            bank_len: Some(300),
            backbone_depth: 1,
            mamba_depth: 2,
            block: BlockConfig::default(),
            registers: true,
            final_norm: true,
            attn_dim: 32,
            head_channels: 32,
            template_extent: 48.0,
            search_factor: 2.0,
            heatmap_sigma: 2.0,
            rd: RdLossConfig::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.patch > 0, "patch size must be positive");
        for (name, size) in [("search", self.search_size), ("template", self.template_size)] {
            ensure!(
                size > 0 && size % self.patch == 0,
                "{name} size {size} is not divisible by patch size {}",
                self.patch
            );
        }
        ensure!(self.channels > 0 && self.k > 0, "channels and k must be positive");
        ensure!(
            self.k <= self.template_tokens(),
            "k = {} exceeds the {} template tokens",
            self.k,
            self.template_tokens()
        );
        ensure!(
            self.k <= self.search_tokens(),
            "k = {} exceeds the {} search tokens",
            self.k,
            self.search_tokens()
        );
        ensure!(self.bank_len != Some(0), "bank length must be positive");
        ensure!(
            self.template_extent > 0.0 && self.search_factor > 0.0 && self.heatmap_sigma > 0.0,
            "crop extents and heatmap sigma must be positive"
        );
        ensure!(self.attn_dim > 0 && self.head_channels > 0, "head widths must be positive");
        self.rd.validate()
    }

    pub fn search_grid(&self) -> usize {
        self.search_size / self.patch
    }

    pub fn template_grid(&self) -> usize {
        self.template_size / self.patch
    }

    pub fn search_tokens(&self) -> usize {
        self.search_grid() * self.search_grid()
    }

    pub fn template_tokens(&self) -> usize {
        self.template_grid() * self.template_grid()
    }

    /// Token width `2C` after channel doubling.
    pub fn width(&self) -> usize {
        2 * self.channels
    }

    pub fn search_extent(&self) -> f64 {
        self.template_extent * self.search_factor
    }

    /// Search-crop pixels per score-map cell.
    pub fn cell(&self) -> f64 {
        self.patch as f64
    }
}
