//! Register diversify loss (variance + cross-register decorrelation terms) and
//! the supervised heatmap/offset tracking loss.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::ops::{mean_axis, sum_axis, variance_axis};
use crate::numerics::{Real, Var};

/// How the `k` tokens of a bank entry are reduced before the diversify term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversifyPooling {
    /// Mean over the `k` tokens, giving one `d`-vector per entry.
    #[default]
    Mean,
    /// Flatten `k` into the feature axis, giving one `k·d`-vector per entry.
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RdLossConfig {
    pub tau: f64,
    pub eps: f64,
    pub alpha: f64,
    pub beta: f64,
    pub pooling: DiversifyPooling,
    /// Also apply the variance term to the trainable register itself.
    pub include_template: bool,
}

impl Default for RdLossConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            eps: 1e-4,
            alpha: 0.01,
            beta: 0.01,
            pooling: DiversifyPooling::Mean,
            include_template: false,
        }
    }
}

impl RdLossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.tau > 0.0, "tau must be positive, got {}", self.tau);
        ensure!(self.eps > 0.0, "eps must be positive, got {}", self.eps);
        ensure!(self.alpha >= 0.0, "alpha must be non-negative, got {}", self.alpha);
        ensure!(self.beta >= 0.0, "beta must be non-negative, got {}", self.beta);
        Ok(())
    }
}

/// `(1/d) Σ_i softplus(τ − sqrt(V_i + ε))`, where `V_i` is the population
/// variance of dimension `i` across the `k` tokens, averaged over the batch.
///
/// `registers` is [B, k, d]; a [k, d] input is treated as B = 1.
pub fn variance_term<'t, T: Real>(registers: Var<'t, T>, cfg: &RdLossConfig) -> Result<Var<'t, T>> {
    cfg.validate()?;
    let mut shape = registers.shape();
    if shape.len() == 2 {
        shape.insert(0, 1);
    }
    ensure!(shape.len() == 3, "registers must be [B, k, d], got {shape:?}");
    ensure!(shape[1] >= 2, "variance over k = {} token is degenerate", shape[1]);
    let per_batch = variance_axis(registers.reshape(&shape), 1);
    let v = mean_axis(per_batch, 0);
    let std = v.shift(cfg.eps).sqrt();
    Ok(std.scale(-1.0).shift(cfg.tau).softplus().mean())
}

/// Entry descriptors after k-axis pooling: [L, d] or [L, k·d].
fn pooled<'t, T: Real>(entries: Var<'t, T>, pooling: DiversifyPooling) -> Result<Var<'t, T>> {
    let shape = entries.shape();
    ensure!(shape.len() == 3, "bank entries must be [L, k, d], got {shape:?}");
    Ok(match pooling {
        DiversifyPooling::Mean => mean_axis(entries, 1),
        DiversifyPooling::Flatten => entries.reshape(&[shape[0], shape[1] * shape[2]]),
    })
}

/// `(1/(d·L·(L−1))) Σ_p Σ_{i≠j} (c_{i,p} c_{j,p})²` with `c` the pooled entries
/// centred per dimension over the bank.
///
/// Uses `Σ_{i≠j} a_i a_j = (Σ a_i)² − Σ a_i²` with `a = c²`.
pub fn diversify_term<'t, T: Real>(
    entries: Var<'t, T>,
    pooling: DiversifyPooling,
) -> Result<Var<'t, T>> {
    let p = pooled(entries, pooling)?;
    let shape = p.shape();
    let (l, d) = (shape[0], shape[1]);
    ensure!(l >= 2, "diversify term needs at least 2 bank entries, got {l}");
    let centered = p - mean_axis(p, 0);
    let sq = centered.square();
    let cross = sum_axis(sq, 0).square().sum() - sq.square().sum();
    Ok(cross.scale(1.0 / (d * l * (l - 1)) as f64))
}

/// `α · variance_term(registers) + β · diversify_term(bank_entries)`.
pub fn rd_loss<'t, T: Real>(
    registers: Var<'t, T>,
    bank_entries: Var<'t, T>,
    cfg: &RdLossConfig,
) -> Result<Var<'t, T>> {
    let var = variance_term(registers, cfg)?;
    let div = diversify_term(bank_entries, cfg.pooling)?;
    Ok(var.scale(cfg.alpha) + div.scale(cfg.beta))
}

/// Ground truth for one search crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackingTarget {
    /// Tip `(x, y)` in search-crop pixels.
    pub tip: [f64; 2],
    /// Heatmap Gaussian sigma in pixels.
    pub sigma: f64,
    /// Pixels per score-map cell.
    pub cell: f64,
}

impl TrackingTarget {
    /// Score-map cell `(row, col)` holding the tip and the sub-cell offset
    /// `(dx, dy)` from that cell's centre, in cells.
    pub fn cell_and_offset(&self, h: usize, w: usize) -> Result<((usize, usize), [f64; 2])> {
        ensure!(self.sigma > 0.0, "heatmap sigma must be positive");
        ensure!(self.cell > 0.0, "cell size must be positive");
        let (gx, gy) = (self.tip[0] / self.cell, self.tip[1] / self.cell);
        ensure!(
            gx >= 0.0 && gy >= 0.0 && gx < w as f64 && gy < h as f64,
            "target {:?} lies outside the {}x{} px crop",
            self.tip,
            w as f64 * self.cell,
            h as f64 * self.cell
        );
        let (col, row) = (gx.floor() as usize, gy.floor() as usize);
        Ok(((row, col), [gx - col as f64 - 0.5, gy - row as f64 - 0.5]))
    }

    /// Unit-amplitude Gaussian centred on the tip, sampled at cell centres.
    pub fn heatmap(&self, h: usize, w: usize) -> Vec<f64> {
        let (gx, gy) = (self.tip[0] / self.cell, self.tip[1] / self.cell);
        let s = self.sigma / self.cell;
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let (dx, dy) = (j as f64 + 0.5 - gx, i as f64 + 0.5 - gy);
                out.push((-(dx * dx + dy * dy) / (2.0 * s * s)).exp());
            }
        }
        out
    }
}

/// `λ_off = 1` weight of the offset term.
pub const OFFSET_WEIGHT: f64 = 1.0;

/// Σ (score − heatmap)² + λ_off · |offset[target cell] − true offset|₁.
pub fn tracking_loss<'t, T: Real>(
    score: Var<'t, T>,
    offset: Var<'t, T>,
    target: &TrackingTarget,
) -> Result<Var<'t, T>> {
    let ss = score.shape();
    ensure!(ss.len() == 2, "score map must be [H, W], got {ss:?}");
    let (h, w) = (ss[0], ss[1]);
    ensure!(
        offset.shape() == [h, w, 2],
        "offset map must be [{h}, {w}, 2], got {:?}",
        offset.shape()
    );
    let ((row, col), true_off) = target.cell_and_offset(h, w)?;
    let tape = score.tape();
    let heat = tape.constant(
        &[h, w],
        target.heatmap(h, w).into_iter().map(T::from_f64).collect(),
    );
    let heat_term = (score - heat).square().sum();
    let base = (row * w + col) * 2;
    let picked = offset.gather(Rc::from(vec![base, base + 1]), &[2]);
    let want = tape.constant(&[2], true_off.iter().map(|&v| T::from_f64(v)).collect());
    let off_term = (picked - want).abs().sum();
    Ok(heat_term + off_term.scale(OFFSET_WEIGHT))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn variance_term_ln2_case() {
        let tape = Tape::<f64>::new();
        let regs = tape.constant(&[1, 2, 1], vec![1.0, -1.0]);
        let cfg = RdLossConfig {
            eps: 1e-300,
            ..Default::default()
        };
        let v = variance_term(regs, &cfg).unwrap().item();
        assert!(close(v, std::f64::consts::LN_2, 1e-12));
    }

    #[test]
    fn variance_term_identical_tokens() {
        let tape = Tape::<f64>::new();
        let regs = tape.constant(&[2, 3, 4], vec![0.7; 24]);
        let v = variance_term(regs, &RdLossConfig::default()).unwrap().item();
        assert!(close(v, (1.0 + 0.99f64.exp()).ln(), 1e-12));
        // ln(1 + e^0.99) = 1.305961 (the rounded 1.3056 often quoted is off by 4e-4).
        assert!(close(v, 1.305961, 1e-6));
    }

    #[test]
    fn variance_term_large_spread_is_small() {
        let tape = Tape::<f64>::new();
        let regs = tape.constant(&[2, 3], vec![10.0, 10.0, 10.0, -10.0, -10.0, -10.0]);
        let v = variance_term(regs, &RdLossConfig::default()).unwrap().item();
        assert!(v < 1.3e-4);
    }

    #[test]
    fn variance_term_rejects_single_token() {
        let tape = Tape::<f64>::new();
        let regs = tape.constant(&[1, 1, 3], vec![1.0; 3]);
        assert!(variance_term(regs, &RdLossConfig::default()).is_err());
    }

    #[test]
    fn diversify_term_hand_cases() {
        let tape = Tape::<f64>::new();
        let two = tape.constant(&[2, 1, 1], vec![1.0, -1.0]);
        assert!(close(diversify_term(two, DiversifyPooling::Mean).unwrap().item(), 1.0, 1e-12));
        let three = tape.constant(&[3, 1, 1], vec![1.0, 0.0, -1.0]);
        let v = diversify_term(three, DiversifyPooling::Mean).unwrap().item();
        assert!(close(v, 1.0 / 3.0, 1e-12));
        let same = tape.constant(&[4, 2, 3], vec![0.3; 24]);
        assert_eq!(diversify_term(same, DiversifyPooling::Mean).unwrap().item(), 0.0);
        let one = tape.constant(&[1, 2, 3], vec![0.3; 6]);
        assert!(diversify_term(one, DiversifyPooling::Mean).is_err());
    }

    #[test]
    fn diversify_term_pools_over_tokens() {
        // Tokens {2, 0} and {-2, 0} pool to {1, -1}.
        let tape = Tape::<f64>::new();
        let e = tape.constant(&[2, 2, 1], vec![2.0, 0.0, -2.0, 0.0]);
        assert!(close(diversify_term(e, DiversifyPooling::Mean).unwrap().item(), 1.0, 1e-12));
        let flat = diversify_term(e, DiversifyPooling::Flatten).unwrap().item();
        // Flattened: dimension 0 has {2,-2} → 16·2/(2·2·1) = 8; dimension 1 is 0.
        assert!(close(flat, 8.0, 1e-12));
    }

    #[test]
    fn rd_loss_combines_terms() {
        let tape = Tape::<f64>::new();
        let regs = tape.constant(&[1, 2, 1], vec![1.0, -1.0]);
        let bank = tape.constant(&[2, 1, 1], vec![1.0, -1.0]);
        let cfg = RdLossConfig {
            eps: 1e-300,
            ..Default::default()
        };
        let v = rd_loss(regs, bank, &cfg).unwrap().item();
        assert!(close(v, 0.01 * std::f64::consts::LN_2 + 0.01, 1e-12));
        let cfg0 = RdLossConfig { beta: 0.0, ..cfg };
        let v0 = rd_loss(regs, bank, &cfg0).unwrap().item();
        assert!(close(v0, 0.01 * std::f64::consts::LN_2, 1e-12));
    }

    fn target() -> TrackingTarget {
        TrackingTarget {
            tip: [37.0, 51.5],
            sigma: 16.0,
            cell: 8.0,
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let t = target();
        let tape = Tape::<f64>::new();
        let score = tape.constant(&[12, 12], t.heatmap(12, 12));
        let ((r, c), off) = t.cell_and_offset(12, 12).unwrap();
        let mut o = vec![0.0; 12 * 12 * 2];
        o[(r * 12 + c) * 2] = off[0];
        o[(r * 12 + c) * 2 + 1] = off[1];
        let offset = tape.constant(&[12, 12, 2], o);
        assert_eq!(tracking_loss(score, offset, &t).unwrap().item(), 0.0);
    }

    #[test]
    fn zero_prediction_loss_is_heatmap_norm_plus_offset() {
        let t = target();
        let tape = Tape::<f64>::new();
        let loss = tracking_loss(tape.zeros(&[12, 12]), tape.zeros(&[12, 12, 2]), &t)
            .unwrap()
            .item();
        let norm: f64 = t.heatmap(12, 12).iter().map(|v| v * v).sum();
        let (_, off) = t.cell_and_offset(12, 12).unwrap();
        assert!(close(loss, norm + off[0].abs() + off[1].abs(), 1e-12));
    }

    #[test]
    fn target_outside_crop_is_rejected() {
        let t = TrackingTarget {
            tip: [100.0, 5.0],
            ..target()
        };
        let tape = Tape::<f64>::new();
        assert!(tracking_loss(tape.zeros(&[12, 12]), tape.zeros(&[12, 12, 2]), &t).is_err());
    }
}
