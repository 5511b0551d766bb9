use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::{box_blur, Frame};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Background intensity in [0, 1].
    pub background: f64,
    /// Log-normal sigma of the multiplicative speckle; 0 disables speckle.
    pub speckle: f64,
    /// Box-blur radius applied to the speckle field.
    pub speckle_smoothing: usize,
    /// Share of the speckle log-field that stays fixed over a sequence.
    pub speckle_persistence: f64,
    pub shaft_brightness: f64,
    /// Gaussian half-width of the shaft cross-section, px.
    pub shaft_sigma: f64,
    pub tip_brightness: f64,
    pub tip_sigma: f64,
    /// Motion-blur length in px per px/frame of tip speed; 0 disables blur.
    pub blur: f64,
    /// Probability that an aspiration frame has a dimmed tip.
    pub dropout_prob: f64,
    /// Range of the brightness factor applied to a dimmed tip.
    pub dropout_range: [f64; 2],
    /// Static tip-like bright reflectors per sequence.
    pub distractors: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            background: 0.12,
            speckle: 0.45,
            speckle_smoothing: 1,
            speckle_persistence: 0.7,
            shaft_brightness: 0.3,
            shaft_sigma: 1.2,
            tip_brightness: 0.5,
            tip_sigma: 2.5,
            blur: 0.6,
            dropout_prob: 0.5,
            dropout_range: [0.2, 0.6],
            distractors: 3,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.width > 0 && self.height > 0, "frame size must be positive");
        ensure!(
            (0.0..=1.0).contains(&self.dropout_prob),
            "dropout probability must lie in [0, 1]"
        );
        ensure!(
            (0.0..=1.0).contains(&self.speckle_persistence),
            "speckle persistence must lie in [0, 1]"
        );
        ensure!(
            0.0 <= self.dropout_range[0] && self.dropout_range[0] <= self.dropout_range[1],
            "dropout range must be ordered and non-negative"
        );
        ensure!(
            self.tip_sigma > 0.0 && self.shaft_sigma > 0.0,
            "tip and shaft widths must be positive"
        );
        ensure!(self.speckle >= 0.0 && self.blur >= 0.0, "speckle and blur must be non-negative");
        Ok(())
    }
}

/// Per-sequence static content: needle entry point, reflectors and the
/// persistent part of the speckle field.
#[derive(Clone, Debug)]
pub struct Scene {
    pub entry: [f64; 2],
    pub distractors: Vec<[f64; 2]>,
    static_field: Vec<f64>,
}

/// Zero-mean, unit-variance smoothed Gaussian field.
fn normal_field<R: Rng + ?Sized>(w: usize, h: usize, smoothing: usize, rng: &mut R) -> Vec<f64> {
    let mut f: Vec<f64> = (0..w * h).map(|_| StandardNormal.sample(rng)).collect();
    box_blur(&mut f, w, h, smoothing);
    // Box blur shrinks the variance by (2r+1)² for white noise.
    let gain = (2 * smoothing + 1) as f64;
    f.iter_mut().for_each(|v| *v *= gain);
    f
}

impl Scene {
    pub fn new<R: Rng + ?Sized>(rcfg: &RenderConfig, entry: [f64; 2], rng: &mut R) -> Self {
        let (w, h) = (rcfg.width as f64, rcfg.height as f64);
        let distractors = (0..rcfg.distractors)
            .map(|_| [rng.random_range(0.1 * w..0.9 * w), rng.random_range(0.1 * h..0.9 * h)])
            .collect();
        let static_field = if rcfg.speckle > 0.0 {
            normal_field(rcfg.width, rcfg.height, rcfg.speckle_smoothing, rng)
        } else {
            Vec::new()
        };
        Self {
            entry,
            distractors,
            static_field,
        }
    }
}

fn segment_distance2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let len2 = abx * abx + aby * aby;
    let s = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * abx + (p[1] - a[1]) * aby) / len2).clamp(0.0, 1.0)
    };
    let (dx, dy) = (p[0] - a[0] - s * abx, p[1] - a[1] - s * aby);
    dx * dx + dy * dy
}

/// Renders one frame. `velocity` is the tip motion in px/frame; `offset` is a
/// global scene shift (probe drift) applied to the static content.
pub fn render_frame<R: Rng + ?Sized>(
    scene: &Scene,
    tip: [f64; 2],
    velocity: [f64; 2],
    aspiration: bool,
    offset: [f64; 2],
    rcfg: &RenderConfig,
    rng: &mut R,
) -> Frame {
    let (w, h) = (rcfg.width, rcfg.height);
    let entry = [scene.entry[0] + offset[0], scene.entry[1] + offset[1]];
    let speed = velocity[0].hypot(velocity[1]);
    let blur_len = rcfg.blur * speed;
    // Sub-positions spread over the blur streak, centred on the true tip.
    let taps = if blur_len > 0.5 { (blur_len.ceil() as usize).clamp(2, 16) } else { 1 };
    let dir = if speed > 0.0 {
        [velocity[0] / speed, velocity[1] / speed]
    } else {
        [0.0, 0.0]
    };
    let tips: Vec<[f64; 2]> = (0..taps)
        .map(|i| {
            let s = if taps == 1 { 0.0 } else { i as f64 / (taps - 1) as f64 - 0.5 };
            [tip[0] + s * blur_len * dir[0], tip[1] + s * blur_len * dir[1]]
        })
        .collect();
    let tip_gain = if aspiration && rng.random::<f64>() < rcfg.dropout_prob {
        rng.random_range(rcfg.dropout_range[0]..=rcfg.dropout_range[1])
    } else {
        1.0
    };
    let tip_amp = rcfg.tip_brightness * tip_gain / taps as f64;
    let (ts2, ss2) = (2.0 * rcfg.tip_sigma.powi(2), 2.0 * rcfg.shaft_sigma.powi(2));
    let fresh = if rcfg.speckle > 0.0 && rcfg.speckle_persistence < 1.0 {
        normal_field(w, h, rcfg.speckle_smoothing, rng)
    } else {
        Vec::new()
    };
    let (pa, pf) = (
        rcfg.speckle_persistence.sqrt(),
        (1.0 - rcfg.speckle_persistence).sqrt(),
    );
    let sigma = rcfg.speckle;
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let p = [x as f64, y as f64];
            let mut v = rcfg.background;
            v += rcfg.shaft_brightness * (-segment_distance2(p, entry, tip) / ss2).exp();
            for t in &tips {
                let d2 = (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2);
                v += tip_amp * (-d2 / ts2).exp();
            }
            for d in &scene.distractors {
                let d2 = (p[0] - d[0] - offset[0]).powi(2) + (p[1] - d[1] - offset[1]).powi(2);
                v += rcfg.tip_brightness * 0.8 * (-d2 / ts2).exp();
            }
            if sigma > 0.0 {
                // Static part follows the drifting scene (nearest pixel).
                let sx = (x as f64 - offset[0]).round().clamp(0.0, (w - 1) as f64) as usize;
                let sy = (y as f64 - offset[1]).round().clamp(0.0, (h - 1) as f64) as usize;
                let mut n = pa * scene.static_field[sy * w + sx];
                if !fresh.is_empty() {
                    n += pf * fresh[y * w + x];
                }
                // Log-normal with unit mean.
                v *= (sigma * n - 0.5 * sigma * sigma).exp();
            }
            pixels.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Frame {
        width: w,
        height: h,
        pixels,
    }
}
