use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Motion phase of a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Insertion,
    Aspiration,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Insertion => "insertion",
            Phase::Aspiration => "aspiration",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "insertion" => Some(Phase::Insertion),
            "aspiration" => Some(Phase::Aspiration),
            _ => None,
        }
    }
}

/// Reciprocation driver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Constant-speed triangle wave at `aspiration_velocity`.
    Robotic,
    /// Triangle wave at `rate_hz`, with seeded per-cycle jitter on stroke and rate.
    Manual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    pub regime: Regime,
    /// mm/s.
    pub insertion_velocity: f64,
    /// mm/s (robotic regime).
    pub aspiration_velocity: f64,
    /// Reciprocation stroke in mm.
    pub stroke: f64,
    pub cycles: usize,
    /// Reciprocations per second (manual regime).
    pub rate_hz: f64,
    /// Relative per-cycle jitter on stroke and rate (manual regime).
    pub jitter: f64,
    /// Insertion angle in degrees below the horizontal.
    pub angle_deg: f64,
    pub fps: f64,
    pub mm_per_px: f64,
    /// Tip depth along the needle at the first frame, mm.
    pub start_depth: f64,
    /// Additional depth covered by the insertion phase, mm.
    pub insertion_depth: f64,
    /// Where the needle enters the field of view, frame pixels.
    pub entry_px: [f64; 2],
    /// In-plane probe motion: slow global scene drift.
    pub probe_drift: bool,
    /// Peak drift speed in px/frame when `probe_drift` is on.
    pub drift_speed: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Robotic,
            insertion_velocity: 20.0,
            aspiration_velocity: 30.0,
            stroke: 15.0,
            cycles: 5,
            rate_hz: 2.5,
            jitter: 0.2,
            angle_deg: 45.0,
            fps: 30.0,
            mm_per_px: 0.15,
            start_depth: 5.0,
            insertion_depth: 20.0,
            entry_px: [40.0, 40.0],
            probe_drift: false,
            drift_speed: 0.3,
        }
    }
}

pub const ANGLES_DEG: [f64; 3] = [30.0, 45.0, 60.0];

impl MotionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("insertion_velocity", self.insertion_velocity),
            ("aspiration_velocity", self.aspiration_velocity),
            ("stroke", self.stroke),
            ("rate_hz", self.rate_hz),
            ("fps", self.fps),
            ("mm_per_px", self.mm_per_px),
            ("insertion_depth", self.insertion_depth),
        ] {
            ensure!(v > 0.0 && v.is_finite(), "{name} must be positive, got {v}");
        }
        ensure!(self.cycles > 0, "cycles must be positive");
        ensure!(self.start_depth >= 0.0, "start_depth must be non-negative");
        ensure!((0.0..1.0).contains(&self.jitter), "jitter must lie in [0, 1)");
        ensure!(
            ANGLES_DEG.contains(&self.angle_deg),
            "insertion angle {} is not one of {ANGLES_DEG:?}",
            self.angle_deg
        );
        Ok(())
    }

    /// Unit vector along the needle, pointing into the tissue.
    pub fn direction(&self) -> [f64; 2] {
        let a = self.angle_deg.to_radians();
        [a.cos(), a.sin()]
    }
}

/// Linear piece of the depth profile: `from → to` mm over `duration` s.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Piece {
    duration: f64,
    from: f64,
    to: f64,
    phase: Phase,
}

/// Tip depth along the needle per frame, with phase labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionProfile {
    pub depth_mm: Vec<f64>,
    pub phases: Vec<Phase>,
}

impl MotionProfile {
    /// Number of velocity sign changes.
    pub fn reversals(&self) -> usize {
        let mut last = 0.0f64;
        let mut count = 0;
        for w in self.depth_mm.windows(2) {
            let d = w[1] - w[0];
            if d != 0.0 {
                if last != 0.0 && d.signum() != last.signum() {
                    count += 1;
                }
                last = d;
            }
        }
        count
    }
}

fn pieces<R: Rng + ?Sized>(cfg: &MotionConfig, rng: &mut R) -> Vec<Piece> {
    let top = cfg.start_depth + cfg.insertion_depth;
    let mut out = vec![Piece {
        duration: cfg.insertion_depth / cfg.insertion_velocity,
        from: cfg.start_depth,
        to: top,
        phase: Phase::Insertion,
    }];
    for _ in 0..cfg.cycles {
        let (stroke, half) = match cfg.regime {
            Regime::Robotic => (cfg.stroke, cfg.stroke / cfg.aspiration_velocity),
            Regime::Manual => {
                let mut j = || 1.0 + cfg.jitter * (2.0 * rng.random::<f64>() - 1.0);
                let stroke = (cfg.stroke * j()).min(top);
                (stroke, 0.5 / (cfg.rate_hz * j()))
            }
        };
        // Pull back by one stroke, then advance back to the insertion depth.
        for (from, to) in [(top, top - stroke), (top - stroke, top)] {
            out.push(Piece {
                duration: half,
                from,
                to,
                phase: Phase::Aspiration,
            });
        }
    }
    out
}

/// Frames needed to play the whole profile once (including the final rest frame).
pub fn profile_len<R: Rng + ?Sized>(cfg: &MotionConfig, rng: &mut R) -> usize {
    let total: f64 = pieces(cfg, rng).iter().map(|p| p.duration).sum();
    (total * cfg.fps).round() as usize + 1
}

/// Depth and phase at each frame time `i / fps`. Frames past the end of the
/// profile hold the final depth.
pub fn motion_profile<R: Rng + ?Sized>(
    cfg: &MotionConfig,
    n_frames: usize,
    rng: &mut R,
) -> Result<MotionProfile> {
    cfg.validate()?;
    ensure!(n_frames >= 1, "at least one frame is required");
    let pieces = pieces(cfg, rng);
    let mut depth_mm = Vec::with_capacity(n_frames);
    let mut phases = Vec::with_capacity(n_frames);
    let mut k = 0;
    let mut piece_start = 0.0;
    for i in 0..n_frames {
        let t = i as f64 / cfg.fps;
        while k + 1 < pieces.len() && t >= piece_start + pieces[k].duration {
            piece_start += pieces[k].duration;
            k += 1;
        }
        let p = pieces[k];
        let s = ((t - piece_start) / p.duration).min(1.0);
        depth_mm.push(p.from + (p.to - p.from) * s);
        phases.push(p.phase);
    }
    Ok(MotionProfile { depth_mm, phases })
}
