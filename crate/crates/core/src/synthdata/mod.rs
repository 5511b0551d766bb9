//! Synthetic ultrasound-like needle sequences with exact ground truth:
//! constant-velocity insertion followed by reciprocating aspiration, speckle,
//! motion blur and tip dropout.

mod dataset;
mod motion;
mod render;

pub use dataset::{
    generate_dataset, load_sequence, read_dataset_index, sequence_seeds, DatasetConfig,
    DatasetIndex, Split, DATASET_INDEX_FILE,
};
pub use motion::{motion_profile, profile_len, MotionConfig, MotionProfile, Phase, Regime, ANGLES_DEG};
pub use render::{render_frame, RenderConfig, Scene};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Frame;

/// One generated sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<Frame>,
    /// Tip `(x, y)` per frame in full-frame pixels.
    pub tips: Vec<[f64; 2]>,
    pub phases: Vec<Phase>,
    pub mm_per_px: f64,
    pub seed: u64,
    pub meta: SequenceMeta,
}

/// Everything needed to regenerate a sequence, written as `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub motion: MotionConfig,
    pub render: RenderConfig,
    pub seed: u64,
    pub mm_per_px: f64,
    pub n_frames: usize,
    /// Tip depth along the needle per frame, mm.
    pub depth_mm: Vec<f64>,
    /// Set when the requested path left the frame and was clamped.
    pub clamped: bool,
}

/// Slow Lissajous-style scene drift for in-plane probe motion, px.
fn drift(mcfg: &MotionConfig, phase: [f64; 2], i: usize) -> [f64; 2] {
    if !mcfg.probe_drift {
        return [0.0, 0.0];
    }
    // Amplitude chosen so the peak speed equals `drift_speed`.
    let omega = 2.0 * std::f64::consts::PI / (4.0 * mcfg.fps);
    let amp = mcfg.drift_speed / omega;
    let t = i as f64 * omega;
    [amp * (t + phase[0]).sin(), amp * (t + phase[1]).sin()]
}

/// Composes motion profile and renderer. Motion randomness (manual jitter,
/// drift phase) and image randomness come from independent streams of `seed`.
pub fn generate_sequence(
    mcfg: &MotionConfig,
    rcfg: &RenderConfig,
    n_frames: Option<usize>,
    seed: u64,
) -> Result<SequenceSample> {
    rcfg.validate()?;
    let mut motion_rng = ChaCha8Rng::seed_from_u64(seed);
    motion_rng.set_stream(1);
    let mut image_rng = ChaCha8Rng::seed_from_u64(seed);
    image_rng.set_stream(2);
    let n = match n_frames {
        Some(n) => n,
        None => profile_len(mcfg, &mut motion_rng.clone()),
    };
    let profile = motion_profile(mcfg, n, &mut motion_rng)?;
    let drift_phase = [
        motion_rng.random::<f64>() * std::f64::consts::TAU,
        motion_rng.random::<f64>() * std::f64::consts::TAU,
    ];
    let dir = mcfg.direction();
    let (w, h) = (rcfg.width as f64, rcfg.height as f64);
    let mut clamped = false;
    let tips: Vec<[f64; 2]> = profile
        .depth_mm
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let off = drift(mcfg, drift_phase, i);
            let px = d / mcfg.mm_per_px;
            let raw = [
                mcfg.entry_px[0] + px * dir[0] + off[0],
                mcfg.entry_px[1] + px * dir[1] + off[1],
            ];
            let c = [raw[0].clamp(0.0, w - 1.0), raw[1].clamp(0.0, h - 1.0)];
            clamped |= c != raw;
            c
        })
        .collect();
    if clamped {
        log::warn!("sequence {seed}: tip path left the frame and was clamped");
    }
    let scene = Scene::new(rcfg, mcfg.entry_px, &mut image_rng);
    let frames = (0..n)
        .map(|i| {
            let prev = tips[i.saturating_sub(1)];
            let vel = [tips[i][0] - prev[0], tips[i][1] - prev[1]];
            let aspiration = profile.phases[i] == Phase::Aspiration;
            let off = drift(mcfg, drift_phase, i);
            render_frame(&scene, tips[i], vel, aspiration, off, rcfg, &mut image_rng)
        })
        .collect();
    Ok(SequenceSample {
        frames,
        tips,
        phases: profile.phases,
        mm_per_px: mcfg.mm_per_px,
        seed,
        meta: SequenceMeta {
            motion: mcfg.clone(),
            render: rcfg.clone(),
            seed,
            mm_per_px: mcfg.mm_per_px,
            n_frames: n,
            depth_mm: profile.depth_mm,
            clamped,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_render() -> RenderConfig {
        RenderConfig {
            width: 192,
            height: 192,
            ..Default::default()
        }
    }

    #[test]
    fn robotic_sequence_has_five_cycles() {
        let s = generate_sequence(&MotionConfig::default(), &quick_render(), None, 3).unwrap();
        assert_eq!(s.frames.len(), 181);
        let profile = MotionProfile {
            depth_mm: s.meta.depth_mm.clone(),
            phases: s.phases.clone(),
        };
        assert_eq!(profile.reversals(), 10);
        assert!(!s.meta.clamped);
    }

    #[test]
    fn ground_truth_mm_matches_pixels() {
        let s = generate_sequence(&MotionConfig::default(), &quick_render(), Some(40), 3).unwrap();
        for i in 1..s.tips.len() {
            let px = (s.tips[i][0] - s.tips[i - 1][0]).hypot(s.tips[i][1] - s.tips[i - 1][1]);
            let mm = (s.meta.depth_mm[i] - s.meta.depth_mm[i - 1]).abs();
            assert!((px * s.mm_per_px - mm).abs() < 1e-9);
        }
    }

    #[test]
    fn seeds_change_speckle_not_motion() {
        let a = generate_sequence(&MotionConfig::default(), &quick_render(), Some(5), 1).unwrap();
        let b = generate_sequence(&MotionConfig::default(), &quick_render(), Some(5), 2).unwrap();
        assert_eq!(a.tips, b.tips);
        assert_ne!(a.frames, b.frames);
        let a2 = generate_sequence(&MotionConfig::default(), &quick_render(), Some(5), 1).unwrap();
        assert_eq!(a, a2);
    }

    #[test]
    fn aspiration_is_faster_than_insertion() {
        let s = generate_sequence(&MotionConfig::default(), &quick_render(), Some(120), 1).unwrap();
        let speed = |i: usize| (s.meta.depth_mm[i] - s.meta.depth_mm[i - 1]).abs();
        let ins = (1..s.tips.len()).filter(|&i| s.phases[i] == Phase::Insertion && s.phases[i - 1] == Phase::Insertion);
        let asp = (1..s.tips.len()).filter(|&i| s.phases[i] == Phase::Aspiration && s.phases[i - 1] == Phase::Aspiration);
        let max_ins = ins.map(speed).fold(0.0, f64::max);
        let min_asp = asp.map(speed).fold(f64::INFINITY, f64::min);
        assert!(min_asp >= max_ins - 1e-12, "{min_asp} < {max_ins}");
    }

    #[test]
    fn path_leaving_frame_is_flagged() {
        let mcfg = MotionConfig {
            entry_px: [150.0, 150.0],
            ..Default::default()
        };
        let s = generate_sequence(&mcfg, &quick_render(), Some(40), 1).unwrap();
        assert!(s.meta.clamped);
        assert!(s.tips.iter().all(|t| t[0] < 192.0 && t[1] < 192.0));
    }
}
