//! Online tracker properties: causality, determinism and bounded memory.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regtrack::harness::track_sequence;
use regtrack::synthdata::{generate_sequence, MotionConfig, RenderConfig, SequenceSample};
use regtrack::tracker::{track_step, tracker_init, Model, TrackerConfig};

fn tiny(bank_len: Option<usize>) -> Model<f32> {
    let cfg = TrackerConfig {
        search_size: 48,
        template_size: 24,
        channels: 8,
        k: 2,
        bank_len,
        mamba_depth: 1,
        attn_dim: 8,
        head_channels: 8,
        template_extent: 24.0,
        ..Default::default()
    };
    Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

fn sequence(n: usize) -> SequenceSample {
    let motion = MotionConfig {
        start_depth: 2.0,
        insertion_depth: 6.0,
        stroke: 4.0,
        entry_px: [30.0, 30.0],
        ..Default::default()
    };
    let render = RenderConfig {
        width: 128,
        height: 128,
        ..Default::default()
    };
    generate_sequence(&motion, &render, Some(n), 8).unwrap()
}

#[test]
fn streaming_equals_batch_replay_and_prefixes_agree() {
    let model = tiny(Some(4));
    let s = sequence(12);
    let batch = track_sequence(&model, &s.frames, s.tips[0]).unwrap();
    let mut state = tracker_init(&model, &s.frames[0], s.tips[0]).unwrap();
    for (i, frame) in s.frames.iter().enumerate().skip(1) {
        // Only frames up to `i` exist when frame `i` is tracked.
        let visible = s.frames[..=i].to_vec();
        let p = track_step(&model, &mut state, visible.last().unwrap()).unwrap();
        assert_eq!(p.tip, batch[i - 1].tip);
        assert_eq!(p.confidence, batch[i - 1].confidence);
        assert_eq!(frame, &s.frames[i]);
    }
    let prefix = track_sequence(&model, &s.frames[..6], s.tips[0]).unwrap();
    for (a, b) in prefix.iter().zip(&batch) {
        assert_eq!((a.tip, a.confidence), (b.tip, b.confidence));
    }
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let model = tiny(Some(4));
    let s = sequence(8);
    let a = track_sequence(&model, &s.frames, s.tips[0]).unwrap();
    let b = track_sequence(&model, &s.frames, s.tips[0]).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.tip[0].to_bits(), q.tip[0].to_bits());
        assert_eq!(p.tip[1].to_bits(), q.tip[1].to_bits());
        assert_eq!(p.confidence.to_bits(), q.confidence.to_bits());
    }
}

#[test]
fn state_memory_is_flat_after_the_bank_saturates() {
    let l = 5;
    let model = tiny(Some(l));
    let s = sequence(3 * l + 1);
    let mut state = tracker_init(&model, &s.frames[0], s.tips[0]).unwrap();
    let mut sizes = Vec::new();
    for frame in &s.frames[1..] {
        track_step(&model, &mut state, frame).unwrap();
        sizes.push(state.heap_bytes());
    }
    assert_eq!(state.bank.as_ref().unwrap().count(), l);
    let saturated = sizes[l - 1];
    for (i, &b) in sizes.iter().enumerate().skip(l - 1) {
        let growth = (b as f64 - saturated as f64).abs() / saturated as f64;
        assert!(growth <= 0.01, "frame {}: {b} bytes vs {saturated}", i + 1);
    }
}

#[test]
fn unbounded_bank_keeps_growing() {
    let model = tiny(None);
    let s = sequence(10);
    let mut state = tracker_init(&model, &s.frames[0], s.tips[0]).unwrap();
    for frame in &s.frames[1..] {
        track_step(&model, &mut state, frame).unwrap();
    }
    assert_eq!(state.bank.as_ref().unwrap().count(), 10);
}
