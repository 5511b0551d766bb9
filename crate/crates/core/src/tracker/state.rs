//! Online tracking: initialisation from the first annotation and per-frame steps.

use std::time::Instant;

use super::model::{cross_attention_head, CropKind, Model};
use crate::error::{ensure, Result};
use crate::image::{crop_bilinear, standardize, CropWindow, Frame};
use crate::numerics::{sigmoid, DiffArray, Real, Tape, Var};
use crate::registers::RegisterBank;

/// One per-frame tracker output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    /// Tip `(x, y)` in full-frame pixels.
    pub tip: [f64; 2],
    /// Logistic squashing of the peak score logit.
    pub confidence: f64,
    /// Wall-clock model time for this step, in seconds.
    pub latency: f64,
}

/// Per-sequence mutable state.
#[derive(Clone, Debug)]
pub struct TrackerState<T> {
    /// Channel-doubled template tokens `z`, frozen after init.
    pub template: DiffArray<T>,
    /// Register bank; `None` for a register-free model.
    pub bank: Option<RegisterBank<DiffArray<T>>>,
    pub last_tip: [f64; 2],
    pub t: usize,
}

impl<T: Real> TrackerState<T> {
    /// Heap bytes held by the state (template and bank).
    pub fn heap_bytes(&self) -> usize {
        self.template.len() * std::mem::size_of::<T>()
            + self.bank.as_ref().map_or(0, RegisterBank::heap_bytes)
    }
}

/// Crop window of a given extent centred on the pixel nearest `center`.
pub fn window(center: [f64; 2], extent: f64, size: usize) -> CropWindow {
    CropWindow {
        center: [center[0].round(), center[1].round()],
        extent,
        size,
    }
}

/// Resampled, standardised crop pixels.
pub fn crop_pixels(frame: &Frame, w: &CropWindow) -> Vec<f64> {
    let mut px = crop_bilinear(frame, w);
    standardize(&mut px);
    px
}

/// Decodes a score/offset pair into a crop-pixel tip and its peak logit.
/// Ties in the argmax go to the lowest row-major index.
pub fn decode<T: Real>(score: &[T], offset: &[T], grid: usize, cell: f64) -> ([f64; 2], f64) {
    let mut best = 0;
    for (i, v) in score.iter().enumerate() {
        if *v > score[best] {
            best = i;
        }
    }
    let (row, col) = (best / grid, best % grid);
    let (dx, dy) = (offset[2 * best].as_f64(), offset[2 * best + 1].as_f64());
    (
        [(col as f64 + 0.5 + dx) * cell, (row as f64 + 0.5 + dy) * cell],
        score[best].as_f64(),
    )
}

/// Builds the template from a crop centred on `tip` and seeds the bank with
/// one extraction on the initial search crop.
pub fn tracker_init<T: Real>(model: &Model<T>, frame: &Frame, tip: [f64; 2]) -> Result<TrackerState<T>> {
    ensure!(frame.contains(tip), "initial tip {tip:?} lies outside the frame");
    let cfg = &model.cfg;
    let tape = Tape::new();
    let p = model.store.bind_frozen(&tape);
    let zw = window(tip, cfg.template_extent, cfg.template_size);
    let z = model.tokens(&p, &tape, &crop_pixels(frame, &zw), CropKind::Template)?;
    let bank = match &model.register {
        Some(reg) => {
            let xw = window(tip, cfg.search_extent(), cfg.search_size);
            let x = model.tokens(&p, &tape, &crop_pixels(frame, &xw), CropKind::Search)?;
            let (_, r) = model.extract(&p, x)?;
            let mut bank = RegisterBank::new(cfg.bank_len, &[reg.k, reg.width])?;
            bank.push(r.expect("register model yields a register").to_array())?;
            Some(bank)
        }
        None => None,
    };
    Ok(TrackerState {
        template: z.to_array(),
        bank,
        last_tip: tip,
        t: 0,
    })
}

/// Crops around the last tip, extracts, pushes the new register, retrieves the
/// dynamic template and decodes the head output into a full-frame tip.
pub fn track_step<T: Real>(
    model: &Model<T>,
    state: &mut TrackerState<T>,
    frame: &Frame,
) -> Result<Prediction> {
    let start = Instant::now();
    let cfg = &model.cfg;
    let tape = Tape::new();
    let p = model.store.bind_frozen(&tape);
    let xw = window(state.last_tip, cfg.search_extent(), cfg.search_size);
    let x = model.tokens(&p, &tape, &crop_pixels(frame, &xw), CropKind::Search)?;
    let (x_hat, r) = model.extract(&p, x)?;
    let z = tape.constant_array(&state.template);
    let entries: Vec<Var<'_, T>> = match (&mut state.bank, r) {
        (Some(bank), Some(r)) => {
            bank.push(r.to_array())?;
            bank.iter()
                .take(cfg.template_tokens())
                .map(|e| tape.constant_array(e))
                .collect()
        }
        _ => Vec::new(),
    };
    let z_hat = model.retrieve(&p, z, &entries)?;
    let (score, offset) = cross_attention_head(z_hat, x_hat, &model.head, &p)?;
    let (tip_crop, logit) = decode(&score.value(), &offset.value(), cfg.search_grid(), cfg.cell());
    let tip = frame.clamp_point(xw.to_frame(tip_crop));
    let latency = start.elapsed().as_secs_f64();
    state.last_tip = tip;
    state.t += 1;
    Ok(Prediction {
        tip,
        confidence: sigmoid(logit),
        latency,
    })
}
