//! Clip-sampled training with online per-clip register banks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::track_sequence;
use crate::error::{Error, Result};
use crate::image::{box_blur, crop_bilinear, standardize, CropWindow};
use crate::numerics::{AdamW, BoundParams, Real, Tape, Var};
use crate::rdloss::{rd_loss, tracking_loss, TrackingTarget};
use crate::registers::RegisterBank;
use crate::synthdata::{load_sequence, read_dataset_index, SequenceSample, Split};
use crate::tracker::{
    cross_attention_head, load_checkpoint, load_optimizer, save_checkpoint, window, CropKind,
    Model,
};

/// Subdirectory of a run holding the checkpoint.
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CURVE_FILE: &str = "curve.csv";

/// Random draws for one training clip, fixed before the forward pass.
#[derive(Clone, Debug)]
pub struct ClipPlan {
    pub sequence: usize,
    pub start: usize,
    /// Per-frame crop centre offset, px (index 0 is the bank-seeding crop).
    pub shifts: Vec<[f64; 2]>,
    /// Per-frame crop-extent factor.
    pub scales: Vec<f64>,
    pub blurs: Vec<bool>,
}

/// Stream of the clip RNG: a pure function of `(seed, step, slot)` so resumed
/// runs draw the same clips.
pub fn clip_rng(seed: u64, step: usize, slot: usize, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + (step * batch + slot) as u64);
    rng
}

pub fn plan_clip<R: Rng + ?Sized>(cfg: &RunConfig, data: &[SequenceSample], rng: &mut R) -> ClipPlan {
    let sequence = rng.random_range(0..data.len());
    let n = data[sequence].frames.len();
    let span = cfg.clip_len.min(n);
    let start = rng.random_range(0..=n - span);
    let a = &cfg.augment;
    let clip_shift = [
        rng.random_range(-a.shift_px..=a.shift_px),
        rng.random_range(-a.shift_px..=a.shift_px),
    ];
    let mut shifts = Vec::with_capacity(span);
    let mut scales = Vec::with_capacity(span);
    let mut blurs = Vec::with_capacity(span);
    for _ in 0..span {
        shifts.push([
            clip_shift[0] + rng.random_range(-a.jitter_px..=a.jitter_px),
            clip_shift[1] + rng.random_range(-a.jitter_px..=a.jitter_px),
        ]);
        scales.push(1.0 + rng.random_range(-a.scale..=a.scale));
        blurs.push(rng.random::<f64>() < a.blur_prob);
    }
    ClipPlan {
        sequence,
        start,
        shifts,
        scales,
        blurs,
    }
}

/// Scalar parts of one clip's loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClipLoss {
    pub total: f64,
    pub tracking: f64,
    pub rd: f64,
}

/// Builds one clip's loss on `tape`: template and bank seed from the first
/// frame's truth, then per-frame search crops around the previous truth
/// (plus augmentation) feeding extract → push → retrieve → head.
pub fn clip_loss<'t, T: Real>(
    model: &Model<T>,
    p: &BoundParams<'t, T>,
    tape: &'t Tape<T>,
    sample: &SequenceSample,
    plan: &ClipPlan,
) -> Result<(Var<'t, T>, ClipLoss)> {
    let cfg = &model.cfg;
    let frames = &sample.frames[plan.start..plan.start + plan.shifts.len()];
    let tips = &sample.tips[plan.start..plan.start + plan.shifts.len()];
    let zw = window(tips[0], cfg.template_extent, cfg.template_size);
    let mut zpx = crop_bilinear(&frames[0], &zw);
    standardize(&mut zpx);
    let z = model.tokens(p, tape, &zpx, CropKind::Template)?;

    let search = |i: usize, center: [f64; 2]| -> (CropWindow, Vec<f64>) {
        let c = [center[0] + plan.shifts[i][0], center[1] + plan.shifts[i][1]];
        let w = CropWindow {
            extent: cfg.search_extent() * plan.scales[i],
            ..window(c, cfg.search_extent(), cfg.search_size)
        };
        let mut px = crop_bilinear(&frames[i], &w);
        if plan.blurs[i] {
            box_blur(&mut px, cfg.search_size, cfg.search_size, 1);
        }
        standardize(&mut px);
        (w, px)
    };

    let mut bank: Option<RegisterBank<Var<'t, T>>> = match &model.register {
        Some(reg) => {
            let (_, px) = search(0, tips[0]);
            let x = model.tokens(p, tape, &px, CropKind::Search)?;
            let (_, r) = model.extract(p, x)?;
            let mut bank = RegisterBank::new(cfg.bank_len, &[reg.k, reg.width])?;
            bank.push(r.expect("register model yields a register"))?;
            Some(bank)
        }
        None => None,
    };
    let mut registers = Vec::new();
    let mut track_terms = Vec::new();
    for i in 1..frames.len() {
        let (w, px) = search(i, tips[i - 1]);
        let target = TrackingTarget {
            tip: w.to_crop(tips[i]),
            sigma: cfg.heatmap_sigma * cfg.cell(),
            cell: cfg.cell(),
        };
        let x = model.tokens(p, tape, &px, CropKind::Search)?;
        let (x_hat, r) = model.extract(p, x)?;
        let entries: Vec<Var<'t, T>> = match (&mut bank, r) {
            (Some(bank), Some(r)) => {
                bank.push(r)?;
                registers.push(r);
                bank.iter().take(cfg.template_tokens()).copied().collect()
            }
            _ => Vec::new(),
        };
        let z_hat = model.retrieve(p, z, &entries)?;
        let (score, offset) = cross_attention_head(z_hat, x_hat, &model.head, p)?;
        // A target pushed outside the crop by augmentation carries no signal.
        if target.cell_and_offset(cfg.search_grid(), cfg.search_grid()).is_ok() {
            track_terms.push(tracking_loss(score, offset, &target)?);
        }
    }
    let tracking = match track_terms.len() {
        0 => tape.scalar(0.0),
        n => tape.concat(&track_terms).sum().scale(1.0 / n as f64),
    };
    let rd_active = cfg.rd.alpha > 0.0 || cfg.rd.beta > 0.0;
    let rd = match (&bank, &model.register) {
        (Some(bank), Some(reg)) if rd_active && bank.count() >= 2 => {
            let mut batch = registers.clone();
            if cfg.rd.include_template {
                batch.push(p.get(reg.r));
            }
            let regs = tape.concat(&batch).reshape(&[batch.len(), reg.k, reg.width]);
            let entries: Vec<Var<'t, T>> = bank.iter().copied().collect();
            let stacked = tape.concat(&entries).reshape(&[entries.len(), reg.k, reg.width]);
            Some(rd_loss(regs, stacked, &cfg.rd)?)
        }
        _ => None,
    };
    let total = match rd {
        Some(rd) => tracking + rd,
        None => tracking,
    };
    let parts = ClipLoss {
        total: total.item().as_f64(),
        tracking: tracking.item().as_f64(),
        rd: rd.map_or(0.0, |v| v.item().as_f64()),
    };
    Ok((total, parts))
}

/// One row of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub loss: f64,
    pub tracking: f64,
    pub rd: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// Mean validation error in px, when validated at this step.
    pub val_err_px: Option<f64>,
}

impl CurveRow {
    const HEADER: &'static str = "step,loss,tracking,rd,grad_norm,lr,val_err_px";

    fn to_csv(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{}",
            self.step,
            self.loss,
            self.tracking,
            self.rd,
            self.grad_norm,
            self.lr,
            self.val_err_px.map_or(String::new(), |v| format!("{v:?}"))
        )
    }

    fn from_csv(line: &str) -> Option<Self> {
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 7 {
            return None;
        }
        Some(Self {
            step: c[0].parse().ok()?,
            loss: c[1].parse().ok()?,
            tracking: c[2].parse().ok()?,
            rd: c[3].parse().ok()?,
            grad_norm: c[4].parse().ok()?,
            lr: c[5].parse().ok()?,
            val_err_px: if c[6].is_empty() { None } else { Some(c[6].parse().ok()?) },
        })
    }
}

pub fn read_curve(path: &Path) -> Result<Vec<CurveRow>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .map(|l| {
            CurveRow::from_csv(l).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                reason: format!("bad curve row '{l}'"),
            })
        })
        .collect()
}

fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut s = String::from(CurveRow::HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{}", r.to_csv()).expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub curve: Vec<CurveRow>,
}

fn load_split(dataset: &Path, split: Split) -> Result<Vec<SequenceSample>> {
    let index = read_dataset_index(dataset)?;
    index
        .sequence_dirs(dataset, split)?
        .iter()
        .map(|d| load_sequence(d))
        .collect()
}

fn validate_model(model: &Model<f32>, val: &[SequenceSample], frames: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in val {
        let len = s.frames.len().min(frames.max(2));
        let preds = track_sequence(model, &s.frames[..len], s.tips[0])?;
        for (p, t) in preds.iter().zip(&s.tips[1..len]) {
            sum += (p.tip[0] - t[0]).hypot(p.tip[1] - t[1]);
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}

/// Trains (or resumes) a model; writes `<out>/checkpoint/` and `<out>/curve.csv`.
pub fn train(cfg: &RunConfig, dataset: &Path, out: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_split(dataset, Split::Train)?;
    let val = if cfg.val_every > 0 {
        load_split(dataset, Split::Val)?
    } else {
        Vec::new()
    };
    let ckpt = out.join(CHECKPOINT_DIR);
    let curve_path = out.join(CURVE_FILE);
    fs::create_dir_all(out)?;
    let (mut model, mut opt, mut curve) = if resume && ckpt.join(crate::tracker::MANIFEST_FILE).exists() {
        let (model, manifest) = load_checkpoint::<f32>(&ckpt)?;
        crate::error::ensure!(
            model.cfg == cfg.tracker,
            "checkpoint tracker config differs from the run config"
        );
        let opt = load_optimizer(&ckpt, &model, cfg.optim.clone(), manifest.step)?;
        let mut curve = read_curve(&curve_path)?;
        curve.retain(|r| r.step <= manifest.step);
        log::info!("resuming from step {}", manifest.step);
        (model, opt, curve)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::<f32>::new(cfg.tracker.clone(), &mut rng)?;
        let opt = AdamW::new(cfg.optim.clone(), &model.store);
        (model, opt, Vec::new())
    };
    let started = Instant::now();
    while opt.step < cfg.steps {
        let step = opt.step;
        let mut sums = ClipLoss::default();
        for slot in 0..cfg.batch {
            let mut rng = clip_rng(cfg.seed, step, slot, cfg.batch);
            let plan = plan_clip(cfg, &data, &mut rng);
            let tape = Tape::new();
            let p = model.store.bind(&tape);
            let (loss, parts) = clip_loss(&model, &p, &tape, &data[plan.sequence], &plan)?;
            if !parts.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: parts.total,
                    step,
                    clip_seed: cfg.seed,
                });
            }
            let grads = tape.backward(loss);
            model.store.accumulate(&p, &grads);
            sums.total += parts.total;
            sums.tracking += parts.tracking;
            sums.rd += parts.rd;
        }
        let lr = opt.learning_rate();
        let grad_norm = opt.update(&mut model.store, 1.0 / cfg.batch as f64);
        let b = cfg.batch as f64;
        let val_err_px = if cfg.val_every > 0 && (step + 1) % cfg.val_every == 0 {
            Some(validate_model(&model, &val, cfg.val_frames)?)
        } else {
            None
        };
        let row = CurveRow {
            step: step + 1,
            loss: sums.total / b,
            tracking: sums.tracking / b,
            rd: sums.rd / b,
            grad_norm,
            lr,
            val_err_px,
        };
        log::info!(
            "step {} loss {:.4} (track {:.4}, rd {:.5}) |g| {:.3}{}",
            row.step,
            row.loss,
            row.tracking,
            row.rd,
            row.grad_norm,
            row.val_err_px.map_or(String::new(), |v| format!(" val {v:.2}px"))
        );
        curve.push(row);
    }
    log::info!("trained to step {} in {:.1}s", opt.step, started.elapsed().as_secs_f64());
    let training = serde_json::json!({
        "run": cfg,
        "final_loss": curve.last().map(|r| r.loss),
    });
    save_checkpoint(&ckpt, &model, cfg.seed, training, Some(&opt))?;
    write_curve(&curve_path, &curve)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        curve,
    })
}
