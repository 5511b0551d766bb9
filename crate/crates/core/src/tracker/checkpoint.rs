//! Checkpoint directory: `params.bin` (every parameter in declaration order as
//! f32 LE), `manifest.json`, and optionally `optim.bin` (AdamW moments).

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrackerConfig;
use super::model::Model;
use crate::error::{ensure, Error, Result};
use crate::numerics::{AdamW, AdamWConfig, Real};

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const OPTIM_FILE: &str = "optim.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: TrackerConfig,
    pub params: Vec<ParamRecord>,
    pub seed: u64,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Free-form training metadata (run config, losses, timings).
    pub training: serde_json::Value,
}

fn floats_to_bytes<T: Real>(values: impl Iterator<Item = T>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
}

fn bytes_to_floats<T: Real>(bytes: &[u8]) -> impl Iterator<Item = T> + '_ {
    bytes
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
}

/// Writes parameters and manifest, plus optimizer moments when given.
pub fn save_checkpoint<T: Real>(
    dir: &Path,
    model: &Model<T>,
    seed: u64,
    training: serde_json::Value,
    optim: Option<&AdamW<T>>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let entries = model.store.entries();
    let mut bytes = Vec::with_capacity(4 * model.store.num_scalars());
    floats_to_bytes(entries.iter().flat_map(|e| e.array.data().iter().copied()), &mut bytes);
    fs::write(dir.join(PARAMS_FILE), bytes)?;
    let manifest = Manifest {
        config: model.cfg.clone(),
        params: entries
            .iter()
            .map(|e| ParamRecord {
                name: e.name.clone(),
                shape: e.array.shape().to_vec(),
            })
            .collect(),
        seed,
        step: optim.map_or(0, |o| o.step),
        training,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    if let Some(o) = optim {
        let mut bytes = Vec::with_capacity(8 * model.store.num_scalars());
        floats_to_bytes(o.m.iter().chain(&o.v).flatten().copied(), &mut bytes);
        fs::write(dir.join(OPTIM_FILE), bytes)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
}

/// Rebuilds the model from a checkpoint directory.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(Model<T>, Manifest)> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::<T>::new(manifest.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path)?;
    let bad = |reason: String| Error::Format {
        path: path.clone(),
        reason,
    };
    let entries = model.store.entries_mut();
    ensure!(
        entries.len() == manifest.params.len(),
        "checkpoint lists {} parameters but the config declares {}",
        manifest.params.len(),
        entries.len()
    );
    let expected: usize = entries.iter().map(|e| e.array.len()).sum();
    if bytes.len() != 4 * expected {
        return Err(bad(format!("expected {} bytes, found {}", 4 * expected, bytes.len())));
    }
    let mut offset = 0;
    for (entry, rec) in entries.iter_mut().zip(&manifest.params) {
        ensure!(
            entry.name == rec.name && entry.array.shape() == rec.shape.as_slice(),
            "parameter {} {:?} does not match checkpoint entry {} {:?}",
            entry.name,
            entry.array.shape(),
            rec.name,
            rec.shape
        );
        let n = entry.array.len();
        let data = entry.array.data_mut();
        for (d, v) in data.iter_mut().zip(bytes_to_floats(&bytes[offset..offset + 4 * n])) {
            *d = v;
        }
        offset += 4 * n;
    }
    Ok((model, manifest))
}

/// Restores optimizer moments saved next to the parameters.
pub fn load_optimizer<T: Real>(
    dir: &Path,
    model: &Model<T>,
    cfg: AdamWConfig,
    step: usize,
) -> Result<AdamW<T>> {
    let path = dir.join(OPTIM_FILE);
    let bytes = fs::read(&path)?;
    let n = model.store.num_scalars();
    if bytes.len() != 8 * n {
        return Err(Error::Format {
            path,
            reason: format!("expected {} bytes of moments, found {}", 8 * n, bytes.len()),
        });
    }
    let mut opt = AdamW::new(cfg, &model.store);
    opt.step = step;
    let mut values = bytes_to_floats::<T>(&bytes);
    for buf in opt.m.iter_mut().chain(opt.v.iter_mut()) {
        for v in buf.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(opt)
}
