//! On-disk dataset layout:
//!
//! ```text
//! <root>/dataset.json
//! <root>/<split>/seq_0000/frame_000000.pgm …
//! <root>/<split>/seq_0000/truth.csv   (frame,tip_x_px,tip_y_px,phase)
//! <root>/<split>/seq_0000/meta.json
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::motion::{MotionConfig, Phase, Regime, ANGLES_DEG};
use super::render::RenderConfig;
use super::{generate_sequence, SequenceMeta, SequenceSample};
use crate::error::{ensure, Error, Result};
use crate::image::Frame;

pub const DATASET_INDEX_FILE: &str = "dataset.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    /// Held-out manual-regime sequences (train on robotic, test on manual).
    TestManual,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::TestManual];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::TestManual => "test_manual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown split '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub motion: MotionConfig,
    pub render: RenderConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_test_manual: usize,
    /// Frames per sequence; `None` plays the full motion profile once.
    pub n_frames: Option<usize>,
    /// Cycle insertion angles over the sequences of each split.
    pub vary_angle: bool,
    /// Uniform jitter of the needle entry point, px.
    pub entry_jitter: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            motion: MotionConfig::default(),
            render: RenderConfig::default(),
            n_train: 14,
            n_val: 2,
            n_test: 4,
            n_test_manual: 0,
            n_frames: None,
            vary_angle: true,
            entry_jitter: 10.0,
        }
    }
}

impl DatasetConfig {
    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
            Split::TestManual => self.n_test_manual,
        }
    }
}

/// `dataset.json`: configuration, seed and sequence directories per split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub config: DatasetConfig,
    pub seed: u64,
    pub splits: BTreeMap<Split, Vec<String>>,
}

impl DatasetIndex {
    pub fn sequence_dirs(&self, root: &Path, split: Split) -> Result<Vec<PathBuf>> {
        let names = self
            .splits
            .get(&split)
            .filter(|n| !n.is_empty())
            .ok_or_else(|| Error::Contract(format!("dataset has no '{}' split", split.name())))?;
        Ok(names.iter().map(|n| root.join(split.name()).join(n)).collect())
    }
}

/// Per-split sequence seeds drawn from one stream; pairwise distinct.
pub fn sequence_seeds(cfg: &DatasetConfig, seed: u64) -> BTreeMap<Split, Vec<u64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    Split::ALL
        .into_iter()
        .map(|split| {
            let seeds = (0..cfg.count(split))
                .map(|_| loop {
                    let s: u64 = rng.random();
                    if seen.insert(s) {
                        break s;
                    }
                })
                .collect();
            (split, seeds)
        })
        .collect()
}

fn sequence_motion(cfg: &DatasetConfig, split: Split, index: usize, seed: u64) -> MotionConfig {
    let mut m = cfg.motion.clone();
    if split == Split::TestManual {
        m.regime = Regime::Manual;
    }
    if cfg.vary_angle {
        m.angle_deg = ANGLES_DEG[index % ANGLES_DEG.len()];
    }
    if cfg.entry_jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let j = cfg.entry_jitter;
        m.entry_px = [
            m.entry_px[0] + rng.random_range(-j..=j),
            m.entry_px[1] + rng.random_range(-j..=j),
        ];
    }
    m
}

fn write_sequence(dir: &Path, s: &SequenceSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("frame,tip_x_px,tip_y_px,phase\n");
    for (i, (frame, tip)) in s.frames.iter().zip(&s.tips).enumerate() {
        frame.write_pgm(&dir.join(format!("frame_{i:06}.pgm")))?;
        // `{:?}` prints the shortest round-tripping decimal.
        writeln!(csv, "{i},{:?},{:?},{}", tip[0], tip[1], s.phases[i].as_str()).expect("string write");
    }
    fs::write(dir.join("truth.csv"), csv)?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&s.meta)?)?;
    Ok(())
}

/// Generates every split in parallel and writes the dataset under `root`.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64, root: &Path) -> Result<DatasetIndex> {
    cfg.motion.validate()?;
    cfg.render.validate()?;
    ensure!(cfg.n_train > 0, "the train split needs at least one sequence");
    let seeds = sequence_seeds(cfg, seed);
    let jobs: Vec<(Split, usize, u64)> = seeds
        .iter()
        .flat_map(|(&split, s)| s.iter().enumerate().map(move |(i, &sd)| (split, i, sd)))
        .collect();
    fs::create_dir_all(root)?;
    jobs.par_iter().try_for_each(|&(split, i, sd)| {
        let motion = sequence_motion(cfg, split, i, sd);
        let sample = generate_sequence(&motion, &cfg.render, cfg.n_frames, sd)?;
        write_sequence(&root.join(split.name()).join(format!("seq_{i:04}")), &sample)
    })?;
    let index = DatasetIndex {
        config: cfg.clone(),
        seed,
        splits: seeds
            .iter()
            .map(|(&split, s)| (split, (0..s.len()).map(|i| format!("seq_{i:04}")).collect()))
            .collect(),
    };
    fs::write(root.join(DATASET_INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}

pub fn read_dataset_index(root: &Path) -> Result<DatasetIndex> {
    let path = root.join(DATASET_INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::Contract(format!("no dataset at {}: {e}", root.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads a sequence directory back into memory.
pub fn load_sequence(dir: &Path) -> Result<SequenceSample> {
    let meta: SequenceMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let truth_path = dir.join("truth.csv");
    let text = fs::read_to_string(&truth_path)?;
    let bad = |reason: String| Error::Format {
        path: truth_path.clone(),
        reason,
    };
    let mut tips = Vec::with_capacity(meta.n_frames);
    let mut phases = Vec::with_capacity(meta.n_frames);
    for (line_no, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(bad(format!("line {}: expected 4 columns", line_no + 1)));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("line {}: bad number '{s}'", line_no + 1)))
        };
        tips.push([num(cols[1])?, num(cols[2])?]);
        phases.push(
            Phase::parse(cols[3]).ok_or_else(|| bad(format!("line {}: bad phase", line_no + 1)))?,
        );
    }
    if tips.len() != meta.n_frames {
        return Err(bad(format!("{} rows for {} frames", tips.len(), meta.n_frames)));
    }
    let frames = (0..meta.n_frames)
        .map(|i| Frame::read_pgm(&dir.join(format!("frame_{i:06}.pgm"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceSample {
        frames,
        tips,
        phases,
        mm_per_px: meta.mm_per_px,
        seed: meta.seed,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            render: RenderConfig {
                width: 160,
                height: 160,
                ..Default::default()
            },
            motion: MotionConfig {
                start_depth: 2.0,
                insertion_depth: 8.0,
                stroke: 4.0,
                cycles: 1,
                entry_px: [30.0, 30.0],
                ..Default::default()
            },
            n_train: 2,
            n_val: 1,
            n_test: 1,
            n_test_manual: 1,
            n_frames: Some(6),
            ..Default::default()
        }
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let cfg = DatasetConfig {
            n_train: 70,
            n_val: 10,
            n_test: 20,
            ..Default::default()
        };
        let seeds = sequence_seeds(&cfg, 11);
        let all: Vec<u64> = seeds.values().flatten().copied().collect();
        let set: HashSet<u64> = all.iter().copied().collect();
        assert_eq!(set.len(), all.len());
        assert_eq!(seeds[&Split::Train].len(), 70);
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let index = generate_dataset(&cfg, 5, dir.path()).unwrap();
        assert_eq!(read_dataset_index(dir.path()).unwrap(), index);
        let seq_dir = &index.sequence_dirs(dir.path(), Split::Train).unwrap()[1];
        let loaded = load_sequence(seq_dir).unwrap();
        let seeds = sequence_seeds(&cfg, 5);
        let motion = sequence_motion(&cfg, Split::Train, 1, seeds[&Split::Train][1]);
        let fresh = generate_sequence(&motion, &cfg.render, cfg.n_frames, seeds[&Split::Train][1]).unwrap();
        assert_eq!(loaded, fresh);
        let header = fs::read_to_string(seq_dir.join("truth.csv")).unwrap();
        assert!(header.starts_with("frame,tip_x_px,tip_y_px,phase\n0,"));
        let manual = load_sequence(&index.sequence_dirs(dir.path(), Split::TestManual).unwrap()[0]).unwrap();
        assert_eq!(manual.meta.motion.regime, Regime::Manual);
    }

    #[test]
    fn missing_split_is_a_contract_violation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_test_manual: 0,
            ..small()
        };
        let index = generate_dataset(&cfg, 5, dir.path()).unwrap();
        assert!(matches!(
            index.sequence_dirs(dir.path(), Split::TestManual),
            Err(Error::Contract(_))
        ));
    }
}
