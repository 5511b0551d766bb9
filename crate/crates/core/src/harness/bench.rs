//! Wall-clock scaling of the selective-scan kernels.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::ssm::scan::{chunked, sequential};
use crate::ssm::ScanDims;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub state: usize,
    pub channels: usize,
    pub repeats: usize,
    /// Chunk length of the chunked variant.
    pub chunk: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![1024, 2048, 4096, 8192, 16384],
            state: 8,
            channels: 16,
            repeats: 11,
            chunk: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanVariant {
    Sequential,
    Chunked,
}

impl ScanVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ScanVariant::Sequential => "sequential",
            ScanVariant::Chunked => "chunked",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub length: usize,
    pub variant: ScanVariant,
    /// Median wall time, seconds.
    pub seconds: f64,
    /// `time(length) / time(length / 2)` when the half length was also run.
    pub doubling_ratio: Option<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times both scan variants (f32) per length, inside a one-thread pool so
/// the chunked variant is not measured against scheduler noise.
pub fn bench_scan(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    ensure!(!cfg.lengths.is_empty(), "no lengths to benchmark");
    ensure!(cfg.lengths.windows(2).all(|w| w[0] < w[1]), "lengths must be strictly ascending");
    ensure!(cfg.repeats >= 1 && cfg.chunk >= 1, "repeats and chunk must be positive");
    ensure!(cfg.state >= 1 && cfg.channels >= 1, "state and channels must be positive");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| crate::error::Error::Contract(format!("thread pool: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<BenchRow> = Vec::new();
    for &len in &cfg.lengths {
        let dims = ScanDims {
            len,
            channels: cfg.channels,
            state: cfg.state,
        };
        let w = len * cfg.channels * cfg.state;
        let u: Vec<f32> = (0..len * cfg.channels).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: Vec<f32> = (0..w).map(|_| rng.random_range(0.5..0.99)).collect();
        let b: Vec<f32> = (0..w).map(|_| rng.random_range(-0.5..0.5)).collect();
        let c: Vec<f32> = (0..len * cfg.state).map(|_| rng.random_range(-1.0..1.0)).collect();
        for variant in [ScanVariant::Sequential, ScanVariant::Chunked] {
            let times: Vec<f64> = pool.install(|| {
                (0..cfg.repeats)
                    .map(|_| {
                        let start = Instant::now();
                        let y = match variant {
                            ScanVariant::Sequential => sequential(dims, &u, &a, &b, &c),
                            ScanVariant::Chunked => chunked(dims, &u, &a, &b, &c, cfg.chunk),
                        };
                        std::hint::black_box(&y);
                        start.elapsed().as_secs_f64()
                    })
                    .collect()
            });
            let seconds = median(times);
            let doubling_ratio = rows
                .iter()
                .find(|r| r.variant == variant && r.length * 2 == len)
                .map(|r| seconds / r.seconds);
            rows.push(BenchRow {
                length: len,
                variant,
                seconds,
                doubling_ratio,
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("length,variant,seconds,doubling_ratio\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{:e},{}",
            r.length,
            r.variant.as_str(),
            r.seconds,
            r.doubling_ratio.map_or(String::new(), |v| format!("{v:.4}"))
        )
        .expect("string write");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_and_ratios() {
        let cfg = BenchConfig {
            lengths: vec![64, 128, 200],
            repeats: 3,
            chunk: 16,
            ..Default::default()
        };
        let rows = bench_scan(&cfg, 1).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows[0].doubling_ratio.is_none());
        let r = rows[2].doubling_ratio.unwrap();
        assert!((r - rows[2].seconds / rows[0].seconds).abs() < 1e-12);
        assert!(rows[4].doubling_ratio.is_none());
        assert_eq!(bench_csv(&rows).lines().count(), 7);
    }

    #[test]
    fn descending_lengths_are_rejected() {
        let cfg = BenchConfig {
            lengths: vec![128, 64],
            ..Default::default()
        };
        assert!(bench_scan(&cfg, 1).is_err());
    }
}
