use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{DiffArray, Real, Var};

/// Anything storable in a [`RegisterBank`].
pub trait BankEntry {
    fn entry_shape(&self) -> Vec<usize>;

    /// Bytes of element storage owned by this entry.
    fn payload_bytes(&self) -> usize;
}

impl<T: Real> BankEntry for DiffArray<T> {
    fn entry_shape(&self) -> Vec<usize> {
        self.shape().to_vec()
    }

    fn payload_bytes(&self) -> usize {
        self.len() * std::mem::size_of::<T>()
    }
}

impl<T: Real> BankEntry for Var<'_, T> {
    fn entry_shape(&self) -> Vec<usize> {
        self.shape()
    }

    fn payload_bytes(&self) -> usize {
        self.len() * std::mem::size_of::<T>()
    }
}

/// Newest-first store of per-frame register descriptors.
///
/// With a capacity, pushing into a full bank evicts the oldest entry. A bank
/// without capacity grows without bound.
#[derive(Clone, Debug)]
pub struct RegisterBank<E> {
    capacity: Option<usize>,
    entry_shape: Vec<usize>,
    entries: VecDeque<E>,
}

impl<E: BankEntry> RegisterBank<E> {
    pub fn new(capacity: Option<usize>, entry_shape: &[usize]) -> Result<Self> {
        ensure!(capacity != Some(0), "bank capacity must be at least 1");
        Ok(Self {
            capacity,
            entry_shape: entry_shape.to_vec(),
            entries: VecDeque::with_capacity(capacity.unwrap_or(16)),
        })
    }

    pub fn push(&mut self, entry: E) -> Result<()> {
        let shape = entry.entry_shape();
        ensure!(
            shape == self.entry_shape,
            "register shape {shape:?} does not match bank entries {:?}",
            self.entry_shape
        );
        if Some(self.entries.len()) == self.capacity {
            self.entries.pop_back();
        }
        self.entries.push_front(entry);
        Ok(())
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn entry_shape(&self) -> &[usize] {
        &self.entry_shape
    }

    pub fn count(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries from newest to oldest.
    pub fn iter(&self) -> impl Iterator<Item = &E> {
        self.entries.iter()
    }

    pub fn newest(&self) -> Option<&E> {
        self.entries.front()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Approximate heap footprint: entry payloads plus the ring's slots.
    pub fn heap_bytes(&self) -> usize {
        self.entries.iter().map(BankEntry::payload_bytes).sum::<usize>()
            + self.entries.capacity() * std::mem::size_of::<E>()
    }
}

/// Sidecar metadata written next to a bank snapshot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankSnapshotMeta {
    /// Capacity; `null` for an unbounded bank.
    #[serde(rename = "L")]
    pub capacity: Option<usize>,
    pub k: usize,
    #[serde(rename = "C")]
    pub base_channels: usize,
}

impl<T: Real> RegisterBank<DiffArray<T>> {
    /// Writes `<stem>.bin` (u64 LE count, then entries newest-first as f32 LE)
    /// and `<stem>.json` with `{L, k, C}`.
    pub fn write_snapshot(&self, dir: &Path, stem: &str) -> Result<()> {
        ensure!(
            self.entry_shape.len() == 2 && self.entry_shape[1] % 2 == 0,
            "bank entries must be [k, 2C], got {:?}",
            self.entry_shape
        );
        let meta = BankSnapshotMeta {
            capacity: self.capacity,
            k: self.entry_shape[0],
            base_channels: self.entry_shape[1] / 2,
        };
        let mut bytes = Vec::with_capacity(8 + self.heap_bytes());
        bytes.extend_from_slice(&(self.count() as u64).to_le_bytes());
        for entry in &self.entries {
            for v in entry.data() {
                bytes.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        }
        fs::File::create(dir.join(format!("{stem}.bin")))?.write_all(&bytes)?;
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&meta)?,
        )?;
        Ok(())
    }

    pub fn read_snapshot(dir: &Path, stem: &str) -> Result<Self> {
        let json_path = dir.join(format!("{stem}.json"));
        let meta: BankSnapshotMeta = serde_json::from_str(&fs::read_to_string(&json_path)?)?;
        let bin_path = dir.join(format!("{stem}.bin"));
        let bytes = fs::read(&bin_path)?;
        let bad = |reason: String| Error::Format {
            path: bin_path.clone(),
            reason,
        };
        if bytes.len() < 8 {
            return Err(bad("missing count header".into()));
        }
        let count = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let shape = [meta.k, 2 * meta.base_channels];
        let per = shape[0] * shape[1];
        if bytes.len() != 8 + count * per * 4 {
            return Err(bad(format!(
                "expected {} payload bytes for {count} entries, found {}",
                count * per * 4,
                bytes.len() - 8
            )));
        }
        let mut bank = Self::new(meta.capacity, &shape)?;
        let floats: Vec<T> = bytes[8..]
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        // Stored newest-first; push oldest first to restore the order.
        for chunk in floats.chunks(per).rev() {
            bank.push(DiffArray::from_vec(&shape, chunk.to_vec())?)?;
        }
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(v: f64) -> DiffArray<f32> {
        DiffArray::full(&[2, 4], v as f32)
    }

    fn firsts(bank: &RegisterBank<DiffArray<f32>>) -> Vec<f32> {
        bank.iter().map(|e| e.data()[0]).collect()
    }

    #[test]
    fn push_into_empty_bank() {
        let mut bank = RegisterBank::new(Some(3), &[2, 4]).unwrap();
        bank.push(entry(1.0)).unwrap();
        assert_eq!(firsts(&bank), vec![1.0]);
    }

    #[test]
    fn full_bank_evicts_oldest() {
        let mut bank = RegisterBank::new(Some(3), &[2, 4]).unwrap();
        for v in [1.0, 2.0, 3.0, 4.0] {
            bank.push(entry(v)).unwrap();
        }
        assert_eq!(firsts(&bank), vec![4.0, 3.0, 2.0]);
        assert_eq!(bank.count(), 3);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut bank = RegisterBank::new(Some(3), &[2, 4]).unwrap();
        assert!(bank.push(DiffArray::<f32>::zeros(&[2, 3])).is_err());
        assert!(RegisterBank::<DiffArray<f32>>::new(Some(0), &[2, 4]).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut bank = RegisterBank::new(Some(4), &[2, 4]).unwrap();
        for v in [0.5, -1.25, 3.0] {
            bank.push(entry(v)).unwrap();
        }
        bank.write_snapshot(dir.path(), "bank").unwrap();
        let bytes = std::fs::read(dir.path().join("bank.bin")).unwrap();
        assert_eq!(&bytes[..8], &3u64.to_le_bytes());
        assert_eq!(&bytes[8..12], &3.0f32.to_le_bytes());
        let back = RegisterBank::<DiffArray<f32>>::read_snapshot(dir.path(), "bank").unwrap();
        assert_eq!(firsts(&back), vec![3.0, -1.25, 0.5]);
        assert_eq!(back.capacity(), Some(4));
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("bank.json")).unwrap())
                .unwrap();
        assert_eq!(meta["L"], 4);
        assert_eq!(meta["k"], 2);
        assert_eq!(meta["C"], 2);
    }
}
