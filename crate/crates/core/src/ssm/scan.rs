//! Selective-scan kernels over flat row-major buffers.
//!
//! Layout: `u` [T, ch], `a_bar`/`b_bar` [T, ch, N], `c` [T, N], `y` [T, ch].
//! The state starts at zero.

use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::numerics::{DiffArray, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

impl ScanDims {
    fn width(&self) -> usize {
        self.channels * self.state
    }

    fn check<T>(&self, u: &[T], a_bar: &[T], b_bar: &[T], c: &[T]) {
        assert_eq!(u.len(), self.len * self.channels, "u length");
        assert_eq!(a_bar.len(), self.len * self.width(), "a_bar length");
        assert_eq!(b_bar.len(), self.len * self.width(), "b_bar length");
        assert_eq!(c.len(), self.len * self.state, "c length");
    }
}

#[inline]
fn step<T: Real>(
    dims: ScanDims,
    t: usize,
    h: &mut [T],
    u: &[T],
    a_bar: &[T],
    b_bar: &[T],
    c: &[T],
    y: &mut [T],
) {
    let (ch, n) = (dims.channels, dims.state);
    let w = dims.width();
    let a_t = &a_bar[t * w..(t + 1) * w];
    let b_t = &b_bar[t * w..(t + 1) * w];
    let c_t = &c[t * n..(t + 1) * n];
    for ci in 0..ch {
        let ut = u[t * ch + ci];
        let mut acc = T::zero();
        for s in 0..n {
            let idx = ci * n + s;
            h[idx] = a_t[idx] * h[idx] + b_t[idx] * ut;
            acc += c_t[s] * h[idx];
        }
        y[t * ch + ci] = acc;
    }
}

/// Exact unrolled recurrence.
pub fn sequential<T: Real>(dims: ScanDims, u: &[T], a_bar: &[T], b_bar: &[T], c: &[T]) -> Vec<T> {
    dims.check(u, a_bar, b_bar, c);
    let mut h = vec![T::zero(); dims.width()];
    let mut y = vec![T::zero(); dims.len * dims.channels];
    for t in 0..dims.len {
        step(dims, t, &mut h, u, a_bar, b_bar, c, &mut y);
    }
    y
}

/// Sequential recurrence that also returns every state `h_t` ([T, ch, N]).
pub(crate) fn forward_with_states<T: Real>(
    dims: ScanDims,
    u: &[T],
    a_bar: &[T],
    b_bar: &[T],
    c: &[T],
) -> (Vec<T>, Vec<T>) {
    dims.check(u, a_bar, b_bar, c);
    let w = dims.width();
    let mut h = vec![T::zero(); w];
    let mut y = vec![T::zero(); dims.len * dims.channels];
    let mut states = Vec::with_capacity(dims.len * w);
    for t in 0..dims.len {
        step(dims, t, &mut h, u, a_bar, b_bar, c, &mut y);
        states.extend_from_slice(&h);
    }
    (y, states)
}

/// Two-level scan: each chunk first reduces to its end state from a zero
/// start and its decay product `Π a_bar`; a sequential carry turns those into
/// true chunk start states; each chunk then replays its recurrence from its
/// start state and writes the outputs.
///
/// Extra memory is O(chunks · ch · N), independent of the chunk length.
pub fn chunked<T: Real>(
    dims: ScanDims,
    u: &[T],
    a_bar: &[T],
    b_bar: &[T],
    c: &[T],
    chunk: usize,
) -> Vec<T> {
    assert!(chunk >= 1, "chunk must be positive");
    dims.check(u, a_bar, b_bar, c);
    let (ch, n, w) = (dims.channels, dims.state, dims.width());
    let chunk = chunk.min(dims.len.max(1));
    let n_chunks = dims.len.div_ceil(chunk);

    // Per-chunk end state from a zero start, and the decay product.
    let summaries: Vec<(Vec<T>, Vec<T>)> = (0..n_chunks)
        .into_par_iter()
        .map(|j| {
            let (start, end) = (j * chunk, ((j + 1) * chunk).min(dims.len));
            let mut h = vec![T::zero(); w];
            let mut p = vec![T::one(); w];
            for t in start..end {
                let a_t = &a_bar[t * w..(t + 1) * w];
                let b_t = &b_bar[t * w..(t + 1) * w];
                for ci in 0..ch {
                    let ut = u[t * ch + ci];
                    for s in 0..n {
                        let idx = ci * n + s;
                        h[idx] = a_t[idx] * h[idx] + b_t[idx] * ut;
                        p[idx] *= a_t[idx];
                    }
                }
            }
            (h, p)
        })
        .collect();

    let mut starts = vec![vec![T::zero(); w]; n_chunks];
    for j in 1..n_chunks {
        let (h_end, p_end) = &summaries[j - 1];
        let prev = starts[j - 1].clone();
        for idx in 0..w {
            starts[j][idx] = h_end[idx] + p_end[idx] * prev[idx];
        }
    }

    let mut y = vec![T::zero(); dims.len * ch];
    y.par_chunks_mut(chunk * ch)
        .zip(starts)
        .enumerate()
        .for_each(|(j, (y_chunk, mut h))| {
            let start = j * chunk;
            for (lt, y_t) in y_chunk.chunks_mut(ch).enumerate() {
                let t = start + lt;
                let a_t = &a_bar[t * w..(t + 1) * w];
                let b_t = &b_bar[t * w..(t + 1) * w];
                let c_t = &c[t * n..(t + 1) * n];
                for (ci, yv) in y_t.iter_mut().enumerate() {
                    let ut = u[t * ch + ci];
                    let mut acc = T::zero();
                    for s in 0..n {
                        let idx = ci * n + s;
                        h[idx] = a_t[idx] * h[idx] + b_t[idx] * ut;
                        acc += c_t[s] * h[idx];
                    }
                    *yv = acc;
                }
            }
        });
    y
}

pub(crate) struct ScanAdjoint<T> {
    pub u: Vec<T>,
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
    pub c: Vec<T>,
}

/// Reverse-time adjoint recurrence for the scan.
pub(crate) fn adjoint<T: Real>(
    dims: ScanDims,
    u: &[T],
    a_bar: &[T],
    b_bar: &[T],
    c: &[T],
    states: &[T],
    gy: &[T],
) -> ScanAdjoint<T> {
    let (ch, n, w) = (dims.channels, dims.state, dims.width());
    let mut out = ScanAdjoint {
        u: vec![T::zero(); u.len()],
        a_bar: vec![T::zero(); a_bar.len()],
        b_bar: vec![T::zero(); b_bar.len()],
        c: vec![T::zero(); c.len()],
    };
    let mut gh = vec![T::zero(); w];
    for t in (0..dims.len).rev() {
        let h_t = &states[t * w..(t + 1) * w];
        for ci in 0..ch {
            let g = gy[t * ch + ci];
            let ut = u[t * ch + ci];
            let mut gu = T::zero();
            for s in 0..n {
                let idx = ci * n + s;
                let k = t * w + idx;
                gh[idx] += c[t * n + s] * g;
                out.c[t * n + s] += g * h_t[idx];
                out.b_bar[k] = gh[idx] * ut;
                gu += gh[idx] * b_bar[k];
                let h_prev = if t == 0 {
                    T::zero()
                } else {
                    states[(t - 1) * w + idx]
                };
                out.a_bar[k] = gh[idx] * h_prev;
                gh[idx] *= a_bar[k];
            }
            out.u[t * ch + ci] = gu;
        }
    }
    out
}

fn dims_of<T: Real>(
    u: &DiffArray<T>,
    a_bar: &DiffArray<T>,
    b_bar: &DiffArray<T>,
    c: &DiffArray<T>,
) -> Result<ScanDims> {
    ensure!(u.shape().len() == 2, "u must be [T, channels], got {:?}", u.shape());
    ensure!(c.shape().len() == 2, "C must be [T, N], got {:?}", c.shape());
    let dims = ScanDims {
        len: u.shape()[0],
        channels: u.shape()[1],
        state: c.shape()[1],
    };
    let full = [dims.len, dims.channels, dims.state];
    ensure!(
        a_bar.shape() == full,
        "A_bar must be {full:?}, got {:?}",
        a_bar.shape()
    );
    ensure!(
        b_bar.shape() == full,
        "B_bar must be {full:?}, got {:?}",
        b_bar.shape()
    );
    ensure!(
        c.shape()[0] == dims.len,
        "C has {} steps, u has {}",
        c.shape()[0],
        dims.len
    );
    Ok(dims)
}

/// Reference scan on owned arrays.
pub fn selective_scan_seq<T: Real>(
    u: &DiffArray<T>,
    a_bar: &DiffArray<T>,
    b_bar: &DiffArray<T>,
    c: &DiffArray<T>,
) -> Result<DiffArray<T>> {
    let dims = dims_of(u, a_bar, b_bar, c)?;
    let y = sequential(dims, u.data(), a_bar.data(), b_bar.data(), c.data());
    DiffArray::from_vec(u.shape(), y)
}

/// Chunked scan on owned arrays; equals [`selective_scan_seq`] up to reassociation.
pub fn selective_scan_chunked<T: Real>(
    u: &DiffArray<T>,
    a_bar: &DiffArray<T>,
    b_bar: &DiffArray<T>,
    c: &DiffArray<T>,
    chunk: usize,
) -> Result<DiffArray<T>> {
    ensure!(chunk >= 1, "chunk size must be at least 1, got {chunk}");
    let dims = dims_of(u, a_bar, b_bar, c)?;
    let y = chunked(dims, u.data(), a_bar.data(), b_bar.data(), c.data(), chunk);
    DiffArray::from_vec(u.shape(), y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], v: &[f64]) -> DiffArray<f64> {
        DiffArray::from_f64(shape, v).unwrap()
    }

    #[test]
    fn hand_unrolled_two_steps() {
        let u = arr(&[2, 1], &[1.0, 1.0]);
        let a = arr(&[2, 1, 1], &[0.5, 0.5]);
        let b = arr(&[2, 1, 1], &[1.0, 1.0]);
        let c = arr(&[2, 1], &[1.0, 1.0]);
        let y = selective_scan_seq(&u, &a, &b, &c).unwrap();
        assert_eq!(y.data(), &[1.0, 1.5]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let u = DiffArray::<f64>::zeros(&[5, 2]);
        let a = DiffArray::full(&[5, 2, 3], 0.9);
        let b = DiffArray::full(&[5, 2, 3], 0.7);
        let c = DiffArray::full(&[5, 3], 1.3);
        let y = selective_scan_seq(&u, &a, &b, &c).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn memoryless_when_a_bar_is_zero() {
        let u = arr(&[3, 1], &[1.0, -2.0, 4.0]);
        let a = DiffArray::zeros(&[3, 1, 1]);
        let b = arr(&[3, 1, 1], &[0.5, 0.5, 0.5]);
        let c = arr(&[3, 1], &[2.0, 2.0, 2.0]);
        let y = selective_scan_seq(&u, &a, &b, &c).unwrap();
        assert_eq!(y.data(), &[1.0, -2.0, 4.0]);
    }

    #[test]
    fn chunk_size_zero_is_rejected() {
        let u = DiffArray::<f64>::zeros(&[2, 1]);
        let a = DiffArray::zeros(&[2, 1, 1]);
        let c = DiffArray::zeros(&[2, 1]);
        assert!(selective_scan_chunked(&u, &a, &a, &c, 0).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let u = DiffArray::<f64>::zeros(&[3, 2]);
        let a = DiffArray::zeros(&[3, 2, 4]);
        let b = DiffArray::zeros(&[3, 1, 4]);
        let c = DiffArray::zeros(&[3, 4]);
        assert!(selective_scan_seq(&u, &a, &b, &c).is_err());
    }
}
