//! Composite operations built only from tape primitives.

use std::rc::Rc;

use super::array::Real;
use super::tape::{Var, GATHER_ZERO};

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Repeats each element `width` times along a new trailing axis.
pub fn expand_last<'t, T: Real>(x: Var<'t, T>, width: usize) -> Var<'t, T> {
    let mut shape = x.shape();
    let n = x.len();
    if shape == [1] && n == 1 {
        shape.clear();
    }
    shape.push(width);
    let index: Rc<[usize]> = (0..n * width).map(|i| i / width).collect();
    x.gather(index, &shape)
}

/// Numpy-style broadcast (right-aligned, unit extents stretch) through a gather.
pub fn broadcast_to<'t, T: Real>(x: Var<'t, T>, target: &[usize]) -> Var<'t, T> {
    let src = x.shape();
    assert!(src.len() <= target.len(), "cannot broadcast {src:?} to {target:?}");
    let pad = target.len() - src.len();
    let aligned: Vec<usize> = std::iter::repeat_n(1, pad).chain(src.iter().copied()).collect();
    for (a, t) in aligned.iter().zip(target) {
        assert!(*a == *t || *a == 1, "cannot broadcast {src:?} to {target:?}");
    }
    let src_strides = strides(&aligned);
    let tgt_strides = strides(target);
    let index: Rc<[usize]> = (0..numel(target))
        .map(|flat| {
            let mut off = 0;
            for ax in 0..target.len() {
                let coord = (flat / tgt_strides[ax]) % target[ax];
                if aligned[ax] != 1 {
                    off += coord * src_strides[ax];
                }
            }
            off
        })
        .collect();
    x.gather(index, target)
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute<'t, T: Real>(x: Var<'t, T>, perm: &[usize]) -> Var<'t, T> {
    let shape = x.shape();
    assert_eq!(perm.len(), shape.len(), "permutation rank mismatch");
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(&shape);
    let out_strides = strides(&out_shape);
    let index: Rc<[usize]> = (0..x.len())
        .map(|flat| {
            perm.iter()
                .enumerate()
                .map(|(ax, &p)| ((flat / out_strides[ax]) % out_shape[ax]) * in_strides[p])
                .sum()
        })
        .collect();
    x.gather(index, &out_shape)
}

pub fn transpose2<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    permute(x, &[1, 0])
}

/// Sums along `axis`, dropping it.
pub fn sum_axis<'t, T: Real>(x: Var<'t, T>, axis: usize) -> Var<'t, T> {
    let rank = x.shape().len();
    if axis + 1 == rank {
        return x.sum_last();
    }
    let mut perm: Vec<usize> = (0..rank).filter(|&a| a != axis).collect();
    perm.push(axis);
    permute(x, &perm).sum_last()
}

pub fn mean_axis<'t, T: Real>(x: Var<'t, T>, axis: usize) -> Var<'t, T> {
    let n = x.shape()[axis] as f64;
    sum_axis(x, axis).scale(1.0 / n)
}

/// Population variance along `axis`, dropping it.
pub fn variance_axis<'t, T: Real>(x: Var<'t, T>, axis: usize) -> Var<'t, T> {
    let shape = x.shape();
    let rank = shape.len();
    let mut perm: Vec<usize> = (0..rank).filter(|&a| a != axis).collect();
    perm.push(axis);
    let moved = if axis + 1 == rank { x } else { permute(x, &perm) };
    let width = shape[axis];
    let mean = moved.sum_last().scale(1.0 / width as f64);
    let centered = moved - expand_last(mean, width);
    centered.square().sum_last().scale(1.0 / width as f64)
}

/// Rows `start..end` of the leading axis.
pub fn rows<'t, T: Real>(x: Var<'t, T>, start: usize, end: usize) -> Var<'t, T> {
    let mut shape = x.shape();
    assert!(start < end && end <= shape[0], "row range {start}..{end} out of bounds");
    let row: usize = shape[1..].iter().product();
    shape[0] = end - start;
    let index: Rc<[usize]> = (start * row..end * row).collect();
    x.gather(index, &shape)
}

/// Per-row normalization over the last axis followed by an affine map.
pub fn layer_norm<'t, T: Real>(
    x: Var<'t, T>,
    gain: Var<'t, T>,
    bias: Var<'t, T>,
    eps: f64,
) -> Var<'t, T> {
    let d = *x.shape().last().expect("layer_norm on 0-d value");
    assert_eq!(gain.len(), d, "layer_norm gain width");
    assert_eq!(bias.len(), d, "layer_norm bias width");
    let mean = x.sum_last().scale(1.0 / d as f64);
    let centered = x - expand_last(mean, d);
    let var = centered.square().sum_last().scale(1.0 / d as f64);
    let inv_std = var.shift(eps).sqrt().recip();
    centered * expand_last(inv_std, d) * gain + bias
}

/// Softmax over the last axis. The row maximum is subtracted as a constant.
pub fn softmax_last<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    let shape = x.shape();
    let d = *shape.last().expect("softmax on 0-d value");
    let values = x.value();
    let shift: Vec<T> = values
        .chunks(d)
        .flat_map(|row| {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            std::iter::repeat_n(m, d)
        })
        .collect();
    let e = (x - x.tape().constant(&shape, shift)).exp();
    let inv = e.sum_last().recip();
    e * expand_last(inv, d)
}

/// `x · w + b` over the last axis of `x`.
pub fn linear<'t, T: Real>(x: Var<'t, T>, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Var<'t, T> {
    let y = x.matmul(w);
    match b {
        Some(b) => y + b,
        None => y,
    }
}

/// Gather map for a zero-padded `size`×`size` convolution patch extraction
/// over a row-major [H, W, C] grid, producing [H·W, size·size·C].
pub fn im2col_index(h: usize, w: usize, c: usize, size: usize) -> Rc<[usize]> {
    let r = (size / 2) as isize;
    let mut idx = Vec::with_capacity(h * w * size * size * c);
    for i in 0..h as isize {
        for j in 0..w as isize {
            for di in -r..=r {
                for dj in -r..=r {
                    let (y, x) = (i + di, j + dj);
                    let inside = y >= 0 && x >= 0 && y < h as isize && x < w as isize;
                    for k in 0..c {
                        idx.push(if inside {
                            (y as usize * w + x as usize) * c + k
                        } else {
                            GATHER_ZERO
                        });
                    }
                }
            }
        }
    }
    idx.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&[1, 3], vec![5.0, 5.0, 5.0]);
        let g = tape.constant(&[3], vec![1.0; 3]);
        let b = tape.constant(&[3], vec![0.0; 3]);
        let y = layer_norm(x, g, b, 1e-5).value();
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_unit_pair() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&[1, 2], vec![1.0, -1.0]);
        let g = tape.constant(&[2], vec![1.0; 2]);
        let b = tape.constant(&[2], vec![0.0; 2]);
        let y = layer_norm(x, g, b, 1e-14).value();
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_zero_gain_yields_bias() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&[2, 3], vec![0.3, -1.0, 2.0, 7.0, 1.0, 0.0]);
        let g = tape.constant(&[3], vec![0.0; 3]);
        let b = tape.constant(&[3], vec![1.0, 2.0, 3.0]);
        let y = layer_norm(x, g, b, 1e-5).value();
        assert_eq!(y, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&[2, 3], vec![1000.0, 1001.0, 999.0, -3.0, 0.0, 2.0]);
        let y = softmax_last(x).value();
        for row in y.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_and_broadcast() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&[2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(transpose2(x).value(), vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let v = tape.constant(&[2, 1], vec![7.0, 8.0]);
        assert_eq!(
            broadcast_to(v, &[2, 3]).value(),
            vec![7.0, 7.0, 7.0, 8.0, 8.0, 8.0]
        );
        assert_eq!(sum_axis(x, 0).value(), vec![3.0, 5.0, 7.0]);
        assert_eq!(variance_axis(x, 0).value(), vec![2.25, 2.25, 2.25]);
    }

    #[test]
    fn im2col_pads_with_zeros() {
        let idx = im2col_index(2, 2, 1, 3);
        assert_eq!(idx.len(), 4 * 9);
        // top-left output: only the centre, right, below and diagonal taps land inside
        let inside: Vec<usize> = idx[..9].iter().copied().filter(|&i| i != GATHER_ZERO).collect();
        assert_eq!(inside, vec![0, 1, 2, 3]);
    }
}
