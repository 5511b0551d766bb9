//! Cross-map scanning layouts: splicing extra tokens between image segments.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{Real, Var};

/// Where each group of extra tokens goes relative to its image segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InsertMode {
    /// After segment `j` (register extraction).
    Behind,
    /// Before segment `j` (register retrieval).
    Before,
}

/// Result of an interleave: which fused rows hold image vs extra tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InterleaveLayout {
    pub total: usize,
    pub mode: InsertMode,
    /// `(start, len)` of each image segment, in image-token indices.
    pub segments: Vec<(usize, usize)>,
    /// Fused row of every image token, in image order.
    pub image_positions: Vec<usize>,
    /// Fused row of every extra token, in extra order.
    pub extra_positions: Vec<usize>,
    pub width: usize,
}

/// Segment sizes for splitting `len` tokens into `groups` runs, longer first.
pub fn segment_sizes(len: usize, groups: usize) -> Vec<usize> {
    let (base, rem) = (len / groups, len % groups);
    (0..groups).map(|j| base + usize::from(j < rem)).collect()
}

/// Builds the layout for `image_len` image tokens and `groups` groups of
/// `group_size` extra tokens each.
pub fn build_layout(
    image_len: usize,
    groups: usize,
    group_size: usize,
    width: usize,
    mode: InsertMode,
) -> Result<InterleaveLayout> {
    ensure!(groups >= 1, "at least one extra token group is required");
    ensure!(group_size >= 1, "extra token groups must be non-empty");
    ensure!(
        mode == InsertMode::Before || image_len >= groups,
        "{groups} groups exceed {image_len} image tokens in behind mode"
    );
    let sizes = segment_sizes(image_len, groups);
    let mut segments = Vec::with_capacity(groups);
    let mut image_positions = Vec::with_capacity(image_len);
    let mut extra_positions = Vec::with_capacity(groups * group_size);
    let (mut pos, mut img) = (0, 0);
    let place_group = |pos: &mut usize, extra: &mut Vec<usize>| {
        for _ in 0..group_size {
            extra.push(*pos);
            *pos += 1;
        }
    };
    for &size in &sizes {
        if mode == InsertMode::Before {
            place_group(&mut pos, &mut extra_positions);
        }
        segments.push((img, size));
        for _ in 0..size {
            image_positions.push(pos);
            pos += 1;
            img += 1;
        }
        if mode == InsertMode::Behind {
            place_group(&mut pos, &mut extra_positions);
        }
    }
    Ok(InterleaveLayout {
        total: pos,
        mode,
        segments,
        image_positions,
        extra_positions,
        width,
    })
}

fn row_gather(rows: &[usize], width: usize) -> Rc<[usize]> {
    rows.iter()
        .flat_map(|&r| r * width..(r + 1) * width)
        .collect()
}

/// Splices `extra` ([groups·g, dim]) into `image` ([T, dim]) in `groups`
/// contiguous groups.
pub fn interleave_grouped<'t, T: Real>(
    image: Var<'t, T>,
    extra: Var<'t, T>,
    groups: usize,
    mode: InsertMode,
) -> Result<(Var<'t, T>, InterleaveLayout)> {
    let (is, es) = (image.shape(), extra.shape());
    ensure!(is.len() == 2, "image tokens must be [T, dim], got {is:?}");
    ensure!(es.len() == 2, "extra tokens must be [m, dim], got {es:?}");
    ensure!(is[1] == es[1], "token widths differ: {} vs {}", is[1], es[1]);
    ensure!(
        groups >= 1 && es[0] % groups == 0,
        "{} extra tokens cannot form {groups} equal groups",
        es[0]
    );
    let width = is[1];
    let layout = build_layout(is[0], groups, es[0] / groups, width, mode)?;
    // Source row in concat([image; extra]) for each fused row.
    let mut source = vec![0usize; layout.total];
    for (i, &p) in layout.image_positions.iter().enumerate() {
        source[p] = i;
    }
    for (j, &p) in layout.extra_positions.iter().enumerate() {
        source[p] = is[0] + j;
    }
    let stacked = image.tape().concat(&[image, extra]);
    let fused = stacked.gather(row_gather(&source, width), &[layout.total, width]);
    Ok((fused, layout))
}

/// One extra token per image segment.
pub fn interleave<'t, T: Real>(
    image: Var<'t, T>,
    extra: Var<'t, T>,
    mode: InsertMode,
) -> Result<(Var<'t, T>, InterleaveLayout)> {
    let m = extra.shape().first().copied().unwrap_or(0);
    interleave_grouped(image, extra, m, mode)
}

/// Exact inverse of [`interleave_grouped`].
pub fn deinterleave<'t, T: Real>(
    fused: Var<'t, T>,
    layout: &InterleaveLayout,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let fs = fused.shape();
    ensure!(
        fs == [layout.total, layout.width],
        "fused tokens {fs:?} do not match layout [{}, {}]",
        layout.total,
        layout.width
    );
    let w = layout.width;
    let image = fused.gather(
        row_gather(&layout.image_positions, w),
        &[layout.image_positions.len(), w],
    );
    let extra = fused.gather(
        row_gather(&layout.extra_positions, w),
        &[layout.extra_positions.len(), w],
    );
    Ok((image, extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    /// Image token `i` has value `i + 1`, extra token `j` has value `-(j + 1)`.
    fn labelled(t: usize, m: usize, mode: InsertMode) -> Vec<f64> {
        let tape = Tape::<f64>::new();
        let image = tape.constant(&[t, 1], (1..=t).map(|v| v as f64).collect());
        let extra = tape.constant(&[m, 1], (1..=m).map(|v| -(v as f64)).collect());
        interleave(image, extra, mode).unwrap().0.value()
    }

    #[test]
    fn behind_six_plus_three() {
        assert_eq!(
            labelled(6, 3, InsertMode::Behind),
            vec![1.0, 2.0, -1.0, 3.0, 4.0, -2.0, 5.0, 6.0, -3.0]
        );
    }

    #[test]
    fn before_six_plus_three() {
        assert_eq!(
            labelled(6, 3, InsertMode::Before),
            vec![-1.0, 1.0, 2.0, -2.0, 3.0, 4.0, -3.0, 5.0, 6.0]
        );
    }

    #[test]
    fn uneven_split_puts_longer_segments_first() {
        let layout = build_layout(7, 3, 1, 1, InsertMode::Behind).unwrap();
        let sizes: Vec<usize> = layout.segments.iter().map(|s| s.1).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
        assert_eq!(layout.total, 10);
    }

    #[test]
    fn too_many_groups_behind_is_rejected() {
        assert!(build_layout(2, 3, 1, 1, InsertMode::Behind).is_err());
        assert!(build_layout(2, 3, 1, 1, InsertMode::Before).is_ok());
    }

    #[test]
    fn grouped_before_keeps_groups_contiguous() {
        let tape = Tape::<f64>::new();
        let image = tape.constant(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let extra = tape.constant(&[4, 1], vec![-1.0, -2.0, -3.0, -4.0]);
        let (fused, _) = interleave_grouped(image, extra, 2, InsertMode::Before).unwrap();
        assert_eq!(
            fused.value(),
            vec![-1.0, -2.0, 1.0, 2.0, -3.0, -4.0, 3.0, 4.0]
        );
    }

    #[test]
    fn round_trip_is_exact() {
        let tape = Tape::<f64>::new();
        let img: Vec<f64> = (0..12).map(|i| (i as f64 * 1.7).sin()).collect();
        let ext: Vec<f64> = (0..6).map(|i| (i as f64 * 0.3).cos()).collect();
        for mode in [InsertMode::Behind, InsertMode::Before] {
            let image = tape.constant(&[6, 2], img.clone());
            let extra = tape.constant(&[3, 2], ext.clone());
            let (fused, layout) = interleave(image, extra, mode).unwrap();
            let (i2, e2) = deinterleave(fused, &layout).unwrap();
            assert_eq!(i2.value(), img);
            assert_eq!(e2.value(), ext);
        }
    }
}
