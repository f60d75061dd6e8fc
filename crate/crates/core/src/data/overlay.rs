//! Binary PPM slice overlays: grayscale image, ground-truth contour in green,
//! prediction contour in red, coincident contour pixels in yellow.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::volume::{MaskVolume, Volume};

pub const GT_COLOR: [u8; 3] = [0, 255, 0];
pub const PRED_COLOR: [u8; 3] = [255, 0, 0];
pub const BOTH_COLOR: [u8; 3] = [255, 255, 0];

/// A 2-D slice as (rows, cols, voxel linear indices, row-major).
fn slice_indices(dims: [usize; 3], axis: usize, k: usize) -> Result<(usize, usize, Vec<usize>)> {
    if axis > 2 {
        return Err(Error::Config(format!("slice axis must be 0, 1 or 2, got {axis}")));
    }
    if k >= dims[axis] {
        return Err(Error::Config(format!(
            "slice {k} out of range for axis {axis} of length {}",
            dims[axis]
        )));
    }
    let (ra, ca) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut idx = Vec::with_capacity(dims[ra] * dims[ca]);
    for r in 0..dims[ra] {
        for c in 0..dims[ca] {
            let mut p = [0; 3];
            p[axis] = k;
            p[ra] = r;
            p[ca] = c;
            idx.push((p[0] * dims[1] + p[1]) * dims[2] + p[2]);
        }
    }
    Ok((dims[ra], dims[ca], idx))
}

/// In-slice contour: foreground pixels with a background 4-neighbour (edges count as background).
fn contour(mask: &MaskVolume, rows: usize, cols: usize, idx: &[usize]) -> Vec<bool> {
    let on = |r: usize, c: usize| mask.data[idx[r * cols + c]] == 1;
    let mut out = vec![false; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            if !on(r, c) {
                continue;
            }
            out[r * cols + c] = r == 0
                || c == 0
                || r + 1 == rows
                || c + 1 == cols
                || !on(r - 1, c)
                || !on(r + 1, c)
                || !on(r, c - 1)
                || !on(r, c + 1);
        }
    }
    out
}

/// Renders the slice of channel 0 (clamped to [0, 1]) as a P6 pixmap.
pub fn render_overlay(volume: &Volume, gt: &MaskVolume, pred: &MaskVolume, axis: usize, k: usize) -> Result<Vec<u8>> {
    if gt.geometry != volume.geometry || pred.geometry != volume.geometry {
        return Err(Error::Shape("overlay: mask geometry differs from the image".into()));
    }
    let (rows, cols, idx) = slice_indices(volume.dims(), axis, k)?;
    let img = volume.channel(0);
    let g = contour(gt, rows, cols, &idx);
    let p = contour(pred, rows, cols, &idx);
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    for (i, &vi) in idx.iter().enumerate() {
        let px = match (g[i], p[i]) {
            (true, true) => BOTH_COLOR,
            (true, false) => GT_COLOR,
            (false, true) => PRED_COLOR,
            (false, false) => [(img[vi].clamp(0.0, 1.0) * 255.0).round() as u8; 3],
        };
        out.extend_from_slice(&px);
    }
    Ok(out)
}

pub fn export_overlay(
    volume: &Volume,
    gt: &MaskVolume,
    pred: &MaskVolume,
    axis: usize,
    k: usize,
    path: &Path,
) -> Result<()> {
    fs::write(path, render_overlay(volume, gt, pred, axis, k)?).map_err(|e| Error::io(path, e))
}
