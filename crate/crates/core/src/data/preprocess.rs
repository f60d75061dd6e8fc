//! Reorientation, isotropic resampling and percentile intensity normalization.

use crate::error::{Error, Result};

use super::volume::{Geometry, MaskVolume, Orientation, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Source linear index for every target voxel when relabelling axes.
fn reorient_map(g: &Geometry, target: Orientation) -> (Geometry, Vec<usize>) {
    let map = g.orientation.mapping_to(&target);
    let dims = [g.dims[map[0].0], g.dims[map[1].0], g.dims[map[2].0]];
    let spacing = [g.spacing[map[0].0], g.spacing[map[1].0], g.spacing[map[2].0]];
    let out = Geometry {
        dims,
        spacing,
        orientation: target,
    };
    let mut src = Vec::with_capacity(out.voxels());
    for a in 0..dims[0] {
        for b in 0..dims[1] {
            for c in 0..dims[2] {
                let mut s = [0usize; 3];
                for (j, &o) in [a, b, c].iter().enumerate() {
                    let (i, flip) = map[j];
                    s[i] = if flip { dims[j] - 1 - o } else { o };
                }
                src.push(g.index(s[0], s[1], s[2]));
            }
        }
    }
    (out, src)
}

pub fn reorient(v: &Volume, target: Orientation) -> Volume {
    let (geometry, src) = reorient_map(&v.geometry, target);
    let mut data = Vec::with_capacity(v.data.len());
    for c in 0..v.channels {
        let ch = v.channel(c);
        data.extend(src.iter().map(|&i| ch[i]));
    }
    Volume {
        geometry,
        channels: v.channels,
        data,
    }
}

pub fn reorient_mask(m: &MaskVolume, target: Orientation) -> MaskVolume {
    let (geometry, src) = reorient_map(&m.geometry, target);
    MaskVolume {
        geometry,
        data: src.iter().map(|&i| m.data[i]).collect(),
    }
}

pub fn reorient_to_canonical(v: &Volume) -> Volume {
    reorient(v, Orientation::RAS)
}

pub fn reorient_mask_to_canonical(m: &MaskVolume) -> MaskVolume {
    reorient_mask(m, Orientation::RAS)
}

/// Output dims and, per axis, the continuous source coordinate of each output voxel centre.
fn resample_axes(g: &Geometry, target: f64) -> Result<([usize; 3], [Vec<f64>; 3])> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::Data(format!("target spacing must be positive, got {target}")));
    }
    if g.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Data(format!("spacing must be positive, got {:?}", g.spacing)));
    }
    let mut dims = [0; 3];
    let mut coords: [Vec<f64>; 3] = Default::default();
    for a in 0..3 {
        let n = ((g.dims[a] as f64 * g.spacing[a] / target).round() as usize).max(1);
        dims[a] = n;
        let ratio = target / g.spacing[a];
        let hi = (g.dims[a] - 1) as f64;
        coords[a] = (0..n)
            .map(|i| ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, hi))
            .collect();
    }
    Ok((dims, coords))
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // a + t (b - a) keeps constants exact
    a + t * (b - a)
}

fn sample_trilinear(src: &[f64], g: &Geometry, z: f64, y: f64, x: f64) -> f64 {
    let (z0, y0, x0) = (z.floor() as usize, y.floor() as usize, x.floor() as usize);
    let z1 = (z0 + 1).min(g.dims[0] - 1);
    let y1 = (y0 + 1).min(g.dims[1] - 1);
    let x1 = (x0 + 1).min(g.dims[2] - 1);
    let (tz, ty, tx) = (z - z0 as f64, y - y0 as f64, x - x0 as f64);
    let at = |a, b, c| src[g.index(a, b, c)];
    let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), tx);
    let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), tx);
    let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), tx);
    let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), tx);
    lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz)
}

pub fn resample_isotropic(v: &Volume, target: f64, mode: Interpolation) -> Result<Volume> {
    let (dims, coords) = resample_axes(&v.geometry, target)?;
    let out_g = Geometry {
        dims,
        spacing: [target; 3],
        orientation: v.geometry.orientation,
    };
    let mut data = Vec::with_capacity(v.channels * out_g.voxels());
    for c in 0..v.channels {
        let src = v.channel(c);
        for &z in &coords[0] {
            for &y in &coords[1] {
                for &x in &coords[2] {
                    data.push(match mode {
                        Interpolation::Trilinear => sample_trilinear(src, &v.geometry, z, y, x),
                        Interpolation::Nearest => {
                            src[v.geometry.index(z.round() as usize, y.round() as usize, x.round() as usize)]
                        }
                    });
                }
            }
        }
    }
    Volume::new(out_g, v.channels, data)
}

/// Nearest-neighbour resampling of a mask; values stay binary.
pub fn resample_mask(m: &MaskVolume, target: f64) -> Result<MaskVolume> {
    let (dims, coords) = resample_axes(&m.geometry, target)?;
    let out_g = Geometry {
        dims,
        spacing: [target; 3],
        orientation: m.geometry.orientation,
    };
    let mut data = Vec::with_capacity(out_g.voxels());
    for &z in &coords[0] {
        for &y in &coords[1] {
            for &x in &coords[2] {
                data.push(m.data[m.geometry.index(z.round() as usize, y.round() as usize, x.round() as usize)]);
            }
        }
    }
    Ok(MaskVolume { geometry: out_g, data })
}

/// Linear-interpolation percentile (`q` in [0, 100]) of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty set");
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per channel: clip to the `[p_low, p_high]` percentiles, then min-max scale to [0, 1].
/// A channel whose clipped range is empty maps to zeros.
pub fn normalize(v: &Volume, p_low: f64, p_high: f64) -> Volume {
    let mut out = v.clone();
    for c in 0..v.channels {
        let src = v.channel(c);
        let mut sorted = src.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let lo = percentile_sorted(&sorted, p_low);
        let hi = percentile_sorted(&sorted, p_high);
        let dst = out.channel_mut(c);
        if hi > lo {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = ((s.clamp(lo, hi) - lo) / (hi - lo)).clamp(0.0, 1.0);
            }
        } else {
            dst.fill(0.0);
        }
    }
    out
}

/// Reorient, resample to 1 mm and normalize with the default percentiles.
pub fn preprocess(v: &Volume) -> Result<Volume> {
    let canon = reorient_to_canonical(v);
    let iso = resample_isotropic(&canon, 1.0, Interpolation::Trilinear)?;
    Ok(normalize(&iso, 0.5, 99.5))
}

pub fn preprocess_mask(m: &MaskVolume) -> Result<MaskVolume> {
    resample_mask(&reorient_mask_to_canonical(m), 1.0)
}
