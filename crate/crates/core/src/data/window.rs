//! Sliding-window tiling and overlap blending.

use crate::error::{Error, Result};

pub const DEFAULT_PATCH: [usize; 3] = [96, 96, 32];
pub const DEFAULT_OVERLAP: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlidingWindowPlan {
    pub dims: [usize; 3],
    pub patch: [usize; 3],
    pub stride: [usize; 3],
    /// Window origins, axis 2 fastest.
    pub origins: Vec<[usize; 3]>,
}

fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = dim - patch;
    let mut out = vec![0];
    let mut o = 0;
    while o < last {
        o = (o + stride).min(last);
        out.push(o);
    }
    out
}

pub fn plan_windows(dims: [usize; 3], patch: [usize; 3], overlap: f64) -> Result<SlidingWindowPlan> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    for a in 0..3 {
        if patch[a] == 0 || patch[a] > dims[a] {
            return Err(Error::Config(format!(
                "patch {patch:?} does not fit volume {dims:?} (axis {a})"
            )));
        }
    }
    // round half up
    let stride = patch.map(|p| ((p as f64 * (1.0 - overlap) + 0.5).floor() as usize).max(1));
    let per_axis: Vec<Vec<usize>> = (0..3).map(|a| axis_origins(dims[a], patch[a], stride[a])).collect();
    let mut origins = Vec::new();
    for &z in &per_axis[0] {
        for &y in &per_axis[1] {
            for &x in &per_axis[2] {
                origins.push([z, y, x]);
            }
        }
    }
    Ok(SlidingWindowPlan {
        dims,
        patch,
        stride,
        origins,
    })
}

impl SlidingWindowPlan {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Copies the window at `origin` out of every channel of a channel-major grid.
    pub fn extract(&self, data: &[f64], channels: usize, origin: [usize; 3]) -> Vec<f64> {
        let [d, h, w] = self.dims;
        let [pd, ph, pw] = self.patch;
        let mut out = Vec::with_capacity(channels * pd * ph * pw);
        for c in 0..channels {
            let base = c * d * h * w;
            for z in 0..pd {
                for y in 0..ph {
                    let s = base + ((origin[0] + z) * h + origin[1] + y) * w + origin[2];
                    out.extend_from_slice(&data[s..s + pw]);
                }
            }
        }
        out
    }
}

/// Per-voxel mean of single-channel window logits.
pub fn blend(blocks: &[Vec<f64>], plan: &SlidingWindowPlan) -> Result<Vec<f64>> {
    if blocks.len() != plan.len() {
        return Err(Error::Shape(format!(
            "blend: {} logit blocks for a plan of {} windows",
            blocks.len(),
            plan.len()
        )));
    }
    let [_, h, w] = plan.dims;
    let [pd, ph, pw] = plan.patch;
    let n: usize = plan.dims.iter().product();
    // running mean: identical contributions reproduce their value exactly
    let mut mean = vec![0.0; n];
    let mut count = vec![0u32; n];
    for (block, origin) in blocks.iter().zip(&plan.origins) {
        if block.len() != pd * ph * pw {
            return Err(Error::Shape(format!(
                "blend: block holds {} values, patch {:?} needs {}",
                block.len(),
                plan.patch,
                pd * ph * pw
            )));
        }
        for z in 0..pd {
            for y in 0..ph {
                let dst = ((origin[0] + z) * h + origin[1] + y) * w + origin[2];
                let src = (z * ph + y) * pw;
                for x in 0..pw {
                    let (m, c) = (&mut mean[dst + x], &mut count[dst + x]);
                    *c += 1;
                    *m += (block[src + x] - *m) / *c as f64;
                }
            }
        }
    }
    Ok(mean)
}
