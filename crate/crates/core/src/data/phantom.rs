//! Seeded two-channel lesion phantoms with extreme class imbalance.
//!
//! Channel 0 mimics a contrast-enhanced T1 scan: a textured brain ellipsoid
//! (0.3 ± texture) with bright lesions, either solid (0.9) or rim-enhancing
//! (0.9 interior, 1.0 shell). Channel 1 mimics FLAIR: the lesion dilated by two
//! voxels shows up as a 0.55 halo. Both channels get a smooth multiplicative
//! bias field and additive Gaussian noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::dilate;

use super::volume::{Geometry, MaskVolume, Orientation, Volume};

pub const BACKGROUND: f64 = 0.3;
pub const CORE: f64 = 0.9;
pub const RIM: f64 = 1.0;
pub const HALO: f64 = 0.55;
const TEXTURE: f64 = 0.05;
const HALO_RADIUS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Brain ellipsoid semi-axes as fractions of the half-extent per axis.
    pub brain_semi_axes: [f64; 3],
    pub lesion_count: (usize, usize),
    /// Lesion radius range in voxels.
    pub lesion_radius: (f64, f64),
    pub target_fraction: f64,
    /// Accepted foreground fraction is `target_fraction ± band`.
    pub band: f64,
    pub noise_sd: f64,
    pub bias_amplitude: f64,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            brain_semi_axes: [0.85, 0.8, 0.75],
            lesion_count: (1, 5),
            lesion_radius: (2.0, 8.0),
            target_fraction: 0.0128,
            band: 0.006,
            noise_sd: 0.03,
            bias_amplitude: 0.1,
            max_retries: 1000,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn with_dims(dims: [usize; 3], seed: u64) -> Self {
        PhantomSpec {
            dims,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dims.iter().any(|&d| d < 4) {
            return bad(format!("phantom dims {:?} must be at least 4 per axis", self.dims));
        }
        if self.brain_semi_axes.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return bad(format!("brain semi-axes {:?} must lie in (0, 1]", self.brain_semi_axes));
        }
        let (lo, hi) = self.lesion_count;
        if lo == 0 || lo > hi {
            return bad(format!("lesion count range {lo}..={hi} is empty or zero"));
        }
        let (rlo, rhi) = self.lesion_radius;
        if !(rlo > 0.0 && rlo <= rhi) {
            return bad(format!("lesion radius range {rlo}..={rhi} is invalid"));
        }
        if !(self.target_fraction > 0.0 && self.target_fraction < 1.0) || !(self.band >= 0.0) {
            return bad("target fraction must lie in (0, 1) with a non-negative band".into());
        }
        if !(self.noise_sd >= 0.0) || !(self.bias_amplitude >= 0.0 && self.bias_amplitude < 1.0) {
            return bad("noise SD must be >= 0 and bias amplitude in [0, 1)".into());
        }
        Ok(())
    }

    fn band(&self) -> (f64, f64) {
        (self.target_fraction - self.band, self.target_fraction + self.band)
    }
}

struct Lesion {
    centre: [f64; 3],
    semi: [f64; 3],
    rim: bool,
}

impl Lesion {
    /// Normalized ellipsoidal radius of a voxel centre.
    fn rho(&self, p: [usize; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] as f64 - self.centre[a]) / self.semi[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn brain_mask(spec: &PhantomSpec, g: &Geometry) -> Vec<bool> {
    let half = spec.dims.map(|d| (d as f64 - 1.0) / 2.0);
    let semi: Vec<f64> = (0..3).map(|a| spec.brain_semi_axes[a] * spec.dims[a] as f64 / 2.0).collect();
    (0..g.voxels())
        .map(|i| {
            let c = g.coords(i);
            (0..3).map(|a| ((c[a] as f64 - half[a]) / semi[a]).powi(2)).sum::<f64>() <= 1.0
        })
        .collect()
}

/// One placement attempt; lesion voxels are clipped to the brain.
fn place_lesions(spec: &PhantomSpec, g: &Geometry, brain: &[bool], rng: &mut ChaCha8Rng) -> (Vec<Lesion>, Vec<u8>) {
    let n = rng.gen_range(spec.lesion_count.0..=spec.lesion_count.1);
    let brain_idx: Vec<usize> = (0..brain.len()).filter(|&i| brain[i]).collect();
    let mut lesions = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.gen_range(spec.lesion_radius.0..=spec.lesion_radius.1);
        let semi = [0; 3].map(|_: i32| r * rng.gen_range(0.8..1.2));
        let c = g.coords(brain_idx[rng.gen_range(0..brain_idx.len())]);
        lesions.push(Lesion {
            centre: c.map(|v| v as f64),
            semi,
            rim: rng.gen_bool(0.5),
        });
    }
    let mut mask = vec![0u8; g.voxels()];
    for l in &lesions {
        let lo: Vec<usize> = (0..3).map(|a| (l.centre[a] - l.semi[a]).floor().max(0.0) as usize).collect();
        let hi: Vec<usize> = (0..3)
            .map(|a| ((l.centre[a] + l.semi[a]).ceil() as usize).min(g.dims[a] - 1))
            .collect();
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    let i = g.index(z, y, x);
                    if brain[i] && l.rho([z, y, x]) <= 1.0 {
                        mask[i] = 1;
                    }
                }
            }
        }
    }
    (lesions, mask)
}

/// Smooth field `1 + amp * mean of three random low-frequency cosines`.
fn bias_field(spec: &PhantomSpec, g: &Geometry, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let k = [0; 3].map(|_: i32| rng.gen_range(0.5..1.5) * PI / spec.dims[0].max(1) as f64);
            (k, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    (0..g.voxels())
        .map(|i| {
            let c = g.coords(i).map(|v| v as f64);
            let s: f64 = waves
                .iter()
                .map(|(k, ph)| (k[0] * c[0] + k[1] * c[1] + k[2] * c[2] + ph).cos())
                .sum();
            1.0 + spec.bias_amplitude * s / waves.len() as f64
        })
        .collect()
}

fn texture(g: &Geometry, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let f = [0; 3].map(|_: i32| rng.gen_range(0.2..0.5));
    let ph = [0; 3].map(|_: i32| rng.gen_range(0.0..2.0 * PI));
    (0..g.voxels())
        .map(|i| {
            let c = g.coords(i).map(|v| v as f64);
            TEXTURE * ((f[0] * c[0] + ph[0]).sin() * (f[1] * c[1] + ph[1]).sin() + (f[2] * c[2] + ph[2]).sin()) / 2.0
        })
        .collect()
}

/// Generates a canonical 1 mm phantom and its exact lesion mask.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, MaskVolume)> {
    spec.validate()?;
    let g = Geometry::new(spec.dims, [1.0; 3], Orientation::RAS)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let brain = brain_mask(spec, &g);
    let (lo, hi) = spec.band();

    let mut placed = None;
    for _ in 0..spec.max_retries {
        let (lesions, mask) = place_lesions(spec, &g, &brain, &mut rng);
        let frac = mask.iter().filter(|&&v| v == 1).count() as f64 / g.voxels() as f64;
        if frac >= lo && frac <= hi {
            placed = Some((lesions, mask));
            break;
        }
    }
    let (lesions, mask) = placed.ok_or_else(|| {
        Error::Infeasible(format!(
            "no lesion layout within foreground band [{lo}, {hi}] for dims {:?} after {} attempts",
            spec.dims, spec.max_retries
        ))
    })?;
    let mask = MaskVolume::new(g, mask)?;
    let halo = dilate(&mask, HALO_RADIUS);

    let tex = texture(&g, &mut rng);
    let bias = bias_field(spec, &g, &mut rng);
    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE)).expect("valid SD");
    let n = g.voxels();
    let mut data = vec![0.0; 2 * n];
    for i in 0..n {
        if !brain[i] {
            continue;
        }
        let base = BACKGROUND + tex[i];
        let mut t1 = base;
        if mask.data[i] == 1 {
            let c = g.coords(i);
            // owning lesion: the one whose normalized radius is smallest
            let l = lesions
                .iter()
                .min_by(|a, b| a.rho(c).total_cmp(&b.rho(c)))
                .expect("a foreground voxel implies a lesion");
            t1 = if l.rim && l.rho(c) > 0.7 { RIM } else { CORE };
        }
        data[i] = t1;
        data[n + i] = if halo.data[i] == 1 { HALO } else { base };
    }
    for c in 0..2 {
        for i in 0..n {
            let v = &mut data[c * n + i];
            *v *= bias[i];
            if spec.noise_sd > 0.0 {
                *v += noise.sample(&mut rng);
            }
        }
    }
    Ok((Volume::new(g, 2, data)?, mask))
}

/// The brain ellipsoid used for a spec, as a mask.
pub fn brain_region(spec: &PhantomSpec) -> Result<MaskVolume> {
    let g = Geometry::new(spec.dims, [1.0; 3], Orientation::RAS)?;
    MaskVolume::new(g, brain_mask(spec, &g).into_iter().map(u8::from).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::io::{encode_mask, encode_volume};

    #[test]
    fn deterministic_in_seed() {
        let spec = PhantomSpec::with_dims([32, 32, 32], 7);
        let (v1, m1) = generate_phantom(&spec).unwrap();
        let (v2, m2) = generate_phantom(&spec).unwrap();
        assert_eq!(encode_volume(&v1), encode_volume(&v2));
        assert_eq!(encode_mask(&m1), encode_mask(&m2));
        let (v3, _) = generate_phantom(&PhantomSpec::with_dims([32, 32, 32], 8)).unwrap();
        assert_ne!(v1, v3);
    }

    #[test]
    fn default_fraction_and_containment() {
        for seed in 0..3 {
            let spec = PhantomSpec { seed, ..Default::default() };
            let (v, m) = generate_phantom(&spec).unwrap();
            assert_eq!(v.channels, 2);
            let f = m.fraction();
            assert!((0.005..=0.02).contains(&f), "fraction {f}");
            let brain = brain_region(&spec).unwrap();
            assert!(m.data.iter().zip(&brain.data).all(|(&l, &b)| l <= b));
        }
    }

    #[test]
    fn lesions_are_brighter() {
        let (v, m) = generate_phantom(&PhantomSpec::with_dims([40, 40, 40], 3)).unwrap();
        let mean = |ch: &[f64], want: u8| {
            let sel: Vec<f64> = ch.iter().zip(&m.data).filter(|(_, &l)| l == want).map(|(&x, _)| x).collect();
            sel.iter().sum::<f64>() / sel.len() as f64
        };
        assert!(mean(v.channel(0), 1) > mean(v.channel(0), 0) + 0.4);
        assert!(mean(v.channel(1), 1) > mean(v.channel(1), 0) + 0.2);
    }

    #[test]
    fn infeasible_spec_is_reported() {
        let spec = PhantomSpec {
            dims: [8, 8, 8],
            lesion_radius: (1.0, 1.0),
            target_fraction: 0.5,
            band: 0.01,
            max_retries: 20,
            ..Default::default()
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::Infeasible(_))));
    }
}
