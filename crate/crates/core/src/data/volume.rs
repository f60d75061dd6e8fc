use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Three-letter axis code: letter `i` names the anatomical direction that
/// storage axis `i` increases toward. Storage axis 0 is slowest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Orientation([u8; 3]);

impl Orientation {
    pub const RAS: Orientation = Orientation(*b"RAS");

    pub fn new(code: &str) -> Result<Self> {
        code.parse()
    }

    pub fn bytes(&self) -> [u8; 3] {
        self.0
    }

    pub fn is_canonical(&self) -> bool {
        *self == Self::RAS
    }

    /// For each target axis: the source axis it comes from and whether it is flipped.
    pub(crate) fn mapping_to(&self, target: &Orientation) -> [(usize, bool); 3] {
        let mut out = [(0, false); 3];
        for (j, &t) in target.0.iter().enumerate() {
            let i = self
                .0
                .iter()
                .position(|&s| pair_of(s) == pair_of(t))
                .expect("validated codes cover every anatomical pair");
            out[j] = (i, self.0[i] != t);
        }
        out
    }
}

fn pair_of(letter: u8) -> u8 {
    match letter {
        b'R' | b'L' => 0,
        b'A' | b'P' => 1,
        b'S' | b'I' => 2,
        _ => 255,
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let b = s.as_bytes();
        if b.len() != 3 {
            return Err(Error::Data(format!("orientation code {s:?} must have 3 letters")));
        }
        let code = [b[0], b[1], b[2]];
        let mut seen = [false; 3];
        for &l in &code {
            let p = pair_of(l);
            if p == 255 || seen[p as usize] {
                return Err(Error::Data(format!(
                    "orientation code {s:?} is not a signed permutation of R/L, A/P, S/I"
                )));
            }
            seen[p as usize] = true;
        }
        Ok(Orientation(code))
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(std::str::from_utf8(&self.0).expect("ascii letters"))
    }
}

/// Geometry shared by images and masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    /// Millimetres per voxel along each storage axis.
    pub spacing: [f64; 3],
    pub orientation: Orientation,
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], orientation: Orientation) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Geometry {
            dims,
            spacing,
            orientation,
        })
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[2];
        let y = (i / self.dims[2]) % self.dims[1];
        [i / (self.dims[1] * self.dims[2]), y, x]
    }

    /// Length of the volume diagonal in millimetres.
    pub fn diagonal_mm(&self) -> f64 {
        self.dims
            .iter()
            .zip(&self.spacing)
            .map(|(&d, &s)| (d as f64 * s).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Multi-channel image; channel-major, then axis 0, 1, 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub geometry: Geometry,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(geometry: Geometry, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * geometry.voxels() {
            return Err(Error::Data(format!(
                "volume data holds {} values, geometry {:?} x {channels} channels needs {}",
                data.len(),
                geometry.dims,
                channels * geometry.voxels()
            )));
        }
        Ok(Volume {
            geometry,
            channels,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.geometry.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.geometry.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Binary label grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub geometry: Geometry,
    pub data: Vec<u8>,
}

impl MaskVolume {
    pub fn new(geometry: Geometry, data: Vec<u8>) -> Result<Self> {
        if data.len() != geometry.voxels() {
            return Err(Error::Data(format!(
                "mask holds {} values, geometry {:?} needs {}",
                data.len(),
                geometry.dims,
                geometry.voxels()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("mask value {v} is not binary")));
        }
        Ok(MaskVolume { geometry, data })
    }

    pub fn empty(geometry: Geometry) -> Self {
        MaskVolume {
            data: vec![0; geometry.voxels()],
            geometry,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.geometry.index(z, y, x)] == 1
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, on: bool) {
        let i = self.geometry.index(z, y, x);
        self.data[i] = on as u8;
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.geometry.voxels() as f64
    }
}
