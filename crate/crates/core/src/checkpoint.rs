//! Model checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "SGCK" | u32 version
//! u32 len | spec text (UTF-8 `key=value` lines)
//! u32 parameter count
//! per parameter:
//!   u32 len | name | u8 trainable | u32 rank | rank x u64 dims | f64 values
//! ```
//!
//! Running batch-norm statistics are stored as non-trainable parameters, so a
//! checkpoint fully determines inference.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::models::{ArchKind, ArchitectureSpec, Model, SgmVariant};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SGCK";
pub const VERSION: u32 = 1;

pub fn spec_to_text(spec: &ArchitectureSpec) -> String {
    let widths: Vec<String> = spec.encoder_widths.iter().map(|w| w.to_string()).collect();
    format!(
        "arch={}\nin_channels={}\nout_channels={}\nencoder_widths={}\nsgm_groups={}\nsgm_variant={}\nwidth_multiplier={}\n",
        spec.kind,
        spec.in_channels,
        spec.out_channels,
        widths.join(","),
        spec.sgm_groups,
        spec.sgm_variant.as_str(),
        spec.width_multiplier
    )
}

pub fn spec_from_text(text: &str) -> Result<ArchitectureSpec> {
    let mut spec = ArchitectureSpec::default_for(ArchKind::SgNet);
    let mut seen_arch = false;
    let bad = |k: &str, v: &str| FormatError::Malformed(format!("checkpoint spec: bad value {v:?} for {k}"));
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FormatError::Malformed(format!("checkpoint spec line {line:?}")))?;
        match k {
            "arch" => {
                spec.kind = v.parse::<ArchKind>().map_err(|_| bad(k, v))?;
                seen_arch = true;
            }
            "in_channels" => spec.in_channels = v.parse().map_err(|_| bad(k, v))?,
            "out_channels" => spec.out_channels = v.parse().map_err(|_| bad(k, v))?,
            "encoder_widths" => {
                spec.encoder_widths = v
                    .split(',')
                    .map(|w| w.parse().map_err(|_| bad(k, v)))
                    .collect::<std::result::Result<_, _>>()?
            }
            "sgm_groups" => spec.sgm_groups = v.parse().map_err(|_| bad(k, v))?,
            "sgm_variant" => spec.sgm_variant = v.parse::<SgmVariant>().map_err(|_| bad(k, v))?,
            "width_multiplier" => spec.width_multiplier = v.parse().map_err(|_| bad(k, v))?,
            other => return Err(FormatError::Malformed(format!("checkpoint spec: unknown key {other:?}")).into()),
        }
    }
    if !seen_arch {
        return Err(FormatError::Malformed("checkpoint spec has no arch".into()).into());
    }
    Ok(spec)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let spec = spec_to_text(model.spec());
    put_u32(&mut out, spec.len());
    out.extend_from_slice(spec.as_bytes());
    put_u32(&mut out, model.params.len());
    for p in model.params.iter() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.trainable as u8);
        put_u32(&mut out, p.value.shape().len());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or(FormatError::Truncated {
            needed: self.pos.saturating_add(n),
            available: self.b.len(),
        })?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> std::result::Result<usize, FormatError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| FormatError::Malformed(format!("dimension {v} too large")))
    }

    fn string(&mut self) -> std::result::Result<String, FormatError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FormatError::Malformed("non-UTF-8 string".into()))
    }
}

pub fn decode(b: &[u8]) -> Result<Model> {
    let mut r = Reader { b, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic { expected: MAGIC, found: magic }.into());
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    let spec = spec_from_text(&r.string()?)?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let trainable = match r.take(1)?[0] {
            0 => false,
            1 => true,
            t => return Err(FormatError::Malformed(format!("trainable flag {t}")).into()),
        };
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| FormatError::Malformed("parameter size overflows".into()))?;
        let data = r.take(n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        store.add(name, Tensor::from_vec(&shape, data)?, trainable)?;
    }
    if r.pos != b.len() {
        return Err(FormatError::PayloadSize {
            expected: r.pos,
            found: b.len(),
        }
        .into());
    }
    Model::from_parts(spec, store)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
