//! `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected, and
//! the effective configuration (every key, defaults included) is echoed into
//! the run directory.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use sgnet_core::models::{ArchKind, ArchitectureSpec, SgmVariant};
use sgnet_core::trainer::TrainConfig;
use sgnet_core::{Error, Result};

pub const KEYS: &[&str] = &[
    "arch",
    "encoder_widths",
    "width_multiplier",
    "sgm_groups",
    "sgm_variant",
    "lr",
    "weight_decay",
    "batch_size",
    "max_epochs",
    "patience",
    "seed",
    "patch",
    "steps_per_epoch",
    "foreground_prob",
    "inference_patch",
    "overlap",
    "target_spacing",
    "p_low",
    "p_high",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: ArchKind,
    /// `None` means the architecture's default widths and multiplier.
    pub encoder_widths: Option<Vec<usize>>,
    pub width_multiplier: Option<f64>,
    pub sgm_groups: usize,
    pub sgm_variant: SgmVariant,
    pub train: TrainConfig,
    pub target_spacing: f64,
    pub p_low: f64,
    pub p_high: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let base = ArchitectureSpec::default_for(ArchKind::SgNet);
        RunConfig {
            arch: ArchKind::SgNet,
            encoder_widths: None,
            width_multiplier: None,
            sgm_groups: base.sgm_groups,
            sgm_variant: base.sgm_variant,
            train: TrainConfig::default(),
            target_spacing: 1.0,
            p_low: 0.5,
            p_high: 99.5,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for key `{key}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_dims(key: &str, v: &str) -> Result<[usize; 3]> {
    let l = parse_list(key, v)?;
    match l.as_slice() {
        [d] => Ok([*d; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Error::Config(format!("`{key}` needs 1 or 3 comma-separated sizes, got {v:?}"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "arch" => self.arch = v.parse()?,
            "encoder_widths" => self.encoder_widths = Some(parse_list(key, v)?),
            "width_multiplier" => self.width_multiplier = Some(parse(key, v)?),
            "sgm_groups" => self.sgm_groups = parse(key, v)?,
            "sgm_variant" => self.sgm_variant = v.parse()?,
            "lr" => t.lr = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "max_epochs" => t.max_epochs = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "patch" => t.patch = parse_dims(key, v)?,
            "steps_per_epoch" => t.steps_per_epoch = parse(key, v)?,
            "foreground_prob" => t.foreground_prob = parse(key, v)?,
            "inference_patch" => t.inference_patch = parse_dims(key, v)?,
            "overlap" => t.overlap = parse(key, v)?,
            "target_spacing" => self.target_spacing = parse(key, v)?,
            "p_low" => self.p_low = parse(key, v)?,
            "p_high" => self.p_high = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut c = RunConfig::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// `key=value` override, as given on the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not `key=value`")))?;
        self.set(k.trim(), v)
    }

    pub fn arch_spec(&self) -> ArchitectureSpec {
        let mut spec = match &self.encoder_widths {
            Some(w) => ArchitectureSpec::with_widths(self.arch, w),
            None => ArchitectureSpec::default_for(self.arch),
        };
        if let Some(m) = self.width_multiplier {
            spec.width_multiplier = m;
        }
        spec.sgm_groups = self.sgm_groups;
        spec.sgm_variant = self.sgm_variant;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        self.arch_spec().validate()?;
        self.train.validate()?;
        if !(self.target_spacing > 0.0 && self.target_spacing.is_finite()) {
            return Err(Error::Config(format!("target_spacing must be positive, got {}", self.target_spacing)));
        }
        if !(0.0 <= self.p_low && self.p_low < self.p_high && self.p_high <= 100.0) {
            return Err(Error::Config(format!(
                "percentiles must satisfy 0 <= p_low < p_high <= 100, got {} and {}",
                self.p_low, self.p_high
            )));
        }
        Ok(())
    }

    /// Every effective value, one `key = value` per line in [`KEYS`] order.
    pub fn echo(&self) -> String {
        let spec = self.arch_spec();
        let t = &self.train;
        let values = [
            self.arch.to_string(),
            join(&spec.encoder_widths),
            spec.width_multiplier.to_string(),
            spec.sgm_groups.to_string(),
            spec.sgm_variant.as_str().to_string(),
            t.lr.to_string(),
            t.weight_decay.to_string(),
            t.batch_size.to_string(),
            t.max_epochs.to_string(),
            t.patience.to_string(),
            t.seed.to_string(),
            join(&t.patch),
            t.steps_per_epoch.to_string(),
            t.foreground_prob.to_string(),
            join(&t.inference_patch),
            t.overlap.to_string(),
            self.target_spacing.to_string(),
            self.p_low.to_string(),
            self.p_high.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
