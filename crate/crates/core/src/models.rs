//! Network builders and forward passes.
//!
//! All four kinds share one encoder/decoder skeleton: per level two
//! `conv3x3 -> BN -> ReLU` stages, 2x max pooling on the way down, kernel-2
//! stride-2 transposed convolution on the way up, skip concatenation
//! `[skip, upsampled]`, and a final 1x1x1 convolution to logits. The kinds
//! differ only in what happens on the skip path or around each block:
//!
//! * `sgnet`: a spatial gating module on every skip path
//! * `attunet`: an additive attention gate on every skip, gated by the upsampled decoder feature
//! * `resunet`: a shortcut (1x1x1 projection when channels change) added to every block
//! * `unet`: nothing

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchStats, BnMode, Graph, Var, BN_MOMENTUM};
use crate::objective::{hybrid_loss_with_grad, LossValue};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArchKind {
    SgNet,
    UNet,
    AttUNet,
    ResUNet,
}

impl ArchKind {
    pub const ALL: [ArchKind; 4] = [ArchKind::SgNet, ArchKind::UNet, ArchKind::ResUNet, ArchKind::AttUNet];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchKind::SgNet => "sgnet",
            ArchKind::UNet => "unet",
            ArchKind::AttUNet => "attunet",
            ArchKind::ResUNet => "resunet",
        }
    }

    /// Width multiplier applied to the shared default widths.
    ///
    /// Interpretation chosen so the default parameter counts order as
    /// sgnet < unet < resunet < attunet.
    pub fn default_width_multiplier(self) -> f64 {
        match self {
            ArchKind::SgNet => 0.75,
            ArchKind::UNet => 1.0,
            ArchKind::ResUNet => 1.5,
            ArchKind::AttUNet => 1.75,
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgnet" => Ok(ArchKind::SgNet),
            "unet" => Ok(ArchKind::UNet),
            "attunet" => Ok(ArchKind::AttUNet),
            "resunet" => Ok(ArchKind::ResUNet),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected sgnet, unet, attunet or resunet)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgmVariant {
    /// Per-group channel gate `sigmoid(W · GAP(x_g) + b)`.
    Literal,
    /// Per-group voxel gate from the standardized similarity to the group's
    /// pooled descriptor.
    Spatial,
}

impl SgmVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            SgmVariant::Literal => "literal",
            SgmVariant::Spatial => "spatial",
        }
    }
}

impl FromStr for SgmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(SgmVariant::Literal),
            "spatial" => Ok(SgmVariant::Spatial),
            other => Err(Error::Config(format!(
                "unknown sgm variant {other:?} (expected literal or spatial)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub encoder_widths: Vec<usize>,
    pub sgm_groups: usize,
    pub sgm_variant: SgmVariant,
    pub width_multiplier: f64,
}

pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 128];

impl ArchitectureSpec {
    /// Default configuration of `kind`, including its width multiplier.
    pub fn default_for(kind: ArchKind) -> Self {
        ArchitectureSpec {
            kind,
            in_channels: 2,
            out_channels: 1,
            encoder_widths: DEFAULT_WIDTHS.to_vec(),
            sgm_groups: 8,
            sgm_variant: SgmVariant::Literal,
            width_multiplier: kind.default_width_multiplier(),
        }
    }

    /// Explicit widths with no multiplier.
    pub fn with_widths(kind: ArchKind, widths: &[usize]) -> Self {
        ArchitectureSpec {
            encoder_widths: widths.to_vec(),
            width_multiplier: 1.0,
            ..Self::default_for(kind)
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder_widths.len()
    }

    /// Widths after the multiplier, rounded half-up to a multiple of 2
    /// (and of the group count for sgnet).
    pub fn effective_widths(&self) -> Vec<usize> {
        if self.width_multiplier == 1.0 {
            return self.encoder_widths.clone();
        }
        let q = if self.kind == ArchKind::SgNet {
            lcm(2, self.sgm_groups.max(1))
        } else {
            2
        };
        self.encoder_widths
            .iter()
            .map(|&w| {
                let units = (w as f64 * self.width_multiplier / q as f64 + 0.5).floor() as usize;
                units.max(1) * q
            })
            .collect()
    }

    /// Spatial dims must be multiples of this.
    pub fn required_divisor(&self) -> usize {
        1 << (self.depth().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() {
            return Err(Error::Config("encoder_widths must not be empty".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("in_channels and out_channels must be positive".into()));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Config(format!(
                "width_multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        let widths = self.effective_widths();
        if widths[0] == 0 || widths.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Config(format!(
                "encoder widths must be positive and strictly increasing, got {widths:?}"
            )));
        }
        if self.kind == ArchKind::SgNet {
            if self.sgm_groups == 0 {
                return Err(Error::Config("sgm_groups must be positive".into()));
            }
            if let Some(w) = widths.iter().find(|&&w| w % self.sgm_groups != 0) {
                return Err(Error::Config(format!(
                    "sgnet width {w} is not divisible by sgm_groups = {}",
                    self.sgm_groups
                )));
            }
        }
        Ok(())
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-group gate parameters of one spatial gating module.
#[derive(Debug, Clone, PartialEq)]
pub enum GateParams {
    /// `weight (c/G, c/G)`, `bias (c/G)`.
    Literal { weight: Tensor, bias: Tensor },
    /// Scalar `gamma`, `beta` stored as `[1]` tensors.
    Spatial { gamma: Tensor, beta: Tensor },
}

/// The spatial gating module's parameters, one entry per channel group.
#[derive(Debug, Clone, PartialEq)]
pub struct SgmState {
    pub groups: Vec<GateParams>,
}

impl SgmState {
    pub fn variant(&self) -> Option<SgmVariant> {
        self.groups.first().map(|g| match g {
            GateParams::Literal { .. } => SgmVariant::Literal,
            GateParams::Spatial { .. } => SgmVariant::Spatial,
        })
    }
}

enum GateVars {
    Literal { w: Var, b: Var },
    Spatial { gamma: Var, beta: Var },
}

/// Applies the gating module to `x` given per-group parameter nodes.
fn sgm_graph(g: &mut Graph, x: Var, gates: &[GateVars]) -> Result<Var> {
    let parts = g.split_groups(x, gates.len())?;
    let mut out = Vec::with_capacity(parts.len());
    for (xg, gate) in parts.into_iter().zip(gates) {
        let refined = match gate {
            GateVars::Literal { w, b } => {
                let z = g.global_avg_pool(xg)?;
                let pre = g.dense(z, *w, *b)?;
                let a = g.sigmoid(pre)?;
                g.mul(xg, a)?
            }
            GateVars::Spatial { gamma, beta } => {
                let desc = g.global_avg_pool(xg)?;
                let weighted = g.mul(xg, desc)?;
                let sim = g.sum_channels(weighted)?;
                let std = g.standardize_spatial(sim)?;
                let pre = g.channel_affine(std, *gamma, *beta)?;
                let a = g.sigmoid(pre)?;
                g.mul(xg, a)?
            }
        };
        out.push(refined);
    }
    g.concat_channels(&out)
}

/// Records the gating module on a graph with its parameters as inputs.
/// Returns the output node and, per group, the parameter nodes in order.
pub fn sgm_forward_graph(g: &mut Graph, x: Var, state: &SgmState) -> Result<(Var, Vec<(Var, Var)>)> {
    let c = g.value(x).dims5()?[1];
    let groups = state.groups.len();
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape(format!(
            "spatial gating: {c} channels not divisible into {groups} groups"
        )));
    }
    let mut vars = Vec::with_capacity(groups);
    let gates: Vec<GateVars> = state
        .groups
        .iter()
        .map(|p| match p {
            GateParams::Literal { weight, bias } => {
                let (w, b) = (g.input(weight.clone()), g.input(bias.clone()));
                vars.push((w, b));
                GateVars::Literal { w, b }
            }
            GateParams::Spatial { gamma, beta } => {
                let (gm, bt) = (g.input(gamma.clone()), g.input(beta.clone()));
                vars.push((gm, bt));
                GateVars::Spatial { gamma: gm, beta: bt }
            }
        })
        .collect();
    Ok((sgm_graph(g, x, &gates)?, vars))
}

/// Forward pass of the gating module on a plain tensor.
pub fn sgm_forward(x: &Tensor, state: &SgmState) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let (y, _) = sgm_forward_graph(&mut g, xv, state)?;
    Ok(g.value(y).clone())
}

/// A built network: topology, parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ArchitectureSpec,
    widths: Vec<usize>,
    pub params: ParamStore,
    mode: Mode,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<()> {
        let std = (2.0 / fan_in as f64).sqrt();
        let t = Tensor::randn(shape, std, self.rng);
        self.store.add(name, t, true)?;
        Ok(())
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> Result<()> {
        self.store.add(name, Tensor::zeros(shape), true)?;
        Ok(())
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        self.he(format!("{prefix}.weight"), &[cout, cin, k, k, k], cin * k * k * k)?;
        self.zeros(format!("{prefix}.bias"), &[cout])
    }

    fn bn(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.store.add(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0), true)?;
        self.store.add(format!("{prefix}.beta"), Tensor::zeros(&[c]), true)?;
        self.store.add(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), false)?;
        self.store.add(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0), false)?;
        Ok(())
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize, residual: bool) -> Result<()> {
        self.conv(&format!("{prefix}.conv1"), cin, cout, 3)?;
        self.bn(&format!("{prefix}.bn1"), cout)?;
        self.conv(&format!("{prefix}.conv2"), cout, cout, 3)?;
        self.bn(&format!("{prefix}.bn2"), cout)?;
        if residual && cin != cout {
            self.conv(&format!("{prefix}.proj"), cin, cout, 1)?;
        }
        Ok(())
    }
}

impl Model {
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let widths = spec.effective_widths();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let residual = spec.kind == ArchKind::ResUNet;
        let mut cin = spec.in_channels;
        for (i, &w) in widths.iter().enumerate() {
            b.block(&format!("enc{i}"), cin, w, residual)?;
            cin = w;
        }
        for l in (0..widths.len() - 1).rev() {
            let (lo, hi) = (widths[l], widths[l + 1]);
            b.he(format!("up{l}.weight"), &[hi, lo, 2, 2, 2], hi)?;
            b.zeros(format!("up{l}.bias"), &[lo])?;
            match spec.kind {
                ArchKind::SgNet => {
                    let cg = lo / spec.sgm_groups;
                    for k in 0..spec.sgm_groups {
                        let p = format!("skip{l}.sgm.g{k}");
                        match spec.sgm_variant {
                            SgmVariant::Literal => {
                                b.he(format!("{p}.weight"), &[cg, cg], cg)?;
                                b.zeros(format!("{p}.bias"), &[cg])?;
                            }
                            SgmVariant::Spatial => {
                                b.store.add(format!("{p}.gamma"), Tensor::full(&[1], 1.0), true)?;
                                b.zeros(format!("{p}.beta"), &[1])?;
                            }
                        }
                    }
                }
                ArchKind::AttUNet => {
                    let inter = (lo / 2).max(1);
                    b.conv(&format!("skip{l}.att.wx"), lo, inter, 1)?;
                    b.conv(&format!("skip{l}.att.wg"), lo, inter, 1)?;
                    b.conv(&format!("skip{l}.att.psi"), inter, 1, 1)?;
                }
                ArchKind::UNet | ArchKind::ResUNet => {}
            }
            b.block(&format!("dec{l}"), 2 * lo, lo, residual)?;
        }
        b.conv("head", widths[0], spec.out_channels, 1)?;
        Ok(Model {
            spec: spec.clone(),
            widths,
            params: b.store,
            mode: Mode::Train,
        })
    }

    /// Reassembles a model from stored parameters (checkpoint loading).
    pub fn from_parts(spec: ArchitectureSpec, params: ParamStore) -> Result<Model> {
        let template = Model::build(&spec, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Config(format!(
                "parameter set has {} entries, architecture expects {}",
                params.len(),
                template.params.len()
            )));
        }
        for (a, b) in template.params.iter().zip(params.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() || a.trainable != b.trainable {
                return Err(Error::Config(format!(
                    "parameter {} ({:?}) does not match architecture entry {} ({:?})",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        Ok(Model {
            widths: spec.effective_widths(),
            spec,
            params,
            mode: Mode::Eval,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn zero_grad(&mut self) {
        self.params.zero_grad();
    }

    fn id(&self, name: &str) -> Result<ParamId> {
        self.params
            .id_of(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, d, h, w] = match shape {
            &[n, c, d, h, w] => [n, c, d, h, w],
            s => return Err(Error::Shape(format!("model input must be rank 5, got {s:?}"))),
        };
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels (axis 1), got {c}",
                self.spec.in_channels
            )));
        }
        let div = self.spec.required_divisor();
        for (axis, &s) in [d, h, w].iter().enumerate() {
            if s == 0 || s % div != 0 {
                return Err(Error::Shape(format!(
                    "spatial axis {} has size {s}; must be a positive multiple of {div}",
                    axis + 2
                )));
            }
        }
        Ok(())
    }

    /// Records the full forward pass on `g`. Training-mode batch statistics
    /// are returned for [`Model::apply_bn_updates`].
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<BnUpdate>)> {
        self.check_input(g.value(x).shape())?;
        let mut f = Fwd {
            model: self,
            g,
            updates: Vec::new(),
        };
        let logits = f.run(x)?;
        Ok((logits, f.updates))
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let m = &mut self.params.get_mut(u.mean).value;
            for (r, b) in m.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            let v = &mut self.params.get_mut(u.var).value;
            for (r, b) in v.data_mut().iter_mut().zip(&u.stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    /// Forward pass returning logits. In training mode the running
    /// statistics are updated.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let (y, updates) = self.forward_graph(&mut g, xv)?;
        self.apply_bn_updates(&updates);
        Ok(g.value(y).clone())
    }

    /// Forward pass that never touches running statistics.
    pub fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let (y, _) = self.forward_graph(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    /// Forward, hybrid loss and backward; gradients are accumulated into
    /// the parameter store.
    pub fn loss_and_backward(&mut self, x: &Tensor, target: &Tensor) -> Result<LossValue> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let (y, updates) = self.forward_graph(&mut g, xv)?;
        let (loss, seed) = hybrid_loss_with_grad(g.value(y), target)?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss:?}")));
        }
        let grads = g.backward(y, seed)?;
        g.accumulate_into(&grads, &mut self.params);
        self.apply_bn_updates(&updates);
        Ok(loss)
    }

    /// Gating-module parameters of skip level `level` (sgnet only).
    pub fn sgm_state(&self, level: usize) -> Option<SgmState> {
        if self.spec.kind != ArchKind::SgNet {
            return None;
        }
        let groups = (0..self.spec.sgm_groups)
            .map(|k| {
                let p = format!("skip{level}.sgm.g{k}");
                match self.spec.sgm_variant {
                    SgmVariant::Literal => Some(GateParams::Literal {
                        weight: self.params.by_name(&format!("{p}.weight"))?.value.clone(),
                        bias: self.params.by_name(&format!("{p}.bias"))?.value.clone(),
                    }),
                    SgmVariant::Spatial => Some(GateParams::Spatial {
                        gamma: self.params.by_name(&format!("{p}.gamma"))?.value.clone(),
                        beta: self.params.by_name(&format!("{p}.beta"))?.value.clone(),
                    }),
                }
            })
            .collect::<Option<Vec<_>>>()?;
        Some(SgmState { groups })
    }
}

/// Running-stat update produced by one training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats,
}

struct Fwd<'a, 'g> {
    model: &'a Model,
    g: &'g mut Graph,
    updates: Vec<BnUpdate>,
}

impl Fwd<'_, '_> {
    fn p(&mut self, name: &str) -> Result<Var> {
        let id = self.model.id(name)?;
        Ok(self.g.param(&self.model.params, id))
    }

    fn conv(&mut self, x: Var, prefix: &str, padding: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.g.conv3d(x, w, b, 1, padding)
    }

    fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let mean_id = self.model.id(&format!("{prefix}.running_mean"))?;
        let var_id = self.model.id(&format!("{prefix}.running_var"))?;
        match self.model.mode {
            Mode::Train => {
                let (y, stats) = self.g.batchnorm3d(x, gamma, beta, BnMode::Train)?;
                if let Some(stats) = stats {
                    self.updates.push(BnUpdate {
                        mean: mean_id,
                        var: var_id,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let params = &self.model.params;
                let mode = BnMode::Eval {
                    mean: params.value(mean_id).data(),
                    var: params.value(var_id).data(),
                };
                Ok(self.g.batchnorm3d(x, gamma, beta, mode)?.0)
            }
        }
    }

    fn block(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let mut h = self.conv(x, &format!("{prefix}.conv1"), 1)?;
        h = self.bn(h, &format!("{prefix}.bn1"))?;
        h = self.g.relu(h)?;
        h = self.conv(h, &format!("{prefix}.conv2"), 1)?;
        h = self.bn(h, &format!("{prefix}.bn2"))?;
        h = self.g.relu(h)?;
        if self.model.spec.kind == ArchKind::ResUNet {
            let shortcut = if self.model.params.id_of(&format!("{prefix}.proj.weight")).is_some() {
                self.conv(x, &format!("{prefix}.proj"), 0)?
            } else {
                x
            };
            h = self.g.add(h, shortcut)?;
        }
        Ok(h)
    }

    fn skip(&mut self, level: usize, skip: Var, gating: Var) -> Result<Var> {
        match self.model.spec.kind {
            ArchKind::SgNet => {
                let mut gates = Vec::with_capacity(self.model.spec.sgm_groups);
                for k in 0..self.model.spec.sgm_groups {
                    let p = format!("skip{level}.sgm.g{k}");
                    gates.push(match self.model.spec.sgm_variant {
                        SgmVariant::Literal => GateVars::Literal {
                            w: self.p(&format!("{p}.weight"))?,
                            b: self.p(&format!("{p}.bias"))?,
                        },
                        SgmVariant::Spatial => GateVars::Spatial {
                            gamma: self.p(&format!("{p}.gamma"))?,
                            beta: self.p(&format!("{p}.beta"))?,
                        },
                    });
                }
                sgm_graph(self.g, skip, &gates)
            }
            ArchKind::AttUNet => {
                let p = format!("skip{level}.att");
                let theta = self.conv(skip, &format!("{p}.wx"), 0)?;
                let phi = self.conv(gating, &format!("{p}.wg"), 0)?;
                let sum = self.g.add(theta, phi)?;
                let q = self.g.relu(sum)?;
                let psi = self.conv(q, &format!("{p}.psi"), 0)?;
                let alpha = self.g.sigmoid(psi)?;
                self.g.mul(skip, alpha)
            }
            ArchKind::UNet | ArchKind::ResUNet => Ok(skip),
        }
    }

    fn run(&mut self, x: Var) -> Result<Var> {
        let depth = self.model.widths.len();
        let mut skips = Vec::with_capacity(depth);
        let mut h = x;
        for i in 0..depth {
            if i > 0 {
                h = self.g.maxpool3d(h)?;
            }
            h = self.block(h, &format!("enc{i}"))?;
            skips.push(h);
        }
        for l in (0..depth - 1).rev() {
            let w = self.p(&format!("up{l}.weight"))?;
            let b = self.p(&format!("up{l}.bias"))?;
            let up = self.g.conv_transpose3d(h, w, b)?;
            let skip = self.skip(l, skips[l], up)?;
            let cat = self.g.concat_channels(&[skip, up])?;
            h = self.block(cat, &format!("dec{l}"))?;
        }
        self.conv(h, "head", 0)
    }
}

/// Parameter totals: trainable element counts, overall and per block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// `(block prefix, count)` in build order.
    pub per_block: Vec<(String, usize)>,
}

/// Counts trainable parameters; running statistics are buffers and excluded.
pub fn count_parameters(params: &ParamStore) -> ParamCount {
    let mut per_block: Vec<(String, usize)> = Vec::new();
    let mut total = 0;
    for p in params.iter().filter(|p| p.trainable) {
        let n = p.value.len();
        total += n;
        let block = p.name.split('.').next().unwrap_or("").to_string();
        match per_block.last_mut() {
            Some((name, c)) if *name == block => *c += n,
            _ => per_block.push((block, n)),
        }
    }
    ParamCount { total, per_block }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_effective_widths() {
        let w = |k| ArchitectureSpec::default_for(k).effective_widths();
        assert_eq!(w(ArchKind::SgNet), vec![16, 24, 48, 96]);
        assert_eq!(w(ArchKind::UNet), vec![16, 32, 64, 128]);
        assert_eq!(w(ArchKind::ResUNet), vec![24, 48, 96, 192]);
        assert_eq!(w(ArchKind::AttUNet), vec![28, 56, 112, 224]);
    }

    #[test]
    fn spec_validation() {
        let mut s = ArchitectureSpec::with_widths(ArchKind::SgNet, &[16, 12]);
        assert!(s.validate().is_err());
        s.encoder_widths = vec![12, 24];
        assert!(s.validate().unwrap_err().to_string().contains("divisible"));
        s.kind = ArchKind::UNet;
        assert!(s.validate().is_ok());
        assert!("vnet".parse::<ArchKind>().is_err());
    }

    #[test]
    fn groups_of_two_channels_at_width_sixteen() {
        let spec = ArchitectureSpec::with_widths(ArchKind::SgNet, &[16, 32]);
        let m = Model::build(&spec, 0).unwrap();
        let st = m.sgm_state(0).unwrap();
        assert_eq!(st.groups.len(), 8);
        match &st.groups[0] {
            GateParams::Literal { weight, bias } => {
                assert_eq!(weight.shape(), &[2, 2]);
                assert_eq!(bias.shape(), &[2]);
            }
            _ => panic!("expected literal gate"),
        }
    }

    #[test]
    fn literal_gate_reference_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 4, 2, 3, 2], 1.0, &mut rng);
        let gate = |b: f64| SgmState {
            groups: (0..2)
                .map(|_| GateParams::Literal {
                    weight: Tensor::zeros(&[2, 2]),
                    bias: Tensor::full(&[2], b),
                })
                .collect(),
        };
        let half = sgm_forward(&x, &gate(0.0)).unwrap();
        for (a, b) in half.data().iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * b);
        }
        let sat = sgm_forward(&x, &gate(10.0)).unwrap();
        let dev = sat
            .data()
            .iter()
            .zip(x.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(dev < 1e-4 * x.max_abs());
    }

    #[test]
    fn gate_groups_are_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for variant in [SgmVariant::Literal, SgmVariant::Spatial] {
            let state = SgmState {
                groups: (0..3)
                    .map(|_| match variant {
                        SgmVariant::Literal => GateParams::Literal {
                            weight: Tensor::randn(&[2, 2], 1.0, &mut rng),
                            bias: Tensor::randn(&[2], 1.0, &mut rng),
                        },
                        SgmVariant::Spatial => GateParams::Spatial {
                            gamma: Tensor::randn(&[1], 1.0, &mut rng),
                            beta: Tensor::randn(&[1], 1.0, &mut rng),
                        },
                    })
                    .collect(),
            };
            let x = Tensor::randn(&[1, 6, 2, 2, 4], 1.0, &mut rng);
            let mut x2 = x.clone();
            // perturb only channels 2..4 (group index 1)
            for v in &mut x2.data_mut()[2 * 16..4 * 16] {
                *v += 0.37;
            }
            let a = sgm_forward(&x, &state).unwrap();
            let b = sgm_forward(&x2, &state).unwrap();
            assert_eq!(&a.data()[..32], &b.data()[..32]);
            assert_eq!(&a.data()[64..], &b.data()[64..]);
            assert_ne!(&a.data()[32..64], &b.data()[32..64]);
        }
    }

    #[test]
    fn gate_values_in_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[1, 4, 2, 2, 2], 1.0, &mut rng).map(|v| v + 3.0);
        let state = SgmState {
            groups: vec![GateParams::Spatial {
                gamma: Tensor::full(&[1], 2.0),
                beta: Tensor::full(&[1], 0.1),
            }],
        };
        let y = sgm_forward(&x, &state).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            let gate = a / b;
            assert!(gate > 0.0 && gate < 1.0);
        }
        let bad = SgmState {
            groups: vec![state.groups[0].clone(); 3],
        };
        assert!(sgm_forward(&x, &bad).is_err());
    }

    #[test]
    fn forward_shape_and_divisor_error() {
        let spec = ArchitectureSpec::with_widths(ArchKind::UNet, &[4, 8, 16]);
        let mut m = Model::build(&spec, 0).unwrap();
        let x = Tensor::zeros(&[1, 2, 8, 4, 12]);
        assert_eq!(m.forward(&x).unwrap().shape(), &[1, 1, 8, 4, 12]);
        let err = m.forward(&Tensor::zeros(&[1, 2, 8, 6, 8])).unwrap_err().to_string();
        assert!(err.contains("multiple of 4"), "{err}");
    }

    #[test]
    fn count_table_blocks() {
        let spec = ArchitectureSpec::with_widths(ArchKind::UNet, &[4, 8]);
        let m = Model::build(&spec, 0).unwrap();
        let c = count_parameters(&m.params);
        let names: Vec<&str> = c.per_block.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["enc0", "enc1", "up0", "dec0", "head"]);
        assert_eq!(c.per_block.iter().map(|(_, n)| n).sum::<usize>(), c.total);
        assert_eq!(c.total, m.params.trainable_count());
        // enc0.conv1 is 2 -> 4 with k = 3
        assert_eq!(m.params.by_name("enc0.conv1.weight").unwrap().value.len() + 4, 2 * 4 * 27 + 4);
    }
}
