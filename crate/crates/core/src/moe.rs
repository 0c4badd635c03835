//! Three-expert model, gating network, fused head and parameter/FLOP
//! accounting.

use std::fmt;

use rand::Rng;

use crate::autograd::{Init, ParamSpec};
use crate::backbone::{backbone_forward, bn_layer, bn_specs, BackboneConfig, Preset};
use crate::csa::{csa_forward, CsaConfig, CsaTrace};
use crate::{Error, ParamSet, Real, Result, Tape, Tensor, Var};

/// Expert branches in their fixed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Expert {
    Img,
    Tumor,
    Boundary,
}

impl Expert {
    pub const ALL: [Expert; 3] = [Expert::Img, Expert::Tumor, Expert::Boundary];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Expert::Img => "expert_img",
            Expert::Tumor => "expert_tumor",
            Expert::Boundary => "expert_boundary",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Expert::Img => "img",
            Expert::Tumor => "tumor",
            Expert::Boundary => "boundary",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Three experts with cross-stage attention.
    CsaMoe,
    /// Three experts, attention bypassed.
    ResnetMoe,
    /// Whole-image branch only, no gate.
    Resnet18,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::CsaMoe, Variant::ResnetMoe, Variant::Resnet18];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::CsaMoe => "csa_moe",
            Variant::ResnetMoe => "resnet_moe",
            Variant::Resnet18 => "resnet18",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }

    pub fn uses_csa(self) -> bool {
        self == Variant::CsaMoe
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub attn_dim: usize,
    pub bottleneck: usize,
    pub gate_hidden: usize,
    pub gate_dropout: Real,
    /// Expert removed for the ablation runs; `Img` cannot be dropped.
    pub dropped: Option<Expert>,
}

impl ModelConfig {
    pub fn full(variant: Variant) -> Self {
        Self {
            variant,
            backbone: BackboneConfig::full(),
            attn_dim: 128,
            bottleneck: 64,
            gate_hidden: 64,
            gate_dropout: 0.2,
            dropped: None,
        }
    }

    pub fn tiny(variant: Variant) -> Self {
        Self {
            variant,
            backbone: BackboneConfig::tiny(),
            attn_dim: 32,
            bottleneck: 16,
            gate_hidden: 16,
            gate_dropout: 0.2,
            dropped: None,
        }
    }

    pub fn for_preset(preset: Preset, variant: Variant) -> Self {
        match preset {
            Preset::Full => Self::full(variant),
            Preset::Tiny => Self::tiny(variant),
        }
    }

    /// Tiny model on 32x32 inputs, small enough for finite differences.
    pub fn gradcheck(variant: Variant) -> Self {
        let mut cfg = Self::tiny(variant);
        cfg.backbone = cfg.backbone.with_input_size(32, 32);
        cfg
    }

    pub fn with_dropped(mut self, expert: Option<Expert>) -> Result<Self> {
        if expert == Some(Expert::Img) {
            return Err(Error::Usage("the whole-image expert cannot be dropped".into()));
        }
        if expert.is_some() && self.variant == Variant::Resnet18 {
            return Err(Error::Usage("resnet18 has a single expert; nothing to drop".into()));
        }
        self.dropped = expert;
        Ok(self)
    }

    /// Active experts in fixed order.
    pub fn experts(&self) -> Vec<Expert> {
        match self.variant {
            Variant::Resnet18 => vec![Expert::Img],
            _ => Expert::ALL.into_iter().filter(|e| Some(*e) != self.dropped).collect(),
        }
    }

    pub fn has_gate(&self) -> bool {
        self.experts().len() > 1
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    pub fn csa(&self) -> CsaConfig {
        CsaConfig {
            stage_channels: self.backbone.stage_channels,
            attn_dim: self.attn_dim,
            bottleneck: self.bottleneck,
        }
    }

    /// Every parameter and buffer of the model, in construction order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for e in self.experts() {
            specs.extend(self.backbone.param_specs(e.prefix()));
            if self.variant.uses_csa() {
                specs.extend(self.csa().param_specs(&format!("{}.csa", e.prefix())));
            }
        }
        let f = self.feature_dim();
        if self.has_gate() {
            let n = self.experts().len();
            let h = self.gate_hidden;
            specs.extend(linear_specs("gate.fc1", h, n * f));
            specs.extend(bn_specs("gate.bn", h));
            specs.extend(linear_specs("gate.fc2", n, h));
        }
        specs.extend(linear_specs("head", 1, f));
        specs
    }
}

fn linear_specs(name: &str, out: usize, inp: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(
            format!("{name}.weight"),
            &[out, inp],
            Init::Normal {
                std: (2.0 / inp as f64).sqrt(),
            },
        ),
        ParamSpec::new(format!("{name}.bias"), &[out], Init::Constant(0.0)),
    ]
}

/// A batch of the three views, each `[B,3,H,W]`.
#[derive(Clone, Debug)]
pub struct ViewBatch {
    pub whole: Tensor,
    pub core: Option<Tensor>,
    pub boundary: Option<Tensor>,
}

impl ViewBatch {
    pub fn batch_size(&self) -> usize {
        self.whole.shape()[0]
    }

    fn view(&self, e: Expert) -> Result<&Tensor> {
        let v = match e {
            Expert::Img => Some(&self.whole),
            Expert::Tumor => self.core.as_ref(),
            Expert::Boundary => self.boundary.as_ref(),
        };
        v.ok_or_else(|| Error::Usage(format!("missing `{}` view for its expert", e.as_str())))
    }
}

pub struct ModelOutput {
    /// `[B]` malignancy probability.
    pub prob: Var,
    /// `[B,3]` gate weights in expert order; dropped experts get 0 and the
    /// single-branch variant reports `(1, 0, 0)`.
    pub gate: Tensor,
    /// `[B,n]` gate over the active experts, when there is a gate.
    pub gate_var: Option<Var>,
    /// Pooled `[B,F]` features of each active expert.
    pub features: Vec<(Expert, Var)>,
    pub traces: Vec<(Expert, CsaTrace)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsaMoeModel {
    config: ModelConfig,
    params: ParamSet,
}

impl CsaMoeModel {
    /// Fresh model; initial values depend only on `seed` and entry names.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParamSet::from_specs(&config.param_specs(), seed)?;
        Ok(Self { config, params })
    }

    /// Wraps existing values after checking them against the config.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        params.check_specs(&config.param_specs())?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    /// Pooled feature of one expert, with its attention trace if any.
    pub fn expert_forward(
        &mut self,
        tape: &mut Tape,
        expert: Expert,
        view: Var,
        training: bool,
    ) -> Result<(Var, Option<CsaTrace>)> {
        let prefix = expert.prefix();
        let stages = backbone_forward(tape, &mut self.params, prefix, &self.config.backbone, view, training)?;
        if !self.config.variant.uses_csa() {
            return Ok((stages.gap, None));
        }
        let (f4_hat, vars) = csa_forward(tape, &self.params, &format!("{prefix}.csa"), &stages)?;
        let feature = tape.global_avg_pool(f4_hat)?;
        Ok((feature, Some(vars.trace(tape)?)))
    }

    /// `softmax(fc2(dropout(relu(BN(fc1([F_1; ...; F_n]))))))`.
    pub fn gate<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        features: &[Var],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let concat = tape.concat(features)?;
        let w1 = tape.param(&self.params, "gate.fc1.weight")?;
        let b1 = tape.param(&self.params, "gate.fc1.bias")?;
        let h = tape.linear(concat, w1, Some(b1))?;
        let h = bn_layer(tape, &mut self.params, "gate.bn", h, training)?;
        let h = tape.relu(h)?;
        let h = tape.dropout(h, self.config.gate_dropout, training, rng)?;
        let w2 = tape.param(&self.params, "gate.fc2.weight")?;
        let b2 = tape.param(&self.params, "gate.fc2.bias")?;
        let logits = tape.linear(h, w2, Some(b2))?;
        tape.softmax(logits)
    }

    /// Gate-weighted feature sum followed by the sigmoid head; `gate` is
    /// `None` for a single feature.
    pub fn fuse_and_classify(&self, tape: &mut Tape, features: &[Var], gate: Option<Var>) -> Result<Var> {
        let fused = match gate {
            Some(w) => {
                let stacked = tape.stack(features)?;
                tape.mix(w, stacked)?
            }
            None => features[0],
        };
        let w = tape.param(&self.params, "head.weight")?;
        let b = tape.param(&self.params, "head.bias")?;
        let logit = tape.linear(fused, w, Some(b))?;
        let prob = tape.sigmoid(logit)?;
        let batch = tape.shape(prob)?[0];
        tape.reshape(prob, &[batch])
    }

    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        views: &ViewBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<ModelOutput> {
        let experts = self.config.experts();
        let mut features = Vec::with_capacity(experts.len());
        let mut traces = Vec::new();
        for &e in &experts {
            let x = tape.input(views.view(e)?);
            let (f, trace) = self.expert_forward(tape, e, x, training)?;
            features.push((e, f));
            if let Some(t) = trace {
                traces.push((e, t));
            }
        }
        let vars: Vec<Var> = features.iter().map(|(_, v)| *v).collect();
        let gate_var = if self.config.has_gate() {
            Some(self.gate(tape, &vars, training, rng)?)
        } else {
            None
        };
        let prob = self.fuse_and_classify(tape, &vars, gate_var)?;
        let b = views.batch_size();
        let mut gate = vec![0.0; b * 3];
        match gate_var {
            Some(g) => {
                let data = tape.data(g)?;
                for row in 0..b {
                    for (j, e) in experts.iter().enumerate() {
                        gate[row * 3 + e.index()] = data[row * experts.len() + j];
                    }
                }
            }
            None => (0..b).for_each(|row| gate[row * 3] = 1.0),
        }
        Ok(ModelOutput {
            prob,
            gate: Tensor::new(&[b, 3], gate)?,
            gate_var,
            features,
            traces,
        })
    }
}

/// Labelled counts for one model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Breakdown {
    pub total: u64,
    pub components: Vec<(String, u64)>,
}

/// Trainable parameters from shapes alone, grouped by backbone, attention,
/// gate and head.
pub fn count_params(cfg: &ModelConfig) -> Breakdown {
    let specs = cfg.param_specs();
    let mut groups: Vec<(String, u64)> = Vec::new();
    for s in specs.iter().filter(|s| s.trainable()) {
        let group = component_of(&s.name);
        match groups.iter_mut().find(|(g, _)| *g == group) {
            Some((_, n)) => *n += s.numel() as u64,
            None => groups.push((group, s.numel() as u64)),
        }
    }
    Breakdown {
        total: groups.iter().map(|(_, n)| n).sum(),
        components: groups,
    }
}

fn component_of(name: &str) -> String {
    let mut parts = name.split('.');
    let root = parts.next().unwrap_or_default();
    if root.starts_with("expert_") {
        let sub = if name.contains(".csa.") { "csa" } else { "backbone" };
        format!("{root}.{sub}")
    } else {
        root.to_string()
    }
}

/// Multiply-accumulates of convolutions and affine layers for one image.
pub fn count_flops(cfg: &ModelConfig) -> Breakdown {
    let mut components = Vec::new();
    let f = cfg.feature_dim() as u64;
    for e in cfg.experts() {
        components.push((format!("{}.backbone", e.prefix()), cfg.backbone.conv_macs()));
        if cfg.variant.uses_csa() {
            components.push((format!("{}.csa", e.prefix()), cfg.csa().macs()));
        }
    }
    if cfg.has_gate() {
        let n = cfg.experts().len() as u64;
        let h = cfg.gate_hidden as u64;
        components.push(("gate".into(), n * f * h + h * n));
    }
    components.push(("head".into(), f));
    Breakdown {
        total: components.iter().map(|(_, n)| n).sum(),
        components,
    }
}
