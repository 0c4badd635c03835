//! Four-stage residual feature extractor.
//!
//! Blocks use the conv-BN-ReLU-conv-BN, add, ReLU layout. The first block of
//! stages 2-4 halves the resolution and projects the shortcut with a 1x1
//! stride-2 convolution followed by batch norm. Convolutions have no bias.

use crate::autograd::{BatchNormState, Init, ParamSpec, Pool};
use crate::error::dim_err;
use crate::{ParamSet, Result, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Tiny,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Tiny => "tiny",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Preset::Full),
            "tiny" => Some(Preset::Tiny),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub preset: Preset,
    /// `(H, W)` of the network input.
    pub input_size: (usize, usize),
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
}

impl BackboneConfig {
    /// 224x224 input, 7x7/2 stem and 3x3/2 max pool, channels 64..512,
    /// two blocks per stage.
    pub fn full() -> Self {
        Self {
            preset: Preset::Full,
            input_size: (224, 224),
            stem_channels: 64,
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: 2,
        }
    }

    /// 64x64 input, 3x3/1 stem and 2x2/2 max pool, channels 8..64, one block
    /// per stage.
    pub fn tiny() -> Self {
        Self {
            preset: Preset::Tiny,
            input_size: (64, 64),
            stem_channels: 8,
            stage_channels: [8, 16, 32, 64],
            blocks_per_stage: 1,
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => Self::full(),
            Preset::Tiny => Self::tiny(),
        }
    }

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.stage_channels[3]
    }

    fn stem(&self) -> Stem {
        match self.preset {
            Preset::Full => Stem {
                kernel: 7,
                stride: 2,
                padding: 3,
                pool: Pool::Max {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
            },
            Preset::Tiny => Stem {
                kernel: 3,
                stride: 1,
                padding: 1,
                pool: Pool::Max {
                    kernel: 2,
                    stride: 2,
                    padding: 0,
                },
            },
        }
    }

    /// Every convolution in execution order with its input resolution.
    pub fn conv_layers(&self) -> Vec<ConvLayer> {
        let stem = self.stem();
        let (mut h, mut w) = self.input_size;
        let mut layers = Vec::new();
        let push = |layers: &mut Vec<ConvLayer>, name: String, cin, cout, k, s, p, h: usize, w: usize| {
            let oh = (h + 2 * p - k) / s + 1;
            let ow = (w + 2 * p - k) / s + 1;
            layers.push(ConvLayer {
                name,
                cin,
                cout,
                kernel: k,
                stride: s,
                padding: p,
                out_hw: (oh, ow),
            });
            (oh, ow)
        };
        (h, w) = push(
            &mut layers,
            "stem.conv".into(),
            3,
            self.stem_channels,
            stem.kernel,
            stem.stride,
            stem.padding,
            h,
            w,
        );
        if let Pool::Max {
            kernel,
            stride,
            padding,
        } = stem.pool
        {
            h = (h + 2 * padding - kernel) / stride + 1;
            w = (w + 2 * padding - kernel) / stride + 1;
        }
        let mut cin = self.stem_channels;
        for (s, &cout) in self.stage_channels.iter().enumerate() {
            for b in 0..self.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let base = format!("stage{}.block{}", s + 1, b + 1);
                let (bh, bw) = (h, w);
                (h, w) = push(&mut layers, format!("{base}.conv1"), cin, cout, 3, stride, 1, bh, bw);
                (h, w) = push(&mut layers, format!("{base}.conv2"), cout, cout, 3, 1, 1, h, w);
                if stride != 1 || cin != cout {
                    push(&mut layers, format!("{base}.downsample.conv"), cin, cout, 1, stride, 0, bh, bw);
                }
                cin = cout;
            }
        }
        layers
    }

    /// Spatial size of each stage output.
    pub fn stage_sizes(&self) -> [(usize, usize); 4] {
        let layers = self.conv_layers();
        let mut out = [(0, 0); 4];
        for (s, slot) in out.iter_mut().enumerate() {
            let last = format!("stage{}.block{}.conv2", s + 1, self.blocks_per_stage);
            *slot = layers.iter().find(|l| l.name == last).expect("layer exists").out_hw;
        }
        out
    }

    /// Parameter and buffer specs, names relative to the backbone root.
    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for layer in self.conv_layers() {
            let fan_out = (layer.cout * layer.kernel * layer.kernel) as f64;
            specs.push(ParamSpec::new(
                format!("{prefix}.{}.weight", layer.name),
                &[layer.cout, layer.cin, layer.kernel, layer.kernel],
                Init::Normal {
                    std: (2.0 / fan_out).sqrt(),
                },
            ));
            let bn = bn_name(&layer.name);
            specs.extend(bn_specs(&format!("{prefix}.{bn}"), layer.cout));
        }
        specs
    }

    /// Multiply-accumulates of every convolution for one image.
    pub fn conv_macs(&self) -> u64 {
        self.conv_layers().iter().map(ConvLayer::macs).sum()
    }
}

struct Stem {
    kernel: usize,
    stride: usize,
    padding: usize,
    pool: Pool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_hw: (usize, usize),
}

impl ConvLayer {
    pub fn macs(&self) -> u64 {
        (self.cout * self.cin * self.kernel * self.kernel * self.out_hw.0 * self.out_hw.1) as u64
    }
}

/// `stage1.block1.conv2` -> `stage1.block1.bn2`, `stem.conv` -> `stem.bn`.
fn bn_name(conv: &str) -> String {
    let (head, last) = conv.rsplit_once('.').expect("dotted conv name");
    format!("{head}.{}", last.replacen("conv", "bn", 1))
}

/// gamma/beta plus running statistics for a batch-norm layer.
pub(crate) fn bn_specs(prefix: &str, channels: usize) -> [ParamSpec; 4] {
    [
        ParamSpec::new(format!("{prefix}.gamma"), &[channels], Init::Constant(1.0)),
        ParamSpec::new(format!("{prefix}.beta"), &[channels], Init::Constant(0.0)),
        ParamSpec::new(format!("{prefix}.running_mean"), &[channels], Init::Buffer(0.0)),
        ParamSpec::new(format!("{prefix}.running_var"), &[channels], Init::Buffer(1.0)),
    ]
}

/// Batch norm whose running statistics live in `params` as buffers.
pub(crate) fn bn_layer(
    tape: &mut Tape,
    params: &mut ParamSet,
    prefix: &str,
    x: Var,
    training: bool,
) -> Result<Var> {
    let gamma = tape.param(params, &format!("{prefix}.gamma"))?;
    let beta = tape.param(params, &format!("{prefix}.beta"))?;
    let (mean_name, var_name) = (format!("{prefix}.running_mean"), format!("{prefix}.running_var"));
    let mut mean = params.get(&mean_name)?.data().to_vec();
    let mut var = params.get(&var_name)?.data().to_vec();
    let y = tape.batch_norm(x, gamma, beta, BatchNormState::new(&mut mean, &mut var), training)?;
    if training {
        params.set_values(&mean_name, &mean)?;
        params.set_values(&var_name, &var)?;
    }
    Ok(y)
}

/// Stage maps `F1..F4` and the pooled last stage.
#[derive(Clone, Copy, Debug)]
pub struct StageOutputs {
    pub stages: [Var; 4],
    pub gap: Var,
}

/// `relu(BN(conv2(relu(BN(conv1(x))))) + shortcut(x))`. `prefix` names the
/// block, e.g. `expert_img.stage2.block1`.
pub fn residual_block(
    tape: &mut Tape,
    params: &mut ParamSet,
    prefix: &str,
    x: Var,
    stride: usize,
    training: bool,
) -> Result<Var> {
    let w1 = tape.param(params, &format!("{prefix}.conv1.weight"))?;
    let cin = tape.shape(x)?[1];
    let expected = params.get(&format!("{prefix}.conv1.weight"))?.shape()[1];
    if cin != expected {
        return Err(dim_err(format!(
            "block `{prefix}` expects {expected} input channels, got {cin}"
        )));
    }
    let h = tape.conv2d(x, w1, None, stride, 1)?;
    let h = bn_layer(tape, params, &format!("{prefix}.bn1"), h, training)?;
    let h = tape.relu(h)?;
    let w2 = tape.param(params, &format!("{prefix}.conv2.weight"))?;
    let h = tape.conv2d(h, w2, None, 1, 1)?;
    let h = bn_layer(tape, params, &format!("{prefix}.bn2"), h, training)?;
    let ds = format!("{prefix}.downsample.conv.weight");
    let shortcut = if params.contains(&ds) {
        let ws = tape.param(params, &ds)?;
        let s = tape.conv2d(x, ws, None, stride, 0)?;
        bn_layer(tape, params, &format!("{prefix}.downsample.bn"), s, training)?
    } else {
        x
    };
    let sum = tape.add(h, shortcut)?;
    tape.relu(sum)
}

/// Runs the stem and the four stages on `[B,3,H,W]`.
pub fn backbone_forward(
    tape: &mut Tape,
    params: &mut ParamSet,
    prefix: &str,
    cfg: &BackboneConfig,
    x: Var,
    training: bool,
) -> Result<StageOutputs> {
    let xs = tape.shape(x)?;
    let (h, w) = cfg.input_size;
    if xs.len() != 4 || xs[1] != 3 || xs[2] != h || xs[3] != w {
        return Err(dim_err(format!(
            "backbone expects [B,3,{h},{w}] input, got {xs:?}"
        )));
    }
    let stem = cfg.stem();
    let ws = tape.param(params, &format!("{prefix}.stem.conv.weight"))?;
    let mut y = tape.conv2d(x, ws, None, stem.stride, stem.padding)?;
    y = bn_layer(tape, params, &format!("{prefix}.stem.bn"), y, training)?;
    y = tape.relu(y)?;
    y = tape.pool(y, stem.pool)?;
    let mut stages = [y; 4];
    for (s, slot) in stages.iter_mut().enumerate() {
        for b in 0..cfg.blocks_per_stage {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let name = format!("{prefix}.stage{}.block{}", s + 1, b + 1);
            y = residual_block(tape, params, &name, y, stride, training)?;
        }
        *slot = y;
    }
    let gap = tape.global_avg_pool(y)?;
    Ok(StageOutputs { stages, gap })
}
