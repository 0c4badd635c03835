//! Cross-stage attention.
//!
//! Each stage map is pooled and projected to a key and a value. A learnable
//! query scores the four keys, the softmaxed scores mix the values, and a
//! bottleneck MLP turns the mixture into per-channel weights in (0, 1) that
//! rescale the last stage map.

use crate::autograd::{Init, ParamSpec};
use crate::backbone::StageOutputs;
use crate::error::dim_err;
use crate::{ParamSet, Real, Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsaConfig {
    /// Channel counts of the four stage maps.
    pub stage_channels: [usize; 4],
    /// Key/value/query width (128 full, 32 tiny).
    pub attn_dim: usize,
    /// Recalibration bottleneck (64 full, 16 tiny).
    pub bottleneck: usize,
}

impl CsaConfig {
    pub fn out_dim(&self) -> usize {
        self.stage_channels[3]
    }

    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let d = self.attn_dim;
        let mut specs = Vec::new();
        let linear = |specs: &mut Vec<ParamSpec>, name: String, out: usize, inp: usize| {
            specs.push(ParamSpec::new(
                format!("{name}.weight"),
                &[out, inp],
                Init::Normal {
                    std: (2.0 / inp as f64).sqrt(),
                },
            ));
            specs.push(ParamSpec::new(format!("{name}.bias"), &[out], Init::Constant(0.0)));
        };
        for (k, &c) in self.stage_channels.iter().enumerate() {
            linear(&mut specs, format!("{prefix}.key{}", k + 1), d, c);
            linear(&mut specs, format!("{prefix}.value{}", k + 1), d, c);
        }
        specs.push(ParamSpec::new(
            format!("{prefix}.query"),
            &[1, d],
            Init::Normal {
                std: 1.0 / (d as f64).sqrt(),
            },
        ));
        linear(&mut specs, format!("{prefix}.down"), self.bottleneck, d);
        linear(&mut specs, format!("{prefix}.up"), self.out_dim(), self.bottleneck);
        specs
    }

    /// Multiply-accumulates of the projections, scores and MLP per image.
    pub fn macs(&self) -> u64 {
        let d = self.attn_dim;
        let proj: usize = self.stage_channels.iter().map(|c| 2 * c * d).sum();
        (proj + 4 * d + 4 * d + d * self.bottleneck + self.bottleneck * self.out_dim()) as u64
    }
}

/// Per-batch attention telemetry.
#[derive(Clone, Debug, PartialEq)]
pub struct CsaTrace {
    /// `[B,4]` stage weights, rows on the simplex.
    pub alpha: Tensor,
    /// `[B,C4]` channel weights in (0, 1).
    pub channel_weights: Tensor,
}

/// Tape handles of the attention intermediates.
#[derive(Clone, Copy, Debug)]
pub struct CsaVars {
    pub alpha: Var,
    pub channel_weights: Var,
}

impl CsaVars {
    pub fn trace(&self, tape: &Tape) -> Result<CsaTrace> {
        Ok(CsaTrace {
            alpha: tape.value(self.alpha)?,
            channel_weights: tape.value(self.channel_weights)?,
        })
    }
}

fn affine(tape: &mut Tape, params: &ParamSet, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.weight"))?;
    let b = tape.param(params, &format!("{name}.bias"))?;
    tape.linear(x, w, Some(b))
}

/// Pools every stage map and projects it: returns `K, V` of shape `[B,4,d]`.
pub fn csa_aggregate(
    tape: &mut Tape,
    params: &ParamSet,
    prefix: &str,
    stages: &[Var; 4],
) -> Result<(Var, Var)> {
    let mut keys = Vec::with_capacity(4);
    let mut values = Vec::with_capacity(4);
    for (k, &f) in stages.iter().enumerate() {
        let z = tape.global_avg_pool(f)?;
        let c = tape.shape(z)?[1];
        let expected = params.get(&format!("{prefix}.key{}.weight", k + 1))?.shape()[1];
        if c != expected {
            return Err(dim_err(format!(
                "stage {} has {c} channels, projection expects {expected}",
                k + 1
            )));
        }
        keys.push(affine(tape, params, &format!("{prefix}.key{}", k + 1), z)?);
        values.push(affine(tape, params, &format!("{prefix}.value{}", k + 1), z)?);
    }
    Ok((tape.stack(&keys)?, tape.stack(&values)?))
}

/// `alpha = softmax_k(Q . K_k / sqrt(d))`, shape `[B,4]`.
pub fn csa_weights(tape: &mut Tape, params: &ParamSet, prefix: &str, keys: Var) -> Result<Var> {
    let ks = tape.shape(keys)?.to_vec();
    let (b, n, d) = (ks[0], ks[1], ks[2]);
    let q = tape.param(params, &format!("{prefix}.query"))?;
    let flat = tape.reshape(keys, &[b * n, d])?;
    let scores = tape.linear(flat, q, None)?;
    let scores = tape.reshape(scores, &[b, n])?;
    let scores = tape.scale(scores, 1.0 / (d as Real).sqrt())?;
    tape.softmax(scores)
}

/// Mixes the values with `alpha`, squeezes to channel weights and rescales
/// `F4`. Returns the recalibrated map and the channel weights.
pub fn csa_recalibrate(
    tape: &mut Tape,
    params: &ParamSet,
    prefix: &str,
    values: Var,
    alpha: Var,
    f4: Var,
) -> Result<(Var, Var)> {
    let fused = tape.mix(alpha, values)?;
    let hidden = affine(tape, params, &format!("{prefix}.down"), fused)?;
    let hidden = tape.relu(hidden)?;
    let logits = affine(tape, params, &format!("{prefix}.up"), hidden)?;
    let weights = tape.sigmoid(logits)?;
    Ok((tape.channel_scale(f4, weights)?, weights))
}

/// All three phases on a backbone's stage outputs.
pub fn csa_forward(
    tape: &mut Tape,
    params: &ParamSet,
    prefix: &str,
    stages: &StageOutputs,
) -> Result<(Var, CsaVars)> {
    let (keys, values) = csa_aggregate(tape, params, prefix, &stages.stages)?;
    let alpha = csa_weights(tape, params, prefix, keys)?;
    let (f4_hat, channel_weights) =
        csa_recalibrate(tape, params, prefix, values, alpha, stages.stages[3])?;
    Ok((
        f4_hat,
        CsaVars {
            alpha,
            channel_weights,
        },
    ))
}
