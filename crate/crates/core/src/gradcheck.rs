//! Central finite-difference verification of the reverse pass.
//!
//! Every case builds a small graph from random leaves, contracts its output
//! with a fixed random projection and compares the taped gradient of every
//! leaf element against `(f(x+h) - f(x-h)) / 2h`. Only forward evaluation is
//! used on the numeric side.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchNormState, Pool};
use crate::moe::{CsaMoeModel, ModelConfig, Variant, ViewBatch};
use crate::{Error, Real, Result, Tape, Tensor, Var};

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`.
pub const RELATIVE_FLOOR: Real = 1e-3;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub trials: usize,
    pub step: Real,
    pub tolerance: Real,
    /// Elements perturbed per model parameter tensor.
    pub model_samples_per_param: usize,
    /// Corrupts the backward pass of the named op (harness self-test).
    pub fault: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 20,
            step: 1e-4,
            tolerance: 1e-4,
            model_samples_per_param: 4,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: String,
    pub trials: usize,
    pub checked: usize,
    pub max_rel_error: Real,
    pub passed: bool,
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Result of checking one graph: max relative error and number of elements.
fn check_graph(
    build: &Build,
    inputs: &[Tensor],
    cfg: &GradcheckConfig,
    rng: &mut ChaCha8Rng,
    max_per_input: Option<usize>,
) -> Result<(Real, usize)> {
    let mut tape = Tape::new();
    if let Some(op) = &cfg.fault {
        tape.inject_backward_fault(op, 1.5);
    }
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.input(&t.clone().with_grad()))
        .collect();
    let out = build(&mut tape, &vars)?;
    let out_shape = tape.shape(out)?.to_vec();
    let projection = Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0));
    let loss = project(&mut tape, out, &projection)?;
    let grads = tape.gradients(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<Real> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.input(x)).collect();
        let o = build(&mut t, &vs)?;
        let l = project(&mut t, o, &projection)?;
        Ok(t.data(l)?[0])
    };

    let mut worst: Real = 0.0;
    let mut checked = 0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(<[Real]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let n = inputs[i].len();
        let elements: Vec<usize> = match max_per_input {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for j in elements {
            let mut err = Real::INFINITY;
            // A second, smaller step guards against a kink inside the first.
            for h in [cfg.step, cfg.step * 0.1] {
                let numeric = central_difference(&eval, inputs, i, j, h)?;
                err = err.min(relative_error(analytic[j], numeric));
                if err < cfg.tolerance * 0.01 {
                    break;
                }
            }
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok((worst, checked))
}

fn central_difference(
    eval: &dyn Fn(&[Tensor]) -> Result<Real>,
    inputs: &[Tensor],
    i: usize,
    j: usize,
    h: Real,
) -> Result<Real> {
    let mut xs = inputs.to_vec();
    let orig = inputs[i].data()[j];
    xs[i].data_mut()[j] = orig + h;
    let plus = eval(&xs)?;
    xs[i].data_mut()[j] = orig - h;
    let minus = eval(&xs)?;
    Ok((plus - minus) / (2.0 * h))
}

pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn project(tape: &mut Tape, out: Var, projection: &Tensor) -> Result<Var> {
    let p = tape.input(projection);
    let prod = tape.mul(out, p)?;
    tape.sum(prod)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: Real, hi: Real) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so no element sits near a ReLU kink.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: Real = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values with spacing far above the step, so max-pooling never
/// switches its winner under perturbation.
fn rand_distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape, |i| order[i] as Real * 0.01 - n as Real * 0.005)
}

struct OpCase {
    name: &'static str,
    setup: fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>),
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "conv2d",
            setup: |rng| {
                let b = rng.random_range(1..=2);
                let cin = rng.random_range(1..=3);
                let cout = rng.random_range(1..=3);
                let k = rng.random_range(1..=3);
                let stride = rng.random_range(1..=2);
                let pad = rng.random_range(0..=1);
                let h = rng.random_range(k.max(2)..=5);
                let w = rng.random_range(k.max(2)..=5);
                let with_bias = rng.random_bool(0.5);
                let mut inputs = vec![
                    rand_tensor(rng, &[b, cin, h, w], -1.0, 1.0),
                    rand_tensor(rng, &[cout, cin, k, k], -1.0, 1.0),
                ];
                if with_bias {
                    inputs.push(rand_tensor(rng, &[cout], -1.0, 1.0));
                }
                let build: Box<Build> = Box::new(move |t, v| {
                    t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)
                });
                (inputs, build)
            },
        },
        OpCase {
            name: "batchnorm_train",
            setup: |rng| {
                let shape = [rng.random_range(2..=3), rng.random_range(1..=3), 2, rng.random_range(1..=3)];
                let c = shape[1];
                let inputs = vec![
                    rand_tensor(rng, &shape, -2.0, 2.0),
                    rand_tensor(rng, &[c], 0.5, 1.5),
                    rand_tensor(rng, &[c], -0.5, 0.5),
                ];
                let build: Box<Build> = Box::new(move |t, v| {
                    let (mut m, mut var) = (vec![0.0; c], vec![1.0; c]);
                    t.batch_norm(v[0], v[1], v[2], BatchNormState::new(&mut m, &mut var), true)
                });
                (inputs, build)
            },
        },
        OpCase {
            name: "batchnorm_eval",
            setup: |rng| {
                let c = rng.random_range(1..=4);
                let shape = [rng.random_range(1..=3), c, rng.random_range(1..=3)];
                let mean: Vec<Real> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                let var: Vec<Real> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
                let inputs = vec![
                    rand_tensor(rng, &shape, -2.0, 2.0),
                    rand_tensor(rng, &[c], 0.5, 1.5),
                    rand_tensor(rng, &[c], -0.5, 0.5),
                ];
                let build: Box<Build> = Box::new(move |t, v| {
                    let (mut m, mut vv) = (mean.clone(), var.clone());
                    t.batch_norm(v[0], v[1], v[2], BatchNormState::new(&mut m, &mut vv), false)
                });
                (inputs, build)
            },
        },
        OpCase {
            name: "relu",
            setup: |rng| {
                let shape = [rng.random_range(1..=4), rng.random_range(1..=5)];
                (vec![rand_away_from_zero(rng, &shape)], Box::new(|t, v| t.relu(v[0])))
            },
        },
        OpCase {
            name: "sigmoid",
            setup: |rng| {
                let shape = [rng.random_range(1..=4), rng.random_range(1..=5)];
                (vec![rand_tensor(rng, &shape, -4.0, 4.0)], Box::new(|t, v| t.sigmoid(v[0])))
            },
        },
        OpCase {
            name: "softmax",
            setup: |rng| {
                let shape = [rng.random_range(1..=3), rng.random_range(1..=5)];
                (vec![rand_tensor(rng, &shape, -3.0, 3.0)], Box::new(|t, v| t.softmax(v[0])))
            },
        },
        OpCase {
            name: "linear",
            setup: |rng| {
                let (b, n, m) = (rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=4));
                let inputs = vec![
                    rand_tensor(rng, &[b, n], -1.0, 1.0),
                    rand_tensor(rng, &[m, n], -1.0, 1.0),
                    rand_tensor(rng, &[m], -1.0, 1.0),
                ];
                (inputs, Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))))
            },
        },
        OpCase {
            name: "max_pool",
            setup: |rng| {
                let k = rng.random_range(2..=3);
                let stride = rng.random_range(1..=2);
                let pad = rng.random_range(0..=1).min(k / 2);
                let shape = [rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(k..=5), rng.random_range(k..=5)];
                (
                    vec![rand_distinct(rng, &shape)],
                    Box::new(move |t, v| t.pool(v[0], Pool::Max { kernel: k, stride, padding: pad })),
                )
            },
        },
        OpCase {
            name: "adaptive_avg_pool",
            setup: |rng| {
                let shape = [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=5)];
                let (oh, ow) = (rng.random_range(1..=shape[2]), rng.random_range(1..=shape[3]));
                (
                    vec![rand_tensor(rng, &shape, -1.0, 1.0)],
                    Box::new(move |t, v| t.pool(v[0], Pool::AdaptiveAvg { out_h: oh, out_w: ow })),
                )
            },
        },
        OpCase {
            name: "dropout",
            setup: |rng| {
                let shape = [rng.random_range(1..=4), rng.random_range(1..=6)];
                let seed: u64 = rng.random();
                (
                    vec![rand_tensor(rng, &shape, -1.0, 1.0)],
                    Box::new(move |t, v| {
                        let mut r = ChaCha8Rng::seed_from_u64(seed);
                        t.dropout(v[0], 0.3, true, &mut r)
                    }),
                )
            },
        },
        OpCase {
            name: "add",
            setup: |rng| {
                let shape = [rng.random_range(1..=3), rng.random_range(1..=4)];
                let inputs = vec![rand_tensor(rng, &shape, -1.0, 1.0), rand_tensor(rng, &shape, -1.0, 1.0)];
                (inputs, Box::new(|t, v| t.add(v[0], v[1])))
            },
        },
        OpCase {
            name: "mul",
            setup: |rng| {
                let shape = [rng.random_range(1..=3), rng.random_range(1..=4)];
                let inputs = vec![rand_tensor(rng, &shape, -1.0, 1.0), rand_tensor(rng, &shape, -1.0, 1.0)];
                (inputs, Box::new(|t, v| t.mul(v[0], v[1])))
            },
        },
        OpCase {
            name: "scale",
            setup: |rng| {
                let f: Real = rng.random_range(-2.0..2.0);
                (vec![rand_tensor(rng, &[3, 2], -1.0, 1.0)], Box::new(move |t, v| t.scale(v[0], f)))
            },
        },
        OpCase {
            name: "sum",
            setup: |rng| {
                let shape = [rng.random_range(1..=3), rng.random_range(1..=4)];
                (vec![rand_tensor(rng, &shape, -1.0, 1.0)], Box::new(|t, v| t.sum(v[0])))
            },
        },
        OpCase {
            name: "mean",
            setup: |rng| {
                let shape = [rng.random_range(1..=3), rng.random_range(1..=4)];
                (vec![rand_tensor(rng, &shape, -1.0, 1.0)], Box::new(|t, v| t.mean(v[0])))
            },
        },
        OpCase {
            name: "reshape",
            setup: |rng| {
                let (a, b) = (rng.random_range(1..=3), rng.random_range(1..=4));
                (vec![rand_tensor(rng, &[a, b], -1.0, 1.0)], Box::new(move |t, v| t.reshape(v[0], &[b, a])))
            },
        },
        OpCase {
            name: "concat",
            setup: |rng| {
                let b = rng.random_range(1..=3);
                let widths: Vec<usize> = (0..3).map(|_| rng.random_range(1..=3)).collect();
                let inputs = widths.iter().map(|&w| rand_tensor(rng, &[b, w], -1.0, 1.0)).collect();
                (inputs, Box::new(|t, v| t.concat(v)))
            },
        },
        OpCase {
            name: "stack",
            setup: |rng| {
                let shape = [rng.random_range(1..=3), rng.random_range(1..=4)];
                let inputs = (0..rng.random_range(1..=4)).map(|_| rand_tensor(rng, &shape, -1.0, 1.0)).collect();
                (inputs, Box::new(|t, v| t.stack(v)))
            },
        },
        OpCase {
            name: "mix",
            setup: |rng| {
                let (b, k, d) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
                let inputs = vec![rand_tensor(rng, &[b, k], 0.0, 1.0), rand_tensor(rng, &[b, k, d], -1.0, 1.0)];
                (inputs, Box::new(|t, v| t.mix(v[0], v[1])))
            },
        },
        OpCase {
            name: "channel_scale",
            setup: |rng| {
                let shape = [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
                let inputs = vec![rand_tensor(rng, &shape, -1.0, 1.0), rand_tensor(rng, &[shape[0], shape[1]], 0.0, 1.0)];
                (inputs, Box::new(|t, v| t.channel_scale(v[0], v[1])))
            },
        },
        OpCase {
            name: "bce",
            setup: |rng| {
                let n = rng.random_range(1..=6);
                let labels: Vec<Real> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
                (
                    vec![rand_tensor(rng, &[n], 0.05, 0.95)],
                    Box::new(move |t, v| t.bce(v[0], &labels)),
                )
            },
        },
    ]
}

/// Names of every op covered by [`check_ops`].
pub fn op_names() -> Vec<&'static str> {
    op_cases().iter().map(|c| c.name).collect()
}

/// Runs `cfg.trials` random trials for every differentiable op.
pub fn check_ops(cfg: &GradcheckConfig) -> Result<Vec<OpReport>> {
    require_double()?;
    let mut reports = Vec::new();
    for (k, case) in op_cases().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((k as u64 + 1) << 32));
        let mut worst: Real = 0.0;
        let mut checked = 0;
        for _ in 0..cfg.trials {
            let (inputs, build) = (case.setup)(&mut rng);
            let (e, n) = check_graph(build.as_ref(), &inputs, cfg, &mut rng, None)?;
            worst = worst.max(e);
            checked += n;
        }
        reports.push(OpReport {
            name: case.name.to_string(),
            trials: cfg.trials,
            checked,
            max_rel_error: worst,
            passed: worst < cfg.tolerance,
        });
    }
    Ok(reports)
}

/// End-to-end check of the tiny CSA-MoE model: BCE loss of a small batch in
/// training mode, differentiated with respect to every parameter tensor
/// (`model_samples_per_param` random entries of each).
pub fn check_model(cfg: &GradcheckConfig, variant: Variant) -> Result<OpReport> {
    require_double()?;
    let model_cfg = ModelConfig::gradcheck(variant);
    let mut model = CsaMoeModel::new(model_cfg.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    let batch = 3;
    let (h, w) = model_cfg.backbone.input_size;
    let views = ViewBatch {
        whole: rand_tensor(&mut rng, &[batch, 3, h, w], 0.0, 1.0),
        core: Some(rand_tensor(&mut rng, &[batch, 3, h, w], 0.0, 1.0)),
        boundary: Some(rand_tensor(&mut rng, &[batch, 3, h, w], 0.0, 1.0)),
    };
    let labels: Vec<Real> = vec![1.0, 0.0, 1.0];
    let dropout_seed = cfg.seed.wrapping_add(99);

    let loss_of = |m: &mut CsaMoeModel, fault: Option<&str>| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        if let Some(op) = fault {
            tape.inject_backward_fault(op, 1.5);
        }
        let mut drop_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let out = m.forward(&mut tape, &views, true, &mut drop_rng)?;
        let loss = tape.bce(out.prob, &labels)?;
        Ok((tape, loss))
    };

    let (tape, loss) = loss_of(&mut model, cfg.fault.as_deref())?;
    model.params_mut().zero_grads();
    tape.backward(loss, model.params_mut())?;
    drop(tape);

    let names: Vec<String> = model.params().trainable().map(|(n, _)| n.to_string()).collect();
    let mut worst: Real = 0.0;
    let mut checked = 0;
    for name in &names {
        let param = model.params().get(name)?;
        let n = param.len();
        let analytic = param.grad().map(<[Real]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let original = param.data().to_vec();
        let k = cfg.model_samples_per_param.min(n);
        let elements: Vec<usize> = if k == n {
            (0..n).collect()
        } else {
            (0..k).map(|_| rng.random_range(0..n)).collect()
        };
        for j in elements {
            let mut err = Real::INFINITY;
            // Thousands of ReLU and max-pool units sit upstream; shrink the
            // step until it no longer straddles one.
            for h in [cfg.step, cfg.step * 0.1, cfg.step * 0.01] {
                let at = |delta: Real| -> Result<Real> {
                    let mut probe = model.clone();
                    let mut vals = original.clone();
                    vals[j] += delta;
                    probe.params_mut().set_values(name, &vals)?;
                    let (t, l) = loss_of(&mut probe, None)?;
                    Ok(t.data(l)?[0])
                };
                let numeric = (at(h)? - at(-h)?) / (2.0 * h);
                err = err.min(relative_error(analytic[j], numeric));
                if err < cfg.tolerance * 0.01 {
                    break;
                }
            }
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok(OpReport {
        name: format!("model:{}", variant.as_str()),
        trials: 1,
        checked,
        max_rel_error: worst,
        passed: worst < cfg.tolerance,
    })
}

fn require_double() -> Result<()> {
    if !crate::DOUBLE_PRECISION {
        return Err(Error::Usage(
            "gradient checks need the 64-bit build (disable the `f32` feature)".into(),
        ));
    }
    Ok(())
}
