//! Record-then-reverse automatic differentiation.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! are methods on the tape that append a node and return a [`Var`] handle;
//! [`Tape::backward`] walks the nodes in reverse execution order and
//! accumulates gradients into the [`ParamSet`] the parameters came from.

pub(crate) mod kernels;
mod params;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

pub use params::{Init, ParamSet, ParamSpec};

use crate::error::dim_err;
use crate::{Error, Real, Result, Tensor};
use kernels::{adaptive_range, col2im_add, gemm, im2col, ConvGeom, MatRef};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Default batch-norm running-statistics momentum.
pub const BN_MOMENTUM: Real = 0.1;
/// Default batch-norm variance floor.
pub const BN_EPS: Real = 1e-5;

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Max {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    AdaptiveAvg {
        out_h: usize,
        out_w: usize,
    },
}

/// Running statistics and hyper-parameters for one batch-norm layer.
pub struct BatchNormState<'a> {
    pub running_mean: &'a mut [Real],
    pub running_var: &'a mut [Real],
    pub momentum: Real,
    pub eps: Real,
}

impl<'a> BatchNormState<'a> {
    pub fn new(running_mean: &'a mut [Real], running_var: &'a mut [Real]) -> Self {
        Self {
            running_mean,
            running_var,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

enum Op {
    Input,
    Param(String),
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<Real>,
        inv_std: Vec<Real>,
        training: bool,
    },
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    Linear {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool {
        input: usize,
        out_h: usize,
        out_w: usize,
    },
    Dropout {
        input: usize,
        scale: Vec<Real>,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, Real),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Stack(Vec<usize>),
    Mix {
        weights: usize,
        items: usize,
    },
    ChannelScale {
        input: usize,
        scale: usize,
    },
    Bce {
        prob: usize,
        labels: Vec<Real>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::Linear { .. } => "linear",
            Op::MaxPool { .. } => "max_pool",
            Op::AdaptiveAvgPool { .. } => "adaptive_avg_pool",
            Op::Dropout { .. } => "dropout",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Stack(_) => "stack",
            Op::Mix { .. } => "mix",
            Op::ChannelScale { .. } => "channel_scale",
            Op::Bce { .. } => "bce",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<Real>>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of a forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    fault: Option<(String, Real)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<Real>>>,
}

impl Gradients {
    /// Gradient for a leaf (input or parameter), if it was reached.
    pub fn get(&self, var: Var) -> Option<&[Real]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_deref())
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(dim_err(format!("{what}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// Zero-initialised slot for a node's incoming gradient.
fn slot(grads: &mut [Option<Vec<Real>>], idx: usize, len: usize) -> &mut Vec<Real> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<Real>>], idx: usize, contribution: &[Real]) {
    let s = slot(grads, idx, contribution.len());
    s.iter_mut().zip(contribution).for_each(|(a, b)| *a += *b);
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Scales the input gradients produced by every `op_name` node by
    /// `factor`. Exists so the gradient checker can be shown to catch a
    /// broken backward pass.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op_name: &str, factor: Real) {
        self.fault = Some((op_name.to_string(), factor));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::Usage(
                "variable was recorded on a different tape".to_string(),
            ));
        }
        self.nodes
            .get(v.index)
            .ok_or_else(|| Error::Usage("dangling variable".to_string()))
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<Real>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.push_shared(shape, Arc::new(value), op, needs_grad)
    }

    fn push_shared(
        &mut self,
        shape: Vec<usize>,
        value: Arc<Vec<Real>>,
        op: Op,
        needs_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn needs(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.node(v)?.shape)
    }

    pub fn data(&self, v: Var) -> Result<&[Real]> {
        Ok(&self.node(v)?.value)
    }

    /// Current value of a variable as a standalone tensor.
    pub fn value(&self, v: Var) -> Result<Tensor> {
        let n = self.node(v)?;
        Ok(Tensor::from_shared(n.shape.clone(), n.value.clone()))
    }

    /// Records a tensor as a leaf. It participates in differentiation iff
    /// the tensor has `requires_grad` set.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push_shared(
            t.shape().to_vec(),
            t.shared().clone(),
            Op::Input,
            t.requires_grad(),
        )
    }

    /// Records a named parameter; its gradient flows back to the set.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        let t = params.get(name)?;
        Ok(self.push_shared(
            t.shape().to_vec(),
            t.shared().clone(),
            Op::Param(name.to_string()),
            t.requires_grad(),
        ))
    }

    /// 2-D cross-correlation, `[B,Cin,H,W] * [Cout,Cin,kh,kw] -> [B,Cout,H',W']`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.node(input)?.shape.clone();
        let ws = self.node(weight)?.shape.clone();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(dim_err(format!(
                "conv2d expects 4-D input and weight, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(dim_err(format!(
                "conv2d input channels differ: input {xs:?}, weight {ws:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Usage("conv2d stride must be >= 1".into()));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(dim_err(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"
            )));
        }
        if let Some(bv) = bias {
            let bs = &self.node(bv)?.shape;
            if bs.as_slice() != [cout] {
                return Err(dim_err(format!(
                    "conv2d bias shape {bs:?} does not match {cout} output channels"
                )));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let k = geom.col_rows();
        let p = geom.col_cols();
        let x = &self.nodes[input.index].value;
        let wt = &self.nodes[weight.index].value;
        let mut out = vec![0.0; b * cout * p];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; k * p]
        };
        for bi in 0..b {
            let xb = &x[bi * cin * h * w..(bi + 1) * cin * h * w];
            let patches: &[Real] = if geom.is_pointwise() {
                xb
            } else {
                im2col(xb, &geom, &mut cols);
                &cols
            };
            gemm(
                1.0,
                MatRef::new(wt, cout, k),
                MatRef::new(patches, k, p),
                0.0,
                &mut out[bi * cout * p..(bi + 1) * cout * p],
            );
        }
        if let Some(bv) = bias {
            let bias_vals = &self.nodes[bv.index].value;
            for bi in 0..b {
                for (c, bias_c) in bias_vals.iter().enumerate() {
                    let off = (bi * cout + c) * p;
                    out[off..off + p].iter_mut().for_each(|v| *v += *bias_c);
                }
            }
        }
        let mut deps = vec![input.index, weight.index];
        deps.extend(bias.map(|v| v.index));
        let ng = self.needs(&deps);
        Ok(self.push(
            vec![b, cout, geom.oh, geom.ow],
            out,
            Op::Conv2d {
                input: input.index,
                weight: weight.index,
                bias: bias.map(|v| v.index),
                geom,
            },
            ng,
        ))
    }

    /// Per-channel batch normalisation over `[B, C, ...]`.
    ///
    /// Training mode normalises with the batch mean and population variance
    /// and blends them into the running statistics (the running variance
    /// uses the unbiased estimate). Eval mode uses the running statistics.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: BatchNormState<'_>,
        training: bool,
    ) -> Result<Var> {
        let xs = self.node(input)?.shape.clone();
        if xs.len() < 2 {
            return Err(dim_err(format!("batch_norm expects [B,C,...], got {xs:?}")));
        }
        let (b, c) = (xs[0], xs[1]);
        let r: usize = xs[2..].iter().product();
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            let s = &self.node(v)?.shape;
            if s.as_slice() != [c] {
                return Err(dim_err(format!(
                    "batch_norm {what} shape {s:?} does not match input {xs:?}"
                )));
            }
        }
        if state.running_mean.len() != c || state.running_var.len() != c {
            return Err(dim_err(format!(
                "batch_norm running statistics sized {} / {} for {c} channels",
                state.running_mean.len(),
                state.running_var.len()
            )));
        }
        if state.eps <= 0.0 {
            return Err(Error::Usage("batch_norm epsilon must be positive".into()));
        }
        let x = self.nodes[input.index].value.clone();
        let g = self.nodes[gamma.index].value.clone();
        let be = self.nodes[beta.index].value.clone();
        let n = (b * r) as Real;
        let mut mean = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (m, var) = if training {
                let mut s = 0.0;
                for bi in 0..b {
                    let off = (bi * c + ch) * r;
                    s += x[off..off + r].iter().sum::<Real>();
                }
                let m = s / n;
                let mut ss = 0.0;
                for bi in 0..b {
                    let off = (bi * c + ch) * r;
                    ss += x[off..off + r].iter().map(|v| (v - m) * (v - m)).sum::<Real>();
                }
                let var = ss / n;
                let unbiased = if b * r > 1 { ss / (n - 1.0) } else { var };
                let mo = state.momentum;
                state.running_mean[ch] = (1.0 - mo) * state.running_mean[ch] + mo * m;
                state.running_var[ch] = (1.0 - mo) * state.running_var[ch] + mo * unbiased;
                (m, var)
            } else {
                (state.running_mean[ch], state.running_var[ch])
            };
            mean[ch] = m;
            inv_std[ch] = 1.0 / (var + state.eps).sqrt();
        }
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * r;
                let (m, is, gg, bb) = (mean[ch], inv_std[ch], g[ch], be[ch]);
                for (o, v) in out[off..off + r].iter_mut().zip(&x[off..off + r]) {
                    *o = gg * (v - m) * is + bb;
                }
            }
        }
        let ng = self.needs(&[input.index, gamma.index, beta.index]);
        Ok(self.push(
            xs,
            out,
            Op::BatchNorm {
                input: input.index,
                gamma: gamma.index,
                beta: beta.index,
                mean,
                inv_std,
                training,
            },
            ng,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let n = self.node(input)?;
        let shape = n.shape.clone();
        let ng = n.needs_grad;
        let (out, op): (Vec<Real>, Op) = match kind {
            Activation::Relu => (
                n.value.iter().map(|v| v.max(0.0)).collect(),
                Op::Relu(input.index),
            ),
            Activation::Sigmoid => (
                n.value.iter().map(|&v| sigmoid(v)).collect(),
                Op::Sigmoid(input.index),
            ),
        };
        Ok(self.push(shape, out, op, ng))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let n = self.node(input)?;
        let shape = n.shape.clone();
        let last = *shape.last().unwrap();
        let mut out = n.value.as_ref().clone();
        for row in out.chunks_mut(last) {
            softmax_in_place(row);
        }
        let ng = n.needs_grad;
        Ok(self.push(shape, out, Op::Softmax(input.index), ng))
    }

    /// Affine map `[B,n] x [m,n]^T + [m] -> [B,m]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.node(input)?.shape.clone();
        let ws = self.node(weight)?.shape.clone();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(dim_err(format!(
                "linear: input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let (b, n, m) = (xs[0], xs[1], ws[0]);
        if let Some(bv) = bias {
            let bs = &self.node(bv)?.shape;
            if bs.as_slice() != [m] {
                return Err(dim_err(format!(
                    "linear: bias {bs:?} does not match weight {ws:?}"
                )));
            }
        }
        let x = &self.nodes[input.index].value;
        let w = &self.nodes[weight.index].value;
        let mut out = vec![0.0; b * m];
        if let Some(bv) = bias {
            let bias_vals = &self.nodes[bv.index].value;
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bias_vals);
            }
        }
        gemm(
            1.0,
            MatRef::new(x, b, n),
            MatRef::new_t(w, m, n),
            1.0,
            &mut out,
        );
        let mut deps = vec![input.index, weight.index];
        deps.extend(bias.map(|v| v.index));
        let ng = self.needs(&deps);
        Ok(self.push(
            vec![b, m],
            out,
            Op::Linear {
                input: input.index,
                weight: weight.index,
                bias: bias.map(|v| v.index),
            },
            ng,
        ))
    }

    pub fn pool(&mut self, input: Var, kind: Pool) -> Result<Var> {
        match kind {
            Pool::Max {
                kernel,
                stride,
                padding,
            } => self.max_pool2d(input, kernel, stride, padding),
            Pool::AdaptiveAvg { out_h, out_w } => self.adaptive_avg_pool2d(input, out_h, out_w),
        }
    }

    pub fn max_pool2d(
        &mut self,
        input: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.node(input)?.shape.clone();
        if xs.len() != 4 {
            return Err(dim_err(format!("max_pool2d expects 4-D input, got {xs:?}")));
        }
        if kernel == 0 || stride == 0 {
            return Err(Error::Usage("max_pool2d kernel and stride must be >= 1".into()));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if kernel > h + 2 * padding || kernel > w + 2 * padding {
            return Err(dim_err(format!(
                "max_pool2d kernel {kernel} larger than padded input {h}x{w}"
            )));
        }
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (w + 2 * padding - kernel) / stride + 1;
        let x = &self.nodes[input.index].value;
        let mut out = vec![0.0; b * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = Real::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if x[idx] > best || best_idx == usize::MAX {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let ng = self.nodes[input.index].needs_grad;
        Ok(self.push(
            vec![b, c, oh, ow],
            out,
            Op::MaxPool {
                input: input.index,
                argmax,
            },
            ng,
        ))
    }

    pub fn adaptive_avg_pool2d(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.node(input)?.shape.clone();
        if xs.len() != 4 {
            return Err(dim_err(format!(
                "adaptive_avg_pool2d expects 4-D input, got {xs:?}"
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(dim_err("adaptive_avg_pool2d output dims must be >= 1"));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let x = &self.nodes[input.index].value;
        let mut out = vec![0.0; b * c * out_h * out_w];
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..out_h {
                let (y0, y1) = adaptive_range(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = adaptive_range(ox, w, out_w);
                    let mut s = 0.0;
                    for iy in y0..y1 {
                        s += x[base + iy * w + x0..base + iy * w + x1].iter().sum::<Real>();
                    }
                    out[(plane * out_h + oy) * out_w + ox] = s / ((y1 - y0) * (x1 - x0)) as Real;
                }
            }
        }
        let ng = self.nodes[input.index].needs_grad;
        Ok(self.push(
            vec![b, c, out_h, out_w],
            out,
            Op::AdaptiveAvgPool {
                input: input.index,
                out_h,
                out_w,
            },
            ng,
        ))
    }

    /// Spatial mean per channel: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let pooled = self.adaptive_avg_pool2d(input, 1, 1)?;
        let s = self.node(pooled)?.shape.clone();
        self.reshape(pooled, &[s[0], s[1]])
    }

    /// Inverted dropout. Eval mode and rate 0 return `input` unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: Real,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Usage(format!("dropout rate {rate} outside [0,1)")));
        }
        let n = self.node(input)?;
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<Real> = (0..n.value.len())
            .map(|_| {
                if (rng.random::<f64>() as Real) < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let out = n.value.iter().zip(&scale).map(|(v, s)| v * s).collect();
        let (shape, ng) = (n.shape.clone(), n.needs_grad);
        Ok(self.push(
            shape,
            out,
            Op::Dropout {
                input: input.index,
                scale,
            },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        same_shape(&na.shape, &nb.shape, "add")?;
        let out = na.value.iter().zip(nb.value.iter()).map(|(x, y)| x + y).collect();
        let shape = na.shape.clone();
        let ng = self.needs(&[a.index, b.index]);
        Ok(self.push(shape, out, Op::Add(a.index, b.index), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        same_shape(&na.shape, &nb.shape, "mul")?;
        let out = na.value.iter().zip(nb.value.iter()).map(|(x, y)| x * y).collect();
        let shape = na.shape.clone();
        let ng = self.needs(&[a.index, b.index]);
        Ok(self.push(shape, out, Op::Mul(a.index, b.index), ng))
    }

    pub fn scale(&mut self, a: Var, factor: Real) -> Result<Var> {
        let n = self.node(a)?;
        let out = n.value.iter().map(|v| v * factor).collect();
        let (shape, ng) = (n.shape.clone(), n.needs_grad);
        Ok(self.push(shape, out, Op::Scale(a.index, factor), ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?;
        let s = n.value.iter().sum();
        let ng = n.needs_grad;
        Ok(self.push(vec![1], vec![s], Op::Sum(a.index), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?;
        let s = n.value.iter().sum::<Real>() / n.value.len() as Real;
        let ng = n.needs_grad;
        Ok(self.push(vec![1], vec![s], Op::Mean(a.index), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.node(a)?;
        if shape.iter().product::<usize>() != n.value.len() || shape.contains(&0) {
            return Err(dim_err(format!(
                "cannot reshape {:?} into {shape:?}",
                n.shape
            )));
        }
        let (value, ng) = (n.value.clone(), n.needs_grad);
        Ok(self.push_shared(shape.to_vec(), value, Op::Reshape(a.index), ng))
    }

    /// Concatenates `[B, n_i]` matrices along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let mut widths = Vec::with_capacity(parts.len());
        let b = self.node(parts[0])?.shape[0];
        for &p in parts {
            let s = &self.node(p)?.shape;
            if s.len() != 2 || s[0] != b {
                return Err(dim_err(format!("concat expects [{b}, n] matrices, got {s:?}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; b * total];
        let mut col = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let v = &self.nodes[p.index].value;
            for r in 0..b {
                out[r * total + col..r * total + col + wd].copy_from_slice(&v[r * wd..(r + 1) * wd]);
            }
            col += wd;
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.index).collect();
        let ng = self.needs(&idx);
        Ok(self.push(vec![b, total], out, Op::Concat(idx), ng))
    }

    /// Stacks `K` matrices `[B, D]` into `[B, K, D]`.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::Usage("stack of zero tensors".into()));
        }
        let s0 = self.node(items[0])?.shape.clone();
        if s0.len() != 2 {
            return Err(dim_err(format!("stack expects [B, D] matrices, got {s0:?}")));
        }
        for &it in items {
            same_shape(&self.node(it)?.shape, &s0, "stack")?;
        }
        let (b, d, k) = (s0[0], s0[1], items.len());
        let mut out = vec![0.0; b * k * d];
        for (ki, &it) in items.iter().enumerate() {
            let v = &self.nodes[it.index].value;
            for r in 0..b {
                out[(r * k + ki) * d..(r * k + ki + 1) * d].copy_from_slice(&v[r * d..(r + 1) * d]);
            }
        }
        let idx: Vec<usize> = items.iter().map(|p| p.index).collect();
        let ng = self.needs(&idx);
        Ok(self.push(vec![b, k, d], out, Op::Stack(idx), ng))
    }

    /// Row-wise weighted sum `out[b] = sum_k weights[b,k] * items[b,k,:]`.
    pub fn mix(&mut self, weights: Var, items: Var) -> Result<Var> {
        let ws = self.node(weights)?.shape.clone();
        let is = self.node(items)?.shape.clone();
        if ws.len() != 2 || is.len() != 3 || ws[0] != is[0] || ws[1] != is[1] {
            return Err(dim_err(format!(
                "mix: weights {ws:?} incompatible with items {is:?}"
            )));
        }
        let (b, k, d) = (is[0], is[1], is[2]);
        let w = &self.nodes[weights.index].value;
        let x = &self.nodes[items.index].value;
        let mut out = vec![0.0; b * d];
        for r in 0..b {
            let o = &mut out[r * d..(r + 1) * d];
            for ki in 0..k {
                let wk = w[r * k + ki];
                let row = &x[(r * k + ki) * d..(r * k + ki + 1) * d];
                o.iter_mut().zip(row).for_each(|(a, v)| *a += wk * v);
            }
        }
        let ng = self.needs(&[weights.index, items.index]);
        Ok(self.push(
            vec![b, d],
            out,
            Op::Mix {
                weights: weights.index,
                items: items.index,
            },
            ng,
        ))
    }

    /// `out[b,c,...] = input[b,c,...] * scale[b,c]`.
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        let xs = self.node(input)?.shape.clone();
        let ss = self.node(scale)?.shape.clone();
        if xs.len() < 2 || ss.as_slice() != [xs[0], xs[1]] {
            return Err(dim_err(format!(
                "channel_scale: scale {ss:?} does not match input {xs:?}"
            )));
        }
        let r: usize = xs[2..].iter().product();
        let x = &self.nodes[input.index].value;
        let s = &self.nodes[scale.index].value;
        let mut out = vec![0.0; x.len()];
        for (plane, sv) in s.iter().enumerate() {
            for (o, v) in out[plane * r..(plane + 1) * r]
                .iter_mut()
                .zip(&x[plane * r..(plane + 1) * r])
            {
                *o = v * sv;
            }
        }
        let ng = self.needs(&[input.index, scale.index]);
        Ok(self.push(
            xs,
            out,
            Op::ChannelScale {
                input: input.index,
                scale: scale.index,
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy; probabilities are clamped to
    /// `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, prob: Var, labels: &[Real]) -> Result<Var> {
        let n = self.node(prob)?;
        if n.value.len() != labels.len() {
            return Err(dim_err(format!(
                "bce: {} probabilities for {} labels",
                n.value.len(),
                labels.len()
            )));
        }
        let loss = bce_value(&n.value, labels);
        let ng = n.needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Bce {
                prob: prob.index,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar; returns gradients of every leaf.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let n = self.node(loss).map_err(|_| {
            Error::Usage("backward called on a value not recorded on this tape".into())
        })?;
        if n.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Input | Op::Param(_)) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let touched = self.backward_node(node, &dy, &mut grads);
            if let Some((name, factor)) = &self.fault {
                if name == node.op.name() {
                    for t in touched {
                        if let Some(g) = grads[t].as_mut() {
                            g.iter_mut().for_each(|v| *v *= *factor);
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    /// Reverse pass that accumulates parameter gradients into `params`.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(name), Some(g)) = (&node.op, g) {
                params.get_mut(name)?.accumulate_grad(g);
            }
        }
        Ok(())
    }

    /// Pushes `dy` through one node; returns the input slots it wrote to.
    fn backward_node(
        &self,
        node: &Node,
        dy: &[Real],
        grads: &mut [Option<Vec<Real>>],
    ) -> Vec<usize> {
        let needs = |i: usize| self.nodes[i].needs_grad;
        let val = |i: usize| -> &[Real] { &self.nodes[i].value };
        let mut touched = Vec::new();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (input, weight) = (*input, *weight);
                let b = node.shape[0];
                let cout = node.shape[1];
                let k = geom.col_rows();
                let p = geom.col_cols();
                let in_len = geom.cin * geom.h * geom.w;
                let x = val(input);
                let wt = val(weight);
                let mut cols = if geom.is_pointwise() {
                    Vec::new()
                } else {
                    vec![0.0; k * p]
                };
                let mut dcols = vec![0.0; k * p];
                let want_w = needs(weight);
                let want_x = needs(input);
                let mut dw = if want_w { vec![0.0; cout * k] } else { Vec::new() };
                let mut dx = if want_x { vec![0.0; b * in_len] } else { Vec::new() };
                for bi in 0..b {
                    let dyb = &dy[bi * cout * p..(bi + 1) * cout * p];
                    if want_w {
                        let xb = &x[bi * in_len..(bi + 1) * in_len];
                        let patches: &[Real] = if geom.is_pointwise() {
                            xb
                        } else {
                            im2col(xb, geom, &mut cols);
                            &cols
                        };
                        gemm(
                            1.0,
                            MatRef::new(dyb, cout, p),
                            MatRef::new_t(patches, k, p),
                            1.0,
                            &mut dw,
                        );
                    }
                    if want_x {
                        let dxb = &mut dx[bi * in_len..(bi + 1) * in_len];
                        if geom.is_pointwise() {
                            gemm(
                                1.0,
                                MatRef::new_t(wt, cout, k),
                                MatRef::new(dyb, cout, p),
                                1.0,
                                dxb,
                            );
                        } else {
                            gemm(
                                1.0,
                                MatRef::new_t(wt, cout, k),
                                MatRef::new(dyb, cout, p),
                                0.0,
                                &mut dcols,
                            );
                            col2im_add(&dcols, geom, dxb);
                        }
                    }
                }
                if want_w {
                    add_into(grads, weight, &dw);
                    touched.push(weight);
                }
                if want_x {
                    add_into(grads, input, &dx);
                    touched.push(input);
                }
                if let Some(bi) = *bias {
                    if needs(bi) {
                        let mut db = vec![0.0; cout];
                        for (plane, chunk) in dy.chunks(p).enumerate() {
                            db[plane % cout] += chunk.iter().sum::<Real>();
                        }
                        add_into(grads, bi, &db);
                        touched.push(bi);
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            } => {
                let (input, gamma, beta) = (*input, *gamma, *beta);
                let (b, c) = (node.shape[0], node.shape[1]);
                let r: usize = node.shape[2..].iter().product();
                let n = (b * r) as Real;
                let x = val(input);
                let g = val(gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    for bi in 0..b {
                        let off = (bi * c + ch) * r;
                        for j in off..off + r {
                            let xhat = (x[j] - mean[ch]) * inv_std[ch];
                            dgamma[ch] += dy[j] * xhat;
                            dbeta[ch] += dy[j];
                        }
                    }
                }
                if needs(input) {
                    let mut dx = vec![0.0; x.len()];
                    for ch in 0..c {
                        let is = inv_std[ch];
                        for bi in 0..b {
                            let off = (bi * c + ch) * r;
                            for j in off..off + r {
                                dx[j] = if *training {
                                    let xhat = (x[j] - mean[ch]) * is;
                                    g[ch] * is / n * (n * dy[j] - dbeta[ch] - xhat * dgamma[ch])
                                } else {
                                    g[ch] * is * dy[j]
                                };
                            }
                        }
                    }
                    add_into(grads, input, &dx);
                    touched.push(input);
                }
                if needs(gamma) {
                    add_into(grads, gamma, &dgamma);
                    touched.push(gamma);
                }
                if needs(beta) {
                    add_into(grads, beta, &dbeta);
                    touched.push(beta);
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                let s = slot(grads, *a, x.len());
                for ((g, d), v) in s.iter_mut().zip(dy).zip(x) {
                    if *v > 0.0 {
                        *g += d;
                    }
                }
                touched.push(*a);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let s = slot(grads, *a, y.len());
                for ((g, d), yv) in s.iter_mut().zip(dy).zip(y.iter()) {
                    *g += d * yv * (1.0 - yv);
                }
                touched.push(*a);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let last = *node.shape.last().unwrap();
                let s = slot(grads, *a, y.len());
                for ((grow, dyrow), yrow) in s
                    .chunks_mut(last)
                    .zip(dy.chunks(last))
                    .zip(y.chunks(last))
                {
                    let dot: Real = dyrow.iter().zip(yrow).map(|(d, v)| d * v).sum();
                    for ((g, d), v) in grow.iter_mut().zip(dyrow).zip(yrow) {
                        *g += v * (d - dot);
                    }
                }
                touched.push(*a);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (input, weight) = (*input, *weight);
                let (b, m) = (node.shape[0], node.shape[1]);
                let n = self.nodes[weight].shape[1];
                if needs(input) {
                    let s = slot(grads, input, b * n);
                    gemm(
                        1.0,
                        MatRef::new(dy, b, m),
                        MatRef::new(val(weight), m, n),
                        1.0,
                        s,
                    );
                    touched.push(input);
                }
                if needs(weight) {
                    let s = slot(grads, weight, m * n);
                    gemm(
                        1.0,
                        MatRef::new_t(dy, b, m),
                        MatRef::new(val(input), b, n),
                        1.0,
                        s,
                    );
                    touched.push(weight);
                }
                if let Some(bi) = *bias {
                    if needs(bi) {
                        let s = slot(grads, bi, m);
                        for row in dy.chunks(m) {
                            s.iter_mut().zip(row).for_each(|(a, d)| *a += d);
                        }
                        touched.push(bi);
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                let len = self.nodes[*input].value.len();
                let s = slot(grads, *input, len);
                for (d, &src) in dy.iter().zip(argmax) {
                    s[src] += d;
                }
                touched.push(*input);
            }
            Op::AdaptiveAvgPool {
                input,
                out_h,
                out_w,
            } => {
                let is = &self.nodes[*input].shape;
                let (h, w) = (is[2], is[3]);
                let planes = is[0] * is[1];
                let s = slot(grads, *input, planes * h * w);
                for plane in 0..planes {
                    let base = plane * h * w;
                    for oy in 0..*out_h {
                        let (y0, y1) = adaptive_range(oy, h, *out_h);
                        for ox in 0..*out_w {
                            let (x0, x1) = adaptive_range(ox, w, *out_w);
                            let d = dy[(plane * out_h + oy) * out_w + ox]
                                / ((y1 - y0) * (x1 - x0)) as Real;
                            for iy in y0..y1 {
                                s[base + iy * w + x0..base + iy * w + x1]
                                    .iter_mut()
                                    .for_each(|v| *v += d);
                            }
                        }
                    }
                }
                touched.push(*input);
            }
            Op::Dropout { input, scale } => {
                let s = slot(grads, *input, scale.len());
                for ((g, d), k) in s.iter_mut().zip(dy).zip(scale) {
                    *g += d * k;
                }
                touched.push(*input);
            }
            Op::Add(a, b) => {
                for &i in [a, b] {
                    if needs(i) {
                        add_into(grads, i, dy);
                        touched.push(i);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                for (target, other) in [(a, b), (b, a)] {
                    if needs(target) {
                        let o = val(other);
                        let s = slot(grads, target, o.len());
                        for ((g, d), v) in s.iter_mut().zip(dy).zip(o) {
                            *g += d * v;
                        }
                        touched.push(target);
                    }
                }
            }
            Op::Scale(a, f) => {
                let s = slot(grads, *a, dy.len());
                s.iter_mut().zip(dy).for_each(|(g, d)| *g += d * f);
                touched.push(*a);
            }
            Op::Sum(a) => {
                let len = self.nodes[*a].value.len();
                slot(grads, *a, len).iter_mut().for_each(|g| *g += dy[0]);
                touched.push(*a);
            }
            Op::Mean(a) => {
                let len = self.nodes[*a].value.len();
                let d = dy[0] / len as Real;
                slot(grads, *a, len).iter_mut().for_each(|g| *g += d);
                touched.push(*a);
            }
            Op::Reshape(a) => {
                add_into(grads, *a, dy);
                touched.push(*a);
            }
            Op::Concat(parts) => {
                let (b, total) = (node.shape[0], node.shape[1]);
                let mut col = 0;
                for &p in parts {
                    let wd = self.nodes[p].shape[1];
                    if needs(p) {
                        let s = slot(grads, p, b * wd);
                        for r in 0..b {
                            s[r * wd..(r + 1) * wd]
                                .iter_mut()
                                .zip(&dy[r * total + col..r * total + col + wd])
                                .for_each(|(g, d)| *g += d);
                        }
                        touched.push(p);
                    }
                    col += wd;
                }
            }
            Op::Stack(items) => {
                let (b, k, d) = (node.shape[0], node.shape[1], node.shape[2]);
                for (ki, &it) in items.iter().enumerate() {
                    if needs(it) {
                        let s = slot(grads, it, b * d);
                        for r in 0..b {
                            s[r * d..(r + 1) * d]
                                .iter_mut()
                                .zip(&dy[(r * k + ki) * d..(r * k + ki + 1) * d])
                                .for_each(|(g, dd)| *g += dd);
                        }
                        touched.push(it);
                    }
                }
            }
            Op::Mix { weights, items } => {
                let (weights, items) = (*weights, *items);
                let is = &self.nodes[items].shape;
                let (b, k, d) = (is[0], is[1], is[2]);
                let w = val(weights);
                let x = val(items);
                if needs(weights) {
                    let s = slot(grads, weights, b * k);
                    for r in 0..b {
                        let dyr = &dy[r * d..(r + 1) * d];
                        for ki in 0..k {
                            let row = &x[(r * k + ki) * d..(r * k + ki + 1) * d];
                            s[r * k + ki] += dyr.iter().zip(row).map(|(a, v)| a * v).sum::<Real>();
                        }
                    }
                    touched.push(weights);
                }
                if needs(items) {
                    let s = slot(grads, items, b * k * d);
                    for r in 0..b {
                        let dyr = &dy[r * d..(r + 1) * d];
                        for ki in 0..k {
                            let wk = w[r * k + ki];
                            s[(r * k + ki) * d..(r * k + ki + 1) * d]
                                .iter_mut()
                                .zip(dyr)
                                .for_each(|(g, dd)| *g += wk * dd);
                        }
                    }
                    touched.push(items);
                }
            }
            Op::ChannelScale { input, scale } => {
                let (input, scale) = (*input, *scale);
                let r: usize = node.shape[2..].iter().product();
                let x = val(input);
                let sv = val(scale);
                if needs(scale) {
                    let s = slot(grads, scale, sv.len());
                    for (plane, g) in s.iter_mut().enumerate() {
                        *g += dy[plane * r..(plane + 1) * r]
                            .iter()
                            .zip(&x[plane * r..(plane + 1) * r])
                            .map(|(a, b)| a * b)
                            .sum::<Real>();
                    }
                    touched.push(scale);
                }
                if needs(input) {
                    let s = slot(grads, input, x.len());
                    for (plane, k) in sv.iter().enumerate() {
                        s[plane * r..(plane + 1) * r]
                            .iter_mut()
                            .zip(&dy[plane * r..(plane + 1) * r])
                            .for_each(|(g, d)| *g += d * k);
                    }
                    touched.push(input);
                }
            }
            Op::Bce { prob, labels } => {
                let p = val(*prob);
                let n = p.len() as Real;
                let s = slot(grads, *prob, p.len());
                for ((g, &pv), &y) in s.iter_mut().zip(p).zip(labels) {
                    if pv > BCE_CLAMP && pv < 1.0 - BCE_CLAMP {
                        *g += dy[0] * (-y / pv + (1.0 - y) / (1.0 - pv)) / n;
                    }
                }
                touched.push(*prob);
            }
        }
        touched
    }
}

const BCE_CLAMP: Real = 1e-7;

pub(crate) fn bce_value(prob: &[Real], labels: &[Real]) -> Real {
    let n = prob.len() as Real;
    prob.iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<Real>()
        / n
}

pub fn sigmoid(v: Real) -> Real {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [Real]) {
    let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
