//! Seeding, loss, Adam, the plateau scheduler, best-epoch selection and the
//! epoch loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Preset;
use crate::data::{batch_iter, BatchOptions, Sample, Split};
use crate::moe::{CsaMoeModel, Expert, ModelConfig, Variant};
use crate::{Error, ParamSet, Real, Result, Tape};

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Split = 2,
    Shuffle = 3,
    Augment = 4,
    Dropout = 5,
    Synth = 6,
}

/// Every random draw in the pipeline comes from `Seeds::rng(stream, epoch,
/// index)`: the base seed, the purpose, the epoch and a per-purpose index
/// (sample position, batch number or class) are mixed with SplitMix64 into
/// a ChaCha8 seed. Streams never share state, so toggling one source of
/// randomness leaves the others untouched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    base: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl Seeds {
    pub fn new(base: u64) -> Self {
        Self { base }
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn derive(&self, stream: Stream, epoch: u64, index: u64) -> u64 {
        let mut h = splitmix64(self.base);
        for part in [stream as u64, epoch, index] {
            h = splitmix64(h ^ part);
        }
        h
    }

    pub fn rng(&self, stream: Stream, epoch: u64, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive(stream, epoch, index))
    }
}

/// Seeds every randomness source of a run from one integer.
pub fn seed_all(seed: u64) -> Seeds {
    Seeds::new(seed)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1-1e-7]`.
pub fn bce_loss(prob: &[Real], labels: &[Real]) -> Real {
    crate::autograd::bce_value(prob, labels)
}

/// Adam with bias correction and optional L2 weight decay added to the
/// gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
    step: u64,
    moments: BTreeMap<String, (Vec<Real>, Vec<Real>)>,
}

impl Adam {
    pub fn new(params: &ParamSet, weight_decay: Real) -> Self {
        let moments = params
            .trainable()
            .map(|(n, t)| (n.to_string(), (vec![0.0; t.len()], vec![0.0; t.len()])))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable entry from its accumulated gradient.
    pub fn step(&mut self, params: &mut ParamSet, lr: Real) -> Result<()> {
        let names: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            if params.get(name)?.grad().is_none() {
                return Err(Error::MissingGrad(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for name in &names {
            let (m, v) = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::Usage(format!("optimizer has no state for `{name}`")))?;
            let p = params.get_mut(name)?;
            let grad = p.grad().expect("checked above").to_vec();
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad[i] + self.weight_decay * data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                data[i] -= update;
            }
        }
        Ok(())
    }
}

/// Halves the learning rate after `patience` epochs without a strict
/// decrease of the validation loss, never going below `min_lr`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub factor: Real,
    pub patience: usize,
    pub min_lr: Real,
    lr: Real,
    best: Real,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: Real, factor: Real, patience: usize, min_lr: Real) -> Result<Self> {
        if patience == 0 || min_lr > lr || !(0.0..1.0).contains(&factor) {
            return Err(Error::Usage(format!(
                "invalid scheduler settings: lr {lr}, min_lr {min_lr}, factor {factor}, patience {patience}"
            )));
        }
        Ok(Self {
            factor,
            patience,
            min_lr,
            lr,
            best: Real::INFINITY,
            bad_epochs: 0,
        })
    }

    pub fn lr(&self) -> Real {
        self.lr
    }

    /// Records one validation loss; returns true when the rate was cut.
    pub fn step(&mut self, val_loss: Real) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs < self.patience {
            return false;
        }
        self.bad_epochs = 0;
        let next = (self.lr * self.factor).max(self.min_lr);
        let cut = next < self.lr;
        self.lr = next;
        cut
    }
}

/// Keeps the parameters of the epoch with the highest validation accuracy;
/// ties keep the earlier epoch.
#[derive(Clone, Debug, Default)]
pub struct BestSnapshot {
    pub accuracy: Option<Real>,
    pub epoch: Option<usize>,
    pub params: Option<ParamSet>,
}

impl BestSnapshot {
    pub fn offer(&mut self, epoch: usize, accuracy: Real, params: &ParamSet) -> bool {
        if self.accuracy.is_some_and(|best| accuracy <= best) {
            return false;
        }
        self.accuracy = Some(accuracy);
        self.epoch = Some(epoch);
        self.params = Some(params.clone());
        true
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Real,
    pub weight_decay: Real,
    pub lr_factor: Real,
    pub lr_patience: usize,
    pub min_lr: Real,
    pub seed: u64,
    pub preset: Preset,
    pub variant: Variant,
    pub dropped: Option<Expert>,
    pub augment: bool,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 5e-5,
            weight_decay: 0.0,
            lr_factor: 0.5,
            lr_patience: 3,
            min_lr: 1e-6,
            seed: 42,
            preset: Preset::Full,
            variant: Variant::CsaMoe,
            dropped: None,
            augment: true,
            workers: 4,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::for_preset(self.preset, self.variant).with_dropped(self.dropped)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Usage("epochs and batch_size must be positive".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Usage(format!("lr must be positive, got {}", self.lr)));
        }
        PlateauScheduler::new(self.lr, self.lr_factor, self.lr_patience, self.min_lr)?;
        self.model_config()?;
        Ok(())
    }
}

/// One row of the per-epoch log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// `train` or `val`.
    pub part: &'static str,
    pub loss: Real,
    pub accuracy: Real,
    /// Mean gate weight per expert (img, tumor, boundary).
    pub gate: [Real; 3],
    /// Learning rate in effect during the epoch.
    pub lr: Real,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,part,loss,accuracy,gate_img,gate_tumor,gate_boundary,lr";

pub fn epoch_log_csv(logs: &[EpochLog]) -> String {
    let mut out = format!("{EPOCH_LOG_HEADER}\n");
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            l.epoch, l.part, l.loss, l.accuracy, l.gate[0], l.gate[1], l.gate[2], l.lr
        );
    }
    out
}

/// Mean stage weights and channel weight of one expert's attention over a
/// part.
#[derive(Clone, Debug, PartialEq)]
pub struct CsaTraceRow {
    pub epoch: usize,
    pub part: &'static str,
    pub expert: Expert,
    pub alpha: [Real; 4],
    pub channel_weight_mean: Real,
}

pub const CSA_TRACE_HEADER: &str = "epoch,part,expert,alpha1,alpha2,alpha3,alpha4,channel_weight_mean";

pub fn csa_trace_csv(rows: &[CsaTraceRow]) -> String {
    let mut out = format!("{CSA_TRACE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.part,
            r.expert.as_str(),
            r.alpha[0],
            r.alpha[1],
            r.alpha[2],
            r.alpha[3],
            r.channel_weight_mean
        );
    }
    out
}

/// Running sums over one pass.
#[derive(Default)]
struct PassStats {
    n: usize,
    loss_sum: Real,
    correct: usize,
    gate_sum: [Real; 3],
    alpha_sum: BTreeMap<Expert, ([Real; 4], Real)>,
}

impl PassStats {
    fn add(&mut self, probs: &[Real], labels: &[Real], loss: Real, out: &crate::moe::ModelOutput) {
        let b = probs.len();
        self.n += b;
        self.loss_sum += loss * b as Real;
        self.correct += probs
            .iter()
            .zip(labels)
            .filter(|(&p, &y)| (p >= 0.5) == (y >= 0.5))
            .count();
        for row in out.gate.data().chunks(3) {
            for (s, v) in self.gate_sum.iter_mut().zip(row) {
                *s += v;
            }
        }
        for (expert, trace) in &out.traces {
            let entry = self.alpha_sum.entry(*expert).or_default();
            for row in trace.alpha.data().chunks(4) {
                for (s, v) in entry.0.iter_mut().zip(row) {
                    *s += v;
                }
            }
            let cw = trace.channel_weights.data();
            let per_row = cw.len() / b;
            for row in cw.chunks(per_row) {
                entry.1 += row.iter().sum::<Real>() / per_row as Real;
            }
        }
    }

    fn log(&self, epoch: usize, part: &'static str, lr: Real) -> EpochLog {
        let n = self.n as Real;
        EpochLog {
            epoch,
            part,
            loss: self.loss_sum / n,
            accuracy: self.correct as Real / n,
            gate: self.gate_sum.map(|s| s / n),
            lr,
        }
    }

    fn traces(&self, epoch: usize, part: &'static str) -> Vec<CsaTraceRow> {
        let n = self.n as Real;
        self.alpha_sum
            .iter()
            .map(|(e, (a, c))| CsaTraceRow {
                epoch,
                part,
                expert: *e,
                alpha: a.map(|s| s / n),
                channel_weight_mean: c / n,
            })
            .collect()
    }
}

/// Eval-mode outputs over a part, in part order.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub ids: Vec<String>,
    pub labels: Vec<Real>,
    pub scores: Vec<Real>,
    /// `[N*3]` gate rows.
    pub gates: Vec<Real>,
    pub loss: Real,
}

fn eval_pass(
    model: &mut CsaMoeModel,
    samples: &[Sample],
    batch_size: usize,
    workers: usize,
    seeds: Seeds,
    stats: Option<&mut PassStats>,
) -> Result<Predictions> {
    let opts = BatchOptions {
        batch_size,
        shuffle: false,
        augment: false,
        workers,
    };
    let mut preds = Predictions {
        ids: Vec::new(),
        labels: Vec::new(),
        scores: Vec::new(),
        gates: Vec::new(),
        loss: 0.0,
    };
    let mut local = PassStats::default();
    let stats = stats.unwrap_or(&mut local);
    // eval mode draws nothing, the stream only satisfies the signature
    let mut rng = seeds.rng(Stream::Dropout, u64::MAX, 0);
    for batch in batch_iter(samples, opts, seeds, 0)? {
        let batch = batch?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch.views, false, &mut rng)?;
        let probs = tape.data(out.prob)?.to_vec();
        let loss = bce_loss(&probs, &batch.labels);
        stats.add(&probs, &batch.labels, loss, &out);
        preds.ids.extend(batch.ids);
        preds.labels.extend(&batch.labels);
        preds.scores.extend(probs);
        preds.gates.extend(out.gate.data());
    }
    preds.loss = stats.loss_sum / stats.n as Real;
    Ok(preds)
}

/// Scores a part with the model in eval mode.
pub fn predict(model: &mut CsaMoeModel, samples: &[Sample], batch_size: usize, workers: usize) -> Result<Predictions> {
    eval_pass(model, samples, batch_size, workers, Seeds::new(0), None)
}

pub struct FitResult {
    /// Model restored to the best-validation-accuracy epoch.
    pub model: CsaMoeModel,
    pub logs: Vec<EpochLog>,
    pub traces: Vec<CsaTraceRow>,
    pub best_epoch: usize,
    pub best_val_accuracy: Real,
    /// Loss of the very first training batch.
    pub initial_loss: Real,
}

/// Trains a fresh model on `split.train`, validating on `split.val` after
/// every epoch, and returns the best-validation-accuracy snapshot.
pub fn fit(config: &TrainConfig, split: &Split) -> Result<FitResult> {
    config.validate()?;
    let seeds = seed_all(config.seed);
    let model = CsaMoeModel::new(config.model_config()?, seeds.derive(Stream::Init, 0, 0))?;
    fit_model(config, split, model)
}

/// Like [`fit`] but starting from the given model.
pub fn fit_model(config: &TrainConfig, split: &Split, mut model: CsaMoeModel) -> Result<FitResult> {
    config.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Dataset("training and validation parts must be non-empty".into()));
    }
    let seeds = seed_all(config.seed);
    let mut adam = Adam::new(model.params(), config.weight_decay);
    let mut sched = PlateauScheduler::new(config.lr, config.lr_factor, config.lr_patience, config.min_lr)?;
    let mut best = BestSnapshot::default();
    let mut logs = Vec::new();
    let mut traces = Vec::new();
    let mut initial_loss = None;
    let opts = BatchOptions {
        batch_size: config.batch_size,
        shuffle: true,
        augment: config.augment,
        workers: config.workers,
    };
    for epoch in 0..config.epochs {
        let lr = sched.lr();
        let mut stats = PassStats::default();
        for (bi, batch) in batch_iter(&split.train, opts, seeds, epoch as u64)?.enumerate() {
            let batch = batch?;
            let mut drop_rng = seeds.rng(Stream::Dropout, epoch as u64, bi as u64);
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &batch.views, true, &mut drop_rng)?;
            let loss = tape.bce(out.prob, &batch.labels)?;
            let loss_value = tape.data(loss)?[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    lr: lr as f64,
                    detail: format!("training loss is {loss_value}"),
                });
            }
            initial_loss.get_or_insert(loss_value);
            let probs = tape.data(out.prob)?.to_vec();
            stats.add(&probs, &batch.labels, loss_value, &out);
            model.params_mut().zero_grads();
            tape.backward(loss, model.params_mut())?;
            drop(tape);
            adam.step(model.params_mut(), lr)?;
        }
        logs.push(stats.log(epoch, "train", lr));
        traces.extend(stats.traces(epoch, "train"));

        let mut vstats = PassStats::default();
        eval_pass(&mut model, &split.val, config.batch_size, config.workers, seeds, Some(&mut vstats))?;
        let val = vstats.log(epoch, "val", lr);
        if !val.loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: 0,
                lr: lr as f64,
                detail: format!("validation loss is {}", val.loss),
            });
        }
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.3} | val loss {:.4} acc {:.3} | lr {lr:e}",
            logs.last().expect("pushed").loss,
            logs.last().expect("pushed").accuracy,
            val.loss,
            val.accuracy
        );
        best.offer(epoch, val.accuracy, model.params());
        if sched.step(val.loss) {
            log::info!("epoch {epoch}: learning rate reduced to {:e}", sched.lr());
        }
        logs.push(val);
        traces.extend(vstats.traces(epoch, "val"));
    }
    let config_m = model.config().clone();
    let params = best.params.take().expect("at least one epoch ran");
    Ok(FitResult {
        model: CsaMoeModel::from_params(config_m, params)?,
        logs,
        traces,
        best_epoch: best.epoch.expect("set with params"),
        best_val_accuracy: best.accuracy.expect("set with params"),
        initial_loss: initial_loss.expect("at least one batch"),
    })
}

#[cfg(test)]
mod tests;
