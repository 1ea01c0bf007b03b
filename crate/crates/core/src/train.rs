//! Loss, Adam, the early-stopped epoch loop and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use crate::data::{batches, LoaderConfig, Manifest, Preprocess, Split};
use crate::error::{Error, Result};
use crate::model::{forward, Mode, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub use crate::checkpoint::{load_checkpoint, load_for_config, save_checkpoint};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Stop once an epoch's running train accuracy reaches this value.
    pub target_train_acc: Option<f64>,
    /// Batches decoded ahead of the training step.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 32,
            patience: 3,
            max_epochs: 100,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            target_train_acc: None,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.patience == 0 {
            return fail("patience must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return fail("batch_size and max_epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return fail("adam_eps must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| vec![T::zero(); t.numel()])
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// Bias-corrected Adam update of every parameter. Consumes the gradients,
/// so a second step without a new backward pass is a contract error.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state tracks {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    if let Some(name) = params
        .iter()
        .find(|(_, t)| t.grad().is_none())
        .map(|(n, _)| n.to_string())
    {
        return Err(Error::Contract(format!("parameter {name} has no gradient")));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = p.take_grad().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = g[k].as_f64();
            let mk = cfg.beta1 * m[k].as_f64() + (1.0 - cfg.beta1) * gk;
            let vk = cfg.beta2 * v[k].as_f64() + (1.0 - cfg.beta2) * gk * gk;
            m[k] = T::lit(mk);
            v[k] = T::lit(vk);
            let step = cfg.lr * (mk / c1) / ((vk / c2).sqrt() + cfg.eps);
            *w = T::lit(w.as_f64() - step);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,train_loss,train_acc,val_loss,val_acc,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.3}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.seconds
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Equality of everything except wall-clock time.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                (a.epoch, a.train_loss, a.train_acc, a.val_loss, a.val_acc)
                    == (b.epoch, b.train_loss, b.train_acc, b.val_loss, b.val_acc)
            })
    }

    pub fn min_val_loss(&self) -> Option<f64> {
        self.records.iter().map(|r| r.val_loss).reduce(f64::min)
    }
}

/// Patience counter over validation losses; only a strict decrease counts
/// as improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Verdict {
        let improved = match self.best {
            None => !val_loss.is_nan(),
            Some((_, b)) => val_loss < b,
        };
        if improved {
            self.best = Some((epoch, val_loss));
            self.stale = 0;
            return Verdict::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }

    /// `(epoch, loss)` of the best observation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// One model's worth of training and validation passes.
pub trait EpochRunner {
    type Snapshot;
    fn train_epoch(&mut self, epoch: usize) -> Result<EpochStats>;
    fn validate(&mut self) -> Result<EpochStats>;
    fn snapshot(&self) -> Self::Snapshot;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
    TargetReached,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopConfig {
    pub patience: usize,
    pub max_epochs: usize,
    pub target_train_acc: Option<f64>,
}

pub struct LoopOutcome<S> {
    pub best: S,
    pub best_epoch: usize,
    pub log: TrainLog,
    pub stopped: StopReason,
}

/// Alternate training and validation passes, keeping the snapshot with the
/// lowest validation loss.
pub fn run_epochs<R: EpochRunner>(
    runner: &mut R,
    cfg: LoopConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<LoopOutcome<R::Snapshot>> {
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut log = TrainLog::default();
    let mut best = None;
    let mut stopped = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let train = runner.train_epoch(epoch)?;
        let val = runner.validate()?;
        let record = EpochRecord {
            epoch,
            train_loss: train.loss,
            train_acc: train.accuracy,
            val_loss: val.loss,
            val_acc: val.accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        log.records.push(record);
        on_epoch(&record);
        let verdict = stopper.observe(epoch, val.loss);
        if verdict == Verdict::Improved || best.is_none() {
            best = Some(runner.snapshot());
        }
        if cfg.target_train_acc.is_some_and(|t| train.accuracy >= t) {
            stopped = StopReason::TargetReached;
            break;
        }
        if verdict == Verdict::Stop {
            stopped = StopReason::Patience;
            break;
        }
    }
    Ok(LoopOutcome {
        best: best.expect("at least one epoch"),
        best_epoch: stopper.best().map_or(1, |b| b.0),
        log,
        stopped,
    })
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per row of `[B, K]` logits.
pub fn predictions<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits.data().chunks(k).map(argmax).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean cross-entropy over samples.
    pub loss: f64,
    pub accuracy: f64,
    pub preds: Vec<usize>,
    pub labels: Vec<usize>,
}

pub struct EvalSetup<'a> {
    pub manifest: &'a Arc<Manifest>,
    pub prep: Preprocess,
    pub batch_size: usize,
    pub prefetch: usize,
}

/// Eval-mode pass over `split` in manifest order.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    split: Split,
    setup: &EvalSetup,
) -> Result<Evaluation> {
    let stream = batches(
        setup.manifest.clone(),
        split,
        setup.prep,
        LoaderConfig {
            batch_size: setup.batch_size,
            shuffle: false,
            seed: 0,
            epoch: 0,
            prefetch: setup.prefetch,
        },
    )?;
    let mut loss_sum = 0.0;
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for batch in stream {
        let batch = batch?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.images);
        let out = forward(cfg, params, &mut tape, x, Mode::Eval)?;
        let loss = tape.cross_entropy(out.logits, &batch.labels)?;
        loss_sum += tape.data(loss)[0] as f64 * batch.labels.len() as f64;
        preds.extend(predictions(tape.value(out.logits)));
        labels.extend(batch.labels);
    }
    let n = labels.len() as f64;
    let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64;
    Ok(Evaluation {
        loss: loss_sum / n,
        accuracy: correct / n,
        preds,
        labels,
    })
}

/// Seed of the dropout masks for one training step.
fn step_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (batch as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

/// One forward, backward and Adam update on a batch; returns the batch loss
/// and the number of correct predictions made before the update.
pub fn train_step(
    cfg: &ModelConfig,
    params: &mut ModelParams<f32>,
    adam: &mut AdamState<f32>,
    opt: &AdamConfig,
    images: Tensor<f32>,
    labels: &[usize],
    dropout_seed: u64,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let x = tape.constant(images);
    let out = forward(
        cfg,
        params,
        &mut tape,
        x,
        Mode::Train { seed: dropout_seed },
    )?;
    let loss = cross_entropy(&mut tape, out.logits, labels)?;
    let correct = predictions(tape.value(out.logits))
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    let value = tape.data(loss)[0] as f64;
    if !value.is_finite() {
        return Err(Error::Contract(format!("training loss became {value}")));
    }
    let grads = tape.backward(loss)?;
    params.accumulate(&tape, &grads)?;
    drop(tape);
    adam_step(params, adam, opt)?;
    Ok((value, correct))
}

struct ModelRunner<'a> {
    cfg: &'a ModelConfig,
    train: &'a TrainConfig,
    params: ModelParams<f32>,
    adam: AdamState<f32>,
    setup: EvalSetup<'a>,
}

impl EpochRunner for ModelRunner<'_> {
    type Snapshot = ModelParams<f32>;

    fn train_epoch(&mut self, epoch: usize) -> Result<EpochStats> {
        let stream = batches(
            self.setup.manifest.clone(),
            Split::Train,
            self.setup.prep,
            LoaderConfig {
                batch_size: self.train.batch_size,
                shuffle: true,
                seed: self.train.seed,
                epoch: epoch as u64,
                prefetch: self.train.prefetch,
            },
        )?;
        let opt = self.train.adam();
        let (mut loss_sum, mut correct, mut n) = (0.0, 0usize, 0usize);
        for (bi, batch) in stream.enumerate() {
            let batch = batch?;
            let b = batch.labels.len();
            let seed = step_seed(self.train.seed, epoch, bi);
            let (loss, ok) = train_step(
                self.cfg,
                &mut self.params,
                &mut self.adam,
                &opt,
                batch.images,
                &batch.labels,
                seed,
            )?;
            loss_sum += loss * b as f64;
            correct += ok;
            n += b;
        }
        Ok(EpochStats {
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        })
    }

    fn validate(&mut self) -> Result<EpochStats> {
        let e = evaluate(self.cfg, &self.params, Split::Val, &self.setup)?;
        Ok(EpochStats {
            loss: e.loss,
            accuracy: e.accuracy,
        })
    }

    fn snapshot(&self) -> ModelParams<f32> {
        self.params.clone()
    }
}

pub struct FitOutcome {
    pub params: ModelParams<f32>,
    pub best_epoch: usize,
    pub log: TrainLog,
    pub stopped: StopReason,
}

/// Train from the seeded initialisation until early stopping, the epoch
/// limit or the train-accuracy target; return the lowest-val-loss weights.
pub fn fit(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    manifest: &Arc<Manifest>,
    prep: Preprocess,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    prep.validate()?;
    for s in [Split::Train, Split::Val] {
        if manifest.indices(s).is_empty() {
            return Err(Error::Data(format!("the {} split is empty", s.as_str())));
        }
    }
    let params = crate::model::build::<f32>(model_cfg)?;
    let mut runner = ModelRunner {
        cfg: model_cfg,
        train: train_cfg,
        adam: AdamState::new(&params),
        params,
        setup: EvalSetup {
            manifest,
            prep,
            batch_size: train_cfg.batch_size,
            prefetch: train_cfg.prefetch,
        },
    };
    let out = run_epochs(
        &mut runner,
        LoopConfig {
            patience: train_cfg.patience,
            max_epochs: train_cfg.max_epochs,
            target_train_acc: train_cfg.target_train_acc,
        },
        on_epoch,
    )?;
    Ok(FitOutcome {
        params: out.best,
        best_epoch: out.best_epoch,
        log: out.log,
        stopped: out.stopped,
    })
}
