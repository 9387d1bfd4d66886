//! Desk-scale supervised training: data, optimizer, loops and the local-scan
//! ablation harness.

mod ablation;
mod data;
mod optim;

pub use ablation::{ablation_configs, ablation_harness, AblationRow, AblationTable};
pub use data::{load_idx, parse_idx, synth_dataset, write_idx, Dataset, SynthSpec, BACKGROUND_MAX, CONTRAST, MOTIFS, SYNTH_CELL};
pub use optim::{cosine_lr, AdamW, AdamWConfig, StepOutcome};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::ndtensor::{substream, Element, Tape, Tensor, Var};
use crate::params::ParamStore;

fn d_lr() -> f64 {
    1e-3
}
fn d_epochs() -> usize {
    20
}
fn d_batch() -> usize {
    64
}
fn d_wd() -> f64 {
    0.05
}
fn d_warmup() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_wd")]
    pub wd: f64,
    /// Fraction of all steps spent in linear warmup.
    #[serde(default = "d_warmup")]
    pub warmup: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: d_lr(),
            epochs: d_epochs(),
            batch: d_batch(),
            seed: 0,
            wd: d_wd(),
            warmup: d_warmup(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.wd >= 0.0) || self.batch == 0 || !(0.0..1.0).contains(&self.warmup) {
            return Err(Error::Config(format!(
                "train needs lr >= 0, wd >= 0, batch >= 1 and 0 <= warmup < 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `logits [B, C]` against integer labels.
pub fn cross_entropy<T: Element>(tape: &Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits)?;
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape(format!(
            "cross_entropy expects logits [{}, C], got {s:?}",
            labels.len()
        )));
    }
    let c = s[1];
    let mut onehot = vec![T::zero(); labels.len() * c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::IndexOutOfRange { index: l, len: c });
        }
        onehot[i * c + l] = T::one();
    }
    let lp = tape.log_softmax(logits, 1)?;
    let mask = tape.constant(Tensor::new(s.clone(), onehot)?);
    let picked = tape.mul(lp, mask)?;
    let total = tape.sum_all(picked)?;
    tape.scale(total, -1.0 / labels.len() as f64)
}

/// Row-wise argmax (lowest index on ties).
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Matrices get weight decay; norms, biases, `A_log`, skips and the
/// position embedding do not.
pub fn decay_mask<T: Element>(store: &ParamStore<T>) -> Vec<bool> {
    store
        .iter()
        .map(|(name, t)| t.ndim() >= 2 && !name.ends_with("a_log") && name != "pos_embed")
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, total_steps: usize, warmup_frac: f64) -> Self {
        let warmup = (total_steps as f64 * warmup_frac).round() as usize;
        Schedule {
            base_lr,
            total_steps,
            warmup_steps: warmup.min(total_steps.saturating_sub(1)),
        }
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        cosine_lr(step.min(self.total_steps), self.total_steps, self.base_lr, self.warmup_steps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub acc: f64,
    pub lr: f64,
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub top1: f64,
}

/// Architecture logits trained alongside the weights during search.
#[derive(Clone, Debug)]
pub struct AlphaState<T> {
    pub logits: Tensor<T>,
    pub opt: AdamW<T>,
    /// Peak learning rate; follows the same warmup/cosine shape as the weights.
    pub base_lr: f64,
}

/// Model, optimizer and schedule bundled for step-by-step training.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub schedule: Schedule,
    pub step: usize,
    pub batch: usize,
    pub seed: u64,
    pub alpha: Option<AlphaState<T>>,
}

/// Loss and accuracy sums over one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchResult {
    pub loss: f64,
    pub correct: usize,
    pub applied: bool,
}

impl<T: Element> Trainer<T> {
    pub fn new(model: Model<T>, cfg: &TrainConfig, train_len: usize) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(
            model.store.tensors(),
            AdamWConfig {
                weight_decay: cfg.wd,
                ..Default::default()
            },
            decay_mask(&model.store),
        )?;
        let per_epoch = train_len.div_ceil(cfg.batch);
        Ok(Trainer {
            model,
            opt,
            schedule: Schedule::new(cfg.lr, per_epoch * cfg.epochs, cfg.warmup),
            step: 0,
            batch: cfg.batch,
            seed: cfg.seed,
            alpha: None,
        })
    }

    /// One forward/backward pass and an optimizer step for each of the
    /// weights and (when searching) the architecture logits.
    pub fn train_batch(&mut self, images: &Tensor<T>, labels: &[usize], lr: f64, alpha_lr: f64) -> Result<BatchResult> {
        let tape = Tape::new();
        let bound = self.model.store.bind(&tape, true);
        let alpha = self.alpha.as_ref().map(|a| tape.param(&a.logits));
        let x = tape.constant(images.clone());
        let forward = self
            .model
            .forward(&tape, &bound, x, alpha)
            .and_then(|logits| Ok((logits, cross_entropy(&tape, logits, labels)?)));
        let (logits, loss) = match forward {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                return Ok(BatchResult {
                    loss: f64::NAN,
                    correct: 0,
                    applied: false,
                })
            }
            Err(e) => return Err(e),
        };
        let loss_value = tape.value(loss)?.data()[0].as_f64();
        let correct = argmax_rows(&*tape.value(logits)?)
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        let grads = tape.backward(loss)?;
        self.model.store.assign_grads(&bound, &grads)?;
        let mut applied = self.opt.step(self.model.store.tensors_mut(), lr)? == StepOutcome::Applied;
        if let (Some(a), Some(av)) = (self.alpha.as_mut(), alpha) {
            a.logits.set_grad(grads.wrt(av)?.into_data())?;
            if applied {
                applied = a.opt.step(std::slice::from_mut(&mut a.logits), alpha_lr)? == StepOutcome::Applied;
            }
        }
        self.model.store.clear_grads();
        Ok(BatchResult {
            loss: loss_value * labels.len() as f64,
            correct,
            applied,
        })
    }

    /// Seeded shuffle, then one pass of minibatch steps.
    pub fn train_epoch(&mut self, data: &Dataset, epoch: usize) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut substream(self.seed, &format!("shuffle/{epoch}")));
        let (mut loss, mut correct, mut seen, mut skipped) = (0.0, 0, 0, 0);
        let mut lr = 0.0;
        for chunk in order.chunks(self.batch) {
            lr = self.schedule.lr(self.step)?;
            let (images, labels) = data.batch::<T>(chunk)?;
            let r = self.train_batch(&images, &labels, lr, self.alpha_lr(lr))?;
            self.step += 1;
            if !r.applied {
                skipped += 1;
            }
            if r.loss.is_finite() {
                loss += r.loss;
                correct += r.correct;
                seen += chunk.len();
            }
        }
        Ok(EpochMetrics {
            epoch,
            mean_loss: if seen > 0 { loss / seen as f64 } else { f64::NAN },
            acc: if seen > 0 { correct as f64 / seen as f64 } else { 0.0 },
            lr,
            skipped,
        })
    }

    /// Architecture learning rate matching the weights' schedule position.
    pub fn alpha_lr(&self, lr: f64) -> f64 {
        match &self.alpha {
            Some(a) if self.schedule.base_lr > 0.0 => a.base_lr * lr / self.schedule.base_lr,
            Some(a) => a.base_lr,
            None => 0.0,
        }
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<EvalMetrics> {
        evaluate(&self.model, data, self.batch, self.alpha.as_ref().map(|a| &a.logits))
    }
}

/// Mean loss and exact top-1 accuracy; parameters are read only.
pub fn evaluate<T: Element>(model: &Model<T>, data: &Dataset, batch: usize, alpha: Option<&Tensor<T>>) -> Result<EvalMetrics> {
    if data.is_empty() || batch == 0 {
        return Err(Error::InvalidArgument("evaluate needs data and batch >= 1".into()));
    }
    let (mut loss, mut correct) = (0.0, 0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch) {
        let (images, labels) = data.batch::<T>(chunk)?;
        let tape = Tape::new();
        let bound = model.store.bind(&tape, false);
        let x = tape.constant(images);
        let a = alpha.map(|a| tape.constant(a.clone()));
        let logits = model.forward(&tape, &bound, x, a)?;
        let l = cross_entropy(&tape, logits, &labels)?;
        loss += tape.value(l)?.data()[0].as_f64() * chunk.len() as f64;
        correct += argmax_rows(&*tape.value(logits)?)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(EvalMetrics {
        loss: loss / data.len() as f64,
        top1: correct as f64 / data.len() as f64,
    })
}

/// Per-epoch record emitted by [`fit`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub train: EpochMetrics,
    pub val: EvalMetrics,
}

/// Trains for `cfg.epochs`, evaluating on `val` after every epoch.
pub fn fit<T: Element>(
    trainer: &mut Trainer<T>,
    train: &Dataset,
    val: &Dataset,
    epochs: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    let mut out = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let t = trainer.train_epoch(train, epoch)?;
        let v = trainer.evaluate(val)?;
        let rec = EpochRecord { train: t, val: v };
        on_epoch(&rec);
        out.push(rec);
    }
    Ok(out)
}

/// Free-function form of [`Trainer::train_epoch`].
pub fn train_epoch<T: Element>(trainer: &mut Trainer<T>, data: &Dataset, epoch: usize) -> Result<EpochMetrics> {
    trainer.train_epoch(data, epoch)
}
