//! Deterministic minibatch SGD training and evaluation.

pub mod checkpoint;
pub mod data;
pub mod optim;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Meta};
pub use data::{load_cifar10_bin, load_idx, Dataset, DatasetFormat, DatasetSpec};
pub use optim::{sgd_update, Sgd, SgdParams};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::ops::{softmax_cross_entropy, Mode};
use crate::rng::Rng;

const EVAL_BATCH: usize = 256;

fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    5e-4
}
fn default_batch() -> usize {
    128
}
fn default_epochs() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// `(epoch, multiplier)` pairs, 0-based; the last entry with
    /// `epoch <= e` applies. `None` means ×0.1 at half and ×0.01 at three
    /// quarters of the run.
    #[serde(default)]
    pub lr_schedule: Option<Vec<(usize, f64)>>,
    #[serde(default)]
    pub seed: u64,
    /// Random crop + flip. `None` enables it for CIFAR-format data only.
    #[serde(default)]
    pub augment: Option<bool>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_wd(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            lr_schedule: None,
            seed: 0,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn default_schedule(epochs: usize) -> Vec<(usize, f64)> {
        [(epochs / 2, 0.1), (3 * epochs / 4, 0.01)]
            .into_iter()
            .filter(|&(e, _)| e > 0)
            .collect()
    }

    pub fn schedule(&self) -> Vec<(usize, f64)> {
        self.lr_schedule
            .clone()
            .unwrap_or_else(|| Self::default_schedule(self.epochs))
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mult = self
            .schedule()
            .iter()
            .rev()
            .find(|&&(e, _)| e <= epoch)
            .map(|&(_, m)| m)
            .unwrap_or(1.0);
        self.lr * mult
    }

    /// Copy with every defaulted choice made explicit.
    pub fn resolved(&self, format: DatasetFormat) -> TrainConfig {
        TrainConfig {
            lr_schedule: Some(self.schedule()),
            augment: Some(self.augment.unwrap_or(format == DatasetFormat::Cifar10Bin)),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.schedule().iter().any(|&(_, m)| !(m.is_finite() && m > 0.0)) {
            return bad("lr_schedule multipliers must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,test_acc\n");
        for r in &self.epochs {
            writeln!(s, "{},{},{},{}", r.epoch, r.lr, r.train_loss, r.test_acc).expect("write to String");
        }
        s
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.test_acc)
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainingLog,
}

fn check_compatible(cfg: &ModelConfig, ds: &Dataset, split: &str) -> Result<()> {
    let s = ds.images.shape();
    if s.c != cfg.in_channels || s.h != cfg.input_size || s.w != cfg.input_size {
        return Err(Error::Config(format!(
            "{split} images are {}x{}x{} but the model expects {}x{}x{}",
            s.c, s.h, s.w, cfg.in_channels, cfg.input_size, cfg.input_size
        )));
    }
    if let Some(m) = ds.max_label() {
        if m >= cfg.num_classes {
            return Err(Error::Config(format!(
                "{split} label {m} does not fit num_classes = {}",
                cfg.num_classes
            )));
        }
    }
    Ok(())
}

/// Minibatch order for one epoch. A trailing batch of one sample is dropped
/// because train-mode BN needs two.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

/// Trains a fresh model. Initialization, shuffling, augmentation and RReLU
/// draws all come from separate streams of `cfg.seed`.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    check_compatible(model_cfg, train_set, "train")?;
    check_compatible(model_cfg, test_set, "test")?;
    if train_set.len() < 2 {
        return Err(Error::Data(format!("need at least 2 training samples, got {}", train_set.len())));
    }
    let root = Rng::new(cfg.seed);
    let mut model = Model::build(model_cfg, &root.fork("init", 0))?;
    let mut opt = Sgd::new();
    let augment = cfg.augment.unwrap_or(false);
    let mut log = TrainingLog::default();
    for epoch in 0..cfg.epochs {
        let hp = SgdParams {
            lr: cfg.lr_at(epoch),
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        let mut shuffle = root.fork("shuffle", epoch as u64);
        let mut aug_rng = root.fork("augment", epoch as u64);
        let mut act_rng = root.fork("rrelu", epoch as u64);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for idx in epoch_batches(train_set.len(), cfg.batch_size, &mut shuffle) {
            let (mut x, y) = train_set.batch(&idx)?;
            if augment {
                x = data::augment_crop_flip(&x, &mut aug_rng);
            }
            let logits = model.forward(&x, Mode::Train, Some(&mut act_rng))?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("loss became {loss} in epoch {}", epoch + 1)));
            }
            model.zero_grad();
            model.backward(&grad)?;
            opt.step(&mut model, &hp)?;
            loss_sum += loss * y.len() as f64;
            seen += y.len();
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: hp.lr,
            train_loss: loss_sum / seen as f64,
            test_acc: evaluate(&mut model, test_set)?,
        };
        on_epoch(&record);
        log.epochs.push(record);
    }
    model.clear_cache();
    Ok(TrainOutcome { model, log })
}

/// Eval-mode logits for a whole dataset, in batches.
pub fn predict(model: &mut Model, ds: &Dataset) -> Result<Vec<usize>> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on 0 samples".into()));
    }
    let mut out = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let (x, _) = ds.batch(idx)?;
        let logits = model.forward(&x, Mode::Eval, None)?;
        let k = logits.shape().sample_len();
        for row in logits.data().chunks(k) {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    model.clear_cache();
    Ok(out)
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(model: &mut Model, ds: &Dataset) -> Result<f64> {
    let pred = predict(model, ds)?;
    let hits = pred.iter().zip(&ds.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Mean cross-entropy of the model on `ds` in eval mode.
pub fn mean_loss(model: &mut Model, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on 0 samples".into()));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    for idx in all.chunks(EVAL_BATCH) {
        let (x, y) = ds.batch(idx)?;
        let logits = model.forward(&x, Mode::Eval, None)?;
        total += softmax_cross_entropy(&logits, &y)?.0 * y.len() as f64;
    }
    model.clear_cache();
    Ok(total / ds.len() as f64)
}
