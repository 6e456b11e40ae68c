//! Teacher-forced training with a single plateau-triggered learning-rate
//! drop, plus the toy metrics used to track it.

mod metrics;
mod schedule;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{bleu4, evaluate, evaluate_record, token_accuracy, EvalMetrics};
pub use schedule::{PatienceMetric, PlateauSchedule};

use crate::error::{Error, Result};
use crate::model::{save_checkpoint, ForwardOptions, SbatModel};
use crate::numkit::{Adam, Graph, ParamId, Real, Var};
use crate::synthdata::CaptionRecord;

/// Optimizer, schedule and loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_drop: f64,
    pub patience_epochs: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub metric_for_patience: PatienceMetric,
    /// Global gradient-norm ceiling; `None` disables clipping.
    #[serde(with = "crate::serde_opt")]
    pub clip_norm: Option<f64>,
    /// Stop once validation token accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_initial: 1e-4,
            lr_drop: 2e-5,
            patience_epochs: 10,
            batch_size: 32,
            max_epochs: 100,
            seed: 0,
            metric_for_patience: PatienceMetric::TokenAccuracy,
            clip_norm: Some(5.0),
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr_drop < self.lr_initial) || self.lr_drop <= 0.0 {
            return fail("need 0 < lr_drop < lr_initial");
        }
        if self.patience_epochs == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return fail("patience_epochs, batch_size and max_epochs must be at least 1");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return fail("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Summed cross-entropy `-sum ln p(gold)` over rows with a target; PAD rows
/// carry `None` and contribute nothing.
pub fn xent_loss<R: Real>(g: &mut Graph<R>, probs: Var, targets: &[Option<usize>]) -> Result<Var> {
    g.nll(probs, targets)
}

/// Visiting order of the training set in `epoch`; a pure function of
/// `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

struct SampleGrad<R> {
    loss: f64,
    positions: usize,
    grads: Vec<(ParamId, Vec<R>)>,
}

fn sample_gradient<R: Real>(model: &SbatModel<R>, record: &CaptionRecord) -> Result<SampleGrad<R>> {
    let (image, motion) = (record.image()?, record.motion()?);
    let caption = record.primary_caption()?;
    let mut g = Graph::new();
    let tf = model.forward_teacher_forced(&mut g, &image, &motion, caption.ids(), ForwardOptions::default(), None)?;
    let loss = xent_loss(&mut g, tf.probs, &tf.targets)?;
    let value = g.value(loss).data()[0].as_f64();
    let positions = tf.targets.iter().flatten().count();
    let grads = g.backward(loss)?.into_param_grads();
    Ok(SampleGrad {
        loss: value,
        positions,
        grads,
    })
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Summed loss of the batch before the update.
    pub loss: f64,
    pub positions: usize,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// One Adam step on the mean per-record loss of `batch`. Per-record
/// gradients are computed in parallel and reduced in batch order.
pub fn train_step<R: Real>(
    model: &mut SbatModel<R>,
    batch: &[&CaptionRecord],
    adam: &Adam,
    clip_norm: Option<f64>,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    model.params_mut().zero_grads();
    let mut stats = StepStats {
        loss: 0.0,
        positions: 0,
        grad_norm: 0.0,
    };
    // One record per worker at a time keeps only a few dense gradients alive.
    for chunk in batch.chunks(rayon::current_num_threads().max(1)) {
        let parts = {
            let m = &*model;
            chunk
                .par_iter()
                .map(|r| sample_gradient(m, r))
                .collect::<Result<Vec<_>>>()?
        };
        let store = model.params_mut();
        for part in parts {
            stats.loss += part.loss;
            stats.positions += part.positions;
            for (id, g) in &part.grads {
                store.accumulate(*id, g)?;
            }
        }
    }
    let store = model.params_mut();
    if !stats.loss.is_finite() {
        return Ok(stats);
    }
    store.scale_grads(R::of(1.0 / batch.len() as f64));
    stats.grad_norm = store.grad_norm();
    if let Some(c) = clip_norm {
        if stats.grad_norm > c {
            store.scale_grads(R::of(c / stats.grad_norm));
        }
    }
    adam.step(store)?;
    Ok(stats)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean cross-entropy per scored training position.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_token_accuracy: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Last epoch run at the initial learning rate, if the drop happened.
    pub drop_epoch: Option<usize>,
    pub reached_target: bool,
}

impl TrainReport {
    pub fn last(&self) -> &EpochLog {
        self.epochs.last().expect("at least one epoch")
    }

    pub fn best_val_accuracy(&self) -> f64 {
        self.epochs
            .iter()
            .map(|e| e.val_token_accuracy)
            .fold(0.0, f64::max)
    }
}

/// Where [`train`] writes its log and best checkpoint.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub dir: PathBuf,
    /// Copied into the checkpoint manifest.
    pub meta: BTreeMap<String, String>,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Artifacts {
            dir: dir.into(),
            meta: BTreeMap::new(),
        }
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
}

/// Trains `model` in place. After each epoch the validation metrics are
/// logged; a new best patience metric saves `best.ckpt`.
pub fn train<R: Real>(
    model: &mut SbatModel<R>,
    train_set: &[CaptionRecord],
    val_set: &[CaptionRecord],
    cfg: &TrainConfig,
    artifacts: Option<&Artifacts>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let mut log = match artifacts {
        Some(a) => {
            fs::create_dir_all(&a.dir).map_err(|e| Error::io(&a.dir, e))?;
            let path = a.log_path();
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut schedule = PlateauSchedule::new(cfg.lr_initial, cfg.lr_drop, cfg.patience_epochs, cfg.metric_for_patience);
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_metric: f64::NAN,
        drop_epoch: None,
        reached_target: false,
    };
    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr();
        let adam = Adam { lr, ..Adam::default() };
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let (mut loss, mut positions) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&CaptionRecord> = chunk.iter().map(|&i| &train_set[i]).collect();
            let stats = train_step(model, &batch, &adam, cfg.clip_norm)?;
            if !stats.loss.is_finite() {
                return Err(Error::NonFinite { epoch, batch: b + 1 });
            }
            loss += stats.loss;
            positions += stats.positions;
        }
        let val = evaluate(model, val_set)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss / positions.max(1) as f64,
            val_loss: val.loss(),
            val_token_accuracy: val.token_accuracy(),
            lr,
        };
        let metric = match cfg.metric_for_patience {
            PatienceMetric::ValLoss => entry.val_loss,
            PatienceMetric::TokenAccuracy => entry.val_token_accuracy,
        };
        if schedule.observe(metric) {
            report.best_epoch = epoch;
            report.best_metric = metric;
            if let Some(a) = artifacts {
                save_checkpoint(&a.checkpoint_path(), model, cfg.seed, &a.meta)?;
            }
        }
        info!(
            "epoch {epoch}: train_loss={:.5} val_loss={:.5} val_acc={:.4} lr={lr:e}",
            entry.train_loss, entry.val_loss, entry.val_token_accuracy
        );
        if let Some((file, path)) = log.as_mut() {
            let line = serde_json::to_string(&entry)? + "\n";
            file.write_all(line.as_bytes()).map_err(|e| Error::io(&*path, e))?;
        }
        let done = cfg
            .target_accuracy
            .is_some_and(|t| entry.val_token_accuracy >= t);
        report.epochs.push(entry);
        if done {
            report.reached_target = true;
            break;
        }
    }
    report.drop_epoch = schedule.drop_epoch();
    Ok(report)
}

/// Reads a log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
