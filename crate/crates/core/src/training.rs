//! Epoch loop over mixed ground-truth and pseudo-labeled samples.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_bytes;
use crate::model::{Backbone, CombinedLoss, Adam, Segmenter};
use crate::schedule::seeded_rng;
use crate::types::{ProbMap, RasterImage, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub early_stop_patience: Option<usize>,
    /// Drives shuffling and dropout. Pipelines overwrite it with derived seeds.
    #[serde(default)]
    pub seed: u64,
    /// Return the parameters of the best validation epoch instead of the last.
    #[serde(default = "default_true")]
    pub restore_best: bool,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    /// Initial supervised model: up to 200 epochs, batch 10, dropout 0.25.
    pub fn initial() -> Self {
        Self {
            max_epochs: 200,
            batch_size: 10,
            learning_rate: 1e-4,
            dropout_rate: 0.25,
            early_stop_patience: Some(5),
            seed: 0,
            restore_best: true,
        }
    }

    /// Sub-models: up to 50 epochs, batch 1, no dropout.
    pub fn submodel() -> Self {
        Self {
            max_epochs: 50,
            batch_size: 1,
            learning_rate: 1e-4,
            dropout_rate: 0.0,
            early_stop_patience: Some(5),
            seed: 0,
            restore_best: true,
        }
    }

    /// Fully supervised baselines: a fixed 200 epochs, no early stopping.
    pub fn fully_supervised() -> Self {
        Self {
            max_epochs: 200,
            batch_size: 10,
            learning_rate: 1e-4,
            dropout_rate: 0.25,
            early_stop_patience: None,
            seed: 0,
            restore_best: false,
        }
    }

    /// One refinement round of the plain self-training baseline.
    pub fn self_training() -> Self {
        Self {
            max_epochs: 50,
            batch_size: 28,
            learning_rate: 1e-4,
            dropout_rate: 0.25,
            early_stop_patience: None,
            seed: 0,
            restore_best: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::Config("early_stop_patience must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Backbone,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn final_val_loss(&self) -> Option<f64> {
        match self.best_epoch {
            Some(e) => self.history[e - 1].val_loss,
            None => self.history.last().and_then(|r| r.val_loss),
        }
    }
}

/// True when none of the last `patience` epochs beat the best validation
/// loss recorded before them. Epochs without a validation loss never stop.
pub fn early_stop_check(history: &[EpochRecord], patience: usize) -> bool {
    if patience == 0 || history.len() <= patience {
        return false;
    }
    let (before, recent) = history.split_at(history.len() - patience);
    let best_before = before
        .iter()
        .filter_map(|r| r.val_loss)
        .fold(f64::INFINITY, f64::min);
    if best_before == f64::INFINITY {
        return false;
    }
    recent
        .iter()
        .all(|r| r.val_loss.is_some_and(|v| v >= best_before))
}

struct Item<'a> {
    id: &'a str,
    image: &'a RasterImage,
    target: ProbMap,
}

fn collect_items<'a>(labeled: &'a [Sample], pseudo: &'a [Sample], classes: usize) -> Result<Vec<Item<'a>>> {
    let mut items = Vec::with_capacity(labeled.len() + pseudo.len());
    for s in labeled {
        let mask = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("labeled sample {} has no mask", s.id)))?;
        items.push(Item {
            id: &s.id,
            image: &s.image,
            target: mask.to_one_hot(classes),
        });
    }
    for s in pseudo {
        let target = s
            .pseudo
            .clone()
            .ok_or_else(|| Error::invalid(format!("pseudo-labeled sample {} has no pseudo label", s.id)))?;
        items.push(Item {
            id: &s.id,
            image: &s.image,
            target,
        });
    }
    let mut seen = HashSet::new();
    if let Some(dup) = items.iter().find(|it| !seen.insert(it.id)) {
        return Err(Error::invalid(format!("sample id {} appears twice in the training set", dup.id)));
    }
    // Canonical order so that the shuffle depends on the seed only.
    items.sort_by(|a, b| a.id.cmp(b.id));
    Ok(items)
}

/// Mean per-sample loss on `samples` with dropout disabled.
pub fn validation_loss(model: &Backbone, samples: &[Sample], loss: &CombinedLoss) -> Result<f64> {
    let classes = model.config().classes;
    let mut total = 0.0;
    for s in samples {
        let target = s
            .target(classes)
            .ok_or_else(|| Error::invalid(format!("validation sample {} has no target", s.id)))?;
        let pred = model.predict(&s.image)?;
        total += loss.evaluate(&[pred], &[target])?.total;
    }
    Ok(total / samples.len() as f64)
}

pub fn train(
    mut model: Backbone,
    labeled: &[Sample],
    pseudo: &[Sample],
    validation: &[Sample],
    cfg: &TrainConfig,
    loss: &CombinedLoss,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let items = collect_items(labeled, pseudo, model.config().classes)?;
    if items.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.early_stop_patience.is_some() && validation.is_empty() {
        return Err(Error::invalid("early stopping needs a validation set"));
    }

    let mut rng = seeded_rng(cfg.seed);
    let mut optimizer = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<f64>)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut traces = Vec::with_capacity(batch.len());
            for &i in batch {
                traces.push(model.forward_trace(items[i].image, Some((cfg.dropout_rate, &mut rng)))?);
            }
            let preds: Vec<ProbMap> = traces.iter().map(|t| t.probabilities()).collect();
            let targets: Vec<ProbMap> = batch.iter().map(|&i| items[i].target.clone()).collect();
            let (parts, grads) = loss.value_and_grad(&preds, &targets)?;
            if !parts.total.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            model.zero_grad();
            for (trace, grad) in traces.iter().zip(&grads) {
                model.backward(trace, grad);
            }
            optimizer.step(model.params_mut());
            epoch_loss += parts.total * batch.len() as f64;
        }
        let train_loss = epoch_loss / items.len() as f64;

        let val_loss = if validation.is_empty() {
            None
        } else {
            let v = validation_loss(&model, validation, loss)?;
            if !v.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            Some(v)
        };
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:?}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });

        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(_, b, _)| v < *b) {
                best = Some((epoch, v, model.flat_parameters()));
            }
        }
        if let Some(patience) = cfg.early_stop_patience {
            if early_stop_check(&history, patience) {
                stopped_early = true;
                break;
            }
        }
    }

    let mut best_epoch = None;
    if cfg.restore_best {
        if let Some((epoch, _, params)) = best {
            model.load_flat_parameters(&params)?;
            best_epoch = Some(epoch);
        }
    }
    model.zero_grad();
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        stopped_early,
    })
}

/// `epoch,train_loss,val_loss` with an empty field when there is no validation loss.
pub fn curve_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", r.epoch, r.train_loss, val);
    }
    out
}

pub fn write_curve(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_bytes(path, curve_csv(history).as_bytes())
}
