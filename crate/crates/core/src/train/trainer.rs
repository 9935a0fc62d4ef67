use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::balance::{balance, Strategy, TrainItem};
use super::radam::RAdam;
use super::schedule::{EarlyStopping, PlateauScheduler, StopDecision};
use crate::data::image::augment;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Mode, Tape, Tensor};
use crate::vit::{ModelVars, ViTModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 40,
            patience: 10,
            plateau_factor: 0.2,
            plateau_patience: 4,
            min_lr: 1e-6,
            strategy: Strategy::Oversample,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 (batch normalisation)".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.plateau_patience == 0 {
            return Err(Error::Config("epoch counts and patience values must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0 < self.plateau_factor && self.plateau_factor < 1.0) {
            return Err(Error::Config("learning rate must be positive and the plateau factor in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub model: ViTModel,
    pub log: Vec<EpochLog>,
    /// 0 when no epoch completed.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// Set when training aborted on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

/// Mean cross-entropy and accuracy of `model` on `indices` (inference mode).
pub fn evaluate(model: &ViTModel, images: &[Tensor], labels: &[usize], indices: &[usize]) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty set".into()));
    }
    let classes = model.config().num_classes;
    let (mut loss, mut correct) = (0.0f64, 0usize);
    for chunk in indices.chunks(32) {
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, model, false);
        let batch: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
        let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let fwd = model.forward_batch(&mut tape, &vars, &batch, Mode::Infer, 0, false)?;
        let ce = tape.cross_entropy(fwd.logits, &targets, None)?;
        loss += tape.value(ce)[0] as f64 * chunk.len() as f64;
        for (row, &t) in tape.value(fwd.logits).chunks(classes).zip(&targets) {
            correct += usize::from(kernels::argmax(row) == t);
        }
    }
    Ok((loss / indices.len() as f64, correct as f64 / indices.len() as f64))
}

fn batches(items: &[TrainItem], size: usize) -> Vec<&[TrainItem]> {
    let mut out: Vec<&[TrainItem]> = items.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        out[n - 1] = &items[(n - 1) * size..];
    }
    out
}

/// One optimisation step; returns the batch loss.
fn step(
    model: &mut ViTModel,
    opt: &mut RAdam,
    images: &[Tensor],
    labels: &[usize],
    batch: &[TrainItem],
    weighted: bool,
    dropout_seed: u64,
) -> Result<f64> {
    let inputs: Vec<Cow<'_, Tensor>> = batch
        .iter()
        .map(|it| match &it.augmentation {
            Some(a) => Cow::Owned(augment(&images[it.index], a)),
            None => Cow::Borrowed(&images[it.index]),
        })
        .collect();
    let refs: Vec<&Tensor> = inputs.iter().map(|c| c.as_ref()).collect();
    let targets: Vec<usize> = batch.iter().map(|it| labels[it.index]).collect();
    let weights: Option<Vec<f32>> = weighted.then(|| batch.iter().map(|it| it.weight).collect());
    let (loss, grads, bn_update) = {
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, model, true);
        let fwd = model.forward_batch(&mut tape, &vars, &refs, Mode::Train, dropout_seed, false)?;
        let loss = tape.cross_entropy(fwd.logits, &targets, weights.as_deref())?;
        let value = tape.value(loss)[0] as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss became {value}")));
        }
        tape.backward(loss)?;
        (value, ViTModel::grads_from_tape(&tape, &vars), fwd.bn_update)
    };
    let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
    let mut params: Vec<&mut [f32]> = model.parameters_mut().into_iter().map(Tensor::data_mut).collect();
    opt.step_slices(&mut params, &grad_refs)?;
    if let Some(stats) = bn_update {
        model.head.bn_stats = stats;
    }
    Ok(loss)
}

/// Mini-batch RAdam on cross-entropy with plateau schedule and early
/// stopping on validation loss. `on_epoch` sees each log line as it is
/// produced.
pub fn train(
    mut model: ViTModel,
    images: &[Tensor],
    labels: &[usize],
    train_indices: &[usize],
    val_indices: &[usize],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if images.len() != labels.len() {
        return Err(Error::Shape(format!("{} images but {} labels", images.len(), labels.len())));
    }
    if val_indices.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let classes = model.config().num_classes;
    let items = balance(config.strategy, train_indices, labels, classes, config.seed)?;
    let weighted = config.strategy == Strategy::Weights;

    let mut opt = RAdam::new(config.lr);
    let mut schedule =
        PlateauScheduler::with_params(config.lr, config.plateau_factor, config.plateau_patience, config.min_lr);
    let mut stopper = EarlyStopping::new(config.patience, config.max_epochs);
    let (baseline, _) = evaluate(&model, images, labels, val_indices)?;
    schedule.observe(baseline);

    let mut outcome = TrainOutcome {
        model: model.clone(),
        log: Vec::new(),
        best_epoch: 0,
        best_val_loss: baseline,
        stopped_early: false,
        diverged: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = items;
    for epoch in 1..=config.max_epochs {
        let lr = schedule.lr;
        opt.lr = lr;
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut seen = 0usize;
        for (b, batch) in batches(&order, config.batch_size).into_iter().enumerate() {
            let dropout_seed = config.seed ^ ((epoch as u64) << 32) ^ b as u64;
            match step(&mut model, &mut opt, images, labels, batch, weighted, dropout_seed) {
                Ok(loss) => {
                    total += loss * batch.len() as f64;
                    seen += batch.len();
                }
                Err(Error::Numeric(msg)) => {
                    log::warn!("training diverged in epoch {epoch}: {msg}");
                    outcome.diverged = Some(format!("epoch {epoch}: {msg}"));
                    return Ok(outcome);
                }
                Err(e) => return Err(e),
            }
        }
        let (val_loss, val_acc) = match evaluate(&model, images, labels, val_indices) {
            Ok(v) if v.0.is_finite() => v,
            Ok(v) => {
                outcome.diverged = Some(format!("epoch {epoch}: validation loss became {}", v.0));
                return Ok(outcome);
            }
            Err(Error::Numeric(msg)) => {
                outcome.diverged = Some(format!("epoch {epoch}: {msg}"));
                return Ok(outcome);
            }
            Err(e) => return Err(e),
        };
        let entry = EpochLog { epoch, lr, train_loss: total / seen as f64, val_loss, val_acc };
        on_epoch(&entry);
        outcome.log.push(entry);
        schedule.observe(val_loss);
        let decision = stopper.observe(val_loss);
        if stopper.improved() {
            outcome.model = model.clone();
            outcome.best_epoch = epoch;
            outcome.best_val_loss = val_loss;
        }
        if let StopDecision::Stop { .. } = decision {
            outcome.stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    Ok(outcome)
}
