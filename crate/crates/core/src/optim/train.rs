use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentationConfig};
use crate::error::{Error, Result};
use crate::metrics::{confusion_matrix, MetricsReport};
use crate::models::{argmax, Head, Mode, ModelGraph};
use crate::nn::ParamSet;
use crate::optim::history::{EpochHistory, EpochRecord};
use crate::optim::optimizer::{Optimizer, Rule};
use crate::optim::schedule::{Decision, EarlyStopping, Plateau};
use crate::rng::{self, Stream};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Images (`[H, W, C]` each) with class indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor<f32>>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} images for {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let refs: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.images[i]).collect();
        Tensor::stack(&refs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Rule,
    pub lr: f64,
    pub scheduler: bool,
    pub early_stop: bool,
    pub augmentation: Option<AugmentationConfig>,
}

impl TrainConfig {
    pub fn new(batch_size: usize, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            batch_size,
            epochs,
            seed,
            optimizer: Rule::adam(),
            lr: 1e-4,
            scheduler: false,
            early_stop: false,
            augmentation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: EpochHistory,
    pub stopped_early: bool,
    /// Epoch whose weights the model holds after a restoring stop.
    pub restored_epoch: Option<usize>,
}

/// Loss and accuracy of one inference pass over a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean data loss plus the L2 penalty.
    pub loss: f64,
    pub accuracy: f64,
}

const EVAL_BATCH: usize = 64;

/// Splits a permutation into batches. A trailing batch of one sample would
/// break batch normalization, so it joins the previous batch.
fn batches(order: &[usize], size: usize, merge_single: bool) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if merge_single && out.len() > 1 && out.last().map_or(false, |b| b.len() == 1) {
        out.pop();
        let start = order.len() - size - 1;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

fn check_dataset(model: &ModelGraph, data: &Dataset, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Input(format!("{what} set is empty")));
    }
    let want = model.input_shape();
    if let Some(img) = data.images.iter().find(|i| i.shape() != want) {
        return Err(Error::shape(format!(
            "{what} image has shape {:?}, model expects {want:?}",
            img.shape()
        )));
    }
    let k = model.num_classes();
    if let Some(&l) = data.labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!("{what} label {l} is outside 0..{k}")));
    }
    Ok(())
}

fn locate(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

/// Runs one optimizer step on a batch and returns its loss.
pub fn train_step(
    model: &mut ModelGraph,
    opt: &mut Optimizer,
    x: Tensor<f32>,
    labels: &[usize],
    dropout_rng: &mut dyn rand::RngCore,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let pass = model.forward(&mut tape, xv, &mut Mode::Train(dropout_rng))?;
    let loss = model.total_loss(&mut tape, &pass, labels)?;
    let value = tape.value(loss).item()?.into();
    let grads = tape.backward(loss)?;
    let mut by_name: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for (name, &var) in &pass.params {
        if tape.requires_grad(var) {
            by_name.insert(name.clone(), grads.wrt(var));
        }
    }
    opt.step(model.params_mut(), &by_name)?;
    model.apply_bn_updates(&pass.bn_updates)?;
    Ok(value)
}

/// Per epoch: seeded shuffle, one optimizer step per batch, inference-mode
/// evaluation of both splits, then the plateau scheduler and early stopping.
pub fn train(model: &mut ModelGraph, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(model, train, "training")?;
    check_dataset(model, val, "validation")?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut shuffle_rng = rng::stream(cfg.seed, Stream::Shuffle);
    let mut dropout_rng = rng::stream(cfg.seed, Stream::Dropout);
    let mut augment_rng = rng::stream(cfg.seed, Stream::Augment);
    let mut plateau = Plateau::default();
    let mut early: EarlyStopping<ParamSet> = EarlyStopping::default();
    let merge_single = model.has_batchnorm();
    let mut history = EpochHistory::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);
        let lr_used = opt.lr;
        for (b, idx) in batches(&order, cfg.batch_size, merge_single).into_iter().enumerate() {
            let x = match &cfg.augmentation {
                Some(a) => {
                    let imgs = idx
                        .iter()
                        .map(|&i| augment(&train.images[i], a, &mut augment_rng))
                        .collect::<Result<Vec<_>>>()?;
                    Tensor::stack(&imgs.iter().collect::<Vec<_>>())?
                }
                None => train.batch(idx)?,
            };
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let loss = train_step(model, &mut opt, x, &labels, &mut dropout_rng)
                .map_err(|e| locate(e, epoch, b + 1))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch}, batch {}: loss is {loss}", b + 1)));
            }
        }
        let tr = evaluate_loss(model, train).map_err(|e| locate(e, epoch, 0))?;
        let va = evaluate_loss(model, val).map_err(|e| locate(e, epoch, 0))?;
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4} lr {lr_used:e}",
            tr.loss,
            tr.accuracy,
            va.loss,
            va.accuracy
        );
        history.push(EpochRecord {
            epoch,
            train_loss: tr.loss,
            train_acc: tr.accuracy,
            val_loss: va.loss,
            val_acc: va.accuracy,
            lr: lr_used,
        });
        if cfg.scheduler {
            opt.lr = plateau.update(va.loss, opt.lr);
        }
        if cfg.early_stop && early.update(va.loss, model.params()) == Decision::Stop {
            let restored_epoch = early.restore().map(|best| {
                model.set_params(best.clone());
                early.best_epoch()
            });
            return Ok(TrainOutcome {
                history,
                stopped_early: true,
                restored_epoch,
            });
        }
    }
    Ok(TrainOutcome {
        history,
        stopped_early: false,
        restored_epoch: None,
    })
}

/// Class-probability rows for every sample, in dataset order.
pub fn predict_dataset(model: &ModelGraph, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for idx in all.chunks(EVAL_BATCH) {
        out.extend(model.predict_proba(&data.batch(idx)?)?);
    }
    Ok(out)
}

pub fn evaluate_loss(model: &ModelGraph, data: &Dataset) -> Result<Evaluation> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut weighted = 0.0;
    let mut correct = 0usize;
    for idx in all.chunks(EVAL_BATCH) {
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(data.batch(idx)?, false);
        let pass = model.forward(&mut tape, x, &mut Mode::Infer)?;
        let loss = model.data_loss(&mut tape, pass.output, &labels)?;
        weighted += tape.value(loss).item()? as f64 * idx.len() as f64;
        let probs = crate::models::output_probabilities(model.head(), tape.value(pass.output))?;
        correct += probs
            .iter()
            .zip(&labels)
            .filter(|(p, &l)| argmax(p) == l)
            .count();
    }
    let penalty = crate::nn::l2_penalty(model.params(), model.l2_lambda());
    Ok(Evaluation {
        loss: weighted / data.len() as f64 + penalty,
        accuracy: correct as f64 / data.len() as f64,
    })
}

/// Inference, argmax, and the metric suite. Sigmoid and two-way softmax
/// heads produce a binary report with AUC; wider heads a macro report.
pub fn evaluate(model: &ModelGraph, data: &Dataset) -> Result<MetricsReport> {
    check_dataset(model, data, "evaluation")?;
    let probs = predict_dataset(model, data)?;
    let labels = model.architecture().labels();
    report_from_probabilities(&probs, &data.labels, labels, model.head())
}

pub fn report_from_probabilities(
    probs: &[Vec<f64>],
    actual: &[usize],
    labels: Vec<String>,
    head: Head,
) -> Result<MetricsReport> {
    let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let cm = confusion_matrix(&predicted, actual, labels)?;
    match head {
        Head::Sigmoid | Head::Softmax(2) => {
            let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
            MetricsReport::binary(cm, &scores, actual)
        }
        _ => MetricsReport::multiclass(cm),
    }
}
