//! Mini-batch SGD with momentum, per-epoch metrics and top-1 evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::FeatureSet;
use crate::error::{Error, Result};
use crate::net::Model;
use crate::tensor::{softmax_cross_entropy, Graph, Tensor};

/// Default global gradient-norm ceiling. Without normalization layers the
/// deep network occasionally produces gradient spikes large enough to wreck
/// the weights in one step.
pub const DEFAULT_GRAD_CLIP: f32 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
    /// Spectrogram width in frames.
    pub target_frames: usize,
    /// Stop once validation accuracy has not improved for this many epochs.
    pub patience: Option<usize>,
    /// Stop as soon as validation accuracy reaches this value.
    pub target_val_accuracy: Option<f64>,
    /// Rescale each minibatch gradient so its global L2 norm is at most this.
    /// `None` disables clipping.
    pub grad_clip_norm: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            target_frames: 128,
            patience: None,
            target_val_accuracy: None,
            grad_clip_norm: Some(DEFAULT_GRAD_CLIP),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        // lr = 0 is allowed so a run can be used as a fixed-weight baseline
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.target_frames == 0 {
            return bad("target_frames must be positive");
        }
        if self
            .target_val_accuracy
            .is_some_and(|t| !(t > 0.0 && t <= 1.0))
        {
            return bad("target_val_accuracy must be in (0, 1]");
        }
        if self
            .grad_clip_norm
            .is_some_and(|c| !(c.is_finite() && c > 0.0))
        {
            return bad("grad_clip_norm must be finite and positive when set");
        }
        if self.patience == Some(0) {
            return bad("patience must be positive when set");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Sample-weighted mean of the minibatch losses seen during the epoch.
    pub train_loss: f64,
    /// Accuracy of the forward passes made during the epoch.
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Largest pre-clipping global gradient norm seen during the epoch.
    pub max_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub train_examples: usize,
    pub val_examples: usize,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    /// Weights from the epoch with the best validation accuracy (ties go to
    /// the lower validation loss).
    pub best: Model,
    pub last: Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub top1_accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
    pub total: u64,
    /// Mean cross-entropy, when logits were available.
    pub loss: Option<f64>,
}

impl Evaluation {
    pub fn from_predictions(
        labels: &[usize],
        predicted: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        if labels.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} labels but {} predictions",
                labels.len(),
                predicted.len()
            )));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&t, &p) in labels.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::Label(format!(
                    "class index out of range 0..{num_classes}"
                )));
            }
            confusion[t][p] += 1;
        }
        let total = labels.len() as u64;
        let correct: u64 = (0..num_classes).map(|i| confusion[i][i]).sum();
        let top1_accuracy = if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        };
        Ok(Self {
            top1_accuracy,
            confusion,
            total,
            loss: None,
        })
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn batch_tensor(set: &FeatureSet, idx: &[usize]) -> Result<Tensor> {
    let [c, h, w] = set.input_shape;
    let mut data = Vec::with_capacity(idx.len() * c * h * w);
    for &i in idx {
        data.extend_from_slice(&set.inputs[i]);
    }
    Tensor::new(vec![idx.len(), c, h, w], data)
}

const EVAL_BATCH: usize = 16;

/// Top-1 accuracy, confusion matrix and mean loss over `set`.
pub fn evaluate(model: &Model, set: &FeatureSet) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::InvalidConfig(
            "cannot evaluate an empty split".into(),
        ));
    }
    let k = model.num_classes();
    let mut predicted = Vec::with_capacity(set.len());
    let mut loss_sum = 0.0f64;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let logits = model.predict(&batch_tensor(set, chunk)?)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
        let (loss, _) = softmax_cross_entropy(&logits, &labels)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        predicted.extend(logits.data().chunks(k).map(argmax));
    }
    let mut ev = Evaluation::from_predictions(&set.labels, &predicted, k)?;
    ev.loss = Some(loss_sum / set.len() as f64);
    Ok(ev)
}

/// Trains `model` in place of a copy and returns the report plus the best
/// and final weights. Deterministic for a fixed seed.
pub fn train(
    model: Model,
    train_set: &FeatureSet,
    val_set: &FeatureSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(model, train_set, val_set, cfg, |_| {})
}

pub fn train_with_progress(
    mut model: Model,
    train_set: &FeatureSet,
    val_set: &FeatureSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Split(
            "training needs examples in both train and val splits".into(),
        ));
    }
    for set in [train_set, val_set] {
        if set.input_shape != model.spec().input_shape {
            return Err(Error::Shape(format!(
                "features are {:?} but the model expects {:?}",
                set.input_shape,
                model.spec().input_shape
            )));
        }
    }

    let k = model.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut velocity: Vec<Vec<f32>> = model
        .parameters()
        .iter()
        .map(|p| vec![0.0; p.len()])
        .collect();
    let mut epochs = Vec::new();
    let mut best: Option<(Model, usize, f64, f64)> = None;
    let mut stale = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut max_norm = 0.0f64;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let x = batch_tensor(train_set, chunk)?;
            let (loss, grads, logits) = {
                let mut g = Graph::new();
                let xv = g.constant(x);
                let (logits, params) = model.forward_graph(&mut g, xv)?;
                let loss = g.softmax_cross_entropy(logits, &labels)?;
                let loss_value = g.value(loss).data()[0];
                if !loss_value.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        loss: loss_value,
                    });
                }
                let mut grads = g.backward(loss)?;
                let grads: Vec<Tensor> = params
                    .iter()
                    .map(|&p| {
                        grads
                            .take(p)
                            .ok_or_else(|| Error::Graph("missing parameter gradient".into()))
                    })
                    .collect::<Result<_>>()?;
                (loss_value, grads, g.value(logits).data().to_vec())
            };
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += logits
                .chunks(k)
                .map(argmax)
                .zip(&labels)
                .filter(|(p, t)| p == *t)
                .count();

            let norm = grads
                .iter()
                .flat_map(|t| t.data())
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            max_norm = max_norm.max(norm);
            let scale = match cfg.grad_clip_norm {
                Some(c) if norm > c as f64 => (c as f64 / norm) as f32,
                _ => 1.0,
            };
            for ((p, v), gr) in model
                .parameters_mut()
                .into_iter()
                .zip(&mut velocity)
                .zip(&grads)
            {
                for ((w, vi), &gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(gr.data()) {
                    *vi = cfg.momentum * *vi + scale * gi;
                    *w -= cfg.learning_rate * *vi;
                }
            }
        }

        let val = evaluate(&model, val_set)?;
        let val_loss = val.loss.unwrap_or(f64::NAN);
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: order.len().div_ceil(cfg.batch_size),
                loss: val_loss as f32,
            });
        }
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_loss,
            val_accuracy: val.top1_accuracy,
            max_grad_norm: max_norm,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3}",
            metrics.train_loss,
            metrics.train_accuracy,
            metrics.val_loss,
            metrics.val_accuracy
        );
        on_epoch(&metrics);
        epochs.push(metrics);

        let improved = match &best {
            None => true,
            Some((_, _, acc, loss)) => {
                val.top1_accuracy > *acc || (val.top1_accuracy == *acc && val_loss < *loss)
            }
        };
        let acc_improved = best.as_ref().is_none_or(|b| val.top1_accuracy > b.2);
        if improved {
            best = Some((model.clone(), epoch, val.top1_accuracy, val_loss));
        }
        stale = if acc_improved { 0 } else { stale + 1 };
        let reached = cfg
            .target_val_accuracy
            .is_some_and(|t| val.top1_accuracy >= t);
        if (reached || cfg.patience.is_some_and(|p| stale >= p)) && epoch < cfg.epochs {
            stopped_early = true;
            break;
        }
    }

    let (best_model, best_epoch, best_val_accuracy, _) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        report: TrainReport {
            config: cfg.clone(),
            train_examples: train_set.len(),
            val_examples: val_set.len(),
            epochs,
            best_epoch,
            best_val_accuracy,
            stopped_early,
        },
        best: best_model,
        last: model,
    })
}
