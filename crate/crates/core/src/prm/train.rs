//! Minibatch AdamW on the mean binary cross-entropy, with a held-out
//! validation split and early stopping on validation loss.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{FeatureConfig, StepFeatures};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

use super::loss::bce_loss;
use super::model::{sigmoid, Model, TrainingMeta};
use super::AggregationRule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub validation_fraction: f64,
    /// Subsample positives to the negative count before splitting.
    pub downsample_positives: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dim: 16,
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            batch_size: 64,
            max_epochs: 200,
            early_stop_patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            validation_fraction: 0.1,
            downsample_positives: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and hidden_dim must be positive".into(),
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 0.5) {
            return Err(Error::Config(format!(
                "validation_fraction {} must lie in (0, 0.5)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<EpochStats>,
    pub validation_auc: f64,
    pub validation_accuracy: f64,
}

/// Fits a model to `(features, label)` pairs.
pub fn train<S: Scalar>(
    dataset: &[(StepFeatures, bool)],
    features: FeatureConfig,
    config: &TrainConfig,
) -> Result<Model<S>> {
    train_with_report(dataset, features, config).map(|(m, _)| m)
}

pub fn train_with_report<S: Scalar>(
    dataset: &[(StepFeatures, bool)],
    features: FeatureConfig,
    config: &TrainConfig,
) -> Result<(Model<S>, TrainReport)> {
    config.validate()?;
    let positives = dataset.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == dataset.len() {
        return Err(Error::DegenerateDataset(format!(
            "{positives} of {} examples are positive; both classes are required",
            dataset.len()
        )));
    }
    let dim = dataset[0].0.dim();
    if dataset.iter().any(|(f, _)| f.dim() != dim) {
        return Err(Error::Contract("feature vectors of mixed length".into()));
    }

    let mut rng = seed::rng(seed::split(config.seed, 0));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    if config.downsample_positives {
        let negatives = dataset.len() - positives;
        let mut kept_pos = 0;
        order.retain(|&i| {
            if dataset[i].1 {
                kept_pos += 1;
                kept_pos <= negatives
            } else {
                true
            }
        });
    }
    if order.len() < 2 * config.batch_size {
        return Err(Error::DegenerateDataset(format!(
            "{} examples is fewer than two batches of {}",
            order.len(),
            config.batch_size
        )));
    }
    let n_val = ((order.len() as f64 * config.validation_fraction).ceil() as usize).max(1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let cast = |i: &usize| -> (Vec<S>, bool) {
        let (f, y) = &dataset[*i];
        (f.as_slice().iter().map(|&v| S::of(v)).collect(), *y)
    };
    let val: Vec<(Vec<S>, bool)> = val_idx.iter().map(cast).collect();
    let mut train_set: Vec<(Vec<S>, bool)> = train_idx.iter().map(cast).collect();

    let mut model: Model<S> = Model::init(dim, config.hidden_dim, seed::split(config.seed, 1));
    model.features = features;
    model.aggregation = AggregationRule::default();

    let initial_val = evaluate(&model, &val)?.0;
    let mut best = (initial_val, model.params(), 0usize);
    let mut optimizer = AdamW::new(model.param_count(), config);
    let mut curve = Vec::new();
    let mut stale = 0;
    let mut epochs_run = 0;
    let mut shuffle_rng = seed::rng(seed::split(config.seed, 2));

    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        train_set.shuffle(&mut shuffle_rng);
        let mut epoch_loss = S::zero();
        for batch in train_set.chunks(config.batch_size) {
            let (loss, grad) = batch_gradient(&model, batch);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("training loss became {loss}"),
                });
            }
            epoch_loss += loss * S::of(batch.len() as f64);
            let mut theta = model.params();
            optimizer.step(&mut theta, &grad);
            if !theta.iter().all(|t| t.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    message: "parameters became non-finite".into(),
                });
            }
            model.set_params(&theta)?;
        }
        let (val_loss, val_acc) = evaluate(&model, &val)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                message: format!("validation loss became {val_loss}"),
            });
        }
        curve.push(EpochStats {
            epoch,
            train_loss: (epoch_loss / S::of(train_set.len() as f64)).to_f64_lossy(),
            validation_loss: val_loss.to_f64_lossy(),
            validation_accuracy: val_acc,
        });
        if val_loss < best.0 {
            best = (val_loss, model.params(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stop_patience {
                break;
            }
        }
    }

    model.set_params(&best.1)?;
    let (final_val, val_acc) = evaluate(&model, &val)?;
    let val_scores: Vec<(f64, bool)> = val
        .iter()
        .map(|(x, y)| (model.predict(x).to_f64_lossy(), *y))
        .collect();
    model.training_meta = TrainingMeta {
        seed: config.seed,
        epochs_run,
        best_epoch: best.2,
        initial_validation_loss: initial_val.to_f64_lossy(),
        final_validation_loss: final_val.to_f64_lossy(),
        train_examples: train_set.len(),
        validation_examples: val.len(),
    };
    model.validate()?;
    Ok((
        model,
        TrainReport {
            curve,
            validation_auc: auc(&val_scores),
            validation_accuracy: val_acc,
        },
    ))
}

/// Mean BCE over `batch` and its gradient.
pub fn batch_gradient<S: Scalar>(model: &Model<S>, batch: &[(Vec<S>, bool)]) -> (S, Vec<S>) {
    let mut grad = vec![S::zero(); model.param_count()];
    let mut preds = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    let inv_n = S::one() / S::of(batch.len() as f64);
    for (x, y) in batch {
        let act = model.forward(x);
        let target = if *y { S::one() } else { S::zero() };
        // d(BCE)/d(logit) for a sigmoid output is p - y.
        let dlogit = (sigmoid(act.logit) - target) * inv_n;
        model.backprop(x, &act, dlogit, &mut grad);
        preds.push(act.output);
        labels.push(*y);
    }
    let loss = bce_loss(&preds, &labels).unwrap_or_else(|_| S::nan());
    (loss, grad)
}

fn evaluate<S: Scalar>(model: &Model<S>, data: &[(Vec<S>, bool)]) -> Result<(S, f64)> {
    let preds: Vec<S> = data.iter().map(|(x, _)| model.predict(x)).collect();
    let labels: Vec<bool> = data.iter().map(|(_, y)| *y).collect();
    let half = S::of(0.5);
    let correct = preds
        .iter()
        .zip(&labels)
        .filter(|(&p, &y)| (p >= half) == y)
        .count();
    Ok((
        bce_loss(&preds, &labels)?,
        correct as f64 / data.len() as f64,
    ))
}

/// Area under the ROC curve by the rank-sum formula, ties counted half.
pub fn auc(scored: &[(f64, bool)]) -> f64 {
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_pos = sorted.iter().filter(|(_, y)| *y).count() as f64;
    let n_neg = sorted.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return f64::NAN;
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // Average 1-based rank of the tie block.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg_rank * sorted[i..j].iter().filter(|(_, y)| *y).count() as f64;
        i = j;
    }
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// Adam with decoupled weight decay.
struct AdamW<S> {
    m: Vec<S>,
    v: Vec<S>,
    t: i32,
    lr: S,
    decay: S,
    beta1: S,
    beta2: S,
    eps: S,
}

impl<S: Scalar> AdamW<S> {
    fn new(n: usize, config: &TrainConfig) -> Self {
        AdamW {
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            t: 0,
            lr: S::of(config.learning_rate),
            decay: S::of(config.weight_decay),
            beta1: S::of(config.beta1),
            beta2: S::of(config.beta2),
            eps: S::of(config.adam_eps),
        }
    }

    fn step(&mut self, theta: &mut [S], grad: &[S]) {
        self.t += 1;
        let one = S::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.decay * theta[i]);
        }
    }
}
