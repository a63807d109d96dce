//! Mini-batch training and evaluation.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, is_extractor_param, BatchResult, Features, ImagePair, Model};
use crate::nn::{Adam, AdamConfig, Params};
use crate::util::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub train_fraction: f64,
    pub n_runs: usize,
    pub seed: u64,
    /// After every epoch, replace the batch-norm moving averages with the
    /// population statistics of the training set under the current weights.
    pub recalibrate_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 25,
            optimizer: AdamConfig::default(),
            train_fraction: 0.7,
            n_runs: 5,
            seed: 0,
            recalibrate_bn: true,
        }
    }
}

impl TrainConfig {
    /// Fifty repetitions instead of the desk default of five.
    pub fn full_scale() -> Self {
        Self {
            n_runs: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 (batch normalization)"));
        }
        if self.epochs == 0 || self.n_runs == 0 {
            return Err(Error::config("epochs and n_runs must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must be in (0, 1)"));
        }
        self.optimizer.validate()
    }
}

/// Images with class labels, held in memory.
#[derive(Debug, Clone, Default)]
pub struct LabeledSet {
    pub pairs: Vec<ImagePair>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_predictions(n_classes: usize, truth: &[usize], predicted: &[usize]) -> Self {
        let mut m = Self::new(n_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.counts[t][p] += 1;
        }
        m
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Recall per class; `None` for classes absent from the truth.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        self.row_sums()
            .iter()
            .enumerate()
            .map(|(i, &n)| (n > 0).then(|| self.counts[i][i] as f64 / n as f64))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub batches_per_epoch: usize,
    pub epochs: Vec<EpochStats>,
    pub final_test: Option<Evaluation>,
    /// Not serialized, so reports from identical runs are byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn test_accuracy(&self) -> Option<f64> {
        self.final_test.as_ref().map(|e| e.accuracy)
    }
}

/// Index batches for one epoch; a trailing batch of one sample is merged into
/// the batch before it, since batch normalization needs two.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64)));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(last);
        }
    }
    batches
}

fn check_finite(result: &BatchResult, epoch: usize, batch: usize) -> Result<()> {
    if !result.loss.is_finite() {
        return Err(Error::NonFinite {
            epoch,
            batch,
            tensor: "loss".into(),
        });
    }
    for (name, g) in result.grads.iter() {
        if !g.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch,
                tensor: format!("gradient of {name}"),
            });
        }
    }
    Ok(())
}

fn extractor_snapshot(model: &Model) -> Params {
    let mut p = Params::new();
    for (n, t) in model.params().iter().filter(|(n, _)| is_extractor_param(n)) {
        p.insert(n, t.clone());
    }
    p
}

/// Trains `model` in place. With a frozen extractor the extractor features
/// are computed once and reused every epoch.
pub fn train(
    model: &mut Model,
    train_set: &LabeledSet,
    test_set: Option<&LabeledSet>,
    config: &TrainConfig,
    seed: u64,
) -> Result<RunReport> {
    config.validate()?;
    if train_set.len() < 2 {
        return Err(Error::config("training set needs at least 2 samples"));
    }
    if config.batch_size > train_set.len() {
        return Err(Error::config(format!(
            "batch_size {} exceeds the {} training samples",
            config.batch_size,
            train_set.len()
        )));
    }
    let start = Instant::now();
    let frozen = model.config().freeze_extractor;
    let train_refs: Vec<&ImagePair> = train_set.pairs.iter().collect();
    let cached: Option<(Vec<Features>, Option<Vec<Features>>)> = if frozen {
        let tr = model.extract_all(&train_refs)?;
        let te = match test_set {
            Some(t) => Some(model.extract_all(&t.pairs.iter().collect::<Vec<_>>())?),
            None => None,
        };
        Some((tr, te))
    } else {
        None
    };
    let snapshot = frozen.then(|| extractor_snapshot(model));
    let mut adam = Adam::new(config.optimizer);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut batches_per_epoch = 0;
    for epoch in 0..config.epochs {
        let batches = epoch_batches(train_set.len(), config.batch_size, seed, epoch);
        batches_per_epoch = batches.len();
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (b, idx) in batches.iter().enumerate() {
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let result = match &cached {
                Some((feats, _)) => {
                    let refs: Vec<&Features> = idx.iter().map(|&i| &feats[i]).collect();
                    model.train_features(&refs, &labels)?
                }
                None => {
                    let refs: Vec<&ImagePair> = idx.iter().map(|&i| train_refs[i]).collect();
                    model.train_batch(&refs, &labels)?
                }
            };
            check_finite(&result, epoch, b)?;
            adam.step(model.params_mut(), &result.grads)?;
            loss_sum += result.loss * idx.len() as f64;
            correct += result.correct;
            debug!("epoch {epoch} batch {b}: loss {:.5}", result.loss);
        }
        if config.recalibrate_bn {
            match &cached {
                Some((feats, _)) => model.recalibrate_batchnorm(feats)?,
                None => {
                    let feats = model.extract_all(&train_refs)?;
                    model.recalibrate_batchnorm(&feats)?;
                }
            }
        }
        if let Some(snap) = &snapshot {
            if &extractor_snapshot(model) != snap {
                return Err(Error::config("frozen extractor tensors changed during training"));
            }
        }
        let test_eval = match (test_set, &cached) {
            (Some(t), Some((_, Some(tf)))) => Some(evaluate_features(model, tf, &t.labels)?),
            (Some(t), _) => Some(evaluate(model, t)?),
            (None, _) => None,
        };
        let stats = EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            test_loss: test_eval.as_ref().map(|e| e.loss),
            test_accuracy: test_eval.as_ref().map(|e| e.accuracy),
        };
        info!(
            "epoch {:>3}: train loss {:.4} acc {:.3}{}",
            stats.epoch,
            stats.train_loss,
            stats.train_accuracy,
            stats
                .test_accuracy
                .map_or(String::new(), |a| format!(", test acc {a:.3}"))
        );
        epochs.push(stats);
    }
    let final_test = match (test_set, &cached) {
        (Some(t), Some((_, Some(tf)))) => Some(evaluate_features(model, tf, &t.labels)?),
        (Some(t), _) => Some(evaluate(model, t)?),
        (None, _) => None,
    };
    Ok(RunReport {
        seed,
        train_size: train_set.len(),
        test_size: test_set.map_or(0, LabeledSet::len),
        batches_per_epoch,
        epochs,
        final_test,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn summarize(model: &Model, probs: &[Vec<f64>], labels: &[usize]) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(Error::config("cannot evaluate on an empty set"));
    }
    let mut loss = 0.0;
    let mut predicted = Vec::with_capacity(labels.len());
    for (p, &y) in probs.iter().zip(labels) {
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        predicted.push(argmax(p));
    }
    let confusion = ConfusionMatrix::from_predictions(model.config().n_classes, labels, &predicted);
    Ok(Evaluation {
        accuracy: confusion.accuracy(),
        loss: loss / labels.len() as f64,
        confusion,
    })
}

pub fn evaluate(model: &Model, set: &LabeledSet) -> Result<Evaluation> {
    let probs = model.predict(&set.pairs.iter().collect::<Vec<_>>())?;
    summarize(model, &probs, &set.labels)
}

pub fn evaluate_features(model: &Model, feats: &[Features], labels: &[usize]) -> Result<Evaluation> {
    use rayon::prelude::*;
    let probs: Vec<Vec<f64>> = feats
        .par_iter()
        .map(|f| model.predict_features(f))
        .collect::<Result<_>>()?;
    summarize(model, &probs, labels)
}
