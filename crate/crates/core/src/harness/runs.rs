//! Repeated seeded train/test runs and their accuracy distribution.

use std::collections::HashMap;

use log::info;
use serde::{Deserialize, Serialize};

use super::train::{train, LabeledSet, RunReport, TrainConfig};
use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Params;
use crate::util::derive_seed;

/// Five-number summary plus mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

/// Quantile of sorted data by linear interpolation between closest ranks
/// (position `q * (n - 1)`).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("box statistics need at least one finite value"));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(BoxStats {
        min: s[0],
        q1: quantile(&s, 0.25),
        median: quantile(&s, 0.5),
        q3: quantile(&s, 0.75),
        max: s[s.len() - 1],
        mean: s.iter().sum::<f64>() / s.len() as f64,
    })
}

/// Seeds of one run, all derived from the experiment seed and run index so
/// the split, the initialization and the batch order change together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub run: u64,
    pub split: u64,
    pub init: u64,
    pub shuffle: u64,
}

impl RunSeeds {
    pub fn new(seed: u64, run_index: usize) -> Self {
        let run = derive_seed(seed, run_index as u64);
        Self {
            run,
            split: derive_seed(run, 1),
            init: derive_seed(run, 2),
            shuffle: derive_seed(run, 3),
        }
    }
}

/// Loads every sample of a manifest into memory, in manifest order.
pub fn load_labeled(manifest: &DatasetManifest) -> Result<LabeledSet> {
    Ok(LabeledSet {
        pairs: manifest.load_pairs()?,
        labels: manifest.labels(),
    })
}

/// Indices (into `manifest.samples`) of a seeded train/test split.
pub fn split_indices(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let (train, test) = manifest.split(fraction, seed)?;
    let index: HashMap<&str, usize> = manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let lookup = |m: &DatasetManifest| m.samples.iter().map(|s| index[s.id.as_str()]).collect();
    Ok((lookup(&train), lookup(&test)))
}

/// A trained model with the split it was trained on.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub model: Model,
    pub report: RunReport,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Split, initialize (optionally importing pretrained tensors), train and
/// evaluate one run.
pub fn single_run(
    manifest: &DatasetManifest,
    data: &LabeledSet,
    model_config: &ModelConfig,
    config: &TrainConfig,
    run_index: usize,
    pretrained: Option<&Params>,
) -> Result<TrainedRun> {
    let seeds = RunSeeds::new(config.seed, run_index);
    let (train_indices, test_indices) = split_indices(manifest, config.train_fraction, seeds.split)?;
    let mut model = Model::new(model_config.clone(), seeds.init)?;
    if let Some(p) = pretrained {
        model.import_params(p.clone())?;
    }
    let train_set = data.subset(&train_indices);
    let test_set = data.subset(&test_indices);
    let mut report = train(&mut model, &train_set, Some(&test_set), config, seeds.shuffle)?;
    report.seed = seeds.run;
    info!(
        "run {run_index}: test accuracy {:.4} ({:.1} s)",
        report.test_accuracy().unwrap_or(f64::NAN),
        report.wall_time_s
    );
    Ok(TrainedRun {
        model,
        report,
        train_indices,
        test_indices,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunsSummary {
    pub runs: Vec<RunReport>,
    pub accuracies: Vec<f64>,
    pub stats: BoxStats,
}

/// `config.n_runs` independent runs, each with fresh split, initialization
/// and batch order.
pub fn repeated_runs(
    manifest: &DatasetManifest,
    data: &LabeledSet,
    model_config: &ModelConfig,
    config: &TrainConfig,
    pretrained: Option<&Params>,
) -> Result<RunsSummary> {
    repeated_runs_inspect(manifest, data, model_config, config, pretrained, |_, _| Ok(()))
}

/// `repeated_runs` that hands every finished run (with its model) to `inspect`.
pub fn repeated_runs_inspect(
    manifest: &DatasetManifest,
    data: &LabeledSet,
    model_config: &ModelConfig,
    config: &TrainConfig,
    pretrained: Option<&Params>,
    mut inspect: impl FnMut(usize, &TrainedRun) -> Result<()>,
) -> Result<RunsSummary> {
    config.validate()?;
    let mut runs = Vec::with_capacity(config.n_runs);
    for r in 0..config.n_runs {
        let run = single_run(manifest, data, model_config, config, r, pretrained)?;
        inspect(r, &run)?;
        runs.push(run.report);
    }
    runs.sort_by_key(|r| r.seed);
    let accuracies: Vec<f64> = runs.iter().map(|r| r.test_accuracy().unwrap_or(0.0)).collect();
    Ok(RunsSummary {
        stats: box_stats(&accuracies)?,
        accuracies,
        runs,
    })
}
