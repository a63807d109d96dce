//! Two-dimensional embeddings of the model's intermediate representations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::LabeledSet;
use super::tsne::{nn_agreement, tsne_2d, TsneConfig};
use crate::error::{Error, Result};
use crate::model::{Embedding, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Concatenated, normalized extractor features.
    Stage1,
    /// Final Bi-LSTM state.
    Stage2,
}

impl Stage {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::Stage1),
            2 => Ok(Stage::Stage2),
            _ => Err(Error::config(format!("stage must be 1 or 2, got {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub stage: Stage,
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub perplexity: f64,
    pub final_kl: f64,
    /// Fraction of points whose nearest 2-D neighbour shares their label.
    pub nn_agreement: f64,
}

/// High-dimensional representations of every sample, in input order.
pub fn extract_embeddings(model: &Model, set: &LabeledSet) -> Result<Vec<Embedding>> {
    set.pairs
        .par_iter()
        .map(|pair| model.embed_features(&model.extract(pair)?))
        .collect()
}

pub fn stage_vectors(embeddings: &[Embedding], stage: Stage) -> Vec<Vec<f64>> {
    embeddings
        .iter()
        .map(|e| match stage {
            Stage::Stage1 => e.stage1.clone(),
            Stage::Stage2 => e.stage2.clone(),
        })
        .collect()
}

pub fn embed_vectors(
    vectors: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    stage: Stage,
    config: &TsneConfig,
    seed: u64,
) -> Result<EmbeddingSet> {
    if vectors.len() != labels.len() {
        return Err(Error::shape(format!("{} vectors but {} labels", vectors.len(), labels.len())));
    }
    let r = tsne_2d(vectors, config, seed)?;
    let pts: Vec<Vec<f64>> = r.coords.iter().map(|c| c.to_vec()).collect();
    Ok(EmbeddingSet {
        stage,
        nn_agreement: nn_agreement(&pts, labels),
        final_kl: r.kl.last().copied().unwrap_or(f64::NAN),
        perplexity: r.perplexity,
        coords: r.coords,
        labels: labels.to_vec(),
        n_classes,
    })
}

/// Extracts the requested stage for every sample and embeds it with t-SNE.
pub fn embed_stage(model: &Model, set: &LabeledSet, stage: Stage, config: &TsneConfig, seed: u64) -> Result<EmbeddingSet> {
    let emb = extract_embeddings(model, set)?;
    embed_vectors(
        &stage_vectors(&emb, stage),
        &set.labels,
        model.config().n_classes,
        stage,
        config,
        seed,
    )
}
