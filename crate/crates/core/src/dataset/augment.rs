//! The two augmentations: moving the event window to other fiber positions
//! and reversing slow time.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sim::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// First column of the window that contains the event.
    pub source_start: usize,
    pub source_len: usize,
    /// Number of relocated copies per base recording.
    pub offsets: usize,
    pub flip: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            source_start: 2200,
            source_len: 300,
            offsets: 9,
            flip: true,
        }
    }
}

impl AugmentSpec {
    /// Scales the desk window (columns 2200-2500 of 4700) to the fiber length
    /// of `config`.
    pub fn for_sim(config: &SimConfig) -> Self {
        Self::for_columns(config.n_samples())
    }

    /// Same scaling for matrices with `cols` fiber positions.
    pub fn for_columns(cols: usize) -> Self {
        let scale = cols as f64 / 4700.0;
        Self {
            source_start: (2200.0 * scale).round() as usize,
            source_len: ((300.0 * scale).round() as usize).max(1),
            ..Self::default()
        }
    }

    pub fn source(&self) -> Range<usize> {
        self.source_start..self.source_start + self.source_len
    }

    /// Samples produced from each base recording.
    pub fn per_base(&self) -> usize {
        (1 + self.offsets) * if self.flip { 2 } else { 1 }
    }
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

/// Start columns of all whole blocks that tile the fiber outside `source`:
/// left of it from column 0, right of it from the end of the window.
pub fn candidate_offsets(cols: usize, source: Range<usize>) -> Vec<usize> {
    let len = source.len();
    if len == 0 || source.end > cols {
        return Vec::new();
    }
    let left = (0..).map(|k| k * len).take_while(|&s| s + len <= source.start);
    let right = (0..)
        .map(|k| source.end + k * len)
        .take_while(|&s| s + len <= cols);
    left.chain(right).collect()
}

/// `count` destination columns drawn without replacement from
/// [`candidate_offsets`] by a seeded shuffle, returned in ascending order.
pub fn relocation_offsets(cols: usize, source: Range<usize>, count: usize, seed: u64) -> Result<Vec<usize>> {
    let mut candidates = candidate_offsets(cols, source.clone());
    if candidates.len() < count {
        return Err(Error::config(format!(
            "only {} disjoint {}-column blocks fit outside {source:?} in {cols} columns, {count} requested",
            candidates.len(),
            source.len()
        )));
    }
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = candidates[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// One copy of `m` per offset with the columns at `offset..offset+len`
/// overwritten by the `source` columns. A destination equal to the source is
/// an identity copy; a partially overlapping one is rejected.
pub fn relocate_event_columns(m: &Matrix, source: Range<usize>, offsets: &[usize]) -> Result<Vec<Matrix>> {
    let len = source.len();
    if len == 0 || source.end > m.cols() {
        return Err(Error::config(format!(
            "source block {source:?} is empty or outside {} columns",
            m.cols()
        )));
    }
    offsets
        .iter()
        .map(|&start| {
            let dst = start..start + len;
            if dst.end > m.cols() {
                return Err(Error::config(format!("destination {dst:?} is outside {} columns", m.cols())));
            }
            if dst != source && overlaps(&dst, &source) {
                return Err(Error::config(format!("destination {dst:?} overlaps source {source:?}")));
            }
            let mut out = m.clone();
            for r in 0..m.rows() {
                let row = out.row_mut(r);
                row.copy_within(source.clone(), start);
            }
            Ok(out)
        })
        .collect()
}

/// Reverses the row (slow-time) order.
pub fn vertical_flip(m: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(m.data().len());
    for row in m.iter_rows().rev() {
        data.extend_from_slice(row);
    }
    Matrix::from_vec(m.rows(), m.cols(), data).expect("same shape")
}
