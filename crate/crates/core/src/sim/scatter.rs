use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SimConfig;
use crate::error::Result;
use crate::util::derive_seed;

const FIELD_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatterer {
    /// Offset from the start of its cell, in `[0, sample_spacing_m)`.
    pub offset_m: f64,
    pub reflectivity: f64,
    pub intrinsic_phase: f64,
}

/// Random scatterers, `per_cell` per spatial cell, offsets sorted within each
/// cell so the flat list is ordered by position along the fiber.
#[derive(Debug, Clone, PartialEq)]
pub struct ScattererField {
    cell_length_m: f64,
    per_cell: usize,
    scatterers: Vec<Scatterer>,
}

impl ScattererField {
    pub fn n_cells(&self) -> usize {
        self.scatterers.len() / self.per_cell
    }

    pub fn per_cell(&self) -> usize {
        self.per_cell
    }

    pub fn cell_length_m(&self) -> f64 {
        self.cell_length_m
    }

    pub fn cell(&self, index: usize) -> &[Scatterer] {
        &self.scatterers[index * self.per_cell..(index + 1) * self.per_cell]
    }

    pub fn scatterers(&self) -> &[Scatterer] {
        &self.scatterers
    }

    /// Absolute position of the `k`-th scatterer in the flat list.
    pub fn position_m(&self, k: usize) -> f64 {
        (k / self.per_cell) as f64 * self.cell_length_m + self.scatterers[k].offset_m
    }
}

pub fn build_scatterers(config: &SimConfig) -> Result<ScattererField> {
    config.validate()?;
    let n_cells = config.n_samples();
    let per_cell = config.scatterers_per_cell;
    let spacing = config.sample_spacing_m;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, FIELD_STREAM));
    let mut scatterers = Vec::with_capacity(n_cells * per_cell);
    let mut cell = Vec::with_capacity(per_cell);
    for _ in 0..n_cells {
        cell.clear();
        for _ in 0..per_cell {
            let offset_m = rng.random::<f64>() * spacing;
            // Rayleigh(sigma = 1) magnitude by inversion; 1 - u keeps ln finite
            let u: f64 = rng.random();
            let reflectivity = (-2.0 * (1.0 - u).ln()).sqrt();
            let intrinsic_phase = rng.random::<f64>() * std::f64::consts::TAU;
            cell.push(Scatterer {
                offset_m,
                reflectivity,
                intrinsic_phase,
            });
        }
        cell.sort_by(|a, b| a.offset_m.total_cmp(&b.offset_m));
        scatterers.extend_from_slice(&cell);
    }
    Ok(ScattererField {
        cell_length_m: spacing,
        per_cell,
        scatterers,
    })
}
