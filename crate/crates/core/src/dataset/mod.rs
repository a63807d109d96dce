//! Labeled amplitude/phase image-pair datasets: rendering, augmentation,
//! on-disk layout and train/test splits.

mod augment;
mod render;
mod tsm;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use augment::{
    candidate_offsets, relocate_event_columns, relocation_offsets, vertical_flip, AugmentSpec,
};
pub use render::{
    colorize, image_to_tensor, load_png, lut256, normalize, render_image, render_scalar, resize,
    save_png, Colormap, RenderSpec,
};
pub use tsm::{decode_tsm, encode_tsm, load_tsm, save_tsm};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::ImagePair;
use crate::sim::{EventLabel, N_CLASSES};
use crate::util::{derive_seed, read_json, write_json};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// File names used for per-class demodulated matrices.
pub fn diff_amplitude_file(class_index: usize) -> String {
    format!("class_{class_index:02}_damp.tsm")
}

pub fn wrapped_phase_file(class_index: usize) -> String {
    format!("class_{class_index:02}_wphase.tsm")
}

/// One demodulated recording before augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseRecording {
    pub id: String,
    pub label: EventLabel,
    pub diff_amplitude: Matrix,
    pub wrapped_phase: Matrix,
}

/// Reads `class_XX_damp.tsm` / `class_XX_wphase.tsm` for all classes.
pub fn load_base_dir(dir: &Path) -> Result<Vec<BaseRecording>> {
    EventLabel::all()
        .map(|label| {
            let c = label.class_index();
            Ok(BaseRecording {
                id: format!("class_{c:02}"),
                label,
                diff_amplitude: load_tsm(&dir.join(diff_amplitude_file(c)))?,
                wrapped_phase: load_tsm(&dir.join(wrapped_phase_file(c)))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    /// Destination column of the relocated event window; `None` for the
    /// original placement.
    pub offset: Option<usize>,
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub label: EventLabel,
    pub base: String,
    pub augmentation: Augmentation,
    /// Paths relative to the manifest directory.
    pub amp_png: String,
    pub phase_png: String,
    pub amp_tsm: String,
    pub phase_tsm: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub render: RenderSpec,
    pub augment: AugmentSpec,
    /// Relocation destinations shared by every base recording.
    pub offsets: Vec<usize>,
    /// Samples per class index.
    pub counts: Vec<usize>,
    pub samples: Vec<SampleEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl PartialEq for DatasetManifest {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version
            && self.seed == other.seed
            && self.render == other.render
            && self.augment == other.augment
            && self.offsets == other.offsets
            && self.counts == other.counts
            && self.samples == other.samples
    }
}

fn class_counts(samples: &[SampleEntry]) -> Vec<usize> {
    let mut counts = vec![0; N_CLASSES];
    for s in samples {
        counts[s.label.class_index()] += 1;
    }
    counts
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Directory the sample paths are relative to.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label.class_index()).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    /// Loads `path` (a manifest file or the directory holding one) and checks
    /// that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let mut m: DatasetManifest = read_json(&file)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::config(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        if m.counts != class_counts(&m.samples) {
            return Err(Error::config("manifest class counts do not match its samples"));
        }
        for s in &m.samples {
            for rel in [&s.amp_png, &s.phase_png, &s.amp_tsm, &s.phase_tsm] {
                let p = m.root.join(rel);
                if !p.is_file() {
                    return Err(Error::MissingFile(p));
                }
            }
        }
        Ok(m)
    }

    fn with_samples(&self, samples: Vec<SampleEntry>) -> Self {
        Self {
            counts: class_counts(&samples),
            samples,
            ..self.clone()
        }
    }

    /// Uniform random split without replacement into `round(fraction * N)`
    /// training samples and the rest; both keep manifest order.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if self.samples.is_empty() {
            return Err(Error::config("cannot split an empty manifest"));
        }
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::config(format!("train fraction {train_fraction} is not in (0, 1)")));
        }
        let n = self.samples.len();
        let n_train = (train_fraction * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut is_train = vec![false; n];
        for &i in &order[..n_train] {
            is_train[i] = true;
        }
        let (train, test): (Vec<_>, Vec<_>) = self
            .samples
            .iter()
            .cloned()
            .zip(is_train)
            .partition(|(_, t)| *t);
        Ok((
            self.with_samples(train.into_iter().map(|(s, _)| s).collect()),
            self.with_samples(test.into_iter().map(|(s, _)| s).collect()),
        ))
    }

    pub fn load_pair(&self, entry: &SampleEntry) -> Result<ImagePair> {
        Ok(ImagePair {
            amp: image_to_tensor(&load_png(&self.root.join(&entry.amp_png))?),
            phase: image_to_tensor(&load_png(&self.root.join(&entry.phase_png))?),
        })
    }

    pub fn load_pairs(&self) -> Result<Vec<ImagePair>> {
        self.samples.par_iter().map(|s| self.load_pair(s)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub augment: AugmentSpec,
    pub render: RenderSpec,
    /// Reject base sets that do not cover every class exactly once.
    pub one_per_class: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            augment: AugmentSpec::default(),
            render: RenderSpec::default(),
            one_per_class: true,
        }
    }
}

struct Pending<'a> {
    entry: SampleEntry,
    base: &'a BaseRecording,
    offset_index: Option<usize>,
}

/// Augments every base recording (relocate, then flip), renders both
/// matrices of each sample and writes images, TSM files and the manifest
/// under `out_dir`.
pub fn build_dataset(bases: &[BaseRecording], spec: &DatasetSpec, out_dir: &Path, seed: u64) -> Result<DatasetManifest> {
    spec.render.validate()?;
    if bases.is_empty() {
        return Err(Error::config("no base recordings"));
    }
    if spec.one_per_class {
        let counts = bases.iter().fold(vec![0; N_CLASSES], |mut c, b| {
            c[b.label.class_index()] += 1;
            c
        });
        if let Some(missing) = counts.iter().position(|&c| c != 1) {
            return Err(Error::config(format!(
                "expected exactly one base recording per class; class {missing} has {}",
                counts[missing]
            )));
        }
    }
    let cols = bases[0].diff_amplitude.cols();
    for b in bases {
        if b.diff_amplitude.shape() != b.wrapped_phase.shape() || b.diff_amplitude.cols() != cols {
            return Err(Error::shape(format!(
                "base `{}` matrices have shapes {:?} / {:?}",
                b.id,
                b.diff_amplitude.shape(),
                b.wrapped_phase.shape()
            )));
        }
    }
    let source = spec.augment.source();
    let offsets = if spec.augment.offsets > 0 {
        relocation_offsets(cols, source.clone(), spec.augment.offsets, derive_seed(seed, 1))?
    } else {
        Vec::new()
    };

    let mut pending = Vec::new();
    for base in bases {
        let placements = std::iter::once(None).chain((0..offsets.len()).map(Some));
        for offset_index in placements {
            let flips: &[bool] = if spec.augment.flip { &[false, true] } else { &[false] };
            for &flipped in flips {
                let offset = offset_index.map(|i| offsets[i]);
                let id = format!(
                    "{}_{}_{}",
                    base.id,
                    offset.map_or("orig".to_string(), |o| format!("o{o:05}")),
                    if flipped { "flip" } else { "up" }
                );
                pending.push(Pending {
                    entry: SampleEntry {
                        amp_png: format!("images/{id}_amp.png"),
                        phase_png: format!("images/{id}_phase.png"),
                        amp_tsm: format!("tsm/{id}_amp.tsm"),
                        phase_tsm: format!("tsm/{id}_phase.tsm"),
                        id,
                        label: base.label,
                        base: base.id.clone(),
                        augmentation: Augmentation { offset, flipped },
                    },
                    base,
                    offset_index,
                });
            }
        }
    }

    for sub in ["images", "tsm"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let render = spec.render;
    pending.par_iter().try_for_each(|p| -> Result<()> {
        for (matrix, png, tsm) in [
            (&p.base.diff_amplitude, &p.entry.amp_png, &p.entry.amp_tsm),
            (&p.base.wrapped_phase, &p.entry.phase_png, &p.entry.phase_tsm),
        ] {
            let placed = match p.offset_index {
                None => matrix.clone(),
                Some(i) => relocate_event_columns(matrix, source.clone(), &offsets[i..=i])?.remove(0),
            };
            let oriented = if p.entry.augmentation.flipped {
                vertical_flip(&placed)
            } else {
                placed
            };
            let scalar = render_scalar(&oriented, &render)?;
            save_png(&out_dir.join(png), &colorize(&scalar, render.colormap))?;
            save_tsm(&out_dir.join(tsm), &scalar)?;
        }
        Ok(())
    })?;

    let samples: Vec<SampleEntry> = pending.into_iter().map(|p| p.entry).collect();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        render,
        augment: spec.augment,
        offsets,
        counts: class_counts(&samples),
        samples,
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}
