#![allow(dead_code)]

use std::path::{Path, PathBuf};

use das_forge::dataset::{build_dataset, AugmentSpec, BaseRecording, DatasetManifest, DatasetSpec};
use das_forge::demod::{process, BandpassSpec};
use das_forge::sim::{build_scatterers, synthesize, EventLabel, SimConfig};

/// Demodulated recordings of all 15 classes sharing one scatterer field.
pub fn desk_bases(config: &SimConfig) -> Vec<BaseRecording> {
    let field = build_scatterers(config).unwrap();
    let spec = BandpassSpec::for_config(config);
    EventLabel::all()
        .map(|label| {
            let raw = synthesize(config, &field, Some(label)).unwrap();
            let ts = process(&raw.data, &spec).unwrap();
            BaseRecording {
                id: format!("class_{:02}", label.class_index()),
                label,
                diff_amplitude: ts.diff_amplitude,
                wrapped_phase: ts.wrapped_phase,
            }
        })
        .collect()
}

pub fn desk_dataset(config: &SimConfig, out: &Path, seed: u64) -> DatasetManifest {
    let spec = DatasetSpec {
        augment: AugmentSpec::for_sim(config),
        ..DatasetSpec::default()
    };
    build_dataset(&desk_bases(config), &spec, out, seed).unwrap()
}

/// Every regular file below `dir`, relative to it, sorted.
pub fn files_under(dir: &Path) -> Vec<PathBuf> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
