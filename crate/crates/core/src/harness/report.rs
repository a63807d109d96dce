//! JSON, CSV and PNG artifacts for runs and embeddings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::embed::EmbeddingSet;
use super::plot::{box_plot, confusion_plot, curves_plot, scatter_plot, PlotConfig};
use super::runs::RunsSummary;
use super::train::RunReport;
use crate::dataset::save_png;
use crate::error::{Error, Result};
use crate::util::{atomic_write, read_json, write_json};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub schema_version: u32,
    pub kind: String,
    pub body: T,
}

pub fn save_report<T: Serialize>(path: &Path, kind: &str, body: &T) -> Result<()> {
    write_json(
        path,
        &Versioned {
            schema_version: REPORT_SCHEMA_VERSION,
            kind: kind.to_owned(),
            body,
        },
    )
}

pub fn load_report<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let v: Versioned<T> = read_json(path)?;
    if v.schema_version != REPORT_SCHEMA_VERSION || v.kind != kind {
        return Err(Error::Format {
            format: "report",
            detail: format!(
                "{}: expected {kind} schema {REPORT_SCHEMA_VERSION}, found {} schema {}",
                path.display(),
                v.kind,
                v.schema_version
            ),
        });
    }
    Ok(v.body)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn curves_csv(report: &RunReport) -> String {
    let mut s = String::from("epoch,train_loss,train_accuracy,test_loss,test_accuracy\n");
    for e in &report.epochs {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            e.epoch,
            e.train_loss,
            e.train_accuracy,
            opt(e.test_loss),
            opt(e.test_accuracy)
        );
    }
    s
}

/// Writes `<name>.json`, `<name>_curves.csv`, `<name>_curves.png` and, when
/// the run was evaluated, `<name>_confusion.png`.
pub fn export_run(dir: &Path, name: &str, report: &RunReport, plot: &PlotConfig) -> Result<Vec<PathBuf>> {
    plot.validate()?;
    create_dir(dir)?;
    let mut written = vec![dir.join(format!("{name}.json")), dir.join(format!("{name}_curves.csv"))];
    save_report(&written[0], "run", report)?;
    atomic_write(&written[1], curves_csv(report).as_bytes())?;
    let col = |f: fn(&super::EpochStats) -> Option<f64>| report.epochs.iter().map(f).collect::<Vec<_>>();
    let img = curves_plot(
        (&col(|e| Some(e.train_loss)), &col(|e| e.test_loss)),
        (&col(|e| Some(e.train_accuracy)), &col(|e| e.test_accuracy)),
        plot,
    );
    let curves = dir.join(format!("{name}_curves.png"));
    save_png(&curves, &img)?;
    written.push(curves);
    if let Some(eval) = &report.final_test {
        let p = dir.join(format!("{name}_confusion.png"));
        save_png(&p, &confusion_plot(&eval.confusion, plot))?;
        written.push(p);
    }
    Ok(written)
}

/// Writes the summary JSON, one CSV row per run and a boxplot.
pub fn export_runs(dir: &Path, summary: &RunsSummary, plot: &PlotConfig) -> Result<Vec<PathBuf>> {
    plot.validate()?;
    create_dir(dir)?;
    let json = dir.join("runs.json");
    save_report(&json, "runs", summary)?;
    let mut csv = String::from("run,seed,test_accuracy\n");
    for (i, (r, a)) in summary.runs.iter().zip(&summary.accuracies).enumerate() {
        let _ = writeln!(csv, "{i},{},{a}", r.seed);
    }
    let csv_path = dir.join("accuracies.csv");
    atomic_write(&csv_path, csv.as_bytes())?;
    let png = dir.join("accuracy_boxplot.png");
    save_png(&png, &box_plot(&[summary.stats], plot))?;
    Ok(vec![json, csv_path, png])
}

/// Writes `embedding_stage{1,2}` as JSON, CSV and a scatter plot.
pub fn export_embedding(dir: &Path, set: &EmbeddingSet, plot: &PlotConfig) -> Result<Vec<PathBuf>> {
    plot.validate()?;
    create_dir(dir)?;
    let base = format!("embedding_stage{}", set.stage.number());
    let json = dir.join(format!("{base}.json"));
    save_report(&json, "embedding", set)?;
    let mut csv = String::from("x,y,label\n");
    for (c, l) in set.coords.iter().zip(&set.labels) {
        let _ = writeln!(csv, "{},{},{l}", c[0], c[1]);
    }
    let csv_path = dir.join(format!("{base}.csv"));
    atomic_write(&csv_path, csv.as_bytes())?;
    let png = dir.join(format!("{base}.png"));
    save_png(&png, &scatter_plot(&set.coords, &set.labels, set.n_classes, plot))?;
    Ok(vec![json, csv_path, png])
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
