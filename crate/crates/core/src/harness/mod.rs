//! Experiment protocol: training, evaluation, repeated seeded runs,
//! embeddings and report export.

mod embed;
mod plot;
mod report;
mod runs;
mod train;
mod tsne;

pub use embed::{embed_stage, embed_vectors, extract_embeddings, stage_vectors, EmbeddingSet, Stage};
pub use plot::{box_plot, confusion_plot, curves_plot, scatter_plot, PlotConfig};
pub use report::{
    curves_csv, export_embedding, export_run, export_runs, load_report, save_report, Versioned,
    REPORT_SCHEMA_VERSION,
};
pub use runs::{
    box_stats, load_labeled, quantile, repeated_runs, repeated_runs_inspect, single_run, split_indices, BoxStats, RunSeeds,
    RunsSummary, TrainedRun,
};
pub use train::{
    epoch_batches, evaluate, evaluate_features, train, ConfusionMatrix, EpochStats, Evaluation,
    LabeledSet, RunReport, TrainConfig,
};
pub use tsne::{nn_agreement, tsne_2d, TsneConfig, TsneResult};
