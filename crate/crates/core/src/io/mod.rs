// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats, run configuration and the command pipeline.

mod archive;
mod checkpoint;
mod commands;
mod config;
mod svg;

pub use archive::{TensorArchive, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use checkpoint::{
    checkpoint_archive, load_checkpoint, model_from_archive, save_checkpoint, CHECKPOINT_FILE,
};
pub use commands::{
    cmd_dump, cmd_metrics, cmd_report, cmd_train, compute_metrics, dump_archive, gen_data,
    hidden_file, load_run, read_lens, read_metrics, read_summary, read_train_log, split_features,
    split_features_from_archive, train_model, version_string, visual_states, ComparisonRow,
    LensComparisonRow, LensRow, MetricAccessor, MetricsOutput, MetricsRow, MetricsSummary,
    ReportOptions, TrainLogRow, LENS_CSV, LENS_TOP_K, METRICS_CSV, METRICS_SUMMARY,
    PLOTTED_METRICS, TRAIN_LOG_FILE,
};
pub use config::{RunConfig, CONFIG_FILE};
pub use svg::{heatmap, line_overlay, Series};
