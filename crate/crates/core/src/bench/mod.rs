//! Experiment harness: configuration files, seeded sweeps, univariate grid
//! search, CSV persistence, learning-curve plots and feature embeddings.

mod config;
mod embed;
mod plot;
mod sweep;

pub use config::{
    parse_config, parse_config_str, prepare_split, DatasetSpec, ExperimentSpec, GridParam, GridSpec, LabConfig,
};
pub use embed::{embed_features, pca_2d, write_embedding_csv};
pub use plot::{plot_curves, render_svg, Axes};
pub use sweep::{
    aggregate, grid_configs, grid_search, mean_std, read_aggregate_csv, read_raw_csv, run_sweep, write_aggregate_csv,
    write_grid, write_history_csv, write_raw_csv, write_sweep, AggregateRow, GridOutcome, GridPoint, ResultRow,
    SweepOutcome, AGGREGATE_HEADER, HISTORY_HEADER, RAW_HEADER,
};
