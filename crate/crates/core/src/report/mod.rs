//! Configuration parsing and report emission: ladder tables, reliability
//! CSVs and per-example probability bars.

mod bars;
mod config;
mod tables;
mod workflow;

use thiserror::Error;

pub use bars::{emit_prediction_bars, prediction_bars, prediction_svg, resolve_class_names, write_prediction_csv, ExampleBars};
pub use config::{format_blocks, parse_blocks, parse_config, parse_config_text, ConfigError, Format, RunConfig, Source, KEYS};
pub use tables::{
    emit_ladder_table, emit_reliability, format_compression, ladder_rows, parse_ladder_csv, write_ladder_csv,
    write_ladder_markdown, LadderRow, LADDER_COLUMNS,
};
pub use workflow::{emit_run_reports, load_model, load_report};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Ikd(#[from] crate::ikd::IkdError),
    #[error("{0}")]
    Table(String),
}
