//! Pipeline stages behind the `scaae` binary: `generate`, `train`,
//! `extract` and `analyze`. Every stage writes its output directory
//! atomically and produces byte-identical files for identical inputs.

pub mod commands;
pub mod config;
mod staging;

pub use commands::{
    cmd_analyze, cmd_extract, cmd_generate, cmd_train, load_fbn_dir, load_templates, AnalysisSummary, ExtractMeta,
    SeriesInput, TemplateSource,
};
pub use config::{AnalysisConfig, RunConfig};
