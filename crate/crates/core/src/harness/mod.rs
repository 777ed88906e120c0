//! File formats, run configuration, and the end-to-end experiment.

pub mod commands;
pub mod config;
pub mod files;
pub mod pipeline;
pub mod tensor;

pub use commands::{cmd_contrast, cmd_eval, cmd_pipeline, cmd_register, cmd_sample, cmd_simulate, cmd_train};
pub use config::PipelineConfig;
pub use files::{export_png, read_shifts_csv, write_loss_csv, write_shifts_csv};
pub use pipeline::{run_pipeline, PipelineReport, Split, DIFFUSION_METHOD, DIRECT_METHOD};
pub use tensor::TensorFile;
