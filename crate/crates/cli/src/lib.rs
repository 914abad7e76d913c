pub mod config;
pub mod run;

pub use config::{parse_config, ConfigError, Mode, RunConfig};
pub use run::{run_pipeline, Output, ResultRecord, RunError};
