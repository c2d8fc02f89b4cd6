//! File formats and configuration.

mod config;
mod dataset;

pub use config::{RunConfig, CONFIG_KEYS, ENV_PREFIX};
pub use dataset::{
    header_for, read_dataset, write_dataset, write_dataset_to, DatasetHeader, DatasetReader, FORMAT_VERSION, MAGIC,
};
