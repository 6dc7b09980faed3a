//! File formats, run configuration and dataset generation.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod pnm;

pub use checkpoint::{read_checkpoint, read_tensor, write_checkpoint, write_tensor, Checkpoint, DType};
pub use config::{DataSource, RunConfig};
pub use dataset::{Dataset, DatasetKind, SyntheticDatasetSpec};
pub use pnm::{load_images, save_images};
