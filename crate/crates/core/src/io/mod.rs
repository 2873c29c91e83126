//! File formats: netpbm images, packed datasets, checkpoints and run
//! configuration.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod pnm;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, RawCheckpoint};
pub use config::{parse_config, render_model_config, RunConfig};
pub use dataset::{load_dataset, pack_dir, read_dataset, superres_pairs, write_dataset};
pub use pnm::{read_ppm, write_pgm, write_ppm};
