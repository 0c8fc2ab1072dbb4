//! Files in and out: weights, architecture configs, IDX images, PGM grids, CSV.

mod arch;
mod csv;
mod fs;
mod idx;
mod pgm;
mod weights;

pub use arch::{parse_arch_config, ArchConfig, MNIST_DISCRIMINATOR_CFG, MNIST_GENERATOR_CFG};
pub use csv::{read_csv, write_csv, CsvTable};
pub use fs::write_atomic;
pub use idx::{encode_idx_f64, load_idx_images, read_idx_images, write_idx_f64, ImageBatch};
pub use pgm::{image_grid, read_pgm, write_image_grid, Pgm, GUTTER};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};
