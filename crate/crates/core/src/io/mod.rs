//! File formats, dataset ingestion and export helpers.

mod dataset;
mod export;
mod model_file;
mod pgm;

pub use dataset::{degrade, ingest_dataset, jpeg_roundtrip, list_images, DatasetManifest, JpegData};
pub use export::{filter_grid, penalty_table, write_penalties_csv, PenaltyRow};
pub use model_file::{load_model, parse_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use pgm::{decode_pgm, encode_pgm, load_image, save_image};
