//! File formats: checkpoints, images, depth maps and run configuration.

mod checkpoint;
mod config;
mod images;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{ConfigFile, Section};
pub use images::{
    decode_pfm, encode_pfm, read_image, read_labels, read_pfm, write_labels, write_pfm, write_png, write_ppm, PFM_HEADER_SCALE,
};
