//! Persistence: netpbm images, run configurations, dataset manifests,
//! checkpoints and synthetic dataset generation.

pub mod checkpoint;
pub mod config;
pub mod kv;
pub mod manifest;
pub mod netpbm;
pub mod synthetic;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, load_checkpoint_resized, load_trainer, save_checkpoint,
    save_trainer,
};
pub use config::{parse_config, parse_config_str};
pub use manifest::DatasetManifest;
pub use netpbm::{read_image_ppm, read_labels_pgm, write_image_ppm, write_labels_pgm};
pub use synthetic::{generate_synthetic, synthesize, SyntheticSpec};
