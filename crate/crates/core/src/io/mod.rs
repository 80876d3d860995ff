//! File formats: `.flo` flow, single-channel float maps, 8-bit PNG,
//! checkpoints, run configs and scene bundles.

pub mod bundle;
pub mod checkpoint;
pub mod config;
pub mod flo;
pub mod pfm;
pub mod raster;

pub use bundle::{generate_bundle, read_scene, write_scene, LoadedScene, Manifest, MANIFEST_NAME};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{ConfidenceSource, RunConfig};
pub use flo::{decode_flo, encode_flo, read_flo, write_flo};
pub use pfm::{decode_pfm, encode_pfm, read_channels, read_pfm, write_channels, write_pfm};
