//! Volumes, label maps, on-disk formats, synthetic dataset generation,
//! the fixed per-voxel feature pipeline, and slice export.
//!
//! Voxel layout is shared everywhere: index `x + X·(y + Y·z)`, channels
//! fastest on disk. Files use a 16-byte magic/version preamble, a JSON
//! header with explicit lengths, and a raw little-endian payload.

mod container;
mod features;
mod slices;
mod synth;
mod volume;

pub use container::{read_container, write_container, FORMAT_VERSION};
pub use features::{extract_features, FEATURE_DIM};
pub use slices::{export_overlay_slices, export_pgm_slices, class_color, PALETTE};
pub use synth::{
    generate_dataset, remap_nested_regions, BlobSpec, CaseEntry, DatasetManifest, NestingScheme,
    RegionSpec, SceneConfig, Split,
};
pub use volume::{
    read_labels, read_volume, write_labels, write_volume, LabelVolume, Mask, Volume,
};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a recognized container (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported format version {found}")]
    BadVersion { path: PathBuf, found: u32 },
    #[error("{path}: truncated, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("{path}: malformed header: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
    #[error("channel {channel} out of range for {channels} channels")]
    ChannelOutOfRange { channel: usize, channels: usize },
    #[error("window must be odd and at least 1, got {0}")]
    BadWindow(usize),
    #[error("region {region:?} references unknown base label {label}")]
    UnknownBaseLabel { region: String, label: u8 },
    #[error("dataset generation failed: {0}")]
    Generation(String),
    #[error("manifest problem: {0}")]
    Manifest(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}
