//! Domain types for reconstructions, pairwise matches, dense feature maps and
//! global descriptors, together with their on-disk formats.
//!
//! Text formats (reconstructions, matches) are line oriented: `#` starts a
//! comment and fields are separated by whitespace. Binary formats (feature
//! maps, descriptor matrices) are little-endian with 32-bit floats; values are
//! widened to `f64` in memory.

mod binary;
mod matches;
mod recon;
mod text;

pub(crate) use text::lines as text_lines;

use std::fmt;

use thiserror::Error;

pub use binary::{
    decode_descriptors, decode_feature_map, decode_matrix, encode_descriptors, encode_feature_map,
    encode_matrix, DescriptorSet, FeatureMap, DESCRIPTOR_MAGIC, FEATURE_MAP_MAGIC, FORMAT_VERSION,
};
pub use matches::{parse_matches, write_matches, Correspondence, MatchSet};
pub use recon::{
    parse_reconstruction, write_reconstruction, ImageRecord, Observation, Point3D, Reconstruction,
    Scene,
};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident($inner:ty)) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

id_type!(
    /// Scene identifier.
    SceneId(u32)
);
id_type!(
    /// Registered image identifier, unique across the whole reconstruction.
    ImageId(u32)
);
id_type!(
    /// Reconstructed 3D point identifier.
    PointId(u64)
);

/// An unordered image pair stored as `(min id, max id)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ImagePair {
    lo: ImageId,
    hi: ImageId,
}

impl ImagePair {
    /// Canonicalizes `(a, b)`. Returns `None` for a self pair.
    pub fn new(a: ImageId, b: ImageId) -> Option<Self> {
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Some(Self { lo: a, hi: b }),
            std::cmp::Ordering::Greater => Some(Self { lo: b, hi: a }),
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn lo(&self) -> ImageId {
        self.lo
    }

    pub fn hi(&self) -> ImageId {
        self.hi
    }

    pub fn contains(&self, id: ImageId) -> bool {
        self.lo == id || self.hi == id
    }

    /// The member of the pair that is not `id`.
    pub fn other(&self, id: ImageId) -> Option<ImageId> {
        if id == self.lo {
            Some(self.hi)
        } else if id == self.hi {
            Some(self.lo)
        } else {
            None
        }
    }
}

impl fmt::Display for ImagePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lo, self.hi)
    }
}

/// Structural violations of the model invariants.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("duplicate scene id {0}")]
    DuplicateScene(SceneId),
    #[error("duplicate image id {0}")]
    DuplicateImage(ImageId),
    #[error("duplicate point id {0}")]
    DuplicatePoint(PointId),
    #[error("duplicate image name {0:?}")]
    DuplicateName(String),
    #[error("image {image} references unknown scene {scene}")]
    UnknownScene { image: ImageId, scene: SceneId },
    #[error("track of point {point} references unknown image {image}")]
    DanglingImage { point: PointId, image: ImageId },
    #[error("track of point {point} observes image {image} more than once")]
    RepeatedObservation { point: PointId, image: ImageId },
    #[error("track of point {point} has length {len}, need at least 2")]
    ShortTrack { point: PointId, len: usize },
    #[error("image {0} has zero width or height")]
    EmptyImage(ImageId),
    #[error("invalid name {0:?}: names must be non-empty and contain no whitespace or '#'")]
    InvalidName(String),
    #[error("non-finite coordinate in {0}")]
    NonFinite(String),
    #[error("pair {0} is a self pair")]
    SelfPair(ImageId),
    #[error("duplicate pair {0}")]
    DuplicatePair(ImagePair),
    #[error("pair {pair} references unknown image {image}")]
    UnknownPairImage { pair: ImagePair, image: ImageId },
    #[error("correspondence {index} of pair {pair} lies outside image bounds")]
    OutOfBounds { pair: ImagePair, index: usize },
    #[error("feature map of {channels}x{height}x{width} needs {expected} values, got {found}")]
    FeatureMapShape {
        channels: usize,
        height: usize,
        width: usize,
        expected: usize,
        found: usize,
    },
    #[error("descriptor {name:?} has dimension {found}, expected {expected}")]
    DescriptorDim {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("descriptor dimension must be positive")]
    ZeroDim,
}

/// Errors raised while decoding any of the file formats.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: ModelError,
    },
    #[error("magic mismatch: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl FormatError {
    /// 1-based line of the first violation, when the source is a text format.
    pub fn line(&self) -> Option<usize> {
        match self {
            FormatError::Syntax { line, .. } | FormatError::Invalid { line, .. } => Some(*line),
            _ => None,
        }
    }
}

pub(crate) fn validate_name(name: &str) -> Result<(), ModelError> {
    if name.is_empty() || name.contains('#') || name.chars().any(char::is_whitespace) {
        return Err(ModelError::InvalidName(name.to_string()));
    }
    Ok(())
}
