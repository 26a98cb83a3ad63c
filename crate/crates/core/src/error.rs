//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("invalid depth value {z} (must be > 0)")]
    InvalidDepth { z: f64 },

    #[error("depth raster has no valid pixel")]
    EmptyDepth,

    #[error("frame window must contain at least 2 frames, got {n}")]
    InvalidWindow { n: usize },

    #[error("frame {index} has size {width}x{height}, expected {exp_width}x{exp_height}")]
    DimensionMismatch {
        index: usize,
        width: usize,
        height: usize,
        exp_width: usize,
        exp_height: usize,
    },

    #[error("non-finite residual in {term} term, pair ({l},{m}), block {block}")]
    NonFiniteResidual {
        term: &'static str,
        l: usize,
        m: usize,
        block: usize,
    },

    #[error("non-finite energy at the initial state")]
    NonFiniteInitialEnergy,

    #[error("no counterpart for frame index {index}: missing {missing}")]
    PairingError { index: String, missing: String },

    #[error("flow file has bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("flow file truncated: expected {expected} bytes of payload, got {got}")]
    Truncated { expected: usize, got: usize },

    #[error("no jointly valid pixels, mean EPE undefined")]
    EmptyEpe,

    #[error("scene body {index} is not visible in the first frame")]
    BodyInvisible { index: usize },

    #[error("intrinsics file: {0}")]
    IntrinsicsParse(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<String>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
