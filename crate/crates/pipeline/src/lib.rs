//! Operational shell around `inpaint-core`: manifest ingestion, training
//! drivers with checkpoints, batch inpainting, evaluation reports and the
//! guidance-weight grid search.
//!
//! Every artifact records the SHA-256 of the run configuration; with the
//! same hash and seed, outputs are bit-identical.

pub mod config;
pub mod evaluate;
pub mod grid;
pub mod infer;
pub mod manifest;
pub mod toy;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use config::RunConfig;

/// Numeric type of the pipeline.
pub type Float = f32;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] inpaint_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status in the BSD `sysexits` convention.
    pub fn exit_code(&self) -> u8 {
        use inpaint_core::Error as C;
        const DATAERR: u8 = 65;
        const SOFTWARE: u8 = 70;
        const IOERR: u8 = 74;
        const CONFIG: u8 = 78;
        match self {
            Self::Config(_) => CONFIG,
            Self::Data(_) | Self::Json(_) => DATAERR,
            Self::Runtime(_) => SOFTWARE,
            Self::Io(_) => IOERR,
            Self::Core(c) => match c {
                C::Config(_) => CONFIG,
                C::InvalidInput(_) | C::InfeasibleMask(_) | C::Wav(_) | C::Checkpoint(_) => DATAERR,
                C::Io(_) => IOERR,
                C::Numerical(_) | C::Tensor(_) => SOFTWARE,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A generator for one purpose of a run: the same `(seed, stream)` always
/// yields the same draws.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream numbers, kept apart so adding draws in one place never shifts
/// another.
pub mod streams {
    pub const DENOISER_INIT: u64 = 1;
    pub const DENOISER_TRAIN: u64 = 2;
    pub const CLASSIFIER_INIT: u64 = 3;
    pub const CLASSIFIER_TRAIN: u64 = 4;
    /// Sampling uses `SAMPLE_BASE + utterance index`.
    pub const SAMPLE_BASE: u64 = 1 << 32;
}
