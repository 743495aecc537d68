//! Crate-wide error type.

use thiserror::Error;

/// Everything that can go wrong across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible operand shapes for a tape primitive or model call.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// `backward` was asked to differentiate a non-scalar value.
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    /// A numeric or structural argument violated an operation's contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Configuration failed validation; the message names the offending key.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint bytes did not start with the expected magic.
    #[error("checkpoint: bad magic {found:02x?}, expected \"DMLC\"")]
    CheckpointBadMagic { found: [u8; 4] },

    /// Checkpoint version is not one this build understands.
    #[error("checkpoint: unsupported version {found}, expected {expected}")]
    CheckpointBadVersion { found: u8, expected: u8 },

    /// Checkpoint ended before the declared payload was complete.
    #[error("checkpoint: truncated at byte {offset}, needed {needed} more")]
    CheckpointTruncated { offset: usize, needed: usize },

    /// Checkpoint checksum did not match its contents.
    #[error("checkpoint: CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    CheckpointCrc { stored: u32, computed: u32 },

    /// Loaded parameters do not fit the architecture they were loaded for.
    #[error("checkpoint: layer shapes {found:?} do not match expected {expected:?}")]
    CheckpointShape {
        expected: Vec<(usize, usize)>,
        found: Vec<(usize, usize)>,
    },

    /// An IDX file did not carry the expected magic for its role.
    #[error("idx: bad magic {found:#010x} in {path}, expected {expected:#010x}")]
    IdxBadMagic {
        path: String,
        found: u32,
        expected: u32,
    },

    /// Image and label files disagree about the number of samples.
    #[error("idx: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    /// An IDX file ended before its declared contents.
    #[error("idx: {path} truncated, expected {expected} bytes, got {got}")]
    IdxTruncated {
        path: String,
        expected: usize,
        got: usize,
    },

    /// Wire frame did not start with the expected magic.
    #[error("transport: bad frame magic {found:02x?}, expected \"DMLP\"")]
    FrameBadMagic { found: [u8; 4] },

    /// Wire frame version is not one this build understands.
    #[error("transport: unsupported frame version {found}, expected {expected}")]
    FrameBadVersion { found: u8, expected: u8 },

    /// Frame length disagrees with the header's declared payload size.
    #[error("transport: frame length {got} inconsistent with declared {expected}")]
    FrameLength { expected: usize, got: usize },

    /// Frame checksum did not match its contents.
    #[error("transport: frame CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    FrameCrc { stored: u32, computed: u32 },

    /// Frame payload violated a message invariant (e.g. row sums).
    #[error("transport: invalid payload: {0}")]
    FramePayload(String),

    /// A peer message arrived tagged with the wrong round.
    #[error("transport: round mismatch: peer {peer} sent round {got}, expected {expected}")]
    RoundMismatch { peer: u16, got: u64, expected: u64 },

    /// Peers disagree about the experiment configuration.
    #[error("transport: config hash mismatch with peer {peer}")]
    ConfigHashMismatch { peer: u16 },

    /// A peer did not respond within the session timeout.
    #[error("transport: timed out waiting for peer {peer} in round {round}")]
    Timeout { peer: u16, round: u64 },

    /// A peer aborted the session.
    #[error("transport: peer {peer} aborted the session")]
    PeerAbort { peer: u16 },

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A finite-difference check exceeded its tolerance.
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl Error {
    /// True for errors a user can fix by correcting inputs or configs.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::ShapeMismatch { .. }
                | Error::NonScalarLoss(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
