use crate::sharing::PartyId;

/// Errors raised anywhere in the training stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("value {value} is outside the representable range ±{limit} of the fixed-point ring")]
    Overflow { value: f64, limit: f64 },
    #[error("ring configuration mismatch: {0} vs {1}")]
    ConfigMismatch(String, String),
    #[error("invalid fixed-point configuration: {0}")]
    InvalidConfig(String),
    #[error("party mismatch: expected {expected:?}, got {got:?}")]
    PartyMismatch { expected: PartyId, got: PartyId },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("beaver triple store exhausted ({0})")]
    TripleExhausted(&'static str),
    #[error("comparison key exhausted or already consumed (gate {0})")]
    KeyExhausted(usize),
    #[error("channel closed: {0}")]
    ChannelClosed(String),
    #[error("corrupt frame: {0}")]
    FrameCorrupt(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("synchronization mismatch on {field}: local {local}, remote {remote}")]
    SyncMismatch { field: &'static str, local: String, remote: String },
    #[error("protocol order violation: {0}")]
    OrderViolation(String),
    #[error("unexpected message: {0}")]
    UnexpectedMessage(String),
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("network spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
