pub mod beaver;
pub mod error;
pub mod fss;
pub mod harness;
pub mod nn;
pub mod protocol;
pub mod ring;
pub mod sharing;
pub mod tensor;
pub mod transport;

pub use error::{Error, Result};
pub use ring::{FixedConfig, FixedTensor, RingElement};
pub use sharing::{PartyId, Share};

/// Fixed-point plaintext segment, as run by the client.
pub type FixedSegment = nn::Segment<nn::FixedArith>;
/// Double-precision reference segment.
pub type FloatSegment = nn::Segment<nn::FloatArith<f64>>;
/// Single-precision reference segment.
pub type F32Segment = nn::Segment<nn::FloatArith<f32>>;

/// RNG stream ids; one seed drives every role through disjoint streams.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const CLIENT_SHARES: u64 = 1;
    pub const DEALER: u64 = 2;
    pub const SHUFFLE: u64 = 3;
}
