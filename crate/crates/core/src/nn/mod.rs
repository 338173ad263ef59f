//! Neural-network layers: plaintext kernels generic over the scalar type,
//! share-domain server layers, and network descriptions.

pub mod arith;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod secure;
pub mod spec;

pub use arith::{Arith, FixedArith, FloatArith};
pub use model::{init_params, ParamGrad, RealParams, Segment};
pub use spec::{LayerKind, LayerSpec, NetworkSpec, Partition, Placement};
