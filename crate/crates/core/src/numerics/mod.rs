//! Dense tensors, deterministic random streams, and a reverse-mode gradient
//! engine sized for the networks defined in this crate.

pub mod gradcheck;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use nn::{
    cross_entropy_one_hot, load_named_tensors, named_tensors, param_hash, validate_one_hot,
    BatchNorm1d, LayerNorm, Linear, Mlp, ParamKind, ParamSource,
};
pub use rng::RngStream;
pub use tape::{Tape, Var};
pub use tensor::{percentile, Dtype, Scalar, Tensor};
