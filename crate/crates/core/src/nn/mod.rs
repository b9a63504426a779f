//! Minimal dense network stack with hand-written backward passes.

pub mod adam;
pub mod ops;
pub mod tensor;
pub mod transformer;

pub use adam::{Adam, AdamConfig};
pub use tensor::Real;
pub use transformer::{Batch, Hyper, ParamEntry, Transformer};
