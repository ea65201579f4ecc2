//! Algorithmic core for split federated co-learning on segmentation tasks
//! with noisy annotations.
//!
//! The crate is `no_std` (with `alloc`). It contains:
//!
//! - [`field`]: exact signed distance transforms and scalar-field operators,
//! - [`annsim`]: difficulty-guided deformation of label masks,
//! - [`data`]: a synthetic multiclass scene generator and federation builder,
//! - [`nn`]: a three-stage split convolutional network with analytic gradients,
//! - [`protocol`]: the client/server round loop, reliability splitting,
//!   label correction, adaptive loss weights and aggregation,
//! - [`wire`]: the versioned tensor wire format,
//! - [`metrics`]: pixel-level segmentation metrics.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod annsim;
pub mod data;
pub mod field;
pub mod metrics;
pub mod nn;
pub mod protocol;
pub mod tensor;
pub mod wire;

pub use error::{Error, Result, WireError};
