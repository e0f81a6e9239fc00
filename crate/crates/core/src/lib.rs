//! Attribute injection for transformer encoders.
//!
//! Adapters inserted after every encoder sublayer are extended with
//! attribute-specific adapters whose down-projection bias and weight are
//! synthesized from attribute embeddings. Weight synthesis uses rank-one
//! factors expanded by Kronecker products, which keeps the parameter count
//! at `O(d_z·d_a)` instead of `O(d_z·d_h·d_a)`.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for common uses.

pub mod attributes;
pub mod autodiff;
pub mod bundle;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod injector;
pub mod params;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape64<'p> = autodiff::Tape<'p, f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
