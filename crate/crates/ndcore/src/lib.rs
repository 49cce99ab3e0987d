//! Minimal CPU tensor library: reverse-mode autodiff over a Wengert tape, the
//! layer primitives used by the world-model architectures, Adam, and a
//! named-array checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;

pub use adam::AdamState;
pub use error::{NdError, Result};
pub use gradcheck::{finite_diff_gradient, relative_error};
pub use layers::{apply_layer, BnStats, Layer, LayerCtx, LayerSpec, Sequential};
pub use ops::{sigmoid_scalar, threshold_bit};
pub use params::{Bound, ParamSet};
pub use real::Real;
pub use tape::{BackwardCtx, BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
