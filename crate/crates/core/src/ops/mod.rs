//! Forward and backward kernels for the non-trivial primitives. The tape in
//! [`crate::autodiff`] wires these into the graph.

pub mod conv;
pub mod resample;

pub use conv::{conv2d, Conv2dSpec};
pub use resample::{bilinear_resize, bilinear_sample};
