//! Dino U-Net at desk scale: a frozen ViT stand-in, a conv/ViT adapter, the
//! FAPM projection, a U-Net decoder, and the training and evaluation loop
//! around them, all on a small f64 reverse-mode tensor engine.

pub mod adapter;
pub mod audit;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod container;
pub mod decoder;
pub mod error;
pub mod fapm;
pub mod gradcheck;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod runconfig;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor;
