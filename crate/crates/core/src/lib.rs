//! Trimap-guided image matting with a prior-token hierarchical transformer.
//!
//! The crate is layered bottom-up: [`numerics`] (tensors and reverse-mode
//! differentiation), [`trimap`] (labels, mattes, compositing),
//! [`prior_attention`] (prior tokens and the attention block), [`encoder`] and
//! [`decoder`], and the [`model`] that joins them.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod prior_attention;
pub mod selfcheck;
pub mod training;
pub mod trimap;

pub use config::Config;
pub use error::{Error, Result};
pub use model::MatteFormer;
pub use prior_attention::PriorMode;
