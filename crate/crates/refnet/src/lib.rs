//! Background-grounded conversation modeling with a hybrid decoder: at each
//! step the model either selects a whole background span through two-hop soft
//! pointers or generates a single token by predicting from the vocabulary or
//! copying from the background. Everything runs on a from-scratch
//! reverse-mode autodiff tape so gradients are checkable against finite
//! differences.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
