//! Quantisation and BFV plaintext-semantics toolkit for small convolutional
//! networks.
//!
//! Networks are quantised to low-bit integer weights, run with exact
//! integer arithmetic (no rescaling between layers), and their final integer
//! width (FIW) decides how many RNS plaintext moduli an encrypted evaluation
//! needs.

pub mod bigtensor;
pub mod datasets;
pub mod error;
pub mod he_pipeline;
pub mod he_sim;
pub mod network;
pub mod qat;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
