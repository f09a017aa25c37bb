//! Post-training quantization engine for depth-estimation style networks,
//! paired with a cycle-approximate simulator of a programmable accelerator.
//!
//! The quantization side covers uniform and log-domain kernels, per-channel
//! LogNP activation polishing, closed-form activation-loss compensation, and
//! Kronecker-factored second-order weight reconstruction with learned
//! rounding. The simulator side lowers networks to Load/Store/MMU/VCU
//! instruction streams, schedules them with full engine overlap and kernel
//! fusion, and reports latency, energy, and per-category breakdowns.
//!
//! Start with the runnable examples (`cargo run --example full_pipeline`) or
//! the `qdk` binary for the command-line workflow.

pub mod compensate;
pub mod metrics;
pub mod network;
pub mod error;
pub mod fisher;
pub mod polish;
pub mod quant;
pub mod quantizer;
pub mod rounding;
pub mod tensor;
pub mod zoo;

pub use error::{QdkError, Result};
pub use tensor::Tensor;
