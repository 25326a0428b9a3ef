//! Toy-scale autoregressive transformer inference with early-exit decoding
//! policies: full depth, static depth, per-layer exits with state copying,
//! oracle exits, and a two-exit shallow-deep decoder that computes deferred
//! deep-layer key/value states in synchronized batches. The calibration
//! module fits a two-component Beta mixture over shallow confidences to pick
//! exit thresholds online.

pub mod calibration;
pub mod engine;
pub mod metrics;
pub mod model;
pub mod tensor;
