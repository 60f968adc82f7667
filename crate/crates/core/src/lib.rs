//! Evidential autoregressive frame generation.
//!
//! Each output frame is modelled by a Normal-Inverse-Gamma distribution per
//! dimension; frames are drawn through a hierarchical sampler whose spread is
//! controlled at inference time by a single scale on β.

pub mod backbone;
pub mod config;
pub mod corpus;
pub mod edl;
pub mod evaluate;
pub mod metrics;
pub mod nig;
pub mod numerics;
pub mod sampler;
pub mod streaming;
pub mod trainer;
pub mod verify;
