//! sinklab: a desk-scale laboratory for attention sinks as an
//! anti-over-mixing mechanism in decoder-only transformers.
//!
//! The crate is layered: `numerics` owns tensors, masks, and the gradient
//! tape; `model` builds instrumented transformers on top of it; `metrics`
//! and `sensitivity` measure them; `data` and `training` reproduce the
//! packing and context-length experiments; `trace` and `experiments` move
//! artifacts in and out of the lab. `reference` holds slow, independent
//! oracle implementations used only for verification.

pub mod data;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod reference;
pub mod sensitivity;
pub mod trace;
pub mod training;
