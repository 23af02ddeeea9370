//! Trace-driven simulation of expert offloading for vision-language
//! mixture-of-experts inference.
//!
//! The pipeline has four stages, each usable on its own:
//!
//! - [`compress`]: affinity-aware visual token retention that trades token
//!   saliency against growth of the expert working set.
//! - [`predict`]: lookahead expert-demand prediction (a bottleneck MLP plus
//!   baselines) and Hot Recall evaluation.
//! - [`cache`]: a fixed slab cache with Required/Speculative/Expired residency
//!   classes and eviction restricted to Expired experts.
//! - [`pipeline`]: a deterministic two-stream (transfer + compute)
//!   discrete-event simulation with a pinned layer prefix.
//!
//! Routing comes from [`trace`]s, either synthetic or recorded, and
//! [`metrics`] reports the working-set diagnostics behind the design.

pub mod cache;
pub mod compress;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod predict;
pub mod presets;
pub mod trace;

pub use error::{Error, Result};
