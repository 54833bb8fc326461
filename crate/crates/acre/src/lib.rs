//! A toy-scale transformer inference engine built around a bi-layer KV
//! cache: a compact always-resident summary tier over a detailed cold tier,
//! with windowed selective-attention prefill and query-guided refilling of
//! the detail entries a query actually needs.
//!
//! Module map:
//! - [`kernel`] — deterministic f32 matrix kernels and the seeded RNG
//! - [`model`] — the tiny decoder-only transformer with dual projection
//!   families (frozen originals for detail tokens, trainable ones for
//!   summary tokens)
//! - [`nested`] — interleaving a token stream with summary (L1) tokens
//! - [`cache`] — the bi-layer cache, its tiered store, and its file format
//! - [`prefill`] — chunked prefill under a bounded working window
//! - [`refill`] — query-guided scoring, top-k segment refilling, decoding
//! - [`train`] — the two training stages, analytic gradients, grad checks
//! - [`harness`] — end-to-end runs, baselines, metrics, sweeps
//!
//! The `examples/` directory is the front door: each major capability has a
//! runnable walkthrough (`cargo run -p acre --example <name>`). A thin CLI
//! (`cargo run -p acre -- <subcommand>`) exposes the same pipelines for
//! scripting.

pub mod cache;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod model;
pub mod nested;
pub mod prefill;
pub mod refill;
pub mod train;
mod wire;

pub use error::{Error, Result};
