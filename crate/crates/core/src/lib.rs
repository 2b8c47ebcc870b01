//! Desk-scale multimodal decoder with visual-token pruning and
//! position-ID realignment, plus the benchmark harness around it.
//!
//! The crate is organized bottom-up:
//!
//! * [`math`] — dense f64 kernels (matmul, softmax, layer norm) and a
//!   seeded deterministic RNG.
//! * [`rope`] — position IDs and rotary position embeddings.
//! * [`prune`] — score functions, top-k selection, and the three
//!   position-ID alignment modes (`gap`, `shifted`, `permuted`).
//! * [`model`] — toy vision encoder + rotary-attention decoder with a
//!   KV cache and greedy generation.
//! * [`checkpoint`] — flat binary weight serialization.
//! * [`probe`] — linear probing of encoder layers for positional
//!   information.
//! * [`bench`] — synthetic grounding dataset, training loop, evaluation
//!   sweeps, TTFT and FLOP measurement, report writing.
//! * [`api`] — serde types shared by the HTTP server and client.

pub mod api;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod math;
pub mod model;
pub mod probe;
pub mod prune;
pub mod rope;

pub use error::{Error, Result};
