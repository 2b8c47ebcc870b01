//! Benchmark harness: dataset, training, evaluation, sweeps, cost model.

pub mod data;
pub mod eval;
pub mod flops;
pub mod sweep;
pub mod train;
pub mod ttft;
