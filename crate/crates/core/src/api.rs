//! Request/response types for the HTTP service. Shared by the server
//! and the client crate so the wire format is defined once.

use serde::{Deserialize, Serialize};

use crate::bench::data::RecExample;
use crate::bench::sweep::{SweepReport, SweepSpec};
use crate::bench::train::{TrainConfig, TrainSummary};
use crate::bench::ttft::{TtftOptions, TtftStats};
use crate::model::ModelConfig;
use crate::probe::{ProbeOptions, ProbeReport};
use crate::prune::{Alignment, Strategy};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
}

/// Server-side dataset generation parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenDataRequest {
    #[serde(default)]
    pub model: ModelConfig,
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenDataResponse {
    pub examples: Vec<RecExample>,
}

/// Evaluation input: either inline examples or a generation spec.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetRef {
    pub examples: Option<Vec<RecExample>>,
    pub generate: Option<GenSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenSpec {
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRequest {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub train_examples: usize,
    #[serde(default)]
    pub val_examples: usize,
    #[serde(default)]
    pub data_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainResponse {
    pub model_id: String,
    pub summary: TrainSummary,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UploadResponse {
    pub model_id: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRequest {
    pub model_id: String,
    pub dataset: DatasetRef,
    pub strategy: Strategy,
    pub ratio: f64,
    pub alignment: Alignment,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalResponse {
    pub accuracy: f64,
    pub examples: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRequest {
    pub model_id: String,
    pub dataset: DatasetRef,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub eval_seed: u64,
    /// Measure TTFT per row (slow); timing lands in the report's
    /// timing section.
    #[serde(default)]
    pub measure_ttft: bool,
    #[serde(default)]
    pub ttft: TtftOptions,
}

pub type SweepResponse = SweepReport;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeRequest {
    pub model_id: String,
    pub dataset: DatasetRef,
    #[serde(default)]
    pub options: ProbeOptions,
}

pub type ProbeResponse = ProbeReport;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TtftRequest {
    pub model_id: String,
    pub dataset: DatasetRef,
    pub strategy: Strategy,
    pub ratio: f64,
    pub alignment: Alignment,
    #[serde(default)]
    pub options: TtftOptions,
}

pub type TtftResponse = TtftStats;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlopsRequest {
    #[serde(default)]
    pub model: ModelConfig,
    pub seq_len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlopsResponse {
    pub flops: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}
