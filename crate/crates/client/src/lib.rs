//! Typed HTTP client for the benchmark service.

use prunebench_core::api::*;
use prunebench_core::bench::data::RecExample;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server: {0}")]
    Server(String),
}

pub type Result<T> = std::result::Result<T, ClientError>;

pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` like `http://127.0.0.1:8077` (no trailing slash needed).
    pub fn new(base: impl Into<String>) -> Self {
        let mut base = base.into();
        while base.ends_with('/') {
            base.pop();
        }
        Client { base, http: reqwest::Client::new() }
    }

    async fn check<T: serde::de::DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        if resp.status().is_success() {
            Ok(resp.json().await?)
        } else {
            let status = resp.status();
            let msg = match resp.json::<ErrorResponse>().await {
                Ok(e) => e.error,
                Err(_) => format!("http status {status}"),
            };
            Err(ClientError::Server(msg))
        }
    }

    async fn post<B: serde::Serialize, T: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<T> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        Self::check(resp).await
    }

    pub async fn health(&self) -> Result<HealthResponse> {
        let resp = self.http.get(format!("{}/health", self.base)).send().await?;
        Self::check(resp).await
    }

    pub async fn gen_data(&self, req: &GenDataRequest) -> Result<Vec<RecExample>> {
        let r: GenDataResponse = self.post("/v1/gen-data", req).await?;
        Ok(r.examples)
    }

    pub async fn train(&self, req: &TrainRequest) -> Result<TrainResponse> {
        self.post("/v1/train", req).await
    }

    pub async fn upload_checkpoint(&self, bytes: Vec<u8>) -> Result<UploadResponse> {
        let resp = self
            .http
            .post(format!("{}/v1/models", self.base))
            .body(bytes)
            .send()
            .await?;
        Self::check(resp).await
    }

    pub async fn download_checkpoint(&self, model_id: &str) -> Result<Vec<u8>> {
        let resp = self
            .http
            .get(format!("{}/v1/models/{model_id}/checkpoint", self.base))
            .send()
            .await?;
        if resp.status().is_success() {
            Ok(resp.bytes().await?.to_vec())
        } else {
            let status = resp.status();
            let msg = match resp.json::<ErrorResponse>().await {
                Ok(e) => e.error,
                Err(_) => format!("http status {status}"),
            };
            Err(ClientError::Server(msg))
        }
    }

    pub async fn eval(&self, req: &EvalRequest) -> Result<EvalResponse> {
        self.post("/v1/eval", req).await
    }

    pub async fn sweep(&self, req: &SweepRequest) -> Result<SweepResponse> {
        self.post("/v1/sweep", req).await
    }

    pub async fn probe(&self, req: &ProbeRequest) -> Result<ProbeResponse> {
        self.post("/v1/probe", req).await
    }

    pub async fn ttft(&self, req: &TtftRequest) -> Result<TtftResponse> {
        self.post("/v1/ttft", req).await
    }

    pub async fn flops(&self, req: &FlopsRequest) -> Result<FlopsResponse> {
        self.post("/v1/flops", req).await
    }
}
