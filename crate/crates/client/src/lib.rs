//! Typed HTTP client for the tracecommit service and the `tracecommit` CLI.

pub mod cli;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use tracecommit_api::*;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request to {url} failed: {source}")]
    Http {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("service returned {status}: {message}")]
    Api { status: u16, message: String },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        let base = base.into().trim_end_matches('/').to_string();
        Client { base, http: reqwest::Client::new() }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn send<T: DeserializeOwned>(&self, req: reqwest::RequestBuilder, url: &str) -> Result<T> {
        let http = |source| ClientError::Http { url: url.to_string(), source };
        let resp = req.send().await.map_err(http)?;
        let status = resp.status();
        if status.is_success() {
            return resp.json().await.map_err(http);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
        Err(ClientError::Api { status: status.as_u16(), message })
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let url = format!("{}{path}", self.base);
        self.send(self.http.post(&url).json(body), &url).await
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let url = format!("{}{path}", self.base);
        self.send(self.http.get(&url), &url).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get(HEALTH).await
    }

    pub async fn generate_library(&self, req: &GenerateLibraryRequest) -> Result<GenerateLibraryResponse> {
        self.post(LIBRARY_GENERATE, req).await
    }

    pub async fn calibrate(&self, req: &CalibrateRequest) -> Result<CalibrateResponse> {
        self.post(CALIBRATE, req).await
    }

    pub async fn attack(&self, req: &AttackRequest) -> Result<AttackResponse> {
        self.post(ATTACK, req).await
    }

    pub async fn bounds(&self, req: &DeploymentRef) -> Result<BoundsResponse> {
        self.post(BOUNDS, req).await
    }

    pub async fn rotate_cv(&self, req: &RotateCvRequest) -> Result<RotateCvResponse> {
        self.post(ROTATE_CV, req).await
    }

    pub async fn fpr_sim(&self, req: &FprSimRequest) -> Result<FprSimResponse> {
        self.post(FPR_SIM, req).await
    }

    pub async fn sweep(&self, req: &SweepRequest) -> Result<SweepResponse> {
        self.post(SWEEP, req).await
    }

    pub async fn bench(&self, req: &BenchRequest) -> Result<BenchReport> {
        self.post(BENCH, req).await
    }

    pub async fn audit(&self, req: &AuditRequest) -> Result<AuditResponse> {
        self.post(AUDIT, req).await
    }

    pub async fn svip(&self, req: &SvipRequest) -> Result<SvipResponse> {
        self.post(SVIP, req).await
    }

    pub async fn start_provider(&self, req: &StartProviderRequest) -> Result<ProviderInfo> {
        self.post(PROVIDERS, req).await
    }

    pub async fn providers(&self) -> Result<Vec<ProviderInfo>> {
        self.get(PROVIDERS).await
    }

    pub async fn stop_provider(&self, id: u64) -> Result<ProviderInfo> {
        let url = format!("{}{PROVIDERS}/{id}", self.base);
        self.send(self.http.delete(&url), &url).await
    }
}
