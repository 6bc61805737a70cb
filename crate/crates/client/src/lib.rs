//! Async client for the what-if service.

use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;

use trajirl_core::api::{
    CreateSession, ErrorBody, Health, MaskEdit, MaskState, PredictPayload, PredictRequest, ScenarioList, SessionCreated,
};
use trajirl_core::scene::{parse_scenario, Scenario};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server returned {status}: {}", body.error)]
    Api { status: StatusCode, body: ErrorBody },
    #[error("bad scenario from server: {0}")]
    Scenario(#[from] trajirl_core::Error),
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str) -> Self {
        Client {
            base: base.trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}/api{path}", self.base)
    }

    async fn finish(resp: reqwest::Response) -> Result<reqwest::Response> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await?;
        let body = serde_json::from_str(&text).unwrap_or(ErrorBody {
            error: text,
            diagnostic_id: None,
        });
        Err(ClientError::Api { status, body })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let resp = self.http.get(self.url(path)).send().await?;
        Ok(Self::finish(resp).await?.json().await?)
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self.http.post(self.url(path)).json(body).send().await?;
        Ok(Self::finish(resp).await?.json().await?)
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/health").await
    }

    pub async fn scenarios(&self) -> Result<Vec<String>> {
        Ok(self.get::<ScenarioList>("/scenarios").await?.scenarios)
    }

    /// Raw scenario JSON exactly as stored in the corpus.
    pub async fn scenario_text(&self, id: &str) -> Result<String> {
        let resp = self.http.get(self.url(&format!("/scenarios/{id}"))).send().await?;
        Ok(Self::finish(resp).await?.text().await?)
    }

    pub async fn scenario(&self, id: &str) -> Result<Scenario> {
        Ok(parse_scenario(&self.scenario_text(id).await?)?)
    }

    pub async fn create_session(&self, scenario_id: &str) -> Result<SessionCreated> {
        let req = CreateSession {
            scenario_id: scenario_id.to_string(),
        };
        self.post("/sessions", &req).await
    }

    pub async fn session(&self, session_id: &str) -> Result<MaskState> {
        self.get(&format!("/sessions/{session_id}")).await
    }

    pub async fn edit_mask(&self, session_id: &str, edit: &MaskEdit) -> Result<MaskState> {
        self.post(&format!("/sessions/{session_id}/mask"), edit).await
    }

    pub async fn predict(&self, session_id: &str, req: &PredictRequest) -> Result<PredictPayload> {
        self.post(&format!("/sessions/{session_id}/predict"), req).await
    }
}
