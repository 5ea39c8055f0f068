//! Adapter for agents served over HTTP with a JSON request/response body.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Agent, AgentDescriptor, AgentError, AgentRequest, AgentResponse, ArtifactContent};
use crate::kernel::{LifecycleStage, Thresholds};
use crate::model::{AgentKind, CaseId};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRequest {
    pub case_id: CaseId,
    pub stage: LifecycleStage,
    pub agent_kind: AgentKind,
    pub artifacts: Vec<ArtifactContent>,
    pub thresholds: Thresholds,
}

impl From<&AgentRequest> for WireRequest {
    fn from(r: &AgentRequest) -> Self {
        Self {
            case_id: r.case_id.clone(),
            stage: r.stage,
            agent_kind: r.agent_kind,
            artifacts: r.artifacts.clone(),
            thresholds: r.thresholds,
        }
    }
}

#[derive(Debug)]
pub enum TransportError {
    Timeout,
    Io(String),
}

/// Sends one JSON body and returns the status code and response body.
pub trait Transport: Send + Sync {
    fn post(&self, body: &str, timeout: Duration) -> Result<(u16, String), TransportError>;
}

pub struct HttpTransport {
    url: String,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>) -> Self {
        Self { url: url.into() }
    }
}

impl Transport for HttpTransport {
    fn post(&self, body: &str, timeout: Duration) -> Result<(u16, String), TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut response = agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(map_ureq)?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(map_ureq)?;
        Ok((status, text))
    }
}

fn map_ureq(e: ureq::Error) -> TransportError {
    match e {
        ureq::Error::Timeout(_) => TransportError::Timeout,
        other => TransportError::Io(other.to_string()),
    }
}

pub struct RemoteAgent<T: Transport = HttpTransport> {
    descriptor: AgentDescriptor,
    transport: T,
    timeout: Duration,
}

impl RemoteAgent<HttpTransport> {
    pub fn http(descriptor: AgentDescriptor, url: impl Into<String>) -> Self {
        Self::new(descriptor, HttpTransport::new(url))
    }
}

impl<T: Transport> RemoteAgent<T> {
    pub fn new(descriptor: AgentDescriptor, transport: T) -> Self {
        Self {
            descriptor,
            transport,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl<T: Transport> Agent for RemoteAgent<T> {
    fn descriptor(&self) -> &AgentDescriptor {
        &self.descriptor
    }

    fn invoke(&self, request: &AgentRequest) -> Result<AgentResponse, AgentError> {
        let body = serde_json::to_string(&WireRequest::from(request))
            .map_err(|e| AgentError::Malformed(e.to_string()))?;
        let (status, text) = self.transport.post(&body, self.timeout).map_err(|e| match e {
            TransportError::Timeout => AgentError::Unavailable("request timed out".into()),
            TransportError::Io(msg) => AgentError::Unavailable(msg),
        })?;
        if !(200..300).contains(&status) {
            return Err(AgentError::Unavailable(format!("status {status}")));
        }
        serde_json::from_str(&text).map_err(|e| AgentError::Malformed(e.to_string()))
    }
}
