//! Agent invocation contract plus the reference, scripted and remote agents.

pub mod reference;
pub mod remote;
pub mod report;
pub mod scripted;
pub mod triage;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{Counters, LifecycleStage, StageOutcome, Thresholds, Workflow};
pub use crate::model::AgentDescriptor;
use crate::model::{ActorId, AgentKind, ArtifactKind, CaseId};

/// One artifact version handed to an agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactContent {
    pub kind: ArtifactKind,
    pub version: u32,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRequest {
    pub case_id: CaseId,
    #[serde(default)]
    pub workflow: Workflow,
    pub stage: LifecycleStage,
    pub agent_kind: AgentKind,
    pub thresholds: Thresholds,
    #[serde(default)]
    pub counters: Counters,
    #[serde(default)]
    pub restart_count: u32,
    #[serde(default)]
    pub excluded_assignees: Vec<ActorId>,
    /// Policy-filtered artifacts, oldest version first within a kind.
    #[serde(default)]
    pub artifacts: Vec<ArtifactContent>,
}

impl AgentRequest {
    /// Latest version of `kind` in the slice.
    pub fn latest(&self, kind: ArtifactKind) -> Option<&ArtifactContent> {
        self.artifacts
            .iter()
            .filter(|a| a.kind == kind)
            .max_by_key(|a| a.version)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProducedArtifact {
    pub kind: ArtifactKind,
    pub content: String,
}

impl ProducedArtifact {
    pub fn new(kind: ArtifactKind, content: impl Into<String>) -> Self {
        Self {
            kind,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentResponse {
    pub outcome: StageOutcome,
    #[serde(default)]
    pub produced_artifacts: Vec<ProducedArtifact>,
    #[serde(default)]
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    /// Transport failure; retryable and never a stage outcome.
    #[error("agent unavailable: {0}")]
    Unavailable(String),
    #[error("malformed agent response: {0}")]
    Malformed(String),
    #[error("script for {0:?} exhausted")]
    ScriptExhausted(AgentKind),
    #[error("no assignment candidates")]
    NoCandidates,
}

pub trait Agent: Send + Sync {
    fn descriptor(&self) -> &AgentDescriptor;

    fn invoke(&self, request: &AgentRequest) -> Result<AgentResponse, AgentError>;
}

/// Rejects responses whose outcome the requesting stage cannot accept.
pub fn check_response(request: &AgentRequest, response: &AgentResponse) -> Result<(), AgentError> {
    let legal = request.workflow.legal_outcomes(request.stage);
    if legal.contains(&response.outcome.kind) {
        Ok(())
    } else {
        Err(AgentError::Malformed(format!(
            "outcome {:?} is not legal at {}",
            response.outcome.kind, request.stage
        )))
    }
}
