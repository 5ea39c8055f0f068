//! Agents that replay a configured outcome sequence, for tests and simulation.

use std::collections::HashMap;

use parking_lot::Mutex;
use serde_json::json;

use super::reference::DEFAULT_PATCH_CANDIDATES;
use super::{Agent, AgentDescriptor, AgentError, AgentRequest, AgentResponse, ProducedArtifact};
use crate::kernel::{LifecycleStage, OutcomeKind, StageActor, StageOutcome, ValidityCategory, Workflow};
use crate::model::{AgentKind, CaseId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Script {
    /// The same outcome on every call.
    Repeat(StageOutcome),
    /// One outcome per call, then `ScriptExhausted`.
    Sequence(Vec<StageOutcome>),
}

impl Script {
    fn at(&self, position: usize) -> Option<&StageOutcome> {
        match self {
            Script::Repeat(o) => Some(o),
            Script::Sequence(seq) => seq.get(position),
        }
    }
}

/// The proposed-workflow stage served by `kind`.
pub fn stage_of(kind: AgentKind) -> LifecycleStage {
    Workflow::Proposed
        .stages()
        .into_iter()
        .find(|s| Workflow::Proposed.stage_actor(*s) == Some(StageActor::Agent(kind)))
        .expect("every agent kind serves a stage")
}

/// The outcome an agent of `kind` gives on the happy path.
pub fn success_outcome(kind: AgentKind) -> StageOutcome {
    let (happy, _) = Workflow::Proposed
        .branch_outcomes(stage_of(kind))
        .expect("agent stages have outcomes");
    StageOutcome::new(happy)
}

pub struct ScriptedAgent {
    descriptor: AgentDescriptor,
    script: Script,
    patch_candidates: usize,
    positions: Mutex<HashMap<CaseId, usize>>,
}

impl ScriptedAgent {
    pub fn new(kind: AgentKind, script: Script) -> Self {
        Self {
            descriptor: AgentDescriptor::new(format!("scripted-{kind}"), kind, 1),
            script,
            patch_candidates: DEFAULT_PATCH_CANDIDATES,
            positions: Mutex::new(HashMap::new()),
        }
    }

    pub fn sequence(kind: AgentKind, outcomes: impl IntoIterator<Item = OutcomeKind>) -> Self {
        Self::new(
            kind,
            Script::Sequence(outcomes.into_iter().map(StageOutcome::new).collect()),
        )
    }

    pub fn repeat(kind: AgentKind, outcome: impl Into<StageOutcome>) -> Self {
        Self::new(kind, Script::Repeat(outcome.into()))
    }

    /// Always succeeds.
    pub fn success(kind: AgentKind) -> Self {
        Self::new(kind, Script::Repeat(success_outcome(kind)))
    }

    /// Always-success agents for every kind; the validity checker answers
    /// `Valid` or `Invalid(UserError)` according to `valid`.
    pub fn all_success(valid: bool) -> Vec<ScriptedAgent> {
        AgentKind::ALL
            .into_iter()
            .map(|kind| match kind {
                AgentKind::ValidityChecker if !valid => {
                    Self::repeat(kind, StageOutcome::invalid(ValidityCategory::UserError))
                }
                _ => Self::success(kind),
            })
            .collect()
    }

    pub fn with_patch_candidates(mut self, n: usize) -> Self {
        self.patch_candidates = n;
        self
    }

    /// Script entries consumed so far for `case`.
    pub fn consumed(&self, case: &CaseId) -> usize {
        self.positions.lock().get(case).copied().unwrap_or(0)
    }

    fn fabricate(&self, request: &AgentRequest, outcome: OutcomeKind, call: usize) -> Vec<ProducedArtifact> {
        if outcome.is_setback() {
            return Vec::new();
        }
        let Some(kind) = request.workflow.produced_artifact(request.stage) else {
            return Vec::new();
        };
        let count = if self.descriptor.kind == AgentKind::PatchGenerator {
            self.patch_candidates
        } else {
            1
        };
        (1..=count)
            .map(|i| {
                let body = json!({
                    "agent": self.descriptor.name,
                    "case_id": request.case_id,
                    "call": call + 1,
                    "item": i,
                });
                ProducedArtifact::new(kind, body.to_string())
            })
            .collect()
    }
}

impl Agent for ScriptedAgent {
    fn descriptor(&self) -> &AgentDescriptor {
        &self.descriptor
    }

    fn invoke(&self, request: &AgentRequest) -> Result<AgentResponse, AgentError> {
        let mut positions = self.positions.lock();
        let position = positions.entry(request.case_id.clone()).or_insert(0);
        let mut outcome = self
            .script
            .at(*position)
            .cloned()
            .ok_or(AgentError::ScriptExhausted(self.descriptor.kind))?;
        let call = *position;
        *position += 1;
        drop(positions);

        if outcome.kind == OutcomeKind::Recommended && outcome.payload.developer.is_none() {
            outcome.payload.developer = Some(format!("developer-{}", request.excluded_assignees.len()).into());
        }
        let produced = self.fabricate(request, outcome.kind, call);
        Ok(AgentResponse {
            rationale: format!("scripted entry {}", call + 1),
            outcome,
            produced_artifacts: produced,
        })
    }
}
