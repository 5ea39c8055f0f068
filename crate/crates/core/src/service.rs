//! Orchestration service: intake, dialogue, the agent pump, human decisions
//! and read views. Transport-independent; the HTTP layer lives in the CLI.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::reference::{ProjectKnowledge, ReferenceAgent};
use crate::agents::remote::RemoteAgent;
use crate::agents::report::{parse_steps, BugReportModel, Transcript};
use crate::agents::{check_response, Agent, AgentError, AgentRequest, ArtifactContent};
use crate::broker::{AccessPolicy, Admission, ArtifactRecord, Broker, BrokerError, ProvenanceEntry};
use crate::hil::{HilError, HilTask, TaskId, TaskQueue, TaskSpec};
use crate::kernel::{
    is_terminal, step, Accountability, BugCase, CaseParams, Effect, KernelError, LifecycleStage,
    OutcomeKind, StageOutcome, Thresholds, Workflow,
};
use crate::model::{
    Actor, ActorId, AgentDescriptor, AgentKind, ArtifactKind, ArtifactRef, CaseId, Clock, Principal,
    Role, SystemClock,
};
use crate::persistence::{EventRecord, EventStore, PendingEvent, PersistError, RecordedOutcome};
use crate::sim::{self, SimConfig, SimError, SimMetrics};

/// One bearer token and the actor it authenticates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub token: String,
    pub actor_id: ActorId,
    pub roles: Vec<Role>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default)]
    pub tokens: Vec<TokenEntry>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub accountability: Accountability,
    /// Extra attempts after an agent transport failure before parking.
    #[serde(default = "default_retries")]
    pub agent_retries: u32,
    /// Event log directory; in-memory when absent.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub knowledge: ProjectKnowledge,
    /// Agent kinds served by a remote endpoint instead of the reference rules.
    #[serde(default)]
    pub remote_agents: BTreeMap<AgentKind, String>,
    #[serde(default = "default_listen")]
    pub listen: String,
}

fn default_retries() -> u32 {
    2
}

fn default_listen() -> String {
    "127.0.0.1:8080".to_string()
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            tokens: Vec::new(),
            thresholds: Thresholds::default(),
            accountability: Accountability::default(),
            agent_retries: default_retries(),
            data_dir: None,
            knowledge: ProjectKnowledge::default(),
            remote_agents: BTreeMap::new(),
            listen: default_listen(),
        }
    }
}

impl ServiceConfig {
    /// Reference agents for every kind, or remote adapters where configured.
    pub fn build_agents(&self) -> Vec<Arc<dyn Agent>> {
        AgentKind::ALL
            .into_iter()
            .map(|kind| -> Arc<dyn Agent> {
                match self.remote_agents.get(&kind) {
                    Some(url) => Arc::new(RemoteAgent::http(
                        AgentDescriptor::new(format!("remote-{kind}"), kind, 1),
                        url.clone(),
                    )),
                    None => Arc::new(ReferenceAgent::new(kind, self.knowledge.clone())),
                }
            })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("missing or unknown credentials")]
    Unauthenticated,
    #[error("case is at {0}")]
    WrongStage(LifecycleStage),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("access denied: {0}")]
    PolicyDenied(String),
    #[error("agent unavailable: {0}")]
    AgentUnavailable(String),
    #[error("agent failed: {0}")]
    AgentFailed(AgentError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Hil(#[from] HilError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Persist(PersistError),
    #[error(transparent)]
    Broker(BrokerError),
}

impl From<PersistError> for ServiceError {
    fn from(e: PersistError) -> Self {
        match e {
            PersistError::UnknownCase(c) => ServiceError::NotFound(format!("case {c}")),
            other => ServiceError::Persist(other),
        }
    }
}

impl From<BrokerError> for ServiceError {
    fn from(e: BrokerError) -> Self {
        match e {
            BrokerError::PolicyDenied { .. } => ServiceError::PolicyDenied(e.to_string()),
            BrokerError::NotFound { .. } | BrokerError::UnknownCase(_) => ServiceError::NotFound(e.to_string()),
            other => ServiceError::Broker(other),
        }
    }
}

impl From<SimError> for ServiceError {
    fn from(e: SimError) -> Self {
        ServiceError::InvalidConfig(e.to_string())
    }
}

impl ServiceError {
    /// HTTP status for the error.
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::Unauthenticated => 401,
            ServiceError::WrongStage(_) => 409,
            ServiceError::NotFound(_) => 404,
            ServiceError::PolicyDenied(_) => 403,
            ServiceError::AgentUnavailable(_) => 503,
            ServiceError::AgentFailed(_) => 502,
            ServiceError::InvalidConfig(_) => 400,
            ServiceError::Kernel(_) => 400,
            ServiceError::Hil(e) => match e {
                HilError::RoleMismatch { .. } | HilError::SelfReview(_) => 403,
                HilError::IllegalDecision { .. } => 400,
                HilError::StaleTask(_) | HilError::TaskAlreadyOpen(_) => 409,
                HilError::UnknownTask(_) => 404,
                HilError::NotYetAssigned => 409,
            },
            ServiceError::Persist(e) => match e {
                PersistError::StaleWrite { .. } | PersistError::DuplicateCase(_) => 409,
                PersistError::UnknownCase(_) => 404,
                PersistError::Kernel(_) => 400,
                _ => 500,
            },
            ServiceError::Broker(_) => 500,
        }
    }

    /// Stable name of the error kind, for response bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::Unauthenticated => "Unauthenticated",
            ServiceError::WrongStage(_) => "WrongStage",
            ServiceError::NotFound(_) => "NotFound",
            ServiceError::PolicyDenied(_) => "PolicyDenied",
            ServiceError::AgentUnavailable(_) => "AgentUnavailable",
            ServiceError::AgentFailed(AgentError::Malformed(_)) => "MalformedResponse",
            ServiceError::AgentFailed(AgentError::NoCandidates) => "NoCandidates",
            ServiceError::AgentFailed(_) => "AgentFailed",
            ServiceError::InvalidConfig(_) => "InvalidConfig",
            ServiceError::Hil(e) => match e {
                HilError::TaskAlreadyOpen(_) => "TaskAlreadyOpen",
                HilError::UnknownTask(_) => "NotFound",
                HilError::StaleTask(_) => "StaleTask",
                HilError::RoleMismatch { .. } => "RoleMismatch",
                HilError::IllegalDecision { .. } => "IllegalDecision",
                HilError::SelfReview(_) => "SelfReview",
                HilError::NotYetAssigned => "NotYetAssigned",
            },
            ServiceError::Kernel(_) => "IllegalDecision",
            ServiceError::Persist(PersistError::StaleWrite { .. }) => "StaleWrite",
            ServiceError::Persist(PersistError::CorruptChain { .. }) => "CorruptChain",
            ServiceError::Persist(_) => "PersistenceError",
            ServiceError::Broker(_) => "BrokerError",
        }
    }
}

/// Initial submission from the reporter.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportSubmission {
    #[serde(default)]
    pub title: String,
    /// What the reporter observed.
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub expected_behavior: String,
    /// Free-text steps, one per line.
    #[serde(default)]
    pub steps: String,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default)]
    pub severity_hint: Option<String>,
}

impl ReportSubmission {
    pub fn to_report(&self) -> BugReportModel {
        BugReportModel {
            title: self.title.clone(),
            observed_behavior: self.text.clone(),
            expected_behavior: self.expected_behavior.clone(),
            steps_to_reproduce: parse_steps(&self.steps),
            environment: self.environment.clone(),
            severity_hint: self.severity_hint.clone(),
            metadata: self.metadata.clone(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PromptView {
    FollowUp { question: String },
    Sufficient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseView {
    pub case: BugCase,
    pub reporter: ActorId,
    pub last_seq: u64,
    pub open_task: Option<HilTask>,
    /// Set when the last agent call failed in transport and the case waits
    /// for a retry.
    pub parked: bool,
    pub prompt: Option<PromptView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub seq: u64,
    pub stage_before: LifecycleStage,
    pub stage_after: LifecycleStage,
    pub outcome: RecordedOutcome,
    pub effects: Vec<Effect>,
    pub actor: Principal,
    pub timestamp: u64,
    /// Artifact versions written while producing this event.
    pub artifacts: Vec<ArtifactRef>,
    /// Broker accesses made while producing this event.
    pub provenance: Vec<ProvenanceEntry>,
}

/// Artifact a human attaches to a decision, such as a manual patch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachedArtifact {
    pub kind: ArtifactKind,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub decision: StageOutcome,
    #[serde(default)]
    pub artifacts: Vec<AttachedArtifact>,
}

pub struct Service {
    config: ServiceConfig,
    clock: Arc<dyn Clock>,
    store: EventStore,
    broker: Broker,
    tasks: TaskQueue,
    agents: RwLock<HashMap<AgentKind, Arc<dyn Agent>>>,
    sessions: HashMap<String, Actor>,
    case_locks: Mutex<HashMap<CaseId, Arc<Mutex<()>>>>,
    parked: Mutex<HashMap<CaseId, String>>,
    create_lock: Mutex<()>,
}

impl Service {
    pub fn new(config: ServiceConfig, agents: Vec<Arc<dyn Agent>>) -> Result<Self, ServiceError> {
        Self::with_clock(config, agents, Arc::new(SystemClock::default()))
    }

    pub fn with_clock(
        config: ServiceConfig,
        agents: Vec<Arc<dyn Agent>>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        config
            .thresholds
            .validate()
            .map_err(|e| ServiceError::InvalidConfig(e.to_string()))?;
        let mut sessions = HashMap::new();
        for t in &config.tokens {
            let actor = Actor::new(t.actor_id.to_string(), t.roles.iter().copied()).ok_or_else(|| {
                ServiceError::InvalidConfig(format!("actor {} has no roles", t.actor_id))
            })?;
            sessions.insert(t.token.clone(), actor);
        }
        let store = match &config.data_dir {
            Some(dir) => EventStore::open_dir(dir, clock.clone())?,
            None => EventStore::in_memory(clock.clone()),
        };
        let service = Self {
            broker: Broker::new(AccessPolicy::default(), clock.clone()),
            clock,
            store,
            tasks: TaskQueue::new(),
            agents: RwLock::new(HashMap::new()),
            sessions,
            case_locks: Mutex::new(HashMap::new()),
            parked: Mutex::new(HashMap::new()),
            create_lock: Mutex::new(()),
            config,
        };
        for agent in agents {
            service.register_agent(agent)?;
        }
        service.recover()?;
        Ok(service)
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn store(&self) -> &EventStore {
        &self.store
    }

    pub fn tasks(&self) -> &TaskQueue {
        &self.tasks
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// Registers a new agent version; it serves its kind from now on.
    pub fn register_agent(&self, agent: Arc<dyn Agent>) -> Result<(), ServiceError> {
        let descriptor = agent.descriptor().clone();
        self.broker.register_agent(descriptor.clone())?;
        self.agents.write().insert(descriptor.kind, agent);
        Ok(())
    }

    pub fn authenticate(&self, token: Option<&str>) -> Result<Actor, ServiceError> {
        token
            .and_then(|t| self.sessions.get(t))
            .cloned()
            .ok_or(ServiceError::Unauthenticated)
    }

    fn lock_case(&self, case: &CaseId) -> Arc<Mutex<()>> {
        self.case_locks.lock().entry(case.clone()).or_default().clone()
    }

    fn reporter(&self, case: &CaseId) -> Result<ActorId, ServiceError> {
        let records = self.store.records(case)?;
        match &records[0].actor {
            Principal::Human { actor_id, .. } => Ok(actor_id.clone()),
            Principal::Agent(_) => Err(ServiceError::NotFound(format!("reporter of {case}"))),
        }
    }

    fn next_case_id(&self) -> CaseId {
        let highest = self
            .store
            .case_ids()
            .iter()
            .filter_map(|c| c.as_str().strip_prefix("BUG-")?.parse::<u64>().ok())
            .max()
            .unwrap_or(0);
        CaseId::new(format!("BUG-{}", highest + 1))
    }

    /// Creates a case from the reporter's submission and runs the chatbot.
    pub fn submit_report(&self, token: Option<&str>, submission: &ReportSubmission) -> Result<CaseView, ServiceError> {
        let actor = self.authenticate(token)?;
        if !actor.has_role(Role::EndUser) {
            return Err(ServiceError::Hil(HilError::RoleMismatch {
                actor: actor.actor_id,
                role: Role::EndUser,
            }));
        }
        let reporter = Principal::human(actor.actor_id.clone(), Role::EndUser);
        let case_id = {
            // case creation is rare; a global lock keeps ids unique
            let _guard = self.create_lock.lock();
            let case_id = self.next_case_id();
            self.broker.open_case(&case_id)?;
            self.broker.admit(&case_id, Admission::Actor(actor.actor_id.clone()))?;
            let content = serde_json::to_string(&submission.to_report()).expect("report serializes");
            let record = self
                .broker
                .put_artifact(&case_id, ArtifactKind::OriginalReport, content, &reporter)?;
            let params = CaseParams {
                case_id: case_id.clone(),
                workflow: Workflow::Proposed,
                report_ref: ArtifactRef {
                    kind: ArtifactKind::OriginalReport,
                    version: record.version,
                },
                thresholds: self.config.thresholds,
                accountability: self.config.accountability.clone(),
            };
            self.store.open(params, reporter)?;
            case_id
        };
        let lock = self.lock_case(&case_id);
        let _guard = lock.lock();
        self.pump(&case_id)?;
        self.view(&case_id)
    }

    /// Records the reporter's answer and lets the chatbot continue.
    pub fn dialogue_turn(&self, token: Option<&str>, case: &CaseId, answer: &str) -> Result<CaseView, ServiceError> {
        let actor = self.authenticate(token)?;
        let lock = self.lock_case(case);
        let _guard = lock.lock();
        let reporter = self.reporter(case)?;
        if actor.actor_id != reporter {
            return Err(ServiceError::Unauthenticated);
        }
        let current = self.store.current(case)?;
        if current.stage != LifecycleStage::ReportDialogue {
            return Err(ServiceError::WrongStage(current.stage));
        }
        let who = Principal::human(reporter, Role::EndUser);
        let mut transcript: Transcript = match self.broker.version_count(case, ArtifactKind::DialogueTranscript)? {
            0 => Transcript::default(),
            _ => {
                let record = self
                    .broker
                    .get_artifact(case, ArtifactKind::DialogueTranscript, &who, None)?;
                serde_json::from_slice(&record.content)
                    .map_err(|e| ServiceError::NotFound(format!("readable transcript: {e}")))?
            }
        };
        if !transcript.answer(answer) {
            return Err(ServiceError::WrongStage(current.stage));
        }
        let content = serde_json::to_string(&transcript).expect("transcript serializes");
        self.broker
            .put_artifact(case, ArtifactKind::DialogueTranscript, content, &who)?;
        self.invoke_stage_agent(case)?;
        self.pump(case)?;
        self.view(case)
    }

    /// Runs the case forward until a human is needed, it closes, or an
    /// agent cannot be reached.
    pub fn drive(&self, case: &CaseId) -> Result<CaseView, ServiceError> {
        let lock = self.lock_case(case);
        let _guard = lock.lock();
        self.pump(case)?;
        self.view(case)
    }

    fn pump(&self, case: &CaseId) -> Result<(), ServiceError> {
        loop {
            let current = self.store.current(case)?;
            if is_terminal(current.stage) || self.tasks.open_task(case).is_some() {
                return Ok(());
            }
            let last = self.store.last_record(case)?;
            if self.apply_task_effects(&last, &current)? {
                return Ok(());
            }
            let wants_agent = last.effects.iter().any(|e| matches!(e, Effect::InvokeAgent(_)));
            if !wants_agent {
                return Ok(());
            }
            self.invoke_stage_agent(case)?;
        }
    }

    /// Creates any task the record asks for; true when one is open.
    fn apply_task_effects(&self, record: &EventRecord, case: &BugCase) -> Result<bool, ServiceError> {
        for effect in &record.effects {
            if let Effect::CreateHilTask { role, actions } = effect {
                let assignee = match (role, &case.responsible_human) {
                    (Role::EndUser, _) => Some(self.reporter(&case.case_id)?),
                    (Role::Developer, Some(r)) if r.role == Role::Developer => Some(r.actor.clone()),
                    _ => None,
                };
                let payload = self
                    .broker
                    .records(&case.case_id)?
                    .iter()
                    .filter(|r| r.kind != ArtifactKind::DialogueTranscript)
                    .fold(BTreeMap::new(), |mut latest, r| {
                        latest.insert(r.kind, r.version);
                        latest
                    })
                    .into_iter()
                    .map(|(kind, version)| ArtifactRef { kind, version })
                    .collect();
                self.tasks.create_task(TaskSpec {
                    case_id: case.case_id.clone(),
                    source_seq: record.seq,
                    stage: case.stage,
                    role: *role,
                    action_set: actions.clone(),
                    payload,
                    assignee,
                })?;
                self.broker.admit(&case.case_id, Admission::Role(*role))?;
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn invoke_stage_agent(&self, case_id: &CaseId) -> Result<(), ServiceError> {
        let case = self.store.current(case_id)?;
        let last = self.store.last_record(case_id)?;
        let Some(crate::kernel::StageActor::Agent(kind)) = case.workflow.stage_actor(case.stage) else {
            return Err(ServiceError::WrongStage(case.stage));
        };
        let agent = self
            .agents
            .read()
            .get(&kind)
            .cloned()
            .ok_or_else(|| ServiceError::AgentUnavailable(format!("no agent registered for {kind}")))?;
        let descriptor = agent.descriptor().clone();
        let slice = self.broker.agent_slice(case_id, &descriptor)?;
        let request = AgentRequest {
            case_id: case_id.clone(),
            workflow: case.workflow,
            stage: case.stage,
            agent_kind: kind,
            thresholds: case.thresholds,
            counters: case.counters,
            restart_count: case.restart_count,
            excluded_assignees: case.excluded_assignees.clone(),
            artifacts: slice.iter().map(|r| to_content(r)).collect(),
        };
        let mut attempt = 0;
        let response = loop {
            match agent.invoke(&request) {
                Ok(r) => break r,
                Err(AgentError::Unavailable(msg)) => {
                    if attempt >= self.config.agent_retries {
                        self.parked.lock().insert(case_id.clone(), msg.clone());
                        return Err(ServiceError::AgentUnavailable(msg));
                    }
                    attempt += 1;
                }
                Err(other) => return Err(ServiceError::AgentFailed(other)),
            }
        };
        self.parked.lock().remove(case_id);
        check_response(&request, &response).map_err(ServiceError::AgentFailed)?;
        let who = Principal::Agent(descriptor);
        for produced in &response.produced_artifacts {
            self.broker
                .put_artifact(case_id, produced.kind, produced.content.clone(), &who)?;
        }
        let (record, next) = self.store.append(
            case_id,
            PendingEvent {
                stage_before: case.stage,
                outcome: response.outcome,
                actor: who,
                expected_seq: Some(last.seq),
            },
        )?;
        self.after_append(&case, &record, &next)?;
        Ok(())
    }

    /// Bookkeeping shared by agent and human transitions.
    fn after_append(&self, before: &BugCase, record: &EventRecord, after: &BugCase) -> Result<(), ServiceError> {
        if let Some(r) = &after.responsible_human {
            self.broker.admit(&after.case_id, Admission::Actor(r.actor.clone()))?;
        }
        if after.restart_count > before.restart_count {
            self.reopen_report(before, record)?;
        }
        self.apply_task_effects(record, after)?;
        Ok(())
    }

    /// Starts a new cycle with a fresh OriginalReport version carrying the
    /// reporter's rejection note.
    fn reopen_report(&self, before: &BugCase, record: &EventRecord) -> Result<(), ServiceError> {
        let case = &before.case_id;
        let reporter = Principal::human(self.reporter(case)?, Role::EndUser);
        let previous = self
            .broker
            .get_artifact(case, ArtifactKind::OriginalReport, &reporter, None)?;
        let mut report: BugReportModel = serde_json::from_slice(&previous.content).unwrap_or_default();
        let note = record
            .stage_outcome()
            .and_then(|o| o.payload.note.clone())
            .unwrap_or_else(|| "The fix did not resolve the problem.".to_string());
        report
            .metadata
            .insert(format!("rejection_{}", before.restart_count + 1), note);
        let content = serde_json::to_string(&report).expect("report serializes");
        self.broker
            .put_artifact(case, ArtifactKind::OriginalReport, content, &reporter)?;
        Ok(())
    }

    /// Applies a human decision on an open task, then resumes the pump.
    pub fn post_decision(
        &self,
        token: Option<&str>,
        task_id: TaskId,
        request: &DecisionRequest,
    ) -> Result<CaseView, ServiceError> {
        let actor = self.authenticate(token)?;
        let task = self
            .tasks
            .get(task_id)
            .ok_or(ServiceError::Hil(HilError::UnknownTask(task_id)))?;
        let case_id = task.case_id.clone();
        let lock = self.lock_case(&case_id);
        let _guard = lock.lock();
        self.tasks.validate(task_id, &actor, &request.decision)?;
        let case = self.store.current(&case_id)?;
        if case.stage != task.stage {
            return Err(ServiceError::Hil(HilError::StaleTask(task_id)));
        }
        step(&case, &request.decision)?;
        let who = Principal::human(actor.actor_id.clone(), task.role);
        for attached in &request.artifacts {
            self.broker
                .put_artifact(&case_id, attached.kind, attached.content.clone(), &who)?;
        }
        let last = self.store.last_record(&case_id)?;
        let decision = self.tasks.submit_decision(task_id, &actor, request.decision.clone())?;
        self.broker.revoke(&case_id, &Admission::Role(task.role))?;
        let (record, next) = self.store.append(
            &case_id,
            PendingEvent {
                stage_before: case.stage,
                outcome: decision,
                actor: who,
                expected_seq: Some(last.seq),
            },
        )?;
        self.after_append(&case, &record, &next)?;
        match self.pump(&case_id) {
            Ok(()) | Err(ServiceError::AgentUnavailable(_)) => {}
            Err(e) => return Err(e),
        }
        self.view(&case_id)
    }

    fn can_view(&self, case: &CaseId, actor: &Actor) -> Result<bool, ServiceError> {
        if self.reporter(case)? == actor.actor_id {
            return Ok(true);
        }
        let current = self.store.current(case)?;
        if current.responsible_human.as_ref().is_some_and(|r| r.actor == actor.actor_id) {
            return Ok(true);
        }
        Ok(self.tasks.tasks_for_case(case).iter().any(|t| {
            (t.status == crate::hil::TaskStatus::Open && actor.has_role(t.role))
                || t.decided_by.as_ref() == Some(&actor.actor_id)
        }))
    }

    fn authorize_read(&self, token: Option<&str>, case: &CaseId) -> Result<Actor, ServiceError> {
        let actor = self.authenticate(token)?;
        if !self.store.contains(case) {
            return Err(ServiceError::NotFound(format!("case {case}")));
        }
        if !self.can_view(case, &actor)? {
            return Err(ServiceError::PolicyDenied(format!(
                "{} has no access to {case}",
                actor.actor_id
            )));
        }
        Ok(actor)
    }

    fn view(&self, case: &CaseId) -> Result<CaseView, ServiceError> {
        let current = self.store.current(case)?;
        let last = self.store.last_record(case)?;
        let prompt = if current.stage == LifecycleStage::ReportDialogue {
            match last.stage_outcome() {
                Some(o) if o.kind == OutcomeKind::NeedsMoreInfo => Some(PromptView::FollowUp {
                    question: o.payload.note.clone().unwrap_or_default(),
                }),
                _ => None,
            }
        } else {
            Some(PromptView::Sufficient)
        };
        Ok(CaseView {
            reporter: self.reporter(case)?,
            last_seq: last.seq,
            open_task: self.tasks.open_task(case),
            parked: self.parked.lock().contains_key(case),
            prompt,
            case: current,
        })
    }

    pub fn get_case(&self, token: Option<&str>, case: &CaseId) -> Result<CaseView, ServiceError> {
        self.authorize_read(token, case)?;
        self.view(case)
    }

    /// Events in seq order, each joined with the artifacts written and the
    /// broker accesses made since the previous event.
    pub fn get_timeline(&self, token: Option<&str>, case: &CaseId) -> Result<Vec<TimelineEntry>, ServiceError> {
        self.authorize_read(token, case)?;
        self.timeline(case)
    }

    pub fn timeline(&self, case: &CaseId) -> Result<Vec<TimelineEntry>, ServiceError> {
        let records = self.store.records(case)?;
        let artifacts = self.broker.records(case)?;
        let provenance = self.broker.provenance(case)?;
        let mut entries = Vec::with_capacity(records.len());
        let mut stage = records[0].stage_before;
        let mut prev_time = 0u64;
        let mut replayed: Option<BugCase> = None;
        for (i, r) in records.iter().enumerate() {
            let window = |t: u64| (i == 0 && t <= r.timestamp) || (t > prev_time && t <= r.timestamp);
            let mut refs: Vec<ArtifactRef> = artifacts
                .iter()
                .filter(|a| window(a.created_at))
                .map(|a| ArtifactRef {
                    kind: a.kind,
                    version: a.version,
                })
                .collect();
            refs.sort_by_key(|a| (a.kind, a.version));
            let next_case = match (&replayed, &r.outcome) {
                (None, RecordedOutcome::Opened { opened }) => crate::kernel::open_case(opened.clone())?,
                (Some(c), RecordedOutcome::Stage(o)) => step(c, o)?.0,
                _ => return Err(ServiceError::Persist(PersistError::CorruptChain {
                    seq: r.seq,
                    reason: "opening record out of place".into(),
                })),
            };
            stage = if i == 0 { stage } else { next_case.stage };
            entries.push(TimelineEntry {
                seq: r.seq,
                stage_before: r.stage_before,
                stage_after: stage,
                outcome: r.outcome.clone(),
                effects: r.effects.clone(),
                actor: r.actor.clone(),
                timestamp: r.timestamp,
                artifacts: refs,
                provenance: provenance.iter().filter(|p| window(p.timestamp)).cloned().collect(),
            });
            replayed = Some(next_case);
            prev_time = r.timestamp;
        }
        Ok(entries)
    }

    /// Open tasks for `role`. The caller must hold the role.
    pub fn list_tasks(&self, token: Option<&str>, role: Role) -> Result<Vec<HilTask>, ServiceError> {
        let actor = self.authenticate(token)?;
        if !actor.has_role(role) {
            return Err(ServiceError::Hil(HilError::RoleMismatch {
                actor: actor.actor_id,
                role,
            }));
        }
        Ok(self.tasks.list_tasks(role, Some(&actor.actor_id)))
    }

    /// One artifact version, subject to the case's access rules.
    pub fn get_artifact(
        &self,
        token: Option<&str>,
        case: &CaseId,
        kind: ArtifactKind,
        version: Option<u32>,
    ) -> Result<Arc<ArtifactRecord>, ServiceError> {
        let actor = self.authorize_read(token, case)?;
        let role = if self.reporter(case)? == actor.actor_id {
            Role::EndUser
        } else {
            let open_role = self
                .tasks
                .open_task(case)
                .map(|t| t.role)
                .filter(|r| actor.has_role(*r));
            open_role.unwrap_or(actor.roles[0])
        };
        Ok(self
            .broker
            .get_artifact(case, kind, &Principal::human(actor.actor_id, role), version)?)
    }

    pub fn run_simulation(&self, config: &SimConfig) -> Result<SimMetrics, ServiceError> {
        Ok(sim::simulate(config)?)
    }

    /// Rebuilds in-memory state for logs loaded from disk: broker cases,
    /// pending tasks and fix authors. Artifacts are not persisted, so cases
    /// resume with the artifacts written since start-up.
    fn recover(&self) -> Result<(), ServiceError> {
        for case_id in self.store.case_ids() {
            if !self.broker.has_case(&case_id) {
                self.broker.open_case(&case_id)?;
                self.broker.admit(&case_id, Admission::Actor(self.reporter(&case_id)?))?;
            }
            let records = self.store.records(&case_id)?;
            for r in &records {
                if r.stage_before == LifecycleStage::ManualFix {
                    if let Principal::Human { actor_id, .. } = &r.actor {
                        self.tasks.note_fix_author(&case_id, actor_id.clone());
                    }
                }
            }
            let current = self.store.current(&case_id)?;
            if !is_terminal(current.stage) {
                self.apply_task_effects(records.last().expect("opening record"), &current)?;
            }
        }
        Ok(())
    }

    /// Wall-clock reading from the service clock.
    pub fn now(&self) -> u64 {
        self.clock.now_millis()
    }
}

fn to_content(record: &ArtifactRecord) -> ArtifactContent {
    ArtifactContent {
        kind: record.kind,
        version: record.version,
        content: String::from_utf8_lossy(&record.content).into_owned(),
    }
}
