//! Pure lifecycle kernel.
//!
//! A [`BugCase`] is advanced by [`step`], which looks up exactly one row of
//! the workflow's transition table, applies its counter and bookkeeping
//! updates and returns the ordered side effects the caller must carry out.
//! Nothing here performs I/O; the same inputs always produce the same case
//! and effects.

mod table;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActorId, AgentKind, ArtifactKind, ArtifactRef, CaseId, Role};

pub use table::{Guard, Target, TransitionRow, Update};

/// Terminal resolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Resolution {
    Resolved,
    WontFix,
    InvalidResolved,
    Irreproducible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LifecycleStage {
    ReportDialogue,
    Enhancement,
    AgentReproduction,
    ManualReproduction,
    Classification,
    FeatureTracing,
    ValidityCheck,
    NoCodeFix,
    NoCodeVerification,
    ManualNoCodeFix,
    FixDecision,
    AssignmentRecommendation,
    AssignmentReview,
    Localization,
    PatchGeneration,
    DeveloperReview,
    ManualFix,
    ReviewerReview,
    AgentVerification,
    ManualTesterVerification,
    Deployment,
    UserVerification,
    Closed(Resolution),
}

impl LifecycleStage {
    /// Every non-terminal stage.
    pub const OPEN: [LifecycleStage; 22] = [
        LifecycleStage::ReportDialogue,
        LifecycleStage::Enhancement,
        LifecycleStage::AgentReproduction,
        LifecycleStage::ManualReproduction,
        LifecycleStage::Classification,
        LifecycleStage::FeatureTracing,
        LifecycleStage::ValidityCheck,
        LifecycleStage::NoCodeFix,
        LifecycleStage::NoCodeVerification,
        LifecycleStage::ManualNoCodeFix,
        LifecycleStage::FixDecision,
        LifecycleStage::AssignmentRecommendation,
        LifecycleStage::AssignmentReview,
        LifecycleStage::Localization,
        LifecycleStage::PatchGeneration,
        LifecycleStage::DeveloperReview,
        LifecycleStage::ManualFix,
        LifecycleStage::ReviewerReview,
        LifecycleStage::AgentVerification,
        LifecycleStage::ManualTesterVerification,
        LifecycleStage::Deployment,
        LifecycleStage::UserVerification,
    ];

    pub fn resolution(self) -> Option<Resolution> {
        match self {
            LifecycleStage::Closed(r) => Some(r),
            _ => None,
        }
    }
}

impl fmt::Display for LifecycleStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LifecycleStage::Closed(r) => write!(f, "Closed({r:?})"),
            other => fmt::Debug::fmt(other, f),
        }
    }
}

/// True iff the stage is `Closed(_)`.
pub fn is_terminal(stage: LifecycleStage) -> bool {
    matches!(stage, LifecycleStage::Closed(_))
}

/// Which transition table drives a case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Workflow {
    /// Agent-driven lifecycle with human checkpoints.
    #[default]
    Proposed,
    /// Manual baseline where every stage is carried out by a person.
    Traditional,
}

/// Who carries out a stage under a given workflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageActor {
    Agent(AgentKind),
    Human(Role),
}

impl Workflow {
    pub fn rows(self) -> &'static [TransitionRow] {
        table::rows(self)
    }

    /// Non-terminal stages that appear in this workflow's table.
    pub fn stages(self) -> Vec<LifecycleStage> {
        LifecycleStage::OPEN
            .into_iter()
            .filter(|s| self.rows().iter().any(|r| r.from == *s))
            .collect()
    }

    /// Outcome kinds legal at `stage`, in table order. Empty for terminal
    /// stages and for stages this workflow never visits.
    pub fn legal_outcomes(self, stage: LifecycleStage) -> Vec<OutcomeKind> {
        let mut out = Vec::new();
        for row in self.rows().iter().filter(|r| r.from == stage) {
            if !out.contains(&row.outcome) {
                out.push(row.outcome);
            }
        }
        out
    }

    pub fn stage_actor(self, stage: LifecycleStage) -> Option<StageActor> {
        table::stage_actor(self, stage)
    }

    /// Outcomes a human may submit at `stage`; empty for agent stages.
    pub fn human_actions(self, stage: LifecycleStage) -> Vec<OutcomeKind> {
        match self.stage_actor(stage) {
            Some(StageActor::Human(_)) => self.legal_outcomes(stage),
            _ => Vec::new(),
        }
    }

    /// The success outcome at `stage` and, if the stage can go another way,
    /// the alternative outcome. `ValidityCheck` reports `(Valid, Invalid)`.
    pub fn branch_outcomes(self, stage: LifecycleStage) -> Option<(OutcomeKind, Option<OutcomeKind>)> {
        table::branch_outcomes(self, stage)
    }

    /// Artifact kind written when `stage` completes successfully.
    pub fn produced_artifact(self, stage: LifecycleStage) -> Option<ArtifactKind> {
        table::produced_artifact(self, stage)
    }
}

/// Outcomes legal at `stage` in the proposed workflow.
pub fn legal_outcomes(stage: LifecycleStage) -> Vec<OutcomeKind> {
    Workflow::Proposed.legal_outcomes(stage)
}

/// Escalation thresholds for the four agent loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thresholds {
    pub k_repro: u32,
    pub k_nocode: u32,
    pub k_patch_cycle: u32,
    pub k_agent_verify: u32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self::uniform(3)
    }
}

impl Thresholds {
    pub const fn uniform(k: u32) -> Self {
        Self {
            k_repro: k,
            k_nocode: k,
            k_patch_cycle: k,
            k_agent_verify: k,
        }
    }

    pub fn limit(&self, counter: Counter) -> u32 {
        match counter {
            Counter::Repro => self.k_repro,
            Counter::NoCode => self.k_nocode,
            Counter::PatchCycle => self.k_patch_cycle,
            Counter::AgentVerify => self.k_agent_verify,
        }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        for counter in Counter::ALL {
            if self.limit(counter) < 1 {
                return Err(KernelError::ZeroThreshold(counter));
            }
        }
        Ok(())
    }
}

/// The four iteration counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Counter {
    Repro,
    NoCode,
    PatchCycle,
    AgentVerify,
}

impl Counter {
    pub const ALL: [Counter; 4] = [
        Counter::Repro,
        Counter::NoCode,
        Counter::PatchCycle,
        Counter::AgentVerify,
    ];

    /// The agent-driven stage whose failures this counter tracks.
    pub fn stage(self) -> LifecycleStage {
        match self {
            Counter::Repro => LifecycleStage::AgentReproduction,
            Counter::NoCode => LifecycleStage::NoCodeVerification,
            Counter::PatchCycle => LifecycleStage::DeveloperReview,
            Counter::AgentVerify => LifecycleStage::AgentVerification,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub repro_count: u32,
    pub nocode_verify_count: u32,
    pub patch_cycle_count: u32,
    pub agent_verify_count: u32,
}

impl Counters {
    pub fn get(&self, counter: Counter) -> u32 {
        match counter {
            Counter::Repro => self.repro_count,
            Counter::NoCode => self.nocode_verify_count,
            Counter::PatchCycle => self.patch_cycle_count,
            Counter::AgentVerify => self.agent_verify_count,
        }
    }

    pub fn slot(&mut self, counter: Counter) -> &mut u32 {
        match counter {
            Counter::Repro => &mut self.repro_count,
            Counter::NoCode => &mut self.nocode_verify_count,
            Counter::PatchCycle => &mut self.patch_cycle_count,
            Counter::AgentVerify => &mut self.agent_verify_count,
        }
    }
}

/// Where the fix under verification came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum FixOrigin {
    #[default]
    None,
    AgentPatch,
    ManualPatch,
}

/// A role-qualified actor accountable for a case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Responsible {
    pub role: Role,
    pub actor: ActorId,
}

/// Named humans the kernel hands accountability to before a developer is
/// assigned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accountability {
    /// The single customer-support representative owning invalid reports.
    pub support_rep: ActorId,
    /// Owner of valid reports until a developer is approved.
    pub project_lead: ActorId,
}

impl Default for Accountability {
    fn default() -> Self {
        Self {
            support_rep: ActorId::new("support"),
            project_lead: ActorId::new("lead"),
        }
    }
}

/// Everything needed to recreate the initial state of a case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseParams {
    pub case_id: CaseId,
    pub workflow: Workflow,
    pub report_ref: ArtifactRef,
    pub thresholds: Thresholds,
    pub accountability: Accountability,
}

/// Live state of one bug.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugCase {
    pub case_id: CaseId,
    pub workflow: Workflow,
    pub stage: LifecycleStage,
    pub counters: Counters,
    pub fix_origin: FixOrigin,
    pub responsible_human: Option<Responsible>,
    pub restart_count: u32,
    pub thresholds: Thresholds,
    pub accountability: Accountability,
    pub report_ref: ArtifactRef,
    /// Candidate put forward by the latest assignment recommendation.
    pub proposed_assignee: Option<ActorId>,
    /// Candidates rejected during the current cycle.
    pub excluded_assignees: Vec<ActorId>,
}

impl BugCase {
    pub fn params(&self) -> CaseParams {
        CaseParams {
            case_id: self.case_id.clone(),
            workflow: self.workflow,
            report_ref: self.report_ref.clone(),
            thresholds: self.thresholds,
            accountability: self.accountability.clone(),
        }
    }
}

/// Opens a proposed-workflow case with default accountability.
pub fn init_case(
    case_id: CaseId,
    report_ref: ArtifactRef,
    thresholds: Thresholds,
) -> Result<BugCase, KernelError> {
    open_case(CaseParams {
        case_id,
        workflow: Workflow::Proposed,
        report_ref,
        thresholds,
        accountability: Accountability::default(),
    })
}

pub fn open_case(params: CaseParams) -> Result<BugCase, KernelError> {
    params.thresholds.validate()?;
    Ok(BugCase {
        case_id: params.case_id,
        workflow: params.workflow,
        stage: LifecycleStage::ReportDialogue,
        counters: Counters::default(),
        fix_origin: FixOrigin::None,
        responsible_human: None,
        restart_count: 0,
        thresholds: params.thresholds,
        accountability: params.accountability,
        report_ref: params.report_ref,
        proposed_assignee: None,
        excluded_assignees: Vec::new(),
    })
}

/// Effects an initial case asks for before any outcome is applied.
pub fn opening_effects(workflow: Workflow) -> Vec<Effect> {
    table::entry_effects(workflow, LifecycleStage::ReportDialogue, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OutcomeKind {
    NeedsMoreInfo,
    Sufficient,
    Enhanced,
    Success,
    Fail,
    CannotReproduce,
    Done,
    Valid,
    Invalid,
    Proposed,
    Pass,
    Provided,
    Fix,
    WontFix,
    Recommended,
    Approve,
    Override,
    Reject,
    Generated,
    Merge,
    Submitted,
    Deployed,
    Accept,
}

impl OutcomeKind {
    /// Outcomes that send the case backwards or out of the fix path.
    pub fn is_setback(self) -> bool {
        table::is_setback(self)
    }

    pub fn parse(s: &str) -> Option<OutcomeKind> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
    }
}

impl fmt::Display for OutcomeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Why a report was judged invalid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValidityCategory {
    UserError,
    Duplicate,
    ConfigurationError,
}

/// Detail attached to an outcome.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<ValidityCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub developer: Option<ActorId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub artifacts: Vec<ArtifactRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub kind: OutcomeKind,
    #[serde(default)]
    pub payload: Payload,
}

impl StageOutcome {
    pub fn new(kind: OutcomeKind) -> Self {
        Self {
            kind,
            payload: Payload::default(),
        }
    }

    pub fn invalid(category: ValidityCategory) -> Self {
        Self::new(OutcomeKind::Invalid).with_category(category)
    }

    pub fn with_category(mut self, category: ValidityCategory) -> Self {
        self.payload.category = Some(category);
        self
    }

    pub fn with_developer(mut self, developer: impl Into<ActorId>) -> Self {
        self.payload.developer = Some(developer.into());
        self
    }

    pub fn with_artifacts(mut self, artifacts: Vec<ArtifactRef>) -> Self {
        self.payload.artifacts = artifacts;
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.payload.note = Some(note.into());
        self
    }
}

impl From<OutcomeKind> for StageOutcome {
    fn from(kind: OutcomeKind) -> Self {
        Self::new(kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    FollowUpQuestion,
    VerificationRequest,
    ClosedWontFix,
    ClosedIrreproducible,
}

/// Side effects requested by a transition, in the order they must run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Effect {
    InvokeAgent(AgentKind),
    CreateHilTask { role: Role, actions: Vec<OutcomeKind> },
    NotifyUser(MessageKind),
    RecordArtifact(ArtifactKind),
    Close(Resolution),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KernelError {
    #[error("threshold for {0:?} must be at least 1")]
    ZeroThreshold(Counter),
    #[error("outcome {outcome} is not legal at stage {stage}")]
    IllegalOutcome {
        stage: LifecycleStage,
        outcome: OutcomeKind,
    },
    #[error("case is closed ({0})")]
    TerminalCase(LifecycleStage),
    #[error("outcome {outcome} requires a {field}")]
    MissingPayload {
        outcome: OutcomeKind,
        field: &'static str,
    },
    #[error("no transition matches {outcome} at {stage} (counter state out of range)")]
    Unroutable {
        stage: LifecycleStage,
        outcome: OutcomeKind,
    },
}

/// The transition row `outcome` fires at the case's stage, after the
/// row's counter bump.
pub fn fired_row(case: &BugCase, outcome: &StageOutcome) -> Result<&'static TransitionRow, KernelError> {
    fire(case, outcome).map(|(row, _)| row)
}

fn fire(case: &BugCase, outcome: &StageOutcome) -> Result<(&'static TransitionRow, BugCase), KernelError> {
    if is_terminal(case.stage) {
        return Err(KernelError::TerminalCase(case.stage));
    }
    let candidates: Vec<&'static TransitionRow> = case
        .workflow
        .rows()
        .iter()
        .filter(|r| r.from == case.stage && r.outcome == outcome.kind)
        .collect();
    let Some(first) = candidates.first() else {
        return Err(KernelError::IllegalOutcome {
            stage: case.stage,
            outcome: outcome.kind,
        });
    };
    let mut next = case.clone();
    if let Some(counter) = first.bump {
        *next.counters.slot(counter) += 1;
    }
    let row = candidates
        .into_iter()
        .find(|r| r.guard.holds(&next))
        .ok_or(KernelError::Unroutable {
            stage: case.stage,
            outcome: outcome.kind,
        })?;
    Ok((row, next))
}

/// Applies one outcome to a case.
pub fn step(case: &BugCase, outcome: &StageOutcome) -> Result<(BugCase, Vec<Effect>), KernelError> {
    let workflow = case.workflow;
    let (row, mut next) = fire(case, outcome)?;

    for update in row.updates {
        update.apply(&mut next, outcome)?;
    }

    next.stage = match row.target {
        Target::Stage(stage) => stage,
        Target::Close(resolution) => LifecycleStage::Closed(resolution),
        Target::CloseByPath => LifecycleStage::Closed(match case.fix_origin {
            FixOrigin::None => Resolution::InvalidResolved,
            _ => Resolution::Resolved,
        }),
        Target::Restart => LifecycleStage::ReportDialogue,
    };

    let effects = table::effects(workflow, row, case.stage, &next);
    Ok((next, effects))
}

/// Canonical success/alternative outcome at the case's stage, with the
/// payload the kernel needs. `invalid` picks the branch at `ValidityCheck`.
pub fn scripted_outcome(case: &BugCase, take_alternative: bool, invalid: bool) -> Option<StageOutcome> {
    let (happy, alt) = case.workflow.branch_outcomes(case.stage)?;
    let kind = if case.stage == LifecycleStage::ValidityCheck {
        if invalid {
            OutcomeKind::Invalid
        } else {
            OutcomeKind::Valid
        }
    } else if take_alternative {
        alt.unwrap_or(happy)
    } else {
        happy
    };
    let mut outcome = StageOutcome::new(kind);
    match kind {
        OutcomeKind::Invalid => outcome = outcome.with_category(ValidityCategory::UserError),
        OutcomeKind::Recommended => {
            let n = case.excluded_assignees.len();
            outcome = outcome.with_developer(format!("developer-{n}"));
        }
        OutcomeKind::Approve
            if case.stage == LifecycleStage::AssignmentReview && case.proposed_assignee.is_none() =>
        {
            outcome = outcome.with_developer("developer-0");
        }
        _ => {}
    }
    Some(outcome)
}

/// Which side of the validity check a happy path follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Valid,
    Invalid,
}

/// Stage sequence obtained by taking the success outcome everywhere,
/// ending with the `Closed` stage.
pub fn happy_path(workflow: Workflow, branch: Branch) -> Vec<LifecycleStage> {
    let params = CaseParams {
        case_id: CaseId::new("happy-path"),
        workflow,
        report_ref: ArtifactRef {
            kind: ArtifactKind::OriginalReport,
            version: 1,
        },
        thresholds: Thresholds::default(),
        accountability: Accountability::default(),
    };
    let mut case = open_case(params).expect("default thresholds are valid");
    let mut path = vec![case.stage];
    while !is_terminal(case.stage) {
        let outcome = scripted_outcome(&case, false, branch == Branch::Invalid)
            .expect("every open stage has a success outcome");
        case = step(&case, &outcome).expect("happy path is routable").0;
        path.push(case.stage);
    }
    path
}
