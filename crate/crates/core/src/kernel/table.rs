use std::sync::OnceLock;

use super::{
    BugCase, Counter, Counters, Effect, FixOrigin, KernelError, LifecycleStage, MessageKind,
    OutcomeKind, Resolution, Responsible, StageActor, StageOutcome, Workflow,
};
use crate::model::{AgentKind, ArtifactKind, Role};

use LifecycleStage as S;
use OutcomeKind as O;

/// Condition evaluated after the row's counter bump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guard {
    Always,
    Below(Counter),
    Reached(Counter),
    BelowWith(Counter, FixOrigin),
    ReachedWith(Counter, FixOrigin),
}

impl Guard {
    /// The counter whose threshold this guard hands off to a human.
    pub fn escalates(&self) -> Option<Counter> {
        match *self {
            Guard::Reached(c) | Guard::ReachedWith(c, _) => Some(c),
            _ => None,
        }
    }

    pub fn holds(&self, case: &BugCase) -> bool {
        let below = |c: Counter| case.counters.get(c) < case.thresholds.limit(c);
        let reached = |c: Counter| case.counters.get(c) == case.thresholds.limit(c);
        match *self {
            Guard::Always => true,
            Guard::Below(c) => below(c),
            Guard::Reached(c) => reached(c),
            Guard::BelowWith(c, origin) => below(c) && case.fix_origin == origin,
            Guard::ReachedWith(c, origin) => reached(c) && case.fix_origin == origin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Stage(LifecycleStage),
    Close(Resolution),
    /// `Resolved` after a code fix, `InvalidResolved` after a no-code fix.
    CloseByPath,
    /// Back to the report dialogue with a fresh cycle.
    Restart,
}

/// Bookkeeping applied when a row fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Update {
    RequireCategory,
    ResponsibleSupport,
    ResponsibleLead,
    ProposeAssignee,
    /// Approve the proposed candidate, or the one named in the payload.
    AssignProposed,
    AssignNamed,
    ExcludeProposed,
    SetAgentPatch,
    /// Switch to a human-authored fix; a fresh agent-verification budget
    /// starts when the previous fix was not already manual.
    EnterManualRegime,
    ResetCounter(Counter),
    Restart,
}

impl Update {
    pub(super) fn apply(self, case: &mut BugCase, outcome: &StageOutcome) -> Result<(), KernelError> {
        let missing = |field| KernelError::MissingPayload {
            outcome: outcome.kind,
            field,
        };
        match self {
            Update::RequireCategory => {
                outcome.payload.category.ok_or(missing("validity category"))?;
            }
            Update::ResponsibleSupport => {
                case.responsible_human = Some(Responsible {
                    role: Role::CustomerSupport,
                    actor: case.accountability.support_rep.clone(),
                });
            }
            Update::ResponsibleLead => {
                case.responsible_human = Some(Responsible {
                    role: Role::ProjectManager,
                    actor: case.accountability.project_lead.clone(),
                });
            }
            Update::ProposeAssignee => {
                let dev = outcome.payload.developer.clone().ok_or(missing("developer"))?;
                case.proposed_assignee = Some(dev);
            }
            Update::AssignProposed => {
                let dev = outcome
                    .payload
                    .developer
                    .clone()
                    .or_else(|| case.proposed_assignee.clone())
                    .ok_or(missing("developer"))?;
                case.proposed_assignee = Some(dev.clone());
                case.responsible_human = Some(Responsible {
                    role: Role::Developer,
                    actor: dev,
                });
            }
            Update::AssignNamed => {
                let dev = outcome.payload.developer.clone().ok_or(missing("developer"))?;
                case.proposed_assignee = Some(dev.clone());
                case.responsible_human = Some(Responsible {
                    role: Role::Developer,
                    actor: dev,
                });
            }
            Update::ExcludeProposed => {
                if let Some(dev) = case.proposed_assignee.take() {
                    if !case.excluded_assignees.contains(&dev) {
                        case.excluded_assignees.push(dev);
                    }
                }
            }
            Update::SetAgentPatch => case.fix_origin = FixOrigin::AgentPatch,
            Update::EnterManualRegime => {
                if case.fix_origin != FixOrigin::ManualPatch {
                    case.counters.agent_verify_count = 0;
                }
                case.fix_origin = FixOrigin::ManualPatch;
            }
            Update::ResetCounter(c) => *case.counters.slot(c) = 0,
            Update::Restart => {
                case.counters = Counters::default();
                case.restart_count += 1;
                case.fix_origin = FixOrigin::None;
                case.proposed_assignee = None;
                case.excluded_assignees.clear();
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionRow {
    pub from: LifecycleStage,
    pub outcome: OutcomeKind,
    /// Counter incremented before the guard is evaluated.
    pub bump: Option<Counter>,
    pub guard: Guard,
    pub target: Target,
    pub updates: &'static [Update],
}

fn row(from: LifecycleStage, outcome: OutcomeKind, to: LifecycleStage) -> TransitionRow {
    TransitionRow {
        from,
        outcome,
        bump: None,
        guard: Guard::Always,
        target: Target::Stage(to),
        updates: &[],
    }
}

impl TransitionRow {
    fn bump(mut self, counter: Counter, guard: Guard) -> Self {
        self.bump = Some(counter);
        self.guard = guard;
        self
    }

    fn target(mut self, target: Target) -> Self {
        self.target = target;
        self
    }

    fn updates(mut self, updates: &'static [Update]) -> Self {
        self.updates = updates;
        self
    }
}

fn proposed_rows() -> Vec<TransitionRow> {
    use Counter::*;
    use FixOrigin::{AgentPatch, ManualPatch};
    vec![
        row(S::ReportDialogue, O::NeedsMoreInfo, S::ReportDialogue),
        row(S::ReportDialogue, O::Sufficient, S::Enhancement),
        row(S::Enhancement, O::Enhanced, S::AgentReproduction),
        row(S::AgentReproduction, O::Success, S::Classification),
        row(S::AgentReproduction, O::Fail, S::Enhancement).bump(Repro, Guard::Below(Repro)),
        row(S::AgentReproduction, O::Fail, S::ManualReproduction).bump(Repro, Guard::Reached(Repro)),
        row(S::ManualReproduction, O::Success, S::Classification),
        row(S::ManualReproduction, O::CannotReproduce, S::ReportDialogue)
            .target(Target::Close(Resolution::Irreproducible)),
        row(S::Classification, O::Done, S::FeatureTracing),
        row(S::FeatureTracing, O::Done, S::ValidityCheck),
        row(S::ValidityCheck, O::Invalid, S::NoCodeFix)
            .updates(&[Update::RequireCategory, Update::ResponsibleSupport]),
        row(S::ValidityCheck, O::Valid, S::FixDecision).updates(&[Update::ResponsibleLead]),
        row(S::NoCodeFix, O::Proposed, S::NoCodeVerification),
        row(S::NoCodeVerification, O::Pass, S::UserVerification),
        row(S::NoCodeVerification, O::Fail, S::NoCodeFix).bump(NoCode, Guard::Below(NoCode)),
        row(S::NoCodeVerification, O::Fail, S::ManualNoCodeFix).bump(NoCode, Guard::Reached(NoCode)),
        row(S::ManualNoCodeFix, O::Provided, S::UserVerification),
        row(S::FixDecision, O::WontFix, S::FixDecision).target(Target::Close(Resolution::WontFix)),
        row(S::FixDecision, O::Fix, S::AssignmentRecommendation),
        row(S::AssignmentRecommendation, O::Recommended, S::AssignmentReview)
            .updates(&[Update::ProposeAssignee]),
        row(S::AssignmentReview, O::Approve, S::Localization).updates(&[Update::AssignProposed]),
        row(S::AssignmentReview, O::Override, S::Localization).updates(&[Update::AssignNamed]),
        row(S::AssignmentReview, O::Reject, S::AssignmentRecommendation)
            .updates(&[Update::ExcludeProposed]),
        row(S::Localization, O::Done, S::PatchGeneration),
        row(S::PatchGeneration, O::Generated, S::DeveloperReview).updates(&[Update::SetAgentPatch]),
        row(S::DeveloperReview, O::Merge, S::AgentVerification),
        row(S::DeveloperReview, O::Reject, S::Localization).bump(PatchCycle, Guard::Below(PatchCycle)),
        row(S::DeveloperReview, O::Reject, S::ManualFix).bump(PatchCycle, Guard::Reached(PatchCycle)),
        row(S::ManualFix, O::Submitted, S::ReviewerReview).updates(&[Update::EnterManualRegime]),
        row(S::ReviewerReview, O::Reject, S::ManualFix),
        row(S::ReviewerReview, O::Approve, S::AgentVerification),
        row(S::AgentVerification, O::Pass, S::Deployment),
        row(S::AgentVerification, O::Fail, S::Localization)
            .bump(AgentVerify, Guard::BelowWith(AgentVerify, AgentPatch)),
        row(S::AgentVerification, O::Fail, S::ManualFix)
            .bump(AgentVerify, Guard::BelowWith(AgentVerify, ManualPatch)),
        row(S::AgentVerification, O::Fail, S::ManualFix)
            .bump(AgentVerify, Guard::ReachedWith(AgentVerify, AgentPatch)),
        row(S::AgentVerification, O::Fail, S::ManualTesterVerification)
            .bump(AgentVerify, Guard::ReachedWith(AgentVerify, ManualPatch)),
        row(S::ManualTesterVerification, O::Pass, S::Deployment),
        row(S::ManualTesterVerification, O::Fail, S::ManualFix)
            .updates(&[Update::ResetCounter(AgentVerify)]),
        row(S::Deployment, O::Deployed, S::UserVerification),
        row(S::UserVerification, O::Accept, S::UserVerification).target(Target::CloseByPath),
        row(S::UserVerification, O::Reject, S::ReportDialogue)
            .target(Target::Restart)
            .updates(&[Update::Restart]),
    ]
}

fn traditional_rows() -> Vec<TransitionRow> {
    vec![
        row(S::ReportDialogue, O::Sufficient, S::ManualReproduction),
        row(S::ManualReproduction, O::Success, S::Classification),
        row(S::ManualReproduction, O::Fail, S::ReportDialogue),
        row(S::Classification, O::Done, S::FeatureTracing),
        row(S::FeatureTracing, O::Done, S::ValidityCheck),
        row(S::ValidityCheck, O::Invalid, S::NoCodeFix)
            .updates(&[Update::RequireCategory, Update::ResponsibleSupport]),
        row(S::ValidityCheck, O::Valid, S::FixDecision).updates(&[Update::ResponsibleLead]),
        row(S::NoCodeFix, O::Proposed, S::NoCodeVerification),
        row(S::NoCodeVerification, O::Pass, S::UserVerification),
        row(S::NoCodeVerification, O::Fail, S::NoCodeFix),
        row(S::FixDecision, O::WontFix, S::FixDecision).target(Target::Close(Resolution::WontFix)),
        row(S::FixDecision, O::Fix, S::AssignmentReview),
        row(S::AssignmentReview, O::Approve, S::Localization).updates(&[Update::AssignNamed]),
        row(S::Localization, O::Done, S::ManualFix),
        row(S::ManualFix, O::Submitted, S::ReviewerReview).updates(&[Update::EnterManualRegime]),
        row(S::ReviewerReview, O::Reject, S::ManualFix),
        row(S::ReviewerReview, O::Approve, S::ManualTesterVerification),
        row(S::ManualTesterVerification, O::Pass, S::Deployment),
        row(S::ManualTesterVerification, O::Fail, S::ManualFix),
        row(S::Deployment, O::Deployed, S::UserVerification),
        row(S::UserVerification, O::Accept, S::UserVerification).target(Target::CloseByPath),
        row(S::UserVerification, O::Reject, S::ReportDialogue)
            .target(Target::Restart)
            .updates(&[Update::Restart]),
    ]
}

pub(super) fn rows(workflow: Workflow) -> &'static [TransitionRow] {
    static PROPOSED: OnceLock<Vec<TransitionRow>> = OnceLock::new();
    static TRADITIONAL: OnceLock<Vec<TransitionRow>> = OnceLock::new();
    match workflow {
        Workflow::Proposed => PROPOSED.get_or_init(proposed_rows),
        Workflow::Traditional => TRADITIONAL.get_or_init(traditional_rows),
    }
}

pub(super) fn stage_actor(workflow: Workflow, stage: LifecycleStage) -> Option<StageActor> {
    use StageActor::{Agent, Human};
    if !workflow.rows().iter().any(|r| r.from == stage) {
        return None;
    }
    let actor = match workflow {
        Workflow::Proposed => match stage {
            S::ReportDialogue => Agent(AgentKind::ChatbotIntake),
            S::Enhancement => Agent(AgentKind::Enhancer),
            S::AgentReproduction => Agent(AgentKind::Reproducer),
            S::ManualReproduction => Human(Role::CustomerSupport),
            S::Classification => Agent(AgentKind::Classifier),
            S::FeatureTracing => Agent(AgentKind::FeatureTracer),
            S::ValidityCheck => Agent(AgentKind::ValidityChecker),
            S::NoCodeFix => Agent(AgentKind::NoCodeFixer),
            S::NoCodeVerification => Human(Role::CustomerSupport),
            S::ManualNoCodeFix => Human(Role::CustomerSupport),
            S::FixDecision => Human(Role::ProjectManager),
            S::AssignmentRecommendation => Agent(AgentKind::Assigner),
            S::AssignmentReview => Human(Role::TeamLead),
            S::Localization => Agent(AgentKind::Localizer),
            S::PatchGeneration => Agent(AgentKind::PatchGenerator),
            S::DeveloperReview => Human(Role::Developer),
            S::ManualFix => Human(Role::Developer),
            S::ReviewerReview => Human(Role::Reviewer),
            S::AgentVerification => Agent(AgentKind::Verifier),
            S::ManualTesterVerification => Human(Role::Tester),
            S::Deployment => Agent(AgentKind::DeploymentAssistant),
            S::UserVerification => Human(Role::EndUser),
            S::Closed(_) => return None,
        },
        Workflow::Traditional => Human(match stage {
            S::ReportDialogue | S::UserVerification => Role::EndUser,
            S::ManualReproduction
            | S::Classification
            | S::FeatureTracing
            | S::ValidityCheck
            | S::NoCodeFix
            | S::NoCodeVerification => Role::CustomerSupport,
            S::FixDecision => Role::ProjectManager,
            S::AssignmentReview => Role::TeamLead,
            S::Localization | S::ManualFix => Role::Developer,
            S::ReviewerReview => Role::Reviewer,
            S::ManualTesterVerification => Role::Tester,
            S::Deployment => Role::Ops,
            _ => return None,
        }),
    };
    Some(actor)
}

pub(super) fn branch_outcomes(
    workflow: Workflow,
    stage: LifecycleStage,
) -> Option<(OutcomeKind, Option<OutcomeKind>)> {
    let legal = workflow.legal_outcomes(stage);
    if legal.is_empty() {
        return None;
    }
    const HAPPY: [OutcomeKind; 17] = [
        O::Sufficient,
        O::Enhanced,
        O::Success,
        O::Done,
        O::Valid,
        O::Proposed,
        O::Pass,
        O::Provided,
        O::Fix,
        O::Recommended,
        O::Approve,
        O::Generated,
        O::Merge,
        O::Submitted,
        O::Deployed,
        O::Accept,
        O::Override,
    ];
    const ALTERNATIVE: [OutcomeKind; 6] = [
        O::NeedsMoreInfo,
        O::Fail,
        O::CannotReproduce,
        O::Invalid,
        O::WontFix,
        O::Reject,
    ];
    let happy = HAPPY.into_iter().find(|o| legal.contains(o))?;
    let alt = ALTERNATIVE.into_iter().find(|o| legal.contains(o));
    Some((happy, alt))
}

/// The artifact kind a stage writes when it completes successfully.
pub(super) fn produced_artifact(workflow: Workflow, stage: LifecycleStage) -> Option<ArtifactKind> {
    Some(match stage {
        S::ReportDialogue if workflow == Workflow::Proposed => ArtifactKind::DialogueTranscript,
        S::Enhancement => ArtifactKind::EnhancedReport,
        S::AgentReproduction | S::ManualReproduction => ArtifactKind::ReproductionArtifact,
        S::Classification => ArtifactKind::ClassificationRecord,
        S::FeatureTracing => ArtifactKind::TraceLink,
        S::ValidityCheck => ArtifactKind::ValidityVerdict,
        S::NoCodeFix | S::ManualNoCodeFix => ArtifactKind::NoCodeFixProposal,
        S::PatchGeneration | S::ManualFix => ArtifactKind::PatchCandidate,
        S::AgentVerification | S::ManualTesterVerification => ArtifactKind::VerificationResult,
        S::Deployment => ArtifactKind::DeploymentReport,
        _ => return None,
    })
}

pub(super) fn is_setback(outcome: OutcomeKind) -> bool {
    matches!(
        outcome,
        O::Fail | O::Reject | O::NeedsMoreInfo | O::CannotReproduce | O::WontFix
    )
}

/// Effects of entering `stage`. `via_loop` is set when the dialogue is
/// re-entered to ask the reporter for more detail.
pub(super) fn entry_effects(
    workflow: Workflow,
    stage: LifecycleStage,
    via_loop: Option<OutcomeKind>,
) -> Vec<Effect> {
    let mut effects = Vec::new();
    let actor = workflow.stage_actor(stage);
    if stage == S::ReportDialogue && via_loop.is_some() {
        effects.push(Effect::NotifyUser(MessageKind::FollowUpQuestion));
        if let Some(StageActor::Human(role)) = actor {
            effects.push(Effect::CreateHilTask {
                role,
                actions: workflow.human_actions(stage),
            });
        }
        return effects;
    }
    if stage == S::UserVerification {
        effects.push(Effect::NotifyUser(MessageKind::VerificationRequest));
    }
    match actor {
        Some(StageActor::Agent(kind)) => effects.push(Effect::InvokeAgent(kind)),
        Some(StageActor::Human(role)) => effects.push(Effect::CreateHilTask {
            role,
            actions: workflow.human_actions(stage),
        }),
        None => {}
    }
    effects
}

pub(super) fn effects(
    workflow: Workflow,
    row: &TransitionRow,
    from: LifecycleStage,
    next: &BugCase,
) -> Vec<Effect> {
    let mut effects = Vec::new();
    if !is_setback(row.outcome) {
        if let Some(kind) = produced_artifact(workflow, from) {
            effects.push(Effect::RecordArtifact(kind));
        }
    }
    match next.stage {
        S::Closed(resolution) => {
            effects.push(Effect::Close(resolution));
            match resolution {
                Resolution::WontFix => effects.push(Effect::NotifyUser(MessageKind::ClosedWontFix)),
                Resolution::Irreproducible => {
                    effects.push(Effect::NotifyUser(MessageKind::ClosedIrreproducible))
                }
                _ => {}
            }
        }
        stage => {
            let via_loop = match row.target {
                Target::Restart => None,
                _ => Some(row.outcome),
            };
            effects.extend(entry_effects(workflow, stage, via_loop));
        }
    }
    effects
}
