//! Deterministic rule-based agents, one per agent kind.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::report::{enhance, next_prompt, BugReportModel, Prompt, ReportField, Transcript};
use super::triage::{
    check_validity, classify, recommend_assignee, trace_feature, Candidate, FeatureDoc,
    HistoryEntry, ValidityVerdict, Verdict, Weights,
};
use super::{Agent, AgentDescriptor, AgentError, AgentRequest, AgentResponse, ProducedArtifact};
use crate::kernel::{OutcomeKind, StageOutcome};
use crate::model::{AgentKind, ArtifactKind};

/// Number of candidate patches generated per attempt.
pub const DEFAULT_PATCH_CANDIDATES: usize = 3;

/// Project data the reference agents consult.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectKnowledge {
    #[serde(default)]
    pub history: Vec<HistoryEntry>,
    #[serde(default)]
    pub docs: Vec<FeatureDoc>,
    #[serde(default)]
    pub developers: Vec<Candidate>,
    #[serde(default)]
    pub weights: Weights,
    #[serde(default = "default_patch_candidates")]
    pub patch_candidates: usize,
}

impl Default for ProjectKnowledge {
    fn default() -> Self {
        Self {
            history: Vec::new(),
            docs: Vec::new(),
            developers: Vec::new(),
            weights: Weights::default(),
            patch_candidates: DEFAULT_PATCH_CANDIDATES,
        }
    }
}

fn default_patch_candidates() -> usize {
    DEFAULT_PATCH_CANDIDATES
}

pub struct ReferenceAgent {
    descriptor: AgentDescriptor,
    knowledge: ProjectKnowledge,
}

impl ReferenceAgent {
    pub fn new(kind: AgentKind, knowledge: ProjectKnowledge) -> Self {
        Self {
            descriptor: AgentDescriptor::new(format!("reference-{kind}"), kind, 1),
            knowledge,
        }
    }

    /// One reference agent for every kind, sharing the same knowledge.
    pub fn all(knowledge: &ProjectKnowledge) -> Vec<ReferenceAgent> {
        AgentKind::ALL
            .into_iter()
            .map(|k| ReferenceAgent::new(k, knowledge.clone()))
            .collect()
    }
}

impl Agent for ReferenceAgent {
    fn descriptor(&self) -> &AgentDescriptor {
        &self.descriptor
    }

    fn invoke(&self, request: &AgentRequest) -> Result<AgentResponse, AgentError> {
        let k = &self.knowledge;
        match self.descriptor.kind {
            AgentKind::ChatbotIntake => intake(request),
            AgentKind::Enhancer => enhancer(request),
            AgentKind::Reproducer => reproducer(request),
            AgentKind::Classifier => {
                let record = classify(&working_report(request)?);
                Ok(respond(
                    OutcomeKind::Done,
                    vec![artifact(ArtifactKind::ClassificationRecord, &record)],
                    format!(
                        "Classified as {:?}, severity {:?}, priority {:?}.",
                        record.bug_type, record.severity, record.priority
                    ),
                ))
            }
            AgentKind::FeatureTracer => {
                let link = trace_feature(&working_report(request)?, &k.docs);
                let rationale = match &link.feature {
                    Some(f) => format!("Linked to feature {f} (overlap {:.2}).", link.score),
                    None => "No documented feature matches the report.".to_string(),
                };
                Ok(respond(
                    OutcomeKind::Done,
                    vec![artifact(ArtifactKind::TraceLink, &link)],
                    rationale,
                ))
            }
            AgentKind::ValidityChecker => {
                let verdict = check_validity(&working_report(request)?, &k.history, &k.docs);
                let outcome = match verdict.verdict {
                    Verdict::Valid => StageOutcome::new(OutcomeKind::Valid),
                    Verdict::Invalid(category) => StageOutcome::invalid(category),
                };
                Ok(AgentResponse {
                    outcome,
                    rationale: verdict.explanation.clone(),
                    produced_artifacts: vec![artifact(ArtifactKind::ValidityVerdict, &verdict)],
                })
            }
            AgentKind::Assigner => {
                let ranked = recommend_assignee(&working_report(request)?, &k.developers, k.weights)
                    .map_err(|_| AgentError::NoCandidates)?;
                let pick = ranked
                    .iter()
                    .find(|c| !request.excluded_assignees.contains(&c.dev))
                    .ok_or(AgentError::NoCandidates)?;
                let ranking: Vec<String> = ranked
                    .iter()
                    .map(|c| format!("{} ({:.3})", c.dev, c.score))
                    .collect();
                Ok(AgentResponse {
                    outcome: StageOutcome::new(OutcomeKind::Recommended)
                        .with_developer(pick.dev.clone()),
                    produced_artifacts: Vec::new(),
                    rationale: format!("Ranking: {}.", ranking.join(", ")),
                })
            }
            AgentKind::NoCodeFixer => {
                let explanation = request
                    .latest(ArtifactKind::ValidityVerdict)
                    .and_then(|a| serde_json::from_str::<ValidityVerdict>(&a.content).ok())
                    .map(|v| v.explanation)
                    .unwrap_or_else(|| "No verdict available.".to_string());
                let proposal = json!({
                    "response": explanation,
                    "attempt": request.counters.nocode_verify_count + 1,
                });
                Ok(respond(
                    OutcomeKind::Proposed,
                    vec![ProducedArtifact::new(ArtifactKind::NoCodeFixProposal, proposal.to_string())],
                    "Drafted a response for the reporter from the validity verdict.".to_string(),
                ))
            }
            AgentKind::Localizer => {
                let feature = request
                    .latest(ArtifactKind::TraceLink)
                    .and_then(|a| serde_json::from_str::<serde_json::Value>(&a.content).ok())
                    .and_then(|v| v.get("feature").and_then(|f| f.as_str()).map(str::to_string));
                let rationale = match feature {
                    Some(f) => format!("Fault localized to the {f} feature."),
                    None => "No traced feature; localization covers the whole report.".to_string(),
                };
                Ok(respond(OutcomeKind::Done, Vec::new(), rationale))
            }
            AgentKind::PatchGenerator => {
                let attempt = request.counters.patch_cycle_count + 1;
                let n = k.patch_candidates.max(1);
                let produced = (1..=n)
                    .map(|i| {
                        ProducedArtifact::new(
                            ArtifactKind::PatchCandidate,
                            json!({"attempt": attempt, "candidate": i}).to_string(),
                        )
                    })
                    .collect();
                Ok(respond(
                    OutcomeKind::Generated,
                    produced,
                    format!("Generated {n} candidate patches."),
                ))
            }
            AgentKind::Verifier => {
                let patch = request.latest(ArtifactKind::PatchCandidate);
                let (kind, note) = match patch {
                    Some(p) => (OutcomeKind::Pass, format!("Regression suite passed on patch v{}.", p.version)),
                    None => (OutcomeKind::Fail, "No patch candidate to verify.".to_string()),
                };
                let result = json!({"passed": kind == OutcomeKind::Pass, "note": note});
                Ok(respond(
                    kind,
                    vec![ProducedArtifact::new(ArtifactKind::VerificationResult, result.to_string())],
                    note,
                ))
            }
            AgentKind::DeploymentAssistant => {
                let patch = request.latest(ArtifactKind::PatchCandidate).map(|p| p.version);
                let summary = json!({"deployed_patch_version": patch, "case_id": request.case_id});
                Ok(respond(
                    OutcomeKind::Deployed,
                    vec![ProducedArtifact::new(ArtifactKind::DeploymentReport, summary.to_string())],
                    "Deployed the approved fix and summarized it for the reporter.".to_string(),
                ))
            }
        }
    }
}

fn respond(kind: OutcomeKind, produced: Vec<ProducedArtifact>, rationale: String) -> AgentResponse {
    AgentResponse {
        outcome: StageOutcome::new(kind),
        produced_artifacts: produced,
        rationale,
    }
}

fn artifact<T: Serialize>(kind: ArtifactKind, value: &T) -> ProducedArtifact {
    ProducedArtifact::new(kind, serde_json::to_string(value).expect("artifact serializes"))
}

fn parse<T: for<'de> Deserialize<'de>>(request: &AgentRequest, kind: ArtifactKind) -> Result<Option<T>, AgentError> {
    request
        .latest(kind)
        .map(|a| {
            serde_json::from_str(&a.content)
                .map_err(|e| AgentError::Malformed(format!("{kind:?} v{}: {e}", a.version)))
        })
        .transpose()
}

fn original(request: &AgentRequest) -> Result<BugReportModel, AgentError> {
    parse(request, ArtifactKind::OriginalReport)?
        .ok_or_else(|| AgentError::Malformed("no original report in the artifact slice".into()))
}

/// The enhanced report when one exists, else the original.
fn working_report(request: &AgentRequest) -> Result<BugReportModel, AgentError> {
    match parse(request, ArtifactKind::EnhancedReport)? {
        Some(r) => Ok(r),
        None => original(request),
    }
}

fn intake(request: &AgentRequest) -> Result<AgentResponse, AgentError> {
    let report = original(request)?;
    let mut transcript: Transcript = parse(request, ArtifactKind::DialogueTranscript)?.unwrap_or_default();
    // Each field is asked for at most once so the dialogue always ends.
    let prompt = match next_prompt(&transcript, &report) {
        Prompt::FollowUp { field, .. } if transcript.turns.iter().any(|t| t.field == field) => {
            let compiled = super::report::compile_report(&transcript, &report);
            ReportField::ORDER
                .into_iter()
                .find(|f| !compiled.is_populated(*f) && !transcript.turns.iter().any(|t| t.field == *f))
                .map(|field| Prompt::FollowUp {
                    field,
                    question: field.question().to_string(),
                })
                .unwrap_or(Prompt::Sufficient)
        }
        p => p,
    };
    match prompt {
        Prompt::FollowUp { field, question } => {
            transcript.ask(field);
            Ok(AgentResponse {
                outcome: StageOutcome::new(OutcomeKind::NeedsMoreInfo).with_note(question.clone()),
                produced_artifacts: vec![artifact(ArtifactKind::DialogueTranscript, &transcript)],
                rationale: format!("Missing {field:?}; asked: {question}"),
            })
        }
        Prompt::Sufficient => Ok(respond(
            OutcomeKind::Sufficient,
            vec![artifact(ArtifactKind::DialogueTranscript, &transcript)],
            "The report has enough detail to continue.".to_string(),
        )),
    }
}

const PLACEHOLDER: &str = "[not provided]";

fn enhancer(request: &AgentRequest) -> Result<AgentResponse, AgentError> {
    let report = original(request)?;
    let transcript: Transcript = parse(request, ArtifactKind::DialogueTranscript)?.unwrap_or_default();
    let mut enhanced = enhance(&report, &transcript);
    let mut gaps = Vec::new();
    for field in ReportField::ORDER {
        if enhanced.is_populated(field) {
            continue;
        }
        gaps.push(format!("{field:?}"));
        enhanced.placeholders.insert(field);
        match field {
            ReportField::ObservedBehavior if enhanced.observed_behavior.is_empty() => {
                enhanced.observed_behavior = PLACEHOLDER.to_string()
            }
            ReportField::ExpectedBehavior if enhanced.expected_behavior.is_empty() => {
                enhanced.expected_behavior = PLACEHOLDER.to_string()
            }
            _ => {}
        }
    }
    let rationale = if gaps.is_empty() {
        "Normalized steps and environment keys.".to_string()
    } else {
        format!("Still missing after the dialogue: {}; flagged as placeholders.", gaps.join(", "))
    };
    Ok(respond(
        OutcomeKind::Enhanced,
        vec![artifact(ArtifactKind::EnhancedReport, &enhanced)],
        rationale,
    ))
}

fn reproducer(request: &AgentRequest) -> Result<AgentResponse, AgentError> {
    let report = working_report(request)?;
    if !report.is_populated(ReportField::StepsToReproduce) {
        return Ok(respond(
            OutcomeKind::Fail,
            Vec::new(),
            "No reproduction steps to replay.".to_string(),
        ));
    }
    let script = json!({
        "steps": report.steps_to_reproduce,
        "environment": report.environment,
        "attempt": request.counters.repro_count + 1,
    });
    Ok(respond(
        OutcomeKind::Success,
        vec![ProducedArtifact::new(ArtifactKind::ReproductionArtifact, script.to_string())],
        format!("Replayed {} steps and observed the failure.", report.steps_to_reproduce.len()),
    ))
}
