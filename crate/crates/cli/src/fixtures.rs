//! Deterministic sample logs and simulation configs for `buglife export`.

use std::collections::BTreeMap;
use std::sync::Arc;

use buglife_core::kernel::{
    is_terminal, scripted_outcome, Accountability, BugCase, Branch, CaseParams, LifecycleStage,
    StageActor, Thresholds, Workflow,
};
use buglife_core::model::{
    AgentDescriptor, ArtifactKind, ArtifactRef, CaseId, LogicalClock, Principal, Role,
};
use buglife_core::persistence::{EventStore, PendingEvent, PersistError};
use buglife_core::sim::{default_proposed_config, default_traditional_config, SimConfig};

/// Timestamp of the first record in every fixture log.
pub const FIXTURE_EPOCH: u64 = 1_700_000_000_000;

fn actor_for(case: &BugCase) -> Principal {
    match case.workflow.stage_actor(case.stage) {
        Some(StageActor::Agent(kind)) => {
            Principal::Agent(AgentDescriptor::new(format!("reference-{kind}"), kind, 1))
        }
        Some(StageActor::Human(Role::EndUser)) | None => Principal::human("reporter", Role::EndUser),
        Some(StageActor::Human(role)) => match &case.responsible_human {
            Some(r) if r.role == role => Principal::human(r.actor.clone(), role),
            _ => Principal::human(role.name().to_lowercase(), role),
        },
    }
}

/// Event log of a case that takes the success outcome at every stage.
pub fn happy_log(workflow: Workflow, branch: Branch) -> Result<String, PersistError> {
    let store = EventStore::in_memory(Arc::new(LogicalClock::starting_at(FIXTURE_EPOCH)));
    let case_id = CaseId::new(format!(
        "{}-{}",
        match workflow {
            Workflow::Proposed => "PROPOSED",
            Workflow::Traditional => "TRADITIONAL",
        },
        match branch {
            Branch::Valid => "VALID",
            Branch::Invalid => "INVALID",
        }
    ));
    let params = CaseParams {
        case_id: case_id.clone(),
        workflow,
        report_ref: ArtifactRef {
            kind: ArtifactKind::OriginalReport,
            version: 1,
        },
        thresholds: Thresholds::default(),
        accountability: Accountability::default(),
    };
    let (_, mut case) = store.open(params, Principal::human("reporter", Role::EndUser))?;
    while !is_terminal(case.stage) {
        let outcome = scripted_outcome(&case, false, branch == Branch::Invalid)
            .expect("open stages have a success outcome");
        let event = PendingEvent {
            stage_before: case.stage,
            outcome,
            actor: actor_for(&case),
            expected_seq: None,
        };
        case = store.append(&case_id, event)?.1;
    }
    store.export_log(&case_id)
}

/// Proposed config where agent reproduction succeeds half the time and
/// escalates after three failures.
pub fn repro_half_config() -> SimConfig {
    let mut c = SimConfig::new(Workflow::Proposed);
    c.thresholds = Thresholds::uniform(3);
    c.success_prob.insert(LifecycleStage::AgentReproduction, 0.5);
    c.latency.insert(LifecycleStage::ReportDialogue, buglife_core::sim::Dist::Constant(0.0));
    c
}

/// Every fixture file, keyed by file name.
pub fn all() -> Result<BTreeMap<String, String>, PersistError> {
    let mut out = BTreeMap::new();
    for (name, workflow, branch) in [
        ("proposed-valid.jsonl", Workflow::Proposed, Branch::Valid),
        ("proposed-invalid.jsonl", Workflow::Proposed, Branch::Invalid),
        ("traditional-valid.jsonl", Workflow::Traditional, Branch::Valid),
        ("traditional-invalid.jsonl", Workflow::Traditional, Branch::Invalid),
    ] {
        out.insert(name.to_string(), happy_log(workflow, branch)?);
    }
    let json = |c: &SimConfig| serde_json::to_string_pretty(c).expect("config serializes") + "\n";
    out.insert("sim-proposed.json".into(), json(&default_proposed_config()));
    out.insert("sim-traditional.json".into(), json(&default_traditional_config()));
    out.insert("sim-repro-half.json".into(), json(&repro_half_config()));
    Ok(out)
}
