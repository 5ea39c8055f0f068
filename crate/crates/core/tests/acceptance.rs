//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use buglife_core::agents::scripted::ScriptedAgent;
use buglife_core::agents::triage::{rank_scored, similarity, Weights};
use buglife_core::agents::{Agent, AgentDescriptor, AgentError, AgentRequest, AgentResponse};
use buglife_core::broker::Access;
use buglife_core::hil::{HilError, HilTask};
use buglife_core::kernel::{
    fired_row, happy_path, is_terminal, open_case, step, Accountability, Branch, BugCase, CaseParams,
    Counter, Counters, Effect, FixOrigin, Guard, LifecycleStage as S, OutcomeKind as O, Resolution,
    StageOutcome, Thresholds, ValidityCategory, Workflow,
};
use buglife_core::model::{ActorId, AgentKind, ArtifactKind, ArtifactRef, CaseId, LogicalClock, Principal, Role};
use buglife_core::persistence::{verify_log, EventRecord, EventStore, PersistError};
use buglife_core::service::{DecisionRequest, ReportSubmission, Service, ServiceConfig, ServiceError, TokenEntry};
use buglife_core::sim::{self, SimConfig};
use parking_lot::Mutex;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------- harness

const DEVELOPERS: usize = 20;

fn tokens() -> Vec<TokenEntry> {
    let entry = |id: &str, roles: &[Role]| TokenEntry {
        token: id.to_string(),
        actor_id: ActorId::new(id),
        roles: roles.to_vec(),
    };
    let mut out = vec![
        entry("alice", &[Role::EndUser]),
        entry("lead", &[Role::ProjectManager]),
        entry("pm2", &[Role::ProjectManager]),
        entry("teamlead", &[Role::TeamLead]),
        entry("support", &[Role::CustomerSupport]),
        entry("reviewer", &[Role::Reviewer]),
        entry("tester", &[Role::Tester]),
        entry("developer-0", &[Role::Developer, Role::Reviewer]),
    ];
    for n in 1..DEVELOPERS {
        out.push(entry(&format!("developer-{n}"), &[Role::Developer]));
    }
    out
}

fn default_token(role: Role) -> &'static str {
    match role {
        Role::EndUser => "alice",
        Role::ProjectManager => "lead",
        Role::TeamLead => "teamlead",
        Role::CustomerSupport => "support",
        Role::Developer => "developer-0",
        Role::Reviewer => "reviewer",
        Role::Tester => "tester",
        Role::Ops => "ops",
    }
}

fn service(agents: Vec<Arc<dyn Agent>>, thresholds: Thresholds, data_dir: Option<&std::path::Path>) -> Service {
    let config = ServiceConfig {
        tokens: tokens(),
        thresholds,
        data_dir: data_dir.map(|p| p.to_path_buf()),
        ..ServiceConfig::default()
    };
    Service::new(config, agents).expect("service starts")
}

/// All-success scripted agents with some kinds replaced.
fn scripted(valid: bool, overrides: Vec<ScriptedAgent>) -> Vec<Arc<dyn Agent>> {
    let mut by_kind: BTreeMap<AgentKind, Arc<dyn Agent>> = BTreeMap::new();
    for a in ScriptedAgent::all_success(valid) {
        by_kind.insert(a.descriptor().kind, Arc::new(a));
    }
    for a in overrides {
        by_kind.insert(a.descriptor().kind, Arc::new(a));
    }
    by_kind.into_values().collect()
}

fn report() -> ReportSubmission {
    ReportSubmission {
        title: "Export drops the last row".into(),
        text: "The CSV export is missing the final row".into(),
        expected_behavior: "Every row is exported".into(),
        steps: "open the report\nclick export".into(),
        environment: [("os".to_string(), "linux".to_string())].into(),
        ..Default::default()
    }
}

/// The action an approve-everything human takes at each stage.
fn approving(stage: buglife_core::kernel::LifecycleStage) -> StageOutcome {
    StageOutcome::new(match stage {
        S::ManualReproduction => O::Success,
        S::NoCodeVerification => O::Pass,
        S::ManualNoCodeFix => O::Provided,
        S::FixDecision => O::Fix,
        S::AssignmentReview => O::Approve,
        S::DeveloperReview => O::Merge,
        S::ManualFix => O::Submitted,
        S::ReviewerReview => O::Approve,
        S::ManualTesterVerification => O::Pass,
        S::UserVerification => O::Accept,
        other => panic!("no human acts at {other}"),
    })
}

fn token_for(task: &HilTask) -> String {
    task.assignee
        .as_ref()
        .map(|a| a.to_string())
        .unwrap_or_else(|| default_token(task.role).to_string())
}

fn decide(svc: &Service, case: &CaseId, outcome: StageOutcome) -> Result<(), String> {
    let task = svc
        .tasks()
        .open_task(case)
        .ok_or_else(|| format!("{case}: no open task"))?;
    let token = token_for(&task);
    svc.post_decision(
        Some(&token),
        task.task_id,
        &DecisionRequest {
            decision: outcome,
            artifacts: Vec::new(),
        },
    )
    .map(|_| ())
    .map_err(|e| format!("{case}: decision at {} failed: {e}", task.stage))
}

/// Approves every task until the case closes.
fn approve_all(svc: &Service, case: &CaseId) -> Result<(), String> {
    for _ in 0..100 {
        let current = svc.store().current(case).map_err(|e| e.to_string())?;
        if is_terminal(current.stage) {
            return Ok(());
        }
        decide(svc, case, approving(current.stage))?;
    }
    Err(format!("{case} did not close"))
}

fn submit(svc: &Service) -> Result<CaseId, String> {
    svc.submit_report(Some("alice"), &report())
        .map(|v| v.case.case_id)
        .map_err(|e| format!("submit failed: {e}"))
}

fn records(svc: &Service, case: &CaseId) -> Vec<EventRecord> {
    svc.store().records(case).expect("case exists")
}

fn count(records: &[EventRecord], stage: buglife_core::kernel::LifecycleStage, kind: Option<O>) -> usize {
    records
        .iter()
        .skip(1)
        .filter(|r| r.stage_before == stage)
        .filter(|r| kind.is_none_or(|k| r.stage_outcome().map(|o| o.kind) == Some(k)))
        .count()
}

// ------------------------------------------------------ happy-path conformance

fn happy_path_conformance() -> Outcome {
    // Stage sequences read off the lifecycle diagram.
    let valid = [
        S::ReportDialogue,
        S::Enhancement,
        S::AgentReproduction,
        S::Classification,
        S::FeatureTracing,
        S::ValidityCheck,
        S::FixDecision,
        S::AssignmentRecommendation,
        S::AssignmentReview,
        S::Localization,
        S::PatchGeneration,
        S::DeveloperReview,
        S::AgentVerification,
        S::Deployment,
        S::UserVerification,
    ];
    let invalid = [
        S::ReportDialogue,
        S::Enhancement,
        S::AgentReproduction,
        S::Classification,
        S::FeatureTracing,
        S::ValidityCheck,
        S::NoCodeFix,
        S::NoCodeVerification,
        S::UserVerification,
    ];
    for (branch, expected, closed) in [
        (Branch::Valid, &valid[..], Resolution::Resolved),
        (Branch::Invalid, &invalid[..], Resolution::InvalidResolved),
    ] {
        let start = Instant::now();
        let svc = service(scripted(branch == Branch::Valid, vec![]), Thresholds::default(), None);
        let case = submit(&svc)?;
        approve_all(&svc, &case)?;
        let elapsed = start.elapsed();
        let log = records(&svc, &case);
        let stages: Vec<_> = log.iter().skip(1).map(|r| r.stage_before).collect();
        ensure!(stages == expected, "{branch:?}: logged stages {stages:?}");
        let last = svc.store().current(&case).map_err(|e| e.to_string())?.stage;
        ensure!(last == S::Closed(closed), "{branch:?}: ended at {last}");
        let mut kernel_path = expected.to_vec();
        kernel_path.push(S::Closed(closed));
        ensure!(
            happy_path(Workflow::Proposed, branch) == kernel_path,
            "{branch:?}: kernel happy_path disagrees"
        );
        ensure!(elapsed < Duration::from_secs(1), "{branch:?}: took {elapsed:?}");
    }
    ensure!(valid.len() == 15 && invalid.len() + 1 == 10, "stage counts");
    Ok(())
}

// --------------------------------------------------------- escalation laws

fn escalation_laws() -> Outcome {
    let thresholds = Thresholds {
        k_repro: 3,
        k_nocode: 2,
        k_patch_cycle: 4,
        k_agent_verify: 3,
    };

    // Reproduction: the reproducer never succeeds.
    let svc = service(
        scripted(true, vec![ScriptedAgent::repeat(AgentKind::Reproducer, O::Fail)]),
        thresholds,
        None,
    );
    let case = submit(&svc)?;
    let log = records(&svc, &case);
    let fails = count(&log, S::AgentReproduction, Some(O::Fail));
    let enhancements = count(&log, S::Enhancement, None);
    ensure!(fails == 3 && enhancements == 3, "repro: {fails} fails, {enhancements} enhancements");
    let tasks = svc.tasks().tasks_for_case(&case);
    ensure!(
        tasks.len() == 1 && tasks[0].role == Role::CustomerSupport && tasks[0].stage == S::ManualReproduction,
        "repro: tasks {tasks:?}"
    );

    // No-code verification: support keeps rejecting the no-code fix.
    let svc = service(scripted(false, vec![]), thresholds, None);
    let case = submit(&svc)?;
    for _ in 0..thresholds.k_nocode {
        decide(&svc, &case, StageOutcome::new(O::Fail))?;
    }
    let log = records(&svc, &case);
    let fails = count(&log, S::NoCodeVerification, Some(O::Fail));
    let proposals = count(&log, S::NoCodeFix, None);
    ensure!(fails == 2 && proposals == 2, "nocode: {fails} fails, {proposals} proposals");
    let open = svc.tasks().open_task(&case);
    ensure!(
        open.as_ref().is_some_and(|t| t.stage == S::ManualNoCodeFix && t.role == Role::CustomerSupport),
        "nocode: open task {open:?}"
    );

    // Patch cycle: the developer rejects every agent patch.
    let svc = service(scripted(true, vec![]), thresholds, None);
    let case = submit(&svc)?;
    decide(&svc, &case, StageOutcome::new(O::Fix))?;
    decide(&svc, &case, StageOutcome::new(O::Approve))?;
    for _ in 0..thresholds.k_patch_cycle {
        decide(&svc, &case, StageOutcome::new(O::Reject))?;
    }
    let log = records(&svc, &case);
    let rejects = count(&log, S::DeveloperReview, Some(O::Reject));
    let localizations = count(&log, S::Localization, None);
    let patches = count(&log, S::PatchGeneration, None);
    ensure!(
        rejects == 4 && localizations == 4 && patches == 4,
        "patch cycle: {rejects} rejects, {localizations} localizations, {patches} generations"
    );
    let open = svc.tasks().open_task(&case);
    ensure!(
        open.as_ref()
            .is_some_and(|t| t.stage == S::ManualFix && t.assignee == Some(ActorId::new("developer-0"))),
        "patch cycle: open task {open:?}"
    );

    // Agent verification fails under both fix origins.
    let svc = service(
        scripted(true, vec![ScriptedAgent::repeat(AgentKind::Verifier, O::Fail)]),
        thresholds,
        None,
    );
    let case = submit(&svc)?;
    decide(&svc, &case, StageOutcome::new(O::Fix))?;
    decide(&svc, &case, StageOutcome::new(O::Approve))?;
    for _ in 0..thresholds.k_agent_verify {
        decide(&svc, &case, StageOutcome::new(O::Merge))?;
    }
    let log = records(&svc, &case);
    let agent_fails = count(&log, S::AgentVerification, Some(O::Fail));
    let localizations = count(&log, S::Localization, None);
    ensure!(
        agent_fails == 3 && localizations == 3,
        "agent patch: {agent_fails} verification failures, {localizations} localizations"
    );
    let current = svc.store().current(&case).map_err(|e| e.to_string())?;
    ensure!(
        current.stage == S::ManualFix && current.fix_origin == FixOrigin::AgentPatch,
        "agent patch: escalated to {} with {:?}",
        current.stage,
        current.fix_origin
    );
    // Manual regime: a fresh budget, and failures loop back to the developer.
    for _ in 0..thresholds.k_agent_verify {
        decide(&svc, &case, StageOutcome::new(O::Submitted))?;
        decide(&svc, &case, StageOutcome::new(O::Approve))?;
    }
    let log = records(&svc, &case);
    let manual_fails = count(&log, S::AgentVerification, Some(O::Fail)) - agent_fails;
    let manual_fixes = count(&log, S::ManualFix, None);
    let reviews = count(&log, S::ReviewerReview, None);
    ensure!(
        manual_fails == 3 && manual_fixes == 3 && reviews == 3,
        "manual patch: {manual_fails} failures, {manual_fixes} fixes, {reviews} reviews"
    );
    let open = svc.tasks().open_task(&case);
    ensure!(
        open.as_ref()
            .is_some_and(|t| t.stage == S::ManualTesterVerification && t.role == Role::Tester),
        "manual patch: open task {open:?}"
    );
    // Routing between the two rows depends only on fix origin.
    let after: Vec<_> = log
        .windows(2)
        .filter(|w| w[0].stage_before == S::AgentVerification)
        .map(|w| w[1].stage_before)
        .collect();
    ensure!(
        after == [S::Localization, S::Localization, S::ManualFix, S::ManualFix, S::ManualFix],
        "verification routing {after:?}"
    );
    ensure!(
        current_stage(&svc, &case)? == S::ManualTesterVerification,
        "manual patch did not reach tester"
    );
    decide(&svc, &case, StageOutcome::new(O::Pass))?;
    approve_all(&svc, &case)?;
    ensure!(current_stage(&svc, &case)? == S::Closed(Resolution::Resolved), "did not close");
    Ok(())
}

fn current_stage(svc: &Service, case: &CaseId) -> Result<buglife_core::kernel::LifecycleStage, String> {
    Ok(svc.store().current(case).map_err(|e| e.to_string())?.stage)
}

// ------------------------------------------------------- replay determinism

/// Live runs persisted to disk: the happy paths and each escalation loop.
fn fixture_runs(dir: &std::path::Path) -> Result<Vec<(Service, CaseId)>, String> {
    let mut runs = Vec::new();
    for valid in [true, false] {
        let d = dir.join(format!("happy-{valid}"));
        let svc = service(scripted(valid, vec![]), Thresholds::default(), Some(&d));
        let case = submit(&svc)?;
        approve_all(&svc, &case)?;
        runs.push((svc, case));
    }
    let d = dir.join("repro");
    let svc = service(
        scripted(true, vec![ScriptedAgent::sequence(AgentKind::Reproducer, [O::Fail, O::Fail, O::Success])]),
        Thresholds::default(),
        Some(&d),
    );
    let case = submit(&svc)?;
    approve_all(&svc, &case)?;
    runs.push((svc, case));

    let d = dir.join("restart");
    let svc = service(scripted(true, vec![]), Thresholds::default(), Some(&d));
    let case = submit(&svc)?;
    for _ in 0..20 {
        let stage = current_stage(&svc, &case)?;
        if is_terminal(stage) {
            break;
        }
        let restarts = svc.store().current(&case).map_err(|e| e.to_string())?.restart_count;
        let outcome = match stage {
            S::UserVerification if restarts == 0 => StageOutcome::new(O::Reject).with_note("still broken"),
            S::DeveloperReview if restarts == 0 => StageOutcome::new(O::Reject),
            s => approving(s),
        };
        decide(&svc, &case, outcome)?;
    }
    runs.push((svc, case));
    Ok(runs)
}

fn replay_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs = fixture_runs(dir.path())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut mutations = 0usize;
    for (svc, case) in &runs {
        let live = svc.store().current(case).map_err(|e| e.to_string())?;
        let file = std::fs::read_dir(svc.config().data_dir.as_ref().unwrap())
            .map_err(|e| e.to_string())?
            .next()
            .ok_or("no log file")?
            .map_err(|e| e.to_string())?
            .path();
        let bytes = std::fs::read(&file).map_err(|e| e.to_string())?;
        let (records, replayed) = verify_log(&bytes).map_err(|e| format!("{case}: {e}"))?;
        ensure!(replayed == live, "{case}: replay differs from live state");
        let reopened = EventStore::open_dir(file.parent().unwrap(), Arc::new(LogicalClock::default()))
            .map_err(|e| e.to_string())?;
        ensure!(
            reopened.current(case).map_err(|e| e.to_string())? == live,
            "{case}: reopened store differs"
        );

        let exported = svc.store().export_log(case).map_err(|e| e.to_string())?;
        ensure!(exported.as_bytes() == bytes.as_slice(), "{case}: export differs from file");
        let other = EventStore::in_memory(Arc::new(LogicalClock::default()));
        other.import_log(exported.as_bytes()).map_err(|e| e.to_string())?;
        let again = other.export_log(case).map_err(|e| e.to_string())?;
        ensure!(again == exported, "{case}: export/import/export not byte-identical");

        // Line index of every byte; record seq equals line index.
        let mut line_of = Vec::with_capacity(bytes.len());
        let mut line = 0u64;
        for b in &bytes {
            line_of.push(line);
            if *b == b'\n' {
                line += 1;
            }
        }
        ensure!(line as usize == records.len(), "{case}: one line per record");
        for pos in 0..bytes.len() {
            let flips = [0x01u8, rng.random_range(1..=255u8)];
            for flip in flips {
                let mut mutated = bytes.clone();
                mutated[pos] ^= flip;
                mutations += 1;
                match verify_log(&mutated) {
                    Err(PersistError::CorruptChain { seq, .. }) if seq == line_of[pos] => {}
                    other => {
                        return Err(format!(
                            "{case}: byte {pos} ^ {flip:#04x} (line {}) gave {:?}",
                            line_of[pos],
                            other.map(|(r, _)| r.len())
                        ))
                    }
                }
            }
        }
    }
    println!("      {} logs, {mutations} single-byte mutations rejected", runs.len());
    Ok(())
}

// ---------------------------------------------------------- oracle agreement

fn repro_half() -> SimConfig {
    let mut c = SimConfig::new(Workflow::Proposed);
    c.thresholds = Thresholds::uniform(3);
    c.success_prob.insert(S::AgentReproduction, 0.5);
    c
}

fn oracle_agreement() -> Outcome {
    let start = Instant::now();
    // Outcome prefixes at reproduction: S, FS, FFS, FFF.
    let prefixes: [(&str, f64); 4] = [("S", 0.5), ("FS", 0.25), ("FFS", 0.125), ("FFF", 0.125)];
    let attempts: f64 = prefixes.iter().map(|(p, w)| p.len() as f64 * w).sum();
    let escalation: f64 = prefixes.iter().filter(|(p, _)| !p.contains('S')).map(|(_, w)| w).sum();
    ensure!(attempts == 1.75 && escalation == 0.125, "oracle arithmetic");

    let config = repro_half();
    let exact = sim::enumerate_exact(&config, sim::DEFAULT_PATH_BOUND).map_err(|e| e.to_string())?;
    let ea = exact.agent_attempts[&Counter::Repro];
    let ee = exact.escalation_rates[&Counter::Repro];
    ensure!(ea == attempts, "exact attempts {ea}");
    ensure!(ee == escalation, "exact escalation {ee}");

    let mut config = repro_half();
    config.replications = 100_000;
    config.seed = 20_240_601;
    let first = sim::simulate(&config).map_err(|e| e.to_string())?;
    let sa = first.agent_attempts[&Counter::Repro];
    let se = first.escalation_rates[&Counter::Repro];
    ensure!((sa - attempts).abs() <= 0.02 * attempts, "simulated attempts {sa}");
    ensure!((se - escalation).abs() <= 0.005, "simulated escalation {se}");
    let second = sim::simulate(&config).map_err(|e| e.to_string())?;
    let bits = |m: &sim::SimMetrics| serde_json::to_string(m).unwrap();
    ensure!(first == second && bits(&first) == bits(&second), "seeded runs differ");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    println!("      simulated attempts {sa:.5}, escalation {se:.5} in {elapsed:.2?}");
    Ok(())
}

// ------------------------------------------------ coordination-overhead direction

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Who {
    Agent,
    Person(Role),
}

/// Handoffs and human touches along a sequence of actors.
fn overhead(actors: &[Who]) -> (u32, u32) {
    let handoffs = actors.windows(2).filter(|w| w[0] != w[1]).count() as u32;
    let touches = actors.iter().filter(|a| matches!(a, Who::Person(_))).count() as u32;
    (handoffs, touches)
}

fn coordination_overhead() -> Outcome {
    use Who::{Agent as A, Person as P};
    // Who performs each happy-path stage in the two lifecycle diagrams.
    let proposed_valid = [
        A, A, A, A, A, A,
        P(Role::ProjectManager),
        A,
        P(Role::TeamLead),
        A, A,
        P(Role::Developer),
        A, A,
        P(Role::EndUser),
    ];
    let traditional_valid = [
        P(Role::EndUser),
        P(Role::CustomerSupport),
        P(Role::CustomerSupport),
        P(Role::CustomerSupport),
        P(Role::CustomerSupport),
        P(Role::ProjectManager),
        P(Role::TeamLead),
        P(Role::Developer),
        P(Role::Developer),
        P(Role::Reviewer),
        P(Role::Tester),
        P(Role::Ops),
        P(Role::EndUser),
    ];
    let (ph, pt) = overhead(&proposed_valid);
    let (th, tt) = overhead(&traditional_valid);
    ensure!((ph, pt, th, tt) == (7, 4, 8, 13), "enumeration ({ph},{pt}) vs ({th},{tt})");

    let mut traditional = SimConfig::new(Workflow::Traditional);
    let mut proposed = SimConfig::new(Workflow::Proposed);
    traditional.replications = 50;
    proposed.replications = 50;
    let cmp = sim::compare(&traditional, &proposed).map_err(|e| e.to_string())?;
    ensure!(cmp.delta.hil_touches < 0.0, "touch delta {}", cmp.delta.hil_touches);
    ensure!(cmp.delta.handoffs < 0.0, "handoff delta {}", cmp.delta.handoffs);
    ensure!(
        cmp.a.handoffs == f64::from(th) && cmp.a.hil_touches == f64::from(tt),
        "traditional simulated {} / {}",
        cmp.a.handoffs,
        cmp.a.hil_touches
    );
    ensure!(
        cmp.b.handoffs == f64::from(ph) && cmp.b.hil_touches == f64::from(pt),
        "proposed simulated {} / {}",
        cmp.b.handoffs,
        cmp.b.hil_touches
    );

    // With the default 20% invalid mix the direction holds in expectation.
    let proposed_invalid = [A, A, A, A, A, A, A, P(Role::CustomerSupport), P(Role::EndUser)];
    let mut traditional_invalid = vec![P(Role::EndUser)];
    traditional_invalid.extend([P(Role::CustomerSupport); 6]);
    traditional_invalid.push(P(Role::EndUser));
    let mix = 0.2;
    let expect = |v: (u32, u32), i: (u32, u32)| {
        (
            (1.0 - mix) * f64::from(v.0) + mix * f64::from(i.0),
            (1.0 - mix) * f64::from(v.1) + mix * f64::from(i.1),
        )
    };
    let pe = expect((ph, pt), overhead(&proposed_invalid));
    let te = expect((th, tt), overhead(&traditional_invalid));
    let pd = sim::default_proposed_config();
    let td = sim::default_traditional_config();
    let pex = sim::enumerate_exact(&pd, sim::DEFAULT_PATH_BOUND).map_err(|e| e.to_string())?;
    let tex = sim::enumerate_exact(&td, sim::DEFAULT_PATH_BOUND).map_err(|e| e.to_string())?;
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    ensure!(
        close(pex.handoffs, pe.0) && close(pex.hil_touches, pe.1),
        "proposed mix {:?} vs {pe:?}",
        (pex.handoffs, pex.hil_touches)
    );
    ensure!(
        close(tex.handoffs, te.0) && close(tex.hil_touches, te.1),
        "traditional mix {:?} vs {te:?}",
        (tex.handoffs, tex.hil_touches)
    );
    ensure!(pe.0 < te.0 && pe.1 < te.1, "mixed direction");
    Ok(())
}

// --------------------------------------------------- kernel totality and safety

fn guard_holds(guard: Guard, counters: &Counters, thresholds: &Thresholds, origin: FixOrigin) -> bool {
    let value = |c: Counter| counters.get(c);
    let limit = |c: Counter| thresholds.limit(c);
    match guard {
        Guard::Always => true,
        Guard::Below(c) => value(c) < limit(c),
        Guard::Reached(c) => value(c) == limit(c),
        Guard::BelowWith(c, o) => value(c) < limit(c) && origin == o,
        Guard::ReachedWith(c, o) => value(c) == limit(c) && origin == o,
    }
}

fn base_case(workflow: Workflow, thresholds: Thresholds) -> BugCase {
    open_case(CaseParams {
        case_id: CaseId::new("fuzz"),
        workflow,
        report_ref: ArtifactRef {
            kind: ArtifactKind::OriginalReport,
            version: 1,
        },
        thresholds,
        accountability: Accountability::default(),
    })
    .unwrap()
}

fn with_payload(case: &BugCase, kind: O, rng: &mut ChaCha8Rng) -> StageOutcome {
    let mut o = StageOutcome::new(kind);
    match kind {
        O::Invalid => {
            let cats = [
                ValidityCategory::UserError,
                ValidityCategory::ConfigurationError,
                ValidityCategory::Duplicate,
            ];
            o = o.with_category(*cats.choose(rng).unwrap());
        }
        O::Recommended | O::Override => o = o.with_developer(format!("developer-{}", rng.random_range(0..DEVELOPERS))),
        O::Approve if case.stage == S::AssignmentReview => {
            o = o.with_developer(format!("developer-{}", rng.random_range(0..DEVELOPERS)))
        }
        _ => {}
    }
    o
}

/// Abstract state that decides which row fires.
type Valuation = (buglife_core::kernel::LifecycleStage, Counters, FixOrigin);

fn reachable(workflow: Workflow, thresholds: Thresholds) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut frontier = vec![base_case(workflow, thresholds)];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    while let Some(case) = frontier.pop() {
        let key: Valuation = (case.stage, case.counters, case.fix_origin);
        if !seen.insert(format!("{key:?}")) || is_terminal(case.stage) || case.restart_count > 0 {
            continue;
        }
        for kind in workflow.legal_outcomes(case.stage) {
            let outcome = with_payload(&case, kind, &mut rng);
            frontier.push(step(&case, &outcome).expect("reachable states route").0);
        }
    }
    seen
}

fn kernel_totality() -> Outcome {
    let thresholds = Thresholds {
        k_repro: 2,
        k_nocode: 3,
        k_patch_cycle: 2,
        k_agent_verify: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut triples = 0usize;
    for workflow in [Workflow::Proposed, Workflow::Traditional] {
        let reachable = reachable(workflow, thresholds);
        let mut reached_checked = 0usize;
        for stage in workflow.stages() {
            for kind in workflow.legal_outcomes(stage) {
                for origin in [FixOrigin::None, FixOrigin::AgentPatch, FixOrigin::ManualPatch] {
                    for values in 0..(4u32.pow(4)) {
                        let counters = Counters {
                            repro_count: values % 4,
                            nocode_verify_count: values / 4 % 4,
                            patch_cycle_count: values / 16 % 4,
                            agent_verify_count: values / 64 % 4,
                        };
                        if Counter::ALL.iter().any(|c| counters.get(*c) > thresholds.limit(*c)) {
                            continue;
                        }
                        triples += 1;
                        let mut case = base_case(workflow, thresholds);
                        case.stage = stage;
                        case.counters = counters;
                        case.fix_origin = origin;
                        case.proposed_assignee = Some(ActorId::new("developer-0"));
                        let firing: Vec<_> = workflow
                            .rows()
                            .iter()
                            .filter(|r| r.from == stage && r.outcome == kind)
                            .filter(|r| {
                                let mut bumped = counters;
                                if let Some(c) = r.bump {
                                    *bumped.slot(c) += 1;
                                }
                                guard_holds(r.guard, &bumped, &thresholds, origin)
                            })
                            .collect();
                        ensure!(firing.len() <= 1, "{workflow:?} {stage} {kind:?}: {} rows fire", firing.len());
                        let outcome = with_payload(&case, kind, &mut rng);
                        let kernel = fired_row(&case, &outcome);
                        let key = format!("{:?}", (stage, counters, origin));
                        if reachable.contains(&key) {
                            reached_checked += 1;
                            ensure!(firing.len() == 1, "{key} {kind:?}: no row fires");
                            ensure!(
                                kernel.as_ref().is_ok_and(|r| std::ptr::eq(*r, firing[0])),
                                "{key} {kind:?}: kernel fired a different row"
                            );
                        } else if firing.is_empty() {
                            ensure!(kernel.is_err(), "{key} {kind:?}: kernel invented a row");
                        }
                    }
                }
            }
        }
        ensure!(reached_checked > 0, "{workflow:?}: nothing reachable");
    }

    let sequences = 100_000;
    let mut steps = 0usize;
    for n in 0..sequences {
        let workflow = if n % 2 == 0 { Workflow::Proposed } else { Workflow::Traditional };
        let mut case = base_case(workflow, thresholds);
        let mut past_validity = false;
        for _ in 0..120 {
            if is_terminal(case.stage) {
                break;
            }
            let legal = workflow.legal_outcomes(case.stage);
            ensure!(!legal.is_empty(), "{workflow:?}: no outcomes at {}", case.stage);
            let kind = *legal.choose(&mut rng).unwrap();
            let outcome = with_payload(&case, kind, &mut rng);
            let before = case.stage;
            case = step(&case, &outcome)
                .map_err(|e| format!("{workflow:?}: {before} --{kind:?}--> undefined: {e}"))?
                .0;
            steps += 1;
            for c in Counter::ALL {
                ensure!(
                    case.counters.get(c) <= thresholds.limit(c),
                    "{c:?} exceeded its bound at {}",
                    case.stage
                );
            }
            if before == S::ValidityCheck {
                past_validity = true;
            }
            if case.stage == S::ReportDialogue {
                past_validity = false;
            }
            ensure!(
                !past_validity || case.responsible_human.is_some(),
                "{workflow:?}: no responsible human at {}",
                case.stage
            );
        }
    }
    println!("      {triples} (stage, outcome, valuation) triples, {sequences} sequences / {steps} steps");
    Ok(())
}

// ------------------------------------------------------- assigner properties

fn random_scored(rng: &mut ChaCha8Rng) -> Vec<(ActorId, f64, u32)> {
    let n = rng.random_range(1..12);
    let mut ids: Vec<usize> = (0..40).collect();
    ids.shuffle(rng);
    ids.truncate(n);
    ids.into_iter()
        .map(|i| {
            (
                ActorId::new(format!("dev-{i:02}")),
                f64::from(rng.random_range(0..=16u32)) / 16.0,
                rng.random_range(0..6),
            )
        })
        .collect()
}

fn random_terms(rng: &mut ChaCha8Rng) -> BTreeSet<String> {
    (0..rng.random_range(0..10))
        .map(|_| format!("t{}", rng.random_range(0..15)))
        .collect()
}

fn assigner_properties() -> Outcome {
    let trials = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let sim_only = Weights { w_sim: 1.0, w_load: 0.0 };
    for t in 0..trials {
        // Positive scaling of every similarity keeps the winner.
        let scored = random_scored(&mut rng);
        let factor = [0.25, 0.5, 2.0, 4.0, 8.0][t % 5];
        let scaled: Vec<_> = scored.iter().map(|(d, s, l)| (d.clone(), s * factor, *l)).collect();
        let a = rank_scored(&scored, sim_only).map_err(|e| e.to_string())?;
        let b = rank_scored(&scaled, sim_only).map_err(|e| e.to_string())?;
        ensure!(a[0].dev == b[0].dev, "scaling by {factor} moved the winner");
        // the winner is the lexicographically first of the best
        let best = scored.iter().map(|x| x.1).fold(f64::MIN, f64::max);
        let expected = scored.iter().filter(|x| x.1 == best).map(|x| x.0.clone()).min().unwrap();
        ensure!(a[0].dev == expected, "winner {} not {expected}", a[0].dev);

        // More workload never helps a candidate.
        let weights = Weights {
            w_sim: rng.random_range(0.0..1.0),
            w_load: rng.random_range(0.01..1.0),
        };
        let before = rank_scored(&scored, weights).map_err(|e| e.to_string())?;
        let i = rng.random_range(0..scored.len());
        let mut busier = scored.clone();
        busier[i].2 += rng.random_range(1..4);
        let after = rank_scored(&busier, weights).map_err(|e| e.to_string())?;
        let pos = |r: &[buglife_core::agents::triage::RankedCandidate]| {
            r.iter().position(|c| c.dev == scored[i].0).unwrap()
        };
        let score = |r: &[buglife_core::agents::triage::RankedCandidate]| r[pos(r)].score;
        ensure!(pos(&after) >= pos(&before), "busier candidate moved up");
        ensure!(score(&after) <= score(&before), "busier candidate scored higher");

        // Jaccard similarity is symmetric and bounded.
        let (x, y) = (random_terms(&mut rng), random_terms(&mut rng));
        let sxy = similarity(&x, &y);
        ensure!(sxy == similarity(&y, &x), "asymmetric similarity");
        ensure!((0.0..=1.0).contains(&sxy), "similarity {sxy} out of bounds");
        let union = x.union(&y).count();
        let oracle = if union == 0 { 0.0 } else { x.intersection(&y).count() as f64 / union as f64 };
        ensure!((sxy - oracle).abs() < 1e-12, "similarity {sxy} vs {oracle}");
        if !x.is_empty() {
            ensure!(similarity(&x, &x) == 1.0, "self-similarity");
        }

        // Full ties break lexicographically regardless of input order.
        let mut tied: Vec<_> = scored.iter().map(|(d, _, _)| (d.clone(), 0.5, 2)).collect();
        tied.shuffle(&mut rng);
        let ranked = rank_scored(&tied, weights).map_err(|e| e.to_string())?;
        let order: Vec<_> = ranked.iter().map(|r| r.dev.clone()).collect();
        let mut sorted = order.clone();
        sorted.sort();
        ensure!(order == sorted, "ties not in lexicographic order");
    }
    println!("      {trials} trials per property");
    Ok(())
}

// ------------------------------------------------------ broker audit completeness

struct Counting {
    inner: Arc<dyn Agent>,
    reads: AtomicUsize,
    writes: AtomicUsize,
}

impl Agent for Counting {
    fn descriptor(&self) -> &AgentDescriptor {
        self.inner.descriptor()
    }

    fn invoke(&self, request: &AgentRequest) -> Result<AgentResponse, AgentError> {
        self.reads.fetch_add(request.artifacts.len(), Ordering::SeqCst);
        let response = self.inner.invoke(request)?;
        self.writes.fetch_add(response.produced_artifacts.len(), Ordering::SeqCst);
        Ok(response)
    }
}

fn broker_audit() -> Outcome {
    let counting: Vec<Arc<Counting>> = scripted(
        true,
        vec![ScriptedAgent::sequence(AgentKind::Reproducer, [O::Fail, O::Fail, O::Success])],
    )
    .into_iter()
    .map(|inner| {
        Arc::new(Counting {
            inner,
            reads: AtomicUsize::new(0),
            writes: AtomicUsize::new(0),
        })
    })
    .collect();
    let agents: Vec<Arc<dyn Agent>> = counting.iter().map(|c| c.clone() as Arc<dyn Agent>).collect();
    let svc = service(agents, Thresholds::default(), None);
    let submission = report();
    let original = serde_json::to_vec(&submission.to_report()).unwrap();
    let original_hash = hex_sha256(&original);
    let case = svc
        .submit_report(Some("alice"), &submission)
        .map_err(|e| e.to_string())?
        .case
        .case_id;
    let mut human_reads = 0;
    svc.get_artifact(Some("alice"), &case, ArtifactKind::OriginalReport, Some(1))
        .map_err(|e| e.to_string())?;
    human_reads += 1;
    approve_all(&svc, &case)?;
    svc.get_artifact(Some("alice"), &case, ArtifactKind::EnhancedReport, None)
        .map_err(|e| e.to_string())?;
    human_reads += 1;

    let localizer = svc.broker().active_agent(AgentKind::Localizer).ok_or("no localizer")?;
    let denied = svc
        .broker()
        .put_artifact(&case, ArtifactKind::OriginalReport, "rewritten", &Principal::Agent(localizer.clone()));
    ensure!(denied.is_err(), "localizer wrote the original report");
    let outsider = Principal::human(ActorId::new("outsider"), Role::Ops);
    ensure!(
        svc.broker()
            .get_artifact(&case, ArtifactKind::OriginalReport, &outsider, None)
            .is_err(),
        "outsider read the report"
    );
    let denials = 2;
    let human_writes = 1;

    let agent_reads: usize = counting.iter().map(|c| c.reads.load(Ordering::SeqCst)).sum();
    let agent_writes: usize = counting.iter().map(|c| c.writes.load(Ordering::SeqCst)).sum();
    let provenance = svc.broker().provenance(&case).map_err(|e| e.to_string())?;
    let by_access = |a: Access| provenance.iter().filter(|p| p.access == a).count();
    ensure!(
        provenance.len() == agent_reads + human_reads + agent_writes + human_writes + denials,
        "provenance {} vs reads {agent_reads}+{human_reads}, writes {agent_writes}+{human_writes}, denials {denials}",
        provenance.len()
    );
    ensure!(by_access(Access::Read) == agent_reads + human_reads, "read entries");
    ensure!(by_access(Access::Write) == agent_writes + human_writes, "write entries");
    ensure!(by_access(Access::Denied) == denials, "denied entries");
    let seqs: Vec<u64> = provenance.iter().map(|p| p.seq).collect();
    ensure!(seqs == (1..=provenance.len() as u64).collect::<Vec<_>>(), "provenance seq has gaps");
    let localizer_denial = provenance.iter().any(|p| {
        p.access == Access::Denied
            && p.kind == ArtifactKind::OriginalReport
            && p.actor == Principal::Agent(localizer.clone())
            && p.artifact_id.is_none()
    });
    ensure!(localizer_denial, "localizer denial not logged");
    let ids: BTreeSet<String> = svc
        .broker()
        .records(&case)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|r| r.artifact_id.clone())
        .collect();
    ensure!(
        provenance
            .iter()
            .filter(|p| p.access != Access::Denied)
            .all(|p| p.artifact_id.as_ref().is_some_and(|id| ids.contains(id))),
        "provenance names an unknown artifact"
    );

    let enhanced = svc.broker().version_count(&case, ArtifactKind::EnhancedReport).map_err(|e| e.to_string())?;
    ensure!(enhanced == 3, "{enhanced} enhanced versions after two reproduction failures");
    let v1 = svc
        .get_artifact(Some("alice"), &case, ArtifactKind::OriginalReport, Some(1))
        .map_err(|e| e.to_string())?;
    ensure!(v1.content == original, "original report v1 changed");
    ensure!(v1.content_hash == original_hash, "original report hash changed");
    ensure!(
        svc.broker().version_count(&case, ArtifactKind::OriginalReport).map_err(|e| e.to_string())? == 1,
        "extra original report versions"
    );
    Ok(())
}

fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

// ------------------------------------------------------------ HIL integrity

/// Agent choosing uniformly among the legal outcomes of its stage.
struct RandomAgent {
    descriptor: AgentDescriptor,
    rng: Mutex<ChaCha8Rng>,
}

impl Agent for RandomAgent {
    fn descriptor(&self) -> &AgentDescriptor {
        &self.descriptor
    }

    fn invoke(&self, request: &AgentRequest) -> Result<AgentResponse, AgentError> {
        let mut rng = self.rng.lock();
        let kind = if request.stage == S::ReportDialogue {
            O::Sufficient
        } else {
            *request.workflow.legal_outcomes(request.stage).choose(&mut *rng).unwrap()
        };
        let mut case = base_case(request.workflow, request.thresholds);
        case.stage = request.stage;
        Ok(AgentResponse {
            outcome: with_payload(&case, kind, &mut rng),
            produced_artifacts: Vec::new(),
            rationale: String::new(),
        })
    }
}

fn hil_integrity() -> Outcome {
    // Every CreateHilTask effect has exactly one task and vice versa.
    let agents: Vec<Arc<dyn Agent>> = AgentKind::ALL
        .into_iter()
        .map(|kind| {
            Arc::new(RandomAgent {
                descriptor: AgentDescriptor::new(format!("random-{kind}"), kind, 1),
                rng: Mutex::new(ChaCha8Rng::seed_from_u64(kind as u64)),
            }) as Arc<dyn Agent>
        })
        .collect();
    let svc = service(agents, Thresholds::default(), None);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut effects_seen = 0usize;
    for _ in 0..300 {
        let case = submit(&svc)?;
        for _ in 0..150 {
            let Some(task) = svc.tasks().open_task(&case) else { break };
            let kind = *task.action_set.choose(&mut rng).unwrap();
            let current = svc.store().current(&case).map_err(|e| e.to_string())?;
            let outcome = with_payload(&current, kind, &mut rng);
            decide(&svc, &case, outcome)?;
        }
        let log = records(&svc, &case);
        let from_effects: BTreeSet<(u64, Role, String)> = log
            .iter()
            .flat_map(|r| {
                let stage_after = next_stage(&log, r.seq);
                r.effects.iter().filter_map(move |e| match e {
                    Effect::CreateHilTask { role, .. } => Some((r.seq, *role, format!("{stage_after}"))),
                    _ => None,
                })
            })
            .collect();
        let tasks = svc.tasks().tasks_for_case(&case);
        let from_tasks: BTreeSet<(u64, Role, String)> = tasks
            .iter()
            .map(|t| (t.source_seq, t.role, format!("{}", t.stage)))
            .collect();
        ensure!(tasks.len() == from_tasks.len(), "{case}: duplicate tasks");
        ensure!(from_effects == from_tasks, "{case}: effects {from_effects:?} vs tasks {from_tasks:?}");
        effects_seen += from_effects.len();
    }

    // A developer who wrote the fix cannot review it.
    let svc = service(scripted(true, vec![]), Thresholds::uniform(1), None);
    let case = submit(&svc)?;
    decide(&svc, &case, StageOutcome::new(O::Fix))?;
    decide(&svc, &case, StageOutcome::new(O::Approve))?;
    decide(&svc, &case, StageOutcome::new(O::Reject))?;
    ensure!(current_stage(&svc, &case)? == S::ManualFix, "did not escalate to manual fix");
    decide(&svc, &case, StageOutcome::new(O::Submitted))?;
    let review = svc.tasks().open_task(&case).ok_or("no review task")?;
    let err = svc.post_decision(
        Some("developer-0"),
        review.task_id,
        &DecisionRequest {
            decision: StageOutcome::new(O::Approve),
            artifacts: Vec::new(),
        },
    );
    ensure!(
        matches!(err, Err(ServiceError::Hil(HilError::SelfReview(_)))),
        "self review gave {err:?}"
    );
    decide(&svc, &case, StageOutcome::new(O::Approve))?;

    // Two managers decide the same task at once.
    let svc = service(scripted(true, vec![]), Thresholds::default(), None);
    let races = 100;
    for _ in 0..races {
        let case = submit(&svc)?;
        let task = svc.tasks().open_task(&case).ok_or("no task")?;
        let barrier = Barrier::new(2);
        let results: Vec<Result<(), ServiceError>> = std::thread::scope(|s| {
            let handles: Vec<_> = [("lead", O::Fix), ("pm2", O::WontFix)]
                .into_iter()
                .map(|(token, kind)| {
                    let (svc, barrier) = (&svc, &barrier);
                    s.spawn(move || {
                        barrier.wait();
                        svc.post_decision(
                            Some(token),
                            task.task_id,
                            &DecisionRequest {
                                decision: StageOutcome::new(kind),
                                artifacts: Vec::new(),
                            },
                        )
                        .map(|_| ())
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let ok = results.iter().filter(|r| r.is_ok()).count();
        let stale = results
            .iter()
            .filter(|r| matches!(r, Err(ServiceError::Hil(HilError::StaleTask(_)))))
            .count();
        ensure!(ok == 1 && stale == 1, "{case}: race gave {results:?}");
        ensure!(records(&svc, &case).iter().filter(|r| r.stage_before == S::FixDecision).count() == 1, "{case}: double append");
    }
    println!("      {effects_seen} task effects matched, {races} races");
    Ok(())
}

/// Stage entered by the record with `seq`.
fn next_stage(log: &[EventRecord], seq: u64) -> buglife_core::kernel::LifecycleStage {
    match log.get(seq as usize + 1) {
        Some(next) => next.stage_before,
        None => buglife_core::persistence::fold(log).unwrap().stage,
    }
}

// ------------------------------------------------------------------ runner

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("happy-path conformance", happy_path_conformance),
        ("escalation laws", escalation_laws),
        ("replay determinism", replay_determinism),
        ("oracle agreement", oracle_agreement),
        ("coordination-overhead direction", coordination_overhead),
        ("kernel totality and safety", kernel_totality),
        ("assigner properties", assigner_properties),
        ("broker audit completeness", broker_audit),
        ("HIL integrity", hil_integrity),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(()) => println!("PASS  {name} ({secs:.2}s)"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.2}s): {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
