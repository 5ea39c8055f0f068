//! Discrete-event simulation of both workflows and an exact path oracle.
//!
//! A case walks the kernel table one stage at a time. Each stage first
//! consumes its latency. Human stages other than the reporter's then queue
//! FIFO for a server from their role's pool and consume a service time.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{
    fired_row, is_terminal, open_case, scripted_outcome, Accountability, BugCase, CaseParams,
    Counter, LifecycleStage, OutcomeKind, StageActor, Thresholds, Workflow,
};
use crate::model::{ArtifactKind, ArtifactRef, CaseId, Role};

pub const DEFAULT_PATH_BOUND: usize = 1_000_000;
/// Deepest path the oracle will follow before giving up.
pub const MAX_PATH_DEPTH: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("path space exceeds {bound} paths")]
    PathSpaceTooLarge { bound: usize },
    #[error("configs are not comparable: {0}")]
    IncomparableConfigs(String),
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidConfig(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dist {
    Constant(f64),
    Exponential { mean: f64 },
}

impl Dist {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Dist::Constant(x) => x,
            Dist::Exponential { mean } if mean == 0.0 => 0.0,
            Dist::Exponential { mean } => Exp::new(1.0 / mean).expect("validated mean").sample(rng),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Dist::Constant(x) => x,
            Dist::Exponential { mean } => mean,
        }
    }

    /// The single value of a finite-support distribution.
    pub fn constant(&self) -> Option<f64> {
        match *self {
            Dist::Constant(x) => Some(x),
            Dist::Exponential { mean } if mean == 0.0 => Some(0.0),
            Dist::Exponential { .. } => None,
        }
    }

    fn validate(&self, what: &str) -> Result<(), SimError> {
        let v = self.mean();
        if v.is_finite() && v >= 0.0 {
            Ok(())
        } else {
            Err(invalid(format!("{what} must be finite and non-negative, got {v}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arrivals {
    pub count: u32,
    pub inter_arrival: Dist,
}

impl Default for Arrivals {
    fn default() -> Self {
        Self {
            count: 1,
            inter_arrival: Dist::Constant(0.0),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn unit_latency() -> Dist {
    Dist::Constant(1.0)
}

fn two() -> u32 {
    2
}

fn one_rep() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub workflow: Workflow,
    /// Probability the success outcome is taken at a stage.
    #[serde(default)]
    pub success_prob: BTreeMap<LifecycleStage, f64>,
    #[serde(default = "one")]
    pub default_success_prob: f64,
    #[serde(default)]
    pub latency: BTreeMap<LifecycleStage, Dist>,
    #[serde(default = "unit_latency")]
    pub default_latency: Dist,
    /// Servers per role; roles not listed get one.
    #[serde(default)]
    pub human_pools: BTreeMap<Role, u32>,
    /// Roles not listed serve instantly.
    #[serde(default)]
    pub human_service_time: BTreeMap<Role, Dist>,
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Fraction of cases that are invalid.
    #[serde(default)]
    pub validity_mix: f64,
    #[serde(default)]
    pub arrivals: Arrivals,
    #[serde(default = "two")]
    pub restart_cap: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one_rep")]
    pub replications: u32,
}

impl SimConfig {
    pub fn new(workflow: Workflow) -> Self {
        Self {
            workflow,
            success_prob: BTreeMap::new(),
            default_success_prob: 1.0,
            latency: BTreeMap::new(),
            default_latency: unit_latency(),
            human_pools: BTreeMap::new(),
            human_service_time: BTreeMap::new(),
            thresholds: Thresholds::default(),
            validity_mix: 0.0,
            arrivals: Arrivals::default(),
            restart_cap: 2,
            seed: 0,
            replications: 1,
        }
    }

    pub fn success_prob(&self, stage: LifecycleStage) -> f64 {
        self.success_prob
            .get(&stage)
            .copied()
            .unwrap_or(self.default_success_prob)
    }

    pub fn latency(&self, stage: LifecycleStage) -> Dist {
        self.latency.get(&stage).copied().unwrap_or(self.default_latency)
    }

    pub fn pool(&self, role: Role) -> u32 {
        self.human_pools.get(&role).copied().unwrap_or(1)
    }

    pub fn service_time(&self, role: Role) -> Dist {
        self.human_service_time
            .get(&role)
            .copied()
            .unwrap_or(Dist::Constant(0.0))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let prob = |what: String, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(invalid(format!("{what} must lie in [0,1], got {p}")))
            }
        };
        prob("default_success_prob".into(), self.default_success_prob)?;
        for (stage, p) in &self.success_prob {
            if is_terminal(*stage) {
                return Err(invalid(format!("success_prob given for terminal stage {stage}")));
            }
            prob(format!("success_prob[{stage}]"), *p)?;
        }
        prob("validity_mix".into(), self.validity_mix)?;
        self.default_latency.validate("default_latency")?;
        for (stage, d) in &self.latency {
            d.validate(&format!("latency[{stage}]"))?;
        }
        for (role, d) in &self.human_service_time {
            d.validate(&format!("human_service_time[{role}]"))?;
        }
        for (role, n) in &self.human_pools {
            if *n == 0 {
                return Err(invalid(format!("human_pools[{role}] must be at least 1")));
            }
        }
        self.arrivals.inter_arrival.validate("arrivals.inter_arrival")?;
        if self.arrivals.count == 0 {
            return Err(invalid("arrivals.count must be at least 1"));
        }
        if self.replications == 0 {
            return Err(invalid("replications must be at least 1"));
        }
        self.thresholds
            .validate()
            .map_err(|e| invalid(format!("thresholds: {e}")))
    }
}

/// Who acted at a trace entry: the agent fleet as one party, or a role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Party {
    Agents,
    Human(Role),
}

impl Party {
    pub fn of(workflow: Workflow, stage: LifecycleStage) -> Party {
        match workflow.stage_actor(stage) {
            Some(StageActor::Human(role)) => Party::Human(role),
            _ => Party::Agents,
        }
    }

    pub fn is_human(self) -> bool {
        matches!(self, Party::Human(_))
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Agents => f.write_str("Agents"),
            Party::Human(role) => write!(f, "{role}"),
        }
    }
}

impl Serialize for Party {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Party {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "Agents" {
            return Ok(Party::Agents);
        }
        Role::parse(&s)
            .map(Party::Human)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown actor {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Time the stage was entered.
    pub time: f64,
    pub stage: LifecycleStage,
    pub actor: Party,
    pub outcome: OutcomeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTrace {
    pub replication: u32,
    pub case: u32,
    pub invalid: bool,
    pub arrival: f64,
    pub closed_at: f64,
    pub final_stage: LifecycleStage,
    pub entries: Vec<TraceEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TtrStats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub workflow: Workflow,
    pub replications: u32,
    pub cases: u64,
    pub ttr: TtrStats,
    /// Mean party changes per case.
    pub handoffs: f64,
    /// Mean human-performed stages per case.
    pub hil_touches: f64,
    /// Mean visits per case to each looped stage.
    pub agent_attempts: BTreeMap<Counter, f64>,
    /// Mean escalations per case out of each looped stage.
    pub escalation_rates: BTreeMap<Counter, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactMetrics {
    pub workflow: Workflow,
    pub paths: usize,
    pub ttr: TtrStats,
    pub handoffs: f64,
    pub hil_touches: f64,
    pub agent_attempts: BTreeMap<Counter, f64>,
    pub escalation_rates: BTreeMap<Counter, f64>,
}

fn counter_at(stage: LifecycleStage) -> Option<Counter> {
    Counter::ALL.into_iter().find(|c| c.stage() == stage)
}

fn slot(c: Counter) -> usize {
    Counter::ALL.iter().position(|x| *x == c).expect("listed counter")
}

fn fresh_case(config: &SimConfig, index: u32) -> Result<BugCase, SimError> {
    open_case(CaseParams {
        case_id: CaseId::new(format!("SIM-{index}")),
        workflow: config.workflow,
        report_ref: ArtifactRef {
            kind: ArtifactKind::OriginalReport,
            version: 1,
        },
        thresholds: config.thresholds,
        accountability: Accountability::default(),
    })
    .map_err(|e| invalid(e.to_string()))
}

/// Applies `kind` from the case's stage, returning the new case and the
/// counter that escalated, if any.
fn advance(
    case: &BugCase,
    take_alternative: bool,
    invalid_case: bool,
) -> Result<(BugCase, OutcomeKind, Option<Counter>), SimError> {
    let outcome = scripted_outcome(case, take_alternative, invalid_case)
        .ok_or_else(|| invalid(format!("no outcome at {}", case.stage)))?;
    let row = fired_row(case, &outcome).map_err(|e| invalid(e.to_string()))?;
    let escalated = row.guard.escalates();
    let next = crate::kernel::step(case, &outcome)
        .map_err(|e| invalid(e.to_string()))?
        .0;
    Ok((next, outcome.kind, escalated))
}

fn must_accept(config: &SimConfig, case: &BugCase) -> bool {
    case.stage == LifecycleStage::UserVerification && case.restart_count >= config.restart_cap
}

#[derive(Debug, Clone, Default)]
struct CaseStats {
    ttr: f64,
    handoffs: u32,
    touches: u32,
    attempts: [u32; 4],
    escalations: [u32; 4],
}

struct CaseRun {
    state: BugCase,
    invalid: bool,
    arrival: f64,
    last_party: Option<Party>,
    holding: Option<Role>,
    stats: CaseStats,
    entries: Vec<TraceEntry>,
    closed_at: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EvKind {
    Enter,
    Ready,
    Done,
}

#[derive(Debug, Clone, Copy)]
struct Ev {
    time: f64,
    seq: u64,
    case: usize,
    kind: EvKind,
}

impl PartialEq for Ev {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ev {}

impl PartialOrd for Ev {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ev {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.seq.cmp(&other.seq))
    }
}

struct Run<'a> {
    config: &'a SimConfig,
    rng: ChaCha8Rng,
    heap: BinaryHeap<Reverse<Ev>>,
    seq: u64,
    cases: Vec<CaseRun>,
    free: HashMap<Role, u32>,
    queues: HashMap<Role, VecDeque<usize>>,
}

impl<'a> Run<'a> {
    fn new(config: &'a SimConfig, replication: u32) -> Result<Self, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::from(replication));
        let mut cases = Vec::with_capacity(config.arrivals.count as usize);
        let mut t = 0.0;
        for i in 0..config.arrivals.count {
            if i > 0 {
                t += config.arrivals.inter_arrival.sample(&mut rng);
            }
            let invalid_case = rng.random::<f64>() < config.validity_mix;
            cases.push(CaseRun {
                state: fresh_case(config, i)?,
                invalid: invalid_case,
                arrival: t,
                last_party: None,
                holding: None,
                stats: CaseStats::default(),
                entries: Vec::new(),
                closed_at: None,
            });
        }
        let mut run = Run {
            config,
            rng,
            heap: BinaryHeap::new(),
            seq: 0,
            cases,
            free: HashMap::new(),
            queues: HashMap::new(),
        };
        for i in 0..run.cases.len() {
            let at = run.cases[i].arrival;
            run.schedule(at, i, EvKind::Enter);
        }
        Ok(run)
    }

    fn schedule(&mut self, time: f64, case: usize, kind: EvKind) {
        self.seq += 1;
        self.heap.push(Reverse(Ev {
            time,
            seq: self.seq,
            case,
            kind,
        }));
    }

    fn execute(mut self) -> Result<Vec<CaseRun>, SimError> {
        while let Some(Reverse(ev)) = self.heap.pop() {
            match ev.kind {
                EvKind::Enter => self.enter(ev.case, ev.time),
                EvKind::Ready => self.ready(ev.case, ev.time),
                EvKind::Done => self.done(ev.case, ev.time)?,
            }
        }
        Ok(self.cases)
    }

    fn enter(&mut self, i: usize, t: f64) {
        let workflow = self.config.workflow;
        let stage = self.cases[i].state.stage;
        let party = Party::of(workflow, stage);
        let latency = self.config.latency(stage).sample(&mut self.rng);
        let c = &mut self.cases[i];
        if c.last_party.is_some_and(|p| p != party) {
            c.stats.handoffs += 1;
        }
        c.last_party = Some(party);
        if party.is_human() {
            c.stats.touches += 1;
        }
        match party {
            Party::Human(Role::EndUser) => {
                let service = self.config.service_time(Role::EndUser).sample(&mut self.rng);
                self.schedule(t + latency + service, i, EvKind::Done);
            }
            Party::Human(_) => self.schedule(t + latency, i, EvKind::Ready),
            Party::Agents => self.schedule(t + latency, i, EvKind::Done),
        }
        self.cases[i].entries.push(TraceEntry {
            time: t,
            stage,
            actor: party,
            // Filled in once the stage completes.
            outcome: OutcomeKind::Done,
        });
    }

    fn ready(&mut self, i: usize, t: f64) {
        let Party::Human(role) = Party::of(self.config.workflow, self.cases[i].state.stage) else {
            unreachable!("only human stages queue");
        };
        let pool = self.config.pool(role);
        let free = self.free.entry(role).or_insert(pool);
        if *free > 0 {
            *free -= 1;
            self.start_service(i, role, t);
        } else {
            self.queues.entry(role).or_default().push_back(i);
        }
    }

    fn start_service(&mut self, i: usize, role: Role, t: f64) {
        self.cases[i].holding = Some(role);
        let service = self.config.service_time(role).sample(&mut self.rng);
        self.schedule(t + service, i, EvKind::Done);
    }

    fn done(&mut self, i: usize, t: f64) -> Result<(), SimError> {
        if let Some(role) = self.cases[i].holding.take() {
            match self.queues.get_mut(&role).and_then(VecDeque::pop_front) {
                Some(next) => self.start_service(next, role, t),
                None => *self.free.get_mut(&role).expect("pool initialised") += 1,
            }
        }
        let config = self.config;
        let c = &self.cases[i];
        let stage = c.state.stage;
        let take_alternative = if must_accept(config, &c.state) {
            false
        } else {
            !(self.rng.random::<f64>() < config.success_prob(stage))
        };
        let c = &mut self.cases[i];
        let (next, kind, escalated) = advance(&c.state, take_alternative, c.invalid)?;
        if let Some(counter) = counter_at(stage) {
            c.stats.attempts[slot(counter)] += 1;
        }
        if let Some(counter) = escalated {
            c.stats.escalations[slot(counter)] += 1;
        }
        c.entries.last_mut().expect("entered").outcome = kind;
        c.state = next;
        if is_terminal(c.state.stage) {
            c.stats.ttr = t - c.arrival;
            c.closed_at = Some(t);
        } else {
            self.enter(i, t);
        }
        Ok(())
    }
}

fn run_replication(
    config: &SimConfig,
    replication: u32,
    keep_traces: bool,
) -> Result<(Vec<CaseStats>, Vec<ScenarioTrace>), SimError> {
    let cases = Run::new(config, replication)?.execute()?;
    let mut stats = Vec::with_capacity(cases.len());
    let mut traces = Vec::new();
    for (n, c) in cases.into_iter().enumerate() {
        let closed_at = c
            .closed_at
            .ok_or_else(|| invalid("a simulated case never closed"))?;
        if keep_traces {
            traces.push(ScenarioTrace {
                replication,
                case: n as u32,
                invalid: c.invalid,
                arrival: c.arrival,
                closed_at,
                final_stage: c.state.stage,
                entries: c.entries,
            });
        }
        stats.push(c.stats);
    }
    Ok((stats, traces))
}

/// Nearest-rank quantile of an ascending slice.
fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

fn summarize(config: &SimConfig, all: Vec<CaseStats>) -> SimMetrics {
    let n = all.len() as f64;
    let mut ttrs: Vec<f64> = all.iter().map(|s| s.ttr).collect();
    ttrs.sort_by(f64::total_cmp);
    let mean = |f: &dyn Fn(&CaseStats) -> f64| all.iter().map(f).sum::<f64>() / n;
    let per_counter = |f: &dyn Fn(&CaseStats, usize) -> u32| {
        Counter::ALL
            .iter()
            .enumerate()
            .map(|(k, c)| (*c, mean(&|s| f64::from(f(s, k)))))
            .collect::<BTreeMap<_, _>>()
    };
    SimMetrics {
        workflow: config.workflow,
        replications: config.replications,
        cases: all.len() as u64,
        ttr: TtrStats {
            mean: mean(&|s| s.ttr),
            median: nearest_rank(&ttrs, 0.5),
            p95: nearest_rank(&ttrs, 0.95),
        },
        handoffs: mean(&|s| f64::from(s.handoffs)),
        hil_touches: mean(&|s| f64::from(s.touches)),
        agent_attempts: per_counter(&|s, k| s.attempts[k]),
        escalation_rates: per_counter(&|s, k| s.escalations[k]),
    }
}

fn run_all(config: &SimConfig, keep_traces: bool) -> Result<(SimMetrics, Vec<ScenarioTrace>), SimError> {
    config.validate()?;
    let reps = (0..config.replications)
        .into_par_iter()
        .map(|r| run_replication(config, r, keep_traces))
        .collect::<Result<Vec<_>, _>>()?;
    let mut stats = Vec::new();
    let mut traces = Vec::new();
    for (s, t) in reps {
        stats.extend(s);
        traces.extend(t);
    }
    Ok((summarize(config, stats), traces))
}

pub fn simulate(config: &SimConfig) -> Result<SimMetrics, SimError> {
    run_all(config, false).map(|(m, _)| m)
}

pub fn simulate_with_traces(config: &SimConfig) -> Result<(SimMetrics, Vec<ScenarioTrace>), SimError> {
    run_all(config, true)
}

/// CSV with header `time,case,stage,actor`; cases are numbered
/// `{replication}-{case}`.
pub fn traces_to_csv(traces: &[ScenarioTrace]) -> String {
    let mut out = String::from("time,case,stage,actor\n");
    for t in traces {
        for e in &t.entries {
            out.push_str(&format!("{},{}-{},{},{}\n", e.time, t.replication, t.case, e.stage, e.actor));
        }
    }
    out
}

struct Node {
    case: BugCase,
    invalid: bool,
    prob: f64,
    time: f64,
    last_party: Option<Party>,
    handoffs: u32,
    touches: u32,
    attempts: [u32; 4],
    escalations: [u32; 4],
    depth: usize,
}

/// Exact expectations over every outcome path of a single case.
///
/// Every latency and service time must be constant. With more than one
/// arrival, queueing would couple cases, so service times must also be zero.
pub fn enumerate_exact(config: &SimConfig, bound: usize) -> Result<ExactMetrics, SimError> {
    config.validate()?;
    let constant = |d: Dist, what: String| {
        d.constant()
            .ok_or_else(|| invalid(format!("{what} must have finite support for exact enumeration")))
    };
    let workflow = config.workflow;
    let mut latency = HashMap::new();
    let mut service = HashMap::new();
    for stage in workflow.stages() {
        latency.insert(stage, constant(config.latency(stage), format!("latency[{stage}]"))?);
        if let Party::Human(role) = Party::of(workflow, stage) {
            let s = constant(config.service_time(role), format!("human_service_time[{role}]"))?;
            if s > 0.0 && config.arrivals.count > 1 {
                return Err(invalid(
                    "exact enumeration needs zero service times when several cases contend",
                ));
            }
            service.insert(role, s);
        }
    }

    let mut stack = Vec::new();
    for (invalid_case, p) in [(false, 1.0 - config.validity_mix), (true, config.validity_mix)] {
        if p > 0.0 {
            stack.push(Node {
                case: fresh_case(config, 0)?,
                invalid: invalid_case,
                prob: p,
                time: 0.0,
                last_party: None,
                handoffs: 0,
                touches: 0,
                attempts: [0; 4],
                escalations: [0; 4],
                depth: 0,
            });
        }
    }

    let mut paths = 0usize;
    let mut ttr_mass: Vec<(f64, f64)> = Vec::new();
    let (mut e_ttr, mut e_handoffs, mut e_touches) = (0.0, 0.0, 0.0);
    let mut e_attempts = [0.0; 4];
    let mut e_escalations = [0.0; 4];

    while let Some(mut node) = stack.pop() {
        if is_terminal(node.case.stage) {
            paths += 1;
            if paths > bound {
                return Err(SimError::PathSpaceTooLarge { bound });
            }
            let p = node.prob;
            e_ttr += p * node.time;
            e_handoffs += p * f64::from(node.handoffs);
            e_touches += p * f64::from(node.touches);
            for k in 0..4 {
                e_attempts[k] += p * f64::from(node.attempts[k]);
                e_escalations[k] += p * f64::from(node.escalations[k]);
            }
            ttr_mass.push((node.time, p));
            continue;
        }
        if node.depth >= MAX_PATH_DEPTH {
            return Err(SimError::PathSpaceTooLarge { bound });
        }
        let stage = node.case.stage;
        let party = Party::of(workflow, stage);
        if node.last_party.is_some_and(|p| p != party) {
            node.handoffs += 1;
        }
        node.last_party = Some(party);
        node.time += latency[&stage];
        if let Party::Human(role) = party {
            node.touches += 1;
            node.time += service[&role];
        }
        if let Some(c) = counter_at(stage) {
            node.attempts[slot(c)] += 1;
        }

        let has_alt = matches!(workflow.branch_outcomes(stage), Some((_, Some(_))))
            && stage != LifecycleStage::ValidityCheck
            && !must_accept(config, &node.case);
        let p_success = if has_alt { config.success_prob(stage) } else { 1.0 };
        for (take_alternative, p) in [(true, 1.0 - p_success), (false, p_success)] {
            if p <= 0.0 {
                continue;
            }
            let (next, _, escalated) = advance(&node.case, take_alternative, node.invalid)?;
            let mut escalations = node.escalations;
            if let Some(c) = escalated {
                escalations[slot(c)] += 1;
            }
            stack.push(Node {
                case: next,
                invalid: node.invalid,
                prob: node.prob * p,
                time: node.time,
                last_party: node.last_party,
                handoffs: node.handoffs,
                touches: node.touches,
                attempts: node.attempts,
                escalations,
                depth: node.depth + 1,
            });
        }
    }

    ttr_mass.sort_by(|a, b| a.0.total_cmp(&b.0));
    let quantile = |q: f64| {
        let mut acc = 0.0;
        for (t, p) in &ttr_mass {
            acc += p;
            if acc >= q - 1e-12 {
                return *t;
            }
        }
        ttr_mass.last().map_or(0.0, |x| x.0)
    };
    let by_counter = |v: [f64; 4]| {
        Counter::ALL
            .iter()
            .enumerate()
            .map(|(k, c)| (*c, v[k]))
            .collect::<BTreeMap<_, _>>()
    };
    Ok(ExactMetrics {
        workflow,
        paths,
        ttr: TtrStats {
            mean: e_ttr,
            median: quantile(0.5),
            p95: quantile(0.95),
        },
        handoffs: e_handoffs,
        hil_touches: e_touches,
        agent_attempts: by_counter(e_attempts),
        escalation_rates: by_counter(e_escalations),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricDeltas {
    pub ttr_mean: f64,
    pub ttr_median: f64,
    pub ttr_p95: f64,
    pub handoffs: f64,
    pub hil_touches: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRatios {
    pub ttr_mean: Option<f64>,
    pub ttr_median: Option<f64>,
    pub ttr_p95: Option<f64>,
    pub handoffs: Option<f64>,
    pub hil_touches: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: SimMetrics,
    pub b: SimMetrics,
    /// `b - a` per metric.
    pub delta: MetricDeltas,
    /// `b / a` per metric; absent when `a` is zero.
    pub ratio: MetricRatios,
    pub assumptions: Vec<String>,
}

fn headline(m: &SimMetrics) -> [f64; 5] {
    [m.ttr.mean, m.ttr.median, m.ttr.p95, m.handoffs, m.hil_touches]
}

pub fn compare(a: &SimConfig, b: &SimConfig) -> Result<Comparison, SimError> {
    if a.arrivals != b.arrivals {
        return Err(SimError::IncomparableConfigs(format!(
            "arrivals differ: {:?} vs {:?}",
            a.arrivals, b.arrivals
        )));
    }
    let ma = simulate(a)?;
    let mb = simulate(b)?;
    let (ha, hb) = (headline(&ma), headline(&mb));
    let d: Vec<f64> = ha.iter().zip(&hb).map(|(x, y)| y - x).collect();
    let r: Vec<Option<f64>> = ha
        .iter()
        .zip(&hb)
        .map(|(x, y)| if *x == 0.0 { None } else { Some(y / x) })
        .collect();
    let mut assumptions = Vec::new();
    for (label, cfg) in [("a", a), ("b", b)] {
        if cfg.workflow == Workflow::Proposed {
            let dialogue = cfg.latency(LifecycleStage::ReportDialogue);
            assumptions.push(format!(
                "config {label}: chatbot dialogue latency {} (mean)",
                dialogue.mean()
            ));
        }
        assumptions.push(format!("config {label}: restart cap {}", cfg.restart_cap));
    }
    Ok(Comparison {
        a: ma,
        b: mb,
        delta: MetricDeltas {
            ttr_mean: d[0],
            ttr_median: d[1],
            ttr_p95: d[2],
            handoffs: d[3],
            hil_touches: d[4],
        },
        ratio: MetricRatios {
            ttr_mean: r[0],
            ttr_median: r[1],
            ttr_p95: r[2],
            handoffs: r[3],
            hil_touches: r[4],
        },
        assumptions,
    })
}

fn default_config(workflow: Workflow) -> SimConfig {
    SimConfig {
        validity_mix: 0.2,
        thresholds: Thresholds::uniform(3),
        restart_cap: 2,
        ..SimConfig::new(workflow)
    }
}

pub fn default_traditional_config() -> SimConfig {
    default_config(Workflow::Traditional)
}

/// Same latencies as the traditional default except the chatbot dialogue,
/// which answers instantly.
pub fn default_proposed_config() -> SimConfig {
    let mut c = default_config(Workflow::Proposed);
    c.latency.insert(LifecycleStage::ReportDialogue, Dist::Constant(0.0));
    c
}
