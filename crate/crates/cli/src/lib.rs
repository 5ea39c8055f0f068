//! Operator entry point: serve the API, run simulations, replay and
//! inspect event logs, export fixtures.
//!
//! Exit codes: 0 success, 1 operational error, 2 usage, 3 oracle path
//! bound exceeded, 4 corrupt log.

pub mod api;
pub mod fixtures;

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use buglife_core::kernel::{step, BugCase, Counter};
use buglife_core::model::{CaseId, SystemClock};
use buglife_core::persistence::{fold, verify_log, EventRecord, EventStore, PersistError, RecordedOutcome};
use buglife_core::service::{Service, ServiceConfig};
use buglife_core::sim::{self, ExactMetrics, SimConfig, SimError, SimMetrics, DEFAULT_PATH_BOUND};
use clap::{Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OPERATIONAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ORACLE_BOUND: i32 = 3;
pub const EXIT_CORRUPT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "buglife", version, about = "Bug lifecycle orchestration engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP API.
    Serve {
        /// Service config (JSON).
        #[arg(long, env = "BUGLIFE_CONFIG")]
        config: PathBuf,
        /// Overrides the port of the configured listen address.
        #[arg(long)]
        port: Option<u16>,
    },
    /// Run a discrete-event simulation.
    Simulate {
        /// Simulation config (JSON).
        #[arg(long, env = "BUGLIFE_CONFIG")]
        config: PathBuf,
        #[arg(long)]
        replications: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the metrics JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also enumerate every path and print exact expectations.
        #[arg(long)]
        exact: bool,
        #[arg(long, default_value_t = DEFAULT_PATH_BOUND)]
        path_bound: usize,
        /// Write per-case traces as CSV.
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Verify a log and print the final case state.
    Replay {
        /// A log file, or a data directory together with --case.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        case: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Verify a log and print its timeline.
    Inspect {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        case: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Write sample logs and simulation configs.
    Export {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn operational(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_OPERATIONAL,
            message: message.into(),
        }
    }
}

impl From<PersistError> for Failure {
    fn from(e: PersistError) -> Self {
        match e {
            PersistError::CorruptChain { seq, reason } => Failure {
                code: EXIT_CORRUPT,
                message: format!("corrupt log at seq {seq}: {reason}"),
            },
            other => Failure::operational(other.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let code = match e {
            SimError::PathSpaceTooLarge { .. } => EXIT_ORACLE_BOUND,
            _ => EXIT_OPERATIONAL,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli.command, &mut stdout) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<(), Failure> {
    match command {
        Command::Serve { config, port } => serve(&config, port, out),
        Command::Simulate {
            config,
            replications,
            seed,
            out: metrics_path,
            exact,
            path_bound,
            traces,
            json,
        } => {
            let mut cfg: SimConfig = read_json(&config)?;
            if let Some(r) = replications {
                cfg.replications = r;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            simulate(&cfg, metrics_path.as_deref(), exact, path_bound, traces.as_deref(), json, out)
        }
        Command::Replay { log, case, json } => {
            let (records, case) = load_log(&log, case.as_deref())?;
            if json {
                emit(out, &serde_json::to_string_pretty(&case).expect("case serializes"))
            } else {
                emit(out, &replay_summary(&records, &case))
            }
        }
        Command::Inspect { log, case, json } => {
            let (records, _) = load_log(&log, case.as_deref())?;
            let rows = timeline_rows(&records)?;
            if json {
                emit(out, &serde_json::to_string_pretty(&rows).expect("rows serialize"))
            } else {
                let mut text = String::new();
                for r in &rows {
                    let _ = writeln!(
                        text,
                        "{:>4}  {}  {} -> {}  {}  by {}",
                        r.seq, r.timestamp, r.stage_before, r.stage_after, r.outcome, r.actor
                    );
                }
                emit(out, text.trim_end())
            }
        }
        Command::Export { out: dir } => {
            std::fs::create_dir_all(&dir).map_err(|e| Failure::operational(format!("{}: {e}", dir.display())))?;
            for (name, content) in fixtures::all()? {
                let path = dir.join(&name);
                std::fs::write(&path, content)
                    .map_err(|e| Failure::operational(format!("{}: {e}", path.display())))?;
                emit(out, &path.display().to_string())?;
            }
            Ok(())
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), Failure> {
    writeln!(out, "{text}").map_err(|e| Failure::operational(e.to_string()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::operational(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::operational(format!("{}: {e}", path.display())))
}

fn serve(config: &Path, port: Option<u16>, out: &mut dyn Write) -> Result<(), Failure> {
    let config: ServiceConfig = read_json(config)?;
    let mut addr: std::net::SocketAddr = config
        .listen
        .parse()
        .map_err(|e| Failure::operational(format!("listen address {}: {e}", config.listen)))?;
    if let Some(p) = port {
        addr.set_port(p);
    }
    let agents = config.build_agents();
    let service = Service::new(config, agents).map_err(|e| Failure::operational(e.to_string()))?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::operational(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Failure::operational(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| Failure::operational(e.to_string()))?;
        emit(out, &format!("buglife listening on http://{local}"))?;
        out.flush().map_err(|e| Failure::operational(e.to_string()))?;
        axum::serve(listener, api::router(Arc::new(service)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Failure::operational(e.to_string()))
    })
}

fn simulate(
    config: &SimConfig,
    metrics_path: Option<&Path>,
    exact: bool,
    path_bound: usize,
    traces_path: Option<&Path>,
    json: bool,
    out: &mut dyn Write,
) -> Result<(), Failure> {
    let metrics = match traces_path {
        Some(path) => {
            let (metrics, traces) = sim::simulate_with_traces(config)?;
            std::fs::write(path, sim::traces_to_csv(&traces))
                .map_err(|e| Failure::operational(format!("{}: {e}", path.display())))?;
            metrics
        }
        None => sim::simulate(config)?,
    };
    if let Some(path) = metrics_path {
        let body = serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n";
        std::fs::write(path, body).map_err(|e| Failure::operational(format!("{}: {e}", path.display())))?;
    }
    let exact = if exact {
        Some(sim::enumerate_exact(config, path_bound)?)
    } else {
        None
    };
    if json {
        let body = match &exact {
            Some(e) => serde_json::json!({ "simulated": metrics, "exact": e }),
            None => serde_json::to_value(&metrics).expect("metrics serialize"),
        };
        emit(out, &serde_json::to_string_pretty(&body).expect("json"))
    } else {
        emit(out, &metrics_table(&metrics, exact.as_ref()))
    }
}

/// Plain-text table of simulated metrics, with exact values beside them
/// when given.
pub fn metrics_table(m: &SimMetrics, exact: Option<&ExactMetrics>) -> String {
    let mut rows: Vec<(String, f64, Option<f64>)> = vec![
        ("ttr.mean".into(), m.ttr.mean, exact.map(|e| e.ttr.mean)),
        ("ttr.median".into(), m.ttr.median, exact.map(|e| e.ttr.median)),
        ("ttr.p95".into(), m.ttr.p95, exact.map(|e| e.ttr.p95)),
        ("handoffs".into(), m.handoffs, exact.map(|e| e.handoffs)),
        ("hil_touches".into(), m.hil_touches, exact.map(|e| e.hil_touches)),
    ];
    for c in Counter::ALL {
        rows.push((
            format!("attempts.{c:?}"),
            m.agent_attempts[&c],
            exact.map(|e| e.agent_attempts[&c]),
        ));
    }
    for c in Counter::ALL {
        rows.push((
            format!("escalation.{c:?}"),
            m.escalation_rates[&c],
            exact.map(|e| e.escalation_rates[&c]),
        ));
    }
    let mut text = format!(
        "workflow {:?}, {} replications, {} cases\n",
        m.workflow, m.replications, m.cases
    );
    let _ = write!(text, "{:<24}{:>14}", "metric", "simulated");
    if exact.is_some() {
        let _ = write!(text, "{:>14}", "exact");
    }
    for (name, sim, ex) in rows {
        let _ = write!(text, "\n{name:<24}{sim:>14.6}");
        if let Some(x) = ex {
            let _ = write!(text, "{x:>14.6}");
        }
    }
    text
}

fn load_log(path: &Path, case: Option<&str>) -> Result<(Vec<EventRecord>, BugCase), Failure> {
    if path.is_dir() {
        let case = case.ok_or_else(|| Failure::operational("--case is required with a log directory"))?;
        let store = EventStore::open_dir(path, Arc::new(SystemClock::default()))?;
        let id = CaseId::new(case);
        if !store.contains(&id) {
            return Err(Failure::operational(format!("unknown case {case}")));
        }
        let records = store.records(&id)?;
        let current = fold(&records)?;
        return Ok((records, current));
    }
    let bytes = std::fs::read(path).map_err(|e| Failure::operational(format!("{}: {e}", path.display())))?;
    let (records, current) = verify_log(&bytes)?;
    if let Some(case) = case {
        if current.case_id.as_str() != case {
            return Err(Failure::operational(format!("unknown case {case}")));
        }
    }
    Ok((records, current))
}

fn replay_summary(records: &[EventRecord], case: &BugCase) -> String {
    let c = &case.counters;
    format!(
        "case {}\nfinal stage: {}\nrecords: {}\ncounters: repro={} nocode={} patch_cycle={} agent_verify={}\nrestarts: {}",
        case.case_id,
        case.stage,
        records.len(),
        c.repro_count,
        c.nocode_verify_count,
        c.patch_cycle_count,
        c.agent_verify_count,
        case.restart_count
    )
}

#[derive(Debug, serde::Serialize)]
pub struct TimelineRow {
    pub seq: u64,
    pub timestamp: u64,
    pub stage_before: String,
    pub stage_after: String,
    pub outcome: String,
    pub actor: String,
}

fn timeline_rows(records: &[EventRecord]) -> Result<Vec<TimelineRow>, Failure> {
    let mut rows = Vec::with_capacity(records.len());
    let mut case = fold(&records[..1])?;
    for r in records {
        let outcome = match &r.outcome {
            RecordedOutcome::Opened { .. } => "Opened".to_string(),
            RecordedOutcome::Stage(o) => {
                case = step(&case, o)
                    .map_err(|e| Failure::operational(e.to_string()))?
                    .0;
                format!("{:?}", o.kind)
            }
        };
        rows.push(TimelineRow {
            seq: r.seq,
            timestamp: r.timestamp,
            stage_before: r.stage_before.to_string(),
            stage_after: case.stage.to_string(),
            outcome,
            actor: r.actor.to_string(),
        });
    }
    Ok(rows)
}
