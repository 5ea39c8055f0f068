//! Vocabulary shared by every subsystem: identifiers, human roles, agent
//! kinds and artifact kinds.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(
    /// Opaque identifier of one bug case.
    CaseId
);
string_id!(
    /// Identifier of a human actor (end user, developer, ...).
    ActorId
);

/// Human roles that take part in the lifecycle.
///
/// `ProjectManager` and `TeamLead` are distinct even though one actor often
/// holds both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    EndUser,
    CustomerSupport,
    ProjectManager,
    TeamLead,
    Developer,
    Reviewer,
    Tester,
    Ops,
}

impl Role {
    pub const ALL: [Role; 8] = [
        Role::EndUser,
        Role::CustomerSupport,
        Role::ProjectManager,
        Role::TeamLead,
        Role::Developer,
        Role::Reviewer,
        Role::Tester,
        Role::Ops,
    ];

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.name().eq_ignore_ascii_case(s))
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::EndUser => "EndUser",
            Role::CustomerSupport => "CustomerSupport",
            Role::ProjectManager => "ProjectManager",
            Role::TeamLead => "TeamLead",
            Role::Developer => "Developer",
            Role::Reviewer => "Reviewer",
            Role::Tester => "Tester",
            Role::Ops => "Ops",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The twelve agent kinds that serve automated stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentKind {
    ChatbotIntake,
    Enhancer,
    Reproducer,
    Classifier,
    FeatureTracer,
    ValidityChecker,
    Assigner,
    NoCodeFixer,
    Localizer,
    PatchGenerator,
    Verifier,
    DeploymentAssistant,
}

impl AgentKind {
    pub const ALL: [AgentKind; 12] = [
        AgentKind::ChatbotIntake,
        AgentKind::Enhancer,
        AgentKind::Reproducer,
        AgentKind::Classifier,
        AgentKind::FeatureTracer,
        AgentKind::ValidityChecker,
        AgentKind::Assigner,
        AgentKind::NoCodeFixer,
        AgentKind::Localizer,
        AgentKind::PatchGenerator,
        AgentKind::Verifier,
        AgentKind::DeploymentAssistant,
    ];
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Kinds of work products stored by the context broker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArtifactKind {
    DialogueTranscript,
    OriginalReport,
    EnhancedReport,
    ReproductionArtifact,
    ClassificationRecord,
    TraceLink,
    ValidityVerdict,
    NoCodeFixProposal,
    PatchCandidate,
    VerificationResult,
    DeploymentReport,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 11] = [
        ArtifactKind::DialogueTranscript,
        ArtifactKind::OriginalReport,
        ArtifactKind::EnhancedReport,
        ArtifactKind::ReproductionArtifact,
        ArtifactKind::ClassificationRecord,
        ArtifactKind::TraceLink,
        ArtifactKind::ValidityVerdict,
        ArtifactKind::NoCodeFixProposal,
        ArtifactKind::PatchCandidate,
        ArtifactKind::VerificationResult,
        ArtifactKind::DeploymentReport,
    ];
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Pointer to one stored artifact version of the owning case.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub kind: ArtifactKind,
    pub version: u32,
}

/// A human actor and the roles they hold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Actor {
    pub actor_id: ActorId,
    pub roles: Vec<Role>,
}

impl Actor {
    /// Returns `None` when `roles` is empty.
    pub fn new(actor_id: impl Into<String>, roles: impl IntoIterator<Item = Role>) -> Option<Self> {
        let mut roles: Vec<Role> = roles.into_iter().collect();
        roles.sort();
        roles.dedup();
        if roles.is_empty() {
            return None;
        }
        Some(Self {
            actor_id: ActorId::new(actor_id),
            roles,
        })
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentDescriptor {
    pub name: String,
    pub kind: AgentKind,
    pub version: u32,
}

impl AgentDescriptor {
    pub fn new(name: impl Into<String>, kind: AgentKind, version: u32) -> Self {
        Self {
            name: name.into(),
            kind,
            version,
        }
    }
}

/// Who performed an action: a registered agent or a human acting in a role.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Principal {
    Agent(AgentDescriptor),
    Human { actor_id: ActorId, role: Role },
}

impl Principal {
    pub fn human(actor_id: impl Into<ActorId>, role: Role) -> Self {
        Principal::Human {
            actor_id: actor_id.into(),
            role,
        }
    }
}

impl fmt::Display for Principal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Principal::Agent(d) => write!(f, "{}@v{} ({})", d.name, d.version, d.kind),
            Principal::Human { actor_id, role } => write!(f, "{actor_id} ({role})"),
        }
    }
}

/// Source of record timestamps, in milliseconds.
pub trait Clock: Send + Sync {
    fn now_millis(&self) -> u64;
}

/// Wall-clock milliseconds, nudged forward so readings strictly increase.
#[derive(Debug, Default)]
pub struct SystemClock(AtomicU64);

impl Clock for SystemClock {
    fn now_millis(&self) -> u64 {
        let wall = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        let mut last = self.0.load(Ordering::SeqCst);
        loop {
            let next = wall.max(last + 1);
            match self.0.compare_exchange(last, next, Ordering::SeqCst, Ordering::SeqCst) {
                Ok(_) => return next,
                Err(seen) => last = seen,
            }
        }
    }
}

/// Ticks once per reading; keeps test output reproducible.
#[derive(Debug, Default)]
pub struct LogicalClock(AtomicU64);

impl LogicalClock {
    pub fn starting_at(t: u64) -> Self {
        Self(AtomicU64::new(t))
    }
}

impl Clock for LogicalClock {
    fn now_millis(&self) -> u64 {
        self.0.fetch_add(1, Ordering::SeqCst)
    }
}
