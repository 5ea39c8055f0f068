//! Context broker: versioned artifact store, agent registry, access policy
//! and the provenance log.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use base64::Engine;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ActorId, AgentDescriptor, AgentKind, ArtifactKind, CaseId, Clock, Principal, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Access {
    Read,
    Write,
    Denied,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub artifact_id: String,
    pub case_id: CaseId,
    pub kind: ArtifactKind,
    pub version: u32,
    pub producer: Principal,
    pub content: Vec<u8>,
    pub content_hash: String,
    pub created_at: u64,
}

impl ArtifactRecord {
    pub fn content_str(&self) -> &str {
        std::str::from_utf8(&self.content).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub seq: u64,
    pub case_id: CaseId,
    pub actor: Principal,
    /// Absent for denied writes, which never create a record.
    pub artifact_id: Option<String>,
    pub kind: ArtifactKind,
    pub access: Access,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BrokerError {
    #[error("{principal} may not {access:?} {kind}")]
    PolicyDenied {
        principal: String,
        kind: ArtifactKind,
        access: Access,
    },
    #[error("unknown case {0}")]
    UnknownCase(CaseId),
    #[error("case {0} already exists")]
    DuplicateCase(CaseId),
    #[error("no {kind} artifact (version {version:?}) for case {case_id}")]
    NotFound {
        case_id: CaseId,
        kind: ArtifactKind,
        version: Option<u32>,
    },
    #[error("agent {name} ({kind}) already registered at version {current}")]
    StaleVersion {
        name: String,
        kind: AgentKind,
        current: u32,
    },
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn artifact_id(case: &CaseId, kind: ArtifactKind, version: u32) -> String {
    format!("{case}/{kind}/v{version}")
}

/// Read and write grants by agent kind and by human role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessPolicy {
    agent_read: HashMap<AgentKind, HashSet<ArtifactKind>>,
    agent_write: HashMap<AgentKind, HashSet<ArtifactKind>>,
    role_write: HashMap<Role, HashSet<ArtifactKind>>,
}

impl Default for AccessPolicy {
    fn default() -> Self {
        use AgentKind as A;
        use ArtifactKind::*;
        const REPORTS: [ArtifactKind; 2] = [OriginalReport, EnhancedReport];
        let grants: [(AgentKind, &[ArtifactKind], &[ArtifactKind]); 12] = [
            (A::ChatbotIntake, &[DialogueTranscript], &[DialogueTranscript]),
            (A::Enhancer, &[DialogueTranscript], &[EnhancedReport]),
            (A::Reproducer, &[ReproductionArtifact], &[ReproductionArtifact]),
            (A::Classifier, &[ReproductionArtifact], &[ClassificationRecord]),
            (A::FeatureTracer, &[ClassificationRecord], &[TraceLink]),
            (
                A::ValidityChecker,
                &[ReproductionArtifact, ClassificationRecord, TraceLink],
                &[ValidityVerdict],
            ),
            (A::Assigner, &[ClassificationRecord, TraceLink], &[]),
            (A::NoCodeFixer, &[ValidityVerdict, NoCodeFixProposal], &[NoCodeFixProposal]),
            (A::Localizer, &[ReproductionArtifact, ClassificationRecord, TraceLink], &[]),
            (
                A::PatchGenerator,
                &[ReproductionArtifact, TraceLink, PatchCandidate, VerificationResult],
                &[PatchCandidate],
            ),
            (A::Verifier, &[ReproductionArtifact, PatchCandidate], &[VerificationResult]),
            (
                A::DeploymentAssistant,
                &[PatchCandidate, VerificationResult],
                &[DeploymentReport],
            ),
        ];
        let mut agent_read = HashMap::new();
        let mut agent_write = HashMap::new();
        for (kind, reads, writes) in grants {
            let mut r: HashSet<ArtifactKind> = REPORTS.into_iter().collect();
            r.extend(reads.iter().copied());
            agent_read.insert(kind, r);
            agent_write.insert(kind, writes.iter().copied().collect());
        }
        let role_write = [
            (Role::EndUser, vec![OriginalReport, DialogueTranscript]),
            (Role::CustomerSupport, vec![ReproductionArtifact, NoCodeFixProposal]),
            (Role::Developer, vec![PatchCandidate]),
            (Role::Tester, vec![VerificationResult]),
        ]
        .into_iter()
        .map(|(role, kinds)| (role, kinds.into_iter().collect()))
        .collect();
        Self {
            agent_read,
            agent_write,
            role_write,
        }
    }
}

impl AccessPolicy {
    pub fn agent_can_read(&self, agent: AgentKind, kind: ArtifactKind) -> bool {
        self.agent_read.get(&agent).is_some_and(|s| s.contains(&kind))
    }

    pub fn agent_can_write(&self, agent: AgentKind, kind: ArtifactKind) -> bool {
        self.agent_write.get(&agent).is_some_and(|s| s.contains(&kind))
    }

    pub fn role_can_write(&self, role: Role, kind: ArtifactKind) -> bool {
        self.role_write.get(&role).is_some_and(|s| s.contains(&kind))
    }

    /// Kinds `agent` may read, in declaration order.
    pub fn readable_by(&self, agent: AgentKind) -> Vec<ArtifactKind> {
        ArtifactKind::ALL
            .into_iter()
            .filter(|k| self.agent_can_read(agent, *k))
            .collect()
    }
}

/// Grounds on which a human may touch a case's artifacts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Admission {
    /// Holders of the role, while a task for that role is open.
    Role(Role),
    /// One named actor, e.g. the reporter or the responsible human.
    Actor(ActorId),
}

#[derive(Default)]
struct CaseStore {
    versions: BTreeMap<ArtifactKind, Vec<Arc<ArtifactRecord>>>,
    provenance: Vec<ProvenanceEntry>,
    admitted: HashSet<Admission>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub descriptor: AgentDescriptor,
    pub active: bool,
}

pub struct Broker {
    policy: AccessPolicy,
    clock: Arc<dyn Clock>,
    cases: RwLock<HashMap<CaseId, Arc<Mutex<CaseStore>>>>,
    registry: RwLock<Vec<AgentDescriptor>>,
}

impl Broker {
    pub fn new(policy: AccessPolicy, clock: Arc<dyn Clock>) -> Self {
        Self {
            policy,
            clock,
            cases: RwLock::new(HashMap::new()),
            registry: RwLock::new(Vec::new()),
        }
    }

    pub fn policy(&self) -> &AccessPolicy {
        &self.policy
    }

    pub fn register_agent(&self, descriptor: AgentDescriptor) -> Result<Registration, BrokerError> {
        let mut registry = self.registry.write();
        if let Some(current) = registry
            .iter()
            .filter(|d| d.name == descriptor.name && d.kind == descriptor.kind)
            .map(|d| d.version)
            .max()
        {
            if descriptor.version <= current {
                return Err(BrokerError::StaleVersion {
                    name: descriptor.name,
                    kind: descriptor.kind,
                    current,
                });
            }
        }
        registry.push(descriptor.clone());
        Ok(Registration {
            descriptor,
            active: true,
        })
    }

    /// The most recently registered descriptor for `kind`.
    pub fn active_agent(&self, kind: AgentKind) -> Option<AgentDescriptor> {
        self.registry.read().iter().rev().find(|d| d.kind == kind).cloned()
    }

    /// Every registration, oldest first.
    pub fn registrations(&self) -> Vec<AgentDescriptor> {
        self.registry.read().clone()
    }

    pub fn is_registered(&self, descriptor: &AgentDescriptor) -> bool {
        self.registry.read().contains(descriptor)
    }

    pub fn open_case(&self, case: &CaseId) -> Result<(), BrokerError> {
        let mut cases = self.cases.write();
        if cases.contains_key(case) {
            return Err(BrokerError::DuplicateCase(case.clone()));
        }
        cases.insert(case.clone(), Arc::default());
        Ok(())
    }

    pub fn has_case(&self, case: &CaseId) -> bool {
        self.cases.read().contains_key(case)
    }

    fn store(&self, case: &CaseId) -> Result<Arc<Mutex<CaseStore>>, BrokerError> {
        self.cases
            .read()
            .get(case)
            .cloned()
            .ok_or_else(|| BrokerError::UnknownCase(case.clone()))
    }

    pub fn admit(&self, case: &CaseId, admission: Admission) -> Result<(), BrokerError> {
        self.store(case)?.lock().admitted.insert(admission);
        Ok(())
    }

    pub fn revoke(&self, case: &CaseId, admission: &Admission) -> Result<(), BrokerError> {
        self.store(case)?.lock().admitted.remove(admission);
        Ok(())
    }

    fn allowed(&self, store: &CaseStore, who: &Principal, kind: ArtifactKind, write: bool) -> bool {
        match who {
            Principal::Agent(d) => {
                if write {
                    self.policy.agent_can_write(d.kind, kind)
                } else {
                    self.policy.agent_can_read(d.kind, kind)
                }
            }
            Principal::Human { actor_id, role } => {
                let admitted = store.admitted.contains(&Admission::Role(*role))
                    || store.admitted.contains(&Admission::Actor(actor_id.clone()));
                admitted && (!write || self.policy.role_can_write(*role, kind))
            }
        }
    }

    fn log(
        &self,
        store: &mut CaseStore,
        case: &CaseId,
        who: &Principal,
        artifact_id: Option<String>,
        kind: ArtifactKind,
        access: Access,
    ) {
        let seq = store.provenance.len() as u64 + 1;
        store.provenance.push(ProvenanceEntry {
            seq,
            case_id: case.clone(),
            actor: who.clone(),
            artifact_id,
            kind,
            access,
            timestamp: self.clock.now_millis(),
        });
    }

    fn deny(&self, store: &mut CaseStore, case: &CaseId, who: &Principal, kind: ArtifactKind, access: Access) -> BrokerError {
        self.log(store, case, who, None, kind, Access::Denied);
        BrokerError::PolicyDenied {
            principal: who.to_string(),
            kind,
            access,
        }
    }

    pub fn put_artifact(
        &self,
        case: &CaseId,
        kind: ArtifactKind,
        content: impl Into<Vec<u8>>,
        producer: &Principal,
    ) -> Result<Arc<ArtifactRecord>, BrokerError> {
        let store = self.store(case)?;
        let mut store = store.lock();
        if !self.allowed(&store, producer, kind, true) {
            return Err(self.deny(&mut store, case, producer, kind, Access::Write));
        }
        let content = content.into();
        let version = store.versions.get(&kind).map_or(0, Vec::len) as u32 + 1;
        let record = Arc::new(ArtifactRecord {
            artifact_id: artifact_id(case, kind, version),
            case_id: case.clone(),
            kind,
            version,
            producer: producer.clone(),
            content_hash: content_hash(&content),
            content,
            created_at: self.clock.now_millis(),
        });
        store.versions.entry(kind).or_default().push(record.clone());
        self.log(&mut store, case, producer, Some(record.artifact_id.clone()), kind, Access::Write);
        Ok(record)
    }

    /// Latest version when `version` is `None`.
    pub fn get_artifact(
        &self,
        case: &CaseId,
        kind: ArtifactKind,
        requester: &Principal,
        version: Option<u32>,
    ) -> Result<Arc<ArtifactRecord>, BrokerError> {
        let store = self.store(case)?;
        let mut store = store.lock();
        if !self.allowed(&store, requester, kind, false) {
            return Err(self.deny(&mut store, case, requester, kind, Access::Read));
        }
        let found = store.versions.get(&kind).and_then(|versions| match version {
            None => versions.last().cloned(),
            Some(v) if v >= 1 => versions.get(v as usize - 1).cloned(),
            Some(_) => None,
        });
        let record = found.ok_or_else(|| BrokerError::NotFound {
            case_id: case.clone(),
            kind,
            version,
        })?;
        self.log(&mut store, case, requester, Some(record.artifact_id.clone()), kind, Access::Read);
        Ok(record)
    }

    /// Latest version of every kind `agent` may read that exists on the case.
    /// Each returned record is one logged read; absent kinds are skipped
    /// without a log entry.
    pub fn agent_slice(&self, case: &CaseId, agent: &AgentDescriptor) -> Result<Vec<Arc<ArtifactRecord>>, BrokerError> {
        let who = Principal::Agent(agent.clone());
        let store = self.store(case)?;
        let mut store = store.lock();
        let mut out = Vec::new();
        for kind in self.policy.readable_by(agent.kind) {
            if let Some(record) = store.versions.get(&kind).and_then(|v| v.last()).cloned() {
                self.log(&mut store, case, &who, Some(record.artifact_id.clone()), kind, Access::Read);
                out.push(record);
            }
        }
        Ok(out)
    }

    /// Number of versions stored for `kind`, without logging a read.
    pub fn version_count(&self, case: &CaseId, kind: ArtifactKind) -> Result<u32, BrokerError> {
        Ok(self.store(case)?.lock().versions.get(&kind).map_or(0, Vec::len) as u32)
    }

    pub fn provenance(&self, case: &CaseId) -> Result<Vec<ProvenanceEntry>, BrokerError> {
        Ok(self.store(case)?.lock().provenance.clone())
    }

    /// Every record of the case ordered by (kind, version), for auditing.
    pub fn records(&self, case: &CaseId) -> Result<Vec<Arc<ArtifactRecord>>, BrokerError> {
        let store = self.store(case)?;
        let store = store.lock();
        Ok(store.versions.values().flatten().cloned().collect())
    }

    /// JSON-lines export of a case's artifacts, ordered by (kind, version).
    pub fn export_case(&self, case: &CaseId) -> Result<String, BrokerError> {
        let mut out = String::new();
        for record in self.records(case)? {
            let line = ExportLine {
                artifact_id: &record.artifact_id,
                case_id: &record.case_id,
                kind: record.kind,
                version: record.version,
                producer: &record.producer,
                content_base64: base64::engine::general_purpose::STANDARD.encode(&record.content),
                content_hash: &record.content_hash,
                created_at: record.created_at,
            };
            out.push_str(&serde_json::to_string(&line).expect("export line serializes"));
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Serialize)]
struct ExportLine<'a> {
    artifact_id: &'a str,
    case_id: &'a CaseId,
    kind: ArtifactKind,
    version: u32,
    producer: &'a Principal,
    content_base64: String,
    content_hash: &'a str,
    created_at: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LogicalClock;

    fn broker() -> Broker {
        let b = Broker::new(AccessPolicy::default(), Arc::new(LogicalClock::default()));
        b.open_case(&"c".into()).unwrap();
        b
    }

    fn agent(kind: AgentKind) -> Principal {
        Principal::Agent(AgentDescriptor::new(format!("{kind}"), kind, 1))
    }

    #[test]
    fn registry_versions() {
        let b = broker();
        let d1 = AgentDescriptor::new("enh", AgentKind::Enhancer, 1);
        assert!(b.register_agent(d1.clone()).unwrap().active);
        let d2 = AgentDescriptor::new("enh", AgentKind::Enhancer, 2);
        b.register_agent(d2.clone()).unwrap();
        assert_eq!(b.active_agent(AgentKind::Enhancer), Some(d2));
        assert!(b.is_registered(&d1));
        assert!(matches!(
            b.register_agent(d1),
            Err(BrokerError::StaleVersion { current: 2, .. })
        ));
    }

    #[test]
    fn versions_are_gapless_and_immutable() {
        let b = broker();
        let case: CaseId = "c".into();
        let enh = agent(AgentKind::Enhancer);
        let v1 = b.put_artifact(&case, ArtifactKind::EnhancedReport, "one", &enh).unwrap();
        let v2 = b.put_artifact(&case, ArtifactKind::EnhancedReport, "two", &enh).unwrap();
        assert_eq!((v1.version, v2.version), (1, 2));
        let again = b
            .get_artifact(&case, ArtifactKind::EnhancedReport, &enh, Some(1))
            .unwrap();
        assert_eq!(again.content, b"one");
        assert_eq!(again.content_hash, content_hash(b"one"));
        let latest = b.get_artifact(&case, ArtifactKind::EnhancedReport, &enh, None).unwrap();
        assert_eq!(latest.version, 2);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            content_hash(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn denials_are_logged() {
        let b = broker();
        let case: CaseId = "c".into();
        let err = b
            .put_artifact(&case, ArtifactKind::OriginalReport, "x", &agent(AgentKind::Localizer))
            .unwrap_err();
        assert!(matches!(err, BrokerError::PolicyDenied { .. }));
        let err = b
            .get_artifact(&case, ArtifactKind::PatchCandidate, &agent(AgentKind::ChatbotIntake), None)
            .unwrap_err();
        assert!(matches!(err, BrokerError::PolicyDenied { .. }));
        let log = b.provenance(&case).unwrap();
        assert_eq!(log.len(), 2);
        assert!(log.iter().all(|e| e.access == Access::Denied));
        assert_eq!(log.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn provenance_counts_put_and_get() {
        let b = broker();
        let case: CaseId = "c".into();
        assert!(b.provenance(&case).unwrap().is_empty());
        let r = agent(AgentKind::Reproducer);
        b.put_artifact(&case, ArtifactKind::ReproductionArtifact, "s", &r).unwrap();
        b.get_artifact(&case, ArtifactKind::ReproductionArtifact, &r, None).unwrap();
        let log = b.provenance(&case).unwrap();
        assert_eq!(
            log.iter().map(|e| e.access).collect::<Vec<_>>(),
            vec![Access::Write, Access::Read]
        );
        assert!(matches!(
            b.provenance(&"nope".into()),
            Err(BrokerError::UnknownCase(_))
        ));
    }

    #[test]
    fn humans_need_admission() {
        let b = broker();
        let case: CaseId = "c".into();
        let user = Principal::human("u1", Role::EndUser);
        assert!(b.put_artifact(&case, ArtifactKind::OriginalReport, "r", &user).is_err());
        b.admit(&case, Admission::Actor("u1".into())).unwrap();
        b.put_artifact(&case, ArtifactKind::OriginalReport, "r", &user).unwrap();
        // admitted, but no write grant
        assert!(b.put_artifact(&case, ArtifactKind::PatchCandidate, "p", &user).is_err());
        let dev = Principal::human("d", Role::Developer);
        assert!(b.get_artifact(&case, ArtifactKind::OriginalReport, &dev, None).is_err());
        b.admit(&case, Admission::Role(Role::Developer)).unwrap();
        b.get_artifact(&case, ArtifactKind::OriginalReport, &dev, None).unwrap();
        b.revoke(&case, &Admission::Role(Role::Developer)).unwrap();
        assert!(b.get_artifact(&case, ArtifactKind::OriginalReport, &dev, None).is_err());
    }

    #[test]
    fn every_agent_can_write_its_stage_output() {
        use crate::agents::scripted::stage_of;
        use crate::kernel::Workflow;
        let policy = AccessPolicy::default();
        for kind in AgentKind::ALL {
            if let Some(out) = Workflow::Proposed.produced_artifact(stage_of(kind)) {
                assert!(policy.agent_can_write(kind, out), "{kind:?} cannot write {out:?}");
            }
            assert!(policy.agent_can_read(kind, ArtifactKind::OriginalReport));
        }
    }

    #[test]
    fn export_is_ordered_by_kind_then_version() {
        let b = broker();
        let case: CaseId = "c".into();
        b.put_artifact(&case, ArtifactKind::EnhancedReport, "e1", &agent(AgentKind::Enhancer)).unwrap();
        b.put_artifact(&case, ArtifactKind::DialogueTranscript, "t", &agent(AgentKind::ChatbotIntake))
            .unwrap();
        b.put_artifact(&case, ArtifactKind::EnhancedReport, "e2", &agent(AgentKind::Enhancer)).unwrap();
        let text = b.export_case(&case).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let order: Vec<(String, u64)> = lines
            .iter()
            .map(|l| (l["kind"].as_str().unwrap().to_string(), l["version"].as_u64().unwrap()))
            .collect();
        assert_eq!(
            order,
            vec![
                ("DialogueTranscript".into(), 1),
                ("EnhancedReport".into(), 1),
                ("EnhancedReport".into(), 2)
            ]
        );
        assert_eq!(lines[1]["content_base64"], "ZTE=");
        let keys: Vec<&String> = lines[0].as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 8);
    }
}
