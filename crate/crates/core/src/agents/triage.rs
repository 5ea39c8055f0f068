//! Deterministic triage rules used by the reference agents.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::report::BugReportModel;
use crate::kernel::ValidityCategory;
use crate::model::ActorId;

/// Token overlap at or above which two reports count as duplicates.
pub const DUPLICATE_OVERLAP: f64 = 0.9;

/// Lower-cased alphanumeric tokens in order of appearance.
pub fn token_seq(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn tokenize(text: &str) -> BTreeSet<String> {
    token_seq(text).into_iter().collect()
}

/// Jaccard overlap; two empty sets score 0.
pub fn similarity(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

fn normalize(text: &str) -> String {
    token_seq(text).join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Critical,
    Major,
    Normal,
    Minor,
    Trivial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BugType {
    Crash,
    Functional,
    Performance,
    Ui,
    Security,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Priority {
    P1,
    P2,
    P3,
    P4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub priority: Priority,
    pub severity: Severity,
    #[serde(rename = "type")]
    pub bug_type: BugType,
}

struct ClassificationRule {
    keywords: &'static [&'static str],
    record: ClassificationRecord,
}

const fn rule(
    keywords: &'static [&'static str],
    bug_type: BugType,
    severity: Severity,
    priority: Priority,
) -> ClassificationRule {
    ClassificationRule {
        keywords,
        record: ClassificationRecord {
            priority,
            severity,
            bug_type,
        },
    }
}

/// First matching row wins.
const RULES: [ClassificationRule; 5] = [
    rule(&["crash"], BugType::Crash, Severity::Critical, Priority::P1),
    rule(&["data loss"], BugType::Functional, Severity::Critical, Priority::P1),
    rule(&["slow", "latency"], BugType::Performance, Severity::Normal, Priority::P2),
    rule(&["misaligned", "overlap"], BugType::Ui, Severity::Minor, Priority::P3),
    rule(&["injection", "leak"], BugType::Security, Severity::Major, Priority::P1),
];

const FALLBACK: ClassificationRecord = ClassificationRecord {
    priority: Priority::P3,
    severity: Severity::Normal,
    bug_type: BugType::Functional,
};

fn contains_phrase(tokens: &[String], phrase: &str) -> bool {
    let needle = token_seq(phrase);
    !needle.is_empty() && tokens.windows(needle.len()).any(|w| w == needle.as_slice())
}

pub fn classify(report: &BugReportModel) -> ClassificationRecord {
    let tokens = token_seq(&report.summary_text());
    RULES
        .iter()
        .find(|r| r.keywords.iter().any(|k| contains_phrase(&tokens, k)))
        .map(|r| r.record)
        .unwrap_or(FALLBACK)
}

/// A previously filed report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub text: String,
    #[serde(default = "default_true")]
    pub open: bool,
}

fn default_true() -> bool {
    true
}

/// Feature documentation consulted for validity checks and tracing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDoc {
    pub feature: String,
    #[serde(default)]
    pub description: String,
    /// Behaviour that is working as designed.
    #[serde(default)]
    pub intended_behaviors: Vec<String>,
    /// Symptoms known to come from misconfiguration.
    #[serde(default)]
    pub configuration_issues: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Valid,
    Invalid(ValidityCategory),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityVerdict {
    pub verdict: Verdict,
    pub explanation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched: Option<String>,
}

pub fn check_validity(
    report: &BugReportModel,
    history: &[HistoryEntry],
    docs: &[FeatureDoc],
) -> ValidityVerdict {
    let title = normalize(&report.title);
    let terms = tokenize(&report.summary_text());
    for entry in history {
        let same_title = !title.is_empty() && normalize(&entry.title) == title;
        let entry_terms = tokenize(&format!("{} {}", entry.title, entry.text));
        let overlap = similarity(&terms, &entry_terms);
        if same_title || overlap >= DUPLICATE_OVERLAP {
            return ValidityVerdict {
                verdict: Verdict::Invalid(ValidityCategory::Duplicate),
                explanation: format!(
                    "This report duplicates {} (token overlap {:.2}); follow that report for updates.",
                    entry.id, overlap
                ),
                matched: Some(entry.id.clone()),
            };
        }
    }

    let observed = normalize(&report.observed_behavior);
    if !observed.is_empty() {
        for doc in docs {
            if let Some(intended) = doc
                .intended_behaviors
                .iter()
                .find(|b| !normalize(b).is_empty() && observed.contains(&normalize(b)))
            {
                return ValidityVerdict {
                    verdict: Verdict::Invalid(ValidityCategory::UserError),
                    explanation: format!(
                        "The observed behaviour \"{intended}\" is how {} is designed to work.",
                        doc.feature
                    ),
                    matched: Some(doc.feature.clone()),
                };
            }
        }
    }

    let env_text: Vec<&str> = report.environment.values().map(String::as_str).collect();
    let symptom_text = normalize(&format!("{} {}", report.observed_behavior, env_text.join(" ")));
    for doc in docs {
        if let Some(issue) = doc
            .configuration_issues
            .iter()
            .find(|i| !normalize(i).is_empty() && symptom_text.contains(&normalize(i)))
        {
            return ValidityVerdict {
                verdict: Verdict::Invalid(ValidityCategory::ConfigurationError),
                explanation: format!(
                    "\"{issue}\" is a known configuration problem for {}; adjusting the setup resolves it.",
                    doc.feature
                ),
                matched: Some(doc.feature.clone()),
            };
        }
    }

    ValidityVerdict {
        verdict: Verdict::Valid,
        explanation: "No duplicate, documented behaviour or known misconfiguration matches this report."
            .to_string(),
        matched: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLink {
    pub feature: Option<String>,
    pub score: f64,
}

/// Links the report to the documented feature with the highest overlap.
pub fn trace_feature(report: &BugReportModel, docs: &[FeatureDoc]) -> TraceLink {
    let terms = tokenize(&report.full_text());
    let mut best = TraceLink {
        feature: None,
        score: 0.0,
    };
    for doc in docs {
        let score = similarity(&terms, &tokenize(&format!("{} {}", doc.feature, doc.description)));
        if score > best.score {
            best = TraceLink {
                feature: Some(doc.feature.clone()),
                score,
            };
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub dev: ActorId,
    pub history_terms: BTreeSet<String>,
    pub open_workload: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub w_sim: f64,
    pub w_load: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            w_sim: 0.7,
            w_load: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub dev: ActorId,
    pub score: f64,
    pub similarity: f64,
    pub open_workload: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TriageError {
    #[error("no assignment candidates")]
    NoCandidates,
    #[error("weights must be finite, non-negative and not both zero")]
    InvalidWeights,
}

/// Ranks candidates whose similarity has already been computed.
pub fn rank_scored(
    scored: &[(ActorId, f64, u32)],
    weights: Weights,
) -> Result<Vec<RankedCandidate>, TriageError> {
    if scored.is_empty() {
        return Err(TriageError::NoCandidates);
    }
    let valid = |w: f64| w.is_finite() && w >= 0.0;
    if !valid(weights.w_sim) || !valid(weights.w_load) || weights.w_sim + weights.w_load == 0.0 {
        return Err(TriageError::InvalidWeights);
    }
    let max_workload = scored.iter().map(|(_, _, w)| *w).max().unwrap_or(0);
    let mut ranked: Vec<RankedCandidate> = scored
        .iter()
        .map(|(dev, sim, load)| {
            let idle = if max_workload == 0 {
                1.0
            } else {
                1.0 - f64::from(*load) / f64::from(max_workload)
            };
            RankedCandidate {
                dev: dev.clone(),
                score: weights.w_sim * sim + weights.w_load * idle,
                similarity: *sim,
                open_workload: *load,
            }
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.dev.cmp(&b.dev))
    });
    Ok(ranked)
}

pub fn recommend_assignee(
    report: &BugReportModel,
    candidates: &[Candidate],
    weights: Weights,
) -> Result<Vec<RankedCandidate>, TriageError> {
    let terms = tokenize(&report.full_text());
    let scored: Vec<(ActorId, f64, u32)> = candidates
        .iter()
        .map(|c| (c.dev.clone(), similarity(&terms, &c.history_terms), c.open_workload))
        .collect();
    rank_scored(&scored, weights)
}
