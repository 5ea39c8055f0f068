//! Structured bug reports, quality assessment, the intake dialogue and
//! report enhancement.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

/// The four fields a report needs before it leaves the dialogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReportField {
    ObservedBehavior,
    ExpectedBehavior,
    StepsToReproduce,
    Environment,
}

impl ReportField {
    /// Fixed order in which missing fields are asked for.
    pub const ORDER: [ReportField; 4] = [
        ReportField::ObservedBehavior,
        ReportField::ExpectedBehavior,
        ReportField::StepsToReproduce,
        ReportField::Environment,
    ];

    pub fn question(self) -> &'static str {
        match self {
            ReportField::ObservedBehavior => "What happened? Please describe what you observed.",
            ReportField::ExpectedBehavior => "What did you expect to happen?",
            ReportField::StepsToReproduce => "Which steps did you take right before the problem appeared?",
            ReportField::Environment => {
                "Which browser, operating system and app version were you using?"
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReproStep {
    pub number: u32,
    pub action: String,
}

/// Environment keys that may be taken from session metadata.
pub const INFERABLE_ENVIRONMENT_KEYS: [&str; 4] = ["os", "app_version", "browser", "device"];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugReportModel {
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub observed_behavior: String,
    #[serde(default)]
    pub expected_behavior: String,
    #[serde(default)]
    pub steps_to_reproduce: Vec<ReproStep>,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity_hint: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<String>,
    /// Session metadata captured with the submission (user agent, app build, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
    /// Fields filled with a placeholder rather than real content.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub placeholders: BTreeSet<ReportField>,
}

impl BugReportModel {
    pub fn is_populated(&self, field: ReportField) -> bool {
        if self.placeholders.contains(&field) {
            return false;
        }
        match field {
            ReportField::ObservedBehavior => !self.observed_behavior.trim().is_empty(),
            ReportField::ExpectedBehavior => !self.expected_behavior.trim().is_empty(),
            ReportField::StepsToReproduce => self
                .steps_to_reproduce
                .iter()
                .any(|s| !s.action.trim().is_empty()),
            ReportField::Environment => self.environment.values().any(|v| !v.trim().is_empty()),
        }
    }

    /// Free text used for keyword and similarity matching.
    pub fn summary_text(&self) -> String {
        let mut text = String::new();
        for part in [&self.title, &self.observed_behavior] {
            if !part.is_empty() {
                text.push_str(part);
                text.push(' ');
            }
        }
        text.trim_end().to_string()
    }

    /// Every textual field, for assignment similarity.
    pub fn full_text(&self) -> String {
        let mut parts = vec![
            self.title.clone(),
            self.observed_behavior.clone(),
            self.expected_behavior.clone(),
        ];
        parts.extend(self.steps_to_reproduce.iter().map(|s| s.action.clone()));
        parts.retain(|p| !p.is_empty());
        parts.join(" ")
    }

    fn set_field_from_text(&mut self, field: ReportField, text: &str) {
        let text = text.trim();
        if text.is_empty() {
            return;
        }
        match field {
            ReportField::ObservedBehavior => self.observed_behavior = text.to_string(),
            ReportField::ExpectedBehavior => self.expected_behavior = text.to_string(),
            ReportField::StepsToReproduce => self.steps_to_reproduce = parse_steps(text),
            ReportField::Environment => {
                let parsed = parse_environment(text);
                if parsed.is_empty() {
                    self.environment.insert("details".to_string(), text.to_string());
                } else {
                    self.environment.extend(parsed);
                }
            }
        }
        self.placeholders.remove(&field);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRecord {
    pub missing_fields: BTreeSet<ReportField>,
    pub completeness: f64,
}

/// Completeness is the share of the four required fields that are populated.
pub fn assess_quality(report: &BugReportModel) -> QualityRecord {
    let missing_fields: BTreeSet<ReportField> = ReportField::ORDER
        .into_iter()
        .filter(|f| !report.is_populated(*f))
        .collect();
    let populated = ReportField::ORDER.len() - missing_fields.len();
    QualityRecord {
        completeness: populated as f64 / ReportField::ORDER.len() as f64,
        missing_fields,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub field: ReportField,
    pub question: String,
    #[serde(default)]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub turns: Vec<DialogueTurn>,
}

impl Transcript {
    /// The latest question still waiting for an answer.
    pub fn pending(&self) -> Option<&DialogueTurn> {
        self.turns.last().filter(|t| t.answer.is_none())
    }

    pub fn ask(&mut self, field: ReportField) {
        self.turns.push(DialogueTurn {
            field,
            question: field.question().to_string(),
            answer: None,
        });
    }

    /// Records `answer` against the pending question. Returns false when
    /// nothing was pending.
    pub fn answer(&mut self, answer: &str) -> bool {
        match self.turns.last_mut() {
            Some(turn) if turn.answer.is_none() => {
                turn.answer = Some(answer.to_string());
                true
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prompt {
    FollowUp { field: ReportField, question: String },
    Sufficient,
}

/// Merges dialogue answers and session metadata into the report.
pub fn compile_report(transcript: &Transcript, report: &BugReportModel) -> BugReportModel {
    let mut compiled = report.clone();
    for turn in &transcript.turns {
        if let Some(answer) = &turn.answer {
            if !compiled.is_populated(turn.field) {
                compiled.set_field_from_text(turn.field, answer);
            }
            if !compiled.is_populated(ReportField::ExpectedBehavior) {
                if let Some(expected) = expectation_sentence(answer) {
                    compiled.set_field_from_text(ReportField::ExpectedBehavior, &expected);
                }
            }
        }
    }
    if !compiled.is_populated(ReportField::Environment) {
        for key in INFERABLE_ENVIRONMENT_KEYS {
            if let Some(value) = compiled.metadata.get(key).filter(|v| !v.trim().is_empty()) {
                compiled.environment.insert(key.to_string(), value.clone());
            }
        }
        if compiled.is_populated(ReportField::Environment) {
            compiled.placeholders.remove(&ReportField::Environment);
        }
    }
    compiled
}

/// Asks for the first missing field, or reports that the dialogue is done.
pub fn next_prompt(transcript: &Transcript, report: &BugReportModel) -> Prompt {
    let compiled = compile_report(transcript, report);
    match ReportField::ORDER
        .into_iter()
        .find(|f| !compiled.is_populated(*f))
    {
        Some(field) => Prompt::FollowUp {
            field,
            question: field.question().to_string(),
        },
        None => Prompt::Sufficient,
    }
}

/// Fills gaps from the dialogue and normalizes the report. The input is
/// left untouched and no populated field is ever cleared.
pub fn enhance(report: &BugReportModel, transcript: &Transcript) -> BugReportModel {
    let mut enhanced = compile_report(transcript, report);
    enhanced.title = collapse_whitespace(&enhanced.title);
    enhanced.observed_behavior = enhanced.observed_behavior.trim().to_string();
    enhanced.expected_behavior = enhanced.expected_behavior.trim().to_string();
    for (i, step) in enhanced.steps_to_reproduce.iter_mut().enumerate() {
        step.number = i as u32 + 1;
        step.action = step.action.trim().to_string();
    }
    let mut environment = BTreeMap::new();
    for (key, value) in std::mem::take(&mut enhanced.environment) {
        environment
            .entry(key.trim().to_lowercase())
            .or_insert_with(|| value.trim().to_string());
    }
    enhanced.environment = environment;
    enhanced
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// First sentence that states an expectation ("I expected ...").
fn expectation_sentence(text: &str) -> Option<String> {
    text.split(['.', '!', '?', '\n'])
        .map(str::trim)
        .find(|s| {
            let lower = s.to_lowercase();
            lower.contains("expected") || lower.contains("expect to") || lower.contains("should have")
        })
        .map(str::to_string)
}

/// Splits free text into steps, keeping any numbers the reporter wrote.
pub fn parse_steps(text: &str) -> Vec<ReproStep> {
    let mut steps = Vec::new();
    for (i, raw) in text.split(['\n', ';']).map(str::trim).filter(|s| !s.is_empty()).enumerate() {
        let (number, action) = split_step_number(raw);
        steps.push(ReproStep {
            number: number.unwrap_or(i as u32 + 1),
            action: action.to_string(),
        });
    }
    steps
}

fn split_step_number(raw: &str) -> (Option<u32>, &str) {
    let body = raw
        .strip_prefix("step ")
        .or_else(|| raw.strip_prefix("Step "))
        .unwrap_or(raw);
    let digits = body.chars().take_while(char::is_ascii_digit).count();
    if digits == 0 {
        return (None, raw);
    }
    let rest = body[digits..].trim_start_matches(['.', ')', ':', '-']).trim_start();
    match body[..digits].parse() {
        Ok(n) if !rest.is_empty() => (Some(n), rest),
        _ => (None, raw),
    }
}

/// Parses `key: value` / `key=value` pairs separated by commas or newlines.
pub fn parse_environment(text: &str) -> BTreeMap<String, String> {
    text.split([',', '\n', ';'])
        .filter_map(|pair| {
            let (key, value) = pair.split_once(':').or_else(|| pair.split_once('='))?;
            let key = key.trim().to_lowercase().replace(' ', "_");
            let value = value.trim();
            (!key.is_empty() && !value.is_empty()).then(|| (key, value.to_string()))
        })
        .collect()
}
