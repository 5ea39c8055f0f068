//! Human-in-the-loop task queue with role-gated decisions.

use std::collections::HashMap;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{BugCase, LifecycleStage, OutcomeKind, StageOutcome};
use crate::model::{Actor, ActorId, ArtifactRef, CaseId, Role};

pub type TaskId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskStatus {
    Open,
    Decided,
    Superseded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HilTask {
    pub task_id: TaskId,
    pub case_id: CaseId,
    pub stage: LifecycleStage,
    pub role: Role,
    pub action_set: Vec<OutcomeKind>,
    /// Artifacts the human is asked to review.
    pub payload: Vec<ArtifactRef>,
    /// When set, only this actor may decide.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignee: Option<ActorId>,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decided_by: Option<ActorId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<StageOutcome>,
    /// Event sequence number whose effect created the task.
    pub source_seq: u64,
}

/// What a task is created from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub case_id: CaseId,
    pub source_seq: u64,
    pub stage: LifecycleStage,
    pub role: Role,
    pub action_set: Vec<OutcomeKind>,
    pub payload: Vec<ArtifactRef>,
    pub assignee: Option<ActorId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HilError {
    #[error("case {0} already has an open task")]
    TaskAlreadyOpen(CaseId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("task {0} is no longer open")]
    StaleTask(TaskId),
    #[error("actor {actor} cannot act on a {role} task")]
    RoleMismatch { actor: ActorId, role: Role },
    #[error("{decision:?} is not one of the task's actions")]
    IllegalDecision { decision: OutcomeKind },
    #[error("{0} authored the fix and cannot review it")]
    SelfReview(ActorId),
    #[error("no responsible human yet")]
    NotYetAssigned,
}

#[derive(Default)]
struct Queue {
    tasks: Vec<HilTask>,
    by_source: HashMap<(CaseId, u64), TaskId>,
    open: HashMap<CaseId, TaskId>,
    fix_author: HashMap<CaseId, ActorId>,
}

#[derive(Default)]
pub struct TaskQueue {
    inner: Mutex<Queue>,
}

impl TaskQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates the task for `req`. Creating again from the same source
    /// event returns the existing task, so recovery can replay effects.
    pub fn create_task(&self, req: TaskSpec) -> Result<HilTask, HilError> {
        let mut q = self.inner.lock();
        let key = (req.case_id.clone(), req.source_seq);
        if let Some(id) = q.by_source.get(&key) {
            return Ok(q.tasks[*id as usize - 1].clone());
        }
        if q.open.contains_key(&req.case_id) {
            return Err(HilError::TaskAlreadyOpen(req.case_id));
        }
        let task = HilTask {
            task_id: q.tasks.len() as TaskId + 1,
            case_id: req.case_id,
            stage: req.stage,
            role: req.role,
            action_set: req.action_set,
            payload: req.payload,
            assignee: req.assignee,
            status: TaskStatus::Open,
            decided_by: None,
            decision: None,
            source_seq: req.source_seq,
        };
        q.by_source.insert(key, task.task_id);
        q.open.insert(task.case_id.clone(), task.task_id);
        q.tasks.push(task.clone());
        Ok(task)
    }

    pub fn get(&self, task_id: TaskId) -> Option<HilTask> {
        let q = self.inner.lock();
        q.tasks.get((task_id as usize).wrapping_sub(1)).cloned()
    }

    pub fn open_task(&self, case: &CaseId) -> Option<HilTask> {
        let q = self.inner.lock();
        q.open.get(case).map(|id| q.tasks[*id as usize - 1].clone())
    }

    /// Open tasks for `role`, oldest first. With `actor`, tasks bound to
    /// someone else are left out.
    pub fn list_tasks(&self, role: Role, actor: Option<&ActorId>) -> Vec<HilTask> {
        let q = self.inner.lock();
        q.tasks
            .iter()
            .filter(|t| t.status == TaskStatus::Open && t.role == role)
            .filter(|t| match (actor, &t.assignee) {
                (Some(a), Some(bound)) => a == bound,
                _ => true,
            })
            .cloned()
            .collect()
    }

    pub fn tasks_for_case(&self, case: &CaseId) -> Vec<HilTask> {
        let q = self.inner.lock();
        q.tasks.iter().filter(|t| &t.case_id == case).cloned().collect()
    }

    pub fn all_tasks(&self) -> Vec<HilTask> {
        self.inner.lock().tasks.clone()
    }

    fn check(q: &Queue, task: &HilTask, actor: &Actor, decision: &StageOutcome) -> Result<(), HilError> {
        if task.status != TaskStatus::Open {
            return Err(HilError::StaleTask(task.task_id));
        }
        let bound_elsewhere = task.assignee.as_ref().is_some_and(|a| a != &actor.actor_id);
        if !actor.has_role(task.role) || bound_elsewhere {
            return Err(HilError::RoleMismatch {
                actor: actor.actor_id.clone(),
                role: task.role,
            });
        }
        if !task.action_set.contains(&decision.kind) {
            return Err(HilError::IllegalDecision {
                decision: decision.kind,
            });
        }
        if task.stage == LifecycleStage::ReviewerReview
            && q.fix_author.get(&task.case_id) == Some(&actor.actor_id)
        {
            return Err(HilError::SelfReview(actor.actor_id.clone()));
        }
        Ok(())
    }

    /// Runs every check `submit_decision` would, without deciding.
    pub fn validate(&self, task_id: TaskId, actor: &Actor, decision: &StageOutcome) -> Result<HilTask, HilError> {
        let q = self.inner.lock();
        let task = q
            .tasks
            .get((task_id as usize).wrapping_sub(1))
            .ok_or(HilError::UnknownTask(task_id))?;
        Self::check(&q, task, actor, decision)?;
        Ok(task.clone())
    }

    /// Decides the task atomically and returns the outcome for the kernel.
    pub fn submit_decision(
        &self,
        task_id: TaskId,
        actor: &Actor,
        decision: StageOutcome,
    ) -> Result<StageOutcome, HilError> {
        let mut q = self.inner.lock();
        let idx = (task_id as usize).wrapping_sub(1);
        let task = q.tasks.get(idx).ok_or(HilError::UnknownTask(task_id))?;
        Self::check(&q, task, actor, &decision)?;
        let case = task.case_id.clone();
        if task.stage == LifecycleStage::ManualFix {
            q.fix_author.insert(case.clone(), actor.actor_id.clone());
        }
        let task = &mut q.tasks[idx];
        task.status = TaskStatus::Decided;
        task.decided_by = Some(actor.actor_id.clone());
        task.decision = Some(decision.clone());
        q.open.remove(&case);
        Ok(decision)
    }

    /// Marks the case's open task superseded, if any.
    pub fn supersede_open(&self, case: &CaseId) -> Option<TaskId> {
        let mut q = self.inner.lock();
        let id = q.open.remove(case)?;
        q.tasks[id as usize - 1].status = TaskStatus::Superseded;
        Some(id)
    }

    /// Records the author of a manual fix decided outside the queue, as when
    /// a queue is rebuilt from the event log.
    pub fn note_fix_author(&self, case: &CaseId, author: ActorId) {
        self.inner.lock().fix_author.insert(case.clone(), author);
    }

    /// JSON-lines dump of every task in creation order.
    pub fn export(&self) -> String {
        let q = self.inner.lock();
        let mut out = String::new();
        for t in &q.tasks {
            out.push_str(&serde_json::to_string(t).expect("task serializes"));
            out.push('\n');
        }
        out
    }
}

/// The one human accountable for the case.
pub fn responsible_human(case: &BugCase) -> Result<ActorId, HilError> {
    case.responsible_human
        .as_ref()
        .map(|r| r.actor.clone())
        .ok_or(HilError::NotYetAssigned)
}
