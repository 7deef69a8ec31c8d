use serde::{Deserialize, Serialize};

pub const DEFAULT_MAX_RETRIES: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskStatus {
    Pending,
    Active,
    Done,
    Abandoned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: u32,
    pub description: String,
    pub status: TaskStatus,
    pub retry_count: u32,
}

/// Result of charging a rejection to the active task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetryOutcome {
    Retry(u32),
    Abandoned,
}

/// Ordered tasks with at most one active. Finished tasks stay in place as a
/// record; re-planning only replaces the pending tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskQueue {
    tasks: Vec<Task>,
    next_id: u32,
    max_retries: u32,
}

impl Default for TaskQueue {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_RETRIES)
    }
}

impl TaskQueue {
    pub fn new(max_retries: u32) -> Self {
        Self {
            tasks: Vec::new(),
            next_id: 1,
            max_retries,
        }
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn max_retries(&self) -> u32 {
        self.max_retries
    }

    pub fn active(&self) -> Option<&Task> {
        self.tasks.iter().find(|t| t.status == TaskStatus::Active)
    }

    pub fn pending(&self) -> impl Iterator<Item = &Task> {
        self.tasks
            .iter()
            .filter(|t| t.status == TaskStatus::Pending)
    }

    /// True when nothing is active or pending.
    pub fn is_exhausted(&self) -> bool {
        self.active().is_none() && self.pending().next().is_none()
    }

    /// Drops pending tasks and appends `descriptions` as new pending tasks.
    /// Returns how many were added.
    pub fn replace_pending(&mut self, descriptions: &[String]) -> usize {
        self.tasks.retain(|t| t.status != TaskStatus::Pending);
        for d in descriptions {
            self.tasks.push(Task {
                id: self.next_id,
                description: d.clone(),
                status: TaskStatus::Pending,
                retry_count: 0,
            });
            self.next_id += 1;
        }
        descriptions.len()
    }

    /// Activates the first pending task unless one is already active.
    pub fn activate_next(&mut self) -> Option<&Task> {
        if self.active().is_none() {
            if let Some(t) = self
                .tasks
                .iter_mut()
                .find(|t| t.status == TaskStatus::Pending)
            {
                t.status = TaskStatus::Active;
            }
        }
        self.active()
    }

    fn active_mut(&mut self) -> Option<&mut Task> {
        self.tasks
            .iter_mut()
            .find(|t| t.status == TaskStatus::Active)
    }

    pub fn complete_active(&mut self) -> Option<u32> {
        let t = self.active_mut()?;
        t.status = TaskStatus::Done;
        Some(t.id)
    }

    /// Counts a rejection against the active task, abandoning it when the
    /// count reaches the limit. `None` if no task is active.
    pub fn record_rejection(&mut self) -> Option<RetryOutcome> {
        let max = self.max_retries;
        let t = self.active_mut()?;
        t.retry_count = (t.retry_count + 1).min(max);
        if t.retry_count >= max {
            t.status = TaskStatus::Abandoned;
            Some(RetryOutcome::Abandoned)
        } else {
            Some(RetryOutcome::Retry(t.retry_count))
        }
    }
}
