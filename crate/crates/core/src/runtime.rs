//! Module lifecycle support: timers, dynamic memory accounts, usage
//! counters, and resource-exception policy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RuntimeError {
    #[error("timer interval must be positive")]
    ZeroInterval,
    #[error("duplicate timer id `{0}`")]
    DuplicateTimer(String),
    #[error("allocation of {requested} bytes exceeds budget ({allocated}/{budget} in use)")]
    OverBudget {
        requested: u64,
        allocated: u64,
        budget: u64,
    },
    #[error("duplicate allocation handle `{0}`")]
    DuplicateHandle(String),
    #[error("free of unknown handle `{0}`")]
    UnknownHandle(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Central,
    Peripheral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimerRegistration {
    pub timer_id: String,
    pub interval_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExceptionKind {
    Time,
    Mem,
}

impl ExceptionKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExceptionKind::Time => "TimeException",
            ExceptionKind::Mem => "MemException",
        }
    }
}

/// What the central runtime does when a peripheral reports an exception.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExceptionPolicy {
    /// Terminate the most recently launched module on the raising processor.
    #[default]
    TerminateMostRecent,
    /// Terminate the module with the highest cycle count on that processor.
    TerminateTopCpu,
    /// Record only.
    Report,
}

/// Queue depth at which a TimeException fires: 90% of capacity, rounded up.
pub fn time_exception_threshold(capacity: usize) -> usize {
    (capacity * 9 + 9) / 10
}

/// Dynamic-memory account for one module. Allocation beyond the budget fails
/// (and the runtime raises MemException); frees must match allocations or the
/// teardown report flags a leak.
#[derive(Debug, Clone, Default)]
pub struct MemoryAccount {
    pub budget: u64,
    pub allocated: u64,
    pub peak: u64,
    handles: std::collections::BTreeMap<String, u64>,
}

impl MemoryAccount {
    pub fn new(budget: u64) -> MemoryAccount {
        MemoryAccount {
            budget,
            ..Default::default()
        }
    }

    pub fn malloc(&mut self, handle: &str, bytes: u64) -> Result<(), RuntimeError> {
        if self.handles.contains_key(handle) {
            return Err(RuntimeError::DuplicateHandle(handle.to_string()));
        }
        if self.allocated + bytes > self.budget {
            return Err(RuntimeError::OverBudget {
                requested: bytes,
                allocated: self.allocated,
                budget: self.budget,
            });
        }
        self.allocated += bytes;
        self.peak = self.peak.max(self.allocated);
        self.handles.insert(handle.to_string(), bytes);
        Ok(())
    }

    pub fn free(&mut self, handle: &str) -> Result<(), RuntimeError> {
        match self.handles.remove(handle) {
            Some(bytes) => {
                self.allocated -= bytes;
                Ok(())
            }
            None => Err(RuntimeError::UnknownHandle(handle.to_string())),
        }
    }

    /// Handles never freed, reported at teardown.
    pub fn leaked(&self) -> Vec<(String, u64)> {
        self.handles.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }
}

/// Software counters a peripheral runtime keeps locally; the central runtime
/// snapshots them via `query_stats`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct UsageCounters {
    pub processor_cycles: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
    pub messages_dropped: u64,
    pub peak_queue_depth: usize,
    pub peak_allocated: u64,
}

impl UsageCounters {
    pub fn absorb(&mut self, other: &UsageCounters) {
        self.processor_cycles += other.processor_cycles;
        self.messages_sent += other.messages_sent;
        self.messages_received += other.messages_received;
        self.messages_dropped += other.messages_dropped;
        self.peak_queue_depth = self.peak_queue_depth.max(other.peak_queue_depth);
        self.peak_allocated = self.peak_allocated.max(other.peak_allocated);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_is_ninety_percent_rounded_up() {
        assert_eq!(time_exception_threshold(16), 15);
        assert_eq!(time_exception_threshold(10), 9);
        assert_eq!(time_exception_threshold(4), 4);
    }

    #[test]
    fn malloc_free_conserves() {
        let mut acct = MemoryAccount::new(1024);
        acct.malloc("h1", 512).unwrap();
        assert_eq!(acct.allocated, 512);
        acct.free("h1").unwrap();
        assert_eq!(acct.allocated, 0);
        assert_eq!(acct.peak, 512);
        assert!(acct.leaked().is_empty());
    }

    #[test]
    fn over_budget_fails() {
        let mut acct = MemoryAccount::new(100);
        acct.malloc("h1", 60).unwrap();
        assert!(matches!(
            acct.malloc("h2", 60),
            Err(RuntimeError::OverBudget { .. })
        ));
        assert_eq!(acct.allocated, 60);
    }

    #[test]
    fn double_free_and_unknown_free_fail() {
        let mut acct = MemoryAccount::new(100);
        acct.malloc("h1", 10).unwrap();
        acct.free("h1").unwrap();
        assert!(matches!(
            acct.free("h1"),
            Err(RuntimeError::UnknownHandle(_))
        ));
    }

    #[test]
    fn leak_reported() {
        let mut acct = MemoryAccount::new(100);
        acct.malloc("h1", 10).unwrap();
        assert_eq!(acct.leaked(), vec![("h1".to_string(), 10)]);
    }
}
