//! Messages, per-module bounded event queues, and the replicated module
//! location table. Best-effort: a full destination queue silently drops the
//! arriving message, and nothing acknowledges single messages; reliability
//! exists only through request/response pairing.

use crate::platform::SimTime;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

/// Module index within one application.
pub type ModuleId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum TransportError {
    #[error("module {0} is already registered")]
    DuplicateRegistration(ModuleId),
    #[error("destination module {0} is not in the sender's location table")]
    UnknownDestination(ModuleId),
    #[error("source module {0} is not registered")]
    UnregisteredSource(ModuleId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    DsmRequestBatch,
    DsmResponse,
    RpcCall,
    RpcReturn,
    LocationUpdate,
    AppData,
}

impl MessageKind {
    pub const ALL: [MessageKind; 6] = [
        MessageKind::DsmRequestBatch,
        MessageKind::DsmResponse,
        MessageKind::RpcCall,
        MessageKind::RpcReturn,
        MessageKind::LocationUpdate,
        MessageKind::AppData,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MessageKind::DsmRequestBatch => "dsm_request_batch",
            MessageKind::DsmResponse => "dsm_response",
            MessageKind::RpcCall => "rpc_call",
            MessageKind::RpcReturn => "rpc_return",
            MessageKind::LocationUpdate => "location_update",
            MessageKind::AppData => "app_data",
        }
    }
}

/// The unit of inter-module communication. `seq` orders deliveries between a
/// fixed pair (the bus is serial) and `corr` pairs requests with responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub src: ModuleId,
    pub dst: ModuleId,
    pub kind: MessageKind,
    pub payload: Vec<u8>,
    pub seq: u64,
    pub corr: u64,
}

impl Message {
    pub fn payload_len(&self) -> usize {
        self.payload.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EventKind {
    SensorData,
    Timer,
    IncomingMessage,
    ResourceException,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventBody {
    SensorData {
        channel: u32,
        sample: Vec<i64>,
    },
    Timer {
        timer_id: String,
    },
    IncomingMessage(Message),
    ResourceException {
        kind: crate::runtime::ExceptionKind,
        module: ModuleId,
        detail: String,
    },
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::SensorData { .. } => EventKind::SensorData,
            EventBody::Timer { .. } => EventKind::Timer,
            EventBody::IncomingMessage(_) => EventKind::IncomingMessage,
            EventBody::ResourceException { .. } => EventKind::ResourceException,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub body: EventBody,
    pub enqueue_time: SimTime,
}

/// Bounded FIFO with kind-priority retrieval: polling returns the oldest
/// sensor or timer event if any is queued, otherwise the oldest remaining
/// event. Same-kind order is never disturbed.
#[derive(Debug, Clone)]
pub struct EventQueue {
    capacity: usize,
    entries: VecDeque<Event>,
}

impl EventQueue {
    pub const DEFAULT_CAPACITY: usize = 16;

    pub fn new(capacity: usize) -> EventQueue {
        EventQueue {
            capacity,
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn depth(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drop-newest policy: a full queue rejects the arriving event.
    pub fn try_enqueue(&mut self, ev: Event) -> Result<(), Event> {
        if self.entries.len() >= self.capacity {
            return Err(ev);
        }
        self.entries.push_back(ev);
        Ok(())
    }

    /// Priority poll. Sensor data and timers outrank everything else so a
    /// busy owner keeps its data processing ahead of coherence traffic.
    pub fn poll(&mut self) -> Option<Event> {
        let preferred = self.entries.iter().position(|e| {
            matches!(
                e.body.kind(),
                EventKind::SensorData | EventKind::Timer
            )
        });
        match preferred {
            Some(i) => self.entries.remove(i),
            None => self.entries.pop_front(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Event> {
        self.entries.iter()
    }

    /// Remove and return the first event matching the predicate, leaving
    /// everything else (including earlier entries) in place.
    pub fn take_first(&mut self, pred: impl Fn(&Event) -> bool) -> Option<Event> {
        let pos = self.entries.iter().position(pred)?;
        self.entries.remove(pos)
    }

    /// Discard everything, returning how many events were pending.
    pub fn clear(&mut self) -> usize {
        let n = self.entries.len();
        self.entries.clear();
        n
    }
}

/// Per-processor replica of module placements.
#[derive(Debug, Clone, Default)]
pub struct LocationTable {
    map: BTreeMap<ModuleId, usize>,
}

impl LocationTable {
    pub fn lookup(&self, module: ModuleId) -> Option<usize> {
        self.map.get(&module).copied()
    }

    pub fn apply_update(&mut self, module: ModuleId, processor: Option<usize>) {
        match processor {
            Some(p) => {
                self.map.insert(module, p);
            }
            None => {
                self.map.remove(&module);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Forced-drop fault plan: drop the `occurrence`-th message (0-based, counted
/// per kind over the whole run) of the given kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DropPlan {
    pub rules: Vec<DropRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRule {
    pub kind: MessageKind,
    pub occurrence: u64,
}

impl DropPlan {
    pub fn should_drop(&self, kind: MessageKind, occurrence: u64) -> bool {
        self.rules
            .iter()
            .any(|r| r.kind == kind && r.occurrence == occurrence)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(body: EventBody) -> Event {
        Event {
            body,
            enqueue_time: SimTime::ZERO,
        }
    }

    fn msg_event() -> Event {
        ev(EventBody::IncomingMessage(Message {
            src: 0,
            dst: 1,
            kind: MessageKind::DsmRequestBatch,
            payload: vec![],
            seq: 0,
            corr: 0,
        }))
    }

    fn sensor_event(channel: u32) -> Event {
        ev(EventBody::SensorData {
            channel,
            sample: vec![0, 0, 0],
        })
    }

    fn timer_event(id: &str) -> Event {
        ev(EventBody::Timer {
            timer_id: id.into(),
        })
    }

    #[test]
    fn sensor_outranks_dsm_request() {
        let mut q = EventQueue::new(8);
        q.try_enqueue(msg_event()).unwrap();
        q.try_enqueue(sensor_event(0)).unwrap();
        let first = q.poll().unwrap();
        assert_eq!(first.body.kind(), EventKind::SensorData);
        let second = q.poll().unwrap();
        assert_eq!(second.body.kind(), EventKind::IncomingMessage);
    }

    #[test]
    fn empty_queue_polls_none() {
        let mut q = EventQueue::new(4);
        assert!(q.poll().is_none());
    }

    #[test]
    fn fifo_within_kind() {
        let mut q = EventQueue::new(8);
        q.try_enqueue(timer_event("t1")).unwrap();
        q.try_enqueue(timer_event("t2")).unwrap();
        match q.poll().unwrap().body {
            EventBody::Timer { timer_id } => assert_eq!(timer_id, "t1"),
            _ => panic!(),
        }
        match q.poll().unwrap().body {
            EventBody::Timer { timer_id } => assert_eq!(timer_id, "t2"),
            _ => panic!(),
        }
    }

    #[test]
    fn full_queue_rejects_newest() {
        let mut q = EventQueue::new(2);
        q.try_enqueue(timer_event("a")).unwrap();
        q.try_enqueue(timer_event("b")).unwrap();
        assert!(q.try_enqueue(timer_event("c")).is_err());
        assert_eq!(q.depth(), 2);
    }

    #[test]
    fn drop_plan_matches_occurrence() {
        let plan = DropPlan {
            rules: vec![DropRule {
                kind: MessageKind::DsmRequestBatch,
                occurrence: 1,
            }],
        };
        assert!(!plan.should_drop(MessageKind::DsmRequestBatch, 0));
        assert!(plan.should_drop(MessageKind::DsmRequestBatch, 1));
        assert!(!plan.should_drop(MessageKind::DsmResponse, 1));
    }
}
