//! The discrete-event engine: a global occurrence heap ordered by virtual
//! time, per-processor serialized busy accounting, bounded per-module event
//! queues, and the best-effort transport between them.
//!
//! Handler slices execute synchronously at their dispatch occurrence; their
//! effects on other processors are all scheduled strictly later, so slices
//! commute with concurrent occurrences and one (config, seed) pair replays
//! bit-identically.

use crate::dsm::{CoherenceState, DsmCore, DsmResult, GroupTopology};
use crate::instrument::{ModuleIr, Stub};
use crate::platform::{CpuAccount, Platform, SimDuration, SimTime, VirtualClock};
use crate::runtime::{
    time_exception_threshold, ExceptionKind, ExceptionPolicy, MemoryAccount, ModuleKind,
    UsageCounters,
};
use crate::sim::sensors::GeneratorSpec;
use crate::transport::{
    DropPlan, Event, EventBody, EventQueue, LocationTable, Message, MessageKind,
};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown destination module index {0}")]
    UnknownDestination(usize),
    #[error("module {0} is already registered")]
    DuplicateRegistration(usize),
    #[error("handler fault in `{module}`: {detail}")]
    HandlerFault { module: String, detail: String },
    #[error(transparent)]
    Protocol(#[from] crate::dsm::ProtocolError),
}

pub type ProcIdx = usize;
pub type ModIdx = usize;
pub type ObjIdx = usize;

/// One module as the engine sees it: already-instrumented IR plus placement
/// and local limits.
#[derive(Debug, Clone)]
pub struct SimModule {
    pub name: String,
    pub ir: ModuleIr,
    pub proc: ProcIdx,
    pub kind: ModuleKind,
    pub queue_capacity: usize,
    pub memory_budget: u64,
}

#[derive(Debug, Clone)]
pub struct SimObject {
    pub id: String,
    pub stub: Stub,
    pub owner: ModIdx,
    pub group: Vec<ModIdx>,
}

#[derive(Debug, Clone)]
pub struct SimInput {
    pub platform: Platform,
    pub modules: Vec<SimModule>,
    pub objects: Vec<SimObject>,
    /// channel -> (hosting processor, generator)
    pub sensors: BTreeMap<u32, (ProcIdx, GeneratorSpec)>,
    pub seed: u64,
    pub duration: SimDuration,
    pub stall_timeout: SimDuration,
    pub policy: ExceptionPolicy,
    pub drop_plan: DropPlan,
    /// Off in legacy mode: shared objects collapse to one plain store and no
    /// coherence traffic exists.
    pub dsm_enabled: bool,
    pub collect_trace: bool,
}

/// Cycle costs of the interpreted runtime primitives.
pub mod costs {
    /// One pre-access state check: a few instructions.
    pub const CHECK_CYCLES: u64 = 8;
    /// Local copy read/write bookkeeping.
    pub const ACCESS_CYCLES: u64 = 6;
    /// Owner-side handling of one coherence batch.
    pub const SERVE_CYCLES: u64 = 120;
    /// Synchronous sensor read on a peripheral (local ADC).
    pub const PULL_CYCLES: u64 = 30;
    /// Allocator bookkeeping.
    pub const MALLOC_CYCLES: u64 = 40;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeClass {
    Replicate,
    Acquire,
    Release,
}

/// One requester round trip, with the exact additive decomposition
/// `total = transport_out + owner_lazy + transport_back`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExchangeRec {
    pub module: ModIdx,
    pub owner: ModIdx,
    pub class: ExchangeClass,
    pub sent: SimTime,
    pub arrival: SimTime,
    pub resp_sent: SimTime,
    pub resp_recv: SimTime,
}

impl ExchangeRec {
    pub fn transport_ms(&self) -> f64 {
        (self.arrival - self.sent).as_ms() + (self.resp_recv - self.resp_sent).as_ms()
    }

    pub fn lazy_ms(&self) -> f64 {
        (self.resp_sent - self.arrival).as_ms()
    }

    pub fn total_ms(&self) -> f64 {
        (self.resp_recv - self.sent).as_ms()
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct OwnerStallRec {
    pub module: ModIdx,
    pub object: ObjIdx,
    pub start: SimTime,
    pub end: SimTime,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExceptionRec {
    pub kind: ExceptionKind,
    pub module: ModIdx,
    pub detail: String,
    pub at: SimTime,
    pub terminated: Option<ModIdx>,
}

/// Per-destination message conservation counts.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct DestCounts {
    pub sent_to: u64,
    pub delivered: u64,
    pub dropped: u64,
}

/// What the validator consumes when tracing is on.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceRecord {
    HandlerStart {
        module: ModIdx,
        t: SimTime,
    },
    HandlerEnd {
        module: ModIdx,
        t: SimTime,
    },
    PollDispatch {
        module: ModIdx,
        kind: &'static str,
        had_sensor_or_timer: bool,
        t: SimTime,
    },
    Send {
        src: ModIdx,
        dst: ModIdx,
        kind: MessageKind,
        corr: u64,
        src_owns_requested: bool,
        t: SimTime,
    },
    Arrive {
        dst: ModIdx,
        kind: MessageKind,
        corr: u64,
        t: SimTime,
    },
    Dropped {
        dst: ModIdx,
        kind: MessageKind,
        t: SimTime,
    },
    StateChange {
        module: ModIdx,
        object: ObjIdx,
        from: CoherenceState,
        to: CoherenceState,
        t: SimTime,
    },
}

#[derive(Debug, Default)]
pub struct RunOutput {
    pub end_time: SimTime,
    pub cpus: Vec<CpuAccount>,
    pub counters: Vec<UsageCounters>,
    pub handler_cycles: Vec<u64>,
    pub serve_cycles: Vec<u64>,
    pub check_cycles: Vec<u64>,
    pub kind_sent: BTreeMap<&'static str, u64>,
    pub kind_delivered: BTreeMap<&'static str, u64>,
    pub kind_dropped: BTreeMap<&'static str, u64>,
    pub per_dest: Vec<DestCounts>,
    pub exchanges: Vec<ExchangeRec>,
    pub owner_stalls: Vec<OwnerStallRec>,
    pub site_checks: BTreeMap<(ModIdx, usize), u64>,
    pub exceptions: Vec<ExceptionRec>,
    pub dsm_timeouts: u64,
    pub rpc_timeouts: u64,
    pub events_dropped: Vec<u64>,
    pub unhandled_events: Vec<u64>,
    pub stale_responses: u64,
    pub discarded_on_terminate: u64,
    pub faults: Vec<String>,
    pub leaks: Vec<(String, String, u64)>,
    pub final_values: BTreeMap<String, Vec<u8>>,
    pub trace: Vec<TraceRecord>,
}

// ---------------------------------------------------------------------------
// Internal state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum AwaitKind {
    DsmResponse { corr: u64 },
    RpcReturn { corr: u64 },
    ReleaseOf { obj: ObjIdx },
    Sleep,
}

#[derive(Debug)]
pub(crate) struct Stall {
    pub kind: AwaitKind,
    pub token: u64,
    pub satisfied: bool,
    pub resume: Option<Vec<DsmResult>>,
    pub started: SimTime,
}

#[derive(Debug)]
pub(crate) enum RunState {
    Idle,
    Stalled(Stall),
    Terminated,
}

#[derive(Debug, Default)]
pub(crate) struct Frame {
    pub proc: usize,
    pub block: usize,
    pub stmt: usize,
    pub substep: usize,
    pub loop_counters: BTreeMap<usize, u32>,
    pub acquired: std::collections::BTreeSet<ObjIdx>,
}

#[derive(Debug)]
pub(crate) struct Exec {
    pub frames: Vec<Frame>,
    pub rpc_reply_to: Option<(ModIdx, u64)>,
}

#[derive(Debug)]
pub(crate) struct ModState {
    pub queue: EventQueue,
    pub run: RunState,
    pub exec: Option<Exec>,
    pub mem: MemoryAccount,
    pub timers: BTreeMap<String, SimDuration>,
    pub registered: bool,
    pub started: bool,
    pub write_counter: u64,
    pub time_exc_latched: bool,
    pub launch_order: usize,
    /// (proc, block, stmt) -> site index, for check counting.
    pub site_index: BTreeMap<(usize, usize, usize), usize>,
}

#[derive(Debug)]
pub(crate) enum Occ {
    StartModules,
    Arrival {
        msg: Message,
        doomed: bool,
        penalty: SimDuration,
    },
    LocationUpdate {
        proc: ProcIdx,
        module: ModIdx,
        placement: Option<ProcIdx>,
    },
    TimerExpiry {
        module: ModIdx,
        timer_id: String,
        interval: SimDuration,
    },
    SensorPush {
        module: ModIdx,
        channel: u32,
        period: SimDuration,
    },
    Kick {
        proc: ProcIdx,
    },
    StallTimeout {
        module: ModIdx,
        token: u64,
    },
    SleepWake {
        module: ModIdx,
        token: u64,
    },
    ExceptionNotify {
        kind: ExceptionKind,
        module: ModIdx,
        detail: String,
    },
}

#[derive(Debug)]
struct Scheduled {
    at: SimTime,
    seq: u64,
    occ: Occ,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

pub struct Simulator {
    pub(crate) input: SimInput,
    pub(crate) clock: VirtualClock,
    heap: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
    pub(crate) cpus: Vec<CpuAccount>,
    pub(crate) mods: Vec<ModState>,
    pub(crate) core: DsmCore,
    /// Legacy single store, when DSM is off.
    pub(crate) plain_store: Vec<Vec<u8>>,
    pub(crate) tables: Vec<LocationTable>,
    pub(crate) rngs: Vec<ChaCha8Rng>,
    pub(crate) next_corr: u64,
    next_stall_token: u64,
    kind_send_count: BTreeMap<MessageKind, u64>,
    pair_last_arrival: BTreeMap<(ModIdx, ModIdx), SimTime>,
    pub(crate) exchange_by_corr: BTreeMap<u64, usize>,
    pub(crate) out: RunOutput,
    pub(crate) obj_index: BTreeMap<String, ObjIdx>,
    pub(crate) mod_index: BTreeMap<String, ModIdx>,
    launch_counter: usize,
    pub(crate) aborted: bool,
}

impl Simulator {
    pub fn new(input: SimInput) -> Simulator {
        use rand::SeedableRng;
        let n = input.modules.len();
        let topo = GroupTopology {
            owner_of: input.objects.iter().map(|o| o.owner).collect(),
            groups: input.objects.iter().map(|o| o.group.clone()).collect(),
            n_modules: n,
        };
        let initial: Vec<Vec<u8>> = input
            .objects
            .iter()
            .map(|o| vec![0u8; o.stub.byte_len()])
            .collect();
        let core = DsmCore::new(topo, &initial);
        let plain_store = initial;
        let mods = input
            .modules
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let mut site_index = BTreeMap::new();
                for (sid, site) in m.ir.sites().iter().enumerate() {
                    site_index.insert((site.proc, site.block, site.stmt), sid);
                }
                ModState {
                    queue: EventQueue::new(m.queue_capacity),
                    run: RunState::Idle,
                    exec: None,
                    mem: MemoryAccount::new(m.memory_budget),
                    timers: BTreeMap::new(),
                    registered: false,
                    started: false,
                    write_counter: 0,
                    time_exc_latched: false,
                    launch_order: i,
                    site_index,
                }
            })
            .collect();
        let rngs = (0..n)
            .map(|i| ChaCha8Rng::seed_from_u64(input.seed.wrapping_add(0x9e37 + i as u64)))
            .collect();
        let obj_index = input
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| (o.id.clone(), i))
            .collect();
        let mod_index = input
            .modules
            .iter()
            .enumerate()
            .map(|(i, m)| (m.name.clone(), i))
            .collect();
        let out = RunOutput {
            counters: vec![UsageCounters::default(); n],
            handler_cycles: vec![0; n],
            serve_cycles: vec![0; n],
            check_cycles: vec![0; n],
            per_dest: vec![DestCounts::default(); n],
            events_dropped: vec![0; n],
            unhandled_events: vec![0; n],
            ..Default::default()
        };
        Simulator {
            cpus: vec![CpuAccount::default(); input.platform.processors.len()],
            tables: vec![LocationTable::default(); input.platform.processors.len()],
            mods,
            core,
            plain_store,
            rngs,
            next_corr: 1,
            next_stall_token: 1,
            kind_send_count: BTreeMap::new(),
            pair_last_arrival: BTreeMap::new(),
            exchange_by_corr: BTreeMap::new(),
            out,
            obj_index,
            mod_index,
            clock: VirtualClock::default(),
            heap: BinaryHeap::new(),
            seq: 0,
            launch_counter: 0,
            aborted: false,
            input,
        }
    }

    pub(crate) fn schedule(&mut self, at: SimTime, occ: Occ) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Reverse(Scheduled { at, seq, occ }));
    }

    pub(crate) fn now(&self) -> SimTime {
        self.clock.now()
    }

    pub(crate) fn central_proc(&self) -> ProcIdx {
        self.input.platform.central_index()
    }

    pub(crate) fn trace(&mut self, rec: TraceRecord) {
        if self.input.collect_trace {
            self.out.trace.push(rec);
        }
    }

    /// Register every module from the central runtime and broadcast the
    /// location updates; module start happens after the last update lands so
    /// dependent traffic never races a stale table.
    fn register_all(&mut self) -> SimTime {
        let mut latest = SimTime::ZERO;
        for m in 0..self.input.modules.len() {
            let placed = self.input.modules[m].proc;
            let arrivals = self
                .register_module(m, placed)
                .expect("initial registration is unique");
            for t in arrivals {
                latest = latest.max(t);
            }
        }
        latest + SimDuration(1)
    }

    /// Central-table update plus a LocationUpdate to every peripheral
    /// runtime. Returns the per-processor arrival times.
    pub fn register_module(
        &mut self,
        module: ModIdx,
        placed: ProcIdx,
    ) -> Result<Vec<SimTime>, SimError> {
        if self.mods[module].registered {
            return Err(SimError::DuplicateRegistration(module));
        }
        self.mods[module].registered = true;
        self.mods[module].launch_order = self.launch_counter;
        self.launch_counter += 1;
        let central = self.central_proc();
        self.tables[central].apply_update(module, Some(placed));
        Ok(self.broadcast_location(module, Some(placed)))
    }

    pub(crate) fn broadcast_location(
        &mut self,
        module: ModIdx,
        placement: Option<ProcIdx>,
    ) -> Vec<SimTime> {
        let central = self.central_proc();
        let mut arrivals = Vec::new();
        let payload = 4usize;
        let procs: Vec<ProcIdx> = (0..self.input.platform.processors.len())
            .filter(|&p| p != central)
            .collect();
        for p in procs {
            let send_cycles = self.input.platform.processors[central].msg_send_cycles;
            let now = self.now();
            let (_, dep) = self.cpus[central].charge_cycles(
                &self.input.platform.processors[central],
                now,
                send_cycles,
            );
            let latency = self.input.platform.link.message_latency(payload, false);
            let at = dep + latency;
            *self
                .out
                .kind_sent
                .entry(MessageKind::LocationUpdate.name())
                .or_default() += 1;
            self.schedule(
                at,
                Occ::LocationUpdate {
                    proc: p,
                    module,
                    placement,
                },
            );
            arrivals.push(at);
        }
        arrivals
    }

    /// Snapshot of one processor's aggregated counters, the central runtime's
    /// `query_stats` view.
    pub fn query_stats(&self, proc: ProcIdx) -> UsageCounters {
        let mut total = UsageCounters::default();
        for (i, m) in self.input.modules.iter().enumerate() {
            if m.proc == proc {
                total.absorb(&self.out.counters[i]);
                total.peak_allocated = total.peak_allocated.max(self.mods[i].mem.peak);
            }
        }
        total.processor_cycles = self.cpus[proc].cycles;
        total
    }

    /// Stop every peripheral module: deregister, broadcast table updates,
    /// discard and count pending events. Idempotent.
    pub fn terminate_application(&mut self) {
        for m in 0..self.input.modules.len() {
            if self.input.modules[m].kind == ModuleKind::Peripheral {
                self.terminate_module(m);
            }
        }
    }

    pub(crate) fn terminate_module(&mut self, m: ModIdx) {
        if matches!(self.mods[m].run, RunState::Terminated) {
            return;
        }
        let discarded = self.mods[m].queue.clear();
        self.out.discarded_on_terminate += discarded as u64;
        self.mods[m].run = RunState::Terminated;
        self.mods[m].exec = None;
        self.mods[m].timers.clear();
        if self.mods[m].registered {
            self.mods[m].registered = false;
            let central = self.central_proc();
            self.tables[central].apply_update(m, None);
            self.broadcast_location(m, None);
        }
    }

    pub fn running_modules(&self) -> Vec<ModIdx> {
        (0..self.mods.len())
            .filter(|&m| !matches!(self.mods[m].run, RunState::Terminated))
            .collect()
    }

    // -----------------------------------------------------------------------
    // Transport
    // -----------------------------------------------------------------------

    /// Route and schedule one message departing at `departure`; the caller
    /// has already accounted the sender's send cycles. A destination missing
    /// from the sender-side table is a routing error, distinct from a silent
    /// drop.
    pub(crate) fn send_message(
        &mut self,
        departure: SimTime,
        src: ModIdx,
        dst: ModIdx,
        kind: MessageKind,
        payload: Vec<u8>,
        corr: u64,
    ) -> Result<(), SimError> {
        let src_proc = self.input.modules[src].proc;
        let central = self.central_proc();
        let dst_proc = self.tables[src_proc]
            .lookup(dst)
            .ok_or(SimError::UnknownDestination(dst))?;
        self.out.counters[src].messages_sent += 1;
        self.out.per_dest[dst].sent_to += 1;
        *self.out.kind_sent.entry(kind.name()).or_default() += 1;

        let occurrence = {
            let c = self.kind_send_count.entry(kind).or_default();
            let v = *c;
            *c += 1;
            v
        };
        let doomed = self.input.drop_plan.should_drop(kind, occurrence);

        let same_proc = dst_proc == src_proc;
        let dest_central = dst_proc == central && !same_proc;
        let (mut arrival, penalty) = if same_proc {
            (departure, SimDuration::ZERO)
        } else {
            let lat = self
                .input
                .platform
                .link
                .message_latency(payload.len(), dest_central);
            let pen = if dest_central {
                self.input.platform.link.penalty()
            } else {
                SimDuration::ZERO
            };
            (departure + lat, pen)
        };
        // The bus is serial: a pair's messages never overtake each other.
        if let Some(&last) = self.pair_last_arrival.get(&(src, dst)) {
            if arrival <= last {
                arrival = last + SimDuration(1);
            }
        }
        self.pair_last_arrival.insert((src, dst), arrival);

        let src_owns_requested = kind == MessageKind::DsmRequestBatch
            && crate::sim::wire::decode_batch_objects(&payload)
                .iter()
                .any(|&o| self.input.objects[o].owner == src);
        let t = self.now();
        self.trace(TraceRecord::Send {
            src,
            dst,
            kind,
            corr,
            src_owns_requested,
            t,
        });
        let msg = Message {
            src,
            dst,
            kind,
            payload,
            seq: self.seq,
            corr,
        };
        self.schedule(
            arrival,
            Occ::Arrival {
                msg,
                doomed,
                penalty,
            },
        );
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Main loop
    // -----------------------------------------------------------------------

    pub fn run(mut self) -> RunOutput {
        if self.input.duration == SimDuration::ZERO {
            self.finish();
            return self.out;
        }
        let start = self.register_all();
        self.schedule(start, Occ::StartModules);
        // Safety net against runaway scheduling.
        let hard_stop = SimTime(self.input.duration.0.saturating_mul(16).max(60_000_000_000));
        while let Some(Reverse(s)) = self.heap.pop() {
            if s.at > hard_stop {
                self.out
                    .faults
                    .push("hard stop reached before quiescence".into());
                break;
            }
            self.clock.advance_to(s.at);
            self.process(s.occ);
            if self.aborted {
                break;
            }
        }
        self.finish();
        self.out
    }

    fn finish(&mut self) {
        self.out.end_time = self.now().max(SimTime(self.input.duration.0));
        for (i, m) in self.input.modules.iter().enumerate() {
            for (handle, bytes) in self.mods[i].mem.leaked() {
                self.out.leaks.push((m.name.clone(), handle, bytes));
            }
            self.out.counters[i].peak_allocated = self.mods[i].mem.peak;
        }
        for (oi, o) in self.input.objects.iter().enumerate() {
            let v = if self.input.dsm_enabled {
                self.core.copy(o.owner, oi).cloned().unwrap_or_default()
            } else {
                self.plain_store[oi].clone()
            };
            self.out.final_values.insert(o.id.clone(), v);
        }
        self.out.cpus = self.cpus.clone();
    }

    fn process(&mut self, occ: Occ) {
        match occ {
            Occ::StartModules => self.start_modules(),
            Occ::LocationUpdate {
                proc,
                module,
                placement,
            } => {
                let spec = self.input.platform.processors[proc].clone();
                let now = self.now();
                self.cpus[proc].charge_cycles(&spec, now, spec.msg_recv_cycles);
                self.tables[proc].apply_update(module, placement);
                *self
                    .out
                    .kind_delivered
                    .entry(MessageKind::LocationUpdate.name())
                    .or_default() += 1;
            }
            Occ::Arrival {
                msg,
                doomed,
                penalty,
            } => self.on_arrival(msg, doomed, penalty),
            Occ::TimerExpiry {
                module,
                timer_id,
                interval,
            } => self.on_timer_expiry(module, timer_id, interval),
            Occ::SensorPush {
                module,
                channel,
                period,
            } => self.on_sensor_push(module, channel, period),
            Occ::Kick { proc } => self.on_kick(proc),
            Occ::StallTimeout { module, token } => self.on_stall_timeout(module, token),
            Occ::SleepWake { module, token } => {
                if let RunState::Stalled(st) = &mut self.mods[module].run {
                    if st.token == token && matches!(st.kind, AwaitKind::Sleep) {
                        st.satisfied = true;
                        self.kick(self.input.modules[module].proc);
                    }
                }
            }
            Occ::ExceptionNotify {
                kind,
                module,
                detail,
            } => self.on_exception_notify(kind, module, detail),
        }
    }

    fn start_modules(&mut self) {
        for m in 0..self.input.modules.len() {
            self.mods[m].started = true;
        }
        for m in 0..self.input.modules.len() {
            if let Some(proc_name) = self.input.modules[m].ir.bindings.on_create.clone() {
                self.dispatch_named(m, &proc_name, None);
            }
        }
    }

    pub(crate) fn kick(&mut self, proc: ProcIdx) {
        let at = self.now().max(self.cpus[proc].busy_until);
        self.schedule(at, Occ::Kick { proc });
    }

    fn on_kick(&mut self, proc: ProcIdx) {
        let now = self.now();
        if self.cpus[proc].busy_until > now {
            let at = self.cpus[proc].busy_until;
            self.schedule(at, Occ::Kick { proc });
            return;
        }
        // Mid-handler modules whose await is satisfied resume first.
        for m in 0..self.mods.len() {
            if self.input.modules[m].proc != proc {
                continue;
            }
            let resumable = matches!(
                &self.mods[m].run,
                RunState::Stalled(st) if st.satisfied
            );
            if resumable {
                self.resume_slice(m);
                return;
            }
        }
        // Otherwise dispatch the next idle module with queued events.
        for m in 0..self.mods.len() {
            if self.input.modules[m].proc != proc {
                continue;
            }
            let ready = matches!(self.mods[m].run, RunState::Idle)
                && self.mods[m].exec.is_none()
                && self.mods[m].started
                && !self.mods[m].queue.is_empty();
            if ready {
                self.dispatch_next(m);
                return;
            }
        }
    }

    fn on_timer_expiry(&mut self, module: ModIdx, timer_id: String, interval: SimDuration) {
        if matches!(self.mods[module].run, RunState::Terminated)
            || !self.mods[module].timers.contains_key(&timer_id)
        {
            return;
        }
        let now = self.now();
        self.charge_central_event_penalty(module, now);
        let ev = Event {
            body: EventBody::Timer {
                timer_id: timer_id.clone(),
            },
            enqueue_time: now,
        };
        self.enqueue_event(module, ev);
        let next = now + interval;
        if next.0 <= self.input.duration.0 {
            self.schedule(
                next,
                Occ::TimerExpiry {
                    module,
                    timer_id,
                    interval,
                },
            );
        }
    }

    fn on_sensor_push(&mut self, module: ModIdx, channel: u32, period: SimDuration) {
        if matches!(self.mods[module].run, RunState::Terminated) {
            return;
        }
        let now = self.now();
        let sample = match self.input.sensors.get(&channel) {
            Some((_, g)) => g.sample(now),
            None => return,
        };
        self.charge_central_event_penalty(module, now);
        let ev = Event {
            body: EventBody::SensorData { channel, sample },
            enqueue_time: now,
        };
        self.enqueue_event(module, ev);
        let next = now + period;
        if next.0 <= self.input.duration.0 {
            self.schedule(
                next,
                Occ::SensorPush {
                    module,
                    channel,
                    period,
                },
            );
        }
    }

    /// Kernel delivery path on the central processor: every event pushed into
    /// a central module costs the context-switch penalty of Active CPU. The
    /// same constant that delays central-bound messages, and the reason a
    /// 30 Hz workload keeps a legacy build's application processor awake.
    fn charge_central_event_penalty(&mut self, module: ModIdx, at: SimTime) {
        let proc = self.input.modules[module].proc;
        if proc == self.central_proc() {
            let pen = self.input.platform.link.penalty();
            self.cpus[proc].charge_time(at, pen);
        }
    }

    pub(crate) fn enqueue_event(&mut self, module: ModIdx, ev: Event) {
        match self.mods[module].queue.try_enqueue(ev) {
            Ok(()) => {
                let depth = self.mods[module].queue.depth();
                let c = &mut self.out.counters[module];
                c.peak_queue_depth = c.peak_queue_depth.max(depth);
                self.monitor_tick(module);
                self.kick(self.input.modules[module].proc);
            }
            Err(ev) => {
                self.out.events_dropped[module] += 1;
                if let EventBody::IncomingMessage(msg) = ev.body {
                    self.count_drop(module, msg.kind);
                }
            }
        }
    }

    pub(crate) fn count_drop(&mut self, dst: ModIdx, kind: MessageKind) {
        self.out.counters[dst].messages_dropped += 1;
        self.out.per_dest[dst].dropped += 1;
        *self.out.kind_dropped.entry(kind.name()).or_default() += 1;
        let t = self.now();
        self.trace(TraceRecord::Dropped { dst, kind, t });
    }

    /// Queue-depth watchdog, latched until the queue drains below threshold.
    pub(crate) fn monitor_tick(&mut self, module: ModIdx) {
        let depth = self.mods[module].queue.depth();
        let threshold = time_exception_threshold(self.mods[module].queue.capacity());
        if depth >= threshold && !self.mods[module].time_exc_latched {
            self.mods[module].time_exc_latched = true;
            self.raise_exception(
                ExceptionKind::Time,
                module,
                format!(
                    "queue depth {depth} of {}",
                    self.mods[module].queue.capacity()
                ),
            );
        } else if depth < threshold {
            self.mods[module].time_exc_latched = false;
        }
    }

    /// Out-of-band notification to the central runtime: link latency applies,
    /// policy runs on arrival.
    pub(crate) fn raise_exception(&mut self, kind: ExceptionKind, module: ModIdx, detail: String) {
        let now = self.now();
        let src_proc = self.input.modules[module].proc;
        let at = if src_proc == self.central_proc() {
            now
        } else {
            now + self.input.platform.link.message_latency(8, true)
        };
        self.schedule(
            at,
            Occ::ExceptionNotify {
                kind,
                module,
                detail,
            },
        );
    }

    fn on_exception_notify(&mut self, kind: ExceptionKind, module: ModIdx, detail: String) {
        let raising_proc = self.input.modules[module].proc;
        let at = self.now();
        let victim = match (kind, self.input.policy) {
            (ExceptionKind::Time, ExceptionPolicy::TerminateMostRecent) => {
                self.pick_victim(raising_proc, |s, m| s.mods[m].launch_order as u64)
            }
            (ExceptionKind::Time, ExceptionPolicy::TerminateTopCpu) => {
                self.pick_victim(raising_proc, |s, m| s.out.counters[m].processor_cycles)
            }
            _ => None,
        };
        if let Some(v) = victim {
            self.terminate_module(v);
        }
        self.out.exceptions.push(ExceptionRec {
            kind,
            module,
            detail: detail.clone(),
            at,
            terminated: victim,
        });
        // The central module sees the exception as an event.
        if let Some(central_mod) = self.central_module() {
            if !matches!(self.mods[central_mod].run, RunState::Terminated) {
                let ev = Event {
                    body: EventBody::ResourceException {
                        kind,
                        module,
                        detail,
                    },
                    enqueue_time: at,
                };
                self.enqueue_event(central_mod, ev);
            }
        }
    }

    fn pick_victim(
        &self,
        proc: ProcIdx,
        score: impl Fn(&Simulator, ModIdx) -> u64,
    ) -> Option<ModIdx> {
        (0..self.mods.len())
            .filter(|&m| {
                self.input.modules[m].proc == proc
                    && self.input.modules[m].kind == ModuleKind::Peripheral
                    && !matches!(self.mods[m].run, RunState::Terminated)
            })
            .max_by_key(|&m| (score(self, m), m))
    }

    pub(crate) fn central_module(&self) -> Option<ModIdx> {
        self.input
            .modules
            .iter()
            .position(|m| m.kind == ModuleKind::Central)
    }

    fn on_stall_timeout(&mut self, module: ModIdx, token: u64) {
        let fire = matches!(
            &self.mods[module].run,
            RunState::Stalled(st) if st.token == token && !st.satisfied
        );
        if !fire {
            return;
        }
        let is_rpc = matches!(
            &self.mods[module].run,
            RunState::Stalled(st) if matches!(st.kind, AwaitKind::RpcReturn { .. })
        );
        if is_rpc {
            self.out.rpc_timeouts += 1;
        } else {
            self.out.dsm_timeouts += 1;
        }
        self.out.faults.push(format!(
            "stall timeout in `{}`",
            self.input.modules[module].name
        ));
        // Abort the handler; the module returns to its event loop.
        self.mods[module].exec = None;
        self.mods[module].run = RunState::Idle;
        let t = self.now();
        self.trace(TraceRecord::HandlerEnd { module, t });
        self.kick(self.input.modules[module].proc);
    }

    pub(crate) fn new_stall(&mut self, module: ModIdx, kind: AwaitKind) -> u64 {
        let token = self.next_stall_token;
        self.next_stall_token += 1;
        let started = self.now();
        let timed = !matches!(kind, AwaitKind::Sleep);
        self.mods[module].run = RunState::Stalled(Stall {
            kind,
            token,
            satisfied: false,
            resume: None,
            started,
        });
        if timed && self.input.stall_timeout > SimDuration::ZERO {
            self.schedule(
                started + self.input.stall_timeout,
                Occ::StallTimeout { module, token },
            );
        }
        token
    }
}
