//! Statement-level interpretation of instrumented modules, including the
//! coherence call sites, stalls, and the owner's lazy service paths.
//!
//! A slice runs from a dispatch (or resume) to the next stall or handler
//! completion, advancing a local time cursor as statements charge cycles;
//! the whole window is committed to the processor's Active timeline when the
//! slice closes. Mid-slice sends depart at exact intra-slice timestamps.

use super::engine::*;
use super::wire;
use crate::dsm::{DsmRequest, DsmResult, ServeOutcome};
use crate::instrument::{PreKind, Stmt, Terminator};
use crate::platform::{SimDuration, SimTime};
use crate::runtime::RuntimeError;
use crate::transport::{Event, EventBody, EventKind, Message, MessageKind};
use rand::Rng;

enum SliceStop {
    Done,
    Stalled,
    Aborted(String),
}

impl Simulator {
    // -----------------------------------------------------------------------
    // Dispatch
    // -----------------------------------------------------------------------

    /// Poll one event off an idle module's queue and dispatch it.
    pub(crate) fn dispatch_next(&mut self, m: ModIdx) {
        let had_sensor_or_timer = self.mods[m]
            .queue
            .iter()
            .any(|e| matches!(e.body.kind(), EventKind::SensorData | EventKind::Timer));
        let ev = match self.mods[m].queue.poll() {
            Some(ev) => ev,
            None => return,
        };
        self.monitor_tick(m);
        let kind_name = match &ev.body {
            EventBody::SensorData { .. } => "sensor",
            EventBody::Timer { .. } => "timer",
            EventBody::IncomingMessage(msg) => msg.kind.name(),
            EventBody::ResourceException { .. } => "resource_exception",
        };
        let t = self.now();
        self.trace(TraceRecord::PollDispatch {
            module: m,
            kind: kind_name,
            had_sensor_or_timer,
            t,
        });
        match ev.body {
            EventBody::SensorData { .. } => {
                match self.input.modules[m].ir.bindings.on_data.clone() {
                    Some(p) => self.dispatch_named(m, &p, None),
                    None => self.out.unhandled_events[m] += 1,
                }
            }
            EventBody::Timer { .. } => {
                match self.input.modules[m].ir.bindings.on_timer.clone() {
                    Some(p) => self.dispatch_named(m, &p, None),
                    None => self.out.unhandled_events[m] += 1,
                }
            }
            EventBody::IncomingMessage(msg) => match msg.kind {
                MessageKind::AppData => {
                    match self.input.modules[m].ir.bindings.on_message.clone() {
                        Some(p) => self.dispatch_named(m, &p, None),
                        None => self.out.unhandled_events[m] += 1,
                    }
                }
                MessageKind::RpcCall => match wire::decode_rpc_proc(&msg.payload) {
                    Some(proc) if self.input.modules[m].ir.proc_index(&proc).is_some() => {
                        self.dispatch_named(m, &proc, Some((msg.src, msg.corr)));
                    }
                    _ => {
                        self.out.unhandled_events[m] += 1;
                        self.out
                            .faults
                            .push(format!("rpc to unknown procedure in `{}`",
                                self.input.modules[m].name));
                    }
                },
                MessageKind::DsmRequestBatch => self.serve_polled_batch(m, msg),
                MessageKind::DsmResponse | MessageKind::RpcReturn => {
                    self.out.stale_responses += 1;
                }
                MessageKind::LocationUpdate => {}
            },
            EventBody::ResourceException { .. } => {
                self.out.unhandled_events[m] += 1;
            }
        }
    }

    /// Start a named procedure as a fresh handler slice.
    pub(crate) fn dispatch_named(
        &mut self,
        m: ModIdx,
        proc_name: &str,
        rpc_reply_to: Option<(ModIdx, u64)>,
    ) {
        let pi = match self.input.modules[m].ir.proc_index(proc_name) {
            Some(pi) => pi,
            None => {
                self.abort_run(m, format!("handler `{proc_name}` not found"));
                return;
            }
        };
        let t = self.now();
        self.trace(TraceRecord::HandlerStart { module: m, t });
        self.mods[m].exec = Some(Exec {
            frames: vec![Frame {
                proc: pi,
                ..Default::default()
            }],
            rpc_reply_to,
        });
        self.run_slice(m);
    }

    /// A coherence batch polled from the event loop: serve it as a short
    /// runtime slice (no user handler involved).
    fn serve_polled_batch(&mut self, m: ModIdx, msg: Message) {
        let proc = self.input.modules[m].proc;
        let spec = self.input.platform.processors[proc].clone();
        let now = self.now().max(self.cpus[proc].busy_until);
        let (_, end) = self.cpus[proc].charge_cycles(&spec, now, costs::SERVE_CYCLES);
        self.out.serve_cycles[m] += costs::SERVE_CYCLES;
        self.out.counters[m].processor_cycles += costs::SERVE_CYCLES;
        self.serve_decoded(m, &msg, end, true);
        self.kick(proc);
    }

    /// Shared owner-service path. `allow_drain` is false only while the
    /// owner is mid-handler (a stalled access consuming its awaited release):
    /// grants must wait for the handler boundary there.
    pub(crate) fn serve_decoded(
        &mut self,
        m: ModIdx,
        msg: &Message,
        at: SimTime,
        allow_drain: bool,
    ) -> SimTime {
        let requests = match wire::decode_batch(&msg.payload) {
            Some(r) => r,
            None => {
                self.abort_run(m, "malformed coherence batch".into());
                return at;
            }
        };
        let batch = crate::dsm::DsmBatch {
            id: msg.corr,
            src: msg.src,
            owner: m,
            requests,
        };
        match self.core.owner_serve(m, batch) {
            Ok(ServeOutcome::Responded(resp)) => {
                let t = self.respond(m, resp, at);
                if allow_drain {
                    self.drain_owner(m, t)
                } else {
                    t
                }
            }
            Ok(ServeOutcome::Queued) => at,
            Err(e) => {
                self.abort_run(m, format!("protocol error while serving: {e}"));
                at
            }
        }
    }

    /// Send one coherence response, charging the owner's send cycles at `at`.
    fn respond(&mut self, m: ModIdx, resp: crate::dsm::DsmResponse, at: SimTime) -> SimTime {
        let proc = self.input.modules[m].proc;
        let spec = self.input.platform.processors[proc].clone();
        let (_, dep) = self.cpus[proc].charge_cycles(&spec, at, spec.msg_send_cycles);
        self.out.counters[m].processor_cycles += spec.msg_send_cycles;
        if let Some(&idx) = self.exchange_by_corr.get(&resp.batch_id) {
            self.out.exchanges[idx].resp_sent = dep;
        }
        let payload = wire::encode_response(&resp.results);
        let corr = resp.batch_id;
        let dst = resp.dst;
        if self
            .send_message(dep, m, dst, MessageKind::DsmResponse, payload, corr)
            .is_err()
        {
            self.out
                .faults
                .push(format!("response to deregistered module {dst}"));
        }
        dep
    }

    /// Serve everything in the pending FIFO that became satisfiable. Only at
    /// handler boundaries (or during a requester stall, where every owned
    /// access after the stall point re-checks).
    pub(crate) fn drain_owner(&mut self, m: ModIdx, at: SimTime) -> SimTime {
        if !self.input.dsm_enabled {
            return at;
        }
        let mut t = at;
        for resp in self.core.drain_pending(m) {
            t = self.respond(m, resp, t);
        }
        t
    }

    // -----------------------------------------------------------------------
    // Arrival handling
    // -----------------------------------------------------------------------

    pub(crate) fn on_arrival(&mut self, msg: Message, doomed: bool, penalty: SimDuration) {
        let dst = msg.dst;
        let now = self.now();
        let dst_proc = self.input.modules[dst].proc;
        let spec = self.input.platform.processors[dst_proc].clone();
        if penalty > SimDuration::ZERO {
            // The kernel receive path was busy for the penalty window ending
            // at the delivery instant.
            self.cpus[dst_proc].charge_time(SimTime(now.0.saturating_sub(penalty.0)), penalty);
        }
        if matches!(self.mods[dst].run, RunState::Terminated) || !self.mods[dst].registered {
            self.count_drop(dst, msg.kind);
            return;
        }
        self.cpus[dst_proc].charge_cycles(&spec, now, spec.msg_recv_cycles);
        self.out.counters[dst].processor_cycles += spec.msg_recv_cycles;
        if doomed {
            // Forced fault injection: the receiver ran out of buffer space.
            self.count_drop(dst, msg.kind);
            return;
        }

        // Consult the stall state for direct consumption.
        enum Route {
            ConsumeResponse,
            ConsumeRpcReturn,
            ConsumeRelease,
            StallServe,
            Enqueue,
        }
        let route = match (&self.mods[dst].run, msg.kind) {
            (RunState::Stalled(st), MessageKind::DsmResponse) => match &st.kind {
                AwaitKind::DsmResponse { corr } if *corr == msg.corr && !st.satisfied => {
                    Route::ConsumeResponse
                }
                _ => Route::Enqueue,
            },
            (RunState::Stalled(st), MessageKind::RpcReturn) => match &st.kind {
                AwaitKind::RpcReturn { corr } if *corr == msg.corr && !st.satisfied => {
                    Route::ConsumeRpcReturn
                }
                _ => Route::Enqueue,
            },
            (RunState::Stalled(st), MessageKind::DsmRequestBatch) => match &st.kind {
                AwaitKind::ReleaseOf { obj }
                    if wire::batch_has_release_of(&msg.payload, *obj) && !st.satisfied =>
                {
                    Route::ConsumeRelease
                }
                AwaitKind::ReleaseOf { .. } => Route::Enqueue,
                // Stalled as a requester: owner duties continue.
                _ => Route::StallServe,
            },
            _ => Route::Enqueue,
        };

        match route {
            Route::ConsumeResponse => {
                self.mark_delivered(dst, &msg);
                let results = match wire::decode_response(&msg.payload) {
                    Some(r) => r,
                    None => {
                        self.abort_run(dst, "malformed coherence response".into());
                        return;
                    }
                };
                if let Some(&idx) = self.exchange_by_corr.get(&msg.corr) {
                    self.out.exchanges[idx].resp_recv = now;
                }
                let resp = crate::dsm::DsmResponse {
                    batch_id: msg.corr,
                    owner: msg.src,
                    dst,
                    results: results.clone(),
                };
                self.note_member_states(dst, &results, |sim, dst, resp| {
                    sim.core.apply_response(dst, resp)
                }, &resp);
                if let RunState::Stalled(st) = &mut self.mods[dst].run {
                    st.satisfied = true;
                    st.resume = Some(results);
                }
                self.kick(dst_proc);
            }
            Route::ConsumeRpcReturn => {
                self.mark_delivered(dst, &msg);
                if let RunState::Stalled(st) = &mut self.mods[dst].run {
                    st.satisfied = true;
                }
                self.kick(dst_proc);
            }
            Route::ConsumeRelease => {
                self.mark_delivered(dst, &msg);
                if let Some(&idx) = self.exchange_by_corr.get(&msg.corr) {
                    self.out.exchanges[idx].arrival = now;
                }
                // Apply and acknowledge, but no pending drain: the owner is
                // mid-handler and must keep exclusivity once rechecked.
                let serve_at = {
                    let (_, end) =
                        self.cpus[dst_proc].charge_cycles(&spec, now, costs::SERVE_CYCLES);
                    self.out.serve_cycles[dst] += costs::SERVE_CYCLES;
                    self.out.counters[dst].processor_cycles += costs::SERVE_CYCLES;
                    end
                };
                self.serve_decoded(dst, &msg, serve_at, false);
                if let RunState::Stalled(st) = &mut self.mods[dst].run {
                    st.satisfied = true;
                }
                self.kick(dst_proc);
            }
            Route::StallServe => {
                self.mark_delivered(dst, &msg);
                if let Some(&idx) = self.exchange_by_corr.get(&msg.corr) {
                    self.out.exchanges[idx].arrival = now;
                }
                let (_, end) = self.cpus[dst_proc].charge_cycles(&spec, now, costs::SERVE_CYCLES);
                self.out.serve_cycles[dst] += costs::SERVE_CYCLES;
                self.out.counters[dst].processor_cycles += costs::SERVE_CYCLES;
                self.serve_decoded(dst, &msg, end, true);
            }
            Route::Enqueue => {
                if msg.kind == MessageKind::DsmRequestBatch {
                    if let Some(&idx) = self.exchange_by_corr.get(&msg.corr) {
                        self.out.exchanges[idx].arrival = now;
                    }
                }
                match msg.kind {
                    MessageKind::DsmResponse | MessageKind::RpcReturn => {
                        // Nothing awaits it (a timeout already fired).
                        self.mark_delivered(dst, &msg);
                        self.out.stale_responses += 1;
                    }
                    _ => {
                        let kind = msg.kind;
                        let corr = msg.corr;
                        let ev = Event {
                            body: EventBody::IncomingMessage(msg),
                            enqueue_time: now,
                        };
                        let before = self.mods[dst].queue.depth();
                        self.enqueue_event(dst, ev);
                        if self.mods[dst].queue.depth() > before {
                            self.out.counters[dst].messages_received += 1;
                            self.out.per_dest[dst].delivered += 1;
                            *self.out.kind_delivered.entry(kind.name()).or_default() += 1;
                            let t = self.now();
                            self.trace(TraceRecord::Arrive {
                                dst,
                                kind,
                                corr,
                                t,
                            });
                        }
                    }
                }
            }
        }
    }

    fn mark_delivered(&mut self, dst: ModIdx, msg: &Message) {
        self.out.counters[dst].messages_received += 1;
        self.out.per_dest[dst].delivered += 1;
        *self.out.kind_delivered.entry(msg.kind.name()).or_default() += 1;
        let t = self.now();
        self.trace(TraceRecord::Arrive {
            dst,
            kind: msg.kind,
            corr: msg.corr,
            t,
        });
    }

    fn note_member_states(
        &mut self,
        dst: ModIdx,
        results: &[DsmResult],
        apply: impl Fn(&mut Simulator, ModIdx, &crate::dsm::DsmResponse) -> Result<(), crate::dsm::ProtocolError>,
        resp: &crate::dsm::DsmResponse,
    ) {
        let before: Vec<_> = results
            .iter()
            .map(|r| (r.object(), self.core.state(dst, r.object())))
            .collect();
        if let Err(e) = apply(self, dst, resp) {
            self.abort_run(dst, format!("response application failed: {e}"));
            return;
        }
        let t = self.now();
        for (o, from) in before {
            let to = self.core.state(dst, o);
            if let (Some(from), Some(to)) = (from, to) {
                if from != to {
                    self.trace(TraceRecord::StateChange {
                        module: dst,
                        object: o,
                        from,
                        to,
                        t,
                    });
                }
            }
        }
    }

    // -----------------------------------------------------------------------
    // Slice execution
    // -----------------------------------------------------------------------

    pub(crate) fn run_slice(&mut self, m: ModIdx) {
        let proc = self.input.modules[m].proc;
        let start = self.now().max(self.cpus[proc].busy_until);
        let mut now = start;
        let mut cycles = 0u64;
        let stop = self.exec_slice(m, &mut now, &mut cycles);
        self.cpus[proc].charge_time(start, now - start);
        self.cpus[proc].cycles += cycles;
        self.out.counters[m].processor_cycles += cycles;
        self.out.handler_cycles[m] += cycles;
        match stop {
            SliceStop::Done => self.complete_slice(m, now),
            SliceStop::Stalled => {}
            SliceStop::Aborted(detail) => self.abort_run(m, detail),
        }
    }

    pub(crate) fn resume_slice(&mut self, m: ModIdx) {
        // Apply the resume action tied to the stalled statement.
        let stall = match std::mem::replace(&mut self.mods[m].run, RunState::Idle) {
            RunState::Stalled(st) => st,
            other => {
                self.mods[m].run = other;
                return;
            }
        };
        debug_assert!(stall.satisfied);
        if let AwaitKind::ReleaseOf { obj } = stall.kind {
            let end = self.now();
            self.out.owner_stalls.push(OwnerStallRec {
                module: m,
                object: obj,
                start: stall.started,
                end,
            });
        }
        let advance = {
            let exec = self.mods[m].exec.as_mut().expect("stalled implies exec");
            let frame = exec.frames.last_mut().expect("stalled implies frame");
            let ir = &self.input.modules[m].ir;
            let stmt = &ir.procs[frame.proc].blocks[frame.block].stmts[frame.stmt];
            match stmt {
                Stmt::PreAccessReq { .. } => {
                    if let Some(results) = &stall.resume {
                        for r in results {
                            if let DsmResult::Granted(o, _) = r {
                                frame.acquired.insert(*o);
                            }
                        }
                    }
                    true
                }
                Stmt::PostAccess { objects, .. } => {
                    let objs: Vec<ObjIdx> = objects
                        .iter()
                        .filter_map(|o| self.obj_index.get(o).copied())
                        .collect();
                    for o in objs {
                        frame.acquired.remove(&o);
                    }
                    true
                }
                Stmt::Rpc { .. } | Stmt::Blocking(_) => true,
                Stmt::PreAccessOwn { .. } => false,
                other => {
                    debug_assert!(false, "unexpected stall at {other:?}");
                    true
                }
            }
        };
        if advance {
            let exec = self.mods[m].exec.as_mut().unwrap();
            let frame = exec.frames.last_mut().unwrap();
            frame.stmt += 1;
            frame.substep = 0;
        }
        self.run_slice(m);
    }

    fn complete_slice(&mut self, m: ModIdx, end: SimTime) {
        let exec = self.mods[m].exec.take();
        self.mods[m].run = RunState::Idle;
        let proc = self.input.modules[m].proc;
        let spec = self.input.platform.processors[proc].clone();
        let mut t = end;
        if let Some(exec) = exec {
            if let Some((caller, corr)) = exec.rpc_reply_to {
                let (_, dep) = self.cpus[proc].charge_cycles(&spec, t, spec.msg_send_cycles);
                self.out.counters[m].processor_cycles += spec.msg_send_cycles;
                let _ = self.send_message(
                    dep,
                    m,
                    caller,
                    MessageKind::RpcReturn,
                    vec![0u8; wire::RPC_RETURN_BYTES],
                    corr,
                );
                t = dep;
            }
        }
        // Back in the event loop: queued grants may now go out.
        self.drain_owner(m, t);
        let t2 = self.now();
        self.trace(TraceRecord::HandlerEnd { module: m, t: t2 });
        self.monitor_tick(m);
        self.kick(proc);
    }

    pub(crate) fn abort_run(&mut self, m: ModIdx, detail: String) {
        self.out.faults.push(format!(
            "handler fault in `{}`: {detail}",
            self.input.modules[m].name
        ));
        self.mods[m].exec = None;
        if !matches!(self.mods[m].run, RunState::Terminated) {
            self.mods[m].run = RunState::Idle;
        }
        self.aborted = true;
    }

    fn exec_slice(&mut self, m: ModIdx, now: &mut SimTime, cycles: &mut u64) -> SliceStop {
        loop {
            let (pi, bi, si, sub) = {
                let exec = match &self.mods[m].exec {
                    Some(e) => e,
                    None => return SliceStop::Done,
                };
                match exec.frames.last() {
                    Some(f) => (f.proc, f.block, f.stmt, f.substep),
                    None => return SliceStop::Done,
                }
            };
            let ir = &self.input.modules[m].ir;
            let block = &ir.procs[pi].blocks[bi];
            if si >= block.stmts.len() {
                let term = block.term.clone();
                match self.exec_terminator(m, term) {
                    Ok(()) => continue,
                    Err(stop) => return stop,
                }
            }
            let stmt = block.stmts[si].clone();
            match self.exec_stmt(m, stmt, sub, now, cycles) {
                StmtOutcome::Next => {
                    let exec = self.mods[m].exec.as_mut().unwrap();
                    let frame = exec.frames.last_mut().unwrap();
                    frame.stmt += 1;
                    frame.substep = 0;
                }
                StmtOutcome::Pushed => {}
                StmtOutcome::Stall => return SliceStop::Stalled,
                StmtOutcome::Abort(d) => return SliceStop::Aborted(d),
            }
        }
    }

    /// Run a block terminator; `Err` carries an early slice stop (only frame
    /// exhaustion, which is handled by the caller loop as Done).
    fn exec_terminator(&mut self, m: ModIdx, term: Terminator) -> Result<(), SliceStop> {
        let exec = self.mods[m].exec.as_mut().unwrap();
        let frame = exec.frames.last_mut().unwrap();
        let ir = &self.input.modules[m].ir;
        let proc = &ir.procs[frame.proc];
        match term {
            Terminator::Return => {
                exec.frames.pop();
                Ok(())
            }
            Terminator::Goto(b) => {
                frame.block = proc.block_index(&b).unwrap();
                frame.stmt = 0;
                frame.substep = 0;
                Ok(())
            }
            Terminator::Loop { count, body, exit } => {
                let header = frame.block;
                let taken = frame.loop_counters.entry(header).or_insert(0);
                if *taken < count {
                    *taken += 1;
                    frame.block = proc.block_index(&body).unwrap();
                } else {
                    frame.loop_counters.remove(&header);
                    frame.block = proc.block_index(&exit).unwrap();
                }
                frame.stmt = 0;
                frame.substep = 0;
                Ok(())
            }
            Terminator::Choose {
                prob_num,
                then_,
                else_,
            } => {
                let draw: u32 = self.rngs[m].gen_range(0..100_000);
                let target = if draw < prob_num { then_ } else { else_ };
                let exec = self.mods[m].exec.as_mut().unwrap();
                let frame = exec.frames.last_mut().unwrap();
                let ir = &self.input.modules[m].ir;
                frame.block = ir.procs[frame.proc].block_index(&target).unwrap();
                frame.stmt = 0;
                frame.substep = 0;
                Ok(())
            }
        }
    }

    fn charge(&mut self, m: ModIdx, now: &mut SimTime, cycles: &mut u64, c: u64) {
        let proc = self.input.modules[m].proc;
        *now += self.input.platform.processors[proc].cycles_duration(c);
        *cycles += c;
    }

    fn next_value(&mut self, m: ModIdx, size: usize) -> Vec<u8> {
        self.mods[m].write_counter += 1;
        let tag: u64 = (((m as u64) + 1) << 24) | (self.mods[m].write_counter & 0xff_ffff);
        let bytes = tag.to_le_bytes();
        (0..size).map(|i| bytes[i % 8]).collect()
    }

    fn exec_stmt(
        &mut self,
        m: ModIdx,
        stmt: Stmt,
        substep: usize,
        now: &mut SimTime,
        cycles: &mut u64,
    ) -> StmtOutcome {
        match stmt {
            Stmt::Compute(c) => {
                self.charge(m, now, cycles, c);
                StmtOutcome::Next
            }
            Stmt::Read(obj) => {
                self.charge(m, now, cycles, costs::ACCESS_CYCLES);
                let oi = match self.obj_index.get(&obj) {
                    Some(&oi) => oi,
                    None => return StmtOutcome::Abort(format!("unknown object `{obj}`")),
                };
                if self.input.dsm_enabled {
                    if let Err(e) = self.core.local_read(m, oi) {
                        return StmtOutcome::Abort(format!("read of `{obj}`: {e}"));
                    }
                }
                StmtOutcome::Next
            }
            Stmt::Write(obj) => {
                self.charge(m, now, cycles, costs::ACCESS_CYCLES);
                let oi = match self.obj_index.get(&obj) {
                    Some(&oi) => oi,
                    None => return StmtOutcome::Abort(format!("unknown object `{obj}`")),
                };
                let size = self.input.objects[oi].stub.byte_len();
                let value = self.next_value(m, size);
                if self.input.dsm_enabled {
                    if let Err(e) = self.core.local_write(m, oi, value) {
                        return StmtOutcome::Abort(format!("write of `{obj}`: {e}"));
                    }
                } else {
                    self.plain_store[oi] = value;
                }
                StmtOutcome::Next
            }
            Stmt::Call(p) => {
                let pi = self.input.modules[m].ir.proc_index(&p).unwrap();
                let exec = self.mods[m].exec.as_mut().unwrap();
                let frame = exec.frames.last_mut().unwrap();
                frame.stmt += 1;
                frame.substep = 0;
                exec.frames.push(Frame {
                    proc: pi,
                    ..Default::default()
                });
                StmtOutcome::Pushed
            }
            Stmt::Blocking(ms) => {
                let token = self.new_stall(m, AwaitKind::Sleep);
                let wake = *now + SimDuration::from_ms(ms as f64);
                self.schedule_sleep(m, token, wake);
                StmtOutcome::Stall
            }
            Stmt::SendApp { dst, bytes } => {
                let proc = self.input.modules[m].proc;
                let spec = &self.input.platform.processors[proc];
                self.charge(m, now, cycles, spec.msg_send_cycles);
                let dst_idx = match self.mod_index.get(&dst) {
                    Some(&d) => d,
                    None => return StmtOutcome::Abort(format!("unknown module `{dst}`")),
                };
                let corr = self.next_corr;
                self.next_corr += 1;
                match self.send_message(
                    *now,
                    m,
                    dst_idx,
                    MessageKind::AppData,
                    vec![0u8; bytes],
                    corr,
                ) {
                    Ok(()) => StmtOutcome::Next,
                    Err(e) => StmtOutcome::Abort(e.to_string()),
                }
            }
            Stmt::Rpc {
                dst,
                proc,
                arg_bytes,
            } => {
                let proc_idx = self.input.modules[m].proc;
                let spec = &self.input.platform.processors[proc_idx];
                self.charge(m, now, cycles, spec.msg_send_cycles);
                let dst_idx = match self.mod_index.get(&dst) {
                    Some(&d) => d,
                    None => return StmtOutcome::Abort(format!("unknown module `{dst}`")),
                };
                let corr = self.next_corr;
                self.next_corr += 1;
                let payload = wire::encode_rpc_call(&proc, arg_bytes);
                if let Err(e) =
                    self.send_message(*now, m, dst_idx, MessageKind::RpcCall, payload, corr)
                {
                    return StmtOutcome::Abort(e.to_string());
                }
                self.new_stall(m, AwaitKind::RpcReturn { corr });
                StmtOutcome::Stall
            }
            Stmt::RegisterTimer {
                interval_us,
                timer_id,
            } => {
                if interval_us == 0 {
                    self.out
                        .faults
                        .push(format!("timer `{timer_id}` rejected: zero interval"));
                    return StmtOutcome::Next;
                }
                if self.mods[m].timers.contains_key(&timer_id) {
                    self.out
                        .faults
                        .push(format!("timer `{timer_id}` rejected: duplicate id"));
                    return StmtOutcome::Next;
                }
                let interval = SimDuration(interval_us * 1000);
                self.mods[m].timers.insert(timer_id.clone(), interval);
                let first = *now + interval;
                if first.0 <= self.input.duration.0 {
                    self.schedule_timer(m, timer_id, interval, first);
                }
                StmtOutcome::Next
            }
            Stmt::GetSensor { channel } => {
                let proc = self.input.modules[m].proc;
                match self.input.sensors.get(&channel) {
                    Some((host, _)) if *host == proc => {}
                    Some(_) => {
                        return StmtOutcome::Abort(format!(
                            "sensor channel {channel} is not local"
                        ))
                    }
                    None => {
                        return StmtOutcome::Abort(format!("unknown sensor channel {channel}"))
                    }
                }
                if proc == self.central_proc() {
                    // Kernel sensor transaction.
                    *now += self.input.platform.link.penalty();
                } else {
                    self.charge(m, now, cycles, costs::PULL_CYCLES);
                }
                StmtOutcome::Next
            }
            Stmt::SubscribeSensor { channel, rate_hz } => {
                let proc = self.input.modules[m].proc;
                match self.input.sensors.get(&channel) {
                    Some((host, _)) if *host == proc => {}
                    Some(_) => {
                        return StmtOutcome::Abort(format!(
                            "sensor channel {channel} is not local"
                        ))
                    }
                    None => {
                        return StmtOutcome::Abort(format!("unknown sensor channel {channel}"))
                    }
                }
                if rate_hz == 0 {
                    self.out
                        .faults
                        .push(format!("subscription to channel {channel} rejected: zero rate"));
                    return StmtOutcome::Next;
                }
                let period = SimDuration::from_ms(1000.0 / rate_hz as f64);
                let first = *now + period;
                if first.0 <= self.input.duration.0 {
                    self.schedule_push(m, channel, period, first);
                }
                StmtOutcome::Next
            }
            Stmt::Malloc { handle, bytes } => {
                self.charge(m, now, cycles, costs::MALLOC_CYCLES);
                match self.mods[m].mem.malloc(&handle, bytes) {
                    Ok(()) => {}
                    Err(RuntimeError::OverBudget { .. }) => {
                        self.raise_exception(
                            crate::runtime::ExceptionKind::Mem,
                            m,
                            format!("allocation of {bytes} bytes failed"),
                        );
                    }
                    Err(e) => return StmtOutcome::Abort(e.to_string()),
                }
                StmtOutcome::Next
            }
            Stmt::Free { handle } => {
                self.charge(m, now, cycles, costs::MALLOC_CYCLES);
                match self.mods[m].mem.free(&handle) {
                    Ok(()) => StmtOutcome::Next,
                    Err(e) => StmtOutcome::Abort(e.to_string()),
                }
            }
            Stmt::PreAccessReq { owner, entries } => {
                self.count_check(m);
                self.charge(
                    m,
                    now,
                    cycles,
                    costs::CHECK_CYCLES * entries.len().max(1) as u64,
                );
                self.out.check_cycles[m] += costs::CHECK_CYCLES * entries.len().max(1) as u64;
                if !self.input.dsm_enabled {
                    return StmtOutcome::Next;
                }
                let planned: Vec<(ObjIdx, bool)> = entries
                    .iter()
                    .filter_map(|(o, k)| {
                        self.obj_index
                            .get(o)
                            .map(|&oi| (oi, *k == PreKind::Acquire))
                    })
                    .collect();
                let requests = match self.core.plan_requests(m, &planned) {
                    Ok(r) => r,
                    Err(e) => return StmtOutcome::Abort(format!("pre-access: {e}")),
                };
                if requests.is_empty() {
                    return StmtOutcome::Next;
                }
                let owner_idx = match self.mod_index.get(&owner) {
                    Some(&o) => o,
                    None => return StmtOutcome::Abort(format!("unknown owner `{owner}`")),
                };
                let class = if requests
                    .iter()
                    .any(|r| matches!(r, DsmRequest::Acquire(_)))
                {
                    ExchangeClass::Acquire
                } else {
                    ExchangeClass::Replicate
                };
                self.send_batch(m, owner_idx, requests, class, now, cycles)
            }
            Stmt::PostAccess { owner, objects } => {
                if !self.input.dsm_enabled {
                    return StmtOutcome::Next;
                }
                let held: Vec<ObjIdx> = {
                    let exec = self.mods[m].exec.as_ref().unwrap();
                    let frame = exec.frames.last().unwrap();
                    objects
                        .iter()
                        .filter_map(|o| self.obj_index.get(o).copied())
                        .filter(|o| frame.acquired.contains(o))
                        .collect()
                };
                if held.is_empty() {
                    return StmtOutcome::Next;
                }
                let requests = match self.core.plan_release(m, &held) {
                    Ok(r) => r,
                    Err(e) => return StmtOutcome::Abort(format!("post-access: {e}")),
                };
                let owner_idx = match self.mod_index.get(&owner) {
                    Some(&o) => o,
                    None => return StmtOutcome::Abort(format!("unknown owner `{owner}`")),
                };
                self.send_batch(m, owner_idx, requests, ExchangeClass::Release, now, cycles)
            }
            Stmt::PreAccessOwn { objects } => {
                if substep == 0 {
                    self.count_check(m);
                    self.charge(
                        m,
                        now,
                        cycles,
                        costs::CHECK_CYCLES * objects.len().max(1) as u64,
                    );
                    self.out.check_cycles[m] += costs::CHECK_CYCLES * objects.len().max(1) as u64;
                }
                if !self.input.dsm_enabled {
                    return StmtOutcome::Next;
                }
                let objs: Vec<ObjIdx> = objects
                    .iter()
                    .filter_map(|o| self.obj_index.get(o).copied())
                    .collect();
                let mut idx = substep;
                while idx < objs.len() {
                    let o = objs[idx];
                    match self.core.owner_exclusive(m, o) {
                        Ok(true) => {
                            idx += 1;
                            continue;
                        }
                        Ok(false) => {
                            // Fish an already-queued release out of the
                            // event queue before stalling.
                            if self.consume_queued_release(m, o, now) {
                                continue;
                            }
                            let exec = self.mods[m].exec.as_mut().unwrap();
                            exec.frames.last_mut().unwrap().substep = idx;
                            self.new_stall(m, AwaitKind::ReleaseOf { obj: o });
                            return StmtOutcome::Stall;
                        }
                        Err(e) => return StmtOutcome::Abort(format!("owner access: {e}")),
                    }
                }
                StmtOutcome::Next
            }
        }
    }

    fn send_batch(
        &mut self,
        m: ModIdx,
        owner_idx: ModIdx,
        requests: Vec<DsmRequest>,
        class: ExchangeClass,
        now: &mut SimTime,
        cycles: &mut u64,
    ) -> StmtOutcome {
        let proc = self.input.modules[m].proc;
        let spec = &self.input.platform.processors[proc];
        self.charge(m, now, cycles, spec.msg_send_cycles);
        let corr = self.next_corr;
        self.next_corr += 1;
        let payload = wire::encode_batch(&requests);
        let rec = ExchangeRec {
            module: m,
            owner: owner_idx,
            class,
            sent: *now,
            arrival: *now,
            resp_sent: *now,
            resp_recv: *now,
        };
        self.out.exchanges.push(rec);
        self.exchange_by_corr.insert(corr, self.out.exchanges.len() - 1);
        if let Err(e) = self.send_message(
            *now,
            m,
            owner_idx,
            MessageKind::DsmRequestBatch,
            payload,
            corr,
        ) {
            return StmtOutcome::Abort(e.to_string());
        }
        self.new_stall(m, AwaitKind::DsmResponse { corr });
        StmtOutcome::Stall
    }

    /// Scan the module's event queue for a batch releasing `obj`, apply it
    /// in place, and acknowledge. Everything queued ahead stays queued.
    fn consume_queued_release(&mut self, m: ModIdx, obj: ObjIdx, now: &mut SimTime) -> bool {
        let msg = self.mods[m].queue.take_first(|ev| match &ev.body {
            EventBody::IncomingMessage(msg) if msg.kind == MessageKind::DsmRequestBatch => {
                wire::batch_has_release_of(&msg.payload, obj)
            }
            _ => false,
        });
        let msg = match msg {
            Some(Event {
                body: EventBody::IncomingMessage(msg),
                ..
            }) => msg,
            _ => return false,
        };
        let proc = self.input.modules[m].proc;
        let spec = &self.input.platform.processors[proc];
        *now += spec.cycles_duration(costs::SERVE_CYCLES);
        self.out.serve_cycles[m] += costs::SERVE_CYCLES;
        self.out.counters[m].processor_cycles += costs::SERVE_CYCLES;
        // Mid-handler: apply + ack only, no drain.
        let t = self.serve_decoded(m, &msg, *now, false);
        *now = (*now).max(t);
        true
    }

    fn count_check(&mut self, m: ModIdx) {
        let (pi, bi, si) = {
            let exec = self.mods[m].exec.as_ref().unwrap();
            let f = exec.frames.last().unwrap();
            (f.proc, f.block, f.stmt)
        };
        if let Some(&site) = self.mods[m].site_index.get(&(pi, bi, si)) {
            *self.out.site_checks.entry((m, site)).or_default() += 1;
        }
    }

    fn schedule_sleep(&mut self, m: ModIdx, token: u64, at: SimTime) {
        self.schedule(at, Occ::SleepWake { module: m, token });
    }

    fn schedule_timer(&mut self, m: ModIdx, timer_id: String, interval: SimDuration, at: SimTime) {
        self.schedule(
            at,
            Occ::TimerExpiry {
                module: m,
                timer_id,
                interval,
            },
        );
    }

    fn schedule_push(&mut self, m: ModIdx, channel: u32, period: SimDuration, at: SimTime) {
        self.schedule(
            at,
            Occ::SensorPush {
                module: m,
                channel,
                period,
            },
        );
    }
}

enum StmtOutcome {
    Next,
    Pushed,
    Stall,
    Abort(String),
}
