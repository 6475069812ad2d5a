//! Randomized-schedule coherence harness.
//!
//! Generates small well-formed applications (ordered batches, writes only
//! while holding exclusivity), walks the abstract machine under a seeded
//! uniform scheduler, and audits the trace against the protocol's promised
//! properties:
//!
//! * quiescent exclusivity: with no message in flight for an object, exactly
//!   one group member is Exclusive;
//! * write serialization: the owner copy's value history is the global write
//!   order, and every value anyone reads appears there or is the reader's own
//!   local write;
//! * read recency: a requester read sees its own latest local write or its
//!   most recently received response value;
//! * owner passivity: no module ever requests an object it owns.

use super::machine::*;
use super::protocol::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub property: &'static str,
    pub detail: String,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct RunStats {
    pub actions: usize,
    pub reads_checked: usize,
    pub quiescent_checks: usize,
}

/// Trace auditor. It never consults the transition logic, only the events the
/// machine emitted and the observable member states.
struct Oracle {
    initial: DsmValue,
    owner_seq: Vec<Vec<DsmValue>>,
    last_resp: BTreeMap<(ModuleIdx, ObjIdx), DsmValue>,
    own_writes: BTreeMap<(ModuleIdx, ObjIdx), Vec<DsmValue>>,
    reads: Vec<(ModuleIdx, ObjIdx, DsmValue)>,
    stats: RunStats,
}

impl Oracle {
    fn new(n_objects: usize, initial: DsmValue) -> Oracle {
        Oracle {
            initial,
            owner_seq: vec![Vec::new(); n_objects],
            last_resp: BTreeMap::new(),
            own_writes: BTreeMap::new(),
            reads: Vec::new(),
            stats: RunStats::default(),
        }
    }

    fn consume(&mut self, topo: &GroupTopology, ev: &TraceEv) -> Result<(), Violation> {
        match ev {
            TraceEv::BatchSent {
                src,
                owner,
                requests,
            } => {
                for r in requests {
                    if topo.owner_of[r.object()] == *src {
                        return Err(Violation {
                            property: "owner-passivity",
                            detail: format!("module {src} requested its own object {}", r.object()),
                        });
                    }
                }
                if src == owner {
                    return Err(Violation {
                        property: "owner-passivity",
                        detail: format!("module {src} sent a batch to itself"),
                    });
                }
            }
            TraceEv::ReleaseApplied { object, value, .. } => {
                self.owner_seq[*object].push(value.clone());
            }
            TraceEv::OwnerAccessed {
                m,
                object,
                write,
                value,
            } => {
                if *write {
                    self.owner_seq[*object].push(value.clone());
                } else {
                    // The owner reads its own copy: the latest global value.
                    let expect = self.owner_seq[*object].last().unwrap_or(&self.initial);
                    if value != expect {
                        return Err(Violation {
                            property: "write-serialization",
                            detail: format!("owner {m} read o{object} off the global order"),
                        });
                    }
                    self.reads.push((*m, *object, value.clone()));
                }
            }
            TraceEv::ResponseApplied { m, results } => {
                for res in results {
                    match res {
                        DsmResult::Replicated(o, v) | DsmResult::Granted(o, v) => {
                            self.last_resp.insert((*m, *o), v.clone());
                        }
                        DsmResult::Released(_) => {}
                    }
                }
            }
            TraceEv::LocalWrite { m, object, value } => {
                self.own_writes
                    .entry((*m, *object))
                    .or_default()
                    .push(value.clone());
            }
            TraceEv::LocalRead { m, object, value } => {
                self.stats.reads_checked += 1;
                let own = self
                    .own_writes
                    .get(&(*m, *object))
                    .and_then(|v| v.last());
                let resp = self.last_resp.get(&(*m, *object));
                let fresh_ok = own == Some(value)
                    || resp == Some(value)
                    || (own.is_none() && resp.is_none() && *value == self.initial);
                if !fresh_ok {
                    return Err(Violation {
                        property: "read-recency",
                        detail: format!(
                            "module {m} read o{object} = {value:?}, last write {own:?}, last response {resp:?}"
                        ),
                    });
                }
                self.reads.push((*m, *object, value.clone()));
            }
            TraceEv::BatchQueued { .. }
            | TraceEv::OwnerStalled { .. }
            | TraceEv::StateChange { .. } => {}
        }
        Ok(())
    }

    fn check_quiescent(&mut self, machine: &Machine) -> Result<(), Violation> {
        let topo = machine.core.topology();
        for o in 0..topo.n_objects() {
            if topo.groups[o].len() < 2 {
                continue;
            }
            if machine.object_in_flight(o) {
                continue;
            }
            self.stats.quiescent_checks += 1;
            let holders = machine.core.exclusive_holders(o);
            if holders.len() != 1 {
                return Err(Violation {
                    property: "quiescent-exclusivity",
                    detail: format!("object {o} has holders {holders:?}"),
                });
            }
        }
        Ok(())
    }

    fn final_check(&mut self) -> Result<(), Violation> {
        for (m, o, v) in &self.reads {
            let in_order = self.owner_seq[*o].contains(v) || *v == self.initial;
            let own = self
                .own_writes
                .get(&(*m, *o))
                .map(|ws| ws.contains(v))
                .unwrap_or(false);
            if !in_order && !own {
                return Err(Violation {
                    property: "write-serialization",
                    detail: format!("module {m} read o{o} = {v:?} which never reached the owner"),
                });
            }
        }
        Ok(())
    }
}

/// Random sharing structure with at least one real (multi-member) group.
pub fn random_topology(rng: &mut ChaCha8Rng) -> GroupTopology {
    let n_modules = rng.gen_range(2..=3);
    let n_objects = rng.gen_range(1..=4);
    let mut owner_of = Vec::new();
    let mut groups = Vec::new();
    for _ in 0..n_objects {
        let mut members: Vec<ModuleIdx> = (0..n_modules).filter(|_| rng.gen_bool(0.7)).collect();
        if members.len() < 2 {
            members = (0..n_modules).collect();
        }
        owner_of.push(*members.iter().min().unwrap());
        groups.push(members);
    }
    GroupTopology {
        owner_of,
        groups,
        n_modules,
    }
}

/// Well-formed random program: per-owner ordered batches, local activity in
/// between, releases in reverse owner order.
pub fn random_programs(topo: &GroupTopology, rng: &mut ChaCha8Rng) -> Vec<Vec<ProtoOp>> {
    let mut programs = Vec::new();
    for m in 0..topo.n_modules {
        let mut ops = Vec::new();
        let rounds = rng.gen_range(1..=2);
        for _ in 0..rounds {
            // Requester side.
            let mut per_owner: BTreeMap<ModuleIdx, Vec<(ObjIdx, bool)>> = BTreeMap::new();
            for o in 0..topo.n_objects() {
                if topo.role(m, o) == Some(Role::Requester) && rng.gen_bool(0.6) {
                    per_owner
                        .entry(topo.owner_of[o])
                        .or_default()
                        .push((o, rng.gen_bool(0.5)));
                }
            }
            let owners: Vec<ModuleIdx> = per_owner.keys().copied().collect();
            for &owner in &owners {
                ops.push(ProtoOp::Batch(per_owner[&owner].clone()));
            }
            for &owner in &owners {
                for &(o, w) in &per_owner[&owner] {
                    if w {
                        for _ in 0..rng.gen_range(1..=2) {
                            if rng.gen_bool(0.5) {
                                ops.push(ProtoOp::LocalWrite(o));
                            } else {
                                ops.push(ProtoOp::LocalRead(o));
                            }
                        }
                        // Hold exclusivity through at least one write.
                        ops.push(ProtoOp::LocalWrite(o));
                    } else {
                        ops.push(ProtoOp::LocalRead(o));
                    }
                }
            }
            for &owner in owners.iter().rev() {
                let objs: Vec<ObjIdx> = per_owner[&owner]
                    .iter()
                    .filter(|(_, w)| *w)
                    .map(|(o, _)| *o)
                    .collect();
                if !objs.is_empty() {
                    ops.push(ProtoOp::Release(objs));
                }
            }
            // Owner side.
            for o in 0..topo.n_objects() {
                if topo.role(m, o) == Some(Role::Owner) && rng.gen_bool(0.5) {
                    ops.push(ProtoOp::OwnerAccess {
                        object: o,
                        write: rng.gen_bool(0.5),
                    });
                }
            }
        }
        programs.push(ops);
    }
    programs
}

/// One randomized run: random app, random schedule, all properties audited
/// after every action.
pub fn run_randomized(seed: u64) -> Result<RunStats, Violation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topo = random_topology(&mut rng);
    let programs = random_programs(&topo, &mut rng);
    let mut machine = Machine::new(topo.clone(), programs);
    let mut oracle = Oracle::new(topo.n_objects(), machine.core.copy(topo.owner_of[0], 0).cloned().unwrap_or_default());
    let mut consumed = 0usize;

    for step in 0.. {
        let actions = machine.enabled_actions();
        if actions.is_empty() {
            break;
        }
        if step > 100_000 {
            return Err(Violation {
                property: "termination",
                detail: "ordered programs failed to quiesce".into(),
            });
        }
        let action = actions[rng.gen_range(0..actions.len())];
        machine.apply(action).map_err(|e| Violation {
            property: "protocol",
            detail: e.to_string(),
        })?;
        oracle.stats.actions += 1;
        while consumed < machine.trace.len() {
            let ev = machine.trace[consumed].clone();
            oracle.consume(&topo, &ev)?;
            consumed += 1;
        }
        oracle.check_quiescent(&machine)?;
    }
    if !machine.all_done() {
        return Err(Violation {
            property: "deadlock-freedom",
            detail: "ordered random app got stuck".into(),
        });
    }
    oracle.final_check()?;
    Ok(oracle.stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn randomized_runs_hold_all_properties() {
        let mut total = RunStats::default();
        for seed in 0..300 {
            let stats = run_randomized(seed).unwrap_or_else(|v| {
                panic!("seed {seed}: {} violated: {}", v.property, v.detail)
            });
            total.actions += stats.actions;
            total.reads_checked += stats.reads_checked;
            total.quiescent_checks += stats.quiescent_checks;
        }
        assert!(total.reads_checked > 100);
        assert!(total.quiescent_checks > 1000);
    }

    #[test]
    fn runs_are_reproducible() {
        let a = run_randomized(42).unwrap();
        let b = run_randomized(42).unwrap();
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.reads_checked, b.reads_checked);
    }
}
