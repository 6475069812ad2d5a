//! Exhaustive interleaving checker for deadlock freedom.
//!
//! Breadth-first exploration of the abstract machine's action space, deduped
//! on structural fingerprints. A state with a stalled module and no enabled
//! action is a deadlock; BFS order makes the first one found shortest. With
//! the request-order regulation applied the canonical exercise programs are
//! safe for every small topology; with it disabled the classic opposite-order
//! acquisition produces a two-cycle.

use super::machine::*;
use super::protocol::*;
use std::collections::{HashMap, HashSet, VecDeque};

#[derive(Debug, Clone, PartialEq)]
pub enum CheckOutcome {
    Safe {
        states_explored: usize,
    },
    Counterexample {
        /// One protocol step per line.
        trace: Vec<String>,
        actions: Vec<Action>,
        /// Modules forming the wait cycle, when one exists.
        wait_cycle: Vec<ModuleIdx>,
        depth: usize,
    },
    Inconclusive {
        bound: usize,
        states_explored: usize,
    },
}

impl CheckOutcome {
    pub fn is_safe(&self) -> bool {
        matches!(self, CheckOutcome::Safe { .. })
    }
}

/// Exhaustively explore all interleavings up to `bound` actions deep.
pub fn verify_no_deadlock(
    topo: GroupTopology,
    programs: Vec<Vec<ProtoOp>>,
    bound: usize,
) -> CheckOutcome {
    let mut initial = Machine::new(topo.clone(), programs.clone());
    initial.record_trace = false;

    let mut visited: HashSet<Vec<u8>> = HashSet::new();
    let mut parents: HashMap<Vec<u8>, (Vec<u8>, Action)> = HashMap::new();
    let mut queue: VecDeque<(Machine, usize)> = VecDeque::new();
    let root_fp = initial.fingerprint();
    visited.insert(root_fp.clone());
    queue.push_back((initial, 0));
    let mut truncated = false;
    let mut explored = 0usize;

    while let Some((state, depth)) = queue.pop_front() {
        explored += 1;
        let actions = state.enabled_actions();
        if actions.is_empty() {
            if (0..state.n_modules()).any(|m| state.stalled(m).is_some()) {
                let fp = state.fingerprint();
                let path = rebuild_path(&parents, &root_fp, &fp);
                let trace = render_trace(&topo, &programs, &path);
                return CheckOutcome::Counterexample {
                    trace,
                    wait_cycle: wait_cycle(&state),
                    actions: path,
                    depth,
                };
            }
            continue;
        }
        if depth >= bound {
            truncated = true;
            continue;
        }
        let fp = state.fingerprint();
        for action in actions {
            let mut next = state.clone();
            next.apply(action).expect("enabled action must apply");
            let nfp = next.fingerprint();
            if visited.insert(nfp.clone()) {
                parents.insert(nfp, (fp.clone(), action));
                queue.push_back((next, depth + 1));
            }
        }
    }

    if truncated {
        CheckOutcome::Inconclusive {
            bound,
            states_explored: explored,
        }
    } else {
        CheckOutcome::Safe {
            states_explored: explored,
        }
    }
}

fn rebuild_path(
    parents: &HashMap<Vec<u8>, (Vec<u8>, Action)>,
    root: &[u8],
    end: &[u8],
) -> Vec<Action> {
    let mut path = Vec::new();
    let mut cur = end.to_vec();
    while cur != root {
        let (parent, action) = parents.get(&cur).expect("path to root exists").clone();
        path.push(action);
        cur = parent;
    }
    path.reverse();
    path
}

/// Who is blocking whom in a stuck state, following exclusivity holders.
fn wait_cycle(state: &Machine) -> Vec<ModuleIdx> {
    let n = state.n_modules();
    let mut edges: Vec<Vec<ModuleIdx>> = vec![Vec::new(); n];
    for m in 0..n {
        match state.stalled(m) {
            None => {}
            Some(Await::ReleaseOf(o)) => {
                for h in state.core.exclusive_holders(*o) {
                    if h != m {
                        edges[m].push(h);
                    }
                }
            }
            Some(Await::Response { owner, .. }) => {
                let mut found = false;
                for b in state.core.pending_batches(*owner) {
                    if b.src == m {
                        found = true;
                        for r in &b.requests {
                            for h in state.core.exclusive_holders(r.object()) {
                                if h != m {
                                    edges[m].push(h);
                                }
                            }
                        }
                    }
                }
                // Batch still sitting in the inbox of a stalled owner.
                if !found && state.inbox_batches(*owner).any(|b| b.src == m) {
                    edges[m].push(*owner);
                }
            }
        }
    }
    // Walk until a module repeats.
    for start in 0..n {
        if state.stalled(start).is_none() {
            continue;
        }
        let mut seen = Vec::new();
        let mut cur = start;
        loop {
            if let Some(pos) = seen.iter().position(|&x| x == cur) {
                return seen[pos..].to_vec();
            }
            seen.push(cur);
            match edges[cur].first() {
                Some(&next) => cur = next,
                None => break,
            }
        }
    }
    Vec::new()
}

/// Replay an action path and render one protocol step per line.
pub fn render_trace(
    topo: &GroupTopology,
    programs: &[Vec<ProtoOp>],
    actions: &[Action],
) -> Vec<String> {
    let mut machine = Machine::new(topo.clone(), programs.to_vec());
    machine.record_trace = true;
    let mut lines = Vec::new();
    for (step, action) in actions.iter().enumerate() {
        let before = machine.trace.len();
        machine.apply(*action).expect("replay of explored path");
        for ev in &machine.trace[before..] {
            if let Some(line) = render_event(step, ev) {
                lines.push(line);
            }
        }
    }
    // Final stall picture.
    for m in 0..machine.n_modules() {
        match machine.stalled(m) {
            Some(Await::ReleaseOf(o)) => {
                lines.push(format!("t={} m{} waits-release o{} - -> -", actions.len(), m, o))
            }
            Some(Await::Response { owner, .. }) => lines.push(format!(
                "t={} m{} waits-response-from m{} - -> -",
                actions.len(),
                m,
                owner
            )),
            None => {}
        }
    }
    lines
}

fn render_event(step: usize, ev: &TraceEv) -> Option<String> {
    let line = match ev {
        TraceEv::BatchSent {
            src,
            owner,
            requests,
        } => {
            let reqs: Vec<String> = requests
                .iter()
                .map(|r| match r {
                    DsmRequest::Acquire(o) => format!("acquire(o{o})"),
                    DsmRequest::Replicate(o) => format!("replicate(o{o})"),
                    DsmRequest::Release(o, _) => format!("release(o{o})"),
                })
                .collect();
            format!("t={step} m{src} send->m{owner} {} - -> -", reqs.join("+"))
        }
        TraceEv::StateChange {
            m,
            object,
            from,
            to,
        } => format!("t={step} m{m} state o{object} {from} -> {to}"),
        TraceEv::ReleaseApplied { owner, object, .. } => {
            format!("t={step} m{owner} apply-release o{object} Invalid -> Exclusive")
        }
        TraceEv::BatchQueued { owner, src } => {
            format!("t={step} m{owner} queue-batch-from m{src} - -> -")
        }
        TraceEv::OwnerStalled { m, object } => {
            format!("t={step} m{m} stall-for-release o{object} Invalid -> Invalid")
        }
        TraceEv::OwnerAccessed {
            m, object, write, ..
        } => format!(
            "t={step} m{m} owner-{} o{object} Exclusive -> Exclusive",
            if *write { "write" } else { "read" }
        ),
        TraceEv::ResponseApplied { m, results } => {
            let rs: Vec<String> = results
                .iter()
                .map(|r| match r {
                    DsmResult::Replicated(o, _) => format!("value(o{o})"),
                    DsmResult::Granted(o, _) => format!("grant(o{o})"),
                    DsmResult::Released(o) => format!("ack(o{o})"),
                })
                .collect();
            format!("t={step} m{m} recv {} - -> -", rs.join("+"))
        }
        TraceEv::LocalRead { .. } | TraceEv::LocalWrite { .. } => return None,
    };
    Some(line)
}

/// Canonical exercise program for each module of a topology: acquire
/// everything reachable per owner (weakest owner first), touch owned objects,
/// then release in reverse owner order. `ordered = false` reverses one
/// requester's issue order and splits its batches, which is exactly the
/// regulation the order rule exists to forbid.
pub fn canonical_programs(topo: &GroupTopology, ordered: bool) -> Vec<Vec<ProtoOp>> {
    let n = topo.n_modules;
    let mut programs = Vec::with_capacity(n);
    let mut disordered_one = false;
    for m in 0..n {
        let mut owners: Vec<ModuleIdx> = Vec::new();
        let mut per_owner: Vec<Vec<ObjIdx>> = Vec::new();
        for o in 0..topo.n_objects() {
            if topo.role(m, o) == Some(Role::Requester) {
                let owner = topo.owner_of[o];
                match owners.iter().position(|&x| x == owner) {
                    Some(i) => per_owner[i].push(o),
                    None => {
                        owners.push(owner);
                        per_owner.push(vec![o]);
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..owners.len()).collect();
        order.sort_by_key(|&i| owners[i]);

        let owned: Vec<ObjIdx> = (0..topo.n_objects())
            .filter(|&o| topo.role(m, o) == Some(Role::Owner))
            .collect();

        let mut ops: Vec<ProtoOp> = Vec::new();
        if ordered {
            for &i in &order {
                ops.push(ProtoOp::Batch(
                    per_owner[i].iter().map(|&o| (o, true)).collect(),
                ));
            }
        } else if !owners.is_empty() {
            // Unregulated: single-object batches so modules hold while they
            // wait, with the first requester issuing in reverse order.
            if disordered_one {
                for &i in &order {
                    for &o in &per_owner[i] {
                        ops.push(ProtoOp::Batch(vec![(o, true)]));
                    }
                }
            } else {
                disordered_one = true;
                for &i in order.iter().rev() {
                    for &o in per_owner[i].iter().rev() {
                        ops.push(ProtoOp::Batch(vec![(o, true)]));
                    }
                }
            }
        }
        // Touch owned objects while holding the acquired ones, within the
        // per-module protocol-op budget.
        let budget = 6usize;
        let used = 2 * owners.len();
        for &o in owned.iter().take(budget.saturating_sub(used)) {
            ops.push(ProtoOp::OwnerAccess {
                object: o,
                write: true,
            });
        }
        for &i in order.iter().rev() {
            ops.push(ProtoOp::Release(per_owner[i].clone()));
        }
        programs.push(ops);
    }
    programs
}

/// Every sharing structure with at most `max_modules` modules, `max_groups`
/// groups, and `max_objs` objects per group. Module index doubles as the
/// strength position (0 = weakest), so the owner of a group is its minimum
/// member.
pub fn enumerate_topologies(
    max_modules: usize,
    max_groups: usize,
    max_objs: usize,
) -> Vec<GroupTopology> {
    let mut out = Vec::new();
    for n in 1..=max_modules {
        // Non-empty subsets of 0..n.
        let mut subsets: Vec<Vec<ModuleIdx>> = Vec::new();
        for mask in 1u32..(1 << n) {
            subsets.push((0..n).filter(|&m| mask & (1 << m) != 0).collect());
        }
        // Choose up to max_groups distinct subsets.
        let combos = choose_upto(subsets.len(), max_groups);
        for combo in combos {
            // Each chosen group holds 1..=max_objs objects.
            let k = combo.len();
            let mut counts = vec![1usize; k];
            loop {
                let mut owner_of = Vec::new();
                let mut groups = Vec::new();
                for (gi, &si) in combo.iter().enumerate() {
                    let members = &subsets[si];
                    let owner = *members.iter().min().unwrap();
                    for _ in 0..counts[gi] {
                        owner_of.push(owner);
                        groups.push(members.clone());
                    }
                }
                out.push(GroupTopology {
                    owner_of,
                    groups,
                    n_modules: n,
                });
                // Next count vector.
                let mut i = 0;
                loop {
                    if i == k {
                        break;
                    }
                    counts[i] += 1;
                    if counts[i] <= max_objs {
                        break;
                    }
                    counts[i] = 1;
                    i += 1;
                }
                if i == k {
                    break;
                }
            }
        }
    }
    out
}

fn choose_upto(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    fn rec(start: usize, n: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if !cur.is_empty() {
            out.push(cur.clone());
        }
        if left == 0 {
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, left - 1, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// The classic instance: one weak owner of two objects, two requesters
/// acquiring them in opposite orders with single-object batches.
pub fn opposite_order_instance() -> (GroupTopology, Vec<Vec<ProtoOp>>) {
    let topo = GroupTopology {
        owner_of: vec![0, 0],
        groups: vec![vec![0, 1, 2], vec![0, 1, 2]],
        n_modules: 3,
    };
    let programs = vec![
        vec![],
        vec![
            ProtoOp::Batch(vec![(0, true)]),
            ProtoOp::Batch(vec![(1, true)]),
            ProtoOp::Release(vec![0, 1]),
        ],
        vec![
            ProtoOp::Batch(vec![(1, true)]),
            ProtoOp::Batch(vec![(0, true)]),
            ProtoOp::Release(vec![1, 0]),
        ],
    ];
    (topo, programs)
}

/// Same instance with both requesters following the object order.
pub fn same_order_instance() -> (GroupTopology, Vec<Vec<ProtoOp>>) {
    let (topo, mut programs) = opposite_order_instance();
    programs[2] = vec![
        ProtoOp::Batch(vec![(0, true)]),
        ProtoOp::Batch(vec![(1, true)]),
        ProtoOp::Release(vec![0, 1]),
    ];
    (topo, programs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opposite_order_deadlocks_without_regulation() {
        let (topo, programs) = opposite_order_instance();
        let outcome = verify_no_deadlock(topo, programs, 64);
        match outcome {
            CheckOutcome::Counterexample {
                wait_cycle, trace, ..
            } => {
                assert_eq!(wait_cycle.len(), 2, "two-cycle expected: {wait_cycle:?}");
                assert!(!trace.is_empty());
            }
            other => panic!("expected counterexample, got {other:?}"),
        }
    }

    #[test]
    fn same_instance_with_order_is_safe() {
        let (topo, programs) = same_order_instance();
        assert!(verify_no_deadlock(topo, programs, 64).is_safe());
    }

    #[test]
    fn single_module_cannot_lock_itself() {
        let topo = GroupTopology {
            owner_of: vec![0, 0, 0],
            groups: vec![vec![0]; 3],
            n_modules: 1,
        };
        let programs = canonical_programs(&topo, true);
        assert!(verify_no_deadlock(topo, programs, 64).is_safe());
    }

    #[test]
    fn canonical_unordered_flags_the_adversary() {
        let topo = GroupTopology {
            owner_of: vec![0, 0],
            groups: vec![vec![0, 1, 2], vec![0, 1, 2]],
            n_modules: 3,
        };
        let ordered = canonical_programs(&topo, true);
        assert!(verify_no_deadlock(topo.clone(), ordered, 128).is_safe());
        let unordered = canonical_programs(&topo, false);
        // One requester reversed: acquiring via split batches in opposite
        // orders deadlocks somewhere in the interleaving space.
        let outcome = verify_no_deadlock(topo, unordered, 128);
        assert!(
            matches!(outcome, CheckOutcome::Counterexample { .. }),
            "{outcome:?}"
        );
    }

    #[test]
    fn tiny_bound_is_inconclusive() {
        let (topo, programs) = same_order_instance();
        let outcome = verify_no_deadlock(topo, programs, 2);
        assert!(matches!(outcome, CheckOutcome::Inconclusive { bound: 2, .. }));
    }

    #[test]
    fn enumeration_counts_are_stable() {
        let topos = enumerate_topologies(3, 3, 2);
        // 1-module: 2; 2-module: 26; 3-module: 378.
        assert_eq!(topos.len(), 2 + 26 + 378);
        for t in &topos {
            for (o, g) in t.groups.iter().enumerate() {
                assert_eq!(t.owner_of[o], *g.iter().min().unwrap());
            }
        }
    }
}
