//! Mod/Ref summaries over the module IR.
//!
//! Objects are first-class named entities here, so "alias analysis" reduces
//! to the declared access sets plus path sensitivity: an access is *must* if
//! it happens on every path through the procedure and *may* if it happens on
//! some path. Summaries are conservative; a counted loop is treated as
//! possibly zero-trip and both branch arms as possible.

use super::ir::*;
use std::collections::{BTreeMap, BTreeSet};

pub type ObjSet = BTreeSet<String>;

/// Straight-line block: every access in it is certain once the block runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockAccess {
    pub reads: ObjSet,
    pub writes: ObjSet,
}

impl BlockAccess {
    pub fn accessed(&self) -> ObjSet {
        self.reads.union(&self.writes).cloned().collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProcSummary {
    /// Accesses by this procedure's own statements.
    pub direct_may_ref: ObjSet,
    pub direct_may_mod: ObjSet,
    pub direct_must_ref: ObjSet,
    pub direct_must_mod: ObjSet,
    /// Direct plus everything reachable through calls.
    pub trans_may_ref: ObjSet,
    pub trans_may_mod: ObjSet,
    pub trans_must_ref: ObjSet,
    pub trans_must_mod: ObjSet,
}

impl ProcSummary {
    pub fn direct_may_access(&self) -> ObjSet {
        self.direct_may_ref
            .union(&self.direct_may_mod)
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ModRefSummary {
    /// Keyed by (procedure, block).
    pub blocks: BTreeMap<(String, String), BlockAccess>,
    pub procs: BTreeMap<String, ProcSummary>,
    /// Objects certainly accessed earlier in the same procedure on every path
    /// reaching the block's entry, with no stall point (call, rpc, blocking)
    /// in between. Drives owner-side pre-access elimination: a grant can
    /// happen at any nested stall, so certainty dies there.
    pub avail_in: BTreeMap<(String, String), ObjSet>,
}

/// Summarize every procedure. The IR must already validate, which guarantees
/// declared-object accesses and an acyclic call graph.
pub fn analyze_mod_ref(m: &ModuleIr) -> Result<ModRefSummary, IrError> {
    m.validate()?;
    let mut out = ModRefSummary::default();

    // Block-level sets first.
    for p in &m.procs {
        for b in &p.blocks {
            let mut acc = BlockAccess::default();
            for s in &b.stmts {
                if let Some((obj, is_write)) = s.plain_access() {
                    if is_write {
                        acc.writes.insert(obj.to_string());
                    } else {
                        acc.reads.insert(obj.to_string());
                    }
                }
            }
            out.blocks.insert((p.name.clone(), b.name.clone()), acc);
        }
    }

    // Procedures in callee-first order so transitive sets are available.
    for pname in topo_order(m) {
        let p = m.proc(&pname).expect("topo order names exist");
        let summary = summarize_proc(m, p, &out);
        out.procs.insert(pname, summary);
    }

    // Availability (for owner elimination) needs the finished proc summaries.
    for p in &m.procs {
        let avail = availability(m, p, &out);
        for (bi, b) in p.blocks.iter().enumerate() {
            out.avail_in
                .insert((p.name.clone(), b.name.clone()), avail[bi].clone());
        }
    }
    Ok(out)
}

fn topo_order(m: &ModuleIr) -> Vec<String> {
    let mut order = Vec::new();
    let mut done: BTreeSet<String> = BTreeSet::new();
    fn visit(m: &ModuleIr, name: &str, done: &mut BTreeSet<String>, order: &mut Vec<String>) {
        if done.contains(name) {
            return;
        }
        done.insert(name.to_string());
        if let Some(p) = m.proc(name) {
            for b in &p.blocks {
                for s in &b.stmts {
                    if let Stmt::Call(c) = s {
                        visit(m, c, done, order);
                    }
                }
            }
        }
        order.push(name.to_string());
    }
    for p in &m.procs {
        visit(m, &p.name, &mut done, &mut order);
    }
    order
}

fn summarize_proc(m: &ModuleIr, p: &ProcIr, partial: &ModRefSummary) -> ProcSummary {
    let mut s = ProcSummary::default();

    // May = union over reachable blocks (all blocks are reachable candidates).
    for b in &p.blocks {
        let acc = &partial.blocks[&(p.name.clone(), b.name.clone())];
        s.direct_may_ref.extend(acc.reads.iter().cloned());
        s.direct_may_mod.extend(acc.writes.iter().cloned());
        s.trans_may_ref.extend(acc.reads.iter().cloned());
        s.trans_may_mod.extend(acc.writes.iter().cloned());
        for st in &b.stmts {
            if let Stmt::Call(c) = st {
                let callee = &partial.procs[c];
                s.trans_may_ref.extend(callee.trans_may_ref.iter().cloned());
                s.trans_may_mod.extend(callee.trans_may_mod.iter().cloned());
            }
        }
    }

    // Must = available at every Return. Forward dataflow, meet = intersection.
    let (direct_must_ref, direct_must_mod) = must_sets(m, p, partial, false);
    let (trans_must_ref, trans_must_mod) = must_sets(m, p, partial, true);
    s.direct_must_ref = direct_must_ref;
    s.direct_must_mod = direct_must_mod;
    s.trans_must_ref = trans_must_ref;
    s.trans_must_mod = trans_must_mod;
    s
}

fn block_gen(
    p: &ProcIr,
    bi: usize,
    partial: &ModRefSummary,
    with_calls: bool,
    want_writes: bool,
) -> ObjSet {
    let b = &p.blocks[bi];
    let acc = &partial.blocks[&(p.name.clone(), b.name.clone())];
    let mut set = if want_writes {
        acc.writes.clone()
    } else {
        acc.reads.clone()
    };
    if with_calls {
        for st in &b.stmts {
            if let Stmt::Call(c) = st {
                let callee = &partial.procs[c];
                let extra = if want_writes {
                    &callee.trans_must_mod
                } else {
                    &callee.trans_must_ref
                };
                set.extend(extra.iter().cloned());
            }
        }
    }
    set
}

fn must_sets(
    _m: &ModuleIr,
    p: &ProcIr,
    partial: &ModRefSummary,
    with_calls: bool,
) -> (ObjSet, ObjSet) {
    let mut must_ref = None;
    let mut must_mod = None;
    for want_writes in [false, true] {
        // Occurrence, not exclusivity: stall points do not erase the fact
        // that an access happened, so no kills here.
        let avail = flow_available(p, |bi, avail_in| {
            let mut out = avail_in.clone();
            out.extend(block_gen(p, bi, partial, with_calls, want_writes));
            out
        });
        // Intersect avail-out over the return blocks.
        let mut result: Option<ObjSet> = None;
        for (bi, b) in p.blocks.iter().enumerate() {
            if matches!(b.term, Terminator::Return) {
                let mut out = avail[bi].clone();
                out.extend(block_gen(p, bi, partial, with_calls, want_writes));
                result = Some(match result {
                    None => out,
                    Some(r) => r.intersection(&out).cloned().collect(),
                });
            }
        }
        let result = result.unwrap_or_default();
        if want_writes {
            must_mod = Some(result);
        } else {
            must_ref = Some(result);
        }
    }
    (must_ref.unwrap(), must_mod.unwrap())
}

/// Forward availability of "accessed" objects at each block entry:
/// `avail_in[entry] = {}`, `avail_in[B] = ∩ preds transfer(P)`.
fn flow_available(p: &ProcIr, transfer: impl Fn(usize, &ObjSet) -> ObjSet) -> Vec<ObjSet> {
    let n = p.blocks.len();
    let preds = p.predecessors();
    let universe: ObjSet = (0..n)
        .flat_map(|i| transfer(i, &ObjSet::new()))
        .collect();
    let mut avail_in: Vec<ObjSet> = (0..n)
        .map(|i| if i == 0 { ObjSet::new() } else { universe.clone() })
        .collect();
    let mut changed = true;
    while changed {
        changed = false;
        for i in 1..n {
            let mut meet: Option<ObjSet> = None;
            for &pr in &preds[i] {
                let out = transfer(pr, &avail_in[pr]);
                meet = Some(match meet {
                    None => out,
                    Some(acc) => acc.intersection(&out).cloned().collect(),
                });
            }
            let next = meet.unwrap_or_default();
            if next != avail_in[i] {
                avail_in[i] = next;
                changed = true;
            }
        }
    }
    avail_in
}

/// A statement at which the module may stall and serve coherence requests;
/// exclusivity certainty does not survive it.
pub fn is_stall_point(s: &Stmt) -> bool {
    matches!(
        s,
        Stmt::Call(_) | Stmt::Rpc { .. } | Stmt::Blocking(_)
    )
}

/// Objects certainly accessed after the last stall point of a block (the
/// whole block's accesses when it has none), unioned with incoming
/// availability if nothing kills it.
fn block_transfer(b: &BlockIr, avail_in: &ObjSet) -> ObjSet {
    let mut out = avail_in.clone();
    for s in &b.stmts {
        if is_stall_point(s) {
            out.clear();
        } else if let Some((obj, _)) = s.plain_access() {
            out.insert(obj.to_string());
        }
    }
    out
}

fn availability(m: &ModuleIr, p: &ProcIr, partial: &ModRefSummary) -> Vec<ObjSet> {
    let _ = (m, partial);
    flow_available(p, |bi, avail| block_transfer(&p.blocks[bi], avail))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument::text::parse_module;

    #[test]
    fn write_then_read_is_must_both() {
        let m = parse_module(
            "module m\nshared o1\nproc p\n  block entry\n    write o1\n    read o1\n    return\n",
        )
        .unwrap();
        let s = analyze_mod_ref(&m).unwrap();
        let ps = &s.procs["p"];
        assert!(ps.direct_must_mod.contains("o1"));
        assert!(ps.direct_must_ref.contains("o1"));
        assert!(ps.direct_may_mod.contains("o1"));
    }

    #[test]
    fn one_armed_write_is_may_not_must() {
        let m = parse_module(
            "module m\nshared o1\nproc p\n  block entry\n    choose 0.5 yes no\n  block yes\n    write o1\n    goto no\n  block no\n    return\n",
        )
        .unwrap();
        let s = analyze_mod_ref(&m).unwrap();
        let ps = &s.procs["p"];
        assert!(ps.direct_may_mod.contains("o1"));
        assert!(!ps.direct_must_mod.contains("o1"));
    }

    #[test]
    fn loop_body_ref_is_must_when_entry_touches_it() {
        // Entry reads the template, the nested loop re-reads it; at the loop
        // body's entry the object is already available on every path.
        let m = parse_module(
            "module m\nshared template\nproc match\n  block entry\n    read template\n    goto head\n  block head\n    loop 64 body done\n  block body\n    read template\n    compute 20\n    goto head\n  block done\n    return\n",
        )
        .unwrap();
        let s = analyze_mod_ref(&m).unwrap();
        assert!(s.avail_in[&("match".into(), "body".into())].contains("template"));
        assert!(s.procs["match"].direct_must_ref.contains("template"));
    }

    #[test]
    fn loop_only_access_is_not_available_at_body() {
        let m = parse_module(
            "module m\nshared template\nproc match\n  block entry\n    compute 5\n    goto head\n  block head\n    loop 64 body done\n  block body\n    read template\n    goto head\n  block done\n    return\n",
        )
        .unwrap();
        let s = analyze_mod_ref(&m).unwrap();
        assert!(!s.avail_in[&("match".into(), "body".into())].contains("template"));
    }

    #[test]
    fn stall_points_kill_availability() {
        // The callee can stall and serve a grant away, so the caller's later
        // access cannot rely on the earlier one.
        let m = parse_module(
            "module m\nshared o1\nproc top\n  block entry\n    read o1\n    call sub\n    goto next\n  block next\n    read o1\n    return\nproc sub\n  block entry\n    write o1\n    return\n",
        )
        .unwrap();
        let s = analyze_mod_ref(&m).unwrap();
        assert!(!s.avail_in[&("top".into(), "next".into())].contains("o1"));
        assert!(s.procs["top"].trans_must_mod.contains("o1"));
        assert!(!s.procs["top"].direct_may_mod.contains("o1"));
    }

    #[test]
    fn plain_blocks_carry_availability() {
        let m = parse_module(
            "module m\nshared o1\nproc top\n  block entry\n    read o1\n    goto next\n  block next\n    read o1\n    return\n",
        )
        .unwrap();
        let s = analyze_mod_ref(&m).unwrap();
        assert!(s.avail_in[&("top".into(), "next".into())].contains("o1"));
    }

    #[test]
    fn undeclared_access_is_an_analysis_error() {
        let m = ModuleIr {
            name: "m".into(),
            shared: vec![],
            bindings: HandlerBindings::default(),
            procs: vec![ProcIr {
                name: "p".into(),
                blocks: vec![BlockIr {
                    name: "entry".into(),
                    stmts: vec![Stmt::Read("o1".into())],
                    term: Terminator::Return,
                }],
            }],
        };
        assert!(analyze_mod_ref(&m).is_err());
    }
}
