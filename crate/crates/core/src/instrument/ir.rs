//! The module intermediate representation the instrumentation pass operates
//! on and the runtime interprets.
//!
//! A module is a set of procedures; a procedure is a control-flow graph of
//! basic blocks; a basic block is a straight-line statement list closed by a
//! single terminator. Loops are counted loop headers and branches carry a
//! probability, so every well-formed program terminates and replays
//! identically under one seed.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum IrError {
    #[error("module `{0}`: duplicate procedure `{1}`")]
    DuplicateProc(String, String),
    #[error("module `{0}`: procedure `{1}` has no blocks")]
    EmptyProc(String, String),
    #[error("module `{0}`: duplicate block `{1}` in `{2}`")]
    DuplicateBlock(String, String, String),
    #[error("module `{0}`: `{1}` jumps to unknown block `{2}`")]
    UnknownBlock(String, String, String),
    #[error("module `{0}`: call to unknown procedure `{1}`")]
    UnknownProc(String, String),
    #[error("module `{0}`: recursion through `{1}` is not supported")]
    Recursion(String, String),
    #[error("module `{0}`: access to undeclared shared object `{1}`")]
    UndeclaredObject(String, String),
    #[error("module `{0}`: handler binding references unknown procedure `{1}`")]
    UnknownHandler(String, String),
    #[error("module `{0}`: block `{1}` in `{2}` can loop forever (no counted header on the cycle)")]
    UnboundedCycle(String, String, String),
    #[error("module `{0}`: branch probability {1} exceeds 1.0")]
    BadProbability(String, u32),
}

/// Request flavor a requester-side pre-access site issues when the object is
/// not already Exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PreKind {
    /// Read-only refresh; neither side changes state.
    Replicate,
    /// Exclusive grant; the site's block may write the object.
    Acquire,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stmt {
    Compute(u64),
    Read(String),
    Write(String),
    Call(String),
    /// Blocking operation (sleep); splits the requester batching block.
    Blocking(u64),
    SendApp {
        dst: String,
        bytes: usize,
    },
    Rpc {
        dst: String,
        proc: String,
        arg_bytes: usize,
    },
    RegisterTimer {
        interval_us: u64,
        timer_id: String,
    },
    GetSensor {
        channel: u32,
    },
    SubscribeSensor {
        channel: u32,
        rate_hz: u32,
    },
    Malloc {
        handle: String,
        bytes: u64,
    },
    Free {
        handle: String,
    },
    /// Inserted requester-side site: one batch to one owner.
    PreAccessReq {
        owner: String,
        entries: Vec<(String, PreKind)>,
    },
    /// Inserted owner-side site: state check, stall while Invalid.
    PreAccessOwn {
        objects: Vec<String>,
    },
    /// Inserted requester-side release site for one owner.
    PostAccess {
        owner: String,
        objects: Vec<String>,
    },
}

impl Stmt {
    pub fn is_inserted(&self) -> bool {
        matches!(
            self,
            Stmt::PreAccessReq { .. } | Stmt::PreAccessOwn { .. } | Stmt::PostAccess { .. }
        )
    }

    /// Shared object touched by a plain access statement, with write flag.
    pub fn plain_access(&self) -> Option<(&str, bool)> {
        match self {
            Stmt::Read(o) => Some((o, false)),
            Stmt::Write(o) => Some((o, true)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Terminator {
    Goto(String),
    Return,
    /// Counted loop header: take `body` `count` times, then `exit`.
    Loop {
        count: u32,
        body: String,
        exit: String,
    },
    /// Seeded probabilistic branch; `prob_num / 100_000` is P(then).
    Choose {
        prob_num: u32,
        then_: String,
        else_: String,
    },
}

impl Terminator {
    pub fn targets(&self) -> Vec<&str> {
        match self {
            Terminator::Goto(b) => vec![b],
            Terminator::Return => vec![],
            Terminator::Loop { body, exit, .. } => vec![body, exit],
            Terminator::Choose { then_, else_, .. } => vec![then_, else_],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockIr {
    pub name: String,
    pub stmts: Vec<Stmt>,
    pub term: Terminator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcIr {
    pub name: String,
    /// First block is the single entry.
    pub blocks: Vec<BlockIr>,
}

impl ProcIr {
    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    /// Predecessor lists by block index.
    pub fn predecessors(&self) -> Vec<Vec<usize>> {
        let mut preds = vec![Vec::new(); self.blocks.len()];
        for (i, b) in self.blocks.iter().enumerate() {
            for t in b.term.targets() {
                if let Some(j) = self.block_index(t) {
                    preds[j].push(i);
                }
            }
        }
        preds
    }
}

/// Which events a module handles, by procedure name.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HandlerBindings {
    pub on_create: Option<String>,
    pub on_data: Option<String>,
    pub on_timer: Option<String>,
    pub on_message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleIr {
    pub name: String,
    /// Declared shared-object accesses; every Read/Write must name one.
    pub shared: Vec<String>,
    pub bindings: HandlerBindings,
    pub procs: Vec<ProcIr>,
}

impl ModuleIr {
    pub fn proc_index(&self, name: &str) -> Option<usize> {
        self.procs.iter().position(|p| p.name == name)
    }

    pub fn proc(&self, name: &str) -> Option<&ProcIr> {
        self.procs.iter().find(|p| p.name == name)
    }

    /// Remove every inserted pre-/post-access statement.
    pub fn stripped(&self) -> ModuleIr {
        let mut out = self.clone();
        for p in &mut out.procs {
            for b in &mut p.blocks {
                b.stmts.retain(|s| !s.is_inserted());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), IrError> {
        let m = &self.name;
        let mut proc_names = BTreeSet::new();
        for p in &self.procs {
            if !proc_names.insert(p.name.as_str()) {
                return Err(IrError::DuplicateProc(m.clone(), p.name.clone()));
            }
            if p.blocks.is_empty() {
                return Err(IrError::EmptyProc(m.clone(), p.name.clone()));
            }
            let mut block_names = BTreeSet::new();
            for b in &p.blocks {
                if !block_names.insert(b.name.as_str()) {
                    return Err(IrError::DuplicateBlock(
                        m.clone(),
                        b.name.clone(),
                        p.name.clone(),
                    ));
                }
            }
            for b in &p.blocks {
                for t in b.term.targets() {
                    if p.block_index(t).is_none() {
                        return Err(IrError::UnknownBlock(
                            m.clone(),
                            p.name.clone(),
                            t.to_string(),
                        ));
                    }
                }
                if let Terminator::Choose { prob_num, .. } = b.term {
                    if prob_num > 100_000 {
                        return Err(IrError::BadProbability(m.clone(), prob_num));
                    }
                }
                for s in &b.stmts {
                    match s {
                        Stmt::Call(callee) | Stmt::Rpc { proc: callee, .. }
                            if s_is_local_call(s) =>
                        {
                            if self.proc_index(callee).is_none() {
                                return Err(IrError::UnknownProc(m.clone(), callee.clone()));
                            }
                        }
                        _ => {}
                    }
                    let check_obj = |o: &String| {
                        if self.shared.iter().any(|s| s == o) {
                            Ok(())
                        } else {
                            Err(IrError::UndeclaredObject(m.clone(), o.clone()))
                        }
                    };
                    match s {
                        Stmt::Read(o) | Stmt::Write(o) => check_obj(o)?,
                        Stmt::PreAccessReq { entries, .. } => {
                            for (o, _) in entries {
                                check_obj(o)?;
                            }
                        }
                        Stmt::PreAccessOwn { objects } | Stmt::PostAccess { objects, .. } => {
                            for o in objects {
                                check_obj(o)?;
                            }
                        }
                        _ => {}
                    }
                }
            }
            self.check_bounded(p)?;
        }
        self.check_acyclic_calls()?;
        for h in [
            &self.bindings.on_create,
            &self.bindings.on_data,
            &self.bindings.on_timer,
            &self.bindings.on_message,
        ]
        .into_iter()
        .flatten()
        {
            if self.proc_index(h).is_none() {
                return Err(IrError::UnknownHandler(m.clone(), h.clone()));
            }
        }
        Ok(())
    }

    /// Every cycle in a procedure's block graph must pass through a counted
    /// loop header, otherwise interpretation could spin forever.
    fn check_bounded(&self, p: &ProcIr) -> Result<(), IrError> {
        let n = p.blocks.len();
        // Edges between non-Loop blocks only; a cycle here is unbounded.
        let mut color = vec![0u8; n]; // 0 white, 1 gray, 2 black
        fn dfs(
            p: &ProcIr,
            i: usize,
            color: &mut Vec<u8>,
        ) -> Option<usize> {
            color[i] = 1;
            if !matches!(p.blocks[i].term, Terminator::Loop { .. }) {
                for t in p.blocks[i].term.targets() {
                    let j = p.block_index(t).unwrap();
                    match color[j] {
                        0 => {
                            if let Some(bad) = dfs(p, j, color) {
                                return Some(bad);
                            }
                        }
                        1 => return Some(j),
                        _ => {}
                    }
                }
            }
            color[i] = 2;
            None
        }
        for i in 0..n {
            if color[i] == 0 {
                if let Some(bad) = dfs(p, i, &mut color) {
                    return Err(IrError::UnboundedCycle(
                        self.name.clone(),
                        p.blocks[bad].name.clone(),
                        p.name.clone(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn check_acyclic_calls(&self) -> Result<(), IrError> {
        let mut callees: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for p in &self.procs {
            let set = callees.entry(p.name.as_str()).or_default();
            for b in &p.blocks {
                for s in &b.stmts {
                    if let Stmt::Call(c) = s {
                        set.insert(c.as_str());
                    }
                }
            }
        }
        let mut color: BTreeMap<&str, u8> = BTreeMap::new();
        fn visit<'a>(
            name: &'a str,
            callees: &BTreeMap<&'a str, BTreeSet<&'a str>>,
            color: &mut BTreeMap<&'a str, u8>,
        ) -> Option<&'a str> {
            color.insert(name, 1);
            if let Some(cs) = callees.get(name) {
                for c in cs {
                    match color.get(c).copied().unwrap_or(0) {
                        0 => {
                            if let Some(bad) = visit(c, callees, color) {
                                return Some(bad);
                            }
                        }
                        1 => return Some(c),
                        _ => {}
                    }
                }
            }
            color.insert(name, 2);
            None
        }
        for p in &self.procs {
            if color.get(p.name.as_str()).copied().unwrap_or(0) == 0 {
                if let Some(bad) = visit(p.name.as_str(), &callees, &mut color) {
                    return Err(IrError::Recursion(self.name.clone(), bad.to_string()));
                }
            }
        }
        Ok(())
    }

    /// Inserted sites in deterministic traversal order (procedure, block,
    /// statement). Site indices key the runtime's per-site check counters.
    pub fn sites(&self) -> Vec<SiteRef> {
        let mut out = Vec::new();
        for (pi, p) in self.procs.iter().enumerate() {
            for (bi, b) in p.blocks.iter().enumerate() {
                for (si, s) in b.stmts.iter().enumerate() {
                    if s.is_inserted() {
                        out.push(SiteRef {
                            proc: pi,
                            block: bi,
                            stmt: si,
                        });
                    }
                }
            }
        }
        out
    }
}

fn s_is_local_call(s: &Stmt) -> bool {
    matches!(s, Stmt::Call(_))
}

/// Position of an inserted instrumentation site within a module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct SiteRef {
    pub proc: usize,
    pub block: usize,
    pub stmt: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_block(stmts: Vec<Stmt>, term: Terminator) -> ModuleIr {
        ModuleIr {
            name: "m".into(),
            shared: vec!["o1".into()],
            bindings: HandlerBindings::default(),
            procs: vec![ProcIr {
                name: "main".into(),
                blocks: vec![BlockIr {
                    name: "entry".into(),
                    stmts,
                    term,
                }],
            }],
        }
    }

    #[test]
    fn valid_minimal_module() {
        let m = one_block(vec![Stmt::Read("o1".into())], Terminator::Return);
        assert!(m.validate().is_ok());
    }

    #[test]
    fn undeclared_object_rejected() {
        let m = one_block(vec![Stmt::Write("ghost".into())], Terminator::Return);
        assert!(matches!(m.validate(), Err(IrError::UndeclaredObject(_, _))));
    }

    #[test]
    fn goto_self_cycle_rejected() {
        let m = one_block(vec![], Terminator::Goto("entry".into()));
        assert!(matches!(m.validate(), Err(IrError::UnboundedCycle(_, _, _))));
    }

    #[test]
    fn counted_loop_cycle_accepted() {
        let m = ModuleIr {
            name: "m".into(),
            shared: vec![],
            bindings: HandlerBindings::default(),
            procs: vec![ProcIr {
                name: "main".into(),
                blocks: vec![
                    BlockIr {
                        name: "head".into(),
                        stmts: vec![],
                        term: Terminator::Loop {
                            count: 4,
                            body: "body".into(),
                            exit: "done".into(),
                        },
                    },
                    BlockIr {
                        name: "body".into(),
                        stmts: vec![Stmt::Compute(10)],
                        term: Terminator::Goto("head".into()),
                    },
                    BlockIr {
                        name: "done".into(),
                        stmts: vec![],
                        term: Terminator::Return,
                    },
                ],
            }],
        };
        assert!(m.validate().is_ok());
    }

    #[test]
    fn recursion_rejected() {
        let mut m = one_block(vec![Stmt::Call("helper".into())], Terminator::Return);
        m.procs.push(ProcIr {
            name: "helper".into(),
            blocks: vec![BlockIr {
                name: "entry".into(),
                stmts: vec![Stmt::Call("main".into())],
                term: Terminator::Return,
            }],
        });
        assert!(matches!(m.validate(), Err(IrError::Recursion(_, _))));
    }

    #[test]
    fn strip_removes_inserted_sites_only() {
        let mut m = one_block(
            vec![
                Stmt::PreAccessOwn {
                    objects: vec!["o1".into()],
                },
                Stmt::Read("o1".into()),
            ],
            Terminator::Return,
        );
        m.shared = vec!["o1".into()];
        let stripped = m.stripped();
        assert_eq!(stripped.procs[0].blocks[0].stmts, vec![Stmt::Read("o1".into())]);
        assert_eq!(m.sites().len(), 1);
        assert_eq!(stripped.sites().len(), 0);
    }
}
