//! Role assignment and the pre-/post-access instrumentation pass.
//!
//! Ownership is static: the group member on the weakest processor owns the
//! object, everyone else is a requester. Requester sites batch per procedure
//! (intra-object) and per owner (inter-object), issued in owner order and
//! released in reverse owner order; owner sites batch per basic block with
//! availability-based elimination. Turning a batching strategy off degrades
//! to per-statement sites, which is also the reference instrumentation the
//! equivalence oracle compares against.

use super::ir::*;
use super::modref::{analyze_mod_ref, is_stall_point, ModRefSummary, ObjSet};
use super::stubs::TypeDescriptor;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PassError {
    #[error("sharing group of `{0}` is empty")]
    EmptyGroup(String),
    #[error("sharing group of `{0}` references unknown module `{1}`")]
    UnknownModule(String, String),
    #[error("module `{0}` is not placed on any processor")]
    Unplaced(String),
    #[error("processor `{0}` has no strength rank")]
    UnknownProcessor(String),
    #[error("group of `{0}`: modules `{1}` and `{2}` are tied at strength rank {3}")]
    GroupTie(String, String, String, u32),
    #[error("module `{0}` accesses `{1}` but is not in its sharing group")]
    NotInGroup(String, String),
    #[error(transparent)]
    Ir(#[from] IrError),
}

/// One shared object as configured: its type, and who may touch it.
#[derive(Debug, Clone)]
pub struct SharedObjectConfig {
    pub id: String,
    pub descriptor: TypeDescriptor,
    pub group: Vec<String>,
}

/// The resolved sharing group: configured data plus the chosen owner.
#[derive(Debug, Clone, Serialize)]
pub struct SharedObjectDescriptor {
    pub id: String,
    #[serde(skip)]
    pub descriptor: TypeDescriptor,
    pub group: Vec<String>,
    pub owner: String,
    pub size_bytes: usize,
}

/// Strict total order over all modules, weakest processor first. Module name
/// breaks ties between co-located modules so the order stays total; ownership
/// ties inside one group are still rejected.
#[derive(Debug, Clone, Default)]
pub struct OwnerOrder {
    rank: BTreeMap<String, usize>,
}

impl OwnerOrder {
    pub fn position(&self, module: &str) -> usize {
        self.rank[module]
    }

    pub fn cmp_modules(&self, a: &str, b: &str) -> std::cmp::Ordering {
        self.position(a).cmp(&self.position(b))
    }
}

/// Per-module view of the role assignment.
#[derive(Debug, Clone, Default)]
pub struct RoleView {
    /// Objects this module owns.
    pub owned: BTreeSet<String>,
    /// Objects this module requests, with their owner module.
    pub requests: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RoleAssignment {
    pub descriptors: Vec<SharedObjectDescriptor>,
    pub order: OwnerOrder,
    /// Keyed by module id.
    pub views: BTreeMap<String, RoleView>,
}

/// Statically assign owner/requester roles.
///
/// `placement` maps module → processor, `strength` processor → rank. With
/// `swap_roles` the strongest member owns instead; that inversion exists only
/// for the energy ablation.
pub fn assign_roles(
    module_ids: &[String],
    placement: &BTreeMap<String, String>,
    strength: &BTreeMap<String, u32>,
    objects: &[SharedObjectConfig],
    swap_roles: bool,
) -> Result<RoleAssignment, PassError> {
    let mut module_rank: BTreeMap<&str, u32> = BTreeMap::new();
    for id in module_ids {
        let proc = placement
            .get(id)
            .ok_or_else(|| PassError::Unplaced(id.clone()))?;
        let rank = strength
            .get(proc)
            .ok_or_else(|| PassError::UnknownProcessor(proc.clone()))?;
        module_rank.insert(id, *rank);
    }

    // Total order: (processor rank, name).
    let mut ordered: Vec<&String> = module_ids.iter().collect();
    ordered.sort_by(|a, b| {
        module_rank[a.as_str()]
            .cmp(&module_rank[b.as_str()])
            .then_with(|| a.cmp(b))
    });
    let order = OwnerOrder {
        rank: ordered
            .iter()
            .enumerate()
            .map(|(i, m)| ((*m).clone(), i))
            .collect(),
    };

    let mut descriptors = Vec::new();
    let mut views: BTreeMap<String, RoleView> = module_ids
        .iter()
        .map(|m| (m.clone(), RoleView::default()))
        .collect();

    for obj in objects {
        if obj.group.is_empty() {
            return Err(PassError::EmptyGroup(obj.id.clone()));
        }
        for member in &obj.group {
            if !module_rank.contains_key(member.as_str()) {
                return Err(PassError::UnknownModule(obj.id.clone(), member.clone()));
            }
        }
        let pick = |invert: bool| -> Result<&String, PassError> {
            let mut best: Option<&String> = None;
            for member in &obj.group {
                match best {
                    None => best = Some(member),
                    Some(cur) => {
                        let (rc, rm) = (module_rank[cur.as_str()], module_rank[member.as_str()]);
                        if rc == rm && cur != member {
                            return Err(PassError::GroupTie(
                                obj.id.clone(),
                                cur.clone(),
                                member.clone(),
                                rc,
                            ));
                        }
                        let better = if invert { rm > rc } else { rm < rc };
                        if better {
                            best = Some(member);
                        }
                    }
                }
            }
            Ok(best.expect("group not empty"))
        };
        let owner = pick(swap_roles)?.clone();
        descriptors.push(SharedObjectDescriptor {
            id: obj.id.clone(),
            descriptor: obj.descriptor.clone(),
            group: obj.group.clone(),
            owner: owner.clone(),
            size_bytes: obj.descriptor.byte_len(),
        });
        for member in &obj.group {
            let view = views.get_mut(member).unwrap();
            if member == &owner {
                view.owned.insert(obj.id.clone());
            } else {
                view.requests.insert(obj.id.clone(), owner.clone());
            }
        }
    }

    Ok(RoleAssignment {
        descriptors,
        order,
        views,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchingToggles {
    pub intra: bool,
    pub inter: bool,
}

impl Default for BatchingToggles {
    fn default() -> BatchingToggles {
        BatchingToggles {
            intra: true,
            inter: true,
        }
    }
}

impl BatchingToggles {
    /// Per-statement sites everywhere: the reference instrumentation.
    pub fn reference() -> BatchingToggles {
        BatchingToggles {
            intra: false,
            inter: false,
        }
    }
}

/// Instrument one module. The returned IR still validates and
/// `result.stripped() == ir.stripped()`.
pub fn instrument(
    ir: &ModuleIr,
    summary: &ModRefSummary,
    view: &RoleView,
    order: &OwnerOrder,
    toggles: BatchingToggles,
) -> Result<ModuleIr, PassError> {
    let mut out = ir.clone();
    for p in &mut out.procs {
        let ps = &summary.procs[&p.name];

        // Requester entry plan: objects this procedure itself may touch,
        // acquire when any path writes, grouped per owner in owner order.
        let mut per_owner: BTreeMap<&String, Vec<(String, PreKind)>> = BTreeMap::new();
        if toggles.intra {
            for obj in ps.direct_may_access() {
                if let Some(owner) = view.requests.get(&obj) {
                    let kind = if ps.direct_may_mod.contains(&obj) {
                        PreKind::Acquire
                    } else {
                        PreKind::Replicate
                    };
                    per_owner.entry(owner).or_default().push((obj, kind));
                }
            }
        }
        let mut owners: Vec<&String> = per_owner.keys().copied().collect();
        owners.sort_by(|a, b| order.cmp_modules(a, b));

        let pre_seq: Vec<Stmt> = owners
            .iter()
            .flat_map(|o| {
                let entries = per_owner[*o].clone();
                if toggles.inter {
                    vec![Stmt::PreAccessReq {
                        owner: (*o).clone(),
                        entries,
                    }]
                } else {
                    entries
                        .into_iter()
                        .map(|e| Stmt::PreAccessReq {
                            owner: (*o).clone(),
                            entries: vec![e],
                        })
                        .collect()
                }
            })
            .collect();
        let post_seq: Vec<Stmt> = owners
            .iter()
            .rev()
            .flat_map(|o| {
                let acquired: Vec<String> = per_owner[*o]
                    .iter()
                    .filter(|(_, k)| *k == PreKind::Acquire)
                    .map(|(obj, _)| obj.clone())
                    .collect();
                if acquired.is_empty() {
                    vec![]
                } else if toggles.inter {
                    vec![Stmt::PostAccess {
                        owner: (*o).clone(),
                        objects: acquired,
                    }]
                } else {
                    acquired
                        .into_iter()
                        .rev()
                        .map(|obj| Stmt::PostAccess {
                            owner: (*o).clone(),
                            objects: vec![obj],
                        })
                        .collect()
                }
            })
            .collect();

        for (bi, b) in p.blocks.iter_mut().enumerate() {
            // Owner plan, per stall-free segment of the block: the first
            // segment subtracts what is already certain at block entry,
            // later segments start from nothing (a nested stall may have
            // granted anything away).
            let seg_needs: Vec<Vec<String>> = if toggles.intra {
                let avail = &summary.avail_in[&(p.name.clone(), b.name.clone())];
                let mut segs: Vec<ObjSet> = vec![ObjSet::new()];
                for s in &b.stmts {
                    if is_stall_point(s) {
                        segs.push(ObjSet::new());
                    } else if let Some((obj, _)) = s.plain_access() {
                        if view.owned.contains(obj) {
                            segs.last_mut().unwrap().insert(obj.to_string());
                        }
                    }
                }
                segs[0] = segs[0].difference(avail).cloned().collect();
                segs.into_iter().map(|s| s.into_iter().collect()).collect()
            } else {
                Vec::new()
            };

            let mut stmts = Vec::with_capacity(b.stmts.len() + 4);
            if bi == 0 {
                stmts.extend(pre_seq.iter().cloned());
            }
            let mut seg_idx = 0usize;
            if toggles.intra && !seg_needs[0].is_empty() {
                stmts.push(Stmt::PreAccessOwn {
                    objects: seg_needs[0].clone(),
                });
            }
            for s in b.stmts.drain(..) {
                let stall = is_stall_point(&s);
                match (&s, toggles.intra) {
                    (Stmt::Blocking(_), true) => {
                        stmts.extend(post_seq.iter().cloned());
                        stmts.push(s);
                        stmts.extend(pre_seq.iter().cloned());
                    }
                    _ => {
                        if !toggles.intra {
                            if let Some((obj, is_write)) = s.plain_access() {
                                if view.owned.contains(obj) {
                                    stmts.push(Stmt::PreAccessOwn {
                                        objects: vec![obj.to_string()],
                                    });
                                } else if let Some(owner) = view.requests.get(obj) {
                                    let kind = if is_write {
                                        PreKind::Acquire
                                    } else {
                                        PreKind::Replicate
                                    };
                                    stmts.push(Stmt::PreAccessReq {
                                        owner: owner.clone(),
                                        entries: vec![(obj.to_string(), kind)],
                                    });
                                }
                            }
                        }
                        let release_after = if !toggles.intra {
                            match s.plain_access() {
                                Some((obj, true)) => {
                                    view.requests.get(obj).map(|o| (obj.to_string(), o.clone()))
                                }
                                _ => None,
                            }
                        } else {
                            None
                        };
                        stmts.push(s);
                        if let Some((obj, owner)) = release_after {
                            stmts.push(Stmt::PostAccess {
                                owner,
                                objects: vec![obj],
                            });
                        }
                    }
                }
                if stall && toggles.intra {
                    seg_idx += 1;
                    if !seg_needs[seg_idx].is_empty() {
                        stmts.push(Stmt::PreAccessOwn {
                            objects: seg_needs[seg_idx].clone(),
                        });
                    }
                }
            }
            if toggles.intra && matches!(b.term, Terminator::Return) {
                stmts.extend(post_seq.iter().cloned());
            }
            b.stmts = stmts;
        }
    }
    out.validate()?;
    debug_assert_eq!(out.stripped(), ir.stripped());
    Ok(out)
}

/// Per-module footprint of the inserted code, at a flat 10 bytes per site.
pub const BYTES_PER_SITE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Footprint {
    pub sites: usize,
    pub bytes: usize,
}

pub fn estimate_footprint(instrumented: &ModuleIr) -> Footprint {
    let sites = instrumented.sites().len();
    Footprint {
        sites,
        bytes: sites * BYTES_PER_SITE,
    }
}

/// A fully prepared application: instrumented modules plus the role tables.
#[derive(Debug, Clone)]
pub struct InstrumentedApp {
    pub modules: Vec<ModuleIr>,
    pub assignment: RoleAssignment,
    pub summaries: BTreeMap<String, ModRefSummary>,
    pub footprints: BTreeMap<String, Footprint>,
}

/// Analyze, assign roles, and instrument every module of an application.
pub fn build_app(
    modules: &[ModuleIr],
    placement: &BTreeMap<String, String>,
    strength: &BTreeMap<String, u32>,
    objects: &[SharedObjectConfig],
    toggles: BatchingToggles,
    swap_roles: bool,
) -> Result<InstrumentedApp, PassError> {
    let ids: Vec<String> = modules.iter().map(|m| m.name.clone()).collect();
    let assignment = assign_roles(&ids, placement, strength, objects, swap_roles)?;

    // A module may only touch objects whose group lists it.
    for m in modules {
        let view = &assignment.views[&m.name];
        for obj in &m.shared {
            if !view.owned.contains(obj) && !view.requests.contains_key(obj) {
                return Err(PassError::NotInGroup(m.name.clone(), obj.clone()));
            }
        }
    }

    let mut instrumented = Vec::with_capacity(modules.len());
    let mut summaries = BTreeMap::new();
    let mut footprints = BTreeMap::new();
    for m in modules {
        let summary = analyze_mod_ref(m)?;
        let out = instrument(
            m,
            &summary,
            &assignment.views[&m.name],
            &assignment.order,
            toggles,
        )?;
        footprints.insert(m.name.clone(), estimate_footprint(&out));
        summaries.insert(m.name.clone(), summary);
        instrumented.push(out);
    }
    Ok(InstrumentedApp {
        modules: instrumented,
        assignment,
        summaries,
        footprints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument::text::{parse_module, print_module};

    fn td(text: &str) -> TypeDescriptor {
        TypeDescriptor::parse(text).unwrap()
    }

    fn tri_strength() -> BTreeMap<String, u32> {
        [("omap3".into(), 2), ("lpc1343".into(), 1), ("msp430".into(), 0)].into()
    }

    #[test]
    fn weakest_member_owns() {
        let placement: BTreeMap<String, String> = [
            ("central".into(), "omap3".into()),
            ("periph".into(), "msp430".into()),
        ]
        .into();
        let objects = vec![SharedObjectConfig {
            id: "o1".into(),
            descriptor: td("field v i32"),
            group: vec!["central".into(), "periph".into()],
        }];
        let roles = assign_roles(
            &["central".into(), "periph".into()],
            &placement,
            &tri_strength(),
            &objects,
            false,
        )
        .unwrap();
        assert_eq!(roles.descriptors[0].owner, "periph");
        assert!(roles.views["periph"].owned.contains("o1"));
        assert_eq!(roles.views["central"].requests["o1"], "periph");
    }

    #[test]
    fn msp_beats_lpc_for_ownership() {
        let placement: BTreeMap<String, String> = [
            ("pa".into(), "msp430".into()),
            ("pb".into(), "lpc1343".into()),
        ]
        .into();
        let objects = vec![SharedObjectConfig {
            id: "avg".into(),
            descriptor: td("field v i32"),
            group: vec!["pa".into(), "pb".into()],
        }];
        let roles = assign_roles(
            &["pa".into(), "pb".into()],
            &placement,
            &tri_strength(),
            &objects,
            false,
        )
        .unwrap();
        assert_eq!(roles.descriptors[0].owner, "pa");
    }

    #[test]
    fn singleton_group_owns_itself_with_no_requesters() {
        let placement: BTreeMap<String, String> = [("solo".into(), "msp430".into())].into();
        let objects = vec![SharedObjectConfig {
            id: "o".into(),
            descriptor: td("field v i32"),
            group: vec!["solo".into()],
        }];
        let roles =
            assign_roles(&["solo".into()], &placement, &tri_strength(), &objects, false).unwrap();
        assert_eq!(roles.descriptors[0].owner, "solo");
        assert!(roles.views["solo"].requests.is_empty());
    }

    #[test]
    fn co_located_group_members_are_a_tie_error() {
        let placement: BTreeMap<String, String> = [
            ("a".into(), "msp430".into()),
            ("b".into(), "msp430".into()),
        ]
        .into();
        let objects = vec![SharedObjectConfig {
            id: "o".into(),
            descriptor: td("field v i32"),
            group: vec!["a".into(), "b".into()],
        }];
        let err = assign_roles(
            &["a".into(), "b".into()],
            &placement,
            &tri_strength(),
            &objects,
            false,
        )
        .unwrap_err();
        assert!(matches!(err, PassError::GroupTie(_, _, _, 0)));
    }

    fn two_owner_requester() -> (ModuleIr, RoleAssignment) {
        // Requester module touching objects owned by two different owners.
        let m = parse_module(
            "module req\nshared x y\nproc work\n  block entry\n    read x\n    write y\n    return\n",
        )
        .unwrap();
        let placement: BTreeMap<String, String> = [
            ("req".into(), "omap3".into()),
            ("own1".into(), "msp430".into()),
            ("own2".into(), "lpc1343".into()),
        ]
        .into();
        let objects = vec![
            SharedObjectConfig {
                id: "x".into(),
                descriptor: td("field v i32"),
                group: vec!["req".into(), "own1".into()],
            },
            SharedObjectConfig {
                id: "y".into(),
                descriptor: td("field v i32"),
                group: vec!["req".into(), "own2".into()],
            },
        ];
        let roles = assign_roles(
            &["req".into(), "own1".into(), "own2".into()],
            &placement,
            &tri_strength(),
            &objects,
            false,
        )
        .unwrap();
        (m, roles)
    }

    #[test]
    fn pre_in_owner_order_post_in_reverse() {
        let (m, roles) = two_owner_requester();
        let summary = analyze_mod_ref(&m).unwrap();
        let out = instrument(
            &m,
            &summary,
            &roles.views["req"],
            &roles.order,
            BatchingToggles::default(),
        )
        .unwrap();
        let stmts = &out.procs[0].blocks[0].stmts;
        // own1 (msp430) is weaker than own2 (lpc1343): pre batches go weakest
        // first, releases go strongest first.
        assert!(matches!(
            &stmts[0],
            Stmt::PreAccessReq { owner, entries } if owner == "own1"
                && entries == &vec![("x".to_string(), PreKind::Replicate)]
        ));
        assert!(matches!(
            &stmts[1],
            Stmt::PreAccessReq { owner, entries } if owner == "own2"
                && entries == &vec![("y".to_string(), PreKind::Acquire)]
        ));
        // Trailing release: only the acquired object, only owner own2.
        let posts: Vec<&Stmt> = stmts
            .iter()
            .filter(|s| matches!(s, Stmt::PostAccess { .. }))
            .collect();
        assert_eq!(posts.len(), 1);
        assert!(matches!(
            posts[0],
            Stmt::PostAccess { owner, objects } if owner == "own2" && objects == &vec!["y".to_string()]
        ));
    }

    #[test]
    fn no_shared_access_means_no_change() {
        let m = parse_module(
            "module req\nshared\nproc idle\n  block entry\n    compute 100\n    return\n",
        )
        .unwrap();
        let summary = analyze_mod_ref(&m).unwrap();
        let out = instrument(
            &m,
            &summary,
            &RoleView::default(),
            &OwnerOrder {
                rank: [("req".to_string(), 0)].into(),
            },
            BatchingToggles::default(),
        )
        .unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn owner_loop_block_pre_is_eliminated_when_dominated() {
        let m = parse_module(
            "module own\nshared template\nproc match\n  block entry\n    read template\n    goto head\n  block head\n    loop 64 body done\n  block body\n    read template\n    compute 20\n    goto head\n  block done\n    return\n",
        )
        .unwrap();
        let summary = analyze_mod_ref(&m).unwrap();
        let mut view = RoleView::default();
        view.owned.insert("template".into());
        let out = instrument(
            &m,
            &summary,
            &view,
            &OwnerOrder {
                rank: [("own".to_string(), 0)].into(),
            },
            BatchingToggles::default(),
        )
        .unwrap();
        // Exactly one surviving owner pre-access, at the entry block.
        assert_eq!(out.sites().len(), 1);
        assert!(matches!(
            &out.procs[0].blocks[0].stmts[0],
            Stmt::PreAccessOwn { objects } if objects == &vec!["template".to_string()]
        ));
    }

    #[test]
    fn reference_mode_inserts_per_statement_sites() {
        let (m, roles) = two_owner_requester();
        let summary = analyze_mod_ref(&m).unwrap();
        let out = instrument(
            &m,
            &summary,
            &roles.views["req"],
            &roles.order,
            BatchingToggles::reference(),
        )
        .unwrap();
        // read x → pre; write y → pre + post.
        assert_eq!(out.sites().len(), 3);
        assert_eq!(out.stripped(), m);
    }

    #[test]
    fn blocking_splits_the_batching_block() {
        let m = parse_module(
            "module req\nshared y\nproc work\n  block entry\n    write y\n    blocking 10\n    write y\n    return\n",
        )
        .unwrap();
        let placement: BTreeMap<String, String> = [
            ("req".into(), "omap3".into()),
            ("own".into(), "msp430".into()),
        ]
        .into();
        let objects = vec![SharedObjectConfig {
            id: "y".into(),
            descriptor: td("field v i32"),
            group: vec!["req".into(), "own".into()],
        }];
        let roles = assign_roles(
            &["req".into(), "own".into()],
            &placement,
            &tri_strength(),
            &objects,
            false,
        )
        .unwrap();
        let summary = analyze_mod_ref(&m).unwrap();
        let out = instrument(
            &m,
            &summary,
            &roles.views["req"],
            &roles.order,
            BatchingToggles::default(),
        )
        .unwrap();
        let kinds: Vec<String> = out.procs[0].blocks[0]
            .stmts
            .iter()
            .map(|s| match s {
                Stmt::PreAccessReq { .. } => "pre".into(),
                Stmt::PostAccess { .. } => "post".into(),
                Stmt::Blocking(_) => "blocking".into(),
                Stmt::Write(_) => "write".into(),
                other => format!("{other:?}"),
            })
            .collect();
        assert_eq!(
            kinds,
            vec!["pre", "write", "post", "blocking", "pre", "write", "post"]
        );
    }

    #[test]
    fn instrumented_ir_round_trips_through_text() {
        let (m, roles) = two_owner_requester();
        let summary = analyze_mod_ref(&m).unwrap();
        let out = instrument(
            &m,
            &summary,
            &roles.views["req"],
            &roles.order,
            BatchingToggles::default(),
        )
        .unwrap();
        let printed = print_module(&out);
        assert_eq!(parse_module(&printed).unwrap(), out);
    }

    #[test]
    fn footprint_is_ten_bytes_per_site() {
        let (m, roles) = two_owner_requester();
        let summary = analyze_mod_ref(&m).unwrap();
        let out = instrument(
            &m,
            &summary,
            &roles.views["req"],
            &roles.order,
            BatchingToggles::default(),
        )
        .unwrap();
        let fp = estimate_footprint(&out);
        assert_eq!(fp.bytes, fp.sites * 10);
        assert_eq!(estimate_footprint(&m).bytes, 0);
    }
}
