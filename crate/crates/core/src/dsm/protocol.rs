//! The object-granularity coherence protocol.
//!
//! Per (module, object) a member is either the *owner* (the weakest group
//! member; states Exclusive/Invalid) or a *requester* (states
//! Exclusive/Shared). Requesters drive every transition with acquire,
//! release, and replicate requests batched per owner; the owner only reacts.
//! Requesters propagate updates eagerly, the owner answers lazily, and while
//! not Exclusive an owner queues incoming batches until a release restores
//! exclusivity. One response answers a whole batch or the batch waits.

use serde::Serialize;
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

pub type ModuleIdx = usize;
pub type ObjIdx = usize;
pub type DsmValue = Vec<u8>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Role {
    Owner,
    Requester,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CoherenceState {
    Exclusive,
    /// Owner only: the object is granted out.
    Invalid,
    /// Requester only: readable copy, possibly stale.
    Shared,
}

impl std::fmt::Display for CoherenceState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CoherenceState::Exclusive => "Exclusive",
            CoherenceState::Invalid => "Invalid",
            CoherenceState::Shared => "Shared",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("module {0} is not in the sharing group of object {1}")]
    NotMember(ModuleIdx, ObjIdx),
    #[error("module {0} does not own object {1}")]
    NotOwner(ModuleIdx, ObjIdx),
    #[error("module {0} owns object {1} and cannot request it")]
    OwnerRequest(ModuleIdx, ObjIdx),
    #[error("batch mixes release with acquire/replicate")]
    MixedBatch,
    #[error("batch mixes objects of different owners")]
    MixedOwners,
    #[error("module {0} wrote object {1} while not Exclusive")]
    WriteWhileNotExclusive(ModuleIdx, ObjIdx),
    #[error("owner {0} touched object {1} while Invalid")]
    OwnerAccessWhileInvalid(ModuleIdx, ObjIdx),
    #[error("release for object {0} arrived while the owner is Exclusive")]
    UnexpectedRelease(ObjIdx),
    #[error("response does not match an outstanding batch")]
    UnexpectedResponse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum DsmRequest {
    Replicate(ObjIdx),
    Acquire(ObjIdx),
    Release(ObjIdx, DsmValue),
}

impl DsmRequest {
    pub fn object(&self) -> ObjIdx {
        match self {
            DsmRequest::Replicate(o) | DsmRequest::Acquire(o) | DsmRequest::Release(o, _) => *o,
        }
    }

    pub fn is_release(&self) -> bool {
        matches!(self, DsmRequest::Release(_, _))
    }
}

/// An ordered list of requests from one requester to one owner, carried in a
/// single message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DsmBatch {
    pub id: u64,
    pub src: ModuleIdx,
    pub owner: ModuleIdx,
    pub requests: Vec<DsmRequest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum DsmResult {
    /// Current value; neither side changed state.
    Replicated(ObjIdx, DsmValue),
    /// Current value plus exclusivity; the owner went Invalid.
    Granted(ObjIdx, DsmValue),
    /// Write-back accepted; the requester returns to Shared on receipt.
    Released(ObjIdx),
}

impl DsmResult {
    pub fn object(&self) -> ObjIdx {
        match self {
            DsmResult::Replicated(o, _) | DsmResult::Granted(o, _) | DsmResult::Released(o) => *o,
        }
    }
}

/// One response answers one batch, after every request in it is satisfied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DsmResponse {
    pub batch_id: u64,
    pub owner: ModuleIdx,
    pub dst: ModuleIdx,
    pub results: Vec<DsmResult>,
}

/// Static sharing structure: per object its owner and group.
#[derive(Debug, Clone, Default)]
pub struct GroupTopology {
    pub owner_of: Vec<ModuleIdx>,
    pub groups: Vec<Vec<ModuleIdx>>,
    pub n_modules: usize,
}

impl GroupTopology {
    pub fn n_objects(&self) -> usize {
        self.owner_of.len()
    }

    pub fn is_member(&self, m: ModuleIdx, o: ObjIdx) -> bool {
        self.groups[o].contains(&m)
    }

    pub fn role(&self, m: ModuleIdx, o: ObjIdx) -> Option<Role> {
        if !self.is_member(m, o) {
            None
        } else if self.owner_of[o] == m {
            Some(Role::Owner)
        } else {
            Some(Role::Requester)
        }
    }
}

/// Outcome of the owner handling one incoming batch.
#[derive(Debug, Clone, PartialEq)]
pub enum ServeOutcome {
    /// Answered atomically.
    Responded(DsmResponse),
    /// Some requested object is not Exclusive; the whole batch waits.
    Queued,
}

/// Protocol state for every sharing group of one application: member states,
/// local copies, and each owner's pending FIFO of batches that arrived while
/// it was not Exclusive.
#[derive(Debug, Clone)]
pub struct DsmCore {
    topo: GroupTopology,
    /// state[m][o]
    state: Vec<BTreeMap<ObjIdx, CoherenceState>>,
    copy: Vec<BTreeMap<ObjIdx, DsmValue>>,
    pending: Vec<VecDeque<DsmBatch>>,
}

impl DsmCore {
    /// Everyone starts with a copy of the initial value; the owner starts
    /// Exclusive, requesters start Shared.
    pub fn new(topo: GroupTopology, initial: &[DsmValue]) -> DsmCore {
        assert_eq!(initial.len(), topo.n_objects());
        let mut state = vec![BTreeMap::new(); topo.n_modules];
        let mut copy = vec![BTreeMap::new(); topo.n_modules];
        for o in 0..topo.n_objects() {
            for &m in &topo.groups[o] {
                let s = if topo.owner_of[o] == m {
                    CoherenceState::Exclusive
                } else {
                    CoherenceState::Shared
                };
                state[m].insert(o, s);
                copy[m].insert(o, initial[o].clone());
            }
        }
        DsmCore {
            pending: vec![VecDeque::new(); topo.n_modules],
            topo,
            state,
            copy,
        }
    }

    pub fn topology(&self) -> &GroupTopology {
        &self.topo
    }

    pub fn state(&self, m: ModuleIdx, o: ObjIdx) -> Option<CoherenceState> {
        self.state[m].get(&o).copied()
    }

    pub fn copy(&self, m: ModuleIdx, o: ObjIdx) -> Option<&DsmValue> {
        self.copy[m].get(&o)
    }

    pub fn pending_len(&self, m: ModuleIdx) -> usize {
        self.pending[m].len()
    }

    pub fn pending_batches(&self, m: ModuleIdx) -> impl Iterator<Item = &DsmBatch> {
        self.pending[m].iter()
    }

    /// The single Exclusive member, when the object is quiescent.
    pub fn exclusive_holders(&self, o: ObjIdx) -> Vec<ModuleIdx> {
        self.topo.groups[o]
            .iter()
            .copied()
            .filter(|&m| self.state[m].get(&o) == Some(&CoherenceState::Exclusive))
            .collect()
    }

    fn expect_member(&self, m: ModuleIdx, o: ObjIdx) -> Result<(), ProtocolError> {
        if self.topo.is_member(m, o) {
            Ok(())
        } else {
            Err(ProtocolError::NotMember(m, o))
        }
    }

    /// Requester-side plan for a pre-access: objects already Exclusive need
    /// nothing, the rest become Acquire or Replicate requests.
    pub fn plan_requests(
        &self,
        m: ModuleIdx,
        entries: &[(ObjIdx, bool)],
    ) -> Result<Vec<DsmRequest>, ProtocolError> {
        let mut reqs = Vec::new();
        for &(o, wants_write) in entries {
            self.expect_member(m, o)?;
            if self.topo.owner_of[o] == m {
                return Err(ProtocolError::OwnerRequest(m, o));
            }
            match self.state[m][&o] {
                CoherenceState::Exclusive => {}
                CoherenceState::Shared => reqs.push(if wants_write {
                    DsmRequest::Acquire(o)
                } else {
                    DsmRequest::Replicate(o)
                }),
                CoherenceState::Invalid => unreachable!("requester is never Invalid"),
            }
        }
        Ok(reqs)
    }

    /// Requester-side release payloads: the full current local values.
    pub fn plan_release(
        &self,
        m: ModuleIdx,
        objects: &[ObjIdx],
    ) -> Result<Vec<DsmRequest>, ProtocolError> {
        let mut reqs = Vec::new();
        for &o in objects {
            self.expect_member(m, o)?;
            if self.state[m][&o] != CoherenceState::Exclusive {
                return Err(ProtocolError::WriteWhileNotExclusive(m, o));
            }
            reqs.push(DsmRequest::Release(o, self.copy[m][&o].clone()));
        }
        Ok(reqs)
    }

    /// Local write; requires exclusivity regardless of role.
    pub fn local_write(
        &mut self,
        m: ModuleIdx,
        o: ObjIdx,
        value: DsmValue,
    ) -> Result<(), ProtocolError> {
        self.expect_member(m, o)?;
        if self.state[m][&o] != CoherenceState::Exclusive {
            return Err(ProtocolError::WriteWhileNotExclusive(m, o));
        }
        self.copy[m].insert(o, value);
        Ok(())
    }

    /// Local read. A Shared requester may read its (possibly stale) copy; an
    /// Invalid owner may not.
    pub fn local_read(&self, m: ModuleIdx, o: ObjIdx) -> Result<&DsmValue, ProtocolError> {
        self.expect_member(m, o)?;
        if self.topo.owner_of[o] == m && self.state[m][&o] == CoherenceState::Invalid {
            return Err(ProtocolError::OwnerAccessWhileInvalid(m, o));
        }
        Ok(&self.copy[m][&o])
    }

    /// Validate batch shape: one owner, no mixing of release with the rest.
    pub fn validate_batch(&self, batch: &DsmBatch) -> Result<(), ProtocolError> {
        let mut any_release = false;
        let mut any_pre = false;
        for r in &batch.requests {
            let o = r.object();
            if self.topo.owner_of[o] != batch.owner {
                return Err(ProtocolError::MixedOwners);
            }
            if batch.src == batch.owner {
                return Err(ProtocolError::OwnerRequest(batch.src, o));
            }
            if r.is_release() {
                any_release = true;
            } else {
                any_pre = true;
            }
        }
        if any_release && any_pre {
            return Err(ProtocolError::MixedBatch);
        }
        Ok(())
    }

    fn servable(&self, owner: ModuleIdx, batch: &DsmBatch) -> bool {
        batch
            .requests
            .iter()
            .all(|r| self.state[owner][&r.object()] == CoherenceState::Exclusive)
    }

    /// Owner handling of one polled batch. Release batches apply
    /// unconditionally (the owner must be Invalid on those objects);
    /// acquire/replicate batches are answered only when the owner is
    /// Exclusive on every requested object, otherwise the batch joins the
    /// pending FIFO. The caller drains the FIFO afterwards via
    /// [`DsmCore::drain_pending`].
    pub fn owner_serve(
        &mut self,
        owner: ModuleIdx,
        batch: DsmBatch,
    ) -> Result<ServeOutcome, ProtocolError> {
        if batch.owner != owner {
            return Err(ProtocolError::NotOwner(owner, batch.requests[0].object()));
        }
        self.validate_batch(&batch)?;
        if batch.requests.iter().any(|r| r.is_release()) {
            let mut results = Vec::with_capacity(batch.requests.len());
            for r in &batch.requests {
                if let DsmRequest::Release(o, value) = r {
                    if self.state[owner][o] == CoherenceState::Exclusive {
                        return Err(ProtocolError::UnexpectedRelease(*o));
                    }
                    self.copy[owner].insert(*o, value.clone());
                    self.state[owner].insert(*o, CoherenceState::Exclusive);
                    results.push(DsmResult::Released(*o));
                }
            }
            return Ok(ServeOutcome::Responded(DsmResponse {
                batch_id: batch.id,
                owner,
                dst: batch.src,
                results,
            }));
        }
        if self.servable(owner, &batch) {
            Ok(ServeOutcome::Responded(self.answer(owner, &batch)))
        } else {
            self.pending[owner].push_back(batch);
            Ok(ServeOutcome::Queued)
        }
    }

    fn answer(&mut self, owner: ModuleIdx, batch: &DsmBatch) -> DsmResponse {
        let mut results = Vec::with_capacity(batch.requests.len());
        for r in &batch.requests {
            match r {
                DsmRequest::Replicate(o) => {
                    results.push(DsmResult::Replicated(*o, self.copy[owner][o].clone()));
                }
                DsmRequest::Acquire(o) => {
                    results.push(DsmResult::Granted(*o, self.copy[owner][o].clone()));
                    self.state[owner].insert(*o, CoherenceState::Invalid);
                }
                DsmRequest::Release(_, _) => unreachable!("mixed batches rejected"),
            }
        }
        DsmResponse {
            batch_id: batch.id,
            owner,
            dst: batch.src,
            results,
        }
    }

    /// Serve queued batches in arrival order while the head is satisfiable.
    /// Never called mid-handler: a grant flips the owner to Invalid, and a
    /// running procedure must keep exclusivity once checked.
    pub fn drain_pending(&mut self, owner: ModuleIdx) -> Vec<DsmResponse> {
        let mut out = Vec::new();
        while let Some(front) = self.pending[owner].front() {
            if !self.servable(owner, front) {
                break;
            }
            let batch = self.pending[owner].pop_front().unwrap();
            out.push(self.answer(owner, &batch));
        }
        out
    }

    /// Requester applies a received response: values install, grants raise to
    /// Exclusive, release acks drop back to Shared.
    pub fn apply_response(
        &mut self,
        m: ModuleIdx,
        resp: &DsmResponse,
    ) -> Result<(), ProtocolError> {
        if resp.dst != m {
            return Err(ProtocolError::UnexpectedResponse);
        }
        for res in &resp.results {
            let o = res.object();
            self.expect_member(m, o)?;
            match res {
                DsmResult::Replicated(_, v) => {
                    self.copy[m].insert(o, v.clone());
                }
                DsmResult::Granted(_, v) => {
                    self.copy[m].insert(o, v.clone());
                    self.state[m].insert(o, CoherenceState::Exclusive);
                }
                DsmResult::Released(_) => {
                    self.state[m].insert(o, CoherenceState::Shared);
                }
            }
        }
        Ok(())
    }

    /// Whether an owner-side access may proceed right now.
    pub fn owner_exclusive(&self, m: ModuleIdx, o: ObjIdx) -> Result<bool, ProtocolError> {
        self.expect_member(m, o)?;
        if self.topo.owner_of[o] != m {
            return Err(ProtocolError::NotOwner(m, o));
        }
        Ok(self.state[m][&o] == CoherenceState::Exclusive)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// owner = module 0, requester = module 1, one object.
    fn pair() -> DsmCore {
        DsmCore::new(
            GroupTopology {
                owner_of: vec![0],
                groups: vec![vec![0, 1]],
                n_modules: 2,
            },
            &[vec![0]],
        )
    }

    fn batch(id: u64, src: ModuleIdx, owner: ModuleIdx, requests: Vec<DsmRequest>) -> DsmBatch {
        DsmBatch {
            id,
            src,
            owner,
            requests,
        }
    }

    #[test]
    fn replicate_changes_no_state() {
        let mut core = pair();
        let reqs = core.plan_requests(1, &[(0, false)]).unwrap();
        assert_eq!(reqs, vec![DsmRequest::Replicate(0)]);
        let out = core.owner_serve(0, batch(1, 1, 0, reqs)).unwrap();
        let resp = match out {
            ServeOutcome::Responded(r) => r,
            _ => panic!("owner was Exclusive"),
        };
        core.apply_response(1, &resp).unwrap();
        assert_eq!(core.state(0, 0), Some(CoherenceState::Exclusive));
        assert_eq!(core.state(1, 0), Some(CoherenceState::Shared));
    }

    #[test]
    fn acquire_then_release_round_trip() {
        let mut core = pair();
        // Acquire: requester Exclusive, owner Invalid.
        let reqs = core.plan_requests(1, &[(0, true)]).unwrap();
        let resp = match core.owner_serve(0, batch(1, 1, 0, reqs)).unwrap() {
            ServeOutcome::Responded(r) => r,
            _ => panic!(),
        };
        core.apply_response(1, &resp).unwrap();
        assert_eq!(core.state(1, 0), Some(CoherenceState::Exclusive));
        assert_eq!(core.state(0, 0), Some(CoherenceState::Invalid));
        // Requester writes locally, then releases the latest value.
        core.local_write(1, 0, vec![42]).unwrap();
        let rel = core.plan_release(1, &[0]).unwrap();
        let resp = match core.owner_serve(0, batch(2, 1, 0, rel)).unwrap() {
            ServeOutcome::Responded(r) => r,
            _ => panic!("release always answers"),
        };
        assert_eq!(core.copy(0, 0), Some(&vec![42]));
        assert_eq!(core.state(0, 0), Some(CoherenceState::Exclusive));
        // Requester drops to Shared only on the ack.
        assert_eq!(core.state(1, 0), Some(CoherenceState::Exclusive));
        core.apply_response(1, &resp).unwrap();
        assert_eq!(core.state(1, 0), Some(CoherenceState::Shared));
    }

    #[test]
    fn already_exclusive_plans_no_request() {
        let mut core = pair();
        let reqs = core.plan_requests(1, &[(0, true)]).unwrap();
        let resp = match core.owner_serve(0, batch(1, 1, 0, reqs)).unwrap() {
            ServeOutcome::Responded(r) => r,
            _ => panic!(),
        };
        core.apply_response(1, &resp).unwrap();
        assert!(core.plan_requests(1, &[(0, true)]).unwrap().is_empty());
        assert!(core.plan_requests(1, &[(0, false)]).unwrap().is_empty());
    }

    #[test]
    fn requests_queue_while_owner_invalid() {
        let mut core = DsmCore::new(
            GroupTopology {
                owner_of: vec![0],
                groups: vec![vec![0, 1, 2]],
                n_modules: 3,
            },
            &[vec![9]],
        );
        let grant = core.plan_requests(1, &[(0, true)]).unwrap();
        let resp = match core.owner_serve(0, batch(1, 1, 0, grant)).unwrap() {
            ServeOutcome::Responded(r) => r,
            _ => panic!(),
        };
        core.apply_response(1, &resp).unwrap();
        // A second requester's replicate queues.
        let rep = core.plan_requests(2, &[(0, false)]).unwrap();
        assert_eq!(
            core.owner_serve(0, batch(2, 2, 0, rep)).unwrap(),
            ServeOutcome::Queued
        );
        assert_eq!(core.pending_len(0), 1);
        // Release unblocks it; the queued batch sees the released value.
        core.local_write(1, 0, vec![7]).unwrap();
        let rel = core.plan_release(1, &[0]).unwrap();
        let ack = match core.owner_serve(0, batch(3, 1, 0, rel)).unwrap() {
            ServeOutcome::Responded(r) => r,
            _ => panic!(),
        };
        core.apply_response(1, &ack).unwrap();
        let drained = core.drain_pending(0);
        assert_eq!(drained.len(), 1);
        assert_eq!(drained[0].results, vec![DsmResult::Replicated(0, vec![7])]);
    }

    #[test]
    fn drain_stops_at_unsatisfiable_head() {
        let mut core = DsmCore::new(
            GroupTopology {
                owner_of: vec![0, 0],
                groups: vec![vec![0, 1, 2], vec![0, 1, 2]],
                n_modules: 3,
            },
            &[vec![0], vec![0]],
        );
        // Requester 1 acquires o0 and o1 in one batch.
        let reqs = core.plan_requests(1, &[(0, true), (1, true)]).unwrap();
        let resp = match core.owner_serve(0, batch(1, 1, 0, reqs)).unwrap() {
            ServeOutcome::Responded(r) => r,
            _ => panic!(),
        };
        core.apply_response(1, &resp).unwrap();
        // Requester 2 queues an acquire for o0, then one for o1.
        let a0 = core.plan_requests(2, &[(0, true)]).unwrap();
        assert_eq!(core.owner_serve(0, batch(2, 2, 0, a0)).unwrap(), ServeOutcome::Queued);
        // Requester 1 releases only o1: head of the FIFO (wants o0) still
        // blocks, so nothing drains even though o1 is back.
        let rel = core.plan_release(1, &[1]).unwrap();
        let ack = match core.owner_serve(0, batch(3, 1, 0, rel)).unwrap() {
            ServeOutcome::Responded(r) => r,
            _ => panic!(),
        };
        core.apply_response(1, &ack).unwrap();
        assert!(core.drain_pending(0).is_empty());
        // Releasing o0 serves the head.
        let rel = core.plan_release(1, &[0]).unwrap();
        let ack = match core.owner_serve(0, batch(4, 1, 0, rel)).unwrap() {
            ServeOutcome::Responded(r) => r,
            _ => panic!(),
        };
        core.apply_response(1, &ack).unwrap();
        assert_eq!(core.drain_pending(0).len(), 1);
    }

    #[test]
    fn shared_write_rejected() {
        let mut core = pair();
        assert_eq!(
            core.local_write(1, 0, vec![1]),
            Err(ProtocolError::WriteWhileNotExclusive(1, 0))
        );
    }

    #[test]
    fn invalid_owner_read_rejected() {
        let mut core = pair();
        let reqs = core.plan_requests(1, &[(0, true)]).unwrap();
        let resp = match core.owner_serve(0, batch(1, 1, 0, reqs)).unwrap() {
            ServeOutcome::Responded(r) => r,
            _ => panic!(),
        };
        core.apply_response(1, &resp).unwrap();
        assert!(matches!(
            core.local_read(0, 0),
            Err(ProtocolError::OwnerAccessWhileInvalid(0, 0))
        ));
        // The shared requester may still read its stale copy.
        assert!(core.local_read(1, 0).is_ok());
    }

    #[test]
    fn mixed_batches_rejected() {
        let mut core = pair();
        let b = batch(
            1,
            1,
            0,
            vec![DsmRequest::Acquire(0), DsmRequest::Release(0, vec![])],
        );
        assert_eq!(core.owner_serve(0, b), Err(ProtocolError::MixedBatch));
    }
}
