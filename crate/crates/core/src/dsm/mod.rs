//! The coherence protocol, its abstract machine, the exhaustive deadlock
//! checker, and the randomized coherence harness.

pub mod checker;
pub mod harness;
pub mod machine;
pub mod protocol;

pub use checker::{
    canonical_programs, enumerate_topologies, opposite_order_instance, render_trace,
    same_order_instance, verify_no_deadlock, CheckOutcome,
};
pub use harness::{run_randomized, RunStats, Violation};
pub use machine::{Action, Await, Machine, NetMsg, ProtoOp, TraceEv};
pub use protocol::{
    CoherenceState, DsmBatch, DsmCore, DsmRequest, DsmResponse, DsmResult, DsmValue,
    GroupTopology, ModuleIdx, ObjIdx, ProtocolError, Role, ServeOutcome,
};
