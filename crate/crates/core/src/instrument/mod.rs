//! Compiler side: module IR, Mod/Ref analysis, role assignment, the
//! batching instrumentation pass, shared-type validation, and marshaling
//! stub generation.

pub mod ir;
pub mod modref;
pub mod pass;
pub mod randgen;
pub mod stubs;
pub mod text;

pub use ir::{BlockIr, HandlerBindings, IrError, ModuleIr, PreKind, ProcIr, SiteRef, Stmt, Terminator};
pub use modref::{analyze_mod_ref, BlockAccess, ModRefSummary, ProcSummary};
pub use pass::{
    assign_roles, build_app, estimate_footprint, instrument, BatchingToggles, Footprint,
    InstrumentedApp, OwnerOrder, PassError, RoleAssignment, RoleView, SharedObjectConfig,
    SharedObjectDescriptor, BYTES_PER_SITE,
};
pub use stubs::{FieldDescriptor, IdlError, Stub, TypeDescriptor, TypedValue, Width};
pub use text::{parse_module, print_module, ParseError};
