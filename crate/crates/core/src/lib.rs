//! Discrete-event simulator and library for an energy-asymmetric distributed
//! sensing runtime: a strong central processor plus much weaker peripheral
//! processors, a best-effort message transport, an object-granularity
//! software DSM whose owner side lives on the weakest group member, and the
//! compiler pass that inserts and batches the coherence calls.
//!
//! The crate splits into:
//!
//! * [`platform`]: processors, link timing, virtual clock, energy accounting;
//! * [`transport`]: messages, bounded event queues, location tables;
//! * [`runtime`]: module lifecycle, poll priority, system services, monitors;
//! * [`dsm`]: the coherence protocol, a randomized property harness, and an
//!   exhaustive interleaving checker for deadlock freedom;
//! * [`instrument`]: module IR, Mod/Ref analysis, the batching pass, IDL and
//!   marshaling stubs;
//! * [`sim`]: the event-driven engine interpreting instrumented modules;
//! * [`scenario`] and [`report`]: workload configs in, metrics out.

pub mod dsm;
pub mod instrument;
pub mod platform;
pub mod report;
pub mod runtime;
pub mod scenario;
pub mod sim;
pub mod transport;
