//! The discrete-event simulator: engine, interpreter, wire formats, sensor
//! generators, and the post-run trace validator.

pub mod engine;
mod interp;
pub mod sensors;
pub mod validate;
pub mod wire;

pub use engine::{
    costs, DestCounts, ExceptionRec, ExchangeClass, ExchangeRec, ModIdx, ObjIdx, OwnerStallRec,
    ProcIdx, RunOutput, SimError, SimInput, SimModule, SimObject, Simulator, TraceRecord,
};
pub use sensors::GeneratorSpec;
