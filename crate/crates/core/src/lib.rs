//! Controller library and discrete-event simulator for coarse time-sliced
//! scheduling of TCP transfers in multi-AP infrastructure WLANs.
//!
//! The controller side infers which client-AP links interfere, enumerates
//! maximal independent sets of the conflict graph, solves a concave utility
//! maximization for per-client airtime shares, and turns the solution into a
//! per-frame slot schedule. Per-client virtual queues are drained at an
//! adaptively estimated service rate while a client's slot is open. The
//! simulator side runs TCP senders, an optional split-connection proxy, the
//! controller, and an abstract wireless medium against scenario files, and
//! writes CSV metrics.

pub mod harness;
pub mod inference;
pub mod optimizer;
pub mod scheduler;
pub mod simnet;
pub mod topology;
pub mod vqueue;

pub use harness::{load_scenario, run_scenario, RunOutcome};
pub use optimizer::{AllocationProblem, AllocationSolution, Utility};
pub use scheduler::{FlowClass, TimeFrameSchedule};
pub use simnet::{RunMetrics, ScenarioConfig};
pub use topology::{ApId, ClientId, DependenceGraph, IndependentSetMatrix, NetworkDescription};
