//! Self-stabilizing construction and maintenance of approximate Steiner trees
//! over a simulated asynchronous message-passing network.
//!
//! A designated root (the leader oracle's pick, always a member) anchors a
//! tree; every member attaches to it over a shortest path, relayed by
//! non-member nodes where needed. Nodes exchange periodic `InfoMsg`
//! broadcasts carrying their advertised variables and correct themselves with
//! a fixed priority ladder of rules, so the tree re-forms from arbitrarily
//! corrupted memory and survives member churn, edge crashes and node crashes.
//!
//! The crate splits into:
//! - [`graph`]: the weighted dynamic network model and exact shortest paths,
//! - [`protocol`]: the pure per-node state machine,
//! - [`simulator`]: the deterministic round engine with seeded adversarial
//!   delivery, corruption and timed topology events,
//! - [`oracle`]: brute-force references (exact Steiner optimum, online greedy
//!   baseline) used only by checks and tests,
//! - [`checkers`]: verdicts over configurations and traces (legitimacy,
//!   competitiveness, passage predicate, round bounds, wait liveness).

pub mod checkers;
pub mod graph;
pub mod oracle;
pub mod protocol;
pub mod simulator;
pub mod weight;

pub use graph::{Edge, EventKind, Graph, GraphError, NodeId, TopologyEvent};
pub use protocol::{InfoMsg, NeighborCopy, NeighborView, NodeState, RuleId};
pub use simulator::{
    run, Adversary, Atomicity, Configuration, CorruptionSpec, ProtocolVar, RunOutput, Scenario,
    ScenarioError, Trace, TraceRecord,
};
pub use weight::{Dist, Weight};
