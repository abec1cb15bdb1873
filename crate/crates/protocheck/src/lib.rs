//! Explicit-state model checking for the parameter-server handshake protocol.
//!
//! Protocols are written as small guarded-command programs (see [`lang`]),
//! compiled into a [`Model`] and explored exhaustively with [`explore`] or by
//! random walks with [`explore_random`]. The checker reports deadlocks,
//! invariant violations and exactly-once violations with a numbered trace.

pub mod explore;
pub mod holdwait;
pub mod lang;
pub mod model;
mod por;
pub mod protocol;
pub mod wfg;

pub use explore::{
    explore, explore_random, reachable_states, Counterexample, ExploreOptions, RandomOptions, Stats, TraceStep,
    Verdict, Violation,
};
pub use holdwait::{check_hold_and_wait, HoldAndWait, HoldWaitReport};
pub use lang::{ParseError, Program};
pub use model::{Model, ModelError, State, ThreadId, ThreadStatus};
pub use wfg::{wait_for_graph, WaitEdge, WaitForGraph, WaitReason};
