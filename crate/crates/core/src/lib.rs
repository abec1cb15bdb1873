//! Shared-memory parameter-server training: SPSC gradient queues, one-slot
//! push/pull handshakes, in-place weight updates, fault tolerance, and the
//! bandwidth calculator.

pub mod analysis;
pub mod channels;
pub mod engine;
pub mod error;
pub mod learner;
pub mod metrics;
pub mod models;
pub mod monitor;
pub mod resilience;
pub mod server;
pub mod types;

pub use engine::{launch, run, EngineConfig, RunHandle, RunOutcome};
pub use error::{Error, Result};
pub use types::{GradientMsg, HyperParams, Mode, UpdateGuard, WeightStore};
