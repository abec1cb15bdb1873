//! The shipped protocol description and its known-bad mutants.
//!
//! The runtime engine tags its synchronization points with the [`site`]
//! constants below; the canonical description carries the same tags, so the
//! static and dynamic checks talk about the same program points.

use crate::lang::Program;
use crate::model::{Model, ModelError};

pub const CANONICAL: &str = include_str!("../protocols/canonical.proto");

/// `(file name, source)` of each shipped mutant.
pub const MUTANTS: [(&str, &str); 3] = [
    (
        "no_push_release_signal.proto",
        include_str!("../protocols/mutants/no_push_release_signal.proto"),
    ),
    (
        "no_queue_full_check.proto",
        include_str!("../protocols/mutants/no_queue_full_check.proto"),
    ),
    (
        "no_staging_full_check.proto",
        include_str!("../protocols/mutants/no_staging_full_check.proto"),
    ),
];

/// Site numbers shared between the protocol description and the runtime.
pub mod site {
    pub const PS_LOCK_QUEUE: u16 = 6;
    pub const PS_SIGNAL_NOT_FULL: u16 = 13;
    pub const TRAIN_LOCK_PULL: u16 = 115;
    pub const TRAIN_WAIT_PULL_FULL: u16 = 117;
    pub const TRAIN_LOCK_PUSH: u16 = 104;
    pub const TRAIN_WAIT_PUSH_EMPTY: u16 = 106;
    pub const TRAIN_SIGNAL_PUSH_FULL: u16 = 111;
    pub const PUSH_LOCK_PUSH: u16 = 203;
    pub const PUSH_WAIT_PUSH_FULL: u16 = 205;
    pub const PUSH_LOCK_QUEUE: u16 = 207;
    pub const PUSH_WAIT_QUEUE: u16 = 209;
    pub const PUSH_SIGNAL_PUSH_EMPTY: u16 = 222;
    pub const PULL_LOCK_PULL: u16 = 303;
    pub const PULL_WAIT_PULL_EMPTY: u16 = 305;
    pub const PULL_SIGNAL_PULL_FULL: u16 = 317;
}

/// Parameters of a protocol instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Instance {
    pub learners: i64,
    pub depth: i64,
    pub iters: i64,
    pub blocking_pull: bool,
}

impl Default for Instance {
    fn default() -> Self {
        Instance {
            learners: 1,
            depth: 1,
            iters: 3,
            blocking_pull: false,
        }
    }
}

impl Instance {
    pub fn overrides(&self) -> [(&'static str, i64); 4] {
        [
            ("learners", self.learners),
            ("depth", self.depth),
            ("iters", self.iters),
            ("blocking_pull", self.blocking_pull as i64),
        ]
    }
}

pub fn canonical_program() -> Program {
    Program::parse(CANONICAL).expect("shipped protocol parses")
}

pub fn canonical_model(inst: Instance) -> Result<Model, ModelError> {
    Model::build(&canonical_program(), &inst.overrides())
}

pub fn mutant_model(source: &str, inst: Instance) -> Result<Model, ModelError> {
    Model::parse_and_build(source, &inst.overrides())
}
