//! Shared vocabulary: weights, gradients, timestamps and hyper-parameters.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The authoritative parameter vector and its version counter.
///
/// Elements are stored as `f32` bit patterns in relaxed atomics so that the
/// parameter server can update them in place while pull threads copy them
/// without a lock. Such a copy may mix elements from different versions.
/// The `guard` is only taken in [`UpdateGuard::Locked`] mode.
pub struct WeightStore {
    values: Box<[AtomicU32]>,
    timestamp: AtomicU64,
    guard: RwLock<()>,
}

impl WeightStore {
    pub fn new(init: &[f32]) -> Self {
        WeightStore {
            values: init.iter().map(|v| AtomicU32::new(v.to_bits())).collect(),
            timestamp: AtomicU64::new(0),
            guard: RwLock::new(()),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(&vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of gradient updates applied so far.
    pub fn timestamp(&self) -> u64 {
        self.timestamp.load(Ordering::Acquire)
    }

    pub(crate) fn bump_timestamp(&self) -> u64 {
        self.timestamp.fetch_add(1, Ordering::AcqRel) + 1
    }

    pub(crate) fn set_timestamp(&self, ts: u64) {
        self.timestamp.store(ts, Ordering::Release);
    }

    #[inline]
    pub fn get(&self, i: usize) -> f32 {
        f32::from_bits(self.values[i].load(Ordering::Relaxed))
    }

    pub(crate) fn cells(&self) -> &[AtomicU32] {
        &self.values
    }

    pub(crate) fn guard(&self) -> &RwLock<()> {
        &self.guard
    }

    /// Copies the current values into `out` element by element.
    pub fn copy_into(&self, out: &mut [f32]) {
        assert_eq!(out.len(), self.values.len(), "weight copy length");
        for (o, v) in out.iter_mut().zip(self.values.iter()) {
            *o = f32::from_bits(v.load(Ordering::Relaxed));
        }
    }

    pub fn snapshot(&self) -> Vec<f32> {
        let mut v = vec![0.0; self.len()];
        self.copy_into(&mut v);
        v
    }

    /// Overwrites all values and the timestamp. Only used while no other
    /// thread touches the store (startup and checkpoint restore).
    pub fn restore(&self, values: &[f32], timestamp: u64) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                got: values.len(),
            });
        }
        for (c, v) in self.values.iter().zip(values) {
            c.store(v.to_bits(), Ordering::Relaxed);
        }
        self.set_timestamp(timestamp);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values
            .iter()
            .all(|v| f32::from_bits(v.load(Ordering::Relaxed)).is_finite())
    }
}

impl fmt::Debug for WeightStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WeightStore")
            .field("len", &self.len())
            .field("timestamp", &self.timestamp())
            .finish()
    }
}

/// A gradient in transit from a learner to the parameter server.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMsg {
    pub values: Vec<f32>,
    pub learner_id: usize,
    /// Per-learner counter, starting at 0 with no gaps.
    pub seq_no: u64,
    /// Timestamp of the weights the gradient was computed from.
    pub basis_timestamp: u64,
}

impl GradientMsg {
    pub fn zeros(dim: usize, learner_id: usize) -> Self {
        GradientMsg {
            values: vec![0.0; dim],
            learner_id,
            seq_no: 0,
            basis_timestamp: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalenessRecord {
    pub observed: u64,
    pub learner_id: usize,
    pub apply_timestamp: u64,
}

/// Staleness of `msg` if it were applied to weights at `ps_timestamp`.
///
/// Panics when `ps_timestamp` is older than the gradient's basis, which can
/// only happen if timestamps are mis-accounted.
pub fn staleness_of(msg: &GradientMsg, ps_timestamp: u64) -> StalenessRecord {
    assert!(
        ps_timestamp >= msg.basis_timestamp,
        "timestamp accounting: basis {} ahead of server {}",
        msg.basis_timestamp,
        ps_timestamp
    );
    StalenessRecord {
        observed: ps_timestamp - msg.basis_timestamp,
        learner_id: msg.learner_id,
        apply_timestamp: ps_timestamp,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Asgd,
    Ssgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UpdateGuard {
    #[default]
    Lockfree,
    Locked,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asgd" => Ok(Mode::Asgd),
            "ssgd" => Ok(Mode::Ssgd),
            _ => Err(Error::Config(format!("unknown mode `{s}` (expected asgd or ssgd)"))),
        }
    }
}

impl FromStr for UpdateGuard {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lockfree" => Ok(UpdateGuard::Lockfree),
            "locked" => Ok(UpdateGuard::Locked),
            _ => Err(Error::Config(format!("unknown update guard `{s}` (expected lockfree or locked)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Asgd => "asgd",
            Mode::Ssgd => "ssgd",
        })
    }
}

impl fmt::Display for UpdateGuard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateGuard::Lockfree => "lockfree",
            UpdateGuard::Locked => "locked",
        })
    }
}

/// Default mini-batch size for a dataset of `samples` examples: 2 below
/// 10K samples, 4 up to 100K, 32 above.
pub fn default_mini_batch(samples: usize) -> usize {
    match samples {
        0..=9_999 => 2,
        10_000..=100_000 => 4,
        _ => 32,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Learner count.
    pub learners: usize,
    pub mini_batch: usize,
    pub learning_rate: f32,
    pub epochs: usize,
    /// Gradient queue slots per learner.
    pub queue_depth: usize,
    pub mode: Mode,
    pub update_guard: UpdateGuard,
    /// Upper bound on applied staleness in ASGD; ignored in SSGD.
    pub staleness_cap: Option<u64>,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            learners: 1,
            mini_batch: 2,
            learning_rate: 0.01,
            epochs: 200,
            queue_depth: 2,
            mode: Mode::Asgd,
            update_guard: UpdateGuard::Lockfree,
            staleness_cap: None,
        }
    }
}

impl HyperParams {
    /// Defaults with the mini-batch size picked from the dataset size.
    pub fn for_dataset(samples: usize) -> Self {
        HyperParams {
            mini_batch: default_mini_batch(samples),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.learners == 0 {
            return bad("learners must be at least 1");
        }
        if self.mini_batch == 0 {
            return bad("mini_batch must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive and finite");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.queue_depth == 0 {
            return bad("queue_depth must be at least 1");
        }
        Ok(())
    }

    /// Staleness cap in effect; SSGD is barrier-synchronous and has none.
    pub fn effective_staleness_cap(&self) -> Option<u64> {
        match self.mode {
            Mode::Asgd => self.staleness_cap,
            Mode::Ssgd => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(basis: u64) -> GradientMsg {
        GradientMsg {
            values: vec![],
            learner_id: 2,
            seq_no: 0,
            basis_timestamp: basis,
        }
    }

    #[test]
    fn staleness_is_timestamp_difference() {
        assert_eq!(staleness_of(&msg(5), 8).observed, 3);
        let r = staleness_of(&msg(7), 7);
        assert_eq!(r.observed, 0);
        assert_eq!(r.learner_id, 2);
        assert_eq!(r.apply_timestamp, 7);
    }

    #[test]
    #[should_panic(expected = "timestamp accounting")]
    fn basis_ahead_of_server_panics() {
        staleness_of(&msg(9), 8);
    }

    #[test]
    fn mini_batch_follows_dataset_size() {
        assert_eq!(default_mini_batch(2_460), 2);
        assert_eq!(default_mini_batch(68_480), 4);
        assert_eq!(default_mini_batch(500_000), 32);
        let hp = HyperParams::for_dataset(50_000);
        assert_eq!((hp.mini_batch, hp.epochs, hp.learning_rate), (4, 200, 0.01));
    }

    #[test]
    fn validation_rejects_zero_batch() {
        let hp = HyperParams {
            mini_batch: 0,
            ..Default::default()
        };
        assert!(hp.validate().is_err());
        assert!(HyperParams::default().validate().is_ok());
    }

    #[test]
    fn ssgd_ignores_staleness_cap() {
        let hp = HyperParams {
            mode: Mode::Ssgd,
            staleness_cap: Some(1),
            ..Default::default()
        };
        assert_eq!(hp.effective_staleness_cap(), None);
    }

    #[test]
    fn weight_store_roundtrip() {
        let w = WeightStore::new(&[1.0, -2.5, 3.25]);
        assert_eq!(w.snapshot(), vec![1.0, -2.5, 3.25]);
        assert_eq!(w.timestamp(), 0);
        assert_eq!(w.bump_timestamp(), 1);
        w.restore(&[0.0, 0.0, 1.0], 42).unwrap();
        assert_eq!(w.timestamp(), 42);
        assert_eq!(w.get(2), 1.0);
        assert!(w.restore(&[0.0], 1).is_err());
    }
}
