//! Bandwidth model, run metrics, staleness statistics and speedup baselines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MB: f64 = 1e6;
pub const GB: f64 = 1e9;

/// Published values are rounded to two decimals.
pub const BANDWIDTH_TOLERANCE_GBPS: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub model_size_bytes: f64,
    pub samples: u64,
    pub mini_batch: u64,
    pub time_per_epoch_s: f64,
}

impl WorkloadProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.model_size_bytes > 0.0 && self.time_per_epoch_s > 0.0) || self.samples == 0 || self.mini_batch == 0 {
            return Err(Error::InvalidProfile(format!("all fields must be positive: {self:?}")));
        }
        if self.mini_batch > self.samples {
            return Err(Error::InvalidProfile(format!(
                "mini-batch {} exceeds the {} samples",
                self.mini_batch, self.samples
            )));
        }
        Ok(())
    }
}

/// Memory bandwidth in bytes per second needed to see an `x`-fold speedup:
/// two model-sized transfers per mini-batch, where one mini-batch takes
/// `TPE * mu / N` seconds to train.
pub fn required_bandwidth(p: &WorkloadProfile, x: f64) -> Result<f64> {
    p.validate()?;
    if !(x >= 1.0 && x.is_finite()) {
        return Err(Error::InvalidProfile(format!("speedup factor must be >= 1, got {x}")));
    }
    let batches = p.samples as f64 / p.mini_batch as f64;
    Ok(x * 2.0 * p.model_size_bytes * batches / p.time_per_epoch_s)
}

/// Smallest mini-batch a workload's model accepts (batch normalization
/// needs at least two samples).
pub fn min_mini_batch(workload: &str) -> u64 {
    match workload {
        "cifar" | "imagenet" => 2,
        _ => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct FixtureRow {
    workload: String,
    mu: u64,
    model_mb: f64,
    samples: u64,
    tpe_s: f64,
    published_gbps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandwidthRow {
    pub workload: String,
    pub mini_batch: u64,
    pub profile: WorkloadProfile,
    pub published_gbps: f64,
    pub computed_gbps: f64,
    pub mismatch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandwidthReport {
    pub speedup: f64,
    pub rows: Vec<BandwidthRow>,
}

impl BandwidthReport {
    pub fn mismatches(&self) -> Vec<&BandwidthRow> {
        self.rows.iter().filter(|r| r.mismatch).collect()
    }

    pub fn find(&self, workload: &str, mu: u64) -> Option<&BandwidthRow> {
        self.rows.iter().find(|r| r.workload == workload && r.mini_batch == mu)
    }

    /// Comma-separated rendering with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("workload,mu,model_mb,samples,tpe_s,published_gbps,computed_gbps,status\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.2},{},{:.2},{:.2},{:.4},{}",
                r.workload,
                r.mini_batch,
                r.profile.model_size_bytes / MB,
                r.profile.samples,
                r.profile.time_per_epoch_s,
                r.published_gbps,
                r.computed_gbps,
                if r.mismatch { "MISMATCH" } else { "ok" }
            );
        }
        s
    }
}

/// Computes RB for every fixture row and flags rows whose published value
/// (scaled by `x`) differs by more than [`BANDWIDTH_TOLERANCE_GBPS`].
pub fn bandwidth_report(fixture: &Path, x: f64) -> Result<BandwidthReport> {
    let fx = |msg: String| Error::Fixture {
        path: fixture.to_path_buf(),
        msg,
    };
    let text = fs::read_to_string(fixture).map_err(|e| fx(e.to_string()))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<FixtureRow>().enumerate() {
        let row = rec.map_err(|e| fx(format!("row {}: {e}", i + 1)))?;
        if row.mu < min_mini_batch(&row.workload) {
            return Err(fx(format!(
                "row {}: {} does not support mini-batch {}",
                i + 1,
                row.workload,
                row.mu
            )));
        }
        let profile = WorkloadProfile {
            model_size_bytes: row.model_mb * MB,
            samples: row.samples,
            mini_batch: row.mu,
            time_per_epoch_s: row.tpe_s,
        };
        let computed = required_bandwidth(&profile, x).map_err(|e| fx(format!("row {}: {e}", i + 1)))? / GB;
        let published = row.published_gbps * x;
        rows.push(BandwidthRow {
            workload: row.workload,
            mini_batch: row.mu,
            profile,
            published_gbps: published,
            computed_gbps: computed,
            mismatch: (computed - published).abs() > BANDWIDTH_TOLERANCE_GBPS * x + 1e-9,
        });
    }
    if rows.is_empty() {
        return Err(fx("no rows".into()));
    }
    Ok(BandwidthReport { speedup: x, rows })
}

/// Counts of observed staleness values.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalenessHistogram {
    counts: Vec<u64>,
}

impl StalenessHistogram {
    pub fn add(&mut self, observed: u64) {
        let i = observed as usize;
        if i >= self.counts.len() {
            self.counts.resize(i + 1, 0);
        }
        self.counts[i] += 1;
    }

    pub fn merge(&mut self, other: &StalenessHistogram) {
        for (i, c) in other.counts.iter().enumerate() {
            if *c > 0 {
                if i >= self.counts.len() {
                    self.counts.resize(i + 1, 0);
                }
                self.counts[i] += c;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn count(&self, observed: u64) -> u64 {
        self.counts.get(observed as usize).copied().unwrap_or(0)
    }

    pub fn max(&self) -> Option<u64> {
        self.counts.iter().rposition(|c| *c > 0).map(|i| i as u64)
    }

    pub fn mean(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| {
            let s: f64 = self.counts.iter().enumerate().map(|(i, c)| i as f64 * *c as f64).sum();
            s / n as f64
        })
    }

    /// `(staleness, count)` pairs with a non-zero count.
    pub fn buckets(&self) -> Vec<(u64, u64)> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > 0)
            .map(|(i, c)| (i as u64, *c))
            .collect()
    }
}

/// Reporting threshold for staleness: `floor(sqrt(E) / mu)`.
pub fn staleness_threshold(epochs: usize, mini_batch: usize) -> u64 {
    ((epochs as f64).sqrt() / mini_batch as f64).floor() as u64
}

/// Whether a run's worst staleness exceeds [`staleness_threshold`]. This is
/// a report flag, not a failure.
pub fn staleness_flag(h: &StalenessHistogram, epochs: usize, mini_batch: usize) -> bool {
    h.max().is_some_and(|m| m > staleness_threshold(epochs, mini_batch))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LearnerTimes {
    pub t_train: Duration,
    pub t_push: Duration,
    pub t_pull: Duration,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub learners: Vec<LearnerTimes>,
    pub t_receive: Duration,
    pub t_apply: Duration,
    /// Gradient payloads enqueued plus weight copies actually pulled.
    pub bytes_moved: u64,
    pub wall_time: Duration,
    pub speedup: Option<f64>,
}

/// Bytes moved per second of wall time.
pub fn effective_bandwidth(m: &RunMetrics) -> Result<f64> {
    let t = m.wall_time.as_secs_f64();
    if t <= 0.0 {
        return Err(Error::Run("effective bandwidth of a zero-length run".into()));
    }
    Ok(m.bytes_moved as f64 / t)
}

/// Copy throughput of `bytes`-sized buffers in bytes per second, best of
/// `reps` timed copies.
pub fn copy_benchmark(bytes: usize, reps: usize) -> f64 {
    let n = (bytes / 4).max(1);
    let src: Vec<f32> = (0..n).map(|i| i as f32).collect();
    let mut dst = vec![0.0f32; n];
    dst.copy_from_slice(&src);
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        dst.copy_from_slice(std::hint::black_box(&src));
        std::hint::black_box(&mut dst);
        best = best.min(t.elapsed().as_secs_f64());
    }
    (n * 4) as f64 / best.max(1e-9)
}

/// Single-learner reference timings keyed by provider, dimension and
/// mini-batch size.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub entries: BTreeMap<String, Baseline>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub wall_s: f64,
    pub gradients: u64,
    pub epochs: usize,
}

impl Baseline {
    pub fn throughput(&self) -> f64 {
        self.gradients as f64 / self.wall_s
    }
}

impl Baselines {
    pub fn key(provider: &str, dim: usize, mini_batch: usize) -> String {
        format!("{provider}/{dim}/{mini_batch}")
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn get(&self, provider: &str, dim: usize, mini_batch: usize) -> Option<Baseline> {
        self.entries.get(&Self::key(provider, dim, mini_batch)).copied()
    }

    pub fn insert(&mut self, provider: &str, dim: usize, mini_batch: usize, b: Baseline) {
        self.entries.insert(Self::key(provider, dim, mini_batch), b);
    }

    /// `T1 / T2` for a run of `wall_s` seconds over the same epochs.
    pub fn speedup(&self, provider: &str, dim: usize, mini_batch: usize, wall_s: f64) -> Option<f64> {
        self.get(provider, dim, mini_batch).map(|b| b.wall_s / wall_s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prof(mb: f64, n: u64, mu: u64, tpe: f64) -> WorkloadProfile {
        WorkloadProfile {
            model_size_bytes: mb * MB,
            samples: n,
            mini_batch: mu,
            time_per_epoch_s: tpe,
        }
    }

    #[test]
    fn one_batch_per_epoch_collapses_to_two_models_per_epoch() {
        let rb = required_bandwidth(&prof(1.0, 10, 10, 1.0), 1.0).unwrap();
        assert_eq!(rb, 2.0 * MB);
    }

    #[test]
    fn invalid_profiles_are_rejected() {
        assert!(required_bandwidth(&prof(1.0, 10, 11, 1.0), 1.0).is_err());
        assert!(required_bandwidth(&prof(0.0, 10, 1, 1.0), 1.0).is_err());
        assert!(required_bandwidth(&prof(1.0, 10, 1, -1.0), 1.0).is_err());
        assert!(required_bandwidth(&prof(1.0, 10, 1, 1.0), 0.5).is_err());
    }

    #[test]
    fn effective_bandwidth_arithmetic() {
        let m = RunMetrics {
            bytes_moved: 100 * 4_000_000 + 50 * 4_000_000,
            wall_time: Duration::from_secs(1),
            ..Default::default()
        };
        assert_eq!(effective_bandwidth(&m).unwrap(), 600e6);
        assert!(effective_bandwidth(&RunMetrics::default()).is_err());
    }

    #[test]
    fn histogram_statistics() {
        let mut h = StalenessHistogram::default();
        assert_eq!(h.max(), None);
        for s in [0, 1, 1, 3] {
            h.add(s);
        }
        assert_eq!(h.total(), 4);
        assert_eq!(h.max(), Some(3));
        assert_eq!(h.mean(), Some(1.25));
        assert_eq!(h.buckets(), vec![(0, 1), (1, 2), (3, 1)]);
        let mut g = StalenessHistogram::default();
        g.add(5);
        h.merge(&g);
        assert_eq!(h.max(), Some(5));
    }

    #[test]
    fn staleness_flag_threshold() {
        assert_eq!(staleness_threshold(200, 4), 3);
        assert_eq!(staleness_threshold(200, 32), 0);
        let mut h = StalenessHistogram::default();
        h.add(3);
        assert!(!staleness_flag(&h, 200, 4));
        h.add(4);
        assert!(staleness_flag(&h, 200, 4));
    }

    #[test]
    fn baselines_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.json");
        assert!(Baselines::load(&p).unwrap().entries.is_empty());
        let mut b = Baselines::default();
        b.insert(
            "logistic",
            11,
            4,
            Baseline {
                wall_s: 8.0,
                gradients: 100,
                epochs: 2,
            },
        );
        b.save(&p).unwrap();
        let l = Baselines::load(&p).unwrap();
        assert_eq!(l, b);
        assert_eq!(l.speedup("logistic", 11, 4, 2.0), Some(4.0));
        assert_eq!(l.speedup("logistic", 11, 8, 2.0), None);
    }

    #[test]
    fn copy_benchmark_is_positive() {
        assert!(copy_benchmark(1 << 20, 3) > 0.0);
    }
}
