//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use shmps::models::{provider_by_name, Dataset, DatasetSpec, GradientProvider, Task};
use shmps::resilience::{parse_schedule, FaultEvent, SuperviseOptions, WatchdogPolicy};
use shmps::types::default_mini_batch;
use shmps::{EngineConfig, HyperParams};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub hp: HyperParams,
    /// Picked from the dataset size when unset.
    pub mini_batch: Option<usize>,
    pub provider: String,
    /// Hidden width of the mlp provider.
    pub width: usize,
    pub dataset: DatasetSpec,
    /// Load the dataset from this file instead of generating it.
    pub dataset_path: Option<PathBuf>,
    pub seed: u64,
    pub deterministic: bool,
    pub compute_delay_us: u64,
    pub apply_lanes: usize,
    pub unroll: usize,
    pub check_finite: bool,
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub schedule: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub baselines: Option<PathBuf>,
    pub policy: WatchdogPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hp: HyperParams::default(),
            mini_batch: None,
            provider: "logistic".into(),
            width: 16,
            dataset: DatasetSpec::default(),
            dataset_path: None,
            seed: 0,
            deterministic: false,
            compute_delay_us: 0,
            apply_lanes: 4,
            unroll: 8,
            check_finite: true,
            metrics: None,
            checkpoint: None,
            schedule: None,
            events: None,
            baselines: None,
            policy: WatchdogPolicy::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| anyhow!("`{key}`: cannot parse `{v}`: {e}"))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!("`{key}`: expected true or false, got `{v}`"),
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn load(file: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(file).with_context(|| format!("reading config {}", file.display()))?;
        let mut c = RunConfig::default();
        c.apply_text(&text).with_context(|| format!("config {}", file.display()))?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    /// Sets one key. Dashes and underscores are interchangeable.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key.replace('-', "_");
        match k.as_str() {
            "learners" => self.hp.learners = num(key, v)?,
            "mini_batch" | "mu" => self.mini_batch = Some(num(key, v)?),
            "learning_rate" | "lr" => self.hp.learning_rate = num(key, v)?,
            "epochs" => self.hp.epochs = num(key, v)?,
            "queue_depth" => self.hp.queue_depth = num(key, v)?,
            "mode" => self.hp.mode = v.parse()?,
            "update_guard" | "guard" => self.hp.update_guard = v.parse()?,
            "staleness_cap" => {
                self.hp.staleness_cap = match v {
                    "" | "none" => None,
                    _ => Some(num(key, v)?),
                }
            }
            "provider" => self.provider = v.to_string(),
            "width" => self.width = num(key, v)?,
            "task" => {
                self.dataset.task = match v {
                    "regression" => Task::Regression,
                    "binary" => Task::Binary,
                    "multiclass" => Task::Multiclass,
                    _ => bail!("`task`: expected regression, binary or multiclass, got `{v}`"),
                }
            }
            "samples" => self.dataset.samples = num(key, v)?,
            "features" => self.dataset.features = num(key, v)?,
            "classes" => self.dataset.classes = num(key, v)?,
            "label_noise" => self.dataset.label_noise = num(key, v)?,
            "dataset_seed" => self.dataset.seed = num(key, v)?,
            "dataset" => self.dataset_path = path(v),
            "seed" => self.seed = num(key, v)?,
            "deterministic" => self.deterministic = flag(key, v)?,
            "compute_delay_us" => self.compute_delay_us = num(key, v)?,
            "apply_lanes" => self.apply_lanes = num(key, v)?,
            "unroll" => self.unroll = num(key, v)?,
            "check_finite" => self.check_finite = flag(key, v)?,
            "metrics" => self.metrics = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "schedule" => self.schedule = path(v),
            "events" => self.events = path(v),
            "baselines" => self.baselines = path(v),
            "heartbeat_ms" => self.policy.heartbeat = Duration::from_millis(num(key, v)?),
            "stall_threshold" => self.policy.stall_threshold = num(key, v)?,
            "checkpoint_interval" => self.policy.checkpoint_interval = num(key, v)?,
            "lease_ms" => self.policy.lease_duration = Duration::from_millis(num(key, v)?),
            "max_restarts" => self.policy.max_restarts = num(key, v)?,
            _ => bail!("unknown key `{key}`"),
        }
        Ok(())
    }

    /// Applies `KEY=VALUE` overrides from the command line.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for p in pairs {
            let (k, v) = p.split_once('=').ok_or_else(|| anyhow!("override `{p}` is not KEY=VALUE"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset_path {
            Some(p) => Dataset::load(p).with_context(|| format!("loading dataset {}", p.display())),
            None => Ok(Dataset::generate(&self.dataset)?),
        }
    }

    pub fn hyper(&self, samples: usize) -> HyperParams {
        HyperParams {
            mini_batch: self.mini_batch.unwrap_or_else(|| default_mini_batch(samples)),
            ..self.hp.clone()
        }
    }

    /// Everything needed to launch, checked up front.
    pub fn prepare(&self) -> Result<Prepared> {
        if self.mini_batch == Some(0) {
            bail!("invalid configuration: mini_batch must be at least 1");
        }
        self.policy.validate()?;
        let data = Arc::new(self.load_dataset()?);
        let provider = provider_by_name(&self.provider, &data, self.width)?;
        let engine = EngineConfig {
            hp: self.hyper(data.samples),
            seed: self.seed,
            deterministic: self.deterministic,
            compute_delay: (self.compute_delay_us > 0).then(|| Duration::from_micros(self.compute_delay_us)),
            apply_lanes: self.apply_lanes,
            unroll: self.unroll,
            check_finite: self.check_finite,
            ..EngineConfig::default()
        };
        engine.hp.validate()?;
        if engine.hp.mini_batch > data.samples {
            bail!(
                "invalid configuration: mini_batch {} exceeds the {} samples",
                engine.hp.mini_batch,
                data.samples
            );
        }
        let faults = match &self.schedule {
            Some(p) => read_schedule(p)?,
            None => Vec::new(),
        };
        Ok(Prepared {
            engine,
            provider,
            data,
            faults,
        })
    }

    pub fn supervise_options(&self, faults: Vec<FaultEvent>) -> SuperviseOptions {
        SuperviseOptions {
            policy: self.policy.clone(),
            faults,
            checkpoint_path: self.checkpoint.clone(),
            events_path: self.events.clone(),
        }
    }
}

pub struct Prepared {
    pub engine: EngineConfig,
    pub provider: Arc<dyn GradientProvider>,
    pub data: Arc<Dataset>,
    pub faults: Vec<FaultEvent>,
}

pub fn read_schedule(p: &Path) -> Result<Vec<FaultEvent>> {
    let text = std::fs::read_to_string(p).with_context(|| format!("reading fault schedule {}", p.display()))?;
    parse_schedule(&text).map_err(|e| anyhow!("fault schedule {}: {e}", p.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_parse_and_later_values_win() {
        let mut c = RunConfig::default();
        c.apply_text("learners = 3\n# comment\nmode = ssgd\nmu=4\nlearners=2  # trailing\n")
            .unwrap();
        assert_eq!(c.hp.learners, 2);
        assert_eq!(c.mini_batch, Some(4));
        assert_eq!(c.hp.mode, shmps::Mode::Ssgd);
        c.apply_overrides(["learning-rate=0.5", "staleness_cap=3"]).unwrap();
        assert_eq!(c.hp.learning_rate, 0.5);
        assert_eq!(c.hp.staleness_cap, Some(3));
    }

    #[test]
    fn unknown_keys_and_bad_lines_are_rejected() {
        let mut c = RunConfig::default();
        let e = c.apply_text("learners = 2\nlearnrs = 3\n").unwrap_err();
        assert!(format!("{e:#}").contains("line 2"), "{e:#}");
        assert!(format!("{e:#}").contains("unknown key `learnrs`"));
        assert!(c.apply_text("learners 2").is_err());
        assert!(c.apply_text("deterministic = maybe").is_err());
    }

    #[test]
    fn zero_mini_batch_fails_before_launch() {
        let mut c = RunConfig::default();
        c.set("mini_batch", "0").unwrap();
        let e = c.prepare().err().unwrap();
        assert!(e.to_string().contains("mini_batch"), "{e}");
    }
}
