use std::sync::Arc;
use std::time::Duration;

use shmps::engine::{run, EngineConfig};
use shmps::learner::{KillKind, LearnerStatus};
use shmps::models::{provider_by_name, Dataset, DatasetSpec, GradientProvider};
use shmps::resilience::{
    run_campaign, supervise, CampaignConfig, Checkpoint, EventKind, FaultEvent, FaultTarget, FaultTrigger,
    SuperviseOptions, WatchdogPolicy,
};
use shmps::HyperParams;

fn setup(samples: usize) -> (Arc<Dataset>, Arc<dyn GradientProvider>) {
    let data = Arc::new(
        Dataset::generate(&DatasetSpec {
            samples,
            features: 8,
            seed: 21,
            ..Default::default()
        })
        .unwrap(),
    );
    let p = provider_by_name("logistic", &data, 0).unwrap();
    (data, p)
}

fn engine(learners: usize, epochs: usize) -> EngineConfig {
    EngineConfig {
        hp: HyperParams {
            learners,
            mini_batch: 4,
            epochs,
            ..Default::default()
        },
        seed: 5,
        // Slow enough that progress-triggered faults land before the end.
        compute_delay: Some(Duration::from_micros(100)),
        ..Default::default()
    }
}

fn policy() -> WatchdogPolicy {
    WatchdogPolicy {
        heartbeat: Duration::from_millis(50),
        stall_threshold: 4,
        checkpoint_interval: 100,
        lease_duration: Duration::from_millis(150),
        max_restarts: 5,
    }
}

fn fault(trigger: FaultTrigger, target: FaultTarget, kind: KillKind) -> FaultEvent {
    FaultEvent { trigger, target, kind }
}

#[test]
fn checkpoint_file_roundtrip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let (data, p) = setup(200);
    let opts = SuperviseOptions {
        policy: WatchdogPolicy {
            checkpoint_interval: 7,
            ..policy()
        },
        checkpoint_path: Some(path.clone()),
        ..Default::default()
    };
    let s = supervise(&engine(2, 3), p, data, &opts).unwrap();
    let c = Checkpoint::load(&path).unwrap();
    assert_eq!(c.timestamp % 7, 0);
    assert!(c.timestamp <= s.outcome.timestamp && c.timestamp > 0);
    assert_eq!(c.learners, 2);
    c.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), c);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn empty_schedule_behaves_like_an_unsupervised_run() {
    let (data, p) = setup(160);
    let mut cfg = engine(3, 4);
    cfg.deterministic = true;
    let plain = run(&cfg, p.clone(), data.clone()).unwrap();
    let s = supervise(&cfg, p, data, &SuperviseOptions::default()).unwrap();
    assert_eq!(s.restarts, 0);
    assert_eq!(s.outcome.weights, plain.weights);
    assert_eq!(s.records, plain.records);
    assert_eq!(s.count(EventKind::Complete), 1);
}

#[test]
fn one_dead_learner_is_isolated() {
    let (data, p) = setup(400);
    let cfg = engine(4, 20);
    let opts = SuperviseOptions {
        policy: policy(),
        faults: vec![fault(FaultTrigger::AtProgress(0.3), FaultTarget::Learner(2), KillKind::Soft)],
        ..Default::default()
    };
    let s = supervise(&cfg, p, data, &opts).unwrap();
    assert_eq!(s.restarts, 0);
    let o = &s.outcome;
    assert_eq!(o.learners[2].status, LearnerStatus::Dead);
    let produced: u64 = o.learners.iter().map(|l| l.enqueued).sum();
    assert_eq!(o.timestamp, produced);
    assert!(o.learners[2].enqueued < 500);
    for l in [0, 1, 3] {
        assert_eq!(o.learners[l].enqueued, 500);
    }
}

#[test]
fn killing_learner_zero_at_start_drops_exactly_its_share() {
    let (data, p) = setup(400);
    let cfg = engine(4, 5);
    let opts = SuperviseOptions {
        policy: policy(),
        faults: vec![fault(FaultTrigger::AfterMs(0), FaultTarget::Learner(0), KillKind::Soft)],
        ..Default::default()
    };
    let s = supervise(&cfg, p, data.clone(), &opts).unwrap();
    let sh = cfg.sharding(&data);
    let lost = 5 * sh.learner_batches_per_epoch(0) as u64;
    assert_eq!(s.outcome.learners[0].enqueued, 0);
    assert_eq!(s.outcome.timestamp, cfg.total_gradients(&data) - lost);
}

#[test]
fn killing_every_learner_triggers_one_restart_from_the_checkpoint() {
    let (data, p) = setup(400);
    let cfg = engine(4, 20);
    let pol = policy();
    let opts = SuperviseOptions {
        policy: pol.clone(),
        faults: vec![fault(FaultTrigger::AtProgress(0.5), FaultTarget::All, KillKind::Soft)],
        ..Default::default()
    };
    let s = supervise(&cfg, p, data.clone(), &opts).unwrap();
    assert_eq!(s.restarts, 1);
    assert_eq!(s.count(EventKind::Restart), 1);
    let kill = s.events.iter().find(|e| e.kind == EventKind::Fault).unwrap();
    let restart = s.events.iter().find(|e| e.kind == EventKind::Restart).unwrap();
    let budget = pol.heartbeat * (2 + pol.stall_threshold);
    assert!(restart.at_ms - kill.at_ms <= budget.as_millis() as u64);
    assert!(restart.progress > 0);
    // Resumed from the checkpointed counts: every batch consumed exactly once
    // from the restart on.
    assert_eq!(s.outcome.timestamp, cfg.total_gradients(&data));
    assert!(s.outcome.learners.iter().all(|l| l.status == LearnerStatus::Finished));
}

#[test]
fn a_learner_dying_inside_the_queue_guard_is_recovered() {
    let (data, p) = setup(400);
    let mut cfg = engine(4, 20);
    cfg.record_seq = true;
    let opts = SuperviseOptions {
        policy: policy(),
        faults: vec![fault(FaultTrigger::AtProgress(0.4), FaultTarget::Learner(1), KillKind::Hard)],
        ..Default::default()
    };
    let s = supervise(&cfg, p, data.clone(), &opts).unwrap();
    assert_eq!(s.restarts, 1);
    assert_eq!(s.count(EventKind::LeaseExpired) + s.count(EventKind::Stall), 1);
    assert_eq!(s.outcome.timestamp, cfg.total_gradients(&data));
    for seqs in &s.outcome.ps.seq_log {
        let mut v = seqs.clone();
        v.sort_unstable();
        v.dedup();
        assert_eq!(v.len(), seqs.len(), "a gradient was applied twice");
    }
}

#[test]
fn without_a_checkpoint_the_restart_begins_from_initial_weights() {
    let (data, p) = setup(200);
    let cfg = engine(2, 10);
    let opts = SuperviseOptions {
        policy: WatchdogPolicy {
            checkpoint_interval: u64::MAX,
            ..policy()
        },
        faults: vec![fault(FaultTrigger::AtProgress(0.3), FaultTarget::All, KillKind::Soft)],
        ..Default::default()
    };
    let s = supervise(&cfg, p, data.clone(), &opts).unwrap();
    assert_eq!(s.count(EventKind::NoCheckpoint), 1);
    assert_eq!(s.restarts, 1);
    assert_eq!(s.outcome.timestamp, cfg.total_gradients(&data));
}

#[test]
fn recovered_run_reaches_the_accuracy_of_an_uninterrupted_one() {
    let (data, p) = setup(400);
    let dir = tempfile::tempdir().unwrap();
    let cfg = engine(4, 60);
    let plain = run(&cfg, p.clone(), data.clone()).unwrap();
    let opts = SuperviseOptions {
        policy: policy(),
        faults: vec![fault(FaultTrigger::AtProgress(0.6), FaultTarget::All, KillKind::Soft)],
        checkpoint_path: Some(dir.path().join("c.ckpt")),
        events_path: Some(dir.path().join("events.jsonl")),
    };
    let s = supervise(&cfg, p, data, &opts).unwrap();
    assert_eq!(s.restarts, 1);
    let (a, b) = (plain.final_accuracy.unwrap(), s.outcome.final_accuracy.unwrap());
    assert!((a - b).abs() <= 0.01, "{a} vs {b}");
    let log = std::fs::read_to_string(dir.path().join("events.jsonl")).unwrap();
    let kinds: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds.iter().filter(|k| *k == "restart").count(), 1);
    assert_eq!(kinds.last().unwrap(), "complete");
    // Records are cut back to the checkpoint and then continue.
    let epochs: Vec<usize> = s.records.iter().map(|r| r.epoch).collect();
    assert!(epochs.windows(2).all(|w| w[0] < w[1]), "{epochs:?}");
    assert_eq!(*epochs.last().unwrap(), 60);
}

#[test]
fn small_campaign_completes_or_recovers_everything() {
    let (data, p) = setup(256);
    let cfg = CampaignConfig {
        engine: engine(4, 40),
        policy: WatchdogPolicy {
            heartbeat: Duration::from_millis(25),
            ..policy()
        },
        kill_prob: 0.3,
        parity_band: 0.01,
        checkpoint_dir: None,
        schedule: None,
    };
    let r = run_campaign(&cfg, p, data, 0..6).unwrap();
    assert_eq!(r.failed, 0, "{:?}", r.runs);
    assert_eq!(r.completed + r.recovered, 6);
    assert!(r.recovered >= 2);
    assert_eq!(r.parity_failures, 0, "{:?}", r.runs);
}
