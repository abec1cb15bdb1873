use std::sync::Arc;
use std::time::Duration;

use shmps::engine::{launch, run, EngineConfig};
use shmps::models::{provider_by_name, sgd_oracle, ssgd_oracle, Dataset, DatasetSpec, GradientProvider, Task};
use shmps::server::Jitter;
use shmps::{HyperParams, Mode, UpdateGuard};

fn binary(samples: usize, features: usize, seed: u64) -> Arc<Dataset> {
    Arc::new(
        Dataset::generate(&DatasetSpec {
            task: Task::Binary,
            samples,
            features,
            seed,
            ..Default::default()
        })
        .unwrap(),
    )
}

fn logistic(data: &Dataset) -> Arc<dyn GradientProvider> {
    provider_by_name("logistic", data, 0).unwrap()
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn deterministic_single_learner_matches_serial_sgd_bitwise() {
    let data = binary(96, 8, 3);
    let p = logistic(&data);
    let hp = HyperParams {
        learners: 4,
        mini_batch: 4,
        epochs: 5,
        learning_rate: 0.05,
        ..Default::default()
    };
    let cfg = EngineConfig {
        hp: hp.clone(),
        seed: 11,
        deterministic: true,
        ..Default::default()
    };
    let out = run(&cfg, p.clone(), data.clone()).unwrap();
    let oracle = sgd_oracle(p.as_ref(), &data, &hp, 11).unwrap();
    assert_eq!(out.learners.len(), 1);
    assert_eq!(out.timestamp, oracle.timestamp());
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&out.weights), bits(&oracle.snapshot()));
    assert!(out.records.iter().all(|r| r.wall_s.is_none() && r.bytes_moved.is_none()));
    assert_eq!(out.records.len(), 5);

    let again = run(&cfg, p, data).unwrap();
    assert_eq!(bits(&again.weights), bits(&out.weights));
    assert_eq!(again.records, out.records);
}

#[test]
fn ssgd_matches_serial_sgd_with_the_combined_batch() {
    let data = binary(400, 50, 5);
    let p = logistic(&data);
    let hp = HyperParams {
        learners: 4,
        mini_batch: 2,
        epochs: 1,
        learning_rate: 0.01,
        mode: Mode::Ssgd,
        ..Default::default()
    };
    let cfg = EngineConfig {
        hp: hp.clone(),
        seed: 9,
        ..Default::default()
    };
    let out = run(&cfg, p.clone(), data.clone()).unwrap();
    let serial = sgd_oracle(
        p.as_ref(),
        &data,
        &HyperParams {
            mini_batch: 8,
            ..hp.clone()
        },
        9,
    )
    .unwrap();
    assert_eq!(out.timestamp, 50);
    assert!(max_diff(&out.weights, &serial.snapshot()) <= 1e-6);
    // Same arithmetic order as the barrier simulation.
    let sim = ssgd_oracle(p.as_ref(), &data, &hp, 9).unwrap();
    assert_eq!(out.weights, sim.snapshot());
}

#[test]
fn ssgd_rejects_indivisible_rounds() {
    let data = binary(30, 4, 1);
    let cfg = EngineConfig {
        hp: HyperParams {
            learners: 4,
            mini_batch: 2,
            mode: Mode::Ssgd,
            ..Default::default()
        },
        ..Default::default()
    };
    assert!(run(&cfg, logistic(&data), data).is_err());
}

#[test]
fn every_gradient_is_applied_exactly_once() {
    let data = binary(203, 6, 2);
    let p = logistic(&data);
    for guard in [UpdateGuard::Lockfree, UpdateGuard::Locked] {
        let cfg = EngineConfig {
            hp: HyperParams {
                learners: 3,
                mini_batch: 4,
                epochs: 4,
                update_guard: guard,
                ..Default::default()
            },
            record_seq: true,
            jitter: Some(Jitter {
                seed: 4,
                yield_prob: 0.2,
                sleep_prob: 0.01,
                max_sleep_us: 50,
            }),
            ..Default::default()
        };
        let out = run(&cfg, p.clone(), data.clone()).unwrap();
        let sharding = cfg.sharding(&data);
        assert_eq!(out.timestamp, 4 * 51);
        for (l, seqs) in out.ps.seq_log.iter().enumerate() {
            let mut s = seqs.clone();
            s.sort_unstable();
            let want: Vec<u64> = (0..4 * sharding.learner_batches_per_epoch(l) as u64).collect();
            assert_eq!(s, want, "learner {l}");
            assert_eq!(out.learners[l].enqueued, want.len() as u64);
        }
    }
}

#[test]
fn push_is_the_only_hold_and_wait_and_no_cycle_forms() {
    let data = binary(120, 5, 8);
    let cfg = EngineConfig {
        hp: HyperParams {
            learners: 3,
            mini_batch: 2,
            epochs: 3,
            queue_depth: 1,
            ..Default::default()
        },
        monitor: true,
        ..Default::default()
    };
    let out = run(&cfg, logistic(&data), data).unwrap();
    let m = out.monitor.unwrap();
    assert!(m.cycles().is_empty(), "{:?}", m.cycles());
    assert!(m.wait_count() > 0);
    let roles = m.hold_and_wait_roles();
    assert!(roles.iter().all(|r| r == "push"), "{roles:?}");
}

#[test]
fn pulls_are_skipped_while_the_timestamp_is_unchanged() {
    let data = binary(64, 400, 6);
    let cfg = EngineConfig {
        hp: HyperParams {
            learners: 2,
            mini_batch: 8,
            epochs: 6,
            ..Default::default()
        },
        compute_delay: Some(Duration::from_millis(2)),
        max_poll_pause: Duration::from_micros(100),
        ..Default::default()
    };
    let out = run(&cfg, logistic(&data), data).unwrap();
    let model = 401 * 4;
    assert!(out.pull_polls() > 0);
    assert!((out.bytes_pulled() as f64) < 0.9 * (out.pull_polls() * model) as f64);
}

#[test]
fn handle_reports_progress_and_kill_isolates_a_learner() {
    let data = binary(400, 6, 4);
    let cfg = EngineConfig {
        hp: HyperParams {
            learners: 4,
            mini_batch: 2,
            epochs: 20,
            ..Default::default()
        },
        ..Default::default()
    };
    let h = launch(&cfg, logistic(&data), data.clone(), None, None).unwrap();
    while h.progress() < 200 {
        std::thread::sleep(Duration::from_millis(1));
    }
    h.kill(1, shmps::learner::KillKind::Soft);
    let out = h.join().unwrap();
    assert_eq!(out.learners[1].status, shmps::learner::LearnerStatus::Dead);
    let produced: u64 = out.learners.iter().map(|l| l.enqueued).sum();
    assert_eq!(out.timestamp, produced);
    assert!(out.learners[1].enqueued < 1000);
}
