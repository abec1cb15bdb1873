use protocheck::protocol::{mutant_model, site, Instance, MUTANTS};
use protocheck::{explore, explore_random, ExploreOptions, RandomOptions, Violation};

fn source(name: &str) -> &'static str {
    MUTANTS.iter().find(|(n, _)| n.starts_with(name)).expect("shipped mutant").1
}

#[test]
fn every_mutant_yields_a_trace() {
    for (name, src) in MUTANTS {
        let m = mutant_model(src, Instance::default()).unwrap();
        let v = explore(&m, &ExploreOptions::default());
        let c = v.counterexample().unwrap_or_else(|| panic!("{name}: {v:?}"));
        assert!(!c.trace.is_empty(), "{name}");
        assert!(c.to_string().contains("1. "), "{name}");
    }
}

#[test]
fn missing_release_signal_leaves_training_blocked() {
    let m = mutant_model(source("no_push_release_signal"), Instance::default()).unwrap();
    let c = explore(&m, &ExploreOptions::default()).counterexample().cloned().unwrap();
    let Violation::Deadlock { blocked } = &c.violation else {
        panic!("expected deadlock, got {}", c.violation)
    };
    let train = m.thread_id("train[0]").unwrap();
    assert_eq!(m.thread_site(&c.final_state, train), Some(site::TRAIN_WAIT_PUSH_EMPTY));
    assert!(blocked.iter().any(|b| b.starts_with("train[0] waiting")), "{blocked:?}");
    // The last training step in the trace is the one it never returns from.
    let last_train = c.trace.iter().rev().find(|s| s.thread == "train[0]").unwrap();
    assert_eq!(last_train.site, Some(site::TRAIN_WAIT_PUSH_EMPTY));
}

#[test]
fn unchecked_queue_write_breaks_bounds_and_exactly_once() {
    let m = mutant_model(source("no_queue_full_check"), Instance::default()).unwrap();
    let c = explore(&m, &ExploreOptions::default()).counterexample().cloned().unwrap();
    assert_eq!(c.violation, Violation::Invariant { name: "queue_bounded".into() });

    // With the bound unchecked the overwrite surfaces as a lost gradient.
    let opts = ExploreOptions {
        check_invariants: false,
        ..Default::default()
    };
    let c = explore(&m, &opts).counterexample().cloned().unwrap();
    assert_eq!(c.violation.kind(), "exactly-once", "{}", c.violation);
}

#[test]
fn unchecked_staging_slot_loses_gradients() {
    let m = mutant_model(source("no_staging_full_check"), Instance::default()).unwrap();
    let c = explore(&m, &ExploreOptions::default()).counterexample().cloned().unwrap();
    match &c.violation {
        Violation::ExactlyOnce { missing, .. } => assert!(!missing.is_empty()),
        other => panic!("expected exactly-once, got {other}"),
    }
}

#[test]
fn mutants_fail_without_reduction_too() {
    for (name, src) in MUTANTS {
        let m = mutant_model(src, Instance::default()).unwrap();
        let opts = ExploreOptions {
            reduction: false,
            ..Default::default()
        };
        assert!(explore(&m, &opts).counterexample().is_some(), "{name}");
    }
}

#[test]
fn random_walks_find_the_release_signal_deadlock() {
    let m = mutant_model(
        source("no_push_release_signal"),
        Instance {
            learners: 3,
            ..Instance::default()
        },
    )
    .unwrap();
    let v = explore_random(
        &m,
        &ExploreOptions::default(),
        &RandomOptions {
            walks: 50,
            max_steps: 5000,
            seed: 3,
        },
    );
    assert_eq!(v.counterexample().map(|c| c.violation.kind()), Some("deadlock"));
}
