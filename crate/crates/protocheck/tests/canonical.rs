use protocheck::protocol::{canonical_model, Instance};
use protocheck::{explore, explore_random, reachable_states, ExploreOptions, RandomOptions, Verdict};

fn inst(learners: i64, depth: i64, iters: i64, blocking_pull: bool) -> Instance {
    Instance {
        learners,
        depth,
        iters,
        blocking_pull,
    }
}

fn full() -> ExploreOptions {
    ExploreOptions {
        reduction: false,
        ..Default::default()
    }
}

#[test]
fn single_learner_two_iterations_verifies_with_binary_counts() {
    let m = canonical_model(inst(1, 1, 2, false)).unwrap();
    let v = explore(&m, &full());
    assert!(v.is_verified(), "{v:?}");

    let states = reachable_states(&m, 1_000_000).expect("small instance");
    assert!(states.len() > 100);
    for s in &states {
        for name in ["pushCnt", "pullCnt"] {
            let c = m.var(s, name, 0).unwrap();
            assert!(c == 0 || c == 1, "{name} = {c}");
        }
        let q = m.var(s, "qcnt", 0).unwrap();
        assert!((0..=1).contains(&q));
    }
}

#[test]
fn single_learner_instances_verify() {
    for depth in [1, 2] {
        for bp in [false, true] {
            for spurious in [false, true] {
                let m = canonical_model(inst(1, depth, 3, bp)).unwrap();
                let opts = ExploreOptions {
                    spurious_wakeups: spurious,
                    check_wait_for: true,
                    ..Default::default()
                };
                let v = explore(&m, &opts);
                assert!(v.is_verified(), "depth={depth} bp={bp} spurious={spurious}: {v:?}");
                assert!(v.stats().final_states >= 1);
            }
        }
    }
}

#[test]
fn two_learners_one_iteration_verifies() {
    for depth in [1, 2] {
        let m = canonical_model(inst(2, depth, 1, true)).unwrap();
        let opts = ExploreOptions {
            check_wait_for: true,
            ..Default::default()
        };
        let v = explore(&m, &opts);
        assert!(v.is_verified(), "depth={depth}: {v:?}");
    }
}

#[test]
fn reduction_preserves_verdict_and_final_states() {
    let cases = [
        inst(1, 1, 3, false),
        inst(1, 2, 3, true),
        inst(2, 1, 1, true),
        inst(2, 2, 1, false),
    ];
    for i in cases {
        let m = canonical_model(i).unwrap();
        let reduced = explore(&m, &ExploreOptions::default());
        let unreduced = explore(&m, &full());
        assert!(reduced.is_verified() && unreduced.is_verified(), "{i:?}");
        assert_eq!(reduced.stats().final_states, unreduced.stats().final_states, "{i:?}");
        assert!(reduced.stats().states <= unreduced.stats().states);
    }
}

#[test]
fn verdicts_are_reproducible() {
    let m = canonical_model(inst(2, 1, 1, false)).unwrap();
    let a = explore(&m, &ExploreOptions::default());
    let b = explore(&m, &ExploreOptions::default());
    assert_eq!(a.stats(), b.stats());
    let m2 = canonical_model(inst(2, 1, 1, false)).unwrap();
    assert_eq!(explore(&m2, &ExploreOptions::default()).stats(), a.stats());
}

#[test]
fn budget_exhaustion_is_reported() {
    let m = canonical_model(inst(2, 2, 3, false)).unwrap();
    let v = explore(
        &m,
        &ExploreOptions {
            max_states: 1000,
            ..Default::default()
        },
    );
    assert!(matches!(v, Verdict::BudgetExhausted(s) if s.states > 1000));
}

#[test]
fn random_walks_at_three_learners_find_nothing() {
    let m = canonical_model(inst(3, 2, 3, false)).unwrap();
    let v = explore_random(
        &m,
        &ExploreOptions {
            spurious_wakeups: true,
            check_wait_for: true,
            ..Default::default()
        },
        &RandomOptions {
            walks: 300,
            max_steps: 5000,
            seed: 11,
        },
    );
    assert!(v.is_verified(), "{v:?}");
    assert_eq!(v.stats().final_states, 300);
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

    #[test]
    fn reduced_and_full_search_agree(depth in 1i64..=3, iters in 1i64..=4, bp: bool, spurious: bool) {
        let m = canonical_model(inst(1, depth, iters, bp)).unwrap();
        let opts = ExploreOptions { spurious_wakeups: spurious, ..Default::default() };
        let reduced = explore(&m, &opts);
        let unreduced = explore(&m, &ExploreOptions { reduction: false, ..opts.clone() });
        proptest::prop_assert!(reduced.is_verified());
        proptest::prop_assert!(unreduced.is_verified());
        proptest::prop_assert_eq!(reduced.stats().final_states, unreduced.stats().final_states);
    }
}
