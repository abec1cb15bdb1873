use protocheck::protocol::{canonical_model, site, Instance, CANONICAL};
use protocheck::{check_hold_and_wait, reachable_states, wait_for_graph, Model, ThreadStatus};

fn small() -> Model {
    canonical_model(Instance {
        iters: 2,
        ..Instance::default()
    })
    .unwrap()
}

#[test]
fn initial_state_has_no_wait_edges() {
    let m = small();
    let s = m.initial_state();
    for t in 0..m.thread_count() {
        assert_eq!(m.thread_status(&s, t), ThreadStatus::Running);
    }
    assert!(wait_for_graph(&m, &s).is_empty());
}

#[test]
fn training_blocked_on_full_push_slot_waits_for_push() {
    let m = small();
    let train = m.thread_id("train[0]").unwrap();
    let states = reachable_states(&m, 1_000_000).unwrap();
    let blocked: Vec<_> = states
        .iter()
        .filter(|s| {
            m.thread_status(s, train) == ThreadStatus::Waiting
                && m.thread_site(s, train) == Some(site::TRAIN_WAIT_PUSH_EMPTY)
        })
        .collect();
    assert!(!blocked.is_empty());
    for s in blocked {
        assert_eq!(m.var(s, "pushCnt", 0), Some(1));
        let g = wait_for_graph(&m, s);
        let from_train: Vec<_> = g.named_edges().into_iter().filter(|(a, _)| *a == "train[0]").collect();
        assert_eq!(from_train, vec![("train[0]", "push[0]")]);
    }
}

#[test]
fn no_wait_for_cycle_in_any_reachable_state() {
    for depth in [1, 2] {
        let m = canonical_model(Instance {
            depth,
            ..Instance::default()
        })
        .unwrap();
        let states = reachable_states(&m, 1_000_000).unwrap();
        let mut edges = 0;
        for s in &states {
            let g = wait_for_graph(&m, s);
            edges += g.edges.len();
            assert!(g.find_cycle().is_none(), "cycle in\n{g}");
        }
        assert!(edges > 0, "sweep never saw a blocked thread");
    }
}

#[test]
fn only_push_holds_and_waits() {
    for learners in [1, 2, 3] {
        let m = canonical_model(Instance {
            learners,
            ..Instance::default()
        })
        .unwrap();
        let r = check_hold_and_wait(&m);
        assert_eq!(r.threads(), vec!["push"]);
        assert_eq!(
            r.sites(),
            vec![("push", Some(site::PUSH_LOCK_QUEUE)), ("push", Some(site::PUSH_WAIT_QUEUE))]
        );
        for e in &r.entries {
            assert_eq!(e.held, vec!["pushMtx".to_string()]);
        }
    }
}

#[test]
fn nested_handshake_guards_in_training_are_flagged() {
    let unlock_pull = CANONICAL
        .lines()
        .find(|l| l.contains("@125"))
        .expect("training releases the pull guard");
    let lock_push = CANONICAL.lines().find(|l| l.contains("@104")).unwrap();
    let nested = CANONICAL
        .replace(&format!("{unlock_pull}\n"), "")
        .replace(lock_push, &format!("{lock_push}\n{unlock_pull}"));
    let m = Model::parse_and_build(&nested, &[]).unwrap();
    let r = check_hold_and_wait(&m);
    assert!(r.sites().contains(&("train", Some(site::TRAIN_LOCK_PUSH))), "{:?}", r.sites());
    let e = r.entries.iter().find(|e| e.site == Some(site::TRAIN_LOCK_PUSH)).unwrap();
    assert_eq!(e.held, vec!["pullMtx".to_string()]);
}
