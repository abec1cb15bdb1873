use protocheck::{explore, ExploreOptions, Model, Violation};

fn run(src: &str) -> Option<Violation> {
    let m = Model::parse_and_build(src, &[]).unwrap();
    explore(&m, &ExploreOptions::default()).counterexample().map(|c| c.violation.clone())
}

fn runtime_message(v: Option<Violation>) -> String {
    match v {
        Some(Violation::Runtime { message, .. }) => message,
        other => panic!("expected a runtime violation, got {other:?}"),
    }
}

#[test]
fn unguarded_write_is_reported() {
    let src = "var x = 0 guarded_by m\nmutex m\nthread a\n  x := 1\nend\n";
    let msg = runtime_message(run(src));
    assert!(msg.contains("writes x without holding m"), "{msg}");
}

#[test]
fn guarded_accesses_under_the_lock_pass() {
    let src = "var x = 0 guarded_by m\nmutex m\n\
               thread a\n  lock m\n  x := x + 1\n  unlock m\nend\n\
               thread b\n  lock m\n  x := x + 1\n  unlock m\nend\n";
    assert_eq!(run(src), None);
}

#[test]
fn unsynchronized_reads_of_write_guarded_data_pass() {
    let src = "var x = 0 writes_guarded_by m\nmutex m\n\
               thread a\n  lock m\n  x := 1\n  unlock m\nend\n\
               thread b\n  await x == 1\nend\n";
    assert_eq!(run(src), None);
}

#[test]
fn unguarded_write_of_write_guarded_data_is_reported() {
    let src = "var x = 0 writes_guarded_by m\nmutex m\nthread a\n  x := 1\nend\n";
    assert!(runtime_message(run(src)).contains("without holding m"));
}

#[test]
fn foreign_access_to_owned_element_is_reported() {
    let ok = "var a[2] = 0 owned_by w\nthread w[2]\n  a[self] := 1\nend\n";
    assert_eq!(run(ok), None);
    let bad = "var a[2] = 0 owned_by w\nthread w[2]\n  a[1 - self] := 1\nend\n";
    assert!(runtime_message(run(bad)).contains("owned by another thread"));
}

#[test]
fn signal_without_condition_guard_is_reported() {
    let src = "mutex m\ncond c guarded_by m\nthread a\n  signal c\nend\n";
    assert!(runtime_message(run(src)).contains("signals c without holding m"));
}

#[test]
fn wait_with_the_wrong_mutex_is_reported() {
    let src = "var x = 0\nmutex m\nmutex n\ncond c guarded_by m\n\
               thread a\n  lock n\n  wait c n\n  unlock n\nend\n";
    assert!(runtime_message(run(src)).contains("guarded by m"));
}

#[test]
fn unknown_annotation_is_a_parse_error() {
    let err = Model::parse_and_build("var x = 0 protected_by m\nmutex m\n", &[]).unwrap_err();
    let text = err.to_string();
    assert!(text.contains("unknown access annotation"), "{text}");
    assert!(text.contains("line 1"), "{text}");
}

#[test]
fn guard_size_must_divide_the_array() {
    let src = "var x[3] = 0 guarded_by m\nmutex m[2]\n";
    assert!(Model::parse_and_build(src, &[]).is_err());
}
