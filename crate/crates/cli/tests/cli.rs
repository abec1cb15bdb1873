use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use shmps::metrics::read_records;

fn shmps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shmps"))
        .args(args)
        .env("SHMPS_LOG", "error")
        .output()
        .expect("spawn shmps")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("..").join(rel)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "\
provider = logistic
samples = 400
features = 8
dataset_seed = 3
mini_batch = 2
epochs = 5
learning_rate = 0.05
";

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let c = dir.join("run.conf");
    fs::write(&c, body).unwrap();
    c
}

#[test]
fn deterministic_runs_write_identical_metrics() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(d.path(), SMALL);
    let a = d.path().join("a.jsonl");
    let b = d.path().join("b.jsonl");
    for m in [&a, &b] {
        let o = shmps(&["train", "-c", p(&c), "--deterministic", "--seed", "7", "--metrics", p(m)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (ba, bb) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(!ba.is_empty());
    assert_eq!(ba, bb);
    let recs = read_records(&a).unwrap();
    assert_eq!(recs.len(), 5);
    assert!(recs.iter().all(|r| r.wall_s.is_none() && r.bytes_moved.is_none()));
    assert_eq!(recs.last().unwrap().applied, 5 * 200);
}

#[test]
fn metrics_go_to_stdout_without_a_path() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(d.path(), SMALL);
    let o = shmps(&["train", "-c", p(&c), "--learners", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<_> = stdout(&o).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 5);
    for (i, l) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["epoch"], i + 1);
        for k in ["loss", "accuracy", "wall_s", "staleness_max", "staleness_mean", "bytes_moved"] {
            assert!(v.get(k).is_some(), "missing {k} in {l}");
        }
        assert!(v["wall_s"].is_number());
    }
}

#[test]
fn zero_mini_batch_is_rejected_before_launch() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(d.path(), &format!("{SMALL}mini_batch = 0\n"));
    let m = d.path().join("m.jsonl");
    let o = shmps(&["train", "-c", p(&c), "--metrics", p(&m)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("mini_batch"), "{}", stderr(&o));
    assert!(!m.exists());

    // The command line wins over the file.
    let o = shmps(&["train", "-c", p(&c), "--mini-batch", "2", "--metrics", p(&m)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(m.exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(d.path(), &format!("{SMALL}learner = 2\n"));
    let o = shmps(&["train", "-c", p(&c)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("unknown key `learner`"), "{}", stderr(&o));
    assert!(stderr(&o).contains("line 8"), "{}", stderr(&o));

    let c = write_config(d.path(), SMALL);
    let o = shmps(&["train", "-c", p(&c), "--set", "bogus=1"]);
    assert_eq!(o.status.code(), Some(3));
}

fn final_accuracy(c: &Path, learners: usize, seed: u64, out: &Path) -> f64 {
    let o = shmps(&[
        "train",
        "-c",
        p(c),
        "--learners",
        &learners.to_string(),
        "--seed",
        &seed.to_string(),
        "--metrics",
        p(out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    read_records(out).unwrap().last().unwrap().accuracy.unwrap()
}

#[test]
fn four_learners_match_one_learner_accuracy() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(
        d.path(),
        "provider = logistic\nsamples = 1000\nfeatures = 10\ndataset_seed = 11\n\
         mini_batch = 4\nepochs = 40\nlearning_rate = 0.01\n",
    );
    let m = d.path().join("m.jsonl");
    for seed in [1, 2] {
        let one = final_accuracy(&c, 1, seed, &m);
        let four = final_accuracy(&c, 4, seed, &m);
        assert!((one - four).abs() <= 0.01, "seed {seed}: {one} vs {four}");
    }
}

#[test]
fn bandwidth_report_covers_the_fixture() {
    let fixture = repo("core/data/bandwidth.csv");
    let rows = fs::read_to_string(&fixture).unwrap().lines().skip(1).filter(|l| !l.trim().is_empty()).count();
    let o = shmps(&["bandwidth", p(&fixture)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), rows + 1);
    let flagged = out.lines().filter(|l| l.contains("MISMATCH")).count();
    assert!(stderr(&o).contains(&format!("{rows} rows, {flagged} mismatches")), "{}", stderr(&o));

    let o = shmps(&["bandwidth", p(&fixture), "--csv"]);
    assert!(stdout(&o).starts_with("workload,mu,"));
}

#[test]
fn bandwidth_scales_with_the_target_speedup() {
    let fixture = repo("core/data/bandwidth.csv");
    let o = shmps(&["bandwidth", p(&fixture), "-x", "4", "--workload", "yelp", "--mu", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let gbps: f64 = out.split(": ").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!((gbps - 90.12).abs() <= 0.01, "{out}");
    assert!(!out.contains("MISMATCH"), "{out}");
}

#[test]
fn missing_fixture_is_an_error() {
    let o = shmps(&["bandwidth", "/nonexistent/table.csv"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("/nonexistent/table.csv"));
}

#[test]
fn verify_accepts_the_canonical_protocol() {
    let canonical = repo("protocheck/protocols/canonical.proto");
    for (l, q) in [("1", "1"), ("2", "2")] {
        let o = shmps(&["verify", p(&canonical), "--learners", l, "--depth", q]);
        assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
        assert!(stdout(&o).starts_with("verified:"));
    }
}

#[test]
fn verify_rejects_every_mutant_with_a_trace() {
    let dir = repo("protocheck/protocols/mutants");
    let mut seen = 0;
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        let o = shmps(&["verify", p(&path)]);
        assert_eq!(o.status.code(), Some(1), "{}", path.display());
        let out = stdout(&o);
        assert!(out.starts_with("counterexample"), "{out}");
        assert!(out.lines().filter(|l| l.trim_start().starts_with("1.")).count() == 1, "{out}");
        seen += 1;
    }
    assert_eq!(seen, 3);
}

#[test]
fn verify_reports_parse_errors_with_a_line() {
    let d = tempfile::tempdir().unwrap();
    let empty = d.path().join("empty.proto");
    fs::write(&empty, "").unwrap();
    let o = shmps(&["verify", p(&empty)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));

    let bad = d.path().join("bad.proto");
    fs::write(&bad, "const learners = 1\n\nthread ps\n  frobnicate x\n").unwrap();
    let o = shmps(&["verify", p(&bad)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
}

#[test]
fn verify_exits_two_when_the_budget_runs_out() {
    let canonical = repo("protocheck/protocols/canonical.proto");
    let o = shmps(&["verify", p(&canonical), "--max-states", "10"]);
    assert_eq!(o.status.code(), Some(2));
}

const FAULTY: &str = "\
provider = logistic
samples = 400
features = 8
dataset_seed = 5
mini_batch = 2
epochs = 5
learning_rate = 0.05
learners = 2
compute_delay_us = 100
heartbeat_ms = 50
lease_ms = 150
checkpoint_interval = 50
";

#[test]
fn killing_all_learners_at_half_progress_restarts_once() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(d.path(), FAULTY);
    let sched = d.path().join("faults.txt");
    fs::write(&sched, "# everyone dies halfway\n50% all\n").unwrap();
    let events = d.path().join("events.jsonl");
    let ck = d.path().join("run.ckpt");
    let m = d.path().join("m.jsonl");
    let o = shmps(&[
        "train",
        "-c",
        p(&c),
        "--schedule",
        p(&sched),
        "--events",
        p(&events),
        "--checkpoint",
        p(&ck),
        "--metrics",
        p(&m),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let kinds: Vec<String> = fs::read_to_string(&events)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_owned())
        .collect();
    assert_eq!(kinds.iter().filter(|k| *k == "restart").count(), 1, "{kinds:?}");
    assert_eq!(kinds.iter().filter(|k| *k == "fault").count(), 1, "{kinds:?}");
    assert_eq!(kinds.last().map(String::as_str), Some("complete"));
    assert_eq!(read_records(&m).unwrap().last().unwrap().applied, 1000);

    let o = shmps(&["checkpoint-inspect", p(&ck), "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["learners"], 2);
    assert_eq!(v["dim"], 9);
    assert_eq!(v["weights_finite"], true);
    let o = shmps(&["checkpoint-inspect", p(&ck)]);
    assert!(stdout(&o).contains("learner 1: epoch"));
}

#[test]
fn inject_without_a_schedule_uses_seeded_faults() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(d.path(), FAULTY);
    let report = d.path().join("report.json");
    let o = shmps(&["inject", "-c", p(&c), "--seeds", "6", "--kill-prob", "0.3", "--report", p(&report)]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("failed 0"), "{}", stdout(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let runs = v["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 6);
    assert!(runs.iter().all(|r| r["scenario"].is_string()));
    assert_eq!(v["failed"], 0);
}

#[test]
fn inject_with_a_schedule_applies_it_to_every_seed() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(d.path(), FAULTY);
    let sched = d.path().join("faults.txt");
    fs::write(&sched, "50% all\n").unwrap();
    let report = d.path().join("report.json");
    let o = shmps(&[
        "inject",
        "-c",
        p(&c),
        "--schedule",
        p(&sched),
        "--seeds",
        "2",
        "--report",
        p(&report),
    ]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for r in v["runs"].as_array().unwrap() {
        assert!(r["scenario"].is_null());
        assert_eq!(r["restarts"], 1, "{r}");
    }
    assert_eq!(v["recovered"], 2);
}

#[test]
fn bad_schedules_name_the_line() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(d.path(), SMALL);
    let sched = d.path().join("faults.txt");
    fs::write(&sched, "10ms 0\nsoon 1\n").unwrap();
    let o = shmps(&["train", "-c", p(&c), "--schedule", p(&sched)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn baseline_feeds_the_speedup_report() {
    let d = tempfile::tempdir().unwrap();
    let base = d.path().join("baselines.json");
    let c = write_config(d.path(), &format!("{SMALL}baselines = {}\n", base.display()));
    let o = shmps(&["baseline", "-c", p(&c), "--learners", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("logistic/9/2:"), "{}", stdout(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&base).unwrap()).unwrap();
    assert_eq!(v["entries"]["logistic/9/2"]["gradients"], 1000);

    let o = shmps(&["train", "-c", p(&c), "--learners", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("speedup: "), "{}", stderr(&o));

    let c2 = write_config(d.path(), SMALL);
    let o = shmps(&["baseline", "-c", p(&c2)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn corrupt_checkpoints_are_reported() {
    let d = tempfile::tempdir().unwrap();
    let ck = d.path().join("x.ckpt");
    fs::write(&ck, b"PSCK garbage").unwrap();
    let o = shmps(&["checkpoint-inspect", p(&ck)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("x.ckpt"), "{}", stderr(&o));
}
