use std::path::PathBuf;

use shmps::analysis::{required_bandwidth, bandwidth_report, WorkloadProfile, GB, MB};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/bandwidth.csv")
}

#[test]
fn spot_rows_match_the_published_values() {
    let r = bandwidth_report(&fixture(), 1.0).unwrap();
    let yelp = r.find("yelp", 1).unwrap();
    assert!((yelp.computed_gbps - 22.53).abs() <= 0.01, "{}", yelp.computed_gbps);
    let cifar = r.find("cifar", 2).unwrap();
    assert!((cifar.computed_gbps - 3.78).abs() <= 0.01, "{}", cifar.computed_gbps);
}

#[test]
fn fixture_has_every_workload() {
    let r = bandwidth_report(&fixture(), 1.0).unwrap();
    assert_eq!(r.rows.len(), 46);
    for w in ["jewel", "welltok", "age", "yelp", "cifar", "imagenet"] {
        assert!(r.rows.iter().any(|row| row.workload == w), "{w}");
    }
    assert!(r.find("cifar", 1).is_none());
    assert!(r.find("imagenet", 1).is_none());
}

#[test]
fn computed_column_is_the_formula() {
    let r = bandwidth_report(&fixture(), 1.0).unwrap();
    for row in &r.rows {
        let p = &row.profile;
        let direct = 2.0 * p.model_size_bytes * (p.samples as f64 / p.mini_batch as f64) / p.time_per_epoch_s / GB;
        assert!((row.computed_gbps - direct).abs() < 1e-12);
    }
    // Jewel at mu=1: 2 * 7.69 MB * 2460 / 5.61 s.
    let j = r.find("jewel", 1).unwrap();
    assert!((j.computed_gbps - 6.744171).abs() < 1e-6);
}

#[test]
fn speedup_scales_the_requirement() {
    let p = WorkloadProfile {
        model_size_bytes: 10.0 * MB,
        samples: 1000,
        mini_batch: 10,
        time_per_epoch_s: 2.0,
    };
    let one = required_bandwidth(&p, 1.0).unwrap();
    assert_eq!(one, 1e9);
    assert_eq!(required_bandwidth(&p, 4.0).unwrap(), 4e9);
    let r2 = bandwidth_report(&fixture(), 2.0).unwrap();
    let r1 = bandwidth_report(&fixture(), 1.0).unwrap();
    for (a, b) in r1.rows.iter().zip(&r2.rows) {
        assert!((b.computed_gbps - 2.0 * a.computed_gbps).abs() < 1e-9);
    }
}

#[test]
fn report_renders_as_csv() {
    let r = bandwidth_report(&fixture(), 1.0).unwrap();
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), r.rows.len() + 1);
    assert!(csv.lines().any(|l| l.starts_with("yelp,1,") && l.ends_with(",ok")));
}
