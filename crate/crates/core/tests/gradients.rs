use shmps::models::{finite_diff_check, provider_by_name, Dataset, DatasetSpec, Task};

fn data(task: Task, features: usize, classes: usize) -> Dataset {
    Dataset::generate(&DatasetSpec {
        task,
        samples: 64,
        features,
        classes,
        seed: features as u64,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn linear_regression_matches_central_differences() {
    for features in [3, 17, 64] {
        let d = data(Task::Regression, features, 2);
        let p = provider_by_name("linear", &d, 0).unwrap();
        let r = finite_diff_check(p.as_ref(), &d, 20, 1);
        assert!(r.max_rel_error < 1e-5, "d={features}: {}", r.max_rel_error);
    }
}

#[test]
fn logistic_regression_matches_central_differences() {
    for features in [3, 17, 64] {
        let d = data(Task::Binary, features, 2);
        let p = provider_by_name("logistic", &d, 0).unwrap();
        let r = finite_diff_check(p.as_ref(), &d, 20, 2);
        assert!(r.max_rel_error < 1e-5, "d={features}: {}", r.max_rel_error);
    }
}

#[test]
fn mlp_matches_central_differences() {
    let d = data(Task::Multiclass, 6, 4);
    for hidden in [2, 8, 32] {
        let p = provider_by_name("mlp", &d, hidden).unwrap();
        let r = finite_diff_check(p.as_ref(), &d, 20, 3);
        assert!(r.max_rel_error < 1e-5, "hidden={hidden}: {}", r.max_rel_error);
    }
}

#[test]
fn providers_reject_mismatched_data() {
    let reg = data(Task::Regression, 4, 2);
    assert!(provider_by_name("logistic", &reg, 0).is_err());
    assert!(provider_by_name("mlp", &reg, 4).is_err());
    assert!(provider_by_name("svm", &reg, 0).is_err());
    let bin = data(Task::Binary, 4, 2);
    assert!(provider_by_name("mlp", &bin, 0).is_err());
}
