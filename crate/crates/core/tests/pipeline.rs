use std::fs;
use std::path::Path;

use proptest::prelude::*;
use rankdistill::data::{make_splits, SplitPlan};
use rankdistill::harness::{run_experiment, ExperimentConfig, RunManifest};
use rankdistill::ltr::SavedModel;
use rankdistill::synthetic::SyntheticSpec;

fn toy(dir: &Path, run: &str) -> ExperimentConfig {
    fs::write(dir.join("subset.txt"), "1\n2\n4\n").unwrap();
    let mut config = ExperimentConfig::from_toml(
        r#"
        seed = 11
        [data.synthetic]
        queries = 20
        docs_per_query = 10
        features = 5
        generating_features = 2
        [splits]
        base_train_size = 6
        interpreter_split_sizes = [2, 4]
        validation_size = 4
        test_size = 6
        [base.params]
        num_rounds = 10
        [interpreter.params]
        num_rounds = 10
        [features]
        subset = "subset.txt"
        "#,
    )
    .unwrap();
    config.resolve_paths(dir);
    config.output_dir = dir.join(run);
    config
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (first, m1) = run_experiment(&toy(dir.path(), "a")).unwrap();
    let (second, m2) = run_experiment(&toy(dir.path(), "b")).unwrap();
    assert_eq!(first.rows.len(), 5);
    assert_eq!(first, second);
    for file in ["report.csv", "report.md", "per_query.csv", "splits/test.txt"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(file)).unwrap(),
            fs::read(dir.path().join("b").join(file)).unwrap(),
            "{file}"
        );
    }
    assert_eq!(m1.digests, m2.digests);
}

#[test]
fn interpretable_models_read_only_subset_features() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy(dir.path(), "run");
    run_experiment(&config).unwrap();
    for size in [2, 4] {
        let saved = SavedModel::load(&config.output_dir.join(format!("models/im_{size}.model"))).unwrap();
        let ensemble = saved.model.as_ensemble().unwrap().clone();
        assert_eq!(ensemble.feature_dim, 5);
        for (column, uses) in ensemble.feature_usage().into_iter().enumerate() {
            if uses > 0 {
                assert!([0, 1, 3].contains(&column), "IM model split on column {column}");
            }
        }
    }
}

#[test]
fn manifest_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy(dir.path(), "run");
    run_experiment(&config).unwrap();
    let manifest = RunManifest::load(&config.output_dir).unwrap();
    assert!(manifest.verify(&config.output_dir).is_empty());
    fs::write(config.output_dir.join("report.csv"), "edited\n").unwrap();
    assert_eq!(manifest.verify(&config.output_dir), vec!["report.csv".to_string()]);
    let echoed = ExperimentConfig::from_toml(&manifest.config).unwrap();
    assert_eq!(echoed.seed, 11);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn splits_are_disjoint_nested_and_seeded(seed in any::<u64>(), queries in 12usize..40) {
        let data = SyntheticSpec { queries, docs_per_query: 3, features: 2, generating_features: 1, ..Default::default() }
            .generate();
        let plan = SplitPlan {
            base_train_size: 3,
            interpreter_split_sizes: vec![1, 3, 5],
            validation_size: 2,
            test_size: 2,
            seed,
        };
        let s = make_splits(&data, &plan).unwrap();
        prop_assert_eq!(&s, &make_splits(&data, &plan).unwrap());
        for w in s.interpreter_splits.windows(2) {
            prop_assert!(w[1].groups.starts_with(&w[0].groups));
        }
        let mut all: Vec<&str> = s.base_train.query_ids();
        all.extend(s.interpreter_splits.last().unwrap().query_ids());
        all.extend(s.validation.query_ids());
        all.extend(s.test.query_ids());
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(n, plan.required_queries());
    }
}
