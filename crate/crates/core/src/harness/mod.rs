//! The experiment runner: split, train the base ranker, relabel, train AM
//! and IM interpreters across the split ladder, evaluate, and write the
//! run directory.
//!
//! Run directory layout:
//!
//! ```text
//! report.csv  report.md  per_query.csv  manifest.txt
//! splits/<region>.txt          region<TAB>query_id
//! models/base.model            models/{am,im}_<size>.model
//! secondary/{pool,validation}.letor  + .sidecar.tsv
//! ```

mod config;
mod manifest;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use thiserror::Error;

pub use config::{
    BaseKind, BaseSection, DataSection, ExperimentConfig, FeatureSection, InterpreterSection, ParamOverrides,
    SplitSection,
};
pub use manifest::{file_digest, sha256_hex, RunManifest, RunStatus, MANIFEST_FILE};
pub use report::{format_value, per_query_csv, FidelityReport, ReportRow};

use crate::data::{self, make_splits, DataError, Dataset};
use crate::distill::{
    build_secondary_dataset, fidelity, train_interpreter, DistillError, FeatureRegime, InterpreterSpec,
    QueryFidelity,
};
use crate::ltr::{train_lambdamart, train_ranknet, Model, SavedModel, TrainError, TrainParams};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<HarnessError>,
    },
}

impl HarnessError {
    /// Process exit code: 1 config, 2 data, 3 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Data(_) | HarnessError::Io { .. } | HarnessError::Manifest(_) => 2,
            HarnessError::Train(_) => 3,
            HarnessError::Distill(e) => match e {
                DistillError::InvalidConfig(_) => 1,
                DistillError::MissingScore { .. }
                | DistillError::TableParse { .. }
                | DistillError::Io { .. }
                | DistillError::Data(_) => 2,
                DistillError::Train(_) | DistillError::Metric(_) | DistillError::EmptyTrain => 3,
            },
            HarnessError::Stage { source, .. } => source.exit_code(),
        }
    }

    pub fn stage(&self) -> Option<&'static str> {
        match self {
            HarnessError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| HarnessError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Trains the configured base ranker family.
pub fn train_base(kind: BaseKind, train: &Dataset, validation: &Dataset, params: &TrainParams) -> Result<Model> {
    Ok(match kind {
        BaseKind::Listwise => train_lambdamart(train, validation, params)?.into(),
        BaseKind::Pairwise => train_ranknet(train, validation, params)?.into(),
    })
}

/// Tracks artifacts and stage timings while a run progresses.
struct RunState {
    dir: PathBuf,
    digests: BTreeMap<String, String>,
    timings_ms: BTreeMap<String, u64>,
}

impl RunState {
    fn write(&mut self, rel: &str, contents: &[u8]) -> Result<()> {
        write_file(&self.dir.join(rel), contents)?;
        self.digests.insert(rel.to_string(), sha256_hex(contents));
        Ok(())
    }

    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        info!("stage {name}");
        let start = Instant::now();
        let out = f(self).map_err(|e| HarnessError::Stage {
            stage: name,
            source: Box::new(e),
        });
        *self.timings_ms.entry(name.to_string()).or_default() += start.elapsed().as_millis() as u64;
        out
    }
}

/// Runs the whole grid and writes the run directory at `config.output_dir`.
///
/// On failure the manifest is still written, marked incomplete with the
/// failing stage, and the error is returned.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(FidelityReport, RunManifest)> {
    let mut state = RunState {
        dir: config.output_dir.clone(),
        digests: BTreeMap::new(),
        timings_ms: BTreeMap::new(),
    };
    let outcome = run_stages(config, &mut state);
    let (status, failed_stage) = match &outcome {
        Ok(_) => (RunStatus::Complete, None),
        Err(e) => (RunStatus::Incomplete, Some(e.stage().unwrap_or("setup").to_string())),
    };
    let manifest = RunManifest {
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        status,
        failed_stage,
        seed: config.seed,
        config: config.to_toml(),
        digests: state.digests,
        timings_ms: state.timings_ms,
    };
    let manifest_written = write_file(&config.output_dir.join(MANIFEST_FILE), manifest.to_text().as_bytes());
    let report = outcome?;
    manifest_written?;
    Ok((report, manifest))
}

fn run_stages(config: &ExperimentConfig, state: &mut RunState) -> Result<FidelityReport> {
    state.stage("validate", |_| config.validate())?;
    let (dataset, subset) = state.stage("load", |_| {
        let dataset = config.load_dataset()?;
        let subset = config.load_subset()?;
        subset
            .validate_for(dataset.feature_dim)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok((dataset, subset))
    })?;

    let plan = config.split_plan();
    let splits = state.stage("split", |st| {
        let splits = make_splits(&dataset, &plan)?;
        for (name, ids) in splits.regions(&plan) {
            let mut text = Vec::new();
            data::write_split_manifest(&[(name.clone(), ids)], &mut text).expect("in-memory write");
            st.write(&format!("splits/{name}.txt"), &text)?;
        }
        Ok(splits)
    })?;
    drop(dataset);

    let base_params = config.base_params();
    let base = state.stage("train-base", |st| {
        let model = train_base(config.base.kind, &splits.base_train, &splits.validation, &base_params)?;
        let saved = SavedModel::new(model.clone(), Some(base_params.clone()));
        st.write("models/base.model", saved.to_text().as_bytes())?;
        Ok(model)
    })?;

    let pool = splits
        .interpreter_splits
        .last()
        .expect("validated plan has at least one split");
    let (secondary_pool, secondary_valid) = state.stage("relabel", |st| {
        let sec_pool = build_secondary_dataset(&base, pool, &config.labels)?;
        let sec_valid = build_secondary_dataset(&base, &splits.validation, &config.labels)?;
        for (name, sec) in [("pool", &sec_pool), ("validation", &sec_valid)] {
            let mut letor = Vec::new();
            sec.dataset.write_letor(&mut letor).expect("in-memory write");
            st.write(&format!("secondary/{name}.letor"), &letor)?;
            st.write(&format!("secondary/{name}.sidecar.tsv"), sec.sidecar_text().as_bytes())?;
        }
        Ok((sec_pool.dataset, sec_valid.dataset))
    })?;

    let interp_params = config.interpreter_params();
    let regimes = [FeatureRegime::All, FeatureRegime::Subset(subset)];
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut per_query: Vec<(String, String, Vec<QueryFidelity>)> = Vec::new();
    for regime in &regimes {
        for &size in &config.splits.interpreter_split_sizes {
            // splits are prefixes of the pool, and relabeling keeps query order
            let train = Dataset {
                groups: secondary_pool.groups[..size].to_vec(),
                feature_dim: secondary_pool.feature_dim,
            };
            let spec = InterpreterSpec {
                regime: regime.clone(),
                params: interp_params.clone(),
            };
            let model = state.stage("train-interpreters", |st| {
                let model = train_interpreter(&train, &secondary_valid, &spec)?;
                let rel = format!("models/{}_{size}.model", regime.name().to_lowercase());
                st.write(&rel, SavedModel::new(model.clone(), Some(spec.params.clone())).to_text().as_bytes())?;
                Ok(model)
            })?;
            let outcome = state.stage("evaluate", |_| Ok(fidelity(&model, &base, &splits.test, &config.eval)?))?;
            info!(
                "{} split {size}: tau {:?}, ndcg {:.4}",
                regime.name(),
                outcome.summary.tau,
                outcome.summary.ndcg_at_k
            );
            rows.push(ReportRow {
                split: size.to_string(),
                regime: regime.name().to_string(),
                ndcg_at_k: outcome.summary.ndcg_at_k,
                precision_at_k: outcome.summary.precision_at_k,
                tau: outcome.summary.tau,
                tau_at_k: outcome.summary.tau_at_k,
            });
            per_query.push((size.to_string(), regime.name().to_string(), outcome.per_query));
        }
    }

    let base_name = config.base.kind.label();
    let base_outcome = state.stage("evaluate", |_| Ok(fidelity(&base, &base, &splits.test, &config.eval)?))?;
    rows.push(ReportRow {
        split: base_name.to_string(),
        regime: "base".to_string(),
        ndcg_at_k: base_outcome.summary.ndcg_at_k,
        precision_at_k: base_outcome.summary.precision_at_k,
        tau: None,
        tau_at_k: None,
    });
    per_query.push((base_name.to_string(), "base".to_string(), base_outcome.per_query));

    let report = FidelityReport { k: config.eval.k, rows };
    state.stage("report", |st| {
        st.write("report.csv", report.to_csv().as_bytes())?;
        st.write("report.md", report.to_markdown().as_bytes())?;
        st.write("per_query.csv", per_query_csv(config.eval.k, &per_query).as_bytes())
    })?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::SyntheticSpec;

    fn toy_config(dir: &Path) -> ExperimentConfig {
        let subset = dir.join("subset.txt");
        fs::write(&subset, "1\n2\n").unwrap();
        let mut config = ExperimentConfig::from_toml(
            r#"
            seed = 3
            [data.synthetic]
            queries = 20
            docs_per_query = 12
            features = 4
            generating_features = 2
            [splits]
            base_train_size = 6
            interpreter_split_sizes = [2, 4]
            validation_size = 4
            test_size = 4
            [base.params]
            num_rounds = 10
            [interpreter.params]
            num_rounds = 10
            "#,
        )
        .unwrap();
        config.features.subset = Some(subset);
        config.output_dir = dir.join("run");
        config
    }

    #[test]
    fn toy_run_has_one_row_per_split_and_regime_plus_base() {
        let dir = tempfile::tempdir().unwrap();
        let config = toy_config(dir.path());
        let (report, manifest) = run_experiment(&config).unwrap();
        assert_eq!(report.rows.len(), 2 * 2 + 1);
        assert_eq!(report.rows.last().unwrap().regime, "base");
        assert_eq!(report.to_csv().lines().count(), 6);
        assert_eq!(manifest.status, RunStatus::Complete);
        assert!(manifest.verify(&config.output_dir).is_empty());
        let on_disk = RunManifest::load(&config.output_dir).unwrap();
        assert_eq!(on_disk, manifest);
        for rel in ["report.md", "per_query.csv", "models/base.model", "models/im_4.model", "splits/test.txt"] {
            assert!(config.output_dir.join(rel).is_file(), "{rel}");
        }
    }

    #[test]
    fn failures_mark_the_manifest_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = toy_config(dir.path());
        config.data.synthetic = Some(SyntheticSpec { queries: 5, ..config.data.synthetic.unwrap() });
        let err = run_experiment(&config).unwrap_err();
        assert_eq!(err.stage(), Some("split"));
        assert_eq!(err.exit_code(), 2);
        let manifest = RunManifest::load(&config.output_dir).unwrap();
        assert_eq!(manifest.status, RunStatus::Incomplete);
        assert_eq!(manifest.failed_stage.as_deref(), Some("split"));
    }

    #[test]
    fn bad_config_exits_with_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = toy_config(dir.path());
        config.features.subset = Some(dir.path().join("missing.txt"));
        let err = run_experiment(&config).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert_eq!(err.stage(), Some("validate"));
    }
}
