use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::{self, Dataset, FeatureSubset, SplitPlan};
use crate::distill::{EvalOptions, SecondaryLabelConfig};
use crate::ltr::TrainParams;
use crate::synthetic::SyntheticSpec;

/// Base ranker family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    /// LambdaMART (M-L).
    Listwise,
    /// RankNet (M-P).
    Pairwise,
}

impl BaseKind {
    pub fn label(&self) -> &'static str {
        match self {
            BaseKind::Listwise => "M-L",
            BaseKind::Pairwise => "M-P",
        }
    }

    pub fn default_params(&self) -> TrainParams {
        match self {
            BaseKind::Listwise => TrainParams::lambdamart(),
            BaseKind::Pairwise => TrainParams::ranknet(),
        }
    }
}

/// Training-parameter overrides; unset fields keep the family default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_rounds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_leaves: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_instances_per_leaf: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ndcg_cutoff: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub early_stop_patience: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_pairs_per_query: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ParamOverrides {
    /// Applies the overrides; an unset seed falls back to `run_seed`.
    pub fn apply(&self, mut params: TrainParams, run_seed: u64) -> TrainParams {
        macro_rules! set {
            ($($field:ident),*) => { $( if let Some(v) = self.$field { params.$field = v; } )* };
        }
        set!(
            num_rounds,
            learning_rate,
            max_leaves,
            min_instances_per_leaf,
            ndcg_cutoff,
            sigma,
            hidden_size,
            early_stop_patience,
            max_pairs_per_query
        );
        params.seed = self.seed.unwrap_or(run_seed);
        params
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// LETOR file, relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub base_train_size: usize,
    pub interpreter_split_sizes: Vec<usize>,
    pub validation_size: usize,
    pub test_size: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            base_train_size: 5000,
            interpreter_split_sizes: vec![100, 200, 300, 400, 500, 1000, 2500, 5000, 7500, 15000],
            validation_size: 2500,
            test_size: 2500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseSection {
    pub kind: BaseKind,
    pub params: ParamOverrides,
}

impl Default for BaseSection {
    fn default() -> Self {
        BaseSection {
            kind: BaseKind::Listwise,
            params: ParamOverrides::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpreterSection {
    pub params: ParamOverrides,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    /// Interpretable feature subset file, relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset: Option<PathBuf>,
}

/// The whole experiment grid in one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub splits: SplitSection,
    pub base: BaseSection,
    pub interpreter: InterpreterSection,
    pub labels: SecondaryLabelConfig,
    pub features: FeatureSection,
    pub eval: EvalOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            output_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            splits: SplitSection::default(),
            base: BaseSection::default(),
            interpreter: InterpreterSection::default(),
            labels: SecondaryLabelConfig::default(),
            features: FeatureSection::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Loads a config and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(dir);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(p) = self.data.path.as_mut() {
            resolve(p);
        }
        if let Some(p) = self.features.subset.as_mut() {
            resolve(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            base_train_size: self.splits.base_train_size,
            interpreter_split_sizes: self.splits.interpreter_split_sizes.clone(),
            validation_size: self.splits.validation_size,
            test_size: self.splits.test_size,
            seed: self.seed,
        }
    }

    pub fn base_params(&self) -> TrainParams {
        self.base.params.apply(self.base.kind.default_params(), self.seed)
    }

    pub fn interpreter_params(&self) -> TrainParams {
        self.interpreter.params.apply(TrainParams::lambdamart(), self.seed)
    }

    /// Checks everything that can be checked before touching the data.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |m: String| Err(HarnessError::Config(m));
        match (&self.data.path, &self.data.synthetic) {
            (Some(_), Some(_)) => return cfg("set only one of data.path and data.synthetic".into()),
            (None, None) => return cfg("set data.path or data.synthetic".into()),
            (Some(p), None) if !p.is_file() => return cfg(format!("dataset {} does not exist", p.display())),
            _ => {}
        }
        match &self.features.subset {
            None => return cfg("features.subset is required for the interpretable regime".into()),
            Some(p) if !p.is_file() => return cfg(format!("feature subset {} does not exist", p.display())),
            _ => {}
        }
        if self.eval.k == 0 {
            return cfg("eval.k must be at least 1".into());
        }
        if !(1..=data::MAX_LABEL).contains(&self.eval.precision_threshold) {
            return cfg("eval.precision_threshold must be in [1, 4]".into());
        }
        self.split_plan().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.labels.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.base_params().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.interpreter_params().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset, HarnessError> {
        match (&self.data.path, &self.data.synthetic) {
            (Some(path), _) => Ok(data::load_dataset(path)?),
            (None, Some(spec)) => Ok(spec.generate()),
            (None, None) => Err(HarnessError::Config("no data source".into())),
        }
    }

    pub fn load_subset(&self) -> Result<FeatureSubset, HarnessError> {
        let path = self
            .features
            .subset
            .as_ref()
            .ok_or_else(|| HarnessError::Config("features.subset is required".into()))?;
        FeatureSubset::load(path).map_err(|e| HarnessError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_published_ladder() {
        let c = ExperimentConfig::default();
        assert_eq!(c.splits.interpreter_split_sizes.len(), 10);
        assert_eq!(c.split_plan().required_queries(), 5000 + 15000 + 2500 + 2500);
        assert_eq!(c.eval.k, 10);
        assert_eq!(c.labels, SecondaryLabelConfig::default());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = ExperimentConfig::from_toml(
            r#"
            seed = 9
            [data.synthetic]
            queries = 20
            [splits]
            base_train_size = 5
            interpreter_split_sizes = [2, 4]
            validation_size = 3
            test_size = 3
            [base]
            kind = "pairwise"
            [base.params]
            num_rounds = 3
            [eval]
            tau_at_k_set = "intersection"
            "#,
        )
        .unwrap();
        assert_eq!(c.data.synthetic.as_ref().unwrap().queries, 20);
        assert_eq!(c.data.synthetic.as_ref().unwrap().docs_per_query, 50);
        let p = c.base_params();
        assert_eq!(p.num_rounds, 3);
        assert_eq!(p.learning_rate, 5e-5);
        assert_eq!(p.seed, 9);
        assert_eq!(c.eval.tau_at_k_set, crate::metrics::TopKSet::Intersection);
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(ExperimentConfig::from_toml("sede = 1").is_err());
        assert!(ExperimentConfig::from_toml("[base.params]\nrounds = 1").is_err());
    }

    #[test]
    fn validation_catches_missing_sources() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_err());
        c.data.synthetic = Some(SyntheticSpec::default());
        assert!(c.validate().unwrap_err().to_string().contains("features.subset"));
    }
}
