use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PairwiseNet, Result, Scorer, TrainError, TrainParams, TreeEnsemble};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TreeEnsemble,
    PairwiseNet,
}

/// Either trained model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    TreeEnsemble(TreeEnsemble),
    PairwiseNet(PairwiseNet),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::TreeEnsemble(_) => ModelKind::TreeEnsemble,
            Model::PairwiseNet(_) => ModelKind::PairwiseNet,
        }
    }

    pub fn as_ensemble(&self) -> Option<&TreeEnsemble> {
        match self {
            Model::TreeEnsemble(e) => Some(e),
            Model::PairwiseNet(_) => None,
        }
    }
}

impl Scorer for Model {
    fn feature_dim(&self) -> usize {
        match self {
            Model::TreeEnsemble(m) => m.feature_dim(),
            Model::PairwiseNet(m) => m.feature_dim(),
        }
    }

    fn score_unchecked(&self, features: &[f64]) -> f64 {
        match self {
            Model::TreeEnsemble(m) => m.score_unchecked(features),
            Model::PairwiseNet(m) => m.score_unchecked(features),
        }
    }
}

impl From<TreeEnsemble> for Model {
    fn from(m: TreeEnsemble) -> Self {
        Model::TreeEnsemble(m)
    }
}

impl From<PairwiseNet> for Model {
    fn from(m: PairwiseNet) -> Self {
        Model::PairwiseNet(m)
    }
}

/// On-disk model document: a JSON tree holding the training parameters and
/// every tree node or weight at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub format_version: u32,
    pub toolkit_version: String,
    pub params: Option<TrainParams>,
    pub model: Model,
}

impl SavedModel {
    pub fn new(model: impl Into<Model>, params: Option<TrainParams>) -> Self {
        SavedModel {
            format_version: FORMAT_VERSION,
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            params,
            model: model.into(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("models serialize");
        text.push('\n');
        text
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let saved: SavedModel = serde_json::from_str(text).map_err(|e| TrainError::Format(e.to_string()))?;
        if saved.format_version != FORMAT_VERSION {
            return Err(TrainError::Format(format!(
                "unsupported format version {}",
                saved.format_version
            )));
        }
        Ok(saved)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| TrainError::Format(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TrainError::Format(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltr::{Node, RegressionTree};
    use proptest::prelude::*;

    fn ensemble(values: &[f64], thresholds: &[f64]) -> TreeEnsemble {
        let trees = values
            .iter()
            .zip(thresholds)
            .map(|(&v, &t)| RegressionTree {
                nodes: vec![
                    Node::Split { feature: 0, threshold: t, left: 1, right: 2 },
                    Node::Leaf { value: v },
                    Node::Leaf { value: -v / 3.0 },
                ],
                max_leaves: 2,
            })
            .collect();
        TreeEnsemble { trees, learning_rate: 0.1, feature_dim: 2 }
    }

    #[test]
    fn rejects_unknown_version() {
        let mut saved = SavedModel::new(ensemble(&[1.0], &[0.5]), None);
        saved.format_version = 99;
        assert!(SavedModel::from_text(&saved.to_text()).is_err());
        assert!(SavedModel::from_text("{").is_err());
    }

    #[test]
    fn net_round_trips() {
        let net = PairwiseNet::init(3, 4, 17);
        let saved = SavedModel::new(net.clone(), Some(TrainParams::ranknet()));
        let loaded = SavedModel::from_text(&saved.to_text()).unwrap();
        assert_eq!(loaded, saved);
        assert_eq!(loaded.model.kind(), ModelKind::PairwiseNet);
        let x = [0.3, -1.0, 2.5];
        assert_eq!(loaded.model.score(&x).unwrap(), net.score(&x).unwrap());
    }

    proptest! {
        #[test]
        fn ensemble_scores_survive_save_load(
            values in proptest::collection::vec(-1e3f64..1e3, 1..8),
            x in -2.0f64..2.0,
        ) {
            let thresholds: Vec<f64> = values.iter().map(|v| v / 1e3).collect();
            let model = ensemble(&values, &thresholds);
            let saved = SavedModel::new(model.clone(), Some(TrainParams::lambdamart()));
            let loaded = SavedModel::from_text(&saved.to_text()).unwrap();
            prop_assert_eq!(loaded.model.score(&[x, 0.0]).unwrap(), model.score(&[x, 0.0]).unwrap());
            prop_assert_eq!(loaded.to_text(), saved.to_text());
        }
    }
}
