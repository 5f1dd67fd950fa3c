//! Cost-greedy functional gradient boosting of weak structured predictors.
//!
//! Each stage pairs an entropy selector with a vector regression tree and a
//! step size. Stage `t` is the candidate with the best risk reduction per
//! unit cost among all (selector, learner) pairs, where cost counts the
//! selector, the tree and any features the tree needs that earlier stages
//! have not already paid for.

mod search;
mod train;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{DescriptorLayout, FeatureBank, FeatureSet, GroupSpec};
use crate::instance::StructuredInstance;
use crate::runtime::Metrics;
use crate::selectors::{EntropySelector, DEFAULT_SELECTOR_COST};
use crate::tree::{RegressionTree, DEFAULT_PREDICTION_COST};

pub use search::{golden_section, speedboost_select, CandidateScore, LineSearch};
pub use train::{
    assign_folds, build_gradient_dataset, initial_scores, stacked_predictions, train, train_with_report,
    CandidateRecord, IterationLog, ProvenanceLog, TrainReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Maximum number of stages.
    pub iterations: usize,
    /// Entropy thresholds (nats) of the selector family.
    pub thresholds: Vec<f64>,
    /// Tree depth limits of the learner family.
    pub depths: Vec<usize>,
    /// Cost regularization weights of the learner family.
    pub lambdas: Vec<f64>,
    pub folds: usize,
    pub alpha_max: f64,
    pub line_search_tol: f64,
    /// Training stops once the best candidate improves risk by no more.
    pub min_improvement: f64,
    pub selector_cost: f64,
    pub prediction_cost: f64,
    /// Centers per feature dictionary.
    pub dictionary_size: usize,
    pub kmeans_iterations: usize,
    /// Cap on descriptors fed to k-means per group.
    pub kmeans_samples: usize,
    pub seed: u64,
    /// Keep every candidate's score for later inspection.
    pub record_candidates: bool,
    /// Keep the stacking provenance log.
    pub record_provenance: bool,
    /// Cost table entries, matched to instance feature groups by name.
    pub groups: Vec<GroupCost>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupCost {
    pub name: String,
    pub base_cost: f64,
    pub per_center_cost: f64,
}

impl GroupCost {
    pub fn defaults() -> Vec<GroupCost> {
        GroupSpec::default_groups()
            .into_iter()
            .map(|g| GroupCost {
                name: g.name,
                base_cost: g.base_cost,
                per_center_cost: g.per_center_cost,
            })
            .collect()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 150,
            thresholds: vec![0.1, 0.3, 0.5, 0.8, 1.2],
            depths: vec![0, 1, 2, 3, 4],
            lambdas: vec![0.0, 0.01, 0.1],
            folds: 10,
            alpha_max: 10.0,
            line_search_tol: 1e-4,
            min_improvement: 1e-9,
            selector_cost: DEFAULT_SELECTOR_COST,
            prediction_cost: DEFAULT_PREDICTION_COST,
            dictionary_size: 16,
            kmeans_iterations: 25,
            kmeans_samples: 20_000,
            seed: 0,
            record_candidates: false,
            record_provenance: false,
            groups: GroupCost::defaults(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if self.thresholds.is_empty() || self.depths.is_empty() || self.lambdas.is_empty() {
            return bad("selector and learner grids must be nonempty");
        }
        if self.thresholds.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return bad("thresholds must be finite and >= 0");
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("lambdas must be finite and >= 0");
        }
        if !(self.alpha_max > 0.0 && self.alpha_max.is_finite()) {
            return bad("alpha_max must be finite and > 0");
        }
        if !(self.line_search_tol > 0.0) {
            return bad("line_search_tol must be > 0");
        }
        if !(self.min_improvement >= 0.0) {
            return bad("min_improvement must be >= 0");
        }
        if !(self.selector_cost >= 0.0 && self.prediction_cost >= 0.0)
            || !(self.selector_cost + self.prediction_cost > 0.0)
            || !(self.selector_cost + self.prediction_cost).is_finite()
        {
            return bad("stage fixed costs must be >= 0 with a positive finite sum");
        }
        if self.dictionary_size == 0 || self.kmeans_samples == 0 {
            return bad("dictionary_size and kmeans_samples must be positive");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Sorted, deduplicated depth grid.
    pub(crate) fn depth_grid(&self) -> Vec<usize> {
        self.depths
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// One boosting stage.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakStage {
    pub selector: EntropySelector,
    pub tree: RegressionTree,
    pub alpha: f64,
    /// Cost `c(h)` at the time the stage was chosen.
    pub cost: f64,
}

/// Why training stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    /// The best candidate at this iteration did not reduce risk enough.
    NoImprovement {
        iteration: usize,
    },
    /// No selector picked any segment at this iteration.
    NoActiveSelector {
        iteration: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub iterations_requested: usize,
    pub termination: Termination,
    pub num_training_instances: usize,
    /// Mean per-instance risk on the training set after the last stage.
    pub final_risk: f64,
    /// Mean per-instance metrics on the training set after the last stage.
    pub final_pixel_accuracy: f64,
    pub final_class_accuracy: f64,
}

/// `f_0` plus an ordered list of stages. Every prefix is a valid model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveModel {
    pub num_classes: usize,
    /// Number of hierarchy levels the selectors were built for.
    pub num_levels: usize,
    pub initial: Vec<f64>,
    pub stages: Vec<WeakStage>,
    pub bank: FeatureBank,
    pub metadata: ModelMetadata,
}

impl AdditiveModel {
    pub fn layout(&self) -> DescriptorLayout {
        self.bank.layout(self.num_classes)
    }

    /// Groups and derived features read by the first `stages` stages.
    pub fn feature_set(&self, stages: usize) -> FeatureSet {
        let mut set = FeatureSet::default();
        for s in self.stages.iter().take(stages) {
            set.union_with(&s.tree.feature_set());
        }
        set
    }

    /// The model truncated to its first `stages` stages.
    pub fn prefix(&self, stages: usize) -> AdditiveModel {
        AdditiveModel {
            stages: self.stages[..stages.min(self.stages.len())].to_vec(),
            ..self.clone()
        }
    }

    pub fn check_instance(&self, instance: &StructuredInstance) -> Result<()> {
        if instance.num_classes() != self.num_classes {
            return Err(Error::Incompatible(format!(
                "model has {} classes, instance has {}",
                self.num_classes,
                instance.num_classes()
            )));
        }
        if instance.hierarchy().num_levels() != self.num_levels {
            return Err(Error::Incompatible(format!(
                "model expects {} hierarchy levels, instance has {}",
                self.num_levels,
                instance.hierarchy().num_levels()
            )));
        }
        self.bank.check_instance(instance)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 2 {
            return Err(Error::Format("model needs at least two classes".into()));
        }
        if self.initial.len() != k || self.initial.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("bad initial scores".into()));
        }
        let width = self.layout().width();
        for (t, s) in self.stages.iter().enumerate() {
            s.selector
                .check_levels(self.num_levels)
                .map_err(|e| Error::Format(format!("stage {t}: {e}")))?;
            if s.tree.num_outputs() != k || s.tree.num_columns() != width {
                return Err(Error::Format(format!("stage {t}: tree does not match layout")));
            }
            if !(s.alpha.is_finite() && s.alpha >= 0.0) || !s.cost.is_finite() {
                return Err(Error::Format(format!("stage {t}: bad alpha or cost")));
            }
        }
        Ok(())
    }
}

impl Metrics {
    /// Mean of per-instance metrics; per-class recall averaged over the
    /// instances where the class is present.
    pub fn mean(items: &[Metrics]) -> Option<Metrics> {
        let first = items.first()?;
        let n = items.len() as f64;
        let k = first.per_class_recall.len();
        let per_class_recall = (0..k)
            .map(|c| {
                let vals: Vec<f64> = items.iter().filter_map(|m| m.per_class_recall[c]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        Some(Metrics {
            pixel_accuracy: items.iter().map(|m| m.pixel_accuracy).sum::<f64>() / n,
            per_class_recall,
            mean_class_recall: items.iter().map(|m| m.mean_class_recall).sum::<f64>() / n,
        })
    }
}
