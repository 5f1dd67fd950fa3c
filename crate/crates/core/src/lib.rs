//! Anytime structured prediction by cost-greedy functional gradient boosting.
//!
//! A model is an initial constant score per class followed by weak stages.
//! Each stage picks high-entropy segments of a segmentation hierarchy and
//! adds a regression tree's output to their scores. Stages are chosen during
//! training by risk reduction per unit of feature and evaluation cost, so
//! evaluating any prefix of the model under a budget gives a usable
//! prediction that improves as the budget grows.
//!
//! Main entry points:
//!
//! * [`scene::generate_scene`] builds synthetic instances.
//! * [`boosting::train`] fits an [`boosting::AdditiveModel`].
//! * [`runtime::infer`] runs a model under a [`runtime::Budget`].
//! * [`runtime::profile_corpus`] traces accuracy against cost.
//! * [`io`] reads and writes instances and models.

pub mod boosting;
pub mod cells;
pub mod error;
pub mod features;
pub mod hierarchy;
pub mod instance;
pub mod io;
pub mod kmeans;
pub mod loss;
pub mod runtime;
pub mod scene;
pub mod selectors;
pub mod tree;
pub mod types;

pub use boosting::{train, AdditiveModel, TrainConfig, WeakStage};
pub use error::{Error, Result};
pub use features::{soft_vq_code, FeatureBank, FeatureGroup, FeatureRef, FeatureSet};
pub use hierarchy::{build_quadtree_hierarchy, SegmentId, SegmentationHierarchy};
pub use instance::StructuredInstance;
pub use loss::{cross_entropy_risk, descent_direction, mean_entropy, softmax};
pub use runtime::{evaluate, infer, profile_corpus, Budget, CostLedger, Metrics};
pub use scene::{generate_scene, SyntheticSceneConfig};
pub use selectors::{enumerate_selectors, select, EntropySelector, LevelScope};
pub use tree::{predict_tree, train_tree, tree_cost, RegressionTree, TreeParams, TreeSample};
pub use types::{ClassDistribution, LabelField, Matrix, ScoreField};
