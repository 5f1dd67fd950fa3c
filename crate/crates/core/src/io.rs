//! Versioned JSON containers for instances and models, plus plain-text
//! label maps.
//!
//! Readers validate everything they build through the same constructors the
//! library uses, so malformed input yields an [`Error`], never a panic.

use serde::{Deserialize, Serialize};

use crate::boosting::{AdditiveModel, ModelMetadata, WeakStage};
use crate::error::{Error, Result};
use crate::features::{FeatureBank, FeatureGroup, FeatureRef};
use crate::hierarchy::SegmentationHierarchy;
use crate::instance::{BaseFeatures, FeatureSource, StructuredInstance};
use crate::selectors::{EntropySelector, LevelScope};
use crate::tree::{RegressionTree, Split, TreeNode, TreeParams};
use crate::types::{LabelField, Matrix};

pub const INSTANCE_FORMAT: &str = "ssboost-instance";
pub const MODEL_FORMAT: &str = "ssboost-model";
pub const FORMAT_VERSION: u32 = 1;

fn check_header(format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected {
        return Err(Error::Format(format!("expected format {expected:?}, found {format:?}")));
    }
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported {expected} version {version}")));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LabelsDoc {
    /// One class index per pixel.
    Classes { classes: Vec<usize> },
    /// Row-major `pixels x K` distributions.
    Distributions { probs: Vec<f64> },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupDoc {
    name: String,
    dim: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceDoc {
    format: String,
    version: u32,
    width: usize,
    height: usize,
    num_classes: usize,
    labels: LabelsDoc,
    /// Segment label map per level, coarse to fine.
    hierarchy: Vec<Vec<u32>>,
    features: Vec<GroupDoc>,
}

pub fn instance_to_json(instance: &StructuredInstance) -> String {
    let labels = match instance.labels().as_one_hot() {
        Some(classes) => LabelsDoc::Classes { classes },
        None => LabelsDoc::Distributions {
            probs: instance.labels().matrix().as_slice().to_vec(),
        },
    };
    let h = instance.hierarchy();
    let doc = InstanceDoc {
        format: INSTANCE_FORMAT.into(),
        version: FORMAT_VERSION,
        width: instance.width(),
        height: instance.height(),
        num_classes: instance.num_classes(),
        labels,
        hierarchy: (0..h.num_levels()).map(|l| h.membership(l).to_vec()).collect(),
        features: instance
            .features()
            .groups
            .iter()
            .map(|g| GroupDoc {
                name: g.name.clone(),
                dim: g.dim,
                values: g.values.clone(),
            })
            .collect(),
    };
    serde_json::to_string(&doc).expect("instance serializes")
}

pub fn instance_from_json(text: &str) -> Result<StructuredInstance> {
    let doc: InstanceDoc = serde_json::from_str(text)?;
    check_header(&doc.format, doc.version, INSTANCE_FORMAT)?;
    let npix = doc
        .width
        .checked_mul(doc.height)
        .ok_or_else(|| Error::Format("grid too large".into()))?;
    let k = doc.num_classes;
    let labels = match doc.labels {
        LabelsDoc::Classes { classes } => {
            if classes.len() != npix {
                return Err(Error::Format("label count does not match grid".into()));
            }
            LabelField::from_classes(k, &classes)?
        }
        LabelsDoc::Distributions { probs } => {
            if k == 0 || npix.checked_mul(k) != Some(probs.len()) {
                return Err(Error::Format("label buffer does not match grid".into()));
            }
            LabelField::from_matrix(Matrix::from_vec(npix, k, probs)?)?
        }
    };
    let hierarchy = SegmentationHierarchy::from_label_maps(doc.width, doc.height, doc.hierarchy)?;
    let groups = doc
        .features
        .into_iter()
        .map(|g| BaseFeatures {
            name: g.name,
            dim: g.dim,
            values: g.values,
        })
        .collect();
    StructuredInstance::new(labels, hierarchy, FeatureSource { groups })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DictionaryDoc {
    name: String,
    base_dim: usize,
    base_cost: f64,
    per_center_cost: f64,
    centers: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitDoc {
    feature: FeatureRef,
    threshold: f64,
    left: usize,
    right: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    value: Vec<f64>,
    weight: f64,
    split: Option<SplitDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeDoc {
    depth_limit: usize,
    lambda: f64,
    prediction_cost: f64,
    nodes: Vec<NodeDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageDoc {
    threshold: f64,
    scope: LevelScope,
    selector_cost: f64,
    alpha: f64,
    cost: f64,
    tree: TreeDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format: String,
    version: u32,
    num_classes: usize,
    num_levels: usize,
    initial: Vec<f64>,
    dictionaries: Vec<DictionaryDoc>,
    stages: Vec<StageDoc>,
    metadata: ModelMetadata,
}

pub fn model_to_json(model: &AdditiveModel) -> String {
    let doc = ModelDoc {
        format: MODEL_FORMAT.into(),
        version: FORMAT_VERSION,
        num_classes: model.num_classes,
        num_levels: model.num_levels,
        initial: model.initial.clone(),
        dictionaries: model
            .bank
            .groups
            .iter()
            .map(|g| DictionaryDoc {
                name: g.name.clone(),
                base_dim: g.base_dim,
                base_cost: g.base_cost,
                per_center_cost: g.per_center_cost,
                centers: g.centers().to_vec(),
            })
            .collect(),
        stages: model
            .stages
            .iter()
            .map(|s| {
                let p = s.tree.params();
                StageDoc {
                    threshold: s.selector.threshold,
                    scope: s.selector.scope,
                    selector_cost: s.selector.cost,
                    alpha: s.alpha,
                    cost: s.cost,
                    tree: TreeDoc {
                        depth_limit: p.depth_limit,
                        lambda: p.lambda,
                        prediction_cost: p.prediction_cost,
                        nodes: s
                            .tree
                            .nodes()
                            .iter()
                            .map(|n| NodeDoc {
                                value: n.value.clone(),
                                weight: n.weight,
                                split: n.split.as_ref().map(|sp| SplitDoc {
                                    feature: sp.feature,
                                    threshold: sp.threshold,
                                    left: sp.left,
                                    right: sp.right,
                                }),
                            })
                            .collect(),
                    },
                }
            })
            .collect(),
        metadata: model.metadata.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("model serializes")
}

pub fn model_from_json(text: &str) -> Result<AdditiveModel> {
    let doc: ModelDoc = serde_json::from_str(text)?;
    check_header(&doc.format, doc.version, MODEL_FORMAT)?;
    let groups = doc
        .dictionaries
        .into_iter()
        .map(|d| FeatureGroup::new(d.name, d.base_dim, d.base_cost, d.per_center_cost, d.centers))
        .collect::<Result<Vec<_>>>()?;
    let bank = FeatureBank { groups };
    let layout = bank.layout(doc.num_classes);
    let mut stages = Vec::with_capacity(doc.stages.len());
    for s in doc.stages {
        let selector = EntropySelector::new(s.threshold, s.scope, s.selector_cost)?;
        let params = TreeParams {
            depth_limit: s.tree.depth_limit,
            lambda: s.tree.lambda,
            prediction_cost: s.tree.prediction_cost,
        };
        crate::tree::validate_params(params)?;
        let nodes = s
            .tree
            .nodes
            .into_iter()
            .map(|n| TreeNode {
                value: n.value,
                weight: n.weight,
                split: n.split.map(|sp| Split {
                    feature: sp.feature,
                    column: 0,
                    threshold: sp.threshold,
                    left: sp.left,
                    right: sp.right,
                }),
            })
            .collect();
        let tree = RegressionTree::from_nodes(&layout, doc.num_classes, params, nodes)?;
        stages.push(WeakStage {
            selector,
            tree,
            alpha: s.alpha,
            cost: s.cost,
        });
    }
    let model = AdditiveModel {
        num_classes: doc.num_classes,
        num_levels: doc.num_levels,
        initial: doc.initial,
        stages,
        bank,
        metadata: doc.metadata,
    };
    model.validate()?;
    Ok(model)
}

/// One line per image row of space-separated integers.
pub fn label_map_to_text(width: usize, labels: &[usize]) -> String {
    let mut out = String::with_capacity(labels.len() * 2);
    for row in labels.chunks(width.max(1)) {
        let line: Vec<String> = row.iter().map(usize::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Parses a label map into `(width, height, labels)`. Rows must all have
/// the same nonzero length.
pub fn parse_label_map(text: &str) -> Result<(usize, usize, Vec<usize>)> {
    let mut width = None;
    let mut labels = Vec::new();
    let mut height = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::Format(format!("line {}: bad label {t:?}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Format(format!(
                    "line {} has {} labels, expected {w}",
                    i + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        labels.extend(row);
        height += 1;
    }
    let width = width.ok_or(Error::Empty("label map"))?;
    Ok((width, height, labels))
}
