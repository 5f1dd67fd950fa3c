//! Cost-regularized vector-valued regression trees.
//!
//! Trees are grown greedily in level order. A candidate split is scored by
//! its weighted squared-error reduction minus `lambda` times the cost of any
//! feature it would newly buy, given the features the model has already
//! paid for and those used by nodes expanded earlier in this tree. A split
//! is taken only if that net score is positive. Leaves hold the weighted
//! mean target of the samples reaching them.
//!
//! Because expansion is level-ordered, the tree trained with depth limit `d`
//! is exactly the depth-`d` truncation of any deeper tree trained on the same
//! data with the same `lambda` (see [`RegressionTree::truncated`]).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::features::{CostTable, DescriptorLayout, FeatureRef, FeatureSet};

/// Default fixed cost of evaluating a prediction function.
pub const DEFAULT_PREDICTION_COST: f64 = 1.0;

/// Splits whose net score does not exceed this fraction of the node's
/// weighted target energy are treated as rounding noise.
const SPLIT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub depth_limit: usize,
    pub lambda: f64,
    pub prediction_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub feature: FeatureRef,
    pub column: usize,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    /// Weighted mean target of the training samples at this node.
    pub value: Vec<f64>,
    pub weight: f64,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    pub(crate) num_outputs: usize,
    pub(crate) num_columns: usize,
    pub(crate) nodes: Vec<TreeNode>,
    pub(crate) params: TreeParams,
}

/// One weighted regression sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeSample {
    pub descriptor: Vec<f64>,
    pub target: Vec<f64>,
    pub weight: f64,
}

impl RegressionTree {
    /// Builds a tree from explicit nodes, checking structure against the
    /// layout. Node 0 is the root; children must come after their parent.
    pub fn from_nodes(
        layout: &DescriptorLayout,
        num_outputs: usize,
        params: TreeParams,
        mut nodes: Vec<TreeNode>,
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Empty("tree"));
        }
        let n = nodes.len();
        let mut parents = vec![0usize; n];
        for i in 0..n {
            let node = &mut nodes[i];
            ensure_dims("leaf width", num_outputs, node.value.len())?;
            if node.value.iter().any(|v| !v.is_finite()) || !node.weight.is_finite() {
                return Err(Error::Format("non-finite tree node".into()));
            }
            if let Some(split) = &mut node.split {
                split.column = layout
                    .column(split.feature)
                    .ok_or_else(|| Error::Format(format!("feature {:?} not in layout", split.feature)))?;
                if !split.threshold.is_finite() {
                    return Err(Error::Format("non-finite threshold".into()));
                }
                for child in [split.left, split.right] {
                    if child <= i || child >= n {
                        return Err(Error::Format(format!("node {i} has bad child {child}")));
                    }
                    if parents[child] != 0 {
                        return Err(Error::Format(format!("node {child} has two parents")));
                    }
                    parents[child] = i + 1;
                }
                if split.left == split.right {
                    return Err(Error::Format(format!("node {i} splits into one child")));
                }
            }
        }
        if parents.iter().skip(1).any(|&p| p == 0) {
            return Err(Error::Format("unreachable tree node".into()));
        }
        let tree = Self {
            num_outputs,
            num_columns: layout.width(),
            nodes,
            params,
        };
        if tree.depth() > params.depth_limit {
            return Err(Error::Format("tree deeper than its depth limit".into()));
        }
        Ok(tree)
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn params(&self) -> TreeParams {
        self.params
    }

    pub fn num_outputs(&self) -> usize {
        self.num_outputs
    }

    pub fn num_columns(&self) -> usize {
        self.num_columns
    }

    /// Depth of the deepest leaf; a single leaf has depth 0.
    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        let mut max = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(s) = &node.split {
                depth[s.left] = depth[i] + 1;
                depth[s.right] = depth[i] + 1;
                max = max.max(depth[i] + 1);
            }
        }
        max
    }

    /// Every feature referenced by an internal node.
    pub fn used_features(&self) -> BTreeSet<FeatureRef> {
        self.nodes
            .iter()
            .filter_map(|n| n.split.as_ref().map(|s| s.feature))
            .collect()
    }

    /// Groups and derived features the tree reads.
    pub fn feature_set(&self) -> FeatureSet {
        let mut set = FeatureSet::default();
        for f in self.used_features() {
            if let Some((g, c)) = f.center() {
                set.groups.insert(g);
                set.centers.insert((g, c));
            }
        }
        set
    }

    /// Follows splits using lazily provided feature values; returns the leaf
    /// index.
    pub fn route<F>(&self, mut value: F) -> Result<usize>
    where
        F: FnMut(FeatureRef, usize) -> Result<f64>,
    {
        let mut i = 0;
        while let Some(s) = &self.nodes[i].split {
            i = if value(s.feature, s.column)? <= s.threshold {
                s.left
            } else {
                s.right
            };
        }
        Ok(i)
    }

    pub fn leaf_value(&self, leaf: usize) -> &[f64] {
        &self.nodes[leaf].value
    }

    /// The same tree cut at `depth`: nodes at that depth become leaves.
    pub fn truncated(&self, depth: usize) -> RegressionTree {
        let mut nodes: Vec<TreeNode> = Vec::new();
        // (source index, depth)
        let mut queue = std::collections::VecDeque::from([(0usize, 0usize)]);
        let mut slots = Vec::new();
        while let Some((src, d)) = queue.pop_front() {
            let node = &self.nodes[src];
            let id = nodes.len();
            slots.push(id);
            let split = match (&node.split, d < depth) {
                (Some(s), true) => {
                    queue.push_back((s.left, d + 1));
                    queue.push_back((s.right, d + 1));
                    Some(s.clone())
                }
                _ => None,
            };
            nodes.push(TreeNode {
                value: node.value.clone(),
                weight: node.weight,
                split,
            });
        }
        // children were enqueued in order, so renumber by BFS position
        let mut next = 1;
        for node in &mut nodes {
            if let Some(s) = &mut node.split {
                s.left = next;
                s.right = next + 1;
                next += 2;
            }
        }
        RegressionTree {
            num_outputs: self.num_outputs,
            num_columns: self.num_columns,
            nodes,
            params: TreeParams {
                depth_limit: depth,
                ..self.params
            },
        }
    }
}

/// Output of the tree for a full descriptor.
pub fn predict_tree(tree: &RegressionTree, descriptor: &[f64]) -> Result<Vec<f64>> {
    ensure_dims("descriptor width", tree.num_columns, descriptor.len())?;
    let leaf = tree.route(|_, col| Ok(descriptor[col]))?;
    Ok(tree.leaf_value(leaf).to_vec())
}

/// `epsilon_P` plus the group and derived-feature costs the tree adds on top
/// of `model_features`.
pub fn tree_cost(tree: &RegressionTree, model_features: &FeatureSet, costs: &CostTable) -> f64 {
    tree.params.prediction_cost + tree.feature_set().incremental_cost(model_features, costs)
}

/// Column-major training data with per-column ascending sample orders.
#[derive(Debug, Clone)]
pub(crate) struct DenseDataset {
    pub n: usize,
    pub k: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub order: Vec<Vec<u32>>,
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
}

impl DenseDataset {
    #[inline]
    fn value(&self, col: usize, i: usize) -> f64 {
        self.values[col * self.n + i]
    }

    /// Sorts every column from scratch.
    pub fn sort_all(&mut self) {
        self.order = (0..self.cols)
            .map(|col| {
                let vals = &self.values[col * self.n..(col + 1) * self.n];
                let mut idx: Vec<u32> = (0..self.n as u32).collect();
                idx.sort_by(|&a, &b| vals[a as usize].total_cmp(&vals[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
    }
}

pub fn train_tree(
    samples: &[TreeSample],
    layout: &DescriptorLayout,
    params: TreeParams,
    paid: &FeatureSet,
    costs: &CostTable,
) -> Result<RegressionTree> {
    let first = samples.first().ok_or(Error::Empty("dataset"))?;
    let k = first.target.len();
    if k == 0 {
        return Err(Error::Empty("target"));
    }
    let cols = layout.width();
    let n = samples.len();
    let mut values = vec![0.0; cols * n];
    let mut targets = Vec::with_capacity(n * k);
    let mut weights = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        ensure_dims("descriptor width", cols, s.descriptor.len())?;
        ensure_dims("target width", k, s.target.len())?;
        if !(s.weight > 0.0 && s.weight.is_finite()) {
            return Err(Error::InvalidInput(format!("sample weight {} must be > 0", s.weight)));
        }
        if s.descriptor.iter().chain(&s.target).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite sample".into()));
        }
        for (c, &v) in s.descriptor.iter().enumerate() {
            values[c * n + i] = v;
        }
        targets.extend_from_slice(&s.target);
        weights.push(s.weight);
    }
    validate_params(params)?;
    let mut ds = DenseDataset {
        n,
        k,
        cols,
        values,
        order: Vec::new(),
        targets,
        weights,
    };
    ds.sort_all();
    Ok(grow(&ds, layout, params, paid, costs))
}

pub(crate) fn validate_params(params: TreeParams) -> Result<()> {
    if !(params.lambda >= 0.0 && params.lambda.is_finite()) {
        return Err(Error::InvalidInput("lambda must be finite and >= 0".into()));
    }
    if !(params.prediction_cost >= 0.0 && params.prediction_cost.is_finite()) {
        return Err(Error::InvalidInput("prediction cost must be finite and >= 0".into()));
    }
    Ok(())
}

#[derive(Clone)]
struct NodeStats {
    w: f64,
    s: Vec<f64>,
    energy: f64,
}

impl NodeStats {
    fn new(k: usize) -> Self {
        Self {
            w: 0.0,
            s: vec![0.0; k],
            energy: 0.0,
        }
    }

    fn add(&mut self, w: f64, y: &[f64]) {
        self.w += w;
        for (a, b) in self.s.iter_mut().zip(y) {
            *a += w * b;
            self.energy += w * b * b;
        }
    }

    fn mean(&self) -> Vec<f64> {
        self.s.iter().map(|v| v / self.w).collect()
    }

    fn score(&self) -> f64 {
        sq(&self.s) / self.w
    }
}

#[inline]
fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

#[inline]
fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m < b {
        m
    } else {
        a
    }
}

/// Incremental cost of reading `feature` given what is already paid.
#[inline]
fn feature_cost(feature: FeatureRef, paid: &FeatureSet, used: &FeatureSet, costs: &CostTable) -> f64 {
    match feature.center() {
        None => 0.0,
        Some((g, c)) => {
            let mut cost = 0.0;
            if !paid.groups.contains(&g) && !used.groups.contains(&g) {
                cost += costs.base[g];
            }
            if !paid.centers.contains(&(g, c)) && !used.centers.contains(&(g, c)) {
                cost += costs.per_center[g];
            }
            cost
        }
    }
}

pub(crate) fn grow(
    ds: &DenseDataset,
    layout: &DescriptorLayout,
    params: TreeParams,
    paid: &FeatureSet,
    costs: &CostTable,
) -> RegressionTree {
    let (n, k) = (ds.n, ds.k);
    let column_features: Vec<FeatureRef> = (0..ds.cols)
        .map(|c| layout.feature(c).expect("column within layout"))
        .collect();

    let mut root = NodeStats::new(k);
    for i in 0..n {
        root.add(ds.weights[i], &ds.targets[i * k..(i + 1) * k]);
    }
    let mut nodes = vec![TreeNode {
        value: root.mean(),
        weight: root.w,
        split: None,
    }];
    let mut stats = vec![root];
    let mut node_of = vec![0u32; n];
    let mut frontier: Vec<usize> = vec![0];
    let mut used = FeatureSet::default();

    for _depth in 0..params.depth_limit {
        if frontier.is_empty() {
            break;
        }
        let mut slot_of = vec![u32::MAX; nodes.len()];
        for (s, &node) in frontier.iter().enumerate() {
            slot_of[node] = s as u32;
        }
        let nf = frontier.len();
        // best[slot * cols + col] = (gain, threshold)
        let mut best = vec![(f64::NEG_INFINITY, 0.0f64); nf * ds.cols];
        let mut left: Vec<NodeStats> = vec![NodeStats::new(k); nf];
        let mut last = vec![0.0f64; nf];
        let mut seen = vec![false; nf];
        for col in 0..ds.cols {
            for s in 0..nf {
                left[s].w = 0.0;
                left[s].s.iter_mut().for_each(|v| *v = 0.0);
                seen[s] = false;
            }
            for &i in &ds.order[col] {
                let i = i as usize;
                let slot = slot_of[node_of[i] as usize];
                if slot == u32::MAX {
                    continue;
                }
                let slot = slot as usize;
                let v = ds.value(col, i);
                if seen[slot] && v > last[slot] {
                    let total = &stats[frontier[slot]];
                    let l = &left[slot];
                    let wr = total.w - l.w;
                    let mut sr2 = 0.0;
                    for (a, b) in total.s.iter().zip(&l.s) {
                        sr2 += (a - b) * (a - b);
                    }
                    let gain = sq(&l.s) / l.w + sr2 / wr - total.score();
                    let b = &mut best[slot * ds.cols + col];
                    if gain > b.0 {
                        *b = (gain, midpoint(last[slot], v));
                    }
                }
                let w = ds.weights[i];
                let y = &ds.targets[i * k..(i + 1) * k];
                let l = &mut left[slot];
                l.w += w;
                for (a, b) in l.s.iter_mut().zip(y) {
                    *a += w * b;
                }
                last[slot] = v;
                seen[slot] = true;
            }
        }

        let mut split_of: Vec<Option<(usize, f64, usize, usize)>> = vec![None; nf];
        let mut next_frontier = Vec::new();
        for (slot, &node) in frontier.iter().enumerate() {
            let mut choice: Option<(usize, f64, f64)> = None;
            for col in 0..ds.cols {
                let (gain, thr) = best[slot * ds.cols + col];
                if gain == f64::NEG_INFINITY {
                    continue;
                }
                let net = gain - params.lambda * feature_cost(column_features[col], paid, &used, costs);
                if choice.map_or(true, |(_, _, b)| net > b) {
                    choice = Some((col, thr, net));
                }
            }
            let Some((col, thr, net)) = choice else { continue };
            if !(net > SPLIT_TOLERANCE * stats[node].energy) {
                continue;
            }
            let l = nodes.len();
            let r = l + 1;
            if let Some((g, c)) = column_features[col].center() {
                used.groups.insert(g);
                used.centers.insert((g, c));
            }
            nodes[node].split = Some(Split {
                feature: column_features[col],
                column: col,
                threshold: thr,
                left: l,
                right: r,
            });
            for _ in 0..2 {
                nodes.push(TreeNode {
                    value: vec![0.0; k],
                    weight: 0.0,
                    split: None,
                });
                stats.push(NodeStats::new(k));
            }
            split_of[slot] = Some((col, thr, l, r));
            next_frontier.push(l);
            next_frontier.push(r);
        }

        for i in 0..n {
            let slot = slot_of[node_of[i] as usize];
            if slot == u32::MAX {
                continue;
            }
            match split_of[slot as usize] {
                Some((col, thr, l, r)) => {
                    let child = if ds.value(col, i) <= thr { l } else { r };
                    node_of[i] = child as u32;
                    stats[child].add(ds.weights[i], &ds.targets[i * k..(i + 1) * k]);
                }
                // the node stays a leaf and leaves the frontier
                None => {}
            }
        }
        for &c in &next_frontier {
            nodes[c].value = stats[c].mean();
            nodes[c].weight = stats[c].w;
        }
        frontier = next_frontier;
    }

    RegressionTree {
        num_outputs: k,
        num_columns: ds.cols,
        nodes,
        params,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout(num_classes: usize, centers: Vec<usize>) -> DescriptorLayout {
        DescriptorLayout {
            num_classes,
            centers_per_group: centers,
        }
    }

    fn costs() -> CostTable {
        CostTable {
            base: vec![29.0, 64.0],
            per_center: vec![0.44, 265.0 / 150.0],
        }
    }

    fn params(depth: usize, lambda: f64) -> TreeParams {
        TreeParams {
            depth_limit: depth,
            lambda,
            prediction_cost: 1.0,
        }
    }

    fn random_samples(rng: &mut ChaCha8Rng, n: usize, lay: &DescriptorLayout, k: usize) -> Vec<TreeSample> {
        (0..n)
            .map(|_| TreeSample {
                descriptor: (0..lay.width()).map(|_| rng.gen_range(0.0..1.0)).collect(),
                target: (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                weight: rng.gen_range(1..20) as f64,
            })
            .collect()
    }

    #[test]
    fn depth_zero_is_weighted_mean() {
        let lay = layout(2, vec![1]);
        let mk = |w: f64, t: Vec<f64>| TreeSample {
            descriptor: vec![0.0; lay.width()],
            target: t,
            weight: w,
        };
        let samples = vec![mk(3.0, vec![1.0, 0.0]), mk(1.0, vec![0.0, 1.0])];
        let tree = train_tree(&samples, &lay, params(0, 0.0), &FeatureSet::default(), &costs()).unwrap();
        assert_eq!(tree.nodes().len(), 1);
        assert_eq!(tree.leaf_value(0), &[0.75, 0.25]);
        let out = predict_tree(&tree, &vec![5.0; lay.width()]).unwrap();
        assert_eq!(out, vec![0.75, 0.25]);
    }

    #[test]
    fn huge_lambda_buys_nothing() {
        // only code columns carry signal; shape and context are constant
        let lay = layout(2, vec![3, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<TreeSample> = (0..40)
            .map(|i| {
                let mut d = vec![0.0; lay.width()];
                for c in 5..10 {
                    d[c] = rng.gen_range(0.0..1.0);
                }
                let t = if d[5] > 0.5 { vec![1.0, -1.0] } else { vec![-1.0, 1.0] };
                TreeSample {
                    descriptor: d,
                    target: t,
                    weight: 1.0 + (i % 3) as f64,
                }
            })
            .collect();
        let tree = train_tree(&samples, &lay, params(4, 1e9), &FeatureSet::default(), &costs()).unwrap();
        assert_eq!(tree.depth(), 0);
        let free = train_tree(&samples, &lay, params(4, 0.0), &FeatureSet::default(), &costs()).unwrap();
        assert!(free.depth() > 0);
        // already-paid features are free even under a huge lambda
        let paid = free.feature_set();
        let again = train_tree(&samples, &lay, params(4, 1e9), &paid, &costs()).unwrap();
        assert!(again.depth() > 0);
    }

    #[test]
    fn rejects_bad_datasets() {
        let lay = layout(2, vec![1]);
        let p = params(2, 0.0);
        assert!(matches!(
            train_tree(&[], &lay, p, &FeatureSet::default(), &costs()),
            Err(Error::Empty(_))
        ));
        let bad = TreeSample {
            descriptor: vec![0.0; lay.width()],
            target: vec![1.0, 0.0],
            weight: 0.0,
        };
        assert!(train_tree(&[bad], &lay, p, &FeatureSet::default(), &costs()).is_err());
        let short = TreeSample {
            descriptor: vec![0.0; 3],
            target: vec![1.0, 0.0],
            weight: 1.0,
        };
        assert!(train_tree(&[short], &lay, p, &FeatureSet::default(), &costs()).is_err());
    }

    #[test]
    fn predict_checks_layout() {
        let lay = layout(2, vec![1]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_samples(&mut rng, 10, &lay, 2);
        let tree = train_tree(&s, &lay, params(2, 0.0), &FeatureSet::default(), &costs()).unwrap();
        assert!(predict_tree(&tree, &[0.0; 2]).is_err());
    }

    /// Exhaustive search for the best root split: every column, every
    /// midpoint between consecutive distinct values, SSE computed directly.
    fn brute_force_root(samples: &[TreeSample], lambda: f64, lay: &DescriptorLayout) -> Option<(usize, f64)> {
        let k = samples[0].target.len();
        let sse = |set: &[&TreeSample]| -> f64 {
            let w: f64 = set.iter().map(|s| s.weight).sum();
            let mean: Vec<f64> = (0..k)
                .map(|c| set.iter().map(|s| s.weight * s.target[c]).sum::<f64>() / w)
                .collect();
            set.iter()
                .map(|s| s.weight * s.target.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum()
        };
        let all: Vec<&TreeSample> = samples.iter().collect();
        let base = sse(&all);
        let mut best: Option<(usize, f64, f64)> = None;
        for col in 0..lay.width() {
            let mut vals: Vec<f64> = samples.iter().map(|s| s.descriptor[col]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            let cost = match lay.feature(col).unwrap().center() {
                Some((g, _)) => costs().base[g] + costs().per_center[g],
                None => 0.0,
            };
            for pair in vals.windows(2) {
                let thr = pair[0] + (pair[1] - pair[0]) / 2.0;
                let (l, r): (Vec<&TreeSample>, Vec<&TreeSample>) =
                    samples.iter().partition(|s| s.descriptor[col] <= thr);
                let net = base - sse(&l) - sse(&r) - lambda * cost;
                if best.map_or(true, |b| net > b.2 + 1e-9) {
                    best = Some((col, thr, net));
                }
            }
        }
        best.filter(|b| b.2 > 0.0).map(|b| (b.0, b.1))
    }

    #[test]
    fn root_split_matches_exhaustive_search() {
        let lay = layout(2, vec![3, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..25 {
            let samples = random_samples(&mut rng, 50, &lay, 3);
            for lambda in [0.0, 0.05] {
                let tree = train_tree(&samples, &lay, params(2, lambda), &FeatureSet::default(), &costs()).unwrap();
                let got = tree.nodes()[0].split.as_ref().map(|s| (s.column, s.threshold));
                assert_eq!(got, brute_force_root(&samples, lambda, &lay));
            }
        }
    }

    #[test]
    fn pure_leaves_reproduce_targets() {
        let lay = layout(2, vec![1]);
        let samples: Vec<TreeSample> = (0..8)
            .map(|i| {
                let mut d = vec![0.0; lay.width()];
                d[0] = i as f64;
                TreeSample {
                    descriptor: d,
                    target: vec![i as f64, -(i as f64)],
                    weight: 1.0,
                }
            })
            .collect();
        let tree = train_tree(&samples, &lay, params(3, 0.0), &FeatureSet::default(), &costs()).unwrap();
        for s in &samples {
            assert_eq!(predict_tree(&tree, &s.descriptor).unwrap(), s.target);
        }
    }

    /// Independent traversal over the node list.
    fn reference_predict(tree: &RegressionTree, lay: &DescriptorLayout, d: &[f64]) -> Vec<f64> {
        let mut node = &tree.nodes()[0];
        loop {
            match &node.split {
                None => return node.value.clone(),
                Some(s) => {
                    let col = lay.column(s.feature).unwrap();
                    node = if d[col] <= s.threshold {
                        &tree.nodes()[s.left]
                    } else {
                        &tree.nodes()[s.right]
                    };
                }
            }
        }
    }

    #[test]
    fn prediction_matches_reference_traversal() {
        let lay = layout(3, vec![4]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples = random_samples(&mut rng, 60, &lay, 3);
        let tree = train_tree(&samples, &lay, params(4, 0.0), &FeatureSet::default(), &costs()).unwrap();
        for _ in 0..200 {
            let d: Vec<f64> = (0..lay.width()).map(|_| rng.gen_range(-0.2..1.2)).collect();
            assert_eq!(predict_tree(&tree, &d).unwrap(), reference_predict(&tree, &lay, &d));
        }
    }

    #[test]
    fn truncation_equals_shallower_training() {
        let lay = layout(2, vec![3, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let samples = random_samples(&mut rng, 40, &lay, 2);
            for lambda in [0.0, 0.01, 0.1] {
                let deep = train_tree(&samples, &lay, params(4, lambda), &FeatureSet::default(), &costs()).unwrap();
                for d in 0..4 {
                    let shallow =
                        train_tree(&samples, &lay, params(d, lambda), &FeatureSet::default(), &costs()).unwrap();
                    assert_eq!(deep.truncated(d), shallow);
                }
            }
        }
    }

    #[test]
    fn used_features_match_predicted_paths() {
        let lay = layout(2, vec![3, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let samples = random_samples(&mut rng, 30, &lay, 2);
        let tree = train_tree(&samples, &lay, params(3, 0.0), &FeatureSet::default(), &costs()).unwrap();
        let mut touched = BTreeSet::new();
        for s in &samples {
            tree.route(|f, col| {
                touched.insert(f);
                Ok(s.descriptor[col])
            })
            .unwrap();
        }
        assert_eq!(touched, tree.used_features());
    }

    #[test]
    fn cost_counts_each_feature_once() {
        let lay = layout(2, vec![3, 2]);
        let code = FeatureRef::Code { group: 0, center: 1 };
        let code2 = FeatureRef::Code { group: 0, center: 2 };
        let leaf = |v: f64| TreeNode {
            value: vec![v, -v],
            weight: 1.0,
            split: None,
        };
        let node = |f: FeatureRef, l: usize, r: usize| TreeNode {
            value: vec![0.0, 0.0],
            weight: 2.0,
            split: Some(Split {
                feature: f,
                column: 0,
                threshold: 0.5,
                left: l,
                right: r,
            }),
        };
        // the same center at two nodes, plus a second center
        let nodes = vec![
            node(code, 1, 2),
            node(code, 3, 4),
            node(code2, 5, 6),
            leaf(1.0),
            leaf(2.0),
            leaf(3.0),
            leaf(4.0),
        ];
        let tree = RegressionTree::from_nodes(&lay, 2, params(2, 0.0), nodes).unwrap();
        let c = tree_cost(&tree, &FeatureSet::default(), &costs());
        assert!((c - (1.0 + 29.0 + 0.88)).abs() < 1e-12);
        let paid = tree.feature_set();
        assert_eq!(tree_cost(&tree, &paid, &costs()), 1.0);
    }

    #[test]
    fn from_nodes_rejects_malformed_trees() {
        let lay = layout(2, vec![1]);
        let leaf = TreeNode {
            value: vec![0.0, 0.0],
            weight: 1.0,
            split: None,
        };
        let cyclic = TreeNode {
            split: Some(Split {
                feature: FeatureRef::Shape { index: 0 },
                column: 0,
                threshold: 0.0,
                left: 0,
                right: 1,
            }),
            ..leaf.clone()
        };
        assert!(RegressionTree::from_nodes(&lay, 2, params(3, 0.0), vec![cyclic, leaf.clone()]).is_err());
        let orphan = vec![leaf.clone(), leaf.clone()];
        assert!(RegressionTree::from_nodes(&lay, 2, params(3, 0.0), orphan).is_err());
        let bad_feature = TreeNode {
            split: Some(Split {
                feature: FeatureRef::Code { group: 3, center: 0 },
                column: 0,
                threshold: 0.0,
                left: 1,
                right: 2,
            }),
            ..leaf.clone()
        };
        assert!(RegressionTree::from_nodes(&lay, 2, params(3, 0.0), vec![bad_feature, leaf.clone(), leaf]).is_err());
    }
}
