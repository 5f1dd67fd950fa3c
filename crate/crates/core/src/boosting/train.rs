//! The training loop.
//!
//! Scores are tracked per cell (see [`crate::cells`]). Two score states are
//! kept per training instance:
//!
//! * `main`: the model being trained, evaluated on the instance as it would
//!   be at test time. Step sizes and risk reductions are measured on it, so
//!   the reported training risk is exactly that of the returned model.
//! * `stacked`: held-out predictions. Instance `x` in fold `a` carries the
//!   scores of an auxiliary model that never saw fold `a`. Gradient datasets
//!   (selections, targets and context features) are built from these.
//!
//! Each auxiliary model starts from label frequencies of the other folds
//! and, every iteration, refits the chosen (selector, learner) pair on the
//! other folds' stacked data with its own step size.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::search::{golden_section, speedboost_select, CandidateScore, LineSearch};
use super::{AdditiveModel, ModelMetadata, Termination, TrainConfig, WeakStage};
use crate::cells::{CellGeometry, CellScores, CellView};
use crate::error::{Error, Result};
use crate::features::{
    code_map, pool, region_descriptor, shape_features, CostTable, DescriptorLayout, FeatureBank, FeatureCache,
    FeatureSet, GroupSpec, NUM_SHAPE_FEATURES,
};
use crate::instance::StructuredInstance;
use crate::kmeans::KMeansParams;
use crate::loss::softmax_into;
use crate::runtime::Metrics;
use crate::selectors::{enumerate_selectors, select, select_from_entropies, EntropySelector, Selection};
use crate::tree::{grow, tree_cost, DenseDataset, RegressionTree, TreeParams, TreeSample};
use crate::types::ScoreField;

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub selector: EntropySelector,
    pub depth: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub delta_risk: f64,
    pub stage_cost: f64,
    pub ratio: f64,
    /// Mean per-instance training risk after the stage.
    pub risk: f64,
    pub candidates: usize,
}

/// Score of one enumerated candidate at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRecord {
    pub selector: usize,
    pub depth: usize,
    pub lambda: f64,
    pub tree: RegressionTree,
    pub alpha: f64,
    pub score: CandidateScore,
}

/// Which model produced which stacked predictions, and what each auxiliary
/// model was trained on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProvenanceLog {
    pub folds: Vec<usize>,
    /// `(iteration, instance, auxiliary model)` for every instance that
    /// contributed gradient samples.
    pub samples: Vec<(usize, usize, usize)>,
    /// `(iteration, auxiliary model, instances it was fitted on)`. Iteration
    /// 0 is the label-frequency initialization.
    pub fits: Vec<(usize, usize, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: AdditiveModel,
    pub log: Vec<IterationLog>,
    /// Mean training risk before stage 1, then after every stage.
    pub risk_history: Vec<f64>,
    /// Per iteration, every candidate in enumeration order (if recorded).
    pub candidates: Vec<Vec<CandidateRecord>>,
    pub selectors: Vec<EntropySelector>,
    pub provenance: Option<ProvenanceLog>,
    /// Final held-out predictions per training instance.
    pub stacked: Vec<ScoreField>,
}

/// Smoothed log label frequencies.
pub fn initial_scores<'a, I>(instances: I, num_classes: usize) -> Vec<f64>
where
    I: IntoIterator<Item = &'a StructuredInstance>,
{
    let mut counts = vec![1.0; num_classes];
    for inst in instances {
        for j in 0..inst.num_pixels() {
            for (c, p) in counts.iter_mut().zip(inst.labels().row(j)) {
                *c += p;
            }
        }
    }
    let total: f64 = counts.iter().sum();
    counts.iter().map(|c| (c / total).ln()).collect()
}

/// Deterministic fold of each instance; every fold is nonempty.
pub fn assign_folds(num_instances: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidInput("folds must be at least 2".into()));
    }
    if num_instances < folds {
        return Err(Error::InvalidInput(format!(
            "{num_instances} instances cannot fill {folds} folds"
        )));
    }
    let mut order: Vec<usize> = (0..num_instances).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f01d));
    let mut fold = vec![0; num_instances];
    for (i, &x) in order.iter().enumerate() {
        fold[x] = i % folds;
    }
    Ok(fold)
}

/// Region-level gradient dataset for one selector, straight from pixel
/// scores: one sample per selected region with the region's descriptor
/// (context from `scores`), the mean of `p - q` over its pixels and weight
/// equal to its pixel count. `None` if nothing is selected anywhere.
pub fn build_gradient_dataset(
    bank: &FeatureBank,
    selector: &EntropySelector,
    instances: &[StructuredInstance],
    scores: &[ScoreField],
) -> Result<Option<Vec<TreeSample>>> {
    if instances.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            what: "score fields",
            expected: instances.len(),
            found: scores.len(),
        });
    }
    let mut out = Vec::new();
    for (inst, sc) in instances.iter().zip(scores) {
        bank.check_instance(inst)?;
        let sel = select(selector, inst, sc)?;
        if sel.is_empty() {
            continue;
        }
        let h = inst.hierarchy();
        let k = inst.num_classes();
        let mut q = vec![0.0; inst.num_pixels() * k];
        for j in 0..inst.num_pixels() {
            softmax_into(sc.row(j), &mut q[j * k..(j + 1) * k]);
        }
        let mean_q = |pixels: &[u32]| -> Vec<f64> {
            let mut m = vec![0.0; k];
            for &p in pixels {
                for (a, b) in m.iter_mut().zip(&q[p as usize * k..(p as usize + 1) * k]) {
                    *a += b;
                }
            }
            m.iter_mut().for_each(|a| *a /= pixels.len() as f64);
            m
        };
        let mut cache = FeatureCache::new();
        for region in &sel.regions {
            let seg = h.segment(region.segment);
            let parent = match seg.parent {
                Some(p) => &h.level(region.segment.level - 1)[p],
                None => seg,
            };
            let mut ctx = mean_q(&seg.pixels);
            ctx.extend(mean_q(&parent.pixels));
            let pixels = Selection::region_pixels(h, region);
            let mut target = vec![0.0; k];
            for &p in &pixels {
                let p = p as usize;
                for c in 0..k {
                    target[c] += inst.labels().row(p)[c] - q[p * k + c];
                }
            }
            target.iter_mut().for_each(|t| *t /= pixels.len() as f64);
            out.push(TreeSample {
                descriptor: region_descriptor(inst, bank, &mut cache, region.segment, &ctx)?,
                target,
                weight: pixels.len() as f64,
            });
        }
    }
    Ok((!out.is_empty()).then_some(out))
}

/// Trains with `config` and returns the held-out predictions of every
/// instance at the end of training.
pub fn stacked_predictions(instances: &[StructuredInstance], config: &TrainConfig) -> Result<Vec<ScoreField>> {
    Ok(train_with_report(instances, config)?.stacked)
}

pub fn train(instances: &[StructuredInstance], config: &TrainConfig) -> Result<AdditiveModel> {
    Ok(train_with_report(instances, config)?.model)
}

/// Shared read-only training data.
struct Corpus<'a> {
    instances: &'a [StructuredInstance],
    geoms: Vec<CellGeometry>,
    /// Global row of each instance's first segment.
    offsets: Vec<usize>,
    layout: DescriptorLayout,
    costs: CostTable,
    num_static: usize,
    /// Row-major static descriptors (shape and codes) of every segment.
    statics: Vec<f64>,
    /// Per static column, all global rows in ascending value order.
    static_order: Vec<Vec<u32>>,
    k: usize,
}

impl<'a> Corpus<'a> {
    fn new(instances: &'a [StructuredInstance], bank: &FeatureBank, k: usize) -> Self {
        let layout = bank.layout(k);
        let ns = layout.num_static();
        let per_instance: Vec<Vec<f64>> = instances
            .par_iter()
            .map(|inst| static_descriptors(inst, bank, ns))
            .collect();
        let mut offsets = Vec::with_capacity(instances.len());
        let mut total = 0;
        for inst in instances {
            offsets.push(total);
            total += inst.hierarchy().num_segments();
        }
        let statics = per_instance.concat();
        let static_order = (0..ns)
            .into_par_iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..total as u32).collect();
                idx.sort_by(|&a, &b| {
                    statics[a as usize * ns + col]
                        .total_cmp(&statics[b as usize * ns + col])
                        .then(a.cmp(&b))
                });
                idx
            })
            .collect();
        Self {
            instances,
            geoms: instances.par_iter().map(CellGeometry::new).collect(),
            offsets,
            costs: bank.costs(),
            layout,
            num_static: ns,
            statics,
            static_order,
            k,
        }
    }

    fn row(&self, x: usize, flat: usize) -> usize {
        self.offsets[x] + flat
    }

    fn static_row(&self, row: usize) -> &[f64] {
        &self.statics[row * self.num_static..(row + 1) * self.num_static]
    }

    fn route(&self, tree: &RegressionTree, row: usize, ctx: &[f64]) -> usize {
        let s = self.static_row(row);
        let ns = self.num_static;
        tree.route(|_, col| Ok(if col < ns { s[col] } else { ctx[col - ns] }))
            .expect("in-memory routing cannot fail")
    }
}

fn static_descriptors(inst: &StructuredInstance, bank: &FeatureBank, ns: usize) -> Vec<f64> {
    let h = inst.hierarchy();
    let mut out = vec![0.0; h.num_segments() * ns];
    for id in h.segment_ids() {
        let flat = h.flat_index(id);
        out[flat * ns..flat * ns + NUM_SHAPE_FEATURES].copy_from_slice(&shape_features(h, id));
    }
    let mut col = NUM_SHAPE_FEATURES;
    for (g, group) in bank.groups.iter().enumerate() {
        for c in 0..group.num_centers() {
            let codes = code_map(inst, group, g, c);
            for id in h.segment_ids() {
                out[h.flat_index(id) * ns + col] = pool(&codes, &h.segment(id).pixels);
            }
            col += 1;
        }
    }
    out
}

/// Selected regions of one score state, flattened with their contexts.
struct Regions {
    k: usize,
    instance: Vec<u32>,
    row: Vec<u32>,
    /// `2K` context values per region.
    ctx: Vec<f64>,
    /// Cells per region: `cells[cell_start[r]..cell_start[r + 1]]`.
    cell_start: Vec<usize>,
    cells: Vec<u32>,
}

impl Regions {
    fn new(corpus: &Corpus, views: &[CellView], selections: &[Selection], include: &dyn Fn(usize) -> bool) -> Self {
        let k = corpus.k;
        let mut r = Regions {
            k,
            instance: Vec::new(),
            row: Vec::new(),
            ctx: Vec::new(),
            cell_start: vec![0],
            cells: Vec::new(),
        };
        let mut buf = vec![0.0; 2 * k];
        for (x, sel) in selections.iter().enumerate() {
            if !include(x) {
                continue;
            }
            let h = corpus.instances[x].hierarchy();
            for region in &sel.regions {
                let flat = h.flat_index(region.segment);
                views[x].context(&corpus.geoms[x], flat, &mut buf);
                r.instance.push(x as u32);
                r.row.push(corpus.row(x, flat) as u32);
                r.ctx.extend_from_slice(&buf);
                r.cells.extend_from_slice(&region.cells);
                r.cell_start.push(r.cells.len());
            }
        }
        r
    }

    fn len(&self) -> usize {
        self.row.len()
    }

    fn ctx(&self, r: usize) -> &[f64] {
        &self.ctx[r * 2 * self.k..(r + 1) * 2 * self.k]
    }

    fn cells(&self, r: usize) -> &[u32] {
        &self.cells[self.cell_start[r]..self.cell_start[r + 1]]
    }

    /// Leaf index of every region.
    fn leaves(&self, corpus: &Corpus, tree: &RegressionTree) -> Vec<usize> {
        (0..self.len())
            .map(|r| corpus.route(tree, self.row[r] as usize, self.ctx(r)))
            .collect()
    }

    /// Weighted-LSQ dataset: targets are region means of `p - q` under
    /// `views`, weights are region pixel counts.
    fn dataset(&self, corpus: &Corpus, views: &[CellView]) -> DenseDataset {
        let (n, k, ns) = (self.len(), self.k, corpus.num_static);
        let cols = corpus.layout.width();
        let mut values = vec![0.0; cols * n];
        let mut targets = vec![0.0; n * k];
        let mut weights = vec![0.0; n];
        for r in 0..n {
            let x = self.instance[r] as usize;
            let geom = &corpus.geoms[x];
            let s = corpus.static_row(self.row[r] as usize);
            for c in 0..ns {
                values[c * n + r] = s[c];
            }
            for (c, v) in self.ctx(r).iter().enumerate() {
                values[(ns + c) * n + r] = *v;
            }
            let cells = self.cells(r);
            views[x].region_target(geom, cells, &mut targets[r * k..(r + 1) * k]);
            weights[r] = cells.iter().map(|&c| geom.cell_size[c as usize]).sum();
        }
        // static columns reuse the global presort
        let mut local = vec![u32::MAX; corpus.statics.len() / ns];
        for (r, &row) in self.row.iter().enumerate() {
            local[row as usize] = r as u32;
        }
        let mut order: Vec<Vec<u32>> = corpus
            .static_order
            .iter()
            .map(|o| {
                o.iter()
                    .map(|&g| local[g as usize])
                    .filter(|&l| l != u32::MAX)
                    .collect()
            })
            .collect();
        for c in ns..cols {
            let vals = &values[c * n..(c + 1) * n];
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| vals[a as usize].total_cmp(&vals[b as usize]).then(a.cmp(&b)));
            order.push(idx);
        }
        DenseDataset {
            n,
            k,
            cols,
            values,
            order,
            targets,
            weights,
        }
    }
}

/// Per-cell quantities for evaluating the risk change of a stage as a
/// function of its step size.
struct LineData {
    k: usize,
    num_instances: f64,
    /// Label sum over each region's cells.
    label: Vec<f64>,
    n: Vec<f64>,
    /// `exp(y - max y)` per cell.
    ex: Vec<f64>,
    log_s0: Vec<f64>,
}

impl LineData {
    fn new(corpus: &Corpus, regions: &Regions, scores: &[CellScores], num_instances: usize) -> Self {
        let k = corpus.k;
        let total_cells = regions.cells.len();
        let mut d = LineData {
            k,
            num_instances: num_instances as f64,
            label: vec![0.0; regions.len() * k],
            n: Vec::with_capacity(total_cells),
            ex: Vec::with_capacity(total_cells * k),
            log_s0: Vec::with_capacity(total_cells),
        };
        for r in 0..regions.len() {
            let x = regions.instance[r] as usize;
            let geom = &corpus.geoms[x];
            for &c in regions.cells(r) {
                let c = c as usize;
                for (a, b) in d.label[r * k..(r + 1) * k].iter_mut().zip(geom.label_sum(c)) {
                    *a += b;
                }
                let y = scores[x].row(c);
                let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in y {
                    let e = (v - m).exp();
                    d.ex.push(e);
                    s += e;
                }
                d.n.push(geom.cell_size[c]);
                d.log_s0.push(s.ln());
            }
        }
        d
    }

    /// Mean per-instance risk reduction of adding `alpha * u[r]` to every
    /// cell of region `r`.
    fn delta(&self, regions: &Regions, u: &[&[f64]], alpha: f64, scratch: &mut [f64]) -> f64 {
        let k = self.k;
        let mut total = 0.0;
        for r in 0..regions.len() {
            let ur = u[r];
            let mut lin = 0.0;
            for i in 0..k {
                scratch[i] = (alpha * ur[i]).exp();
                lin += self.label[r * k + i] * ur[i];
            }
            let mut acc = 0.0;
            for ci in regions.cell_start[r]..regions.cell_start[r + 1] {
                let ex = &self.ex[ci * k..(ci + 1) * k];
                let mut s = 0.0;
                for i in 0..k {
                    s += ex[i] * scratch[i];
                }
                acc += self.n[ci] * (s.ln() - self.log_s0[ci]);
            }
            total += alpha * lin - acc;
        }
        total / self.num_instances
    }

    /// Derivative of [`delta`](Self::delta) at `alpha = 0`.
    fn slope(&self, regions: &Regions, u: &[&[f64]]) -> f64 {
        let k = self.k;
        let mut total = 0.0;
        for r in 0..regions.len() {
            let ur = u[r];
            let mut lin = 0.0;
            for i in 0..k {
                lin += self.label[r * k + i] * ur[i];
            }
            let mut acc = 0.0;
            for ci in regions.cell_start[r]..regions.cell_start[r + 1] {
                let ex = &self.ex[ci * k..(ci + 1) * k];
                let s0 = self.log_s0[ci].exp();
                let mut dot = 0.0;
                for i in 0..k {
                    dot += ex[i] * ur[i];
                }
                acc += self.n[ci] * dot / s0;
            }
            total += lin - acc;
        }
        total / self.num_instances
    }

    /// Best step and the risk reduction it achieves.
    fn search(&self, regions: &Regions, tree: &RegressionTree, leaves: &[usize], ls: LineSearch) -> (f64, f64) {
        let u: Vec<&[f64]> = leaves.iter().map(|&l| tree.leaf_value(l)).collect();
        if regions.len() == 0 || self.slope(regions, &u) <= 0.0 {
            return (0.0, 0.0);
        }
        let mut scratch = vec![0.0; self.k];
        let (alpha, neg) = golden_section(|a| -self.delta(regions, &u, a, &mut scratch), ls);
        (alpha, -neg)
    }
}

fn apply(corpus: &Corpus, regions: &Regions, scores: &mut [CellScores], tree: &RegressionTree, alpha: f64) {
    for r in 0..regions.len() {
        let leaf = corpus.route(tree, regions.row[r] as usize, regions.ctx(r));
        let x = regions.instance[r] as usize;
        scores[x].add_scaled(regions.cells(r), alpha, tree.leaf_value(leaf));
    }
}

fn views(corpus: &Corpus, scores: &[CellScores]) -> Vec<CellView> {
    scores
        .par_iter()
        .enumerate()
        .map(|(x, s)| CellView::new(corpus.instances[x].hierarchy(), &corpus.geoms[x], s))
        .collect()
}

fn mean_risk(corpus: &Corpus, scores: &[CellScores]) -> f64 {
    let total: f64 = scores.iter().zip(&corpus.geoms).map(|(s, g)| s.risk(g)).sum();
    total / scores.len() as f64
}

/// Same nodes, ignoring the parameters recorded on the tree.
fn same_nodes(a: &RegressionTree, b: &RegressionTree) -> bool {
    a.nodes() == b.nodes()
}

struct Evaluated {
    /// One per learner in enumeration order.
    results: Vec<(RegressionTree, f64, CandidateScore)>,
}

struct Learner {
    depth: usize,
    lambda: f64,
}

fn build_bank(instances: &[StructuredInstance], config: &TrainConfig) -> Result<FeatureBank> {
    let first = &instances[0];
    let specs: Vec<GroupSpec> = first
        .features()
        .groups
        .iter()
        .map(|g| {
            let cost = config
                .groups
                .iter()
                .find(|c| c.name == g.name)
                .ok_or_else(|| Error::InvalidInput(format!("no cost entry for feature group {:?}", g.name)))?;
            Ok(GroupSpec {
                name: g.name.clone(),
                base_dim: g.dim,
                base_cost: cost.base_cost,
                per_center_cost: cost.per_center_cost,
                noise_scale: 0.0,
                seed: 0,
            })
        })
        .collect::<Result<_>>()?;
    FeatureBank::fit(
        instances,
        &specs,
        KMeansParams {
            k: config.dictionary_size,
            iterations: config.kmeans_iterations,
            seed: config.seed,
        },
        config.kmeans_samples,
    )
}

fn check_corpus(instances: &[StructuredInstance]) -> Result<(usize, usize)> {
    let first = instances.first().ok_or(Error::Empty("training set"))?;
    let k = first.num_classes();
    let levels = first.hierarchy().num_levels();
    for inst in instances {
        if inst.num_classes() != k || inst.hierarchy().num_levels() != levels {
            return Err(Error::Incompatible(
                "training instances disagree on class count or hierarchy depth".into(),
            ));
        }
        let (a, b) = (&first.features().groups, &inst.features().groups);
        if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.name != y.name || x.dim != y.dim) {
            return Err(Error::Incompatible(
                "training instances disagree on feature groups".into(),
            ));
        }
    }
    Ok((k, levels))
}

pub fn train_with_report(instances: &[StructuredInstance], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let (k, num_levels) = check_corpus(instances)?;
    let folds = assign_folds(instances.len(), config.folds, config.seed)?;
    let bank = build_bank(instances, config)?;
    let corpus = Corpus::new(instances, &bank, k);
    let selectors = enumerate_selectors(num_levels, &config.thresholds, config.selector_cost)?;
    let depth_grid = config.depth_grid();
    let max_depth = *depth_grid.last().expect("validated nonempty");
    let learners: Vec<Learner> = depth_grid
        .iter()
        .flat_map(|&depth| config.lambdas.iter().map(move |&lambda| Learner { depth, lambda }))
        .collect();
    let ls = LineSearch {
        alpha_max: config.alpha_max,
        tol: config.line_search_tol,
    };
    let n = instances.len();
    let include_all = |_: usize| true;

    let initial = initial_scores(instances, k);
    let mut main: Vec<CellScores> = instances
        .iter()
        .map(|inst| CellScores::constant(inst.hierarchy().num_cells(), &initial))
        .collect();
    let mut provenance = config.record_provenance.then(|| ProvenanceLog {
        folds: folds.clone(),
        ..Default::default()
    });
    let mut stacked: Vec<CellScores> = Vec::with_capacity(n);
    let mut aux_initial = Vec::with_capacity(config.folds);
    for f in 0..config.folds {
        let members: Vec<usize> = (0..n).filter(|&x| folds[x] != f).collect();
        aux_initial.push(initial_scores(members.iter().map(|&x| &instances[x]), k));
        if let Some(p) = provenance.as_mut() {
            p.fits.push((0, f, members));
        }
    }
    for (x, inst) in instances.iter().enumerate() {
        stacked.push(CellScores::constant(
            inst.hierarchy().num_cells(),
            &aux_initial[folds[x]],
        ));
    }

    let mut stages: Vec<WeakStage> = Vec::new();
    let mut paid = FeatureSet::default();
    let mut log = Vec::new();
    let mut risk_history = vec![mean_risk(&corpus, &main)];
    let mut trace = Vec::new();
    let mut termination = Termination::Completed;

    for iteration in 1..=config.iterations {
        let main_views = views(&corpus, &main);
        let stack_views = views(&corpus, &stacked);
        let sel_for = |vs: &[CellView], s: &EntropySelector| -> Vec<Selection> {
            vs.iter()
                .enumerate()
                .map(|(x, v)| select_from_entropies(s, instances[x].hierarchy(), &v.segment_entropy))
                .collect()
        };
        let selections: Vec<(Vec<Selection>, Vec<Selection>)> = selectors
            .par_iter()
            .map(|s| (sel_for(&stack_views, s), sel_for(&main_views, s)))
            .collect();

        // selectors with identical selections and cost share results
        let mut first_same: Vec<usize> = (0..selectors.len()).collect();
        for i in 0..selectors.len() {
            for j in 0..i {
                if first_same[j] == j && selectors[j].cost == selectors[i].cost && selections[j] == selections[i] {
                    first_same[i] = j;
                    break;
                }
            }
        }
        let active: Vec<bool> = selections
            .iter()
            .map(|(st, _)| st.iter().any(|s| !s.is_empty()))
            .collect();
        if !active.iter().any(|&a| a) {
            termination = Termination::NoActiveSelector { iteration };
            break;
        }

        let unique: Vec<usize> = (0..selectors.len())
            .filter(|&i| first_same[i] == i && active[i])
            .collect();
        let evaluated: Vec<(usize, Evaluated)> = unique
            .par_iter()
            .map(|&i| {
                let (stack_sel, main_sel) = &selections[i];
                let rows = Regions::new(&corpus, &stack_views, stack_sel, &include_all);
                let ds = rows.dataset(&corpus, &stack_views);
                let main_regions = Regions::new(&corpus, &main_views, main_sel, &include_all);
                let line = LineData::new(&corpus, &main_regions, &main, n);
                let deep: Vec<RegressionTree> = config
                    .lambdas
                    .iter()
                    .map(|&lambda| {
                        let params = TreeParams {
                            depth_limit: max_depth,
                            lambda,
                            prediction_cost: config.prediction_cost,
                        };
                        grow(&ds, &corpus.layout, params, &paid, &corpus.costs)
                    })
                    .collect();
                let mut distinct: Vec<(RegressionTree, f64, f64)> = Vec::new();
                let mut results = Vec::with_capacity(learners.len());
                for l in &learners {
                    let li = config
                        .lambdas
                        .iter()
                        .position(|&v| v == l.lambda)
                        .expect("lambda in grid");
                    let tree = deep[li].truncated(l.depth);
                    let (alpha, delta) = match distinct.iter().find(|(t, _, _)| same_nodes(t, &tree)) {
                        Some(&(_, a, d)) => (a, d),
                        None => {
                            let leaves = main_regions.leaves(&corpus, &tree);
                            let (a, d) = line.search(&main_regions, &tree, &leaves, ls);
                            distinct.push((tree.clone(), a, d));
                            (a, d)
                        }
                    };
                    let cost = selectors[i].cost + tree_cost(&tree, &paid, &corpus.costs);
                    results.push((tree, alpha, CandidateScore { delta, cost }));
                }
                (i, Evaluated { results })
            })
            .collect();

        let mut by_selector: Vec<Option<&Evaluated>> = vec![None; selectors.len()];
        for (i, e) in &evaluated {
            by_selector[*i] = Some(e);
        }
        let mut records: Vec<CandidateRecord> = Vec::new();
        let mut scores = Vec::new();
        for (i, _) in selectors.iter().enumerate() {
            if !active[i] {
                continue;
            }
            let e = by_selector[first_same[i]].expect("evaluated");
            for (l, (tree, alpha, score)) in learners.iter().zip(&e.results) {
                scores.push(*score);
                records.push(CandidateRecord {
                    selector: i,
                    depth: l.depth,
                    lambda: l.lambda,
                    tree: tree.clone(),
                    alpha: *alpha,
                    score: *score,
                });
            }
        }
        let best = speedboost_select(&scores).expect("at least one active candidate");
        let chosen = records[best].clone();
        if config.record_candidates {
            trace.push(records);
        }
        if !(chosen.score.delta > config.min_improvement) {
            termination = Termination::NoImprovement { iteration };
            break;
        }

        let selector = selectors[chosen.selector];
        let (stack_sel, main_sel) = &selections[chosen.selector];

        // auxiliary refits, all from the pre-stage stacked state
        let fold_fits: Vec<Option<(RegressionTree, f64, Vec<usize>)>> = (0..config.folds)
            .into_par_iter()
            .map(|f| {
                let outside = |x: usize| folds[x] != f;
                let rows = Regions::new(&corpus, &stack_views, stack_sel, &outside);
                if rows.len() == 0 {
                    return None;
                }
                let ds = rows.dataset(&corpus, &stack_views);
                let params = TreeParams {
                    depth_limit: chosen.depth,
                    lambda: chosen.lambda,
                    prediction_cost: config.prediction_cost,
                };
                let tree = grow(&ds, &corpus.layout, params, &paid, &corpus.costs);
                let line = LineData::new(&corpus, &rows, &stacked, n);
                let leaves = rows.leaves(&corpus, &tree);
                let (alpha, _) = line.search(&rows, &tree, &leaves, ls);
                let used: BTreeSet<usize> = rows.instance.iter().map(|&x| x as usize).collect();
                Some((tree, alpha, used.into_iter().collect()))
            })
            .collect();
        if let Some(p) = provenance.as_mut() {
            for (x, sel) in stack_sel.iter().enumerate() {
                if !sel.is_empty() {
                    p.samples.push((iteration, x, folds[x]));
                }
            }
        }
        for (f, fit) in fold_fits.into_iter().enumerate() {
            let Some((tree, alpha, used)) = fit else { continue };
            let inside = |x: usize| folds[x] == f;
            let regions = Regions::new(&corpus, &stack_views, stack_sel, &inside);
            apply(&corpus, &regions, &mut stacked, &tree, alpha);
            if let Some(p) = provenance.as_mut() {
                p.fits.push((iteration, f, used));
            }
        }

        let main_regions = Regions::new(&corpus, &main_views, main_sel, &include_all);
        apply(&corpus, &main_regions, &mut main, &chosen.tree, chosen.alpha);
        paid.union_with(&chosen.tree.feature_set());
        let risk = mean_risk(&corpus, &main);
        risk_history.push(risk);
        log.push(IterationLog {
            iteration,
            selector,
            depth: chosen.depth,
            lambda: chosen.lambda,
            alpha: chosen.alpha,
            delta_risk: chosen.score.delta,
            stage_cost: chosen.score.cost,
            ratio: chosen.score.ratio(),
            risk,
            candidates: scores.len(),
        });
        stages.push(WeakStage {
            selector,
            tree: chosen.tree,
            alpha: chosen.alpha,
            cost: chosen.score.cost,
        });
    }

    let metrics: Vec<Metrics> = main.iter().zip(&corpus.geoms).map(|(s, g)| s.metrics(g)).collect();
    let mean = Metrics::mean(&metrics).expect("nonempty corpus");
    let model = AdditiveModel {
        num_classes: k,
        num_levels,
        initial,
        stages,
        bank,
        metadata: ModelMetadata {
            seed: config.seed,
            config_hash: config.hash(),
            iterations_requested: config.iterations,
            termination,
            num_training_instances: n,
            final_risk: *risk_history.last().expect("initial risk recorded"),
            final_pixel_accuracy: mean.pixel_accuracy,
            final_class_accuracy: mean.mean_class_recall,
        },
    };
    let stacked = stacked
        .iter()
        .enumerate()
        .map(|(x, s)| s.expand(instances[x].hierarchy()))
        .collect();
    Ok(TrainReport {
        model,
        log,
        risk_history,
        candidates: trace,
        selectors,
        provenance,
        stacked,
    })
}
