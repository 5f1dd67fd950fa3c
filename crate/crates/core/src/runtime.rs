//! Budgeted, interruptible inference and accuracy-versus-cost profiles.
//!
//! Stages run in order. Before each stage the runtime works out what the
//! stage would cost on this instance (selection, prediction, and every
//! group or derived feature its tree paths actually need that has not been
//! computed yet). If that would push the ledger past the budget, inference
//! stops and returns the scores of the last completed stage. So any budget
//! yields exactly a prefix of the unlimited run.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::boosting::AdditiveModel;
use crate::cells::{CellGeometry, CellScores, CellView};
use crate::error::{ensure_dims, Error, Result};
use crate::features::{charge, shape_features, CenterRef, Charge, CostTable, FeatureCache, FeatureRef, FeatureSet};
use crate::hierarchy::SegmentId;
use crate::instance::StructuredInstance;
use crate::selectors::{select_from_entropies, Selection};
use crate::types::{LabelField, ScoreField};

/// Costs incurred by one executed stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub stage: usize,
    pub selection_cost: f64,
    pub prediction_cost: f64,
    /// Distinct derived features the stage read, in first-use order.
    pub requested: Vec<CenterRef>,
    pub group_charges: Vec<(usize, f64)>,
    pub center_charges: Vec<(CenterRef, f64)>,
}

impl LedgerEntry {
    pub fn total(&self) -> f64 {
        let mut t = self.selection_cost + self.prediction_cost;
        for &(_, c) in &self.group_charges {
            t += c;
        }
        for &(_, c) in &self.center_charges {
            t += c;
        }
        t
    }
}

/// Exact record of what one inference has paid for.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CostLedger {
    entries: Vec<LedgerEntry>,
    /// Charges made outside any stage, e.g. direct feature queries.
    loose: Vec<Charge>,
    paid: FeatureSet,
    total: f64,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn paid(&self) -> &FeatureSet {
        &self.paid
    }

    /// Opens the entry for a stage and charges its fixed costs.
    pub fn begin_stage(&mut self, stage: usize, selection_cost: f64, prediction_cost: f64) {
        self.total += selection_cost;
        self.total += prediction_cost;
        self.entries.push(LedgerEntry {
            stage,
            selection_cost,
            prediction_cost,
            ..Default::default()
        });
    }

    /// Charges a derived feature (and its group) if unpaid. Attributed to
    /// the open stage, if any.
    pub fn charge_feature(&mut self, costs: &CostTable, group: usize, center: usize) -> Charge {
        let c = charge(&mut self.paid, costs, group, center);
        if let Some(g) = c.group {
            self.total += g;
        }
        if let Some(v) = c.center {
            self.total += v;
        }
        match self.entries.last_mut() {
            Some(e) => {
                if !e.requested.contains(&(group, center)) {
                    e.requested.push((group, center));
                }
                if let Some(g) = c.group {
                    e.group_charges.push((group, g));
                }
                if let Some(v) = c.center {
                    e.center_charges.push(((group, center), v));
                }
            }
            None => self.loose.push(c),
        }
        c
    }

    /// Total after charging `requests` on top of the current state, summed in
    /// the same order [`charge_feature`](Self::charge_feature) would.
    fn prospective_total(&self, costs: &CostTable, selection: f64, prediction: f64, requests: &[CenterRef]) -> f64 {
        let mut paid = self.paid.clone();
        let mut t = self.total;
        t += selection;
        t += prediction;
        for &(g, c) in requests {
            let ch = charge(&mut paid, costs, g, c);
            if let Some(v) = ch.group {
                t += v;
            }
            if let Some(v) = ch.center {
                t += v;
            }
        }
        t
    }
}

/// Inference budget in cost units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Budget {
    Unlimited,
    Limited(f64),
}

impl Budget {
    pub fn limited(units: f64) -> Result<Self> {
        if units.is_nan() || units < 0.0 {
            return Err(Error::InvalidInput(format!("budget {units} must be >= 0")));
        }
        Ok(if units.is_infinite() {
            Budget::Unlimited
        } else {
            Budget::Limited(units)
        })
    }

    pub fn allows(&self, total: f64) -> bool {
        match *self {
            Budget::Unlimited => true,
            Budget::Limited(b) => total <= b,
        }
    }

    pub fn as_f64(&self) -> f64 {
        match *self {
            Budget::Unlimited => f64::INFINITY,
            Budget::Limited(b) => b,
        }
    }
}

impl std::str::FromStr for Budget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("unlimited") || s.eq_ignore_ascii_case("inf") {
            return Ok(Budget::Unlimited);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad budget {s:?}")))?;
        Budget::limited(v)
    }
}

/// Pixel accuracy and recall per true class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pixel_accuracy: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class_recall: Vec<Option<f64>>,
    /// Mean over present classes.
    pub mean_class_recall: f64,
}

impl Metrics {
    /// From per-class correct counts and per-class true totals.
    pub fn from_counts(hits: &[u64], class_totals: &[u32], num_pixels: usize) -> Self {
        let correct: u64 = hits.iter().sum();
        let per_class_recall: Vec<Option<f64>> = hits
            .iter()
            .zip(class_totals)
            .map(|(&h, &n)| (n > 0).then(|| h as f64 / f64::from(n)))
            .collect();
        let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
        let mean_class_recall = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Self {
            pixel_accuracy: if num_pixels == 0 {
                0.0
            } else {
                correct as f64 / num_pixels as f64
            },
            per_class_recall,
            mean_class_recall,
        }
    }
}

/// Argmax predictions against argmax ground truth.
pub fn evaluate(scores: &ScoreField, truth: &LabelField) -> Result<Metrics> {
    ensure_dims("pixel count", truth.num_elements(), scores.num_elements())?;
    ensure_dims("class count", truth.num_classes(), scores.num_classes())?;
    let k = truth.num_classes();
    let mut hits = vec![0u64; k];
    let mut totals = vec![0u32; k];
    for (p, t) in scores.argmax().into_iter().zip(truth.argmax()) {
        totals[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    Ok(Metrics::from_counts(&hits, &totals, truth.num_elements()))
}

/// State after a completed stage (or the initial state, stage 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Number of stages executed so far.
    pub stages: usize,
    pub cost: f64,
    pub pixel_accuracy: f64,
    pub mean_class_recall: f64,
    pub risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceProfile {
    /// Before any stage.
    pub initial: Checkpoint,
    /// One per completed stage, in order.
    pub checkpoints: Vec<Checkpoint>,
}

impl InferenceProfile {
    /// The state reached under `budget`: the last checkpoint whose cost fits.
    pub fn at_budget(&self, budget: Budget) -> &Checkpoint {
        self.checkpoints
            .iter()
            .take_while(|c| budget.allows(c.cost))
            .last()
            .unwrap_or(&self.initial)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub scores: ScoreField,
    pub ledger: CostLedger,
    pub profile: InferenceProfile,
    /// Regions updated by each executed stage.
    pub selections: Vec<Selection>,
}

impl InferenceResult {
    pub fn stages_executed(&self) -> usize {
        self.selections.len()
    }
}

fn checkpoint(stages: usize, cost: f64, scores: &CellScores, geom: &CellGeometry) -> Checkpoint {
    let m = scores.metrics(geom);
    Checkpoint {
        stages,
        cost,
        pixel_accuracy: m.pixel_accuracy,
        mean_class_recall: m.mean_class_recall,
        risk: scores.risk(geom),
    }
}

/// Runs stages of `model` on `instance` until the next stage would exceed
/// `budget`.
pub fn infer(model: &AdditiveModel, instance: &StructuredInstance, budget: Budget) -> Result<InferenceResult> {
    model.check_instance(instance)?;
    let h = instance.hierarchy();
    let geom = CellGeometry::new(instance);
    let costs = model.bank.costs();
    let mut scores = CellScores::constant(h.num_cells(), &model.initial);
    let mut ledger = CostLedger::new();
    let mut cache = FeatureCache::new();
    let mut selections = Vec::new();
    let initial = checkpoint(0, 0.0, &scores, &geom);
    let mut checkpoints = Vec::new();
    let k = model.num_classes;
    let mut ctx = vec![0.0; 2 * k];

    for (t, stage) in model.stages.iter().enumerate() {
        let view = CellView::new(h, &geom, &scores);
        let selection = select_from_entropies(&stage.selector, h, &view.segment_entropy);

        // route every region without paying, noting the features touched
        let mut requests: Vec<CenterRef> = Vec::new();
        let mut seen = BTreeSet::new();
        let mut leaves = Vec::with_capacity(selection.len());
        for region in &selection.regions {
            let flat = h.flat_index(region.segment);
            view.context(&geom, flat, &mut ctx);
            let shape = shape_features(h, region.segment);
            let leaf = stage.tree.route(|f, _| {
                read_feature(
                    f,
                    instance,
                    model,
                    &mut cache,
                    region.segment,
                    &shape,
                    &ctx,
                    &mut |gc| {
                        if seen.insert(gc) {
                            requests.push(gc);
                        }
                    },
                )
            })?;
            leaves.push(leaf);
        }

        let prediction_cost = stage.tree.params().prediction_cost;
        let after = ledger.prospective_total(&costs, stage.selector.cost, prediction_cost, &requests);
        if !budget.allows(after) {
            break;
        }
        ledger.begin_stage(t, stage.selector.cost, prediction_cost);
        for &(g, c) in &requests {
            ledger.charge_feature(&costs, g, c);
        }
        debug_assert_eq!(ledger.total(), after);

        for (region, &leaf) in selection.regions.iter().zip(&leaves) {
            scores.add_scaled(&region.cells, stage.alpha, stage.tree.leaf_value(leaf));
        }
        checkpoints.push(checkpoint(t + 1, ledger.total(), &scores, &geom));
        selections.push(selection);
    }

    Ok(InferenceResult {
        scores: scores.expand(h),
        ledger,
        profile: InferenceProfile { initial, checkpoints },
        selections,
    })
}

#[allow(clippy::too_many_arguments)]
fn read_feature(
    f: FeatureRef,
    instance: &StructuredInstance,
    model: &AdditiveModel,
    cache: &mut FeatureCache,
    segment: SegmentId,
    shape: &[f64],
    ctx: &[f64],
    touched: &mut dyn FnMut(CenterRef),
) -> Result<f64> {
    match f {
        FeatureRef::Shape { index } => Ok(shape[index]),
        FeatureRef::Context { index } => Ok(ctx[index]),
        FeatureRef::Code { group, center } => {
            touched((group, center));
            cache.peek_pooled_code(instance, &model.bank, segment, group, center)
        }
    }
}

/// One row of an accuracy-versus-budget table: corpus means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub budget: f64,
    pub pixel_acc: f64,
    pub class_acc: f64,
    pub risk: f64,
    /// Mean cost actually spent.
    pub cost: f64,
}

/// Mean metrics over `instances` for each budget in `grid`.
pub fn profile_corpus(
    model: &AdditiveModel,
    instances: &[StructuredInstance],
    grid: &[Budget],
) -> Result<Vec<ProfileRow>> {
    use rayon::prelude::*;
    if instances.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let profiles: Vec<InferenceProfile> = instances
        .par_iter()
        .map(|inst| infer(model, inst, Budget::Unlimited).map(|r| r.profile))
        .collect::<Result<_>>()?;
    Ok(profile_rows(&profiles, grid))
}

/// Budget table from unlimited-run profiles, using the prefix property.
pub fn profile_rows(profiles: &[InferenceProfile], grid: &[Budget]) -> Vec<ProfileRow> {
    let n = profiles.len() as f64;
    grid.iter()
        .map(|&b| {
            let mut row = ProfileRow {
                budget: b.as_f64(),
                pixel_acc: 0.0,
                class_acc: 0.0,
                risk: 0.0,
                cost: 0.0,
            };
            for p in profiles {
                let c = p.at_budget(b);
                row.pixel_acc += c.pixel_accuracy;
                row.class_acc += c.mean_class_recall;
                row.risk += c.risk;
                row.cost += c.cost;
            }
            row.pixel_acc /= n;
            row.class_acc /= n;
            row.risk /= n;
            row.cost /= n;
            row
        })
        .collect()
}

/// CSV rendering of a profile table.
pub fn profile_csv(rows: &[ProfileRow]) -> String {
    let mut out = String::from("budget,pixel_acc,class_acc,risk\n");
    for r in rows {
        let budget = if r.budget.is_infinite() {
            "unlimited".to_string()
        } else {
            format!("{}", r.budget)
        };
        out.push_str(&format!(
            "{budget},{:.6},{:.6},{:.6}\n",
            r.pixel_acc, r.class_acc, r.risk
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Matrix;

    #[test]
    fn evaluate_examples() {
        let truth = LabelField::from_classes(2, &[0, 0, 1, 1]).unwrap();
        let perfect = ScoreField::from_matrix(
            Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let m = evaluate(&perfect, &truth).unwrap();
        assert_eq!(m.pixel_accuracy, 1.0);
        assert_eq!(m.mean_class_recall, 1.0);
        let one_class = ScoreField::constant(4, &[1.0, 0.0]);
        let m = evaluate(&one_class, &truth).unwrap();
        assert_eq!(m.pixel_accuracy, 0.5);
        assert_eq!(m.per_class_recall, vec![Some(1.0), Some(0.0)]);
        assert_eq!(m.mean_class_recall, 0.5);
    }

    #[test]
    fn absent_classes_excluded_from_mean() {
        let truth = LabelField::from_classes(3, &[0, 0, 0, 2]).unwrap();
        let scores = ScoreField::constant(4, &[0.0, 0.0, 1.0]);
        let m = evaluate(&scores, &truth).unwrap();
        assert_eq!(m.per_class_recall, vec![Some(0.0), None, Some(1.0)]);
        assert_eq!(m.mean_class_recall, 0.5);
        assert_eq!(m.pixel_accuracy, 0.25);
    }

    #[test]
    fn evaluate_matches_confusion_matrix() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = 50;
            let k = 4;
            let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let truth = LabelField::from_classes(k, &classes).unwrap();
            let data: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scores = ScoreField::from_matrix(Matrix::from_vec(n, k, data).unwrap()).unwrap();
            let pred = scores.argmax();
            let mut confusion = vec![vec![0usize; k]; k];
            for (t, p) in classes.iter().zip(&pred) {
                confusion[*t][*p] += 1;
            }
            let m = evaluate(&scores, &truth).unwrap();
            let diag: usize = (0..k).map(|c| confusion[c][c]).sum();
            assert_eq!(m.pixel_accuracy, diag as f64 / n as f64);
            for c in 0..k {
                let row: usize = confusion[c].iter().sum();
                let expect = (row > 0).then(|| confusion[c][c] as f64 / row as f64);
                assert_eq!(m.per_class_recall[c], expect);
            }
        }
    }

    #[test]
    fn budget_parsing() {
        assert_eq!("unlimited".parse::<Budget>().unwrap(), Budget::Unlimited);
        assert_eq!("12.5".parse::<Budget>().unwrap(), Budget::Limited(12.5));
        assert!("-1".parse::<Budget>().is_err());
        assert!("NaN".parse::<Budget>().is_err());
        assert!("abc".parse::<Budget>().is_err());
    }

    #[test]
    fn ledger_charges_once_and_attributes() {
        let costs = CostTable {
            base: vec![29.0],
            per_center: vec![0.44],
        };
        let mut ledger = CostLedger::new();
        ledger.begin_stage(0, 1.0, 1.0);
        ledger.charge_feature(&costs, 0, 1);
        ledger.charge_feature(&costs, 0, 1);
        ledger.charge_feature(&costs, 0, 2);
        let e = &ledger.entries()[0];
        assert_eq!(e.requested, vec![(0, 1), (0, 2)]);
        assert_eq!(e.group_charges, vec![(0, 29.0)]);
        assert_eq!(e.center_charges.len(), 2);
        assert_eq!(ledger.total(), e.total());
    }
}
