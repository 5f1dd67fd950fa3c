//! Feature groups, soft vector-quantization codes, region descriptors and
//! incremental feature-cost accounting.
//!
//! A feature group has a base per-pixel descriptor (cost `base_cost`, paid
//! once per inference) and a dictionary of centers. Each center yields one
//! derived per-pixel code, `max(0, mean_j d_j(v) - d_i(v))` with
//! `d_i(v) = |v - mu_i|^2`; a derived feature costs `per_center_cost` the
//! first time it is computed. Region features are codes average-pooled over
//! a segment.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::hierarchy::{SegmentId, SegmentationHierarchy};
use crate::instance::StructuredInstance;
use crate::kmeans::{lloyd, KMeansParams};
use crate::runtime::CostLedger;

/// Recipe for a synthetic feature group: cost table entries plus the knobs
/// the scene generator uses to synthesize its base descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub name: String,
    pub base_dim: usize,
    pub base_cost: f64,
    pub per_center_cost: f64,
    /// Multiplier on the scene noise level for this group's descriptors.
    pub noise_scale: f64,
    /// Seed of the group's fixed projection matrix.
    pub seed: u64,
}

/// Dictionary size the default derived costs are normalized by.
pub const REFERENCE_DICTIONARY_SIZE: f64 = 150.0;

impl GroupSpec {
    fn timed(name: &str, base_ms: f64, derived_ms: f64, noise_scale: f64, seed: u64) -> Self {
        Self {
            name: name.into(),
            base_dim: 6,
            base_cost: base_ms,
            per_center_cost: derived_ms / REFERENCE_DICTIONARY_SIZE,
            noise_scale,
            seed,
        }
    }

    /// Four descriptor groups whose costs follow measured per-image timings
    /// (ms): base descriptor time, and derived time spread over a 150-center
    /// dictionary. More expensive groups are not uniformly more informative.
    pub fn default_groups() -> Vec<GroupSpec> {
        vec![
            Self::timed("TXT", 29.0, 66.0, 2.0, 0x7478),
            Self::timed("LBP", 64.0, 265.0, 2.5, 0x6c62),
            Self::timed("I-SIFT", 33.0, 165.0, 1.5, 0x6973),
            Self::timed("C-SIFT", 93.0, 443.0, 1.0, 0x6373),
        ]
    }
}

/// A feature group with its quantization dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGroup {
    pub name: String,
    pub base_dim: usize,
    pub base_cost: f64,
    pub per_center_cost: f64,
    centers: Vec<Vec<f64>>,
    center_sq_norms: Vec<f64>,
    mean_center: Vec<f64>,
    mean_sq_norm: f64,
}

impl FeatureGroup {
    pub fn new(
        name: impl Into<String>,
        base_dim: usize,
        base_cost: f64,
        per_center_cost: f64,
        centers: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let name = name.into();
        if !(base_cost >= 0.0 && base_cost.is_finite()) || !(per_center_cost >= 0.0 && per_center_cost.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "group {name}: costs must be finite and nonnegative"
            )));
        }
        if centers.is_empty() {
            return Err(Error::Empty("dictionary"));
        }
        for c in &centers {
            ensure_dims("center dimension", base_dim, c.len())?;
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("non-finite center".into()));
            }
        }
        let n = centers.len() as f64;
        let center_sq_norms: Vec<f64> = centers.iter().map(|c| dot(c, c)).collect();
        let mut mean_center = vec![0.0; base_dim];
        for c in &centers {
            for (m, v) in mean_center.iter_mut().zip(c) {
                *m += v;
            }
        }
        mean_center.iter_mut().for_each(|m| *m /= n);
        let mean_sq_norm = center_sq_norms.iter().sum::<f64>() / n;
        Ok(Self {
            name,
            base_dim,
            base_cost,
            per_center_cost,
            centers,
            center_sq_norms,
            mean_center,
            mean_sq_norm,
        })
    }

    pub fn num_centers(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Soft VQ code of descriptor `v` for center `i`, using only that center and
/// the dictionary-wide statistics.
pub fn soft_vq_code(v: &[f64], group: &FeatureGroup, center_index: usize) -> Result<f64> {
    if center_index >= group.num_centers() {
        return Err(Error::OutOfRange {
            what: "center",
            index: center_index,
            len: group.num_centers(),
        });
    }
    ensure_dims("descriptor dimension", group.base_dim, v.len())?;
    Ok(code_unchecked(v, group, center_index))
}

#[inline]
pub(crate) fn code_unchecked(v: &[f64], group: &FeatureGroup, i: usize) -> f64 {
    let z = group.mean_sq_norm
        - 2.0 * dot(&group.mean_center, v)
        - (group.center_sq_norms[i] - 2.0 * dot(&group.centers[i], v));
    z.max(0.0)
}

/// Per-group costs, overridable independently of the dictionaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub base: Vec<f64>,
    pub per_center: Vec<f64>,
}

/// All feature groups a model reads, in column order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureBank {
    pub groups: Vec<FeatureGroup>,
}

impl FeatureBank {
    /// Builds one dictionary per group by k-means over (a sample of) the
    /// instances' base descriptors. Costs come from `specs`.
    pub fn fit(
        instances: &[StructuredInstance],
        specs: &[GroupSpec],
        params: KMeansParams,
        max_samples: usize,
    ) -> Result<Self> {
        let first = instances.first().ok_or(Error::Empty("instance set"))?;
        ensure_dims("feature group count", specs.len(), first.features().groups.len())?;
        let mut groups = Vec::with_capacity(specs.len());
        for (g, spec) in specs.iter().enumerate() {
            let dim = first.features().groups[g].dim;
            ensure_dims("group dimension", spec.base_dim, dim)?;
            let total: usize = instances.iter().map(|i| i.num_pixels()).sum();
            let stride = total.div_ceil(max_samples.max(1)).max(1);
            let mut points = Vec::with_capacity((total / stride + 1) * dim);
            let mut idx = 0usize;
            for inst in instances {
                let base = &inst.features().groups[g];
                ensure_dims("group dimension", dim, base.dim)?;
                for p in 0..inst.num_pixels() {
                    if idx % stride == 0 {
                        points.extend_from_slice(base.descriptor(p));
                    }
                    idx += 1;
                }
            }
            let centers = lloyd(
                &points,
                dim,
                KMeansParams {
                    seed: params.seed.wrapping_add(g as u64),
                    ..params
                },
            )?;
            groups.push(FeatureGroup::new(
                spec.name.clone(),
                dim,
                spec.base_cost,
                spec.per_center_cost,
                centers,
            )?);
        }
        Ok(Self { groups })
    }

    pub fn costs(&self) -> CostTable {
        CostTable {
            base: self.groups.iter().map(|g| g.base_cost).collect(),
            per_center: self.groups.iter().map(|g| g.per_center_cost).collect(),
        }
    }

    pub fn apply_costs(&mut self, costs: &CostTable) -> Result<()> {
        ensure_dims("cost table size", self.groups.len(), costs.base.len())?;
        ensure_dims("cost table size", self.groups.len(), costs.per_center.len())?;
        for ((g, &b), &c) in self.groups.iter_mut().zip(&costs.base).zip(&costs.per_center) {
            if !(b >= 0.0 && c >= 0.0 && b.is_finite() && c.is_finite()) {
                return Err(Error::InvalidInput("costs must be finite and nonnegative".into()));
            }
            g.base_cost = b;
            g.per_center_cost = c;
        }
        Ok(())
    }

    pub fn layout(&self, num_classes: usize) -> DescriptorLayout {
        DescriptorLayout {
            num_classes,
            centers_per_group: self.groups.iter().map(FeatureGroup::num_centers).collect(),
        }
    }

    /// Checks that an instance supplies descriptors this bank can quantize.
    pub fn check_instance(&self, instance: &StructuredInstance) -> Result<()> {
        let src = &instance.features().groups;
        if src.len() != self.groups.len() {
            return Err(Error::Incompatible(format!(
                "model has {} feature groups, instance has {}",
                self.groups.len(),
                src.len()
            )));
        }
        for (g, b) in self.groups.iter().zip(src) {
            if g.base_dim != b.dim {
                return Err(Error::Incompatible(format!(
                    "group {} has dim {} in the model, {} in the instance",
                    g.name, g.base_dim, b.dim
                )));
            }
        }
        Ok(())
    }
}

/// A derived feature: one center of one group.
pub type CenterRef = (usize, usize);

/// Feature groups and derived features already paid for.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureSet {
    pub groups: BTreeSet<usize>,
    pub centers: BTreeSet<CenterRef>,
}

impl FeatureSet {
    pub fn contains_center(&self, c: CenterRef) -> bool {
        self.centers.contains(&c)
    }

    pub fn union_with(&mut self, other: &FeatureSet) {
        self.groups.extend(other.groups.iter().copied());
        self.centers.extend(other.centers.iter().copied());
    }

    /// Cost of the features in `self` that `paid` lacks.
    pub fn incremental_cost(&self, paid: &FeatureSet, costs: &CostTable) -> f64 {
        let g: f64 = self.groups.difference(&paid.groups).map(|&g| costs.base[g]).sum();
        let c: f64 = self
            .centers
            .difference(&paid.centers)
            .map(|&(g, _)| costs.per_center[g])
            .sum();
        g + c
    }
}

/// Cost incurred by one feature request.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Charge {
    pub group: Option<f64>,
    pub center: Option<f64>,
}

impl Charge {
    pub fn total(&self) -> f64 {
        self.group.unwrap_or(0.0) + self.center.unwrap_or(0.0)
    }
}

/// Marks `(group, center)` as computed and returns what that newly costs:
/// the group's base cost if the group was unpaid, plus the center's cost if
/// that derived feature was unpaid.
pub fn charge(paid: &mut FeatureSet, costs: &CostTable, group: usize, center: usize) -> Charge {
    Charge {
        group: paid.groups.insert(group).then(|| costs.base[group]),
        center: paid.centers.insert((group, center)).then(|| costs.per_center[group]),
    }
}

/// Number of segment shape features.
pub const NUM_SHAPE_FEATURES: usize = 5;

/// A column of the region descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureRef {
    /// Segment geometry: area fraction, bounding-box aspect, level,
    /// centroid x, centroid y. Free.
    Shape { index: usize },
    /// Pooled soft-VQ code of one center.
    Code { group: usize, center: usize },
    /// Mean predicted class probability over the segment (`index < K`) or
    /// over its parent (`K <= index < 2K`). Free.
    Context { index: usize },
}

impl FeatureRef {
    pub fn center(&self) -> Option<CenterRef> {
        match *self {
            FeatureRef::Code { group, center } => Some((group, center)),
            _ => None,
        }
    }
}

/// Column layout of region descriptors: shape, then codes group-major, then
/// context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptorLayout {
    pub num_classes: usize,
    pub centers_per_group: Vec<usize>,
}

impl DescriptorLayout {
    pub fn num_codes(&self) -> usize {
        self.centers_per_group.iter().sum()
    }

    pub fn num_static(&self) -> usize {
        NUM_SHAPE_FEATURES + self.num_codes()
    }

    pub fn num_context(&self) -> usize {
        2 * self.num_classes
    }

    pub fn width(&self) -> usize {
        self.num_static() + self.num_context()
    }

    pub fn column(&self, f: FeatureRef) -> Option<usize> {
        match f {
            FeatureRef::Shape { index } => (index < NUM_SHAPE_FEATURES).then_some(index),
            FeatureRef::Code { group, center } => {
                let n = *self.centers_per_group.get(group)?;
                (center < n)
                    .then(|| NUM_SHAPE_FEATURES + self.centers_per_group[..group].iter().sum::<usize>() + center)
            }
            FeatureRef::Context { index } => (index < self.num_context()).then(|| self.num_static() + index),
        }
    }

    pub fn feature(&self, column: usize) -> Option<FeatureRef> {
        if column < NUM_SHAPE_FEATURES {
            return Some(FeatureRef::Shape { index: column });
        }
        let mut c = column - NUM_SHAPE_FEATURES;
        for (group, &n) in self.centers_per_group.iter().enumerate() {
            if c < n {
                return Some(FeatureRef::Code { group, center: c });
            }
            c -= n;
        }
        (c < self.num_context()).then_some(FeatureRef::Context { index: c })
    }

    pub fn features(&self) -> Vec<FeatureRef> {
        (0..self.width()).filter_map(|c| self.feature(c)).collect()
    }
}

/// Geometry of a segment: area fraction, bounding-box width/height ratio,
/// level index, normalized centroid x and y.
pub fn shape_features(h: &SegmentationHierarchy, id: SegmentId) -> [f64; NUM_SHAPE_FEATURES] {
    let seg = h.segment(id);
    let (x0, y0, x1, y1) = seg.bbox;
    let (mut sx, mut sy) = (0.0, 0.0);
    for &p in &seg.pixels {
        sx += (p as usize % h.width()) as f64;
        sy += (p as usize / h.width()) as f64;
    }
    let n = seg.len() as f64;
    [
        n / h.num_pixels() as f64,
        f64::from(x1 - x0 + 1) / f64::from(y1 - y0 + 1),
        id.level as f64,
        (sx / n + 0.5) / h.width() as f64,
        (sy / n + 0.5) / h.height() as f64,
    ]
}

/// Per-pixel codes of one center over a whole instance.
pub(crate) fn code_map(instance: &StructuredInstance, group: &FeatureGroup, g: usize, center: usize) -> Vec<f64> {
    let base = &instance.features().groups[g];
    (0..instance.num_pixels())
        .map(|p| code_unchecked(base.descriptor(p), group, center))
        .collect()
}

/// Mean of per-pixel codes over a pixel list.
#[inline]
pub(crate) fn pool(codes: &[f64], pixels: &[u32]) -> f64 {
    let mut s = 0.0;
    for &p in pixels {
        s += codes[p as usize];
    }
    s / pixels.len() as f64
}

/// Lazily computed feature values for one instance during one inference.
///
/// Values are memoized; whether they have been paid for is the ledger's
/// business.
#[derive(Debug, Default)]
pub struct FeatureCache {
    base_computed: BTreeSet<usize>,
    codes: HashMap<CenterRef, Vec<f64>>,
    pooled: HashMap<(usize, usize, usize), f64>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Groups whose base descriptors have been materialized.
    pub fn base_groups(&self) -> &BTreeSet<usize> {
        &self.base_computed
    }

    pub fn computed_centers(&self) -> impl Iterator<Item = CenterRef> + '_ {
        self.codes.keys().copied()
    }

    /// Pooled code value without touching any ledger.
    pub fn peek_pooled_code(
        &mut self,
        instance: &StructuredInstance,
        bank: &FeatureBank,
        segment: SegmentId,
        group: usize,
        center: usize,
    ) -> Result<f64> {
        let h = instance.hierarchy();
        let seg = h.get(segment).ok_or(Error::OutOfRange {
            what: "segment",
            index: segment.index,
            len: h.levels().get(segment.level).map_or(0, Vec::len),
        })?;
        let fg = bank.groups.get(group).ok_or(Error::OutOfRange {
            what: "group",
            index: group,
            len: bank.groups.len(),
        })?;
        if center >= fg.num_centers() {
            return Err(Error::OutOfRange {
                what: "center",
                index: center,
                len: fg.num_centers(),
            });
        }
        let key = (h.flat_index(segment), group, center);
        if let Some(&v) = self.pooled.get(&key) {
            return Ok(v);
        }
        self.base_computed.insert(group);
        let codes = self
            .codes
            .entry((group, center))
            .or_insert_with(|| code_map(instance, fg, group, center));
        let v = pool(codes, &seg.pixels);
        self.pooled.insert(key, v);
        Ok(v)
    }

    /// Pooled code of `(group, center)` over `segment`, charging the ledger
    /// for whatever this instance has not paid for yet.
    pub fn pooled_code(
        &mut self,
        instance: &StructuredInstance,
        bank: &FeatureBank,
        segment: SegmentId,
        group: usize,
        center: usize,
        ledger: &mut CostLedger,
    ) -> Result<f64> {
        let v = self.peek_pooled_code(instance, bank, segment, group, center)?;
        ledger.charge_feature(&bank.costs(), group, center);
        Ok(v)
    }
}

/// Full descriptor of a segment given its context features. Computes every
/// code; meant for training-style dense access and tests.
pub fn region_descriptor(
    instance: &StructuredInstance,
    bank: &FeatureBank,
    cache: &mut FeatureCache,
    segment: SegmentId,
    context: &[f64],
) -> Result<Vec<f64>> {
    let layout = bank.layout(instance.num_classes());
    ensure_dims("context width", layout.num_context(), context.len())?;
    let mut out = Vec::with_capacity(layout.width());
    out.extend_from_slice(&shape_features(instance.hierarchy(), segment));
    for (g, group) in bank.groups.iter().enumerate() {
        for c in 0..group.num_centers() {
            out.push(cache.peek_pooled_code(instance, bank, segment, g, c)?);
        }
    }
    out.extend_from_slice(context);
    Ok(out)
}
