//! Entropy-thresholded structure selection.
//!
//! A selector picks the segments whose mean per-pixel prediction entropy
//! exceeds a threshold, either on one hierarchy level or across all levels.
//! In all-levels mode each pixel is assigned to the finest selected segment
//! containing it, so the returned regions never overlap.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::hierarchy::{SegmentId, SegmentationHierarchy};
use crate::instance::StructuredInstance;
use crate::loss::softmax_entropy;
use crate::types::ScoreField;

/// Default fixed cost of evaluating a selector.
pub const DEFAULT_SELECTOR_COST: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelScope {
    Level(usize),
    AllLevels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropySelector {
    pub threshold: f64,
    pub scope: LevelScope,
    pub cost: f64,
}

impl EntropySelector {
    pub fn new(threshold: f64, scope: LevelScope, cost: f64) -> Result<Self> {
        if !(threshold >= 0.0 && threshold.is_finite()) {
            return Err(Error::InvalidInput(format!("threshold {threshold} must be >= 0")));
        }
        if !(cost >= 0.0 && cost.is_finite()) {
            return Err(Error::InvalidInput(format!("selector cost {cost} must be >= 0")));
        }
        Ok(Self { threshold, scope, cost })
    }

    pub fn check_levels(&self, num_levels: usize) -> Result<()> {
        match self.scope {
            LevelScope::Level(l) if l >= num_levels => Err(Error::OutOfRange {
                what: "hierarchy level",
                index: l,
                len: num_levels,
            }),
            _ => Ok(()),
        }
    }
}

/// A selected segment and the cells (finest-level segments) it updates.
/// In single-level mode `cells` is the whole segment; in all-levels mode
/// cells claimed by finer selected segments are removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectedRegion {
    pub segment: SegmentId,
    pub cells: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Selection {
    pub regions: Vec<SelectedRegion>,
}

impl Selection {
    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn segments(&self) -> Vec<SegmentId> {
        self.regions.iter().map(|r| r.segment).collect()
    }

    /// Pixels updated by the region.
    pub fn region_pixels(h: &SegmentationHierarchy, region: &SelectedRegion) -> Vec<u32> {
        let finest = h.level(h.finest_level());
        let mut px: Vec<u32> = region
            .cells
            .iter()
            .flat_map(|&c| finest[c as usize].pixels.iter().copied())
            .collect();
        px.sort_unstable();
        px
    }

    /// Per-pixel mask of all updated pixels.
    pub fn mask(&self, h: &SegmentationHierarchy) -> Vec<bool> {
        let finest = h.level(h.finest_level());
        let mut mask = vec![false; h.num_pixels()];
        for r in &self.regions {
            for &c in &r.cells {
                for &p in &finest[c as usize].pixels {
                    mask[p as usize] = true;
                }
            }
        }
        mask
    }
}

/// Applies a selector given the mean entropy of every segment (flat index).
pub(crate) fn select_from_entropies(
    selector: &EntropySelector,
    h: &SegmentationHierarchy,
    segment_entropy: &[f64],
) -> Selection {
    let passes = |id: SegmentId| segment_entropy[h.flat_index(id)] > selector.threshold;
    match selector.scope {
        LevelScope::Level(level) => Selection {
            regions: h
                .level(level)
                .iter()
                .filter(|s| passes(s.id))
                .map(|s| SelectedRegion {
                    segment: s.id,
                    cells: h.cells_of(s.id).to_vec(),
                })
                .collect(),
        },
        LevelScope::AllLevels => {
            // owner[c] = flat index of the finest selected segment over cell c
            let mut owner: Vec<Option<SegmentId>> = vec![None; h.num_cells()];
            for (c, o) in owner.iter_mut().enumerate() {
                for level in (0..h.num_levels()).rev() {
                    let id = SegmentId {
                        level,
                        index: h.ancestor_of_cell(c, level),
                    };
                    if passes(id) {
                        *o = Some(id);
                        break;
                    }
                }
            }
            let mut regions: Vec<SelectedRegion> = Vec::new();
            let mut slot = vec![usize::MAX; h.num_segments()];
            for (c, o) in owner.iter().enumerate() {
                if let Some(id) = o {
                    let flat = h.flat_index(*id);
                    if slot[flat] == usize::MAX {
                        slot[flat] = regions.len();
                        regions.push(SelectedRegion {
                            segment: *id,
                            cells: Vec::new(),
                        });
                    }
                    regions[slot[flat]].cells.push(c as u32);
                }
            }
            regions.sort_by_key(|r| r.segment);
            Selection { regions }
        }
    }
}

/// Segments whose mean softmax entropy under `scores` exceeds the
/// selector's threshold.
pub fn select(selector: &EntropySelector, instance: &StructuredInstance, scores: &ScoreField) -> Result<Selection> {
    let h = instance.hierarchy();
    ensure_dims("score rows", instance.num_pixels(), scores.num_elements())?;
    ensure_dims("score classes", instance.num_classes(), scores.num_classes())?;
    selector.check_levels(h.num_levels())?;
    let mut scratch = vec![0.0; scores.num_classes()];
    let pixel_entropy: Vec<f64> = (0..scores.num_elements())
        .map(|j| softmax_entropy(scores.row(j), &mut scratch))
        .collect();
    let segment_entropy: Vec<f64> = h
        .segment_ids()
        .map(|id| {
            let seg = h.segment(id);
            seg.pixels.iter().map(|&p| pixel_entropy[p as usize]).sum::<f64>() / seg.len() as f64
        })
        .collect();
    Ok(select_from_entropies(selector, h, &segment_entropy))
}

/// Every `(level, threshold)` selector, then every all-levels selector, in
/// grid order.
pub fn enumerate_selectors(num_levels: usize, thresholds: &[f64], cost: f64) -> Result<Vec<EntropySelector>> {
    if thresholds.is_empty() {
        return Err(Error::Empty("threshold grid"));
    }
    if num_levels == 0 {
        return Err(Error::Empty("hierarchy"));
    }
    let scopes = (0..num_levels)
        .map(LevelScope::Level)
        .chain(std::iter::once(LevelScope::AllLevels));
    let mut out = Vec::with_capacity((num_levels + 1) * thresholds.len());
    for scope in scopes {
        for &t in thresholds {
            out.push(EntropySelector::new(t, scope, cost)?);
        }
    }
    Ok(out)
}
