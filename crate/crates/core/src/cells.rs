//! Cell-level view of score fields.
//!
//! Every weak stage adds one vector per selected segment, and every segment
//! is a union of finest-level segments (cells), so scores starting from a
//! constant initial row stay constant within each cell. Training and
//! inference therefore track one score row per cell. Risk, entropies,
//! context features and metrics reduce to weighted sums over cells using
//! per-cell label sums and class histograms.

use crate::hierarchy::{SegmentId, SegmentationHierarchy};
use crate::instance::StructuredInstance;
use crate::loss::{entropy, log_sum_exp, softmax_into};
use crate::types::{argmax, Matrix, ScoreField};

/// Label statistics of each cell of one instance.
#[derive(Debug, Clone)]
pub struct CellGeometry {
    pub num_classes: usize,
    pub num_pixels: usize,
    /// Pixel count per cell.
    pub cell_size: Vec<f64>,
    /// Sum of ground-truth distributions per cell, `cells x K`.
    pub label_sum: Vec<f64>,
    /// Count of pixels per (cell, true argmax class), `cells x K`.
    pub label_hist: Vec<u32>,
    /// Pixel count per true class over the instance.
    pub class_totals: Vec<u32>,
    /// Pixel count per segment (flat index).
    pub segment_size: Vec<f64>,
    /// Parent flat index per segment (itself at level 0).
    pub parent: Vec<usize>,
}

impl CellGeometry {
    pub fn new(instance: &StructuredInstance) -> Self {
        let h = instance.hierarchy();
        let k = instance.num_classes();
        let finest = h.level(h.finest_level());
        let labels = instance.labels();
        let truth = labels.argmax();
        let mut label_sum = vec![0.0; finest.len() * k];
        let mut label_hist = vec![0u32; finest.len() * k];
        let mut class_totals = vec![0u32; k];
        for (c, seg) in finest.iter().enumerate() {
            for &p in &seg.pixels {
                let p = p as usize;
                for (s, v) in label_sum[c * k..(c + 1) * k].iter_mut().zip(labels.row(p)) {
                    *s += v;
                }
                label_hist[c * k + truth[p]] += 1;
                class_totals[truth[p]] += 1;
            }
        }
        let mut segment_size = Vec::with_capacity(h.num_segments());
        let mut parent = Vec::with_capacity(h.num_segments());
        for id in h.segment_ids() {
            let seg = h.segment(id);
            segment_size.push(seg.len() as f64);
            parent.push(match seg.parent {
                Some(p) => h.flat_index(SegmentId {
                    level: id.level - 1,
                    index: p,
                }),
                None => h.flat_index(id),
            });
        }
        Self {
            num_classes: k,
            num_pixels: instance.num_pixels(),
            cell_size: finest.iter().map(|s| s.len() as f64).collect(),
            label_sum,
            label_hist,
            class_totals,
            segment_size,
            parent,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.cell_size.len()
    }

    #[inline]
    pub fn label_sum(&self, c: usize) -> &[f64] {
        &self.label_sum[c * self.num_classes..(c + 1) * self.num_classes]
    }
}

/// One score row per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellScores {
    pub num_classes: usize,
    pub data: Vec<f64>,
}

impl CellScores {
    pub fn constant(num_cells: usize, row: &[f64]) -> Self {
        let mut data = Vec::with_capacity(num_cells * row.len());
        for _ in 0..num_cells {
            data.extend_from_slice(row);
        }
        Self {
            num_classes: row.len(),
            data,
        }
    }

    #[inline]
    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.num_classes..(c + 1) * self.num_classes]
    }

    #[inline]
    pub fn row_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.num_classes..(c + 1) * self.num_classes]
    }

    /// Adds `alpha * update` to each listed cell.
    pub fn add_scaled(&mut self, cells: &[u32], alpha: f64, update: &[f64]) {
        for &c in cells {
            for (y, u) in self.row_mut(c as usize).iter_mut().zip(update) {
                *y += alpha * u;
            }
        }
    }

    /// Pixel-level score field.
    pub fn expand(&self, h: &SegmentationHierarchy) -> ScoreField {
        let mut m = Matrix::zeros(h.num_pixels(), self.num_classes);
        for (c, seg) in h.level(h.finest_level()).iter().enumerate() {
            for &p in &seg.pixels {
                m.row_mut(p as usize).copy_from_slice(self.row(c));
            }
        }
        ScoreField::from_matrix(m).expect("cell scores are finite")
    }

    /// Summed cross-entropy over all pixels.
    pub fn risk(&self, geom: &CellGeometry) -> f64 {
        (0..geom.num_cells())
            .map(|c| cell_risk(self.row(c), geom.cell_size[c], geom.label_sum(c)))
            .sum()
    }

    pub fn metrics(&self, geom: &CellGeometry) -> crate::runtime::Metrics {
        let k = self.num_classes;
        let mut hits = vec![0u64; k];
        for c in 0..geom.num_cells() {
            let pred = argmax(self.row(c));
            hits[pred] += u64::from(geom.label_hist[c * k + pred]);
        }
        crate::runtime::Metrics::from_counts(&hits, &geom.class_totals, geom.num_pixels)
    }
}

#[inline]
pub(crate) fn cell_risk(y: &[f64], n: f64, label_sum: &[f64]) -> f64 {
    let lse = log_sum_exp(y);
    n * lse - y.iter().zip(label_sum).map(|(a, b)| a * b).sum::<f64>()
}

/// Softmax probabilities and entropies of every cell, plus per-segment
/// aggregates, for one score state.
#[derive(Debug, Clone)]
pub struct CellView {
    pub num_classes: usize,
    pub probs: Vec<f64>,
    pub entropy: Vec<f64>,
    /// Mean entropy per segment (flat index).
    pub segment_entropy: Vec<f64>,
    /// Mean probability per segment, `segments x K`.
    pub segment_probs: Vec<f64>,
}

impl CellView {
    pub fn new(h: &SegmentationHierarchy, geom: &CellGeometry, scores: &CellScores) -> Self {
        let k = scores.num_classes;
        let nc = geom.num_cells();
        let mut probs = vec![0.0; nc * k];
        let mut ent = vec![0.0; nc];
        for c in 0..nc {
            let q = &mut probs[c * k..(c + 1) * k];
            softmax_into(scores.row(c), q);
            ent[c] = entropy(q);
        }
        let ns = h.num_segments();
        let mut segment_entropy = Vec::with_capacity(ns);
        let mut segment_probs = vec![0.0; ns * k];
        for (flat, id) in h.segment_ids().enumerate() {
            let mut e = 0.0;
            let sp = &mut segment_probs[flat * k..(flat + 1) * k];
            for &c in h.cells_of(id) {
                let c = c as usize;
                let n = geom.cell_size[c];
                e += n * ent[c];
                for (s, q) in sp.iter_mut().zip(&probs[c * k..(c + 1) * k]) {
                    *s += n * q;
                }
            }
            let size = geom.segment_size[flat];
            sp.iter_mut().for_each(|s| *s /= size);
            segment_entropy.push(e / size);
        }
        Self {
            num_classes: k,
            probs,
            entropy: ent,
            segment_entropy,
            segment_probs,
        }
    }

    #[inline]
    pub fn cell_probs(&self, c: usize) -> &[f64] {
        &self.probs[c * self.num_classes..(c + 1) * self.num_classes]
    }

    #[inline]
    pub fn segment_probs(&self, flat: usize) -> &[f64] {
        &self.segment_probs[flat * self.num_classes..(flat + 1) * self.num_classes]
    }

    /// Context features of a segment: its own mean prediction followed by
    /// its parent's.
    pub fn context(&self, geom: &CellGeometry, flat: usize, out: &mut [f64]) {
        let k = self.num_classes;
        out[..k].copy_from_slice(self.segment_probs(flat));
        out[k..2 * k].copy_from_slice(self.segment_probs(geom.parent[flat]));
    }

    /// Mean of `p_j - q_j` over the pixels of `cells`.
    pub fn region_target(&self, geom: &CellGeometry, cells: &[u32], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut n = 0.0;
        for &c in cells {
            let c = c as usize;
            let size = geom.cell_size[c];
            n += size;
            for ((o, p), q) in out.iter_mut().zip(geom.label_sum(c)).zip(self.cell_probs(c)) {
                *o += p - size * q;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
    }
}
