//! Nested multi-level partitions of a pixel grid.
//!
//! Level 0 is the coarsest. Every level is an exact partition of the pixels
//! and each segment below level 0 lies inside exactly one parent. Because
//! of the nesting, every segment is a union of finest-level segments
//! ("cells"); the training and inference engines work on cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentId {
    pub level: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: SegmentId,
    pub parent: Option<usize>,
    pub pixels: Vec<u32>,
    /// Inclusive bounding box `(x0, y0, x1, y1)`.
    pub bbox: (u32, u32, u32, u32),
}

impl Segment {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationHierarchy {
    width: usize,
    height: usize,
    levels: Vec<Vec<Segment>>,
    /// `membership[level][pixel]` is the segment index containing the pixel.
    membership: Vec<Vec<u32>>,
    /// Flattened-index offset of each level.
    offsets: Vec<usize>,
    /// Finest-level segments making up each segment (flattened index).
    cells: Vec<Vec<u32>>,
}

impl SegmentationHierarchy {
    /// Builds a hierarchy from one segment-label map per level (coarse to
    /// fine). Labels on each level must be dense `0..n`; parents are derived
    /// from the nesting.
    pub fn from_label_maps(width: usize, height: usize, maps: Vec<Vec<u32>>) -> Result<Self> {
        let npix = width
            .checked_mul(height)
            .ok_or_else(|| Error::Hierarchy("grid too large".into()))?;
        if npix == 0 {
            return Err(Error::Hierarchy("empty grid".into()));
        }
        if maps.is_empty() {
            return Err(Error::Hierarchy("at least one level required".into()));
        }
        let mut levels: Vec<Vec<Segment>> = Vec::with_capacity(maps.len());
        for (level, map) in maps.iter().enumerate() {
            if map.len() != npix {
                return Err(Error::Hierarchy(format!(
                    "level {level} covers {} pixels, grid has {npix}",
                    map.len()
                )));
            }
            let count = map.iter().copied().max().unwrap_or(0) as usize + 1;
            if count > npix {
                return Err(Error::Hierarchy(format!("level {level} has more segments than pixels")));
            }
            let mut segs: Vec<Segment> = (0..count)
                .map(|index| Segment {
                    id: SegmentId { level, index },
                    parent: None,
                    pixels: Vec::new(),
                    bbox: (u32::MAX, u32::MAX, 0, 0),
                })
                .collect();
            for (p, &s) in map.iter().enumerate() {
                let seg = &mut segs[s as usize];
                seg.pixels.push(p as u32);
                let (x, y) = ((p % width) as u32, (p / width) as u32);
                let b = &mut seg.bbox;
                b.0 = b.0.min(x);
                b.1 = b.1.min(y);
                b.2 = b.2.max(x);
                b.3 = b.3.max(y);
            }
            if let Some(empty) = segs.iter().position(Segment::is_empty) {
                return Err(Error::Hierarchy(format!("level {level} segment {empty} is empty")));
            }
            if level > 0 {
                let parent_map = &maps[level - 1];
                for seg in &mut segs {
                    let parent = parent_map[seg.pixels[0] as usize];
                    if seg.pixels.iter().any(|&p| parent_map[p as usize] != parent) {
                        return Err(Error::Hierarchy(format!(
                            "level {level} segment {} straddles parents",
                            seg.id.index
                        )));
                    }
                    seg.parent = Some(parent as usize);
                }
            }
            levels.push(segs);
        }

        let mut offsets = Vec::with_capacity(levels.len());
        let mut total = 0;
        for lvl in &levels {
            offsets.push(total);
            total += lvl.len();
        }
        let finest_map = maps.last().expect("nonempty");
        let mut cells = Vec::with_capacity(total);
        for lvl in &levels {
            for seg in lvl {
                let mut c: Vec<u32> = seg.pixels.iter().map(|&p| finest_map[p as usize]).collect();
                c.sort_unstable();
                c.dedup();
                cells.push(c);
            }
        }

        Ok(Self {
            width,
            height,
            levels,
            membership: maps,
            offsets,
            cells,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, level: usize) -> &[Segment] {
        &self.levels[level]
    }

    pub fn levels(&self) -> &[Vec<Segment>] {
        &self.levels
    }

    pub fn segment(&self, id: SegmentId) -> &Segment {
        &self.levels[id.level][id.index]
    }

    pub fn get(&self, id: SegmentId) -> Option<&Segment> {
        self.levels.get(id.level)?.get(id.index)
    }

    pub fn membership(&self, level: usize) -> &[u32] {
        &self.membership[level]
    }

    pub fn num_segments(&self) -> usize {
        self.cells.len()
    }

    /// Dense index of a segment across all levels.
    #[inline]
    pub fn flat_index(&self, id: SegmentId) -> usize {
        self.offsets[id.level] + id.index
    }

    pub fn segment_ids(&self) -> impl Iterator<Item = SegmentId> + '_ {
        self.levels.iter().flatten().map(|s| s.id)
    }

    pub fn finest_level(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn num_cells(&self) -> usize {
        self.levels[self.finest_level()].len()
    }

    /// Finest-level segment indices whose union is `id`.
    pub fn cells_of(&self, id: SegmentId) -> &[u32] {
        &self.cells[self.flat_index(id)]
    }

    /// Segment at `level` containing finest cell `cell`.
    #[inline]
    pub fn ancestor_of_cell(&self, cell: usize, level: usize) -> usize {
        let finest = &self.levels[self.finest_level()][cell];
        self.membership[level][finest.pixels[0] as usize] as usize
    }
}

/// Quadtree hierarchy: level `l` tiles the grid into `2^l x 2^l` blocks with
/// boundaries at `floor(i * size / 2^l)`, so uneven sizes split as evenly as
/// possible and each block nests in its parent.
pub fn build_quadtree_hierarchy(width: usize, height: usize, levels: usize) -> Result<SegmentationHierarchy> {
    if levels == 0 {
        return Err(Error::Hierarchy("at least one level required".into()));
    }
    if levels > 31 || (1usize << (levels - 1)) > width.min(height) {
        return Err(Error::Hierarchy(format!(
            "{levels} levels too deep for a {width}x{height} grid"
        )));
    }
    let maps = (0..levels)
        .map(|l| {
            let n = 1usize << l;
            let col: Vec<u32> = (0..width).map(|x| (x * n / width) as u32).collect();
            let row: Vec<u32> = (0..height).map(|y| (y * n / height) as u32).collect();
            let mut map = Vec::with_capacity(width * height);
            for &r in &row {
                map.extend(col.iter().map(|&c| r * n as u32 + c));
            }
            map
        })
        .collect();
    SegmentationHierarchy::from_label_maps(width, height, maps)
}

/// Mean of the rows of `values` indexed by the segment's pixels.
pub fn segment_mean(values: &Matrix, segment: &Segment) -> Result<Vec<f64>> {
    if segment.is_empty() {
        return Err(Error::Empty("segment"));
    }
    let mut out = vec![0.0; values.cols()];
    for &p in &segment.pixels {
        let p = p as usize;
        if p >= values.rows() {
            return Err(Error::OutOfRange {
                what: "pixel",
                index: p,
                len: values.rows(),
            });
        }
        for (o, v) in out.iter_mut().zip(values.row(p)) {
            *o += v;
        }
    }
    let n = segment.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}
