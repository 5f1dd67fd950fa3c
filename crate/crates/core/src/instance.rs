use crate::error::{ensure_dims, Error, Result};
use crate::hierarchy::SegmentationHierarchy;
use crate::types::LabelField;

/// Raw per-pixel descriptors of one feature group for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseFeatures {
    pub name: String,
    pub dim: usize,
    /// Row-major `num_pixels x dim`.
    pub values: Vec<f64>,
}

impl BaseFeatures {
    #[inline]
    pub fn descriptor(&self, pixel: usize) -> &[f64] {
        &self.values[pixel * self.dim..(pixel + 1) * self.dim]
    }
}

/// Base descriptor sources of an instance, one per feature group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSource {
    pub groups: Vec<BaseFeatures>,
}

/// One problem instance: a pixel grid with ground truth, a segmentation
/// hierarchy and base descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredInstance {
    width: usize,
    height: usize,
    labels: LabelField,
    hierarchy: SegmentationHierarchy,
    features: FeatureSource,
}

impl StructuredInstance {
    pub fn new(labels: LabelField, hierarchy: SegmentationHierarchy, features: FeatureSource) -> Result<Self> {
        let (width, height) = (hierarchy.width(), hierarchy.height());
        let npix = width * height;
        ensure_dims("label count", npix, labels.num_elements())?;
        if labels.num_classes() < 2 {
            return Err(Error::InvalidInput("at least two classes required".into()));
        }
        for g in &features.groups {
            if g.dim == 0 {
                return Err(Error::InvalidInput(format!("group {} has dim 0", g.name)));
            }
            ensure_dims("base feature length", npix * g.dim, g.values.len())?;
            if g.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "group {} has non-finite descriptors",
                    g.name
                )));
            }
        }
        Ok(Self {
            width,
            height,
            labels,
            hierarchy,
            features,
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

    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }

    pub fn labels(&self) -> &LabelField {
        &self.labels
    }

    pub fn hierarchy(&self) -> &SegmentationHierarchy {
        &self.hierarchy
    }

    pub fn features(&self) -> &FeatureSource {
        &self.features
    }
}
