//! Point-cloud containers shared across the dataset, loss, and model
//! layers.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gripper::{GripperSpec, PointGraspVector};

/// The six object categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Bottle,
    Bowl,
    Can,
    Mug,
    Laptop,
    Camera,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Bottle,
        Category::Bowl,
        Category::Can,
        Category::Mug,
        Category::Laptop,
        Category::Camera,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Category::Bottle => "bottle",
            Category::Bowl => "bowl",
            Category::Can => "can",
            Category::Mug => "mug",
            Category::Laptop => "laptop",
            Category::Camera => "camera",
        }
    }

    pub fn from_name(name: &str) -> Result<Category> {
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::config(format!("unknown category '{name}'")))
    }

    pub fn id(&self) -> u32 {
        Category::ALL.iter().position(|c| c == self).unwrap() as u32
    }

    pub fn from_id(id: u32) -> Result<Category> {
        Category::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown category id {id}")))
    }

    /// Categories treated as rotationally symmetric about the canonical
    /// up-axis during pose evaluation.
    pub fn is_rotation_symmetric(&self) -> bool {
        matches!(self, Category::Bottle | Category::Bowl | Category::Can)
    }
}

/// An oriented point cloud in unit-canonical space: bounding box centered
/// at the origin, bounding-box diagonal 1, up-axis +y.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitCanonicalCloud {
    pub category: Category,
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
}

impl UnitCanonicalCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn bbox(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    /// Full bounding-box extents.
    pub fn bbox_extents(&self) -> Vector3<f64> {
        let (lo, hi) = self.bbox();
        hi - lo
    }

    /// Bounding-box diagonal length.
    pub fn bbox_diagonal(&self) -> f64 {
        self.bbox_extents().norm()
    }

    /// Checks the unit-canonical invariants: bbox center at the origin
    /// (1e-9), unit diagonal (1e-6), unit normals matching point count.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if self.normals.len() != self.points.len() {
            return Err(Error::MissingNormals);
        }
        let (lo, hi) = self.bbox();
        let center = (lo + hi) / 2.0;
        if center.abs().max() > 1e-9 {
            return Err(Error::config(format!(
                "bbox center {:?} not at origin",
                center.as_slice()
            )));
        }
        let diag = (hi - lo).norm();
        if (diag - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!("bbox diagonal {diag} != 1")));
        }
        for n in &self.normals {
            if (n.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::config(format!("normal {:?} not unit", n.as_slice())));
            }
        }
        Ok(())
    }
}

/// Dense ground-truth grasp labels, one entry per cloud point.
///
/// Positions live in the unit-canonical frame; widths are metric (the
/// gripper's own scale).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGraspLabel {
    /// Binary grasp success.
    pub gs: Vec<bool>,
    /// Unit baseline direction toward the partner contact (canonical frame).
    pub baseline: Vec<Vector3<f64>>,
    /// Unit approach direction, perpendicular to the baseline.
    pub approach: Vec<Vector3<f64>>,
    /// Metric jaw width; 0 where `gs` is false.
    pub width: Vec<f64>,
}

impl DenseGraspLabel {
    pub fn len(&self) -> usize {
        self.gs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gs.is_empty()
    }

    /// Indices of positively labeled points.
    pub fn positive_indices(&self) -> Vec<usize> {
        (0..self.gs.len()).filter(|&i| self.gs[i]).collect()
    }

    /// Fraction of positively labeled points.
    pub fn positive_fraction(&self) -> f64 {
        if self.gs.is_empty() {
            return 0.0;
        }
        self.gs.iter().filter(|&&g| g).count() as f64 / self.gs.len() as f64
    }

    pub fn validate(&self, spec: &GripperSpec) -> Result<()> {
        let n = self.gs.len();
        if self.baseline.len() != n || self.approach.len() != n || self.width.len() != n {
            return Err(Error::config("label field lengths disagree".to_string()));
        }
        for i in 0..n {
            if self.gs[i] {
                if self.width[i] <= 0.0 || self.width[i] > spec.w_max {
                    return Err(Error::WidthOutOfRange(self.width[i], spec.w_max));
                }
                let dot = self.approach[i].dot(&self.baseline[i]);
                if dot.abs() > 1e-6 {
                    return Err(Error::InvalidDirections(format!(
                        "label {i}: <a,b> = {dot:.3e}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One training datapoint: a canonical shape at a metric scale with its
/// dense grasp labels.
#[derive(Debug, Clone)]
pub struct CanonicalObjectSample {
    pub category: Category,
    pub cloud: UnitCanonicalCloud,
    /// Metric bounding-box diagonal in meters.
    pub scale: f64,
    pub labels: DenseGraspLabel,
}

impl CanonicalObjectSample {
    pub fn validate(&self, spec: &GripperSpec) -> Result<()> {
        self.cloud.validate()?;
        if self.labels.len() != self.cloud.len() {
            return Err(Error::config(format!(
                "{} labels for {} points",
                self.labels.len(),
                self.cloud.len()
            )));
        }
        if !(self.scale > 0.0) {
            return Err(Error::config(format!("scale {} must be > 0", self.scale)));
        }
        self.labels.validate(spec)
    }
}

/// Decoded dense grasp cloud: per-point position plus grasp channels, in
/// struct-of-arrays layout. `width_onehot` is row-major `n x n_width_bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGraspCloud {
    pub n_width_bins: usize,
    pub positions: Vec<Vector3<f64>>,
    pub gs: Vec<f64>,
    pub z1: Vec<Vector3<f64>>,
    pub z2: Vec<Vector3<f64>>,
    pub width_onehot: Vec<f64>,
}

impl DenseGraspCloud {
    pub fn zeros(n: usize, n_width_bins: usize) -> DenseGraspCloud {
        DenseGraspCloud {
            n_width_bins,
            positions: vec![Vector3::zeros(); n],
            gs: vec![0.0; n],
            z1: vec![Vector3::zeros(); n],
            z2: vec![Vector3::zeros(); n],
            width_onehot: vec![0.0; n * n_width_bins],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Bin-score row for point `i`.
    pub fn width_row(&self, i: usize) -> &[f64] {
        &self.width_onehot[i * self.n_width_bins..(i + 1) * self.n_width_bins]
    }

    /// Owned per-point view.
    pub fn point(&self, i: usize) -> PointGraspVector {
        PointGraspVector {
            p: self.positions[i],
            gs: self.gs[i],
            z1: self.z1[i],
            z2: self.z2[i],
            width_onehot: self.width_row(i).to_vec(),
        }
    }

    /// Head-range invariants: gs in [0,1], bin rows summing to 1 (1e-6).
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.gs.len() != n || self.z1.len() != n || self.z2.len() != n {
            return Err(Error::config("grasp cloud field lengths disagree".to_string()));
        }
        if self.width_onehot.len() != n * self.n_width_bins {
            return Err(Error::config("width_onehot length mismatch".to_string()));
        }
        for i in 0..n {
            if !(0.0..=1.0).contains(&self.gs[i]) {
                return Err(Error::config(format!("gs[{i}] = {} outside [0,1]", self.gs[i])));
            }
            let sum: f64 = self.width_row(i).iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::config(format!("width bins of point {i} sum to {sum}")));
            }
        }
        Ok(())
    }
}
