//! Geometric dense grasp labeling and the grasp success oracle.
//!
//! For every cloud point we search for an antipodal partner: a second
//! surface point within the (metric) jaw opening whose normal opposes the
//! closing line inside a friction cone, with the gripper body clear of
//! the surface. The same contact and clearance geometry backs
//! [`check_grasp_success`], so generated positive labels pass the oracle
//! by construction.

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{DenseGraspLabel, UnitCanonicalCloud};
use crate::error::{Error, Result};
use crate::gripper::{grasp_pose_from_params, GraspPose, GripperSpec};
use crate::kdtree::{dist2, KdTree};

/// Geometric labeling / success-check parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelerParams {
    /// Friction cone half angle, degrees.
    pub friction_half_angle_deg: f64,
    /// Contact tube radius around each expected jaw contact, meters.
    pub contact_radius: f64,
    /// Minimum gripper-body to surface distance, meters.
    pub clearance_min: f64,
    /// Approach directions evaluated per contact pair.
    pub n_approach_candidates: usize,
    /// Sample count per gripper body segment in the clearance test.
    pub body_samples: usize,
}

impl Default for LabelerParams {
    fn default() -> Self {
        LabelerParams {
            friction_half_angle_deg: 10.0,
            contact_radius: 0.004,
            clearance_min: 0.002,
            n_approach_candidates: 16,
            body_samples: 8,
        }
    }
}

impl LabelerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.friction_half_angle_deg > 0.0 && self.friction_half_angle_deg < 90.0) {
            return Err(Error::config("friction half angle must be in (0, 90) degrees".to_string()));
        }
        if self.contact_radius <= 0.0 || self.clearance_min < 0.0 {
            return Err(Error::config("contact radius must be positive, clearance non-negative".to_string()));
        }
        if self.n_approach_candidates < 1 || self.body_samples < 2 {
            return Err(Error::config("need >= 1 approach candidate and >= 2 body samples".to_string()));
        }
        Ok(())
    }
}

/// Uniform grid hash over metric points; cell size equals the query
/// radius so every in-range neighbor lies in the 27 surrounding cells.
struct GridHash {
    cell: f64,
    map: HashMap<(i64, i64, i64), Vec<u32>>,
}

impl GridHash {
    fn build(points: &[Vector3<f64>], cell: f64) -> GridHash {
        let mut map: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            map.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        GridHash { cell, map }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Indices within `radius` (inclusive) of `query`, ascending.
    fn within(&self, points: &[Vector3<f64>], query: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let (kx, ky, kz) = Self::key(query, self.cell);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.map.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &i in bucket {
                            if dist2(query, &points[i as usize]) <= r2 {
                                out.push(i as usize);
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Orthonormal basis perpendicular to `b`, deterministic in `b`.
fn perpendicular_basis(b: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if b.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = b.cross(&helper).normalize();
    let e2 = b.cross(&e1);
    (e1, e2)
}

/// Minimum distance from the sampled gripper body (palm bar, fingers at
/// the grasp width and at full opening, wrist) to the cloud.
fn gripper_clearance(
    pose: &GraspPose,
    tree: &KdTree<'_>,
    spec: &GripperSpec,
    params: &LabelerParams,
) -> f64 {
    let b = pose.baseline();
    let a = pose.approach();
    let t = pose.translation;
    let half_open = spec.w_max / 2.0;
    let half = pose.width / 2.0;
    let segments = [
        // Palm bar between the roots at full opening.
        (t - b * half_open, t + b * half_open),
        // Fingers at the grasp width.
        (t - b * half, t - b * half + a * spec.finger_len),
        (t + b * half, t + b * half + a * spec.finger_len),
        // Fingers at full opening (the sweep extreme).
        (t - b * half_open, t - b * half_open + a * spec.finger_len),
        (t + b * half_open, t + b * half_open + a * spec.finger_len),
        // Wrist from base to the gripper frame.
        (t - a * spec.d0, t),
    ];
    let mut min_d2 = f64::INFINITY;
    let steps = params.body_samples;
    for (start, end) in segments {
        for s in 0..steps {
            let f = s as f64 / (steps - 1) as f64;
            let point = start + (end - start) * f;
            let (_, d2) = tree.nearest(&point);
            if d2 < min_d2 {
                min_d2 = d2;
            }
        }
    }
    min_d2.sqrt()
}

/// Produces dense per-point grasp labels for a canonical cloud at a
/// metric scale. Positions stay canonical; widths are metric.
pub fn label_dense_grasps(
    cloud: &UnitCanonicalCloud,
    scale: f64,
    spec: &GripperSpec,
    params: &LabelerParams,
) -> Result<DenseGraspLabel> {
    if cloud.normals.len() != cloud.points.len() || cloud.points.is_empty() {
        return Err(Error::MissingNormals);
    }
    if !(scale > 0.0) {
        return Err(Error::config(format!("scale {scale} must be > 0")));
    }
    params.validate()?;
    spec.validate()?;

    let metric: Vec<Vector3<f64>> = cloud.points.iter().map(|p| p * scale).collect();
    let grid = GridHash::build(&metric, spec.w_max);
    let tree = KdTree::build(&metric);
    let cos_cone = params.friction_half_angle_deg.to_radians().cos();

    let per_point: Vec<(bool, Vector3<f64>, Vector3<f64>, f64)> = (0..metric.len())
        .into_par_iter()
        .map(|i| {
            let p = metric[i];
            let n_p = cloud.normals[i];

            // Best antipodal partner: most cone-aligned pair, ties to the
            // lowest index.
            let mut best: Option<(f64, usize)> = None;
            for j in grid.within(&metric, &p, spec.w_max) {
                if j == i {
                    continue;
                }
                let delta = metric[j] - p;
                let dist = delta.norm();
                if dist <= 1e-6 {
                    continue;
                }
                let u = delta / dist;
                let align_p = -n_p.dot(&u);
                let align_q = cloud.normals[j].dot(&u);
                let quality = align_p.min(align_q);
                if quality >= cos_cone {
                    let better = match best {
                        None => true,
                        Some((q, _)) => quality > q,
                    };
                    if better {
                        best = Some((quality, j));
                    }
                }
            }

            let Some((_, j)) = best else {
                return (false, Vector3::zeros(), Vector3::zeros(), 0.0);
            };
            let delta = metric[j] - p;
            let width = delta.norm();
            let baseline = delta / width;

            // Approach: the clearance-maximizing direction perpendicular
            // to the baseline.
            let (e1, e2) = perpendicular_basis(&baseline);
            let mut best_clearance = f64::NEG_INFINITY;
            let mut best_approach = e1;
            for k in 0..params.n_approach_candidates {
                let phi = std::f64::consts::TAU * k as f64 / params.n_approach_candidates as f64;
                let approach = e1 * phi.cos() + e2 * phi.sin();
                let pose = grasp_pose_from_params(&p, &approach, &baseline, width, spec)
                    .expect("constructed frame is orthonormal");
                let clearance = gripper_clearance(&pose, &tree, spec, params);
                if clearance > best_clearance {
                    best_clearance = clearance;
                    best_approach = approach;
                }
            }
            if best_clearance >= params.clearance_min {
                (true, baseline, best_approach, width)
            } else {
                (false, Vector3::zeros(), Vector3::zeros(), 0.0)
            }
        })
        .collect();

    let mut labels = DenseGraspLabel {
        gs: Vec::with_capacity(metric.len()),
        baseline: Vec::with_capacity(metric.len()),
        approach: Vec::with_capacity(metric.len()),
        width: Vec::with_capacity(metric.len()),
    };
    for (gs, baseline, approach, width) in per_point {
        labels.gs.push(gs);
        labels.baseline.push(baseline);
        labels.approach.push(approach);
        labels.width.push(width);
    }
    Ok(labels)
}

/// Success oracle for a metric grasp pose against a scaled cloud: both
/// jaw contact regions must touch surface with friction-cone-valid
/// normals, and the gripper body must be collision free.
pub fn check_grasp_success(
    pose: &GraspPose,
    cloud: &UnitCanonicalCloud,
    scale: f64,
    spec: &GripperSpec,
    params: &LabelerParams,
) -> bool {
    if cloud.normals.len() != cloud.points.len() || cloud.points.is_empty() {
        return false;
    }
    if pose.width <= 0.0 || pose.width > spec.w_max {
        return false;
    }
    let metric: Vec<Vector3<f64>> = cloud.points.iter().map(|p| p * scale).collect();
    let tree = KdTree::build(&metric);
    let cos_cone = params.friction_half_angle_deg.to_radians().cos();

    let b = pose.baseline();
    let center = pose.closing_center(spec);
    let left = center - b * (pose.width / 2.0);
    let right = center + b * (pose.width / 2.0);

    let contact_ok = |contact: &Vector3<f64>, sign: f64| {
        tree.within(contact, params.contact_radius)
            .iter()
            .any(|&i| sign * cloud.normals[i].dot(&b) >= cos_cone)
    };
    if !contact_ok(&left, -1.0) || !contact_ok(&right, 1.0) {
        return false;
    }
    gripper_clearance(pose, &tree, spec, params) >= params.clearance_min
}

/// Nearest-label interpolation: each query adopts the label index of its
/// nearest labeled point when strictly within `theta_nn`, else `None`.
pub fn interpolate_labels(
    queries: &[Vector3<f64>],
    labeled_points: &[Vector3<f64>],
    theta_nn: f64,
) -> Vec<Option<usize>> {
    assert!(theta_nn > 0.0, "theta_nn must be positive");
    if labeled_points.is_empty() {
        return vec![None; queries.len()];
    }
    let tree = KdTree::build(labeled_points);
    let t2 = theta_nn * theta_nn;
    queries
        .iter()
        .map(|q| {
            let (idx, d2) = tree.nearest(q);
            (d2 < t2).then_some(idx)
        })
        .collect()
}
