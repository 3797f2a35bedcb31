//! Training losses with hand-derived analytic gradients.
//!
//! The total objective is a Chamfer shape term plus gated grasp terms:
//! grasp-success BCE (top-k per direction), width-bin BCE over paired
//! positive points, and a symmetric keypoint distance for the 6-DoF pose.
//! Grasp terms (values and gradients) are exactly zero while the Chamfer
//! loss sits above the gate threshold.
//!
//! All gradients are taken with respect to the prediction channels of a
//! [`DenseGraspCloud`] (positions, gs, z1, z2, width bins) and are
//! validated against central finite differences in the test suite.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::cloud::{CanonicalObjectSample, DenseGraspCloud};
use crate::error::{Error, Result};
use crate::gripper::{
    grasp_pose_from_params, gripper_keypoints, onehot_to_width, orthonormalize, symmetric_keypoints,
    GripperSpec,
};
use crate::kdtree::KdTree;

/// Probability clipping floor for BCE terms.
pub const BCE_CLIP: f64 = 1e-7;

/// Loss weights and pairing thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_shape: f64,
    pub lambda_grasp: f64,
    pub lambda_gs: f64,
    pub lambda_gw: f64,
    pub lambda_6dof: f64,
    /// Chamfer gate threshold (unit-space squared distances).
    pub theta_chamfer: f64,
    /// Nearest-neighbor pairing radius (unit space).
    pub theta_nn: f64,
    /// Top-k count for the grasp-success BCE; clipped to the pair count.
    pub top_k: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_shape: 1.0,
            lambda_grasp: 1.0,
            lambda_gs: 1.0,
            lambda_gw: 1.0,
            lambda_6dof: 0.1,
            theta_chamfer: 5e-4,
            theta_nn: 0.01,
            top_k: 512,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_shape", self.lambda_shape),
            ("lambda_grasp", self.lambda_grasp),
            ("lambda_gs", self.lambda_gs),
            ("lambda_gw", self.lambda_gw),
            ("lambda_6dof", self.lambda_6dof),
        ] {
            if v < 0.0 {
                return Err(Error::config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.theta_chamfer > 0.0 && self.theta_nn > 0.0) {
            return Err(Error::config("theta_chamfer and theta_nn must be > 0".to_string()));
        }
        if self.top_k < 1 {
            return Err(Error::config("top_k must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Per-datapoint loss breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub chamfer: f64,
    pub gs: f64,
    pub gw: f64,
    pub sixdof: f64,
    pub gate_open: bool,
    pub pairs_pred_to_gt: usize,
    pub pairs_gt_to_pred: usize,
    pub pairs_positive: usize,
}

/// Gradient with respect to every prediction channel, same layout as
/// [`DenseGraspCloud`].
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGrad {
    pub n_width_bins: usize,
    pub positions: Vec<Vector3<f64>>,
    pub gs: Vec<f64>,
    pub z1: Vec<Vector3<f64>>,
    pub z2: Vec<Vector3<f64>>,
    pub width_onehot: Vec<f64>,
}

impl CloudGrad {
    pub fn zeros(n: usize, n_width_bins: usize) -> CloudGrad {
        CloudGrad {
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

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.positions {
            *v *= s;
        }
        for v in &mut self.gs {
            *v *= s;
        }
        for v in &mut self.z1 {
            *v *= s;
        }
        for v in &mut self.z2 {
            *v *= s;
        }
        for v in &mut self.width_onehot {
            *v *= s;
        }
    }

    pub fn add_scaled(&mut self, other: &CloudGrad, s: f64) {
        for (a, b) in self.positions.iter_mut().zip(&other.positions) {
            *a += b * s;
        }
        for (a, b) in self.gs.iter_mut().zip(&other.gs) {
            *a += b * s;
        }
        for (a, b) in self.z1.iter_mut().zip(&other.z1) {
            *a += b * s;
        }
        for (a, b) in self.z2.iter_mut().zip(&other.z2) {
            *a += b * s;
        }
        for (a, b) in self.width_onehot.iter_mut().zip(&other.width_onehot) {
            *a += b * s;
        }
    }
}

/// Bidirectional Chamfer loss (training convention): the mean squared
/// nearest-neighbor distance in each direction, summed. Returns the value
/// and its gradient with respect to the `pred` points.
pub fn chamfer(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
) -> Result<(f64, Vec<Vector3<f64>>)> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let n = pred.len() as f64;
    let m = gt.len() as f64;
    let mut grad = vec![Vector3::zeros(); pred.len()];

    let gt_tree = KdTree::build(gt);
    let mut sum_fwd = 0.0;
    for (i, p) in pred.iter().enumerate() {
        let (j, d2) = gt_tree.nearest(p);
        sum_fwd += d2;
        grad[i] += (p - gt[j]) * (2.0 / n);
    }

    let pred_tree = KdTree::build(pred);
    let mut sum_bwd = 0.0;
    for q in gt.iter() {
        let (i, d2) = pred_tree.nearest(q);
        sum_bwd += d2;
        grad[i] += (pred[i] - q) * (2.0 / m);
    }

    Ok((sum_fwd / n + sum_bwd / m, grad))
}

/// Nearest-neighbor pairs: `(i, j)` where `p2[j]` is the nearest point to
/// `p1[i]` and their distance is strictly below `theta`. At most one pair
/// per `p1` index.
pub fn nn_pairs(p1: &[Vector3<f64>], p2: &[Vector3<f64>], theta: f64) -> Vec<(usize, usize)> {
    assert!(theta > 0.0, "pairing radius must be positive");
    if p1.is_empty() || p2.is_empty() {
        return Vec::new();
    }
    let tree = KdTree::build(p2);
    let t2 = theta * theta;
    let mut pairs = Vec::new();
    for (i, p) in p1.iter().enumerate() {
        let (j, d2) = tree.nearest(p);
        if d2 < t2 {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Clipped binary cross entropy and its derivative in the prediction.
fn bce(pred: f64, target: f64) -> (f64, f64) {
    let p = pred.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
    let value = -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
    let grad = if pred > BCE_CLIP && pred < 1.0 - BCE_CLIP {
        -target / p + (1.0 - target) / (1.0 - p)
    } else {
        0.0
    };
    (value, grad)
}

/// Indices of the `k` largest values, ties broken toward lower indices.
fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k.min(values.len()));
    order
}

/// Positive-label view of a ground-truth sample.
struct GtPositives {
    /// Original label indices of positive points.
    indices: Vec<usize>,
    /// Their positions, same order.
    positions: Vec<Vector3<f64>>,
}

impl GtPositives {
    fn collect(gt: &CanonicalObjectSample) -> GtPositives {
        let indices = gt.labels.positive_indices();
        let positions = indices.iter().map(|&i| gt.cloud.points[i]).collect();
        GtPositives { indices, positions }
    }
}

fn gs_loss_impl(
    pred: &DenseGraspCloud,
    gt: &CanonicalObjectSample,
    fwd: &[(usize, usize)],
    bwd: &[(usize, usize)],
    k: usize,
    grad: &mut CloudGrad,
    weight: f64,
) -> f64 {
    // One direction: BCE(prediction gs, label gs) over its pairs, keep
    // the k largest, mean them. The two directional means are averaged.
    let mut total = 0.0;
    for (pairs, pred_first) in [(fwd, true), (bwd, false)] {
        if pairs.is_empty() {
            continue;
        }
        let mut values = Vec::with_capacity(pairs.len());
        let mut grads = Vec::with_capacity(pairs.len());
        for &(x, y) in pairs {
            let (pi, gj) = if pred_first { (x, y) } else { (y, x) };
            let target = if gt.labels.gs[gj] { 1.0 } else { 0.0 };
            let (v, g) = bce(pred.gs[pi], target);
            values.push(v);
            grads.push((pi, g));
        }
        let selected = top_k_indices(&values, k);
        let count = selected.len() as f64;
        let mut dir_sum = 0.0;
        for idx in selected {
            dir_sum += values[idx];
            let (pi, g) = grads[idx];
            grad.gs[pi] += weight * g / (2.0 * count);
        }
        total += dir_sum / count;
    }
    total / 2.0
}

/// Grasp-success BCE with top-k selection in both pairing directions.
pub fn grasp_success_loss(
    pred: &DenseGraspCloud,
    gt: &CanonicalObjectSample,
    cfg: &LossConfig,
) -> (f64, CloudGrad) {
    let mut grad = CloudGrad::zeros(pred.len(), pred.n_width_bins);
    let fwd = nn_pairs(&pred.positions, &gt.cloud.points, cfg.theta_nn);
    let bwd = nn_pairs(&gt.cloud.points, &pred.positions, cfg.theta_nn);
    let value = gs_loss_impl(pred, gt, &fwd, &bwd, cfg.top_k, &mut grad, 1.0);
    (value, grad)
}

fn gw_loss_impl(
    pred: &DenseGraspCloud,
    gt: &CanonicalObjectSample,
    positives: &GtPositives,
    pos_pairs: &[(usize, usize)],
    spec: &GripperSpec,
    grad: &mut CloudGrad,
    weight: f64,
) -> f64 {
    if pos_pairs.is_empty() {
        return 0.0;
    }
    let bins = pred.n_width_bins;
    let denom = (pos_pairs.len() * bins) as f64;
    let mut sum = 0.0;
    for &(pi, pj) in pos_pairs {
        let gt_idx = positives.indices[pj];
        let target = crate::gripper::width_to_onehot(gt.labels.width[gt_idx], spec)
            .expect("positive labels have non-negative widths");
        let row = pi * bins;
        for b in 0..bins {
            let (v, g) = bce(pred.width_onehot[row + b], target[b]);
            sum += v;
            grad.width_onehot[row + b] += weight * g / denom;
        }
    }
    sum / denom
}

/// Width-bin BCE over predicted points paired to positive ground-truth
/// points, averaged over pairs and bins.
pub fn grasp_width_loss(
    pred: &DenseGraspCloud,
    gt: &CanonicalObjectSample,
    cfg: &LossConfig,
    spec: &GripperSpec,
) -> (f64, CloudGrad) {
    let mut grad = CloudGrad::zeros(pred.len(), pred.n_width_bins);
    let positives = GtPositives::collect(gt);
    let pos_pairs = nn_pairs(&pred.positions, &positives.positions, cfg.theta_nn);
    let value = gw_loss_impl(pred, gt, &positives, &pos_pairs, spec, &mut grad, 1.0);
    (value, grad)
}

fn sixdof_loss_impl(
    pred: &DenseGraspCloud,
    gt: &CanonicalObjectSample,
    positives: &GtPositives,
    pos_pairs: &[(usize, usize)],
    spec: &GripperSpec,
    grad: &mut CloudGrad,
    weight: f64,
) -> f64 {
    // Pairs whose direction prediction is degenerate cannot form a pose
    // and are excluded from the average.
    struct PairTerm {
        pi: usize,
        loss: f64,
        g_p: Vector3<f64>,
        g_z1: Vector3<f64>,
        g_z2: Vector3<f64>,
    }

    let mut terms: Vec<PairTerm> = Vec::with_capacity(pos_pairs.len());
    for &(pi, pj) in pos_pairs {
        let Ok((b, a)) = orthonormalize(&pred.z1[pi], &pred.z2[pi]) else {
            continue;
        };
        let width = onehot_to_width(pred.width_row(pi), spec);
        let pose = grasp_pose_from_params(&pred.positions[pi], &a, &b, width, spec)
            .expect("orthonormalized directions");
        let pred_keys = gripper_keypoints(&pose, spec);

        let gt_idx = positives.indices[pj];
        let gt_pose = grasp_pose_from_params(
            &gt.cloud.points[gt_idx],
            &gt.labels.approach[gt_idx],
            &gt.labels.baseline[gt_idx],
            gt.labels.width[gt_idx],
            spec,
        )
        .expect("validated ground-truth labels");
        let gt_keys = gripper_keypoints(&gt_pose, spec);
        let gt_sym = symmetric_keypoints(&gt_keys);

        let d_plain = pred_keys.mean_distance(&gt_keys);
        let d_sym = pred_keys.mean_distance(&gt_sym);
        let (loss, target) = if d_plain <= d_sym {
            (d_plain, &gt_keys)
        } else {
            (d_sym, &gt_sym)
        };

        // Gradients of the mean keypoint distance through the keypoint
        // construction:
        //   base  = p + (w/2) b - 2 d0 a
        //   lroot = p - d0 a
        //   rroot = p + w b - d0 a
        //   ltip  = p + (L - d0) a
        //   rtip  = p + w b + (L - d0) a
        let c_b = [width / 2.0, 0.0, width, 0.0, width];
        let c_a = [
            -2.0 * spec.d0,
            -spec.d0,
            -spec.d0,
            spec.finger_len - spec.d0,
            spec.finger_len - spec.d0,
        ];
        let pred_arr = pred_keys.as_array();
        let target_arr = target.as_array();
        let mut g_p = Vector3::zeros();
        let mut g_b = Vector3::zeros();
        let mut g_a = Vector3::zeros();
        for m in 0..5 {
            let diff = pred_arr[m] - target_arr[m];
            let dist = diff.norm();
            if dist > 0.0 {
                let g = diff / (dist * 5.0);
                g_p += g;
                g_b += g * c_b[m];
                g_a += g * c_a[m];
            }
        }

        // Chain a and b back to the raw directions. With n1 = |z1|,
        // u = z2 - <b,z2> b, nu = |u|:
        //   db/dz1 = (I - b b^T) / n1
        //   da/dz2 = (I - a a^T)(I - b b^T) / nu
        //   da/db  = -(I - a a^T)(b z2^T + <b,z2> I) / nu
        let z1 = pred.z1[pi];
        let z2 = pred.z2[pi];
        let n1 = z1.norm();
        let u = z2 - b * b.dot(&z2);
        let nu = u.norm();

        let w1 = g_a - a * a.dot(&g_a); // (I - a a^T) g_a
        let g_z2 = (w1 - b * b.dot(&w1)) / nu;
        let from_a = -(z2 * b.dot(&w1) + w1 * b.dot(&z2)) / nu;
        let g_bt = g_b + from_a;
        let g_z1 = (g_bt - b * b.dot(&g_bt)) / n1;

        terms.push(PairTerm {
            pi,
            loss,
            g_p,
            g_z1,
            g_z2,
        });
    }

    if terms.is_empty() {
        return 0.0;
    }
    let count = terms.len() as f64;
    let mut sum = 0.0;
    for t in &terms {
        sum += t.loss;
        grad.positions[t.pi] += t.g_p * (weight / count);
        grad.z1[t.pi] += t.g_z1 * (weight / count);
        grad.z2[t.pi] += t.g_z2 * (weight / count);
    }
    sum / count
}

/// Symmetric keypoint pose loss over predicted points paired to positive
/// ground-truth points.
pub fn grasp_6dof_loss(
    pred: &DenseGraspCloud,
    gt: &CanonicalObjectSample,
    spec: &GripperSpec,
    cfg: &LossConfig,
) -> (f64, CloudGrad) {
    let mut grad = CloudGrad::zeros(pred.len(), pred.n_width_bins);
    let positives = GtPositives::collect(gt);
    let pos_pairs = nn_pairs(&pred.positions, &positives.positions, cfg.theta_nn);
    let value = sixdof_loss_impl(pred, gt, &positives, &pos_pairs, spec, &mut grad, 1.0);
    (value, grad)
}

/// The gated total loss. The Chamfer term always contributes; grasp terms
/// (values and gradients) are exactly zero unless the Chamfer loss is at
/// or below the gate threshold.
pub fn total_loss(
    pred: &DenseGraspCloud,
    gt: &CanonicalObjectSample,
    cfg: &LossConfig,
    spec: &GripperSpec,
) -> Result<(LossReport, CloudGrad)> {
    cfg.validate()?;
    let n = pred.len();
    let mut grad = CloudGrad::zeros(n, pred.n_width_bins);

    let (chamfer_value, chamfer_grad) = chamfer(&pred.positions, &gt.cloud.points)?;
    for (g, c) in grad.positions.iter_mut().zip(&chamfer_grad) {
        *g += c * cfg.lambda_shape;
    }

    let gate_open = chamfer_value <= cfg.theta_chamfer;
    let mut report = LossReport {
        total: cfg.lambda_shape * chamfer_value,
        chamfer: chamfer_value,
        gs: 0.0,
        gw: 0.0,
        sixdof: 0.0,
        gate_open,
        pairs_pred_to_gt: 0,
        pairs_gt_to_pred: 0,
        pairs_positive: 0,
    };
    if !gate_open {
        return Ok((report, grad));
    }

    let fwd = nn_pairs(&pred.positions, &gt.cloud.points, cfg.theta_nn);
    let bwd = nn_pairs(&gt.cloud.points, &pred.positions, cfg.theta_nn);
    let positives = GtPositives::collect(gt);
    let pos_pairs = nn_pairs(&pred.positions, &positives.positions, cfg.theta_nn);
    report.pairs_pred_to_gt = fwd.len();
    report.pairs_gt_to_pred = bwd.len();
    report.pairs_positive = pos_pairs.len();

    let w = cfg.lambda_grasp;
    report.gs = gs_loss_impl(pred, gt, &fwd, &bwd, cfg.top_k, &mut grad, w * cfg.lambda_gs);
    report.gw = gw_loss_impl(pred, gt, &positives, &pos_pairs, spec, &mut grad, w * cfg.lambda_gw);
    report.sixdof = sixdof_loss_impl(pred, gt, &positives, &pos_pairs, spec, &mut grad, w * cfg.lambda_6dof);
    report.total += w * (cfg.lambda_gs * report.gs + cfg.lambda_gw * report.gw + cfg.lambda_6dof * report.sixdof);

    if !report.total.is_finite() {
        return Err(Error::DivergenceDetected(format!("total loss = {}", report.total)));
    }
    Ok((report, grad))
}

/// Evaluation Chamfer metric: mean Euclidean (non-squared) bidirectional
/// nearest-neighbor distance, averaged over the two directions.
pub fn chamfer_eval(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let gt_tree = KdTree::build(gt);
    let fwd: f64 = pred.iter().map(|p| gt_tree.nearest(p).1.sqrt()).sum::<f64>() / pred.len() as f64;
    let pred_tree = KdTree::build(pred);
    let bwd: f64 = gt.iter().map(|q| pred_tree.nearest(q).1.sqrt()).sum::<f64>() / gt.len() as f64;
    Ok((fwd + bwd) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{Category, DenseGraspLabel, UnitCanonicalCloud};
    use crate::kdtree::dist2;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut impl Rng, half: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-half..half),
            rng.random_range(-half..half),
            rng.random_range(-half..half),
        )
    }

    /// Random orthonormal (approach, baseline).
    fn rand_frame(rng: &mut impl Rng) -> (Vector3<f64>, Vector3<f64>) {
        loop {
            if let Ok((b, a)) = orthonormalize(&rand_vec(rng, 1.0), &rand_vec(rng, 1.0)) {
                return (a, b);
            }
        }
    }

    /// Random ground-truth sample; roughly half the points positive.
    fn random_gt(rng: &mut ChaCha8Rng, n: usize, spec: &GripperSpec) -> CanonicalObjectSample {
        // Positions spread far enough apart that pairings stay stable
        // under finite-difference perturbations.
        let points: Vec<Vector3<f64>> = (0..n).map(|_| rand_vec(rng, 0.45)).collect();
        let normals = vec![Vector3::y(); n];
        let mut labels = DenseGraspLabel {
            gs: Vec::new(),
            baseline: Vec::new(),
            approach: Vec::new(),
            width: Vec::new(),
        };
        for _ in 0..n {
            let positive = rng.random_range(0.0..1.0) < 0.5;
            let (a, b) = rand_frame(rng);
            labels.gs.push(positive);
            labels.baseline.push(if positive { b } else { Vector3::zeros() });
            labels.approach.push(if positive { a } else { Vector3::zeros() });
            labels
                .width
                .push(if positive { rng.random_range(0.01..spec.w_max) } else { 0.0 });
        }
        CanonicalObjectSample {
            category: Category::Can,
            cloud: UnitCanonicalCloud {
                category: Category::Can,
                points,
                normals,
            },
            scale: 0.2,
            labels,
        }
    }

    /// Random prediction near the ground-truth positions.
    fn random_pred(rng: &mut ChaCha8Rng, gt: &CanonicalObjectSample, spec: &GripperSpec) -> DenseGraspCloud {
        let n = gt.cloud.len();
        let bins = spec.n_width_bins;
        let mut pred = DenseGraspCloud::zeros(n, bins);
        for i in 0..n {
            pred.positions[i] = gt.cloud.points[i] + rand_vec(rng, 0.003);
            pred.gs[i] = rng.random_range(0.05..0.95);
            pred.z1[i] = rand_vec(rng, 1.0);
            pred.z2[i] = rand_vec(rng, 1.0);
            // Keep a clear argmax so the decoded width is stable under
            // +/- h channel perturbations.
            let hot = rng.random_range(0..bins);
            for b in 0..bins {
                pred.width_onehot[i * bins + b] = if b == hot {
                    rng.random_range(0.6..0.9)
                } else {
                    rng.random_range(0.05..0.4)
                };
            }
        }
        pred
    }

    // ------------------------------------------------------------------
    // Finite-difference harness over all prediction channels.
    // ------------------------------------------------------------------

    fn channel_count(pred: &DenseGraspCloud) -> usize {
        pred.len() * (10 + pred.n_width_bins)
    }

    fn channel_mut(pred: &mut DenseGraspCloud, idx: usize) -> &mut f64 {
        let per = 10 + pred.n_width_bins;
        let point = idx / per;
        let ch = idx % per;
        match ch {
            0..=2 => &mut pred.positions[point][ch],
            3 => &mut pred.gs[point],
            4..=6 => &mut pred.z1[point][ch - 4],
            7..=9 => &mut pred.z2[point][ch - 7],
            _ => {
                let bins = pred.n_width_bins;
                &mut pred.width_onehot[point * bins + (ch - 10)]
            }
        }
    }

    fn grad_channel(grad: &CloudGrad, idx: usize) -> f64 {
        let per = 10 + grad.n_width_bins;
        let point = idx / per;
        let ch = idx % per;
        match ch {
            0..=2 => grad.positions[point][ch],
            3 => grad.gs[point],
            4..=6 => grad.z1[point][ch - 4],
            7..=9 => grad.z2[point][ch - 7],
            _ => grad.width_onehot[point * grad.n_width_bins + (ch - 10)],
        }
    }

    fn fd_check(
        pred: &DenseGraspCloud,
        analytic: &CloudGrad,
        f: impl Fn(&DenseGraspCloud) -> f64,
        label: &str,
    ) {
        let h = 1e-5;
        let mut work = pred.clone();
        for idx in 0..channel_count(pred) {
            let original = *channel_mut(&mut work, idx);
            *channel_mut(&mut work, idx) = original + h;
            let up = f(&work);
            *channel_mut(&mut work, idx) = original - h;
            let down = f(&work);
            *channel_mut(&mut work, idx) = original;
            let numeric = (up - down) / (2.0 * h);
            let exact = grad_channel(analytic, idx);
            let err = (numeric - exact).abs();
            assert!(
                err <= 1e-4 * exact.abs().max(numeric.abs()).max(1.0) || err <= 1e-7,
                "{label}: channel {idx}: numeric {numeric:.9e} vs analytic {exact:.9e}"
            );
        }
    }

    // ------------------------------------------------------------------
    // Chamfer.
    // ------------------------------------------------------------------

    fn chamfer_brute(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> f64 {
        let min_d2 = |x: &Vector3<f64>, ys: &[Vector3<f64>]| {
            ys.iter().map(|y| dist2(x, y)).fold(f64::INFINITY, f64::min)
        };
        p.iter().map(|x| min_d2(x, q)).sum::<f64>() / p.len() as f64
            + q.iter().map(|y| min_d2(y, p)).sum::<f64>() / q.len() as f64
    }

    #[test]
    fn chamfer_identity_is_zero() {
        let pts = vec![Vector3::new(0.1, 0.2, 0.3), Vector3::new(-0.4, 0.0, 0.2)];
        let (v, _) = chamfer(&pts, &pts).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn chamfer_single_point_pair() {
        let p = vec![Vector3::zeros()];
        let q = vec![Vector3::new(1.0, 0.0, 0.0)];
        let (v, _) = chamfer(&p, &q).unwrap();
        assert!((v - 2.0).abs() < 1e-15);
    }

    /// Points whose nearest-neighbor assignment could flip under a small
    /// perturbation (near-tied first and second neighbors, in either
    /// direction); the subgradient is not unique there.
    fn unstable_points(p: &[Vector3<f64>], q: &[Vector3<f64>], gap: f64) -> Vec<bool> {
        let mut unstable = vec![false; p.len()];
        let two_nearest = |x: &Vector3<f64>, ys: &[Vector3<f64>]| {
            let mut d = [f64::INFINITY, f64::INFINITY];
            let mut idx = [usize::MAX, usize::MAX];
            for (i, y) in ys.iter().enumerate() {
                let di = dist2(x, y).sqrt();
                if di < d[0] {
                    d[1] = d[0];
                    idx[1] = idx[0];
                    d[0] = di;
                    idx[0] = i;
                } else if di < d[1] {
                    d[1] = di;
                    idx[1] = i;
                }
            }
            (d, idx)
        };
        for (i, x) in p.iter().enumerate() {
            let (d, _) = two_nearest(x, q);
            if d[1] - d[0] < gap {
                unstable[i] = true;
            }
        }
        for y in q.iter() {
            let (d, idx) = two_nearest(y, p);
            if d[1] - d[0] < gap {
                unstable[idx[0]] = true;
                if idx[1] != usize::MAX {
                    unstable[idx[1]] = true;
                }
            }
        }
        unstable
    }

    #[test]
    fn chamfer_matches_brute_force_and_fd() {
        let mut rng = crate::seeding::seeded_rng(60);
        for trial in 0..20 {
            let n = 16 + trial * 2;
            let p: Vec<Vector3<f64>> = (0..n).map(|_| rand_vec(&mut rng, 0.5)).collect();
            let q: Vec<Vector3<f64>> = (0..n + 5).map(|_| rand_vec(&mut rng, 0.5)).collect();
            let (v, grad) = chamfer(&p, &q).unwrap();
            assert!((v - chamfer_brute(&p, &q)).abs() < 1e-12);

            // Finite differences on the point coordinates, skipping
            // points sitting on an assignment kink.
            let h = 1e-6;
            let skip = unstable_points(&p, &q, 1e-3);
            let mut work = p.clone();
            for i in 0..p.len() {
                if skip[i] {
                    continue;
                }
                for c in 0..3 {
                    work[i][c] += h;
                    let up = chamfer_brute(&work, &q);
                    work[i][c] -= 2.0 * h;
                    let down = chamfer_brute(&work, &q);
                    work[i][c] += h;
                    let numeric = (up - down) / (2.0 * h);
                    assert!(
                        (numeric - grad[i][c]).abs() < 1e-5 * numeric.abs().max(1.0),
                        "grad mismatch at point {i} coord {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn chamfer_is_symmetric() {
        let mut rng = crate::seeding::seeded_rng(61);
        let p: Vec<Vector3<f64>> = (0..33).map(|_| rand_vec(&mut rng, 0.5)).collect();
        let q: Vec<Vector3<f64>> = (0..47).map(|_| rand_vec(&mut rng, 0.5)).collect();
        assert_eq!(chamfer(&p, &q).unwrap().0, chamfer(&q, &p).unwrap().0);
    }

    #[test]
    fn chamfer_rejects_empty() {
        assert!(matches!(chamfer(&[], &[Vector3::zeros()]), Err(Error::EmptyCloud)));
    }

    #[test]
    fn chamfer_eval_conventions() {
        let p = vec![Vector3::zeros()];
        let q = vec![Vector3::new(0.01, 0.0, 0.0)];
        assert!((chamfer_eval(&p, &q).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(chamfer_eval(&p, &p).unwrap(), 0.0);
    }

    // ------------------------------------------------------------------
    // Pairing.
    // ------------------------------------------------------------------

    #[test]
    fn nn_pairs_identity_and_threshold() {
        let mut rng = crate::seeding::seeded_rng(62);
        let p: Vec<Vector3<f64>> = (0..40).map(|_| rand_vec(&mut rng, 0.5)).collect();
        let pairs = nn_pairs(&p, &p, 0.01);
        assert_eq!(pairs.len(), p.len());
        for (i, (a, b)) in pairs.iter().enumerate() {
            assert_eq!((*a, *b), (i, i));
        }
        // Threshold below the minimum inter-cloud distance: empty.
        let q: Vec<Vector3<f64>> = p.iter().map(|v| v + Vector3::new(10.0, 0.0, 0.0)).collect();
        assert!(nn_pairs(&p, &q, 0.5).is_empty());
    }

    #[test]
    fn nn_pairs_matches_brute_force() {
        let mut rng = crate::seeding::seeded_rng(63);
        for _ in 0..50 {
            let p1: Vec<Vector3<f64>> = (0..64).map(|_| rand_vec(&mut rng, 0.5)).collect();
            let p2: Vec<Vector3<f64>> = (0..48).map(|_| rand_vec(&mut rng, 0.5)).collect();
            let theta = rng.random_range(0.05..0.8);
            let got = nn_pairs(&p1, &p2, theta);
            let mut want = Vec::new();
            for (i, p) in p1.iter().enumerate() {
                let (j, d2) = crate::kdtree::nearest_brute(&p2, p);
                if d2 < theta * theta {
                    want.push((i, j));
                }
            }
            assert_eq!(got, want);
        }
    }

    // ------------------------------------------------------------------
    // Grasp-success loss.
    // ------------------------------------------------------------------

    #[test]
    fn gs_loss_perfect_prediction_is_tiny() {
        let spec = GripperSpec::default();
        let mut rng = crate::seeding::seeded_rng(64);
        let gt = random_gt(&mut rng, 32, &spec);
        let mut pred = random_pred(&mut rng, &gt, &spec);
        pred.positions = gt.cloud.points.clone();
        for i in 0..pred.len() {
            pred.gs[i] = if gt.labels.gs[i] { 1.0 - BCE_CLIP } else { BCE_CLIP };
        }
        let (v, _) = grasp_success_loss(&pred, &gt, &LossConfig::default());
        assert!(v < 1e-5, "loss {v}");
    }

    #[test]
    fn gs_loss_hand_computed_top_k() {
        // Eight points with identical pred/gt positions so both pairing
        // directions give (i, i); k = 4 keeps the four largest BCE terms.
        let spec = GripperSpec::default();
        let n = 8;
        let positions: Vec<Vector3<f64>> =
            (0..n).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let gt_gs = [true, false, true, false, true, false, true, false];
        let pred_gs = [0.9, 0.4, 0.6, 0.1, 0.3, 0.55, 0.75, 0.2];

        let gt = CanonicalObjectSample {
            category: Category::Can,
            cloud: UnitCanonicalCloud {
                category: Category::Can,
                points: positions.clone(),
                normals: vec![Vector3::y(); n],
            },
            scale: 0.2,
            labels: DenseGraspLabel {
                gs: gt_gs.to_vec(),
                baseline: vec![Vector3::x(); n],
                approach: vec![Vector3::z(); n],
                width: gt_gs.iter().map(|&g| if g { 0.03 } else { 0.0 }).collect(),
            },
        };
        let mut pred = DenseGraspCloud::zeros(n, spec.n_width_bins);
        pred.positions = positions;
        pred.gs = pred_gs.to_vec();
        for i in 0..n {
            pred.z1[i] = Vector3::x();
            pred.z2[i] = Vector3::z();
            pred.width_onehot[i * spec.n_width_bins] = 1.0;
        }

        // Hand computation: BCE = -ln(p) for positives, -ln(1-p) else.
        let bce_terms: Vec<f64> = (0..n)
            .map(|i| {
                if gt_gs[i] {
                    -pred_gs[i].ln()
                } else {
                    -(1.0 - pred_gs[i]).ln()
                }
            })
            .collect();
        let mut sorted = bce_terms.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let expected_dir = sorted[..4].iter().sum::<f64>() / 4.0;
        // Both directions see identical pairs, so the mean equals one
        // directional mean.
        let cfg = LossConfig {
            top_k: 4,
            ..LossConfig::default()
        };
        let (v, _) = grasp_success_loss(&pred, &gt, &cfg);
        assert!((v - expected_dir).abs() < 1e-12, "{v} vs {expected_dir}");
    }

    #[test]
    fn gs_loss_no_pairs_is_zero() {
        let spec = GripperSpec::default();
        let mut rng = crate::seeding::seeded_rng(65);
        let gt = random_gt(&mut rng, 16, &spec);
        let mut pred = random_pred(&mut rng, &gt, &spec);
        for p in &mut pred.positions {
            *p += Vector3::new(100.0, 0.0, 0.0);
        }
        let (v, grad) = grasp_success_loss(&pred, &gt, &LossConfig::default());
        assert_eq!(v, 0.0);
        assert!(grad.gs.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gs_loss_top_k_at_least_pair_count_is_plain_mean() {
        let spec = GripperSpec::default();
        let mut rng = crate::seeding::seeded_rng(66);
        let gt = random_gt(&mut rng, 24, &spec);
        let pred = random_pred(&mut rng, &gt, &spec);
        let big = LossConfig {
            top_k: 10_000,
            ..LossConfig::default()
        };
        let exact = LossConfig {
            top_k: 24,
            ..LossConfig::default()
        };
        let (v1, _) = grasp_success_loss(&pred, &gt, &big);
        let (v2, _) = grasp_success_loss(&pred, &gt, &exact);
        assert_eq!(v1, v2);
    }

    #[test]
    fn gs_loss_gradient_matches_fd() {
        let spec = GripperSpec::default();
        let cfg = LossConfig {
            top_k: 12,
            ..LossConfig::default()
        };
        let mut rng = crate::seeding::seeded_rng(67);
        for _ in 0..5 {
            let gt = random_gt(&mut rng, 24, &spec);
            let pred = random_pred(&mut rng, &gt, &spec);
            let (_, grad) = grasp_success_loss(&pred, &gt, &cfg);
            fd_check(&pred, &grad, |p| grasp_success_loss(p, &gt, &cfg).0, "gs");
        }
    }

    // ------------------------------------------------------------------
    // Width loss.
    // ------------------------------------------------------------------

    #[test]
    fn gw_loss_perfect_bins_are_tiny() {
        let spec = GripperSpec::default();
        let mut rng = crate::seeding::seeded_rng(68);
        let gt = random_gt(&mut rng, 32, &spec);
        let mut pred = random_pred(&mut rng, &gt, &spec);
        pred.positions = gt.cloud.points.clone();
        for i in 0..pred.len() {
            let row = i * spec.n_width_bins;
            if gt.labels.gs[i] {
                let onehot = crate::gripper::width_to_onehot(gt.labels.width[i], &spec).unwrap();
                for b in 0..spec.n_width_bins {
                    pred.width_onehot[row + b] = onehot[b].clamp(BCE_CLIP, 1.0 - BCE_CLIP);
                }
            }
        }
        let (v, _) = grasp_width_loss(&pred, &gt, &LossConfig::default(), &spec);
        assert!(v < 1e-5, "loss {v}");
    }

    #[test]
    fn gw_loss_uniform_bins_closed_form() {
        // Uniform 0.1 predictions vs any one-hot:
        // -(ln 0.1 + 9 ln 0.9) / 10.
        let spec = GripperSpec::default();
        let n = 4;
        let positions: Vec<Vector3<f64>> =
            (0..n).map(|i| Vector3::new(i as f64 * 0.5, 0.0, 0.0)).collect();
        let gt = CanonicalObjectSample {
            category: Category::Can,
            cloud: UnitCanonicalCloud {
                category: Category::Can,
                points: positions.clone(),
                normals: vec![Vector3::y(); n],
            },
            scale: 0.2,
            labels: DenseGraspLabel {
                gs: vec![true; n],
                baseline: vec![Vector3::x(); n],
                approach: vec![Vector3::z(); n],
                width: vec![0.05; n],
            },
        };
        let mut pred = DenseGraspCloud::zeros(n, spec.n_width_bins);
        pred.positions = positions;
        for v in &mut pred.width_onehot {
            *v = 0.1;
        }
        let (v, _) = grasp_width_loss(&pred, &gt, &LossConfig::default(), &spec);
        let expected = -(0.1f64.ln() + 9.0 * 0.9f64.ln()) / 10.0;
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        assert!((v - 0.3251).abs() < 1e-4);
    }

    #[test]
    fn gw_loss_no_positives_is_zero() {
        let spec = GripperSpec::default();
        let mut rng = crate::seeding::seeded_rng(69);
        let mut gt = random_gt(&mut rng, 16, &spec);
        for g in &mut gt.labels.gs {
            *g = false;
        }
        let pred = random_pred(&mut rng, &gt, &spec);
        let (v, _) = grasp_width_loss(&pred, &gt, &LossConfig::default(), &spec);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn gw_loss_gradient_matches_fd() {
        let spec = GripperSpec::default();
        let cfg = LossConfig::default();
        let mut rng = crate::seeding::seeded_rng(70);
        for _ in 0..5 {
            let gt = random_gt(&mut rng, 24, &spec);
            let pred = random_pred(&mut rng, &gt, &spec);
            let (_, grad) = grasp_width_loss(&pred, &gt, &cfg, &spec);
            fd_check(&pred, &grad, |p| grasp_width_loss(p, &gt, &cfg, &spec).0, "gw");
        }
    }

    // ------------------------------------------------------------------
    // 6-DoF keypoint loss.
    // ------------------------------------------------------------------

    /// Prediction that exactly reproduces the ground-truth grasps (widths
    /// must be bin centers for exactness).
    fn pred_matching_gt(gt: &CanonicalObjectSample, spec: &GripperSpec) -> DenseGraspCloud {
        let n = gt.cloud.len();
        let mut pred = DenseGraspCloud::zeros(n, spec.n_width_bins);
        pred.positions = gt.cloud.points.clone();
        for i in 0..n {
            if gt.labels.gs[i] {
                pred.gs[i] = 0.9;
                pred.z1[i] = gt.labels.baseline[i];
                pred.z2[i] = gt.labels.approach[i];
                let onehot = crate::gripper::width_to_onehot(gt.labels.width[i], spec).unwrap();
                pred.width_onehot[i * spec.n_width_bins..(i + 1) * spec.n_width_bins]
                    .copy_from_slice(&onehot);
            } else {
                pred.z1[i] = Vector3::x();
                pred.z2[i] = Vector3::z();
                pred.width_onehot[i * spec.n_width_bins] = 1.0;
            }
        }
        pred
    }

    fn bin_center(bin: usize, spec: &GripperSpec) -> f64 {
        (bin as f64 + 0.5) * spec.bin_width()
    }

    #[test]
    fn sixdof_zero_on_exact_prediction() {
        let spec = GripperSpec::default();
        let mut rng = crate::seeding::seeded_rng(71);
        let mut gt = random_gt(&mut rng, 24, &spec);
        for i in 0..gt.labels.len() {
            if gt.labels.gs[i] {
                gt.labels.width[i] = bin_center(4, &spec);
            }
        }
        let pred = pred_matching_gt(&gt, &spec);
        let (v, _) = grasp_6dof_loss(&pred, &gt, &spec, &LossConfig::default());
        assert!(v < 1e-12, "loss {v}");
    }

    #[test]
    fn sixdof_zero_on_symmetric_flip() {
        // The flipped grasp sits at the partner contact with a negated
        // baseline; with a huge pairing radius it pairs with the original
        // point and the symmetric keypoint branch absorbs the flip.
        let spec = GripperSpec::default();
        let width = bin_center(6, &spec);
        let p = Vector3::new(0.01, -0.02, 0.03);
        let b = Vector3::new(1.0, 2.0, -0.5).normalize();
        let a = b.cross(&Vector3::z()).normalize();
        let gt = CanonicalObjectSample {
            category: Category::Can,
            cloud: UnitCanonicalCloud {
                category: Category::Can,
                points: vec![p],
                normals: vec![Vector3::y()],
            },
            scale: 0.2,
            labels: DenseGraspLabel {
                gs: vec![true],
                baseline: vec![b],
                approach: vec![a],
                width: vec![width],
            },
        };
        let mut pred = DenseGraspCloud::zeros(1, spec.n_width_bins);
        pred.positions[0] = p + b * width;
        pred.z1[0] = -b;
        pred.z2[0] = a;
        let onehot = crate::gripper::width_to_onehot(width, &spec).unwrap();
        pred.width_onehot.copy_from_slice(&onehot);

        let cfg = LossConfig {
            theta_nn: 10.0,
            ..LossConfig::default()
        };
        let (v, _) = grasp_6dof_loss(&pred, &gt, &spec, &cfg);
        assert!(v < 1e-12, "loss {v}");
    }

    #[test]
    fn sixdof_pure_translation_equals_shift_norm() {
        let spec = GripperSpec::default();
        let mut rng = crate::seeding::seeded_rng(72);
        let mut gt = random_gt(&mut rng, 16, &spec);
        for i in 0..gt.labels.len() {
            if gt.labels.gs[i] {
                gt.labels.width[i] = bin_center(3, &spec);
            }
        }
        let delta = Vector3::new(0.002, -0.001, 0.0015);
        let mut pred = pred_matching_gt(&gt, &spec);
        for p in &mut pred.positions {
            *p += delta;
        }
        let (v, _) = grasp_6dof_loss(&pred, &gt, &spec, &LossConfig::default());
        assert!((v - delta.norm()).abs() < 1e-12, "{v} vs {}", delta.norm());
    }

    #[test]
    fn sixdof_gradient_matches_fd() {
        let spec = GripperSpec::default();
        let cfg = LossConfig::default();
        let mut rng = crate::seeding::seeded_rng(73);
        for _ in 0..5 {
            let gt = random_gt(&mut rng, 24, &spec);
            let pred = random_pred(&mut rng, &gt, &spec);
            let (_, grad) = grasp_6dof_loss(&pred, &gt, &spec, &cfg);
            fd_check(&pred, &grad, |p| grasp_6dof_loss(p, &gt, &spec, &cfg).0, "6dof");
        }
    }

    // ------------------------------------------------------------------
    // Total gated loss.
    // ------------------------------------------------------------------

    #[test]
    fn gate_closed_zeroes_grasp_terms_exactly() {
        let spec = GripperSpec::default();
        let mut rng = crate::seeding::seeded_rng(74);
        let gt = random_gt(&mut rng, 32, &spec);
        let pred = random_pred(&mut rng, &gt, &spec);
        // Force the gate closed.
        let cfg = LossConfig {
            theta_chamfer: 1e-12,
            ..LossConfig::default()
        };
        let (report, grad) = total_loss(&pred, &gt, &cfg, &spec).unwrap();
        assert!(!report.gate_open);
        assert_eq!(report.gs, 0.0);
        assert_eq!(report.gw, 0.0);
        assert_eq!(report.sixdof, 0.0);
        assert_eq!(report.total, cfg.lambda_shape * report.chamfer);
        // Grasp-channel gradients are exactly zero.
        assert!(grad.gs.iter().all(|&g| g == 0.0));
        assert!(grad.z1.iter().all(|v| v.norm() == 0.0));
        assert!(grad.z2.iter().all(|v| v.norm() == 0.0));
        assert!(grad.width_onehot.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn perfect_prediction_total_is_tiny() {
        let spec = GripperSpec::default();
        let mut rng = crate::seeding::seeded_rng(75);
        let mut gt = random_gt(&mut rng, 24, &spec);
        for i in 0..gt.labels.len() {
            if gt.labels.gs[i] {
                gt.labels.width[i] = bin_center(5, &spec);
            }
        }
        let mut pred = pred_matching_gt(&gt, &spec);
        for i in 0..pred.len() {
            pred.gs[i] = if gt.labels.gs[i] { 1.0 - BCE_CLIP } else { BCE_CLIP };
            let row = i * spec.n_width_bins;
            for b in 0..spec.n_width_bins {
                let v = pred.width_onehot[row + b];
                pred.width_onehot[row + b] = v.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
            }
        }
        let (report, _) = total_loss(&pred, &gt, &LossConfig::default(), &spec).unwrap();
        assert!(report.gate_open);
        assert!(report.total < 1e-5, "total {}", report.total);
    }

    #[test]
    fn total_gradient_matches_fd_gate_open() {
        let spec = GripperSpec::default();
        let cfg = LossConfig {
            theta_chamfer: 10.0, // keep the gate open for random clouds
            top_k: 16,
            ..LossConfig::default()
        };
        let mut rng = crate::seeding::seeded_rng(76);
        for _ in 0..3 {
            let gt = random_gt(&mut rng, 20, &spec);
            let pred = random_pred(&mut rng, &gt, &spec);
            let (report, grad) = total_loss(&pred, &gt, &cfg, &spec).unwrap();
            assert!(report.gate_open);
            fd_check(&pred, &grad, |p| total_loss(p, &gt, &cfg, &spec).unwrap().0.total, "total-open");
        }
    }

    #[test]
    fn total_gradient_matches_fd_gate_closed() {
        let spec = GripperSpec::default();
        let cfg = LossConfig {
            theta_chamfer: 1e-12,
            ..LossConfig::default()
        };
        let mut rng = crate::seeding::seeded_rng(77);
        let gt = random_gt(&mut rng, 20, &spec);
        let pred = random_pred(&mut rng, &gt, &spec);
        let (report, grad) = total_loss(&pred, &gt, &cfg, &spec).unwrap();
        assert!(!report.gate_open);
        fd_check(&pred, &grad, |p| total_loss(p, &gt, &cfg, &spec).unwrap().0.total, "total-closed");
    }

    #[test]
    fn losses_are_non_negative() {
        let spec = GripperSpec::default();
        let cfg = LossConfig {
            theta_chamfer: 10.0,
            ..LossConfig::default()
        };
        let mut rng = crate::seeding::seeded_rng(78);
        for _ in 0..10 {
            let gt = random_gt(&mut rng, 16, &spec);
            let pred = random_pred(&mut rng, &gt, &spec);
            let (report, _) = total_loss(&pred, &gt, &cfg, &spec).unwrap();
            assert!(report.chamfer >= 0.0);
            assert!(report.gs >= 0.0);
            assert!(report.gw >= 0.0);
            assert!(report.sixdof >= 0.0);
            assert!(report.total >= 0.0);
        }
    }
}
