//! Closed-form parallel-jaw grasp parametrization.
//!
//! A grasp at a surface point is described by a baseline direction `b`
//! (along the closing line), an approach direction `a` (the direction the
//! gripper advances), and a jaw width. The full SE(3) gripper pose is
//! recovered as
//!
//! ```text
//! t = p + (width / 2) * b - d0 * a
//! R = [ b | a x b | a ]        (columns)
//! ```
//!
//! where `d0` is the fixed offset between the gripper frame and the jaw
//! roots. Width is discretized into equal bins over `[0, w_max]`; the
//! decoded width is the center of the highest-scoring bin.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inputs with norm (or projected norm) at or below this are rejected as
/// degenerate direction predictions.
pub const EPS_DEGENERATE: f64 = 1e-8;

/// Orthonormality tolerance accepted when building a pose from externally
/// supplied directions.
pub const ORTHO_TOL: f64 = 1e-6;

/// Parallel-jaw gripper geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GripperSpec {
    /// Maximum jaw opening in meters.
    pub w_max: f64,
    /// Offset between the gripper frame and the jaw roots, meters.
    pub d0: f64,
    /// Fingertip-to-root length, meters.
    pub finger_len: f64,
    /// Number of equal width bins over `[0, w_max]`.
    pub n_width_bins: usize,
}

impl Default for GripperSpec {
    fn default() -> Self {
        GripperSpec {
            w_max: 0.08,
            d0: 0.10,
            finger_len: 0.05,
            n_width_bins: 10,
        }
    }
}

impl GripperSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_max > 0.0) {
            return Err(Error::config(format!("w_max must be > 0, got {}", self.w_max)));
        }
        if !(self.d0 >= 0.0) {
            return Err(Error::config(format!("d0 must be >= 0, got {}", self.d0)));
        }
        if !(self.finger_len > 0.0) {
            return Err(Error::config(format!(
                "finger_len must be > 0, got {}",
                self.finger_len
            )));
        }
        if self.n_width_bins < 2 {
            return Err(Error::config(format!(
                "n_width_bins must be >= 2, got {}",
                self.n_width_bins
            )));
        }
        Ok(())
    }

    /// Width of one bin segment.
    pub fn bin_width(&self) -> f64 {
        self.w_max / self.n_width_bins as f64
    }

    /// Per-point channel count of a dense grasp cloud: xyz + success +
    /// two direction vectors + width bins.
    pub fn point_channels(&self) -> usize {
        3 + 1 + 3 + 3 + self.n_width_bins
    }
}

/// Raw per-point grasp prediction channels, before pose reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct PointGraspVector {
    /// Point position (unit-canonical frame).
    pub p: Vector3<f64>,
    /// Grasp-success confidence in `[0, 1]`.
    pub gs: f64,
    /// Pre-orthonormalization baseline direction.
    pub z1: Vector3<f64>,
    /// Pre-orthonormalization approach direction.
    pub z2: Vector3<f64>,
    /// Width bin scores; sums to 1 for decoder outputs.
    pub width_onehot: Vec<f64>,
}

impl PointGraspVector {
    /// Checks the channel-count and range invariants. `decoder_output`
    /// additionally requires the bin scores to sum to one.
    pub fn validate(&self, spec: &GripperSpec, decoder_output: bool) -> Result<()> {
        if self.width_onehot.len() != spec.n_width_bins {
            return Err(Error::config(format!(
                "width_onehot has {} entries, expected {}",
                self.width_onehot.len(),
                spec.n_width_bins
            )));
        }
        if !(0.0..=1.0).contains(&self.gs) {
            return Err(Error::config(format!("gs {} outside [0,1]", self.gs)));
        }
        if decoder_output {
            let sum: f64 = self.width_onehot.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::config(format!("width bins sum to {sum}, expected 1")));
            }
        }
        Ok(())
    }
}

/// An SE(3) gripper pose plus jaw width.
#[derive(Debug, Clone, PartialEq)]
pub struct GraspPose {
    pub translation: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    /// Jaw opening in meters.
    pub width: f64,
}

impl GraspPose {
    /// Baseline direction: first rotation column.
    pub fn baseline(&self) -> Vector3<f64> {
        self.rotation.column(0).into_owned()
    }

    /// Approach direction: third rotation column.
    pub fn approach(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    /// Mid point between the two jaw contacts: `t + d0 * a`.
    pub fn closing_center(&self, spec: &GripperSpec) -> Vector3<f64> {
        self.translation + self.approach() * spec.d0
    }

    /// 4x4 homogeneous matrix, row-major when flattened.
    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Applies a rigid transform `x -> R x + t` to the pose.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> GraspPose {
        GraspPose {
            translation: rotation * self.translation + translation,
            rotation: rotation * self.rotation,
            width: self.width,
        }
    }

    /// `RᵀR = I` and `det R = +1` within `tol`, width within `[0, w_max]`.
    pub fn validate(&self, spec: &GripperSpec, tol: f64) -> Result<()> {
        let rtr = self.rotation.transpose() * self.rotation;
        let dev = (rtr - Matrix3::identity()).abs().max();
        if dev > tol {
            return Err(Error::InvalidDirections(format!("RᵀR deviates by {dev:.3e}")));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > tol {
            return Err(Error::InvalidDirections(format!("det R = {det}")));
        }
        if self.width < 0.0 || self.width > spec.w_max {
            return Err(Error::WidthOutOfRange(self.width, spec.w_max));
        }
        Ok(())
    }
}

/// The five characteristic gripper points used for pose comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointSet {
    pub base: Vector3<f64>,
    pub left_root: Vector3<f64>,
    pub right_root: Vector3<f64>,
    pub left_tip: Vector3<f64>,
    pub right_tip: Vector3<f64>,
}

impl KeypointSet {
    pub fn as_array(&self) -> [Vector3<f64>; 5] {
        [
            self.base,
            self.left_root,
            self.right_root,
            self.left_tip,
            self.right_tip,
        ]
    }

    /// Mean Euclidean distance between corresponding keypoints.
    pub fn mean_distance(&self, other: &KeypointSet) -> f64 {
        let a = self.as_array();
        let b = other.as_array();
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).sum::<f64>() / 5.0
    }

    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> KeypointSet {
        let map = |v: &Vector3<f64>| rotation * v + translation;
        KeypointSet {
            base: map(&self.base),
            left_root: map(&self.left_root),
            right_root: map(&self.right_root),
            left_tip: map(&self.left_tip),
            right_tip: map(&self.right_tip),
        }
    }
}

/// Gram-Schmidt orthonormalization of the two raw direction predictions.
///
/// Returns `(b, a)`: the unit baseline and the unit approach with the
/// baseline component removed. Inputs whose norm (or residual after
/// projection) is at most [`EPS_DEGENERATE`] are rejected; callers treat
/// such points as failed grasp predictions.
pub fn orthonormalize(z1: &Vector3<f64>, z2: &Vector3<f64>) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let n1 = z1.norm();
    if n1 <= EPS_DEGENERATE {
        return Err(Error::DegenerateDirections(format!("|z1| = {n1:.3e}")));
    }
    let b = z1 / n1;
    let u = z2 - b * b.dot(z2);
    let nu = u.norm();
    if nu <= EPS_DEGENERATE {
        return Err(Error::DegenerateDirections(format!(
            "z2 residual after projection = {nu:.3e}"
        )));
    }
    Ok((b, u / nu))
}

/// Builds the gripper pose from per-point grasp parameters.
///
/// `approach` and `baseline` must already be orthonormal (within
/// [`ORTHO_TOL`]); use [`orthonormalize`] on raw predictions first.
pub fn grasp_pose_from_params(
    p: &Vector3<f64>,
    approach: &Vector3<f64>,
    baseline: &Vector3<f64>,
    width: f64,
    spec: &GripperSpec,
) -> Result<GraspPose> {
    let na = approach.norm();
    let nb = baseline.norm();
    let dot = approach.dot(baseline);
    if (na - 1.0).abs() > ORTHO_TOL || (nb - 1.0).abs() > ORTHO_TOL || dot.abs() > ORTHO_TOL {
        return Err(Error::InvalidDirections(format!(
            "|a|={na:.9}, |b|={nb:.9}, <a,b>={dot:.3e}"
        )));
    }
    if width < 0.0 || width > spec.w_max {
        return Err(Error::WidthOutOfRange(width, spec.w_max));
    }
    let translation = p + baseline * (width / 2.0) - approach * spec.d0;
    let mut rotation = Matrix3::zeros();
    rotation.set_column(0, baseline);
    rotation.set_column(1, &approach.cross(baseline));
    rotation.set_column(2, approach);
    Ok(GraspPose {
        translation,
        rotation,
        width,
    })
}

/// Gripper keypoints for a pose: jaw roots sit at `t ± (width/2) b`, tips
/// extend `finger_len` along the approach, the base sits `d0` behind `t`.
pub fn gripper_keypoints(pose: &GraspPose, spec: &GripperSpec) -> KeypointSet {
    let b = pose.baseline();
    let a = pose.approach();
    let t = pose.translation;
    let half = pose.width / 2.0;
    let left_root = t - b * half;
    let right_root = t + b * half;
    KeypointSet {
        base: t - a * spec.d0,
        left_root,
        right_root,
        left_tip: left_root + a * spec.finger_len,
        right_tip: right_root + a * spec.finger_len,
    }
}

/// Keypoints of the same grasp with the jaws swapped, i.e. the pose
/// rotated 180 degrees about its approach axis. The base is fixed.
pub fn symmetric_keypoints(k: &KeypointSet) -> KeypointSet {
    KeypointSet {
        base: k.base,
        left_root: k.right_root,
        right_root: k.left_root,
        left_tip: k.right_tip,
        right_tip: k.left_tip,
    }
}

/// Encodes a width into a one-hot vector over `n_width_bins` equal
/// segments of `[0, w_max]`. Widths above `w_max` clamp into the last bin
/// (logged as a warning); negative widths are an error.
pub fn width_to_onehot(width: f64, spec: &GripperSpec) -> Result<Vec<f64>> {
    if width < 0.0 {
        return Err(Error::NegativeWidth(width));
    }
    if width > spec.w_max {
        log::warn!("width {width} exceeds w_max {}; clamping to last bin", spec.w_max);
    }
    let n = spec.n_width_bins;
    let bin = ((width / spec.bin_width()) as usize).min(n - 1);
    let mut onehot = vec![0.0; n];
    onehot[bin] = 1.0;
    Ok(onehot)
}

/// Decodes a bin-score vector to the center of the highest-scoring bin.
/// Ties break toward the lower bin index.
pub fn onehot_to_width(onehot: &[f64], spec: &GripperSpec) -> f64 {
    debug_assert_eq!(onehot.len(), spec.n_width_bins);
    let mut best = 0;
    for (i, &v) in onehot.iter().enumerate() {
        if v > onehot[best] {
            best = i;
        }
    }
    (best as f64 + 0.5) * spec.bin_width()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut impl Rng) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
    }

    /// Random unit approach/baseline pair, exactly orthonormalized.
    pub(crate) fn random_frame(rng: &mut impl Rng) -> (Vector3<f64>, Vector3<f64>) {
        loop {
            let z1 = rand_vec(rng);
            let z2 = rand_vec(rng);
            if let Ok((b, a)) = orthonormalize(&z1, &z2) {
                return (a, b);
            }
        }
    }

    #[test]
    fn orthonormalize_axis_aligned() {
        let (b, a) = orthonormalize(&Vector3::new(2.0, 0.0, 0.0), &Vector3::new(0.0, 3.0, 0.0)).unwrap();
        assert_abs_diff_eq!(b, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(a, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn orthonormalize_removes_projection() {
        let (b, a) = orthonormalize(&Vector3::new(0.0, 0.0, 5.0), &Vector3::new(1.0, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(b, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(a, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn orthonormalize_random_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let z1 = rand_vec(&mut rng);
            let z2 = rand_vec(&mut rng);
            match orthonormalize(&z1, &z2) {
                Ok((b, a)) => {
                    assert!((a.norm() - 1.0).abs() < 1e-9);
                    assert!((b.norm() - 1.0).abs() < 1e-9);
                    assert!(a.dot(&b).abs() < 1e-9);
                }
                Err(Error::DegenerateDirections(_)) => {}
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
    }

    #[test]
    fn orthonormalize_rejects_degenerate() {
        assert!(matches!(
            orthonormalize(&Vector3::zeros(), &Vector3::x()),
            Err(Error::DegenerateDirections(_))
        ));
        // z2 parallel to z1: projection removes everything.
        assert!(matches!(
            orthonormalize(&Vector3::x(), &Vector3::new(2.0, 0.0, 0.0)),
            Err(Error::DegenerateDirections(_))
        ));
    }

    #[test]
    fn pose_identity_frame() {
        let spec = GripperSpec::default();
        let pose = grasp_pose_from_params(
            &Vector3::zeros(),
            &Vector3::z(),
            &Vector3::x(),
            0.04,
            &spec,
        )
        .unwrap();
        assert_abs_diff_eq!(pose.translation, Vector3::new(0.02, 0.0, -0.10), epsilon = 1e-12);
        assert_abs_diff_eq!(pose.rotation, Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn pose_zero_width_collapses_baseline_term() {
        let spec = GripperSpec::default();
        let pose = grasp_pose_from_params(
            &Vector3::new(0.1, 0.2, 0.3),
            &Vector3::z(),
            &Vector3::x(),
            0.0,
            &spec,
        )
        .unwrap();
        assert_abs_diff_eq!(pose.translation, Vector3::new(0.1, 0.2, 0.2), epsilon = 1e-12);
    }

    #[test]
    fn pose_random_sweep_proper_rotation() {
        let spec = GripperSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10_000 {
            let (a, b) = random_frame(&mut rng);
            let width = rng.random_range(0.0..spec.w_max);
            let pose = grasp_pose_from_params(&rand_vec(&mut rng), &a, &b, width, &spec).unwrap();
            pose.validate(&spec, 1e-9).unwrap();
        }
    }

    #[test]
    fn pose_rejects_non_orthonormal() {
        let spec = GripperSpec::default();
        let err = grasp_pose_from_params(
            &Vector3::zeros(),
            &Vector3::new(1.0, 0.1, 0.0),
            &Vector3::x(),
            0.02,
            &spec,
        );
        assert!(matches!(err, Err(Error::InvalidDirections(_))));
    }

    #[test]
    fn keypoints_identity_frame() {
        let spec = GripperSpec::default();
        let pose = GraspPose {
            translation: Vector3::zeros(),
            rotation: Matrix3::identity(),
            width: 0.04,
        };
        let k = gripper_keypoints(&pose, &spec);
        assert_abs_diff_eq!(k.left_root, Vector3::new(-0.02, 0.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(k.right_root, Vector3::new(0.02, 0.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(k.left_tip, Vector3::new(-0.02, 0.0, 0.05), epsilon = 1e-12);
        assert_abs_diff_eq!(k.right_tip, Vector3::new(0.02, 0.0, 0.05), epsilon = 1e-12);
        assert_abs_diff_eq!(k.base, Vector3::new(0.0, 0.0, -0.10), epsilon = 1e-12);
    }

    #[test]
    fn keypoints_translation_equivariant() {
        let spec = GripperSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (a, b) = random_frame(&mut rng);
        let pose = grasp_pose_from_params(&rand_vec(&mut rng), &a, &b, 0.03, &spec).unwrap();
        let shift = Vector3::new(0.5, -0.25, 1.0);
        let mut moved = pose.clone();
        moved.translation += shift;
        let k0 = gripper_keypoints(&pose, &spec);
        let k1 = gripper_keypoints(&moved, &spec);
        for (p0, p1) in k0.as_array().iter().zip(k1.as_array().iter()) {
            assert_abs_diff_eq!(p0 + shift, *p1, epsilon = 1e-12);
        }
    }

    #[test]
    fn keypoints_random_sweep_invariants() {
        let spec = GripperSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..10_000 {
            let (a, b) = random_frame(&mut rng);
            let width = rng.random_range(0.0..spec.w_max);
            let pose = grasp_pose_from_params(&rand_vec(&mut rng), &a, &b, width, &spec).unwrap();
            let k = gripper_keypoints(&pose, &spec);
            assert!(((k.left_root - k.right_root).norm() - width).abs() < 1e-9);
            assert!(((k.left_tip - k.left_root).norm() - spec.finger_len).abs() < 1e-9);
        }
    }

    #[test]
    fn symmetric_keypoints_is_involution_and_half_turn() {
        let spec = GripperSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..1_000 {
            let (a, b) = random_frame(&mut rng);
            let width = rng.random_range(0.0..spec.w_max);
            let pose = grasp_pose_from_params(&rand_vec(&mut rng), &a, &b, width, &spec).unwrap();
            let k = gripper_keypoints(&pose, &spec);
            let sym = symmetric_keypoints(&k);
            // Involution.
            assert_eq!(symmetric_keypoints(&sym), k);
            // Equals the keypoints of the pose rotated 180deg about the
            // approach axis through t.
            let half_turn =
                nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(a), std::f64::consts::PI)
                    .into_inner();
            let rotated = GraspPose {
                translation: pose.translation,
                rotation: half_turn * pose.rotation,
                width: pose.width,
            };
            let k_rot = gripper_keypoints(&rotated, &spec);
            for (p0, p1) in sym.as_array().iter().zip(k_rot.as_array().iter()) {
                assert!((p0 - p1).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn width_bins_roundtrip() {
        let spec = GripperSpec::default();
        // Zero maps to bin 0, decodes to the first bin center.
        let onehot = width_to_onehot(0.0, &spec).unwrap();
        assert_eq!(onehot.iter().position(|&v| v == 1.0), Some(0));
        assert_abs_diff_eq!(onehot_to_width(&onehot, &spec), 0.004, epsilon = 1e-12);
        // 0.05 with 10 bins over 0.08: floor(0.05/0.008) = 6, center 0.052.
        let onehot = width_to_onehot(0.05, &spec).unwrap();
        assert_eq!(onehot.iter().position(|&v| v == 1.0), Some(6));
        assert_abs_diff_eq!(onehot_to_width(&onehot, &spec), 0.052, epsilon = 1e-12);
        // w_max clamps to the last segment.
        let onehot = width_to_onehot(spec.w_max, &spec).unwrap();
        assert_eq!(onehot.iter().position(|&v| v == 1.0), Some(9));
        // Negative width is an error.
        assert!(matches!(width_to_onehot(-0.01, &spec), Err(Error::NegativeWidth(_))));
    }

    #[test]
    fn width_decode_ties_break_low() {
        let spec = GripperSpec::default();
        let mut scores = vec![0.0; 10];
        scores[3] = 0.5;
        scores[7] = 0.5;
        assert_abs_diff_eq!(onehot_to_width(&scores, &spec), 3.5 * 0.008, epsilon = 1e-12);
    }

    #[test]
    fn width_encode_decode_maps_to_bin_center() {
        let spec = GripperSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..1_000 {
            let w = rng.random_range(0.0..spec.w_max);
            let onehot = width_to_onehot(w, &spec).unwrap();
            let decoded = onehot_to_width(&onehot, &spec);
            // Decoded value is the center of w's bin...
            assert!((decoded - w).abs() <= spec.bin_width() / 2.0 + 1e-12);
            // ...and bin centers are fixed points.
            let again = onehot_to_width(&width_to_onehot(decoded, &spec).unwrap(), &spec);
            assert_abs_diff_eq!(again, decoded, epsilon = 1e-12);
        }
    }
}
