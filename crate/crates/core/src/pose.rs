//! Pose representations and SO(3) utilities.
//!
//! A 9-DoF pose is a 3D translation (meters, camera frame), a 3x3 rotation,
//! and per-axis box extents (meters). For diffusion the pose is flattened to
//! a normalized 15-vector ordered `[t (3), s (3), R row-major (9)]`:
//! translation is centered on the observed-point centroid and divided by a
//! fixed scene scale so every entry is O(1).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default scene scale (meters) used to normalize translations and sizes.
pub const DEFAULT_SCENE_SCALE: f64 = 0.3;

/// Minimum normalized size entry produced by [`unflatten`]; prevents
/// degenerate boxes downstream.
pub const MIN_NORMALIZED_SIZE: f64 = 1e-4;

const ORTHONORMALITY_TOL: f64 = 1e-6;

/// A proper rotation matrix (`m^T m = I`, `det m = +1`, both within 1e-6).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    /// Wraps a matrix after checking the rotation invariants.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite rotation matrix".into()));
        }
        let err = (m.transpose() * m - Matrix3::identity()).norm();
        if err > ORTHONORMALITY_TOL {
            return Err(Error::InvalidInput(format!(
                "matrix is not orthonormal (|m^T m - I| = {err:.3e})"
            )));
        }
        if (m.determinant() - 1.0).abs() > ORTHONORMALITY_TOL {
            return Err(Error::InvalidInput(format!(
                "matrix determinant {} is not +1",
                m.determinant()
            )));
        }
        Ok(Rotation3(m))
    }

    pub fn identity() -> Self {
        Rotation3(Matrix3::identity())
    }

    /// Rotation by `angle_rad` about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: Vector3<f64>, angle_rad: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(axis);
        Rotation3(nalgebra::Rotation3::from_axis_angle(&axis, angle_rad).into_inner())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Row-major flattening of the matrix.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_row_major(v: &[f64; 9]) -> Result<Self> {
        Rotation3::new(Matrix3::from_row_slice(v))
    }
}

impl std::ops::Mul for Rotation3 {
    type Output = Rotation3;
    fn mul(self, rhs: Rotation3) -> Rotation3 {
        Rotation3(self.0 * rhs.0)
    }
}

/// 9-DoF pose: translation (m), rotation, and box extents (m).
#[derive(Debug, Clone, Copy)]
pub struct Pose9D {
    pub translation: Vector3<f64>,
    pub rotation: Rotation3,
    pub size: Vector3<f64>,
}

impl Pose9D {
    pub fn new(translation: Vector3<f64>, rotation: Rotation3, size: Vector3<f64>) -> Result<Self> {
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite translation".into()));
        }
        if !size.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::InvalidInput(format!(
                "size components must be positive and finite, got {size:?}"
            )));
        }
        Ok(Pose9D {
            translation,
            rotation,
            size,
        })
    }

    /// Maps a point from the object's canonical frame into the camera frame.
    pub fn transform_point(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p + self.translation
    }
}

/// Flattened, normalized 15-value diffusion state, ordered
/// `[t (3), s (3), R row-major (9)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseVec15(pub [f64; 15]);

impl PoseVec15 {
    pub fn zeros() -> Self {
        PoseVec15([0.0; 15])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn as_slice(&self) -> &[f64; 15] {
        &self.0
    }
}

/// Normalization between metric poses and the unit-scale diffusion state.
///
/// `centroid` is the mean of the observed object points; `scale` is a fixed
/// scene scale so normalized entries stay O(1).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormalizationContext {
    pub centroid: Vector3<f64>,
    pub scale: f64,
}

impl NormalizationContext {
    pub fn new(centroid: Vector3<f64>, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidInput(format!("scale must be > 0, got {scale}")));
        }
        if !centroid.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite centroid".into()));
        }
        Ok(NormalizationContext { centroid, scale })
    }

    /// Centroid of `points` with the default scene scale.
    pub fn from_points(points: &[Vector3<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("empty point set".into()));
        }
        let mut c = Vector3::zeros();
        for p in points {
            c += p;
        }
        NormalizationContext::new(c / points.len() as f64, DEFAULT_SCENE_SCALE)
    }
}

/// Normalizes a pose into the 15-value diffusion state.
pub fn flatten(p: &Pose9D, ctx: &NormalizationContext) -> Result<PoseVec15> {
    let t = (p.translation - ctx.centroid) / ctx.scale;
    let s = p.size / ctx.scale;
    let r = p.rotation.to_row_major();
    let mut v = [0.0; 15];
    v[0..3].copy_from_slice(t.as_slice());
    v[3..6].copy_from_slice(s.as_slice());
    v[6..15].copy_from_slice(&r);
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidInput("flatten produced non-finite values".into()));
    }
    Ok(PoseVec15(v))
}

/// Decodes a diffusion state back into a metric pose.
///
/// The 9 rotation entries are projected onto SO(3); normalized size entries
/// are clamped to [`MIN_NORMALIZED_SIZE`].
pub fn unflatten(v: &PoseVec15, ctx: &NormalizationContext) -> Result<Pose9D> {
    if !v.is_finite() {
        return Err(Error::InvalidInput("non-finite pose vector".into()));
    }
    let t = Vector3::new(v.0[0], v.0[1], v.0[2]) * ctx.scale + ctx.centroid;
    let s = Vector3::new(
        v.0[3].max(MIN_NORMALIZED_SIZE),
        v.0[4].max(MIN_NORMALIZED_SIZE),
        v.0[5].max(MIN_NORMALIZED_SIZE),
    ) * ctx.scale;
    let m = Matrix3::from_row_slice(&v.0[6..15]);
    let rotation = so3_project(&m)?;
    Pose9D::new(t, rotation, s)
}

/// Nearest rotation in Frobenius norm via SVD with determinant correction.
pub fn so3_project(m: &Matrix3<f64>) -> Result<Rotation3> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite matrix".into()));
    }
    let svd = m.svd(true, true);
    let sigma_min = svd.singular_values.min();
    if sigma_min < 1e-12 {
        return Err(Error::DegenerateRotation(format!(
            "singular value {sigma_min:.3e} below 1e-12"
        )));
    }
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let det = (u * v_t).determinant();
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    // Re-wrap without the tolerance check: the product is orthonormal by
    // construction up to SVD roundoff.
    Ok(Rotation3(u * d * v_t))
}

/// Geodesic angle between two rotations in degrees.
///
/// With a `symmetry_axis` (unit vector in the object frame), the error is the
/// angle between the mapped axes instead, which ignores rotation about the
/// axis itself.
pub fn rotation_error_deg(
    ra: &Rotation3,
    rb: &Rotation3,
    symmetry_axis: Option<Vector3<f64>>,
) -> f64 {
    match symmetry_axis {
        Some(axis) => {
            let a = (ra.matrix() * axis).normalize();
            let b = (rb.matrix() * axis).normalize();
            // atan2 form is stable near 0 and pi, unlike acos of the dot.
            a.cross(&b).norm().atan2(a.dot(&b)).to_degrees()
        }
        None => {
            let cos = ((ra.matrix().transpose() * rb.matrix()).trace() - 1.0) / 2.0;
            cos.clamp(-1.0, 1.0).acos().to_degrees()
        }
    }
}

/// Euclidean distance between two translations in centimeters.
pub fn translation_error_cm(ta: &Vector3<f64>, tb: &Vector3<f64>) -> f64 {
    (ta - tb).norm() * 100.0
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use rand::Rng;

    /// Uniform random rotation (quaternion method).
    pub fn random_rotation(rng: &mut impl Rng) -> Rotation3 {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let u3: f64 = rng.gen();
        let q = nalgebra::Quaternion::new(
            (1.0 - u1).sqrt() * (2.0 * std::f64::consts::PI * u2).sin(),
            (1.0 - u1).sqrt() * (2.0 * std::f64::consts::PI * u2).cos(),
            u1.sqrt() * (2.0 * std::f64::consts::PI * u3).sin(),
            u1.sqrt() * (2.0 * std::f64::consts::PI * u3).cos(),
        );
        let uq = nalgebra::UnitQuaternion::from_quaternion(q);
        Rotation3(uq.to_rotation_matrix().into_inner())
    }

    pub fn random_pose(rng: &mut impl Rng) -> Pose9D {
        Pose9D {
            translation: Vector3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(0.3..0.9),
            ),
            rotation: random_rotation(rng),
            size: Vector3::new(
                rng.gen_range(0.02..0.3),
                rng.gen_range(0.02..0.3),
                rng.gen_range(0.02..0.3),
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_util::{random_pose, random_rotation};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn ctx(centroid: Vector3<f64>, scale: f64) -> NormalizationContext {
        NormalizationContext::new(centroid, scale).unwrap()
    }

    #[test]
    fn flatten_identity_case() {
        let c = Vector3::new(0.1, -0.2, 0.5);
        let scale = 0.3;
        let p = Pose9D::new(c, Rotation3::identity(), Vector3::new(scale, scale, scale)).unwrap();
        let v = flatten(&p, &ctx(c, scale)).unwrap();
        let expected = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        for (a, b) in v.0.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "{:?}", v);
        }
    }

    #[test]
    fn flatten_unit_translation_offset() {
        let c = Vector3::new(0.1, -0.2, 0.5);
        let scale = 0.3;
        let p = Pose9D::new(
            c + Vector3::new(scale, 0.0, 0.0),
            Rotation3::identity(),
            Vector3::new(scale, scale, scale),
        )
        .unwrap();
        let v = flatten(&p, &ctx(c, scale)).unwrap();
        assert!((v.0[0] - 1.0).abs() < 1e-12);
        assert!(v.0[1].abs() < 1e-12);
        assert!(v.0[2].abs() < 1e-12);
    }

    #[test]
    fn flatten_rejects_non_finite() {
        let c = Vector3::zeros();
        let p = Pose9D {
            translation: Vector3::new(f64::NAN, 0.0, 0.0),
            rotation: Rotation3::identity(),
            size: Vector3::new(0.1, 0.1, 0.1),
        };
        assert!(matches!(flatten(&p, &ctx(c, 0.3)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn roundtrip_1000_random_poses() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut max_err: f64 = 0.0;
        for _ in 0..1000 {
            let p = random_pose(&mut rng);
            let c = ctx(
                p.translation + Vector3::new(0.01, -0.02, 0.005),
                DEFAULT_SCENE_SCALE,
            );
            let v = flatten(&p, &c).unwrap();
            let q = unflatten(&v, &c).unwrap();
            max_err = max_err
                .max((q.translation - p.translation).abs().max())
                .max((q.size - p.size).abs().max())
                .max((q.rotation.matrix() - p.rotation.matrix()).abs().max());
        }
        assert!(max_err < 1e-9, "round-trip error {max_err}");
    }

    #[test]
    fn unflatten_projects_scaled_rotation() {
        let c = ctx(Vector3::zeros(), 0.3);
        let mut v = [0.0; 15];
        v[3..6].copy_from_slice(&[1.0, 1.0, 1.0]);
        // 1.1 * I in the rotation block.
        v[6] = 1.1;
        v[10] = 1.1;
        v[14] = 1.1;
        let p = unflatten(&PoseVec15(v), &c).unwrap();
        assert!((p.rotation.matrix() - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn unflatten_clamps_negative_size() {
        let c = ctx(Vector3::zeros(), 0.3);
        let mut v = [0.0; 15];
        v[3] = -0.2;
        v[4] = 1.0;
        v[5] = 1.0;
        v[6] = 1.0;
        v[10] = 1.0;
        v[14] = 1.0;
        let p = unflatten(&PoseVec15(v), &c).unwrap();
        assert!((p.size[0] - MIN_NORMALIZED_SIZE * 0.3).abs() < 1e-15);
    }

    #[test]
    fn unflatten_rejects_zero_rotation_block() {
        let c = ctx(Vector3::zeros(), 0.3);
        let mut v = [0.0; 15];
        v[3..6].copy_from_slice(&[1.0, 1.0, 1.0]);
        assert!(matches!(
            unflatten(&PoseVec15(v), &c),
            Err(Error::DegenerateRotation(_))
        ));
    }

    #[test]
    fn so3_project_basics() {
        let i = Matrix3::identity();
        assert!((so3_project(&i).unwrap().matrix() - i).norm() < 1e-14);
        assert!((so3_project(&(2.0 * i)).unwrap().matrix() - i).norm() < 1e-12);

        let flipped = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        let r = so3_project(&flipped).unwrap();
        assert!((r.matrix().determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn so3_project_idempotent() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut m = Matrix3::zeros();
            for r in 0..3 {
                for c in 0..3 {
                    m[(r, c)] = rand::Rng::gen_range(&mut rng, -1.0..1.0);
                }
            }
            let p1 = match so3_project(&m) {
                Ok(r) => r,
                Err(_) => continue,
            };
            let p2 = so3_project(p1.matrix()).unwrap();
            assert!((p1.matrix() - p2.matrix()).norm() < 1e-9);
        }
    }

    #[test]
    fn rotation_error_basics() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let ra = random_rotation(&mut rng);
        assert!(rotation_error_deg(&ra, &ra, None) < 1e-9);

        let rot90 = Rotation3::from_axis_angle(Vector3::new(0.3, -1.0, 0.2), 90f64.to_radians());
        let rb = ra * rot90;
        assert!((rotation_error_deg(&ra, &rb, None) - 90.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_error_symmetry_axis_invariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let axis = Vector3::new(0.0, 1.0, 0.0);
        for _ in 0..50 {
            let ra = random_rotation(&mut rng);
            let spin = Rotation3::from_axis_angle(axis, 57f64.to_radians());
            let rb = ra * spin;
            let e = rotation_error_deg(&ra, &rb, Some(axis));
            assert!(e < 1e-6, "axial spin should be invisible, got {e} deg");
            // Symmetric in arguments.
            let e2 = rotation_error_deg(&rb, &ra, Some(axis));
            assert!((e - e2).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_error_is_symmetric_and_definite() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..50 {
            let ra = random_rotation(&mut rng);
            let rb = random_rotation(&mut rng);
            let ab = rotation_error_deg(&ra, &rb, None);
            let ba = rotation_error_deg(&rb, &ra, None);
            assert!((ab - ba).abs() < 1e-9);
            if ab < 1e-7 {
                assert!((ra.matrix() - rb.matrix()).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn translation_error_cases() {
        let a = Vector3::new(0.1, 0.2, 0.3);
        assert_eq!(translation_error_cm(&a, &a), 0.0);
        let b = a + Vector3::new(0.03, 0.04, 0.0);
        assert!((translation_error_cm(&a, &b) - 5.0).abs() < 1e-12);
        let c = a + Vector3::new(0.02, 0.0, 0.0);
        assert!((translation_error_cm(&a, &c) - 2.0).abs() < 1e-12);
    }
}
