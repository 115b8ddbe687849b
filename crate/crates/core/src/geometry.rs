//! SO(3) / SE(3) primitives.
//!
//! Rotations are kept as full 3x3 matrices: the rotation relaxation works on
//! unconstrained 9-vectors, so quaternions only appear at the file boundary
//! (see [`Rotation::to_quaternion`]).

use std::f64::consts::PI;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// Axis-angle vector: direction is the rotation axis, norm the angle in radians.
pub type AxisAngle = Vector3<f64>;

/// Tolerance used when validating orthonormality and determinant.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// A 3D rotation stored as an orthonormal matrix with unit determinant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps `m` after checking `mᵀm = I` and `det(m) = 1` to [`ROTATION_TOLERANCE`].
    pub fn from_matrix(m: Matrix3<f64>) -> Option<Self> {
        let r = Rotation(m);
        r.is_valid(ROTATION_TOLERANCE).then_some(r)
    }

    /// Wraps `m` without validation. The caller guarantees `m` is a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn about_x(angle: f64) -> Self {
        exp_map(&Vector3::new(angle, 0.0, 0.0))
    }

    pub fn about_y(angle: f64) -> Self {
        exp_map(&Vector3::new(0.0, angle, 0.0))
    }

    pub fn about_z(angle: f64) -> Self {
        exp_map(&Vector3::new(0.0, 0.0, angle))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn angle(&self) -> f64 {
        log_map(self).norm()
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let m = &self.0;
        m.iter().all(|x| x.is_finite())
            && (m.transpose() * m - Matrix3::identity()).norm() <= tol
            && (m.determinant() - 1.0).abs() <= tol
    }

    /// Unit quaternion in (x, y, z, w) order.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0));
        let mut c = [q.i, q.j, q.k, q.w];
        // canonical hemisphere so that serialization is deterministic
        if c[3] < 0.0 {
            c.iter_mut().for_each(|x| *x = -*x);
        }
        c
    }

    /// Builds a rotation from an (x, y, z, w) quaternion, normalizing it first.
    pub fn from_quaternion(xyzw: [f64; 4]) -> Self {
        let q =
            UnitQuaternion::from_quaternion(Quaternion::new(xyzw[3], xyzw[0], xyzw[1], xyzw[2]));
        Rotation(*q.to_rotation_matrix().matrix())
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::identity()
    }
}

/// Rigid 3D transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose::new(Rotation::identity(), Vector3::zeros())
    }

    /// `self ⊕ other`: applies `other` expressed in the frame of `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.translation + self.rotation.rotate(&other.translation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -rt.rotate(&self.translation),
        }
    }

    /// Relative transform `self⁻¹ ⊕ other`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

/// Skew-symmetric matrix with `skew(a) * b == a × b`.
pub fn skew(theta: &AxisAngle) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -theta.z, theta.y, //
        theta.z, 0.0, -theta.x, //
        -theta.y, theta.x, 0.0,
    )
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
fn vee_antisymmetric(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    ) * 0.5
}

/// Exponential map via the Rodrigues formula.
pub fn exp_map(theta: &AxisAngle) -> Rotation {
    let angle_sq = theta.norm_squared();
    let s = skew(theta);
    let s2 = s * s;
    let (a, b) = if angle_sq < 1e-16 {
        // Taylor expansion of sin(x)/x and (1-cos x)/x²
        (1.0 - angle_sq / 6.0, 0.5 - angle_sq / 24.0)
    } else {
        let angle = angle_sq.sqrt();
        (angle.sin() / angle, (1.0 - angle.cos()) / angle_sq)
    };
    Rotation(Matrix3::identity() + s * a + s2 * b)
}

/// `I + skew(θ)`: first-order approximation of [`exp_map`]. Not a rotation in general.
pub fn first_order_exp(theta: &AxisAngle) -> Matrix3<f64> {
    Matrix3::identity() + skew(theta)
}

/// Which branch [`log_map_checked`] used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogBranch {
    /// Angle close to zero, series expansion.
    Small,
    Regular,
    /// Angle close to π: axis taken from the symmetric part of R.
    NearPi,
}

/// Angles above this use the symmetric-part axis extraction.
const NEAR_PI_THRESHOLD: f64 = PI - 1e-2;

/// Logarithm map with a report of the numerical branch taken.
///
/// At exactly π the axis sign is ambiguous; the first nonzero component is
/// made positive.
pub fn log_map_checked(r: &Rotation) -> (AxisAngle, LogBranch) {
    let m = r.matrix();
    let w = vee_antisymmetric(m);
    let sin_angle = w.norm();
    let cos_angle = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = sin_angle.atan2(cos_angle);

    if angle < 1e-6 {
        // angle/sin(angle) ≈ 1 + angle²/6
        return (w * (1.0 + angle * angle / 6.0), LogBranch::Small);
    }
    if angle < NEAR_PI_THRESHOLD {
        return (w * (angle / sin_angle), LogBranch::Regular);
    }

    // (R + Rᵀ)/2 = cos θ I + (1 - cos θ) a aᵀ
    let sym = (m + m.transpose()) * 0.5;
    let outer = (sym - Matrix3::identity() * cos_angle) / (1.0 - cos_angle);
    let k = (0..3)
        .max_by(|&i, &j| outer[(i, i)].total_cmp(&outer[(j, j)]))
        .unwrap_or(0);
    let mut axis = outer.column(k).into_owned() / outer[(k, k)].max(0.0).sqrt();
    axis.normalize_mut();
    if sin_angle > 1e-12 {
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
    } else if let Some(first) = axis.iter().copied().find(|c| c.abs() > 1e-12) {
        if first < 0.0 {
            axis = -axis;
        }
    }
    (axis * angle, LogBranch::NearPi)
}

/// Logarithm map of SO(3).
pub fn log_map(r: &Rotation) -> AxisAngle {
    log_map_checked(r).0
}

/// Result of projecting an arbitrary matrix onto SO(3).
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub rotation: Rotation,
    /// Smallest singular value was (numerically) zero; the nearest rotation is
    /// not unique and the SVD's own basis choice decided it.
    pub rank_deficient: bool,
}

/// Nearest rotation in Frobenius norm, reporting degenerate inputs.
pub fn project_to_so3_checked(m: &Matrix3<f64>) -> Projection {
    if !m.iter().all(|x| x.is_finite()) || m.norm() == 0.0 {
        return Projection {
            rotation: Rotation::identity(),
            rank_deficient: true,
        };
    }
    let svd = m.svd(true, true);
    let (Some(mut u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Projection {
            rotation: Rotation::identity(),
            rank_deficient: true,
        };
    };
    let sv = svd.singular_values;
    let (min_idx, min_sv) = sv
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((2, 0.0));
    let max_sv = sv.max();
    if (u * v_t).determinant() < 0.0 {
        let mut col = u.column_mut(min_idx);
        col.neg_mut();
    }
    Projection {
        rotation: Rotation(u * v_t),
        rank_deficient: min_sv <= 1e-12 * max_sv,
    }
}

/// Nearest rotation to `m` in Frobenius norm (SVD with determinant sign fix).
pub fn project_to_so3(m: &Matrix3<f64>) -> Rotation {
    project_to_so3_checked(m).rotation
}

/// `‖R_b − R_a·R̄‖_F²`.
pub fn chordal_residual(r_a: &Rotation, r_b: &Rotation, measured: &Rotation) -> f64 {
    (r_b.matrix() - r_a.matrix() * measured.matrix()).norm_squared()
}

/// Rotation whose first axis points along `direction`; used to orient
/// simulated poses along their direction of travel.
pub fn look_along(direction: &Vector3<f64>) -> Rotation {
    let x = direction.normalize();
    let helper = if x.z.abs() > 0.9 {
        Vector3::x()
    } else {
        Vector3::z()
    };
    let y = helper.cross(&x).normalize();
    let z = x.cross(&y);
    Rotation(Matrix3::from_columns(&[x, y, z]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Rodrigues formula written out element by element from the axis/angle pair.
    fn rodrigues_oracle(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
        let (x, y, z) = (axis.x, axis.y, axis.z);
        let c = angle.cos();
        let s = angle.sin();
        let t = 1.0 - c;
        Matrix3::new(
            t * x * x + c,
            t * x * y - s * z,
            t * x * z + s * y,
            t * x * y + s * z,
            t * y * y + c,
            t * y * z - s * x,
            t * x * z - s * y,
            t * y * z + s * x,
            t * z * z + c,
        )
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(exp_map(&Vector3::zeros()).matrix(), &Matrix3::identity());
    }

    #[test]
    fn exp_matches_rodrigues_oracle() {
        let r = exp_map(&Vector3::new(PI / 2.0, 0.0, 0.0));
        let expected = rodrigues_oracle(Vector3::x(), PI / 2.0);
        assert_relative_eq!(*r.matrix(), expected, epsilon = 1e-15);
        // frozen values of the oracle
        assert_relative_eq!(r.matrix()[(1, 2)], -1.0, epsilon = 1e-15);
        assert_relative_eq!(r.matrix()[(2, 1)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn log_exp_round_trip_fixed() {
        let theta = Vector3::new(0.1, -0.2, 0.3);
        assert_relative_eq!(log_map(&exp_map(&theta)), theta, epsilon = 1e-9);
    }

    #[test]
    fn log_of_identity_and_rz() {
        assert_eq!(log_map(&Rotation::identity()), Vector3::zeros());
        let rz = Rotation::from_matrix(rodrigues_oracle(Vector3::z(), 0.3)).unwrap();
        assert_relative_eq!(log_map(&rz), Vector3::new(0.0, 0.0, 0.3), epsilon = 1e-12);
    }

    #[test]
    fn log_recovers_large_angle() {
        let axis = Vector3::new(1.0, 2.0, -0.5).normalize();
        let r = Rotation::from_matrix(rodrigues_oracle(axis, 3.0)).unwrap();
        let (v, branch) = log_map_checked(&r);
        assert_eq!(branch, LogBranch::Regular);
        assert_relative_eq!(v.norm(), 3.0, epsilon = 1e-8);
        assert_relative_eq!(v.normalize(), axis, epsilon = 1e-8);
    }

    #[test]
    fn log_at_pi_uses_symmetric_branch_and_positive_axis() {
        let axis = Vector3::new(-1.0, 1.0, 0.0).normalize();
        let r = Rotation::from_matrix(rodrigues_oracle(axis, PI)).unwrap();
        let (v, branch) = log_map_checked(&r);
        assert_eq!(branch, LogBranch::NearPi);
        assert_relative_eq!(v.norm(), PI, epsilon = 1e-9);
        // tie-break: first nonzero component positive
        assert_relative_eq!(v.normalize(), -axis, epsilon = 1e-9);
        assert_relative_eq!(*exp_map(&v).matrix(), *r.matrix(), epsilon = 1e-9);
    }

    #[test]
    fn log_near_pi_keeps_axis_sign() {
        let axis = Vector3::new(0.3, -0.4, 0.8).normalize();
        let theta = axis * (PI - 1e-4);
        let (v, branch) = log_map_checked(&exp_map(&theta));
        assert_eq!(branch, LogBranch::NearPi);
        assert_relative_eq!(v, theta, epsilon = 1e-9);
    }

    #[test]
    fn skew_definition() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        assert_eq!(
            skew(&Vector3::x()),
            Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)
        );
    }

    #[test]
    fn first_order_exp_cases() {
        assert_eq!(first_order_exp(&Vector3::zeros()), Matrix3::identity());
        let z = Vector3::z();
        assert_eq!(first_order_exp(&z), Matrix3::identity() + skew(&z));
        let small = Vector3::new(0.01, 0.0, 0.0);
        let diff = (first_order_exp(&small) - exp_map(&small).matrix()).norm();
        assert!(diff <= 1e-4, "diff {diff}");
    }

    #[test]
    fn projection_fixed_point_and_scale() {
        let r = exp_map(&Vector3::new(0.4, -1.1, 0.7));
        assert_relative_eq!(
            *project_to_so3(r.matrix()).matrix(),
            *r.matrix(),
            epsilon = 1e-12
        );
        let scaled = r.matrix() * 2.0;
        assert_relative_eq!(
            *project_to_so3(&scaled).matrix(),
            *r.matrix(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn projection_of_reflection_fixes_determinant() {
        let m = Matrix3::from_diagonal(&Vector3::new(3.0, 2.0, -1.0));
        let p = project_to_so3_checked(&m);
        assert!(!p.rank_deficient);
        assert!(p.rotation.is_valid(1e-12));
        assert_relative_eq!(*p.rotation.matrix(), Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn projection_of_singular_input_is_flagged_but_valid() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        let p = project_to_so3_checked(&m);
        assert!(p.rank_deficient);
        assert!(p.rotation.is_valid(1e-9));
        let zero = project_to_so3_checked(&Matrix3::zeros());
        assert!(zero.rank_deficient);
        assert_eq!(zero.rotation, Rotation::identity());
    }

    /// Brute force: the SVD projection must beat every sampled rotation.
    #[test]
    fn projection_beats_sampled_rotations() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let m = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let best = project_to_so3(&m);
        let best_dist = (best.matrix() - m).norm();
        let mut sampled_best = f64::INFINITY;
        for _ in 0..200_000 {
            let q = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let r = Rotation::from_quaternion(q);
            sampled_best = sampled_best.min((r.matrix() - m).norm());
        }
        assert!(best_dist <= sampled_best + 1e-12);
        // sampling gets close to the true optimum
        assert!(
            sampled_best - best_dist < 5e-2,
            "{sampled_best} vs {best_dist}"
        );
    }

    #[test]
    fn chordal_residual_cases() {
        let ra = exp_map(&Vector3::new(0.1, 0.2, 0.3));
        let rbar = exp_map(&Vector3::new(-0.5, 0.0, 0.9));
        let rb = ra.compose(&rbar);
        assert!(chordal_residual(&ra, &rb, &rbar) < 1e-28);

        let rz_pi = Rotation::from_matrix(rodrigues_oracle(Vector3::z(), PI)).unwrap();
        let direct = (Matrix3::identity() - rz_pi.matrix()).norm_squared();
        assert_relative_eq!(direct, 8.0, epsilon = 1e-12);
        assert_relative_eq!(
            chordal_residual(&Rotation::identity(), &Rotation::identity(), &rz_pi),
            8.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn quaternion_round_trip() {
        let r = exp_map(&Vector3::new(0.3, -2.0, 1.0));
        let q = r.to_quaternion();
        assert_relative_eq!(
            *Rotation::from_quaternion(q).matrix(),
            *r.matrix(),
            epsilon = 1e-14
        );
    }

    fn axis_angle_below_pi() -> impl Strategy<Value = Vector3<f64>> {
        (
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
            0.0f64..(PI - 1e-3),
        )
            .prop_filter_map("nonzero axis", |(x, y, z, a)| {
                let v = Vector3::new(x, y, z);
                (v.norm() > 1e-3).then(|| v.normalize() * a)
            })
    }

    proptest! {
        #[test]
        fn prop_log_inverts_exp(theta in axis_angle_below_pi()) {
            let back = log_map(&exp_map(&theta));
            prop_assert!((back - theta).norm() <= 1e-9);
        }

        #[test]
        fn prop_skew_is_cross_product(
            a in prop::array::uniform3(-10.0f64..10.0),
            b in prop::array::uniform3(-10.0f64..10.0),
        ) {
            let a = Vector3::from(a);
            let b = Vector3::from(b);
            let s = skew(&a);
            prop_assert!((s + s.transpose()).norm() == 0.0);
            // cross product written out by components
            let cross = Vector3::new(a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x);
            prop_assert!((s * b - cross).norm() <= 1e-12 * (1.0 + cross.norm()));
        }

        #[test]
        fn prop_first_order_error_bound(theta in axis_angle_below_pi()) {
            prop_assume!(theta.norm() <= 1.0);
            let err = (first_order_exp(&theta) - exp_map(&theta).matrix()).norm();
            prop_assert!(err <= theta.norm_squared() + 1e-15);
        }

        #[test]
        fn prop_projection_always_valid(m in prop::array::uniform9(-5.0f64..5.0)) {
            let m = Matrix3::from_row_slice(&m);
            prop_assert!(project_to_so3(&m).is_valid(1e-9));
        }

        #[test]
        fn prop_chordal_bounds_and_symmetry(
            a in axis_angle_below_pi(), b in axis_angle_below_pi(), c in axis_angle_below_pi()
        ) {
            let (ra, rb, rc) = (exp_map(&a), exp_map(&b), exp_map(&c));
            let d = chordal_residual(&ra, &rb, &rc);
            prop_assert!((0.0..=8.0 + 1e-12).contains(&d));
            let swapped = chordal_residual(&rb, &ra, &rc.transpose());
            prop_assert!((d - swapped).abs() <= 1e-12);
        }
    }
}
