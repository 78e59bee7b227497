//! Rotation representations and conversions.
//!
//! Four representations are supported: axis-angle, unit quaternion, 3x3
//! rotation matrix and the continuous 6D form (the first two matrix columns).
//! The f64 functions here are used for data handling, evaluation and tests;
//! [`tensor`] holds the differentiable batched equivalents used in training.

pub mod tensor;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum residual norm accepted by the Gram-Schmidt projection.
pub const DEGENERACY_EPS: f64 = 1e-8;
/// Orthonormality tolerance for matrices handed to [`matrix_to_sixd`].
pub const ROTATION_CHECK_TOL: f64 = 1e-4;

/// Continuous 6D rotation: two stacked 3-vectors, nominally the first two
/// columns of a rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rot6D(pub [f64; 6]);

/// A 3x3 rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotMatrix(pub Matrix3<f64>);

/// Unit quaternion, kept canonical with `w >= 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Rotation vector: unit axis scaled by the angle in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngle(pub Vector3<f64>);

/// Supported per-joint pose parameterizations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RotationRep {
    AxisAngle,
    Quaternion,
    Matrix,
    #[default]
    SixD,
}

impl RotationRep {
    pub const ALL: [RotationRep; 4] = [
        RotationRep::AxisAngle,
        RotationRep::Quaternion,
        RotationRep::Matrix,
        RotationRep::SixD,
    ];

    /// Number of reals per joint.
    pub fn dim(self) -> usize {
        match self {
            RotationRep::AxisAngle => 3,
            RotationRep::Quaternion => 4,
            RotationRep::Matrix => 9,
            RotationRep::SixD => 6,
        }
    }

    /// Encodes a rotation into this representation's coordinates.
    pub fn encode(self, m: &RotMatrix) -> Vec<f64> {
        match self {
            RotationRep::AxisAngle => {
                let a = matrix_to_axis_angle(m).0;
                vec![a.x, a.y, a.z]
            }
            RotationRep::Quaternion => {
                let q = matrix_to_quaternion(m);
                vec![q.w, q.x, q.y, q.z]
            }
            // column-major, so the first six entries coincide with 6D
            RotationRep::Matrix => m.0.as_slice().to_vec(),
            RotationRep::SixD => m.to_sixd_unchecked().0.to_vec(),
        }
    }

    /// Decodes raw (possibly unnormalized) network output into a 6D rotation.
    ///
    /// Raw matrices are not projected; their first two columns are kept and the
    /// Gram-Schmidt step downstream restores orthonormality.
    pub fn decode_to_sixd(self, v: &[f64]) -> Rot6D {
        match self {
            RotationRep::AxisAngle => {
                axis_angle_to_matrix(&AxisAngle(Vector3::new(v[0], v[1], v[2]))).to_sixd_unchecked()
            }
            RotationRep::Quaternion => {
                let q = Quaternion { w: v[0], x: v[1], y: v[2], z: v[3] };
                match q.normalized() {
                    Some(q) => quaternion_to_matrix(&q).to_sixd_unchecked(),
                    None => RotMatrix::identity().to_sixd_unchecked(),
                }
            }
            RotationRep::Matrix | RotationRep::SixD => {
                let mut out = [0.0; 6];
                out.copy_from_slice(&v[..6]);
                Rot6D(out)
            }
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RotationRep::AxisAngle => "Axis-angle",
            RotationRep::Quaternion => "Quaternion",
            RotationRep::Matrix => "Rotation matrix",
            RotationRep::SixD => "6D continuous",
        }
    }
}

impl Rot6D {
    pub const IDENTITY: Rot6D = Rot6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn first(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn second(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Projects onto the rotation group and back, giving canonical coordinates.
    pub fn normalized(&self) -> Result<Rot6D> {
        Ok(sixd_to_matrix(self)?.to_sixd_unchecked())
    }
}

impl RotMatrix {
    pub fn identity() -> Self {
        RotMatrix(Matrix3::identity())
    }

    /// Rotation of `angle` radians about the unit `axis`.
    pub fn about(axis: Vector3<f64>, angle: f64) -> Self {
        axis_angle_to_matrix(&AxisAngle(axis.normalize() * angle))
    }

    pub fn about_y(angle: f64) -> Self {
        Self::about(Vector3::y(), angle)
    }

    pub fn about_z(angle: f64) -> Self {
        Self::about(Vector3::z(), angle)
    }

    /// Largest absolute entry of `RᵀR - I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).abs().max()
    }

    /// True when orthonormal with determinant +1 within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        self.orthonormality_error() < tol && (self.0.determinant() - 1.0).abs() < tol
    }

    pub fn compose(&self, other: &RotMatrix) -> RotMatrix {
        RotMatrix(self.0 * other.0)
    }

    pub fn transpose(&self) -> RotMatrix {
        RotMatrix(self.0.transpose())
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    fn to_sixd_unchecked(self) -> Rot6D {
        let c = self.0.as_slice();
        Rot6D([c[0], c[1], c[2], c[3], c[4], c[5]])
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Unit-norm, `w >= 0` copy, or `None` for the zero quaternion.
    pub fn normalized(&self) -> Option<Quaternion> {
        let n = self.norm();
        if !(n > 1e-12) {
            return None;
        }
        let s = if self.w < 0.0 { -1.0 / n } else { 1.0 / n };
        Some(Quaternion { w: self.w * s, x: self.x * s, y: self.y * s, z: self.z * s })
    }

    pub fn dot(&self, o: &Quaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }
}

impl AxisAngle {
    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

/// Gram-Schmidt projection of a 6D rotation onto a rotation matrix.
///
/// Columns are `b1 = v1/|v1|`, `b2` = normalized residual of `v2` against `b1`,
/// `b3 = b1 x b2`.
pub fn sixd_to_matrix(r: &Rot6D) -> Result<RotMatrix> {
    if !r.is_finite() {
        return Err(Error::DegenerateInput("non-finite 6D rotation".into()));
    }
    let v1 = r.first();
    let n1 = v1.norm();
    if n1 < DEGENERACY_EPS {
        return Err(Error::DegenerateInput("first 6D vector is zero".into()));
    }
    let b1 = v1 / n1;
    let v2 = r.second();
    let resid = v2 - b1 * b1.dot(&v2);
    let n2 = resid.norm();
    if n2 < DEGENERACY_EPS {
        return Err(Error::DegenerateInput("6D vectors are parallel".into()));
    }
    let b2 = resid / n2;
    let b3 = b1.cross(&b2);
    Ok(RotMatrix(Matrix3::from_columns(&[b1, b2, b3])))
}

/// First two columns of a rotation matrix, stacked.
pub fn matrix_to_sixd(m: &RotMatrix) -> Result<Rot6D> {
    let err = m.orthonormality_error().max((m.0.determinant() - 1.0).abs());
    if !(err <= ROTATION_CHECK_TOL) {
        return Err(Error::InvalidRotation(err));
    }
    Ok(m.to_sixd_unchecked())
}

/// Rodrigues' formula. The zero vector maps to the identity.
pub fn axis_angle_to_matrix(a: &AxisAngle) -> RotMatrix {
    let theta = a.0.norm();
    let k = skew(&a.0);
    if theta < 1e-12 {
        return RotMatrix(Matrix3::identity() + k);
    }
    let kn = k / theta;
    RotMatrix(Matrix3::identity() + kn * theta.sin() + kn * kn * (1.0 - theta.cos()))
}

/// Converts a unit quaternion (normalized first) to a matrix.
pub fn quaternion_to_matrix(q: &Quaternion) -> RotMatrix {
    let q = q.normalized().unwrap_or(Quaternion::IDENTITY);
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    RotMatrix(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Shepperd's method, canonicalized to `w >= 0`.
pub fn matrix_to_quaternion(m: &RotMatrix) -> Quaternion {
    let r = &m.0;
    let tr = r.trace();
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        Quaternion {
            w: 0.25 * s,
            x: (r[(2, 1)] - r[(1, 2)]) / s,
            y: (r[(0, 2)] - r[(2, 0)]) / s,
            z: (r[(1, 0)] - r[(0, 1)]) / s,
        }
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        Quaternion {
            w: (r[(2, 1)] - r[(1, 2)]) / s,
            x: 0.25 * s,
            y: (r[(0, 1)] + r[(1, 0)]) / s,
            z: (r[(0, 2)] + r[(2, 0)]) / s,
        }
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        Quaternion {
            w: (r[(0, 2)] - r[(2, 0)]) / s,
            x: (r[(0, 1)] + r[(1, 0)]) / s,
            y: 0.25 * s,
            z: (r[(1, 2)] + r[(2, 1)]) / s,
        }
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        Quaternion {
            w: (r[(1, 0)] - r[(0, 1)]) / s,
            x: (r[(0, 2)] + r[(2, 0)]) / s,
            y: (r[(1, 2)] + r[(2, 1)]) / s,
            z: 0.25 * s,
        }
    };
    q.normalized().unwrap_or(Quaternion::IDENTITY)
}

pub fn axis_angle_to_quaternion(a: &AxisAngle) -> Quaternion {
    let theta = a.0.norm();
    let half = 0.5 * theta;
    // sin(θ/2)/θ, with its series near zero
    let k = if theta < 1e-8 { 0.5 - theta * theta / 48.0 } else { half.sin() / theta };
    Quaternion { w: half.cos(), x: a.0.x * k, y: a.0.y * k, z: a.0.z * k }
        .normalized()
        .unwrap_or(Quaternion::IDENTITY)
}

/// Rotation vector with angle in `[0, π]`.
pub fn quaternion_to_axis_angle(q: &Quaternion) -> AxisAngle {
    let q = q.normalized().unwrap_or(Quaternion::IDENTITY);
    let v = Vector3::new(q.x, q.y, q.z);
    let s = v.norm();
    if s < 1e-12 {
        return AxisAngle(v * 2.0);
    }
    let angle = 2.0 * s.atan2(q.w);
    AxisAngle(v * (angle / s))
}

pub fn matrix_to_axis_angle(m: &RotMatrix) -> AxisAngle {
    quaternion_to_axis_angle(&matrix_to_quaternion(m))
}

/// Angle of `m1ᵀ m2` in `[0, π]`.
///
/// Uses `atan2(sin, cos)` of the relative rotation, which stays accurate near
/// both 0 and π where `acos` of the trace loses precision.
pub fn geodesic_distance(m1: &RotMatrix, m2: &RotMatrix) -> f64 {
    let rel = m1.0.transpose() * m2.0;
    let cos = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let w = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = (0.5 * w.norm()).min(1.0);
    sin.atan2(cos)
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Uniformly distributed random rotation (Shoemake's method).
pub fn random_rotation<R: rand::Rng + ?Sized>(rng: &mut R) -> RotMatrix {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let u3: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let q = Quaternion { w: b * u3.cos(), x: a * u2.sin(), y: a * u2.cos(), z: b * u3.sin() };
    quaternion_to_matrix(&q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn rz90() -> Matrix3<f64> {
        Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn sixd_identity_and_scaling() {
        let m = sixd_to_matrix(&Rot6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(m.0, Matrix3::identity(), epsilon = 1e-15);
        let m = sixd_to_matrix(&Rot6D([2.0, 0.0, 0.0, 0.0, 3.0, 0.0])).unwrap();
        assert_abs_diff_eq!(m.0, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn sixd_degenerate_inputs() {
        assert!(matches!(
            sixd_to_matrix(&Rot6D([0.0, 0.0, 0.0, 0.0, 1.0, 0.0])),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            sixd_to_matrix(&Rot6D([1.0, 0.0, 0.0, 2.0, 0.0, 0.0])),
            Err(Error::DegenerateInput(_))
        ));
        assert!(sixd_to_matrix(&Rot6D([f64::NAN, 0.0, 0.0, 0.0, 1.0, 0.0])).is_err());
    }

    #[test]
    fn matrix_to_sixd_reads_columns() {
        let s = matrix_to_sixd(&RotMatrix::identity()).unwrap();
        assert_eq!(s.0, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let s = matrix_to_sixd(&RotMatrix(rz90())).unwrap();
        assert_eq!(s.0, [0.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
        let bad = RotMatrix(Matrix3::identity() * 2.0);
        assert!(matches!(matrix_to_sixd(&bad), Err(Error::InvalidRotation(_))));
    }

    #[test]
    fn axis_angle_basics() {
        assert_eq!(axis_angle_to_matrix(&AxisAngle(Vector3::zeros())).0, Matrix3::identity());
        let m = axis_angle_to_matrix(&AxisAngle(Vector3::new(0.0, 0.0, FRAC_PI_2)));
        assert_abs_diff_eq!(m.apply(&Vector3::x()), Vector3::y(), epsilon = 1e-15);
    }

    #[test]
    fn quaternion_basics() {
        assert_eq!(quaternion_to_matrix(&Quaternion::IDENTITY).0, Matrix3::identity());
        let q = Quaternion { w: FRAC_PI_4.cos(), x: 0.0, y: 0.0, z: FRAC_PI_4.sin() };
        assert_abs_diff_eq!(quaternion_to_matrix(&q).0, rz90(), epsilon = 1e-15);
        let back = matrix_to_quaternion(&RotMatrix(rz90()));
        assert_abs_diff_eq!(back.dot(&q), 1.0, epsilon = 1e-15);
        // sign canonicalization
        let neg = Quaternion { w: -q.w, x: -q.x, y: -q.y, z: -q.z };
        assert!(neg.normalized().unwrap().w >= 0.0);
    }

    #[test]
    fn geodesic_known_values() {
        let i = RotMatrix::identity();
        assert_eq!(geodesic_distance(&i, &i), 0.0);
        assert_abs_diff_eq!(geodesic_distance(&i, &RotMatrix(rz90())), FRAC_PI_2, epsilon = 1e-15);
        assert_abs_diff_eq!(geodesic_distance(&i, &RotMatrix::about_y(PI)), PI, epsilon = 1e-12);
    }

    #[test]
    fn geodesic_matches_quaternion_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a = random_rotation(&mut rng);
            let b = random_rotation(&mut rng);
            let qa = matrix_to_quaternion(&a);
            let qb = matrix_to_quaternion(&b);
            let oracle = 2.0 * qa.dot(&qb).abs().min(1.0).acos();
            assert_abs_diff_eq!(geodesic_distance(&a, &b), oracle, epsilon = 1e-8);
            assert_abs_diff_eq!(geodesic_distance(&a, &b), geodesic_distance(&b, &a), epsilon = 1e-12);
        }
    }

    #[test]
    fn axis_angle_agrees_with_quaternion_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let v = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            let a = AxisAngle(v);
            let direct = axis_angle_to_matrix(&a);
            let via_q = quaternion_to_matrix(&axis_angle_to_quaternion(&a));
            assert_abs_diff_eq!(direct.0, via_q.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn canonical_axis_angle_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = matrix_to_axis_angle(&random_rotation(&mut rng));
            assert!(a.angle() <= PI + 1e-12);
        }
    }

    #[test]
    fn rep_encode_decode_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let m = random_rotation(&mut rng);
            for rep in RotationRep::ALL {
                let coords = rep.encode(&m);
                assert_eq!(coords.len(), rep.dim());
                let back = sixd_to_matrix(&rep.decode_to_sixd(&coords)).unwrap();
                assert!(geodesic_distance(&m, &back) < 1e-7, "{rep:?}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn sixd_scale_invariance(
            a in proptest::array::uniform6(-1.0f64..1.0),
            alpha in 0.01f64..100.0,
            beta in 0.01f64..100.0,
        ) {
            let r = Rot6D(a);
            proptest::prop_assume!(sixd_to_matrix(&r).is_ok());
            let scaled = Rot6D([a[0]*alpha, a[1]*alpha, a[2]*alpha, a[3]*beta, a[4]*beta, a[5]*beta]);
            proptest::prop_assume!(sixd_to_matrix(&scaled).is_ok());
            let m1 = sixd_to_matrix(&r).unwrap();
            let m2 = sixd_to_matrix(&scaled).unwrap();
            proptest::prop_assert!((m1.0 - m2.0).abs().max() < 1e-8);
            proptest::prop_assert!(m1.is_valid(1e-6));
        }
    }
}
