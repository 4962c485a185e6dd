use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};

use crate::error::{Error, Result};
use crate::pc::Point3;

const ORTHO_TOL: f64 = 1e-9;

/// Maps BIM local coordinates into the geo-referenced frame:
/// `x_lidar = R · x_bim + T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = RigidTransform { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation given as an axis-angle vector (radians).
    pub fn from_rotation_vector(rotvec: Vector3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: *Rotation3::new(rotvec).matrix(),
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite entry".into()));
        }
        let dev = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if dev > ORTHO_TOL {
            return Err(Error::InvalidTransform(format!("RᵀR deviates from I by {dev:e}")));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidTransform(format!("det(R) = {det}")));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Projects the rotation back onto SO(3) (nearest rotation in Frobenius norm).
    pub fn orthonormalized(&self) -> RigidTransform {
        RigidTransform {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }

    /// Rotation angle of `R`, in degrees.
    pub fn rotation_angle_deg(&self) -> f64 {
        let r = &self.rotation;
        let axis = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        (axis.norm() / 2.0).atan2((r.trace() - 1.0) / 2.0).to_degrees()
    }

    /// Angular (degrees) and translational distance to another transform.
    pub fn difference(&self, other: &RigidTransform) -> (f64, f64) {
        let rel = RigidTransform {
            rotation: self.rotation.transpose() * other.rotation,
            translation: Vector3::zeros(),
        };
        (rel.rotation_angle_deg(), (self.translation - other.translation).norm())
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 4x4 homogeneous matrix.
    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let m = self.to_homogeneous();
        let mut rows = [[0.0; 4]; 4];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
        }
        rows
    }

    pub fn from_rows(rows: &[[f64; 4]; 4]) -> Result<Self> {
        let rotation = Matrix3::from_fn(|r, c| rows[r][c]);
        let translation = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        if rows[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidTransform("last row must be 0 0 0 1".into()));
        }
        Self::new(rotation, translation)
    }

    /// Closed-form least-squares rigid fit with `dst ≈ R · src + T`.
    ///
    /// Returns `None` for fewer than three pairs or a fully degenerate
    /// source configuration.
    pub fn fit_points(src: &[Point3], dst: &[Point3]) -> Option<RigidTransform> {
        let w = vec![1.0; src.len().min(dst.len())];
        Self::fit_points_weighted(src, dst, &w)
    }

    pub fn fit_points_weighted(src: &[Point3], dst: &[Point3], weights: &[f64]) -> Option<RigidTransform> {
        let n = src.len();
        if n < 3 || dst.len() != n || weights.len() != n {
            return None;
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return None;
        }
        let mut cs = Vector3::zeros();
        let mut cd = Vector3::zeros();
        for i in 0..n {
            cs += src[i] * weights[i];
            cd += dst[i] * weights[i];
        }
        cs /= wsum;
        cd /= wsum;
        let mut h = Matrix3::zeros();
        for i in 0..n {
            h += (src[i] - cs) * (dst[i] - cd).transpose() * weights[i];
        }
        if h.amax() == 0.0 {
            return None;
        }
        let rotation = polar_rotation(&h)?;
        Some(RigidTransform {
            rotation,
            translation: cd - rotation * cs,
        })
    }
}

/// Rotation `R` maximizing `tr(R · H)` for a cross-covariance `H`,
/// with `det(R) = +1`.
fn polar_rotation(h: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = h.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    Some(v * fix * u.transpose())
}

pub(crate) fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    // R maximizing tr(Rᵀ M) is the polar factor of M, i.e. polar_rotation(Mᵀ).
    polar_rotation(&m.transpose()).unwrap_or_else(Matrix3::identity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_non_orthonormal() {
        assert!(RigidTransform::new(Matrix3::identity() * 1.01, Vector3::zeros()).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(reflect, Vector3::zeros()).is_err());
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = RigidTransform::from_rotation_vector(Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2), Vector3::zeros());
        let p = t.apply(&Point3::x());
        assert!((p - Point3::y()).norm() < 1e-15);
    }

    #[test]
    fn inverse_and_compose() {
        let t = RigidTransform::from_rotation_vector(Vector3::new(0.3, -0.2, 1.1), Vector3::new(4.0, -3.0, 0.5));
        let id = t.compose(&t.inverse());
        assert!((id.rotation - Matrix3::identity()).norm() < 1e-14);
        assert!(id.translation.norm() < 1e-14);
        let rows = t.to_rows();
        assert_eq!(RigidTransform::from_rows(&rows).unwrap(), t);
    }

    #[test]
    fn fit_recovers_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let truth = RigidTransform::from_rotation_vector(
                Vector3::new(rng.random(), rng.random(), rng.random()) * 2.0 - Vector3::repeat(1.0),
                Vector3::new(rng.random(), rng.random(), rng.random()) * 10.0,
            );
            let src: Vec<Point3> = (0..4)
                .map(|_| Point3::new(rng.random(), rng.random(), rng.random()) * 5.0)
                .collect();
            let dst: Vec<Point3> = src.iter().map(|p| truth.apply(p)).collect();
            let fit = RigidTransform::fit_points(&src, &dst).unwrap();
            let (da, dt) = fit.difference(&truth);
            assert!(da < 1e-6 && dt < 1e-9, "{da} {dt}");
            fit.validate().unwrap();
        }
    }

    #[test]
    fn fit_never_returns_reflection() {
        // Planar, mirrored correspondences tempt a reflection.
        let src = [Point3::new(0., 0., 0.), Point3::new(1., 0., 0.), Point3::new(0., 1., 0.), Point3::new(1., 1., 0.)];
        let dst: Vec<Point3> = src.iter().map(|p| Point3::new(p.x, -p.y, 0.0)).collect();
        let fit = RigidTransform::fit_points(&src, &dst).unwrap();
        assert!((fit.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthonormalize_repairs_drift() {
        let t = RigidTransform::from_rotation_vector(Vector3::new(0.1, 0.2, 0.3), Vector3::zeros());
        let drifted = RigidTransform {
            rotation: t.rotation + Matrix3::repeat(1e-6),
            translation: Vector3::zeros(),
        };
        let fixed = drifted.orthonormalized();
        fixed.validate().unwrap();
        assert!((fixed.rotation - t.rotation).amax() < 1e-5);
    }
}
