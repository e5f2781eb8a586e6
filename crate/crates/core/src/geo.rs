//! Planar geometry and bivariate Gaussian primitives.
//!
//! All lengths are centimeters, angles radians. A pose's body frame has the
//! object's width along body x and its length along body y, so at heading 0
//! the width spans world x. The object travels along body +y.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Rotation2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ln(2π)`, the NLL of a unit bivariate normal at its mean.
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A bivariate normal over object location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2D {
    mean: Vector2<f64>,
    cov: Matrix2<f64>,
}

impl Gaussian2D {
    /// Builds a Gaussian after symmetrizing `cov` and checking that it is
    /// positive definite and everything is finite.
    pub fn new(mean: Vector2<f64>, cov: Matrix2<f64>) -> Result<Self> {
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gaussian mean"));
        }
        if !cov.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gaussian covariance"));
        }
        let cov = symmetrize2(&cov);
        cholesky2x2(&cov)?;
        Ok(Self { mean, cov })
    }

    /// Isotropic Gaussian `N(mean, variance·I)`.
    pub fn isotropic(mean: Vector2<f64>, variance: f64) -> Result<Self> {
        Self::new(mean, Matrix2::identity() * variance)
    }

    /// Skips validation. Callers must guarantee the invariants.
    pub(crate) fn from_parts_unchecked(mean: Vector2<f64>, cov: Matrix2<f64>) -> Self {
        Self {
            mean,
            cov: symmetrize2(&cov),
        }
    }

    pub fn mean(&self) -> Vector2<f64> {
        self.mean
    }

    pub fn cov(&self) -> Matrix2<f64> {
        self.cov
    }

    /// Rotates mean and covariance about the world origin.
    pub fn rotated(&self, angle: f64) -> Self {
        let r = *Rotation2::new(angle).matrix();
        Self::from_parts_unchecked(r * self.mean, r * self.cov * r.transpose())
    }

    /// Eigenvalues of the covariance in ascending order.
    pub fn cov_eigenvalues(&self) -> (f64, f64) {
        sym2_eigenvalues(&self.cov)
    }
}

/// Ground-truth pose of the tracked rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    pub position: Vector2<f64>,
    /// Radians in `[-π, π)`.
    pub heading: f64,
    /// `(width, length)` in cm.
    pub extent: (f64, f64),
}

impl ObjectPose {
    pub fn new(position: Vector2<f64>, heading: f64, extent: (f64, f64)) -> Result<Self> {
        if !(extent.0 > 0.0 && extent.1 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "object extent must be positive, got {:?}",
                extent
            )));
        }
        if !position.iter().all(|v| v.is_finite()) || !heading.is_finite() {
            return Err(Error::NonFinite("object pose"));
        }
        Ok(Self {
            position,
            heading: wrap_angle(heading),
            extent,
        })
    }

    /// Maps a world point into the body frame.
    pub fn to_body(&self, point: &Vector2<f64>) -> Vector2<f64> {
        Rotation2::new(-self.heading) * (point - self.position)
    }

    /// Maps a body-frame point into the world frame.
    pub fn to_world(&self, body: &Vector2<f64>) -> Vector2<f64> {
        Rotation2::new(self.heading) * body + self.position
    }
}

/// Rectangular tracking area anchored at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arena {
    pub width: f64,
    pub length: f64,
}

impl Default for Arena {
    fn default() -> Self {
        Self {
            width: 500.0,
            length: 700.0,
        }
    }
}

impl Arena {
    pub fn new(width: f64, length: f64) -> Result<Self> {
        if !(width > 0.0 && length > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "arena dimensions must be positive, got {width}x{length}"
            )));
        }
        Ok(Self { width, length })
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.width / 2.0, self.length / 2.0)
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        (0.0..=self.width).contains(&p.x) && (0.0..=self.length).contains(&p.y)
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    if (-PI..PI).contains(&theta) {
        return theta;
    }
    let w = (theta + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to TAU for tiny negative inputs
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

pub(crate) fn symmetrize2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let off = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    Matrix2::new(m[(0, 0)], off, off, m[(1, 1)])
}

/// Eigenvalues of a symmetric 2×2 matrix, ascending.
pub fn sym2_eigenvalues(m: &Matrix2<f64>) -> (f64, f64) {
    let (a, b, c) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    (mid - rad, mid + rad)
}

/// Lower Cholesky factor of a symmetric 2×2 matrix.
pub fn cholesky2x2(cov: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    let a = cov[(0, 0)];
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::NotPositiveDefinite { minor: 1, value: a });
    }
    let l00 = a.sqrt();
    let l10 = cov[(1, 0)] / l00;
    let schur = cov[(1, 1)] - l10 * l10;
    if !(schur > 0.0) || !schur.is_finite() {
        // report the 2×2 leading minor, i.e. the determinant
        return Err(Error::NotPositiveDefinite {
            minor: 2,
            value: schur * a,
        });
    }
    Ok(Matrix2::new(l00, 0.0, l10, schur.sqrt()))
}

/// Log density of `point` under `g`.
pub fn log_density(g: &Gaussian2D, point: &Vector2<f64>) -> Result<f64> {
    Ok(-nll(g, point)?)
}

/// Negative log likelihood (nats) of `point` under `g`.
pub fn nll(g: &Gaussian2D, point: &Vector2<f64>) -> Result<f64> {
    let l = cholesky2x2(&g.cov)?;
    let d = point - g.mean;
    let z0 = d.x / l[(0, 0)];
    let z1 = (d.y - l[(1, 0)] * z0) / l[(1, 1)];
    Ok(0.5 * (z0 * z0 + z1 * z1) + l[(0, 0)].ln() + l[(1, 1)].ln() + LN_2PI)
}

/// Whether `point` lies inside the pose's rectangle. The boundary counts as
/// inside.
pub fn point_in_pose(pose: &ObjectPose, point: &Vector2<f64>) -> bool {
    let b = pose.to_body(point);
    b.x.abs() <= 0.5 * pose.extent.0 && b.y.abs() <= 0.5 * pose.extent.1
}

/// Draws `n` points from `g` as `mean + L·z`.
pub fn sample_gaussian<R: Rng + ?Sized>(
    g: &Gaussian2D,
    rng: &mut R,
    n: usize,
) -> Result<Vec<Vector2<f64>>> {
    let l = cholesky2x2(&g.cov)?;
    Ok((0..n)
        .map(|_| {
            let z = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            g.mean + l * z
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense_nll(mean: Vector2<f64>, cov: Matrix2<f64>, p: Vector2<f64>) -> f64 {
        // bivariate normal density written out with correlation
        let sx = cov[(0, 0)].sqrt();
        let sy = cov[(1, 1)].sqrt();
        let rho = cov[(0, 1)] / (sx * sy);
        let dx = (p.x - mean.x) / sx;
        let dy = (p.y - mean.y) / sy;
        let q = (dx * dx - 2.0 * rho * dx * dy + dy * dy) / (1.0 - rho * rho);
        let density = (-0.5 * q).exp() / (2.0 * PI * sx * sy * (1.0 - rho * rho).sqrt());
        -density.ln()
    }

    #[test]
    fn nll_closed_forms() {
        let g = Gaussian2D::isotropic(Vector2::zeros(), 1.0).unwrap();
        assert_relative_eq!(nll(&g, &Vector2::zeros()).unwrap(), LN_2PI, epsilon = 1e-12);
        assert_relative_eq!(LN_2PI, (2.0 * PI).ln(), epsilon = 1e-15);
        let g = Gaussian2D::isotropic(Vector2::zeros(), 4.0).unwrap();
        assert_relative_eq!(
            nll(&g, &Vector2::zeros()).unwrap(),
            3.224_171,
            epsilon = 1e-6
        );
    }

    #[test]
    fn nll_matches_dense_formula() {
        let mean = Vector2::new(10.0, 20.0);
        let cov = Matrix2::new(4.0, 1.0, 1.0, 9.0);
        let g = Gaussian2D::new(mean, cov).unwrap();
        let p = Vector2::new(12.0, 18.0);
        assert_relative_eq!(
            nll(&g, &p).unwrap(),
            dense_nll(mean, cov, p),
            epsilon = 1e-12
        );
    }

    #[test]
    fn cholesky_examples() {
        assert_eq!(cholesky2x2(&Matrix2::identity()).unwrap(), Matrix2::identity());
        assert_eq!(
            cholesky2x2(&Matrix2::new(4.0, 0.0, 0.0, 9.0)).unwrap(),
            Matrix2::new(2.0, 0.0, 0.0, 3.0)
        );
        let l = cholesky2x2(&Matrix2::new(4.0, 2.0, 2.0, 5.0)).unwrap();
        assert_eq!(l, Matrix2::new(2.0, 0.0, 1.0, 2.0));
        assert_eq!(l * l.transpose(), Matrix2::new(4.0, 2.0, 2.0, 5.0));
    }

    #[test]
    fn cholesky_reports_offending_minor() {
        match cholesky2x2(&Matrix2::new(-1.0, 0.0, 0.0, 1.0)) {
            Err(Error::NotPositiveDefinite { minor: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match cholesky2x2(&Matrix2::new(1.0, 2.0, 2.0, 1.0)) {
            Err(Error::NotPositiveDefinite { minor: 2, value }) => {
                assert_relative_eq!(value, -3.0, epsilon = 1e-12)
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(Gaussian2D::new(Vector2::zeros(), Matrix2::zeros()).is_err());
    }

    #[test]
    fn point_in_pose_examples() {
        let pose = ObjectPose::new(Vector2::zeros(), 0.0, (15.0, 30.0)).unwrap();
        assert!(point_in_pose(&pose, &Vector2::zeros()));
        assert!(!point_in_pose(&pose, &Vector2::new(7.6, 0.0)));
        assert!(point_in_pose(&pose, &Vector2::new(7.5, 15.0)));
        let rotated = ObjectPose::new(Vector2::zeros(), PI / 2.0, (15.0, 30.0)).unwrap();
        assert!(point_in_pose(&rotated, &Vector2::new(0.0, 7.4)));
        assert!(!point_in_pose(&rotated, &Vector2::new(0.0, 7.6)));
        assert!(point_in_pose(&rotated, &Vector2::new(14.9, 0.0)));
    }

    #[test]
    fn wrap_angle_range() {
        for k in -20..20 {
            let w = wrap_angle(k as f64 * 0.7);
            assert!((-PI..PI).contains(&w));
        }
        assert_eq!(wrap_angle(PI), -PI);
    }

    #[test]
    fn sampling_behaviour() {
        let tight = Gaussian2D::isotropic(Vector2::new(3.0, -2.0), 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in sample_gaussian(&tight, &mut rng, 500).unwrap() {
            assert!((p - tight.mean()).norm() < 1e-4);
        }

        let unit = Gaussian2D::isotropic(Vector2::zeros(), 1.0).unwrap();
        let a = sample_gaussian(&unit, &mut ChaCha8Rng::seed_from_u64(9), 1000).unwrap();
        let b = sample_gaussian(&unit, &mut ChaCha8Rng::seed_from_u64(9), 1000).unwrap();
        assert_eq!(a, b);
        let mean = a.iter().sum::<Vector2<f64>>() / 1000.0;
        assert!(mean.x.abs() < 0.15 && mean.y.abs() < 0.15, "{mean:?}");
    }
}
