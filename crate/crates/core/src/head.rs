//! Detection output head: five unconstrained values to a valid Gaussian, and
//! the per-detection training losses.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{self, Arena, Gaussian2D, ObjectPose};

/// Raw, unconstrained head outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawHead {
    pub mean_raw: [f64; 2],
    pub diag_raw: [f64; 2],
    pub offdiag_raw: f64,
}

impl RawHead {
    pub fn zeros() -> Self {
        Self {
            mean_raw: [0.0; 2],
            diag_raw: [0.0; 2],
            offdiag_raw: 0.0,
        }
    }

    fn is_finite(&self) -> bool {
        self.mean_raw
            .iter()
            .chain(self.diag_raw.iter())
            .all(|v| v.is_finite())
            && self.offdiag_raw.is_finite()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + (-(-y).exp()).ln_1p()
}

/// Maps raw head outputs to a Gaussian over the arena.
///
/// The mean is the sigmoid of the first two values scaled to the arena. The
/// covariance is `M·Mᵀ + I` where `M` is lower-triangular with softplus
/// diagonal and the raw off-diagonal value at position (1, 0).
pub fn head_to_gaussian(raw: &RawHead, arena: &Arena) -> Result<Gaussian2D> {
    if !raw.is_finite() {
        return Err(Error::NonFinite("raw head"));
    }
    let mean = Vector2::new(
        sigmoid(raw.mean_raw[0]) * arena.width,
        sigmoid(raw.mean_raw[1]) * arena.length,
    );
    let m = Matrix2::new(
        softplus(raw.diag_raw[0]),
        0.0,
        raw.offdiag_raw,
        softplus(raw.diag_raw[1]),
    );
    let cov = m * m.transpose() + Matrix2::identity();
    Ok(Gaussian2D::from_parts_unchecked(mean, cov))
}

/// NLL of `truth` under the head's Gaussian.
pub fn nll_loss(raw: &RawHead, arena: &Arena, truth: &Vector2<f64>) -> Result<f64> {
    if !arena.contains(truth) {
        log::warn!("truth {truth:?} lies outside the arena");
    }
    geo::nll(&head_to_gaussian(raw, arena)?, truth)
}

/// Lattice of tile centers covering an object's footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtentGrid {
    pub points: Vec<Vector2<f64>>,
    /// Area represented by each point, cm².
    pub tile_area: f64,
}

/// Builds the tile-center lattice over the pose's rectangle in world frame.
///
/// Each axis carries `⌊extent/tile⌋` centers, centered on the pose.
pub fn extent_grid(pose: &ObjectPose, tile: f64) -> Result<ExtentGrid> {
    let (w, l) = pose.extent;
    if !(tile > 0.0 && tile <= 0.5 * w.min(l)) {
        return Err(Error::InvalidArgument(format!(
            "tile must be in (0, {}], got {tile}",
            0.5 * w.min(l)
        )));
    }
    let nx = (w / tile).floor() as usize;
    let ny = (l / tile).floor() as usize;
    let offset = |i: usize, n: usize| (i as f64 + 0.5 - 0.5 * n as f64) * tile;
    let points = (0..nx)
        .flat_map(|i| (0..ny).map(move |j| (i, j)))
        .map(|(i, j)| pose.to_world(&Vector2::new(offset(i, nx), offset(j, ny))))
        .collect();
    Ok(ExtentGrid {
        points,
        tile_area: tile * tile,
    })
}

/// `−log Σ N(p | g)·tile_area` over the grid, via log-sum-exp.
pub fn grid_loss(g: &Gaussian2D, grid: &ExtentGrid) -> Result<f64> {
    if grid.points.is_empty() {
        return Err(Error::Empty("extent grid"));
    }
    let logs = grid
        .points
        .iter()
        .map(|p| geo::log_density(g, p))
        .collect::<Result<Vec<_>>>()?;
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logs.iter().map(|v| (v - max).exp()).sum();
    Ok(-(max + sum.ln() + grid.tile_area.ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LN_2PI;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn zero_raw_gives_arena_center() {
        let g = head_to_gaussian(&RawHead::zeros(), &Arena::default()).unwrap();
        assert_eq!(g.mean(), Vector2::new(250.0, 350.0));
        let d = 2f64.ln().powi(2) + 1.0;
        assert_relative_eq!(g.cov(), Matrix2::new(d, 0.0, 0.0, d), epsilon = 1e-12);
        assert_relative_eq!(d, 1.48045, epsilon = 1e-5);
    }

    #[test]
    fn saturated_mean() {
        let raw = RawHead {
            mean_raw: [50.0, 50.0],
            ..RawHead::zeros()
        };
        let g = head_to_gaussian(&raw, &Arena::default()).unwrap();
        assert!((g.mean() - Vector2::new(500.0, 700.0)).norm() < 1e-9);
    }

    #[test]
    fn hand_multiplied_covariance() {
        let raw = RawHead {
            mean_raw: [0.0, 0.0],
            diag_raw: [1.0, 1.0],
            offdiag_raw: 2.0,
        };
        let s = (1.0 + 1f64.exp()).ln();
        assert_relative_eq!(s, 1.313262, epsilon = 1e-6);
        // M = [[s,0],[2,s]] → M·Mᵀ = [[s², 2s],[2s, 4+s²]]
        let expected = Matrix2::new(s * s + 1.0, 2.0 * s, 2.0 * s, 4.0 + s * s + 1.0);
        let g = head_to_gaussian(&raw, &Arena::default()).unwrap();
        assert_relative_eq!(g.cov(), expected, epsilon = 1e-12);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert_relative_eq!(softplus(0.0), 2f64.ln());
        for y in [1e-6, 0.3, 1.0, 7.0, 40.0] {
            assert_relative_eq!(softplus(softplus_inv(y)), y, max_relative = 1e-10);
        }
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn nll_loss_examples() {
        let arena = Arena::default();
        let d = 2f64.ln().powi(2) + 1.0;
        let at_mean = nll_loss(&RawHead::zeros(), &arena, &Vector2::new(250.0, 350.0)).unwrap();
        assert_relative_eq!(at_mean, LN_2PI + d.ln(), epsilon = 1e-12);
        assert_relative_eq!(at_mean, 2.230237, epsilon = 1e-4);
        let shifted = nll_loss(&RawHead::zeros(), &arena, &Vector2::new(251.0, 350.0)).unwrap();
        assert_relative_eq!(shifted - at_mean, 1.0 / (2.0 * d), epsilon = 1e-12);
        assert_relative_eq!(shifted - at_mean, 0.337735, epsilon = 1e-6);
    }

    #[test]
    fn nll_loss_stationary_at_truth() {
        let arena = Arena::default();
        let truth = Vector2::new(250.0, 350.0);
        let at = |m0: f64, m1: f64| {
            let raw = RawHead {
                mean_raw: [m0, m1],
                ..RawHead::zeros()
            };
            nll_loss(&raw, &arena, &truth).unwrap()
        };
        let best = at(0.0, 0.0);
        for (a, b) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3), (0.2, -0.1)] {
            assert!(at(a, b) > best);
        }
    }

    #[test]
    fn grid_counts_and_points() {
        let pose = ObjectPose::new(Vector2::zeros(), 0.0, (15.0, 30.0)).unwrap();
        let grid = extent_grid(&pose, 1.0).unwrap();
        assert_eq!(grid.points.len(), 450);
        assert_eq!(grid.tile_area, 1.0);
        assert!(grid.points.iter().all(|p| geo::point_in_pose(&pose, p)));

        let small = ObjectPose::new(Vector2::zeros(), 0.0, (2.0, 2.0)).unwrap();
        let mut pts: Vec<_> = extent_grid(&small, 1.0)
            .unwrap()
            .points
            .iter()
            .map(|p| (p.x, p.y))
            .collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(pts, vec![(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)]);
    }

    #[test]
    fn grid_rotation() {
        let base = ObjectPose::new(Vector2::new(3.0, 4.0), 0.0, (4.0, 6.0)).unwrap();
        let turned = ObjectPose::new(Vector2::new(3.0, 4.0), PI / 2.0, (4.0, 6.0)).unwrap();
        let a = extent_grid(&base, 1.0).unwrap().points;
        let b = extent_grid(&turned, 1.0).unwrap().points;
        for p in &a {
            let r = p - base.position;
            let expected = base.position + Vector2::new(-r.y, r.x);
            assert!(b.iter().any(|q| (q - expected).norm() < 1e-9));
        }
        assert_eq!(a.len(), b.len());
    }

    #[test]
    fn grid_tile_out_of_range() {
        let pose = ObjectPose::new(Vector2::zeros(), 0.0, (15.0, 30.0)).unwrap();
        assert!(extent_grid(&pose, 0.0).is_err());
        assert!(extent_grid(&pose, 7.6).is_err());
        assert!(extent_grid(&pose, 7.5).is_ok());
    }

    #[test]
    fn grid_loss_limits() {
        let g = Gaussian2D::new(Vector2::new(1.0, 2.0), Matrix2::new(4.0, 1.0, 1.0, 3.0)).unwrap();
        let single = ExtentGrid {
            points: vec![g.mean()],
            tile_area: 1.0,
        };
        assert_relative_eq!(
            grid_loss(&g, &single).unwrap(),
            geo::nll(&g, &g.mean()).unwrap(),
            epsilon = 1e-12
        );

        let tight = Gaussian2D::isotropic(Vector2::zeros(), 1.0).unwrap();
        let huge = ObjectPose::new(Vector2::zeros(), 0.3, (40.0, 40.0)).unwrap();
        let loss = grid_loss(&tight, &extent_grid(&huge, 0.25).unwrap()).unwrap();
        assert!(loss.abs() < 1e-6, "{loss}");
        assert!(grid_loss(&tight, &ExtentGrid { points: vec![], tile_area: 1.0 }).is_err());
    }
}
