//! Affine covariance recalibration `Σ' = a·Σ + b·I` and its validation-NLL
//! grid search.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{Gaussian2D, LN_2PI};
use crate::kalman::{Detection, DetectionFrame, ViewId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub a: f64,
    pub b: f64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl CalibrationParams {
    pub const IDENTITY: Self = Self { a: 1.0, b: 0.0 };

    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) || !(b >= 0.0 && b.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "calibration needs a > 0 and b >= 0, got a={a} b={b}"
            )));
        }
        Ok(Self { a, b })
    }

    pub fn apply_cov(&self, cov: &Matrix2<f64>) -> Matrix2<f64> {
        cov * self.a + Matrix2::identity() * self.b
    }

    /// Mean unchanged, covariance `a·Σ + b·I`.
    pub fn apply(&self, g: &Gaussian2D) -> Gaussian2D {
        Gaussian2D::from_parts_unchecked(g.mean(), self.apply_cov(&g.cov()))
    }
}

/// One axis of a search grid, e.g. `0.05:10:log60`, `0:500:lin51` or a
/// comma list `1,2,4`.
pub fn parse_axis(spec: &str) -> Result<Vec<f64>> {
    let bad = |msg: &str| Error::InvalidArgument(format!("grid axis `{spec}`: {msg}"));
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [lo, hi, kind] => {
            let lo: f64 = lo.trim().parse().map_err(|_| bad("bad lower bound"))?;
            let hi: f64 = hi.trim().parse().map_err(|_| bad("bad upper bound"))?;
            let kind = kind.trim();
            let (log, n) = if let Some(n) = kind.strip_prefix("log") {
                (true, n)
            } else if let Some(n) = kind.strip_prefix("lin") {
                (false, n)
            } else {
                return Err(bad("expected lin<N> or log<N>"));
            };
            let n: usize = n.parse().map_err(|_| bad("bad point count"))?;
            if n == 0 || !(hi >= lo) {
                return Err(bad("empty range"));
            }
            if log && !(lo > 0.0) {
                return Err(bad("log spacing needs a positive lower bound"));
            }
            if n == 1 {
                return Ok(vec![lo]);
            }
            let step = |i: usize| i as f64 / (n - 1) as f64;
            Ok((0..n)
                .map(|i| match (i, log) {
                    (0, _) => lo,
                    (i, _) if i == n - 1 => hi,
                    (i, true) => (lo.ln() + step(i) * (hi.ln() - lo.ln())).exp(),
                    (i, false) => lo + step(i) * (hi - lo),
                })
                .collect())
        }
        [list] => list
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad("bad number")))
            .collect(),
        _ => Err(bad("expected lo:hi:lin<N>, lo:hi:log<N> or a comma list")),
    }
}

pub const DEFAULT_GRID_A: &str = "0.05:10:log60";
pub const DEFAULT_GRID_B: &str = "0:500:lin51";

/// Candidate `(a, b)` values. Always contains the identity point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationGrid {
    a_values: Vec<f64>,
    b_values: Vec<f64>,
}

impl Default for CalibrationGrid {
    fn default() -> Self {
        Self::from_specs(DEFAULT_GRID_A, DEFAULT_GRID_B).expect("default grid specs are valid")
    }
}

impl CalibrationGrid {
    /// Sorts, deduplicates and inserts `a = 1`, `b = 0`.
    pub fn new(mut a_values: Vec<f64>, mut b_values: Vec<f64>) -> Result<Self> {
        if a_values.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::InvalidArgument("grid a values must be > 0".into()));
        }
        if b_values.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(Error::InvalidArgument("grid b values must be >= 0".into()));
        }
        a_values.push(1.0);
        b_values.push(0.0);
        for v in [&mut a_values, &mut b_values] {
            v.sort_by(f64::total_cmp);
            v.dedup();
        }
        Ok(Self { a_values, b_values })
    }

    pub fn from_specs(a_spec: &str, b_spec: &str) -> Result<Self> {
        Self::new(parse_axis(a_spec)?, parse_axis(b_spec)?)
    }

    pub fn a_values(&self) -> &[f64] {
        &self.a_values
    }

    pub fn b_values(&self) -> &[f64] {
        &self.b_values
    }
}

/// A calibrated Gaussian paired with the true location.
pub type CalibrationPair = (Gaussian2D, Vector2<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFit {
    pub params: CalibrationParams,
    /// Mean validation NLL at `params`.
    pub nll: f64,
    /// Mean validation NLL at the identity.
    pub uncalibrated_nll: f64,
}

// (Σ00, Σ01, Σ11, dx, dy)
type PairTerms = (f64, f64, f64, f64, f64);

fn pair_terms(pairs: &[CalibrationPair]) -> Vec<PairTerms> {
    pairs
        .iter()
        .map(|(g, truth)| {
            let c = g.cov();
            let d = truth - g.mean();
            (c[(0, 0)], c[(0, 1)], c[(1, 1)], d.x, d.y)
        })
        .collect()
}

fn mean_nll_terms(terms: &[PairTerms], a: f64, b: f64) -> f64 {
    let sum: f64 = terms
        .iter()
        .map(|&(s00, s01, s11, dx, dy)| {
            let (c00, c01, c11) = (a * s00 + b, a * s01, a * s11 + b);
            let det = c00 * c11 - c01 * c01;
            let quad = (dx * dx * c11 - 2.0 * dx * dy * c01 + dy * dy * c00) / det;
            0.5 * quad + 0.5 * det.ln() + LN_2PI
        })
        .sum();
    sum / terms.len() as f64
}

/// Mean NLL of the pairs after applying `params`.
pub fn mean_nll(params: &CalibrationParams, pairs: &[CalibrationPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("calibration pairs"));
    }
    Ok(mean_nll_terms(&pair_terms(pairs), params.a, params.b))
}

/// Exhaustive grid search for the `(a, b)` minimizing mean NLL. Ties go to
/// the smallest `a`, then the smallest `b`.
pub fn fit(grid: &CalibrationGrid, pairs: &[CalibrationPair]) -> Result<CalibrationFit> {
    if pairs.is_empty() {
        return Err(Error::Empty("calibration pairs"));
    }
    let terms = pair_terms(pairs);
    let table: Vec<Vec<f64>> = grid
        .a_values
        .par_iter()
        .map(|&a| {
            grid.b_values
                .iter()
                .map(|&b| mean_nll_terms(&terms, a, b))
                .collect()
        })
        .collect();

    let mut best = (CalibrationParams::IDENTITY, f64::INFINITY);
    for (a, row) in grid.a_values.iter().zip(&table) {
        for (b, &v) in grid.b_values.iter().zip(row) {
            if v < best.1 {
                best = (CalibrationParams { a: *a, b: *b }, v);
            }
        }
    }
    let uncalibrated_nll = mean_nll_terms(&terms, 1.0, 0.0);
    if !best.1.is_finite() {
        return Err(Error::NonFinite("calibration objective"));
    }
    Ok(CalibrationFit {
        params: best.0,
        nll: best.1,
        uncalibrated_nll,
    })
}

/// Independent fit per view. A view with no pairs yields an error entry
/// without affecting the others.
pub fn fit_per_view(
    grid: &CalibrationGrid,
    by_view: &BTreeMap<ViewId, Vec<CalibrationPair>>,
) -> BTreeMap<ViewId, Result<CalibrationFit>> {
    by_view
        .iter()
        .map(|(view, pairs)| (view.clone(), fit(grid, pairs)))
        .collect()
}

/// One `(a, b)` fit on the pooled pairs of every view.
pub fn fit_shared(
    grid: &CalibrationGrid,
    by_view: &BTreeMap<ViewId, Vec<CalibrationPair>>,
) -> Result<CalibrationFit> {
    let pooled: Vec<CalibrationPair> = by_view.values().flatten().copied().collect();
    fit(grid, &pooled)
}

/// Per-view calibration applied before fusion. Views without an entry pass
/// through unchanged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    #[serde(default)]
    pub shared: bool,
    pub views: BTreeMap<ViewId, CalibrationParams>,
}

impl CalibrationSet {
    pub fn params_for(&self, view: &ViewId) -> CalibrationParams {
        self.views.get(view).copied().unwrap_or_default()
    }

    pub fn apply_frame(&self, frame: &DetectionFrame) -> DetectionFrame {
        DetectionFrame {
            t: frame.t,
            detections: frame
                .detections
                .iter()
                .map(|d| Detection {
                    view: d.view.clone(),
                    gaussian: self.params_for(&d.view).apply(&d.gaussian),
                })
                .collect(),
        }
    }
}
