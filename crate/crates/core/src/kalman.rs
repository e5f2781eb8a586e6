//! Constant-velocity, multi-observation Kalman filter over `(px, py, vx, vy)`.
//!
//! Every state carries a list of forward-mode tangents `(∂x/∂θ, ∂P/∂θ)`.
//! Tangent 0 is always the acceleration noise `sigma_accel`; further tangents
//! belong to observation-model parameters and enter through per-observation
//! covariance derivatives (see [`Observation::d_cov`]).

use std::fmt;

use nalgebra::{Matrix2, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{cholesky2x2, Gaussian2D, LN_2PI};

/// Frame spacing of a 20 Hz capture.
pub const DEFAULT_DT: f64 = 1.0 / 20.0;
pub const DEFAULT_SIGMA_ACCEL: f64 = 200.0;
pub const DEFAULT_INIT_VEL_VAR: f64 = 1.0e4;
/// Index of the `sigma_accel` tangent.
pub const SIGMA_TANGENT: usize = 0;

const TIME_TOL: f64 = 1e-9;

/// Camera / sensor view label.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ViewId(pub String);

impl fmt::Display for ViewId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ViewId {
    fn from(s: &str) -> Self {
        ViewId(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    /// Std of the white acceleration noise, cm/s².
    pub sigma_accel: f64,
    /// Initial per-axis velocity variance, (cm/s)².
    pub init_vel_var: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            sigma_accel: DEFAULT_SIGMA_ACCEL,
            init_vel_var: DEFAULT_INIT_VEL_VAR,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_accel > 0.0 && self.sigma_accel.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma_accel must be positive, got {}",
                self.sigma_accel
            )));
        }
        if !(self.init_vel_var > 0.0 && self.init_vel_var.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "init_vel_var must be positive, got {}",
                self.init_vel_var
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub view: ViewId,
    pub gaussian: Gaussian2D,
}

/// All detections captured at one timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFrame {
    pub t: f64,
    pub detections: Vec<Detection>,
}

impl DetectionFrame {
    pub fn new(t: f64, detections: Vec<Detection>) -> Result<Self> {
        let frame = Self { t, detections };
        frame.check_unique_views()?;
        Ok(frame)
    }

    pub fn empty(t: f64) -> Self {
        Self {
            t,
            detections: Vec::new(),
        }
    }

    pub fn check_unique_views(&self) -> Result<()> {
        for (i, d) in self.detections.iter().enumerate() {
            if self.detections[..i].iter().any(|e| e.view == d.view) {
                return Err(Error::DuplicateView(d.view.0.clone()));
            }
        }
        Ok(())
    }

    /// Observations with no parameter dependence.
    pub fn observations(&self) -> Vec<Observation> {
        self.detections
            .iter()
            .map(|d| Observation::new(&d.gaussian))
            .collect()
    }
}

/// A position measurement with covariance `cov`, plus the derivative of
/// `cov` with respect to selected tangents as sparse `(tangent, ∂R)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub d_cov: Vec<(usize, Matrix2<f64>)>,
}

impl Observation {
    pub fn new(g: &Gaussian2D) -> Self {
        Self {
            mean: g.mean(),
            cov: g.cov(),
            d_cov: Vec::new(),
        }
    }

    fn d_cov_for(&self, tangent: usize) -> Matrix2<f64> {
        self.d_cov
            .iter()
            .filter(|(k, _)| *k == tangent)
            .map(|(_, m)| *m)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tangent {
    pub x: Vector4<f64>,
    pub p: Matrix4<f64>,
}

impl Tangent {
    fn zero() -> Self {
        Self {
            x: Vector4::zeros(),
            p: Matrix4::zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub t: f64,
    pub x: Vector4<f64>,
    pub p: Matrix4<f64>,
    pub tangents: Vec<Tangent>,
}

impl KalmanState {
    /// `∂x/∂sigma_accel`.
    pub fn sens_x(&self) -> Vector4<f64> {
        self.tangents[SIGMA_TANGENT].x
    }

    /// `∂P/∂sigma_accel`.
    pub fn sens_p(&self) -> Matrix4<f64> {
        self.tangents[SIGMA_TANGENT].p
    }

    pub fn position(&self) -> Vector2<f64> {
        self.x.fixed_rows::<2>(0).into_owned()
    }
}

fn inv2_pd(m: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    cholesky2x2(m)?;
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    Ok(Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det)
}

fn sym4(m: &Matrix4<f64>) -> Matrix4<f64> {
    (m + m.transpose()) * 0.5
}

fn sym2(m: &Matrix2<f64>) -> Matrix2<f64> {
    (m + m.transpose()) * 0.5
}

fn position_block(p: &Matrix4<f64>) -> Matrix2<f64> {
    p.fixed_view::<2, 2>(0, 0).into_owned()
}

fn transition(dt: f64) -> Matrix4<f64> {
    let mut f = Matrix4::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    f
}

/// Process covariance for unit acceleration std (multiply by `sigma_accel²`).
pub fn unit_process_noise(dt: f64) -> Matrix4<f64> {
    let (pp, pv, vv) = (dt.powi(4) / 4.0, dt.powi(3) / 2.0, dt * dt);
    let mut q = Matrix4::zeros();
    for axis in 0..2 {
        let (p, v) = (axis, axis + 2);
        q[(p, p)] = pp;
        q[(p, v)] = pv;
        q[(v, p)] = pv;
        q[(v, v)] = vv;
    }
    q
}

/// Initializes from the precision-weighted fusion of the frame's detections
/// with zero velocity.
pub fn init(frame: &DetectionFrame, params: &FilterParams) -> Result<KalmanState> {
    frame.check_unique_views()?;
    init_observations(frame.t, &frame.observations(), params, 1)
}

/// Like [`init`] for parameter-dependent observations; the state carries
/// `n_tangents` tangents.
pub fn init_observations(
    t: f64,
    obs: &[Observation],
    params: &FilterParams,
    n_tangents: usize,
) -> Result<KalmanState> {
    params.validate()?;
    if obs.is_empty() {
        return Err(Error::NoDetection);
    }
    let n_tangents = n_tangents.max(1);

    let (mean, cov, d_mean, d_cov) = if let [single] = obs {
        cholesky2x2(&single.cov)?;
        let d_cov = (0..n_tangents).map(|k| single.d_cov_for(k)).collect();
        (
            single.mean,
            single.cov,
            vec![Vector2::zeros(); n_tangents],
            d_cov,
        )
    } else {
        let mut info = Matrix2::zeros();
        let mut eta = Vector2::zeros();
        let mut d_info = vec![Matrix2::zeros(); n_tangents];
        let mut d_eta = vec![Vector2::zeros(); n_tangents];
        for o in obs {
            let r_inv = inv2_pd(&o.cov)?;
            info += r_inv;
            eta += r_inv * o.mean;
            for &(k, dr) in &o.d_cov {
                if k >= n_tangents {
                    return Err(Error::InvalidArgument(format!("tangent index {k} out of range")));
                }
                let d_r_inv = -r_inv * dr * r_inv;
                d_info[k] += d_r_inv;
                d_eta[k] += d_r_inv * o.mean;
            }
        }
        let cov = sym2(&inv2_pd(&info)?);
        let mean = cov * eta;
        let mut dm = Vec::with_capacity(n_tangents);
        let mut dc = Vec::with_capacity(n_tangents);
        for k in 0..n_tangents {
            let d_cov = sym2(&(-cov * d_info[k] * cov));
            dm.push(d_cov * eta + cov * d_eta[k]);
            dc.push(d_cov);
        }
        (mean, cov, dm, dc)
    };

    let mut p = Matrix4::zeros();
    p.fixed_view_mut::<2, 2>(0, 0).copy_from(&cov);
    p[(2, 2)] = params.init_vel_var;
    p[(3, 3)] = params.init_vel_var;
    let x = Vector4::new(mean.x, mean.y, 0.0, 0.0);
    let tangents = (0..n_tangents)
        .map(|k| {
            let mut tan = Tangent::zero();
            tan.x.fixed_rows_mut::<2>(0).copy_from(&d_mean[k]);
            tan.p.fixed_view_mut::<2, 2>(0, 0).copy_from(&d_cov[k]);
            tan
        })
        .collect();
    Ok(KalmanState { t, x, p, tangents })
}

/// Propagates the state `dt` seconds under the constant-velocity model.
pub fn predict(state: &KalmanState, dt: f64, params: &FilterParams) -> Result<KalmanState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    params.validate()?;
    let f = transition(dt);
    let ft = f.transpose();
    let q_unit = unit_process_noise(dt);
    let sigma = params.sigma_accel;
    let x = f * state.x;
    let p = sym4(&(f * state.p * ft + q_unit * (sigma * sigma)));
    let tangents = state
        .tangents
        .iter()
        .enumerate()
        .map(|(k, tan)| {
            let mut dp = f * tan.p * ft;
            if k == SIGMA_TANGENT {
                dp += q_unit * (2.0 * sigma);
            }
            Tangent {
                x: f * tan.x,
                p: sym4(&dp),
            }
        })
        .collect();
    Ok(KalmanState {
        t: state.t + dt,
        x,
        p,
        tangents,
    })
}

/// Conditions on every detection of `frame` and returns each detection's
/// predictive NLL.
pub fn update(state: &KalmanState, frame: &DetectionFrame) -> Result<(KalmanState, Vec<f64>)> {
    if (frame.t - state.t).abs() > TIME_TOL * frame.t.abs().max(1.0) {
        return Err(Error::TimeMismatch {
            frame: frame.t,
            state: state.t,
        });
    }
    frame.check_unique_views()?;
    update_observations(state, &frame.observations())
}

/// Sequential conditionally-independent updates with Joseph-form covariance.
pub fn update_observations(
    state: &KalmanState,
    obs: &[Observation],
) -> Result<(KalmanState, Vec<f64>)> {
    let mut s = state.clone();
    let mut nlls = Vec::with_capacity(obs.len());
    for o in obs {
        let (next, nll) = update_one(&s, o)?;
        s = next;
        nlls.push(nll);
    }
    Ok((s, nlls))
}

fn update_one(state: &KalmanState, o: &Observation) -> Result<(KalmanState, f64)> {
    if let Some(&(k, _)) = o.d_cov.iter().find(|(k, _)| *k >= state.tangents.len()) {
        return Err(Error::InvalidArgument(format!("tangent index {k} out of range")));
    }
    let p = &state.p;
    let r = o.cov;
    let s = position_block(p) + r;
    let s_inv = inv2_pd(&s)?;
    let pht: Matrix4x2<f64> = p.fixed_view::<4, 2>(0, 0).into_owned();
    let k = pht * s_inv;
    let y = o.mean - state.position();

    let mut kh = Matrix4::zeros();
    kh.fixed_view_mut::<4, 2>(0, 0).copy_from(&k);
    let a = Matrix4::identity() - kh;
    let at = a.transpose();
    let kt = k.transpose();

    let x_new = state.x + k * y;
    let p_new = sym4(&(a * p * at + k * r * kt));

    let tangents = state
        .tangents
        .iter()
        .enumerate()
        .map(|(idx, tan)| {
            let dr = o.d_cov_for(idx);
            let ds = position_block(&tan.p) + dr;
            let d_s_inv = -s_inv * ds * s_inv;
            let d_pht: Matrix4x2<f64> = tan.p.fixed_view::<4, 2>(0, 0).into_owned();
            let dk = d_pht * s_inv + pht * d_s_inv;
            let dy = -tan.x.fixed_rows::<2>(0);
            let dx = tan.x + dk * y + k * dy;
            let mut dkh = Matrix4::zeros();
            dkh.fixed_view_mut::<4, 2>(0, 0).copy_from(&dk);
            let da = -dkh;
            let dkt = dk.transpose();
            let dp = da * p * at
                + a * tan.p * at
                + a * p * da.transpose()
                + dk * r * kt
                + k * dr * kt
                + k * r * dkt;
            Tangent { x: dx, p: sym4(&dp) }
        })
        .collect();

    let nll = 0.5 * y.dot(&(s_inv * y)) + 0.5 * s.determinant().ln() + LN_2PI;
    Ok((
        KalmanState {
            t: state.t,
            x: x_new,
            p: p_new,
            tangents,
        },
        nll,
    ))
}

/// Position marginal of the state.
pub fn marginal(state: &KalmanState) -> Gaussian2D {
    Gaussian2D::from_parts_unchecked(state.position(), position_block(&state.p))
}

/// NLL of `truth` under the state's position marginal and its derivative
/// along every tangent.
pub fn marginal_nll_with_grad(
    state: &KalmanState,
    truth: &Vector2<f64>,
) -> Result<(f64, Vec<f64>)> {
    let cov = position_block(&state.p);
    let cov_inv = inv2_pd(&cov)?;
    let d = truth - state.position();
    let u = cov_inv * d;
    let nll = 0.5 * d.dot(&u) + 0.5 * cov.determinant().ln() + LN_2PI;
    let grad = state
        .tangents
        .iter()
        .map(|tan| {
            let dm = tan.x.fixed_rows::<2>(0);
            let dc = position_block(&tan.p);
            -u.dot(&dm) - 0.5 * u.dot(&(dc * u)) + 0.5 * (cov_inv * dc).trace()
        })
        .collect();
    Ok((nll, grad))
}

/// Which marginal the per-step NLL is scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NllMode {
    /// Post-update marginal.
    #[default]
    Filtered,
    /// Pre-update (one-step-ahead) marginal. The initialization step has no
    /// prediction and is scored on its fused marginal.
    Predictive,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunOptions {
    pub nll_mode: NllMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackStep {
    /// Index of the source frame.
    pub index: usize,
    pub t: f64,
    pub marginal: Gaussian2D,
    /// Predictive NLL of each detection absorbed at this step.
    pub detection_nlls: Vec<f64>,
    pub nll: Option<f64>,
    /// Derivative of `nll` along each tangent (empty without truth).
    pub nll_grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    /// Index of the first non-empty frame.
    pub first_index: usize,
    pub steps: Vec<TrackStep>,
    pub total_nll: f64,
    pub total_nll_grad: Vec<f64>,
    pub final_state: KalmanState,
}

impl TrackResult {
    pub fn nll_count(&self) -> usize {
        self.steps.iter().filter(|s| s.nll.is_some()).count()
    }

    pub fn mean_nll(&self) -> Option<f64> {
        let n = self.nll_count();
        (n > 0).then(|| self.total_nll / n as f64)
    }

    /// `∂ total_nll / ∂ sigma_accel`.
    pub fn total_nll_grad_sigma(&self) -> f64 {
        self.total_nll_grad[SIGMA_TANGENT]
    }
}

/// Parameter-dependent observations at one timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationFrame {
    pub t: f64,
    pub obs: Vec<Observation>,
}

/// Filters a detection sequence: initializes on the first non-empty frame,
/// then predicts to and updates on every later frame.
pub fn run_sequence(
    frames: &[DetectionFrame],
    params: &FilterParams,
    truth: Option<&[Vector2<f64>]>,
    options: RunOptions,
) -> Result<TrackResult> {
    let steps = frames
        .iter()
        .map(|f| {
            f.check_unique_views()?;
            Ok(ObservationFrame {
                t: f.t,
                obs: f.observations(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    run_observations(&steps, params, 1, truth, options)
}

/// [`run_sequence`] over parameter-dependent observations with
/// `n_tangents` sensitivities.
pub fn run_observations(
    frames: &[ObservationFrame],
    params: &FilterParams,
    n_tangents: usize,
    truth: Option<&[Vector2<f64>]>,
    options: RunOptions,
) -> Result<TrackResult> {
    if let Some(truth) = truth {
        if truth.len() != frames.len() {
            return Err(Error::LengthMismatch {
                what: "frames vs truth",
                left: frames.len(),
                right: truth.len(),
            });
        }
    }
    for (i, w) in frames.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            return Err(Error::NonMonotoneTime {
                index: i + 1,
                prev: w[0].t,
                t: w[1].t,
            });
        }
    }
    let first = frames
        .iter()
        .position(|f| !f.obs.is_empty())
        .ok_or(Error::NoDetection)?;
    let n_tangents = n_tangents.max(1);

    let mut state = init_observations(frames[first].t, &frames[first].obs, params, n_tangents)?;
    let mut steps = Vec::with_capacity(frames.len() - first);
    let mut total_nll = 0.0;
    let mut total_grad = vec![0.0; n_tangents];

    let mut score = |state: &KalmanState, index: usize| -> Result<(Option<f64>, Vec<f64>)> {
        match truth {
            Some(truth) => {
                let (nll, grad) = marginal_nll_with_grad(state, &truth[index])?;
                total_nll += nll;
                for (acc, g) in total_grad.iter_mut().zip(&grad) {
                    *acc += g;
                }
                Ok((Some(nll), grad))
            }
            None => Ok((None, Vec::new())),
        }
    };

    let (nll, nll_grad) = score(&state, first)?;
    steps.push(TrackStep {
        index: first,
        t: state.t,
        marginal: marginal(&state),
        detection_nlls: Vec::new(),
        nll,
        nll_grad,
    });

    for (index, frame) in frames.iter().enumerate().skip(first + 1) {
        let prior = predict(&state, frame.t - state.t, params)?;
        // pin the clock to the frame to avoid drift from repeated addition
        let prior = KalmanState { t: frame.t, ..prior };
        let predictive = match options.nll_mode {
            NllMode::Predictive => Some(score(&prior, index)?),
            NllMode::Filtered => None,
        };
        let (posterior, detection_nlls) = update_observations(&prior, &frame.obs)?;
        let (nll, nll_grad) = match predictive {
            Some(p) => p,
            None => score(&posterior, index)?,
        };
        steps.push(TrackStep {
            index,
            t: frame.t,
            marginal: marginal(&posterior),
            detection_nlls,
            nll,
            nll_grad,
        });
        state = posterior;
    }

    Ok(TrackResult {
        first_index: first,
        steps,
        total_nll,
        total_nll_grad: total_grad,
        final_state: state,
    })
}
