//! Gradient fine-tuning of the filter's acceleration noise and the per-view
//! calibration parameters through the filter's sequence NLL.
//!
//! Gradients are exact and forward-mode: every tunable owns one filter
//! tangent, so a sequence costs one filter pass with `1 + 2·views` tangents.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Vector2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationParams, CalibrationSet};
use crate::error::{Error, Result};
use crate::head::{sigmoid, softplus, softplus_inv};
use crate::kalman::{
    self, DetectionFrame, FilterParams, Observation, ObservationFrame, RunOptions, ViewId,
};

/// Raw value standing in for `b = 0`; decodes to `b ≈ 9e-14`.
pub const B_RAW_FLOOR: f64 = -30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub seq_len: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub grad_clip: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Shuffles the training sequences each epoch.
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            seq_len: 100,
            epochs: 5,
            lr: 1e-4,
            lr_drop_epoch: 4,
            grad_clip: 0.1,
            batch: 8,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 7,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, message: &str| {
            Err(Error::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        if self.seq_len < 2 {
            return fail("seq_len", "must be at least 2");
        }
        if self.epochs < 1 {
            return fail("epochs", "must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr", "must be non-negative");
        }
        if !(self.grad_clip > 0.0) {
            return fail("grad_clip", "must be positive");
        }
        if self.batch < 1 {
            return fail("batch", "must be at least 1");
        }
        Ok(())
    }

    /// Step size for a 1-based epoch; divided by 10 after `lr_drop_epoch`.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch > self.lr_drop_epoch {
            self.lr / 10.0
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewTunable {
    pub log_a: f64,
    pub b_raw: f64,
}

impl ViewTunable {
    pub fn from_params(p: &CalibrationParams) -> Self {
        Self {
            log_a: p.a.ln(),
            b_raw: if p.b > 1e-12 {
                softplus_inv(p.b).max(B_RAW_FLOOR)
            } else {
                B_RAW_FLOOR
            },
        }
    }

    pub fn decode(&self) -> CalibrationParams {
        CalibrationParams {
            a: self.log_a.exp(),
            b: softplus(self.b_raw),
        }
    }
}

/// Tunables in unconstrained coordinates. The flat ordering is
/// `[log σ_a, (log a, b_raw) per view in view order]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunableParams {
    pub log_sigma_accel: f64,
    /// Held fixed during tuning.
    pub init_vel_var: f64,
    pub views: BTreeMap<ViewId, ViewTunable>,
}

impl TunableParams {
    pub fn new(filter: &FilterParams, calibration: &CalibrationSet) -> Self {
        Self {
            log_sigma_accel: filter.sigma_accel.ln(),
            init_vel_var: filter.init_vel_var,
            views: calibration
                .views
                .iter()
                .map(|(v, p)| (v.clone(), ViewTunable::from_params(p)))
                .collect(),
        }
    }

    /// Adds identity-calibrated entries for views not yet present.
    pub fn with_views<'a>(mut self, views: impl IntoIterator<Item = &'a ViewId>) -> Self {
        for v in views {
            self.views
                .entry(v.clone())
                .or_insert_with(|| ViewTunable::from_params(&CalibrationParams::IDENTITY));
        }
        self
    }

    pub fn len(&self) -> usize {
        1 + 2 * self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn filter_params(&self) -> FilterParams {
        FilterParams {
            sigma_accel: self.log_sigma_accel.exp(),
            init_vel_var: self.init_vel_var,
        }
    }

    pub fn calibration(&self) -> CalibrationSet {
        CalibrationSet {
            shared: false,
            views: self
                .views
                .iter()
                .map(|(v, t)| (v.clone(), t.decode()))
                .collect(),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.push(self.log_sigma_accel);
        for t in self.views.values() {
            out.push(t.log_a);
            out.push(t.b_raw);
        }
        out
    }

    pub fn set_from_slice(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.len(), "tunable vector length");
        self.log_sigma_accel = values[0];
        for (i, t) in self.views.values_mut().enumerate() {
            t.log_a = values[1 + 2 * i];
            t.b_raw = values[2 + 2 * i];
        }
    }
}

/// Aligned detections and ground-truth positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<DetectionFrame>,
    pub truth: Vec<Vector2<f64>>,
}

/// Cuts aligned frames into windows of `len` frames every `stride` frames.
pub fn windows(
    frames: &[DetectionFrame],
    truth: &[Vector2<f64>],
    len: usize,
    stride: usize,
) -> Result<Vec<Sequence>> {
    if frames.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "frames vs truth",
            left: frames.len(),
            right: truth.len(),
        });
    }
    if len == 0 || stride == 0 {
        return Err(Error::InvalidArgument("window length and stride must be positive".into()));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + len <= frames.len() {
        out.push(Sequence {
            frames: frames[start..start + len].to_vec(),
            truth: truth[start..start + len].to_vec(),
        });
        start += stride;
    }
    Ok(out)
}

/// Mean per-step filtered NLL of one sequence and its gradient with respect
/// to every tunable (flat ordering of [`TunableParams::to_vec`]).
pub fn sequence_loss(params: &TunableParams, seq: &Sequence) -> Result<(f64, Vec<f64>)> {
    if seq.frames.len() != seq.truth.len() {
        return Err(Error::LengthMismatch {
            what: "frames vs truth",
            left: seq.frames.len(),
            right: seq.truth.len(),
        });
    }
    if seq.frames.len() < 2 {
        return Err(Error::InvalidArgument("sequence needs at least 2 frames".into()));
    }
    let slots: BTreeMap<&ViewId, (usize, CalibrationParams)> = params
        .views
        .iter()
        .enumerate()
        .map(|(i, (v, t))| (v, (1 + 2 * i, t.decode())))
        .collect();

    let frames = seq
        .frames
        .iter()
        .map(|f| {
            f.check_unique_views()?;
            let obs = f
                .detections
                .iter()
                .map(|d| {
                    let raw = d.gaussian.cov();
                    match slots.get(&d.view) {
                        Some(&(slot, cal)) => Observation {
                            mean: d.gaussian.mean(),
                            cov: cal.apply_cov(&raw),
                            d_cov: vec![(slot, raw), (slot + 1, Matrix2::identity())],
                        },
                        None => Observation::new(&d.gaussian),
                    }
                })
                .collect();
            Ok(ObservationFrame { t: f.t, obs })
        })
        .collect::<Result<Vec<_>>>()?;

    let run = kalman::run_observations(
        &frames,
        &params.filter_params(),
        params.len(),
        Some(&seq.truth),
        RunOptions::default(),
    )?;
    let n = run.nll_count() as f64;
    let mut grad: Vec<f64> = run.total_nll_grad.iter().map(|g| g / n).collect();
    grad[0] *= params.log_sigma_accel.exp();
    for (i, t) in params.views.values().enumerate() {
        grad[1 + 2 * i] *= t.log_a.exp();
        grad[2 + 2 * i] *= sigmoid(t.b_raw);
    }
    Ok((run.total_nll / n, grad))
}

/// Mean loss and gradient over a batch, reduced in input order.
pub fn batch_loss(params: &TunableParams, seqs: &[&Sequence]) -> Result<(f64, Vec<f64>)> {
    if seqs.is_empty() {
        return Err(Error::Empty("sequence batch"));
    }
    let parts = seqs
        .par_iter()
        .map(|s| sequence_loss(params, s))
        .collect::<Result<Vec<_>>>()?;
    let n = parts.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Mean sequence NLL over a set.
pub fn mean_loss(params: &TunableParams, seqs: &[Sequence]) -> Result<f64> {
    let refs: Vec<&Sequence> = seqs.iter().collect();
    Ok(batch_loss(params, &refs)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub sigma_accel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneHistory {
    /// Epoch 0 is the evaluation of the initial parameters.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    /// Set when a non-finite training loss aborted the run.
    pub diverged: bool,
    pub config: TuneConfig,
}

impl TuneHistory {
    /// `epoch,train_nll,val_nll,sigma_accel` rows with header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_nll,val_nll,sigma_accel\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.train_nll, r.val_nll, r.sigma_accel
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    /// Parameters with the best validation NLL seen, epoch 0 included.
    pub params: TunableParams,
    pub history: TuneHistory,
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl AdamW {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn apply(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, cfg: &TuneConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for i in 0..theta.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta[i]);
        }
    }
}

fn clip_l2(grad: &mut [f64], bound: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > bound {
        let s = bound / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Mini-batch AdamW over the training sequences, keeping the parameters with
/// the best validation NLL.
pub fn tune(
    config: &TuneConfig,
    initial: &TunableParams,
    train: &[Sequence],
    val: &[Sequence],
) -> Result<TuneOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training sequences"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation sequences"));
    }

    let mut params = initial.clone();
    let mut theta = params.to_vec();
    let mut opt = AdamW::new(theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let train_nll = mean_loss(&params, train)?;
    let val_nll = mean_loss(&params, val)?;
    let mut history = TuneHistory {
        epochs: vec![EpochRecord {
            epoch: 0,
            train_nll,
            val_nll,
            sigma_accel: params.filter_params().sigma_accel,
        }],
        best_epoch: 0,
        best_val_nll: val_nll,
        diverged: false,
        config: *config,
    };
    let mut best = params.clone();

    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=config.epochs {
        let lr = config.lr_for_epoch(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch) {
            let batch: Vec<&Sequence> = chunk.iter().map(|&i| &train[i]).collect();
            let step = batch_loss(&params, &batch);
            let (loss, mut grad) = match step {
                Ok((l, g)) if l.is_finite() && g.iter().all(|v| v.is_finite()) => (l, g),
                Ok(_) | Err(Error::NotPositiveDefinite { .. }) | Err(Error::NonFinite(_)) => {
                    log::warn!("training loss became non-finite at epoch {epoch}; stopping");
                    history.diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss;
            batches += 1;
            clip_l2(&mut grad, config.grad_clip);
            opt.apply(&mut theta, &grad, lr, config);
            if theta.iter().any(|v| !v.is_finite()) {
                history.diverged = true;
                break 'epochs;
            }
            params.set_from_slice(&theta);
        }
        let val_nll = match mean_loss(&params, val) {
            Ok(v) if v.is_finite() => v,
            _ => {
                history.diverged = true;
                break;
            }
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_nll: loss_sum / batches as f64,
            val_nll,
            sigma_accel: params.filter_params().sigma_accel,
        });
        if val_nll < history.best_val_nll {
            history.best_val_nll = val_nll;
            history.best_epoch = epoch;
            best = params.clone();
        }
    }

    Ok(TuneOutcome {
        params: best,
        history,
    })
}
