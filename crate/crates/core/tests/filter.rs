use std::f64::consts::PI;

use approx::assert_relative_eq;
use geotrack::geo::Gaussian2D;
use geotrack::kalman::{
    self, Detection, DetectionFrame, FilterParams, KalmanState, RunOptions,
};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Rotation2, Vector2, Vector4};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cov<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Matrix2<f64> {
    let r = *Rotation2::new(rng.random_range(-PI..PI)).matrix();
    let d = Matrix2::new(rng.random_range(lo..hi), 0.0, 0.0, rng.random_range(lo..hi));
    r * d * r.transpose()
}

fn random_detections<R: Rng>(rng: &mut R, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|i| Detection {
            view: format!("N{}", i + 1).as_str().into(),
            gaussian: Gaussian2D::new(
                Vector2::new(rng.random_range(0.0..500.0), rng.random_range(0.0..700.0)),
                random_cov(rng, 0.5, 400.0),
            )
            .unwrap(),
        })
        .collect()
}

fn random_prior<R: Rng>(rng: &mut R) -> KalmanState {
    let first = DetectionFrame::new(0.0, random_detections(rng, 2)).unwrap();
    let state = kalman::init(&first, &FilterParams::default()).unwrap();
    let mut state = kalman::predict(&state, rng.random_range(0.01..0.5), &FilterParams::default()).unwrap();
    state.x[2] = rng.random_range(-100.0..100.0);
    state.x[3] = rng.random_range(-100.0..100.0);
    state
}

/// Joint update with stacked observation matrix and block-diagonal noise.
fn stacked_update(state: &KalmanState, dets: &[Detection]) -> (Vector4<f64>, Matrix4<f64>) {
    let m = dets.len();
    let x = DVector::from_column_slice(state.x.as_slice());
    let p = DMatrix::from_column_slice(4, 4, state.p.as_slice());
    let mut h = DMatrix::zeros(2 * m, 4);
    let mut r = DMatrix::zeros(2 * m, 2 * m);
    let mut z = DVector::zeros(2 * m);
    for (i, d) in dets.iter().enumerate() {
        h[(2 * i, 0)] = 1.0;
        h[(2 * i + 1, 1)] = 1.0;
        let c = d.gaussian.cov();
        for a in 0..2 {
            z[2 * i + a] = d.gaussian.mean()[a];
            for b in 0..2 {
                r[(2 * i + a, 2 * i + b)] = c[(a, b)];
            }
        }
    }
    let s = &h * &p * h.transpose() + &r;
    let k = s.cholesky().unwrap().solve(&(&h * &p)).transpose();
    let x_new = &x + &k * (z - &h * &x);
    let a = DMatrix::identity(4, 4) - &k * &h;
    let p_new = &a * &p * a.transpose() + &k * &r * k.transpose();
    let p_new = (&p_new + p_new.transpose()) * 0.5;
    (
        Vector4::from_column_slice(x_new.as_slice()),
        Matrix4::from_column_slice(p_new.as_slice()),
    )
}

#[test]
fn sequential_update_equals_stacked_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let prior = random_prior(&mut rng);
        let n = rng.random_range(1..=4);
        let dets = random_detections(&mut rng, n);
        let frame = DetectionFrame::new(prior.t, dets.clone()).unwrap();
        let (post, _) = kalman::update(&prior, &frame).unwrap();
        let (x, p) = stacked_update(&prior, &dets);
        assert!((post.x - x).norm() < 1e-9, "mean differs by {}", (post.x - x).norm());
        assert!((post.p - p).norm() < 1e-9, "cov differs by {}", (post.p - p).norm());
    }
}

#[test]
fn update_is_order_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..1000 {
        let prior = random_prior(&mut rng);
        let n = rng.random_range(2..=4);
        let dets = random_detections(&mut rng, n);
        let mut shuffled = dets.clone();
        shuffled.shuffle(&mut rng);
        let a = kalman::update(&prior, &DetectionFrame::new(prior.t, dets).unwrap()).unwrap().0;
        let b = kalman::update(&prior, &DetectionFrame::new(prior.t, shuffled).unwrap()).unwrap().0;
        assert!((a.x - b.x).norm() < 1e-9);
        assert!((a.p - b.p).norm() < 1e-9);
    }
}

fn normal_pdf(x: f64, var: f64) -> f64 {
    (-(x * x) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

fn convolve(a: &[f64], b: &[f64], step: f64) -> Vec<f64> {
    // both centered on the same symmetric grid; output on that grid
    let n = a.len();
    let half = (n - 1) / 2;
    (0..n)
        .map(|i| {
            (0..n)
                .filter_map(|j| {
                    let k = (i + half).checked_sub(j)?;
                    b.get(k).map(|bk| a[j] * bk)
                })
                .sum::<f64>()
                * step
        })
        .collect()
}

#[test]
fn filter_matches_grid_bayes_oracle() {
    // init at t=0 from N(0, s0), one predict of dt, one update with z along x
    let (s0, vel_var, dt, sigma, r, z) = (25.0, 100.0, 1.0, 4.0, 36.0, 8.0);
    let params = FilterParams {
        sigma_accel: sigma,
        init_vel_var: vel_var,
    };
    let det = |t: f64, x: f64, var: f64| {
        DetectionFrame::new(
            t,
            vec![Detection {
                view: "N1".into(),
                gaussian: Gaussian2D::isotropic(Vector2::new(x, 0.0), var).unwrap(),
            }],
        )
        .unwrap()
    };
    let state = kalman::init(&det(0.0, 0.0, s0), &params).unwrap();
    let prior = kalman::predict(&state, dt, &params).unwrap();
    let (post, _) = kalman::update(&prior, &det(dt, z, r)).unwrap();

    let step = 0.1;
    let grid: Vec<f64> = (0..=1000).map(|i| -50.0 + i as f64 * step).collect();
    let p0: Vec<f64> = grid.iter().map(|&x| normal_pdf(x, s0)).collect();
    let drift: Vec<f64> = grid.iter().map(|&x| normal_pdf(x, vel_var * dt * dt)).collect();
    let accel: Vec<f64> = grid
        .iter()
        .map(|&x| normal_pdf(x, sigma * sigma * dt.powi(4) / 4.0))
        .collect();
    let predicted = convolve(&convolve(&p0, &drift, step), &accel, step);
    let unnorm: Vec<f64> = grid
        .iter()
        .zip(&predicted)
        .map(|(&x, &p)| p * normal_pdf(x - z, r))
        .collect();
    let mass: f64 = unnorm.iter().sum();
    let mean = grid.iter().zip(&unnorm).map(|(x, w)| x * w).sum::<f64>() / mass;
    let var = grid
        .iter()
        .zip(&unnorm)
        .map(|(x, w)| (x - mean).powi(2) * w)
        .sum::<f64>()
        / mass;

    assert!((post.x[0] - mean).abs() < 0.05, "{} vs {mean}", post.x[0]);
    assert!(((post.p[(0, 0)] - var) / var).abs() < 0.01, "{} vs {var}", post.p[(0, 0)]);
}

#[test]
fn covariance_stays_symmetric_positive_definite() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let params = FilterParams::default();
    let mut state = random_prior(&mut rng);
    for _ in 0..10_000 {
        let dt = rng.random_range(0.001..1.0);
        state = kalman::predict(&state, dt, &params).unwrap();
        let n = rng.random_range(0..=4);
        let frame = DetectionFrame::new(state.t, random_detections(&mut rng, n)).unwrap();
        state = kalman::update(&state, &frame).unwrap().0;
        assert_eq!(state.p, state.p.transpose());
        assert!(state.p.cholesky().is_some(), "lost positive definiteness");
    }
}

#[test]
fn precise_detection_dominates() {
    let m1 = Vector2::new(100.0, 200.0);
    let m2 = Vector2::new(160.0, 120.0);
    let frame = DetectionFrame::new(
        0.0,
        vec![
            Detection {
                view: "N1".into(),
                gaussian: Gaussian2D::isotropic(m1, 1.0).unwrap(),
            },
            Detection {
                view: "N2".into(),
                gaussian: Gaussian2D::isotropic(m2, 100.0).unwrap(),
            },
        ],
    )
    .unwrap();
    let d = (m2 - m1).norm();
    let state = kalman::init(&frame, &FilterParams::default()).unwrap();
    let along = (state.position() - m1).dot(&(m2 - m1).normalize());
    assert!(along <= d / 101.0 * (1.0 + 1e-6));
    assert_relative_eq!(along, d / 101.0, max_relative = 1e-9);
}

fn run_states(frames: &[DetectionFrame], sigma: f64) -> Vec<KalmanState> {
    // every intermediate state: after each predict and after each update
    let params = FilterParams {
        sigma_accel: sigma,
        ..FilterParams::default()
    };
    let mut state = kalman::init(&frames[0], &params).unwrap();
    let mut out = vec![state.clone()];
    for f in &frames[1..] {
        let prior = kalman::predict(&state, f.t - state.t, &params).unwrap();
        let prior = KalmanState { t: f.t, ..prior };
        out.push(prior.clone());
        state = kalman::update(&prior, f).unwrap().0;
        out.push(state.clone());
    }
    out
}

fn close(analytic: f64, numeric: f64, scale: f64) -> bool {
    (analytic - numeric).abs() <= 1e-4 * numeric.abs().max(1e-6 * scale)
}

#[test]
fn sensitivities_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..20 {
        let sigma = rng.random_range(20.0..400.0);
        let frames: Vec<DetectionFrame> = (0..15)
            .map(|k| {
                let n = if k == 0 { 2 } else { rng.random_range(0..=3) };
                DetectionFrame::new(k as f64 * 0.05, random_detections(&mut rng, n)).unwrap()
            })
            .collect();
        let h = 1e-4 * sigma;
        let base = run_states(&frames, sigma);
        let plus = run_states(&frames, sigma + h);
        let minus = run_states(&frames, sigma - h);
        for ((s, p), m) in base.iter().zip(&plus).zip(&minus) {
            let fd_x = (p.x - m.x) / (2.0 * h);
            let fd_p = (p.p - m.p) / (2.0 * h);
            let sx = s.sens_x();
            let sp = s.sens_p();
            let scale_x = fd_x.amax().max(1e-12);
            let scale_p = fd_p.amax().max(1e-12);
            for i in 0..4 {
                assert!(close(sx[i], fd_x[i], scale_x), "x[{i}]: {} vs {}", sx[i], fd_x[i]);
                for j in 0..4 {
                    assert!(
                        close(sp[(i, j)], fd_p[(i, j)], scale_p),
                        "P[{i},{j}]: {} vs {}",
                        sp[(i, j)],
                        fd_p[(i, j)]
                    );
                }
            }
        }
    }
}

#[test]
fn total_nll_gradient_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut truth = Vec::new();
    let mut frames = Vec::new();
    let (mut p, mut v) = (Vector2::new(200.0, 300.0), Vector2::new(40.0, -20.0));
    for k in 0..100 {
        let t = k as f64 * 0.05;
        let a = Vector2::new(rng.random_range(-150.0..150.0), rng.random_range(-150.0..150.0));
        p += v * 0.05 + a * 0.00125;
        v += a * 0.05;
        truth.push(p);
        let dets = (0..2)
            .map(|i| Detection {
                view: format!("N{i}").as_str().into(),
                gaussian: Gaussian2D::isotropic(p + Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)), 9.0)
                    .unwrap(),
            })
            .collect();
        frames.push(DetectionFrame::new(t, dets).unwrap());
    }
    let sigma = 120.0;
    let run = |s: f64| {
        kalman::run_sequence(
            &frames,
            &FilterParams {
                sigma_accel: s,
                ..FilterParams::default()
            },
            Some(&truth),
            RunOptions::default(),
        )
        .unwrap()
    };
    let h = 1e-4 * sigma;
    let fd = (run(sigma + h).total_nll - run(sigma - h).total_nll) / (2.0 * h);
    let analytic = run(sigma).total_nll_grad_sigma();
    assert_relative_eq!(analytic, fd, max_relative = 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn empty_frames_inflate_uncertainty(
        var in 0.5f64..100.0,
        sigma in 1.0f64..500.0,
        steps in 2usize..30,
    ) {
        let params = FilterParams { sigma_accel: sigma, ..FilterParams::default() };
        let mut frames = vec![DetectionFrame::new(
            0.0,
            vec![Detection { view: "N1".into(), gaussian: Gaussian2D::isotropic(Vector2::new(1.0, 2.0), var).unwrap() }],
        ).unwrap()];
        frames.extend((1..steps).map(|k| DetectionFrame::empty(k as f64 * 0.05)));
        let result = kalman::run_sequence(&frames, &params, None, RunOptions::default()).unwrap();
        prop_assert_eq!(result.steps.len(), steps);
        for w in result.steps.windows(2) {
            prop_assert!(w[1].marginal.cov().trace() > w[0].marginal.cov().trace());
        }
    }

    #[test]
    fn single_detection_initializes_exactly(
        x in 0.0f64..500.0,
        y in 0.0f64..700.0,
        a in 0.5f64..100.0,
        b in 0.5f64..100.0,
        c in -0.45f64..0.45,
    ) {
        let cov = Matrix2::new(a, c * (a * b).sqrt(), c * (a * b).sqrt(), b);
        let g = Gaussian2D::new(Vector2::new(x, y), cov).unwrap();
        let frame = DetectionFrame::new(0.0, vec![Detection { view: "N1".into(), gaussian: g }]).unwrap();
        let state = kalman::init(&frame, &FilterParams::default()).unwrap();
        prop_assert_eq!(kalman::marginal(&state).mean(), g.mean());
        prop_assert_eq!(kalman::marginal(&state).cov(), g.cov());
    }
}
