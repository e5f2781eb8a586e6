use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use geotrack::calibration::{self, CalibrationGrid, CalibrationPair, CalibrationSet};
use geotrack::geo::sym2_eigenvalues;
use geotrack::io::{self, MarginalRecord, TrackerParams};
use geotrack::kalman::{self, NllMode, RunOptions, ViewId};
use geotrack::metrics::{self, AlphaSweep, EvalRecord, Histogram, MetricReport};
use geotrack::simulator::{build_dataset, ScenarioConfig};
use geotrack::tuning::{self, TunableParams, TuneConfig};
use geotrack::Gaussian2D;
use serde_json::json;

use crate::dataset::{self, read_input, Split, SCENARIO_FILE};
use crate::manifest::{Recorder, RunManifest, MANIFEST_FILE};
use crate::{
    usage, CalibrateArgs, CmdResult, EvaluateArgs, Failure, NllModeArg, OutArg, ReportArgs,
    SimulateArgs, TrackArgs, TuneArgs, OUT_ENV,
};

pub const MARGINALS_FILE: &str = "marginals.jsonl";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const PARAMS_FILE: &str = "params.json";
pub const REPORT_FILE: &str = "report.json";

/// χ² quantile at 0.95 with two degrees of freedom.
const CHI2_2_95: f64 = 5.991_464_547_107_979;
/// Width of the NLL histogram bins, nats.
const NLL_BIN: f64 = 0.5;

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn out_dir(arg: &OutArg, command: &str) -> PathBuf {
    arg.out.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("geotrack-out"))
            .join(command)
    })
}

fn parse_json_input<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> CmdResult<T> {
    let text = read_input(path)?;
    serde_json::from_str(&text).map_err(|e| {
        usage(anyhow!(
            "{}:{}:{}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

pub fn simulate(args: &SimulateArgs) -> CmdResult {
    let mut config = match &args.config {
        Some(path) => parse_json_input::<ScenarioConfig>(path)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate().map_err(|e| {
        let source = args
            .config
            .as_ref()
            .map_or("default config".to_string(), |p| p.display().to_string());
        usage(anyhow!("{source}: {e}"))
    })?;

    let mut rec = Recorder::new("simulate", &out_dir(&args.out, "simulate"))?;
    if let Some(path) = &args.config {
        rec.input(path);
    }
    let ds = build_dataset(&config).map_err(runtime)?;
    for (name, samples) in ds.splits() {
        let frames: Vec<_> = samples.iter().map(|s| s.frame.clone()).collect();
        let truth: Vec<_> = samples.iter().map(|s| (s.frame.t, s.truth)).collect();
        rec.write(&format!("{name}.detections.jsonl"), &io::write_detections(&frames))?;
        rec.write(&format!("{name}.truth.csv"), &io::write_truth(&truth))?;
        println!("{name}: {} frames", samples.len());
    }
    rec.write(SCENARIO_FILE, &io::to_json(&config))?;
    println!("wrote dataset to {}", rec.dir().display());
    rec.finish(json!({ "scenario": config }), Some(config.seed))?;
    Ok(())
}

fn load_tracker_params(params: Option<&Path>, calib: Option<&Path>) -> CmdResult<TrackerParams> {
    let mut out = match params {
        Some(p) => parse_json_input::<TrackerParams>(p)?,
        None => TrackerParams::default(),
    };
    if let Some(c) = calib {
        out.calibration = parse_json_input::<CalibrationSet>(c)?;
    }
    out.filter
        .validate()
        .map_err(|e| usage(anyhow!("invalid filter parameters: {e}")))?;
    for (view, p) in &out.calibration.views {
        if !(p.a > 0.0 && p.b >= 0.0 && p.a.is_finite() && p.b.is_finite()) {
            return Err(usage(anyhow!("invalid calibration for view {view}: {p:?}")));
        }
    }
    Ok(out)
}

/// Semi-axes and major-axis angle of the 95 % ellipse.
fn ellipse(g: &Gaussian2D) -> (f64, f64, f64) {
    let c = g.cov();
    let (lo, hi) = sym2_eigenvalues(&c);
    let angle = 0.5 * (2.0 * c[(0, 1)]).atan2(c[(0, 0)] - c[(1, 1)]) + 0.0;
    ((CHI2_2_95 * hi).sqrt(), (CHI2_2_95 * lo.max(0.0)).sqrt(), angle)
}

pub fn track(args: &TrackArgs) -> CmdResult {
    if args.params.is_some() && args.calib.is_some() {
        return Err(usage(anyhow!(
            "--params already carries a calibration; pass either --params or --calib"
        )));
    }
    let params = load_tracker_params(args.params.as_deref(), args.calib.as_deref())?;
    let (frames, split) = dataset::load_split_optional_truth(&args.data.data, &args.split)?;
    let calibrated: Vec<_> = frames
        .iter()
        .map(|f| params.calibration.apply_frame(f))
        .collect();
    let truth = split.as_ref().map(Split::positions);
    let nll_mode = match args.nll_mode {
        NllModeArg::Filtered => NllMode::Filtered,
        NllModeArg::Predictive => NllMode::Predictive,
    };
    let result = kalman::run_sequence(
        &calibrated,
        &params.filter,
        truth.as_deref(),
        RunOptions { nll_mode },
    )
    .map_err(|e| match e {
        geotrack::Error::NonMonotoneTime { index, .. } => runtime(anyhow!(
            "{}:{}: {e}",
            dataset::detections_path(&args.data.data, &args.split).display(),
            index + 1
        )),
        other => runtime(other),
    })?;

    let mut rec = Recorder::new("track", &out_dir(&args.out, "track"))?;
    rec.input(&dataset::detections_path(&args.data.data, &args.split));
    if split.is_some() {
        rec.input(&dataset::truth_path(&args.data.data, &args.split));
    }
    for p in [&args.params, &args.calib].into_iter().flatten() {
        rec.input(p);
    }

    let marginals: Vec<MarginalRecord> = result
        .steps
        .iter()
        .map(|s| MarginalRecord::new(s.t, &s.marginal))
        .collect();
    rec.write(MARGINALS_FILE, &io::write_marginals(&marginals))?;

    let mut plot = String::from("t,truth_x,truth_y,mean_x,mean_y,ellipse_major,ellipse_minor,ellipse_angle\n");
    for s in &result.steps {
        let (tx, ty) = match &split {
            Some(sp) => {
                let p = sp.truth[s.index].position;
                (p.x.to_string(), p.y.to_string())
            }
            None => (String::new(), String::new()),
        };
        let m = s.marginal.mean();
        let (major, minor, angle) = ellipse(&s.marginal);
        plot.push_str(&format!(
            "{},{tx},{ty},{},{},{major},{minor},{angle}\n",
            s.t, m.x, m.y
        ));
    }
    rec.write("plot.csv", &plot)?;

    let summary = json!({
        "split": args.split,
        "frames": frames.len(),
        "steps": result.steps.len(),
        "first_index": result.first_index,
        "nll_mode": nll_mode,
        "total_nll": split.as_ref().map(|_| result.total_nll),
        "mean_nll": result.mean_nll(),
        "params": params,
    });
    rec.write("summary.json", &io::to_json(&summary))?;
    match result.mean_nll() {
        Some(v) => println!("tracked {} steps, mean NLL {v:.4}", result.steps.len()),
        None => println!("tracked {} steps (no truth)", result.steps.len()),
    }
    rec.finish(
        json!({
            "data": args.data.data,
            "split": args.split,
            "nll_mode": nll_mode,
            "params": params,
        }),
        None,
    )?;
    Ok(())
}

fn pairs_by_view(split: &Split) -> BTreeMap<ViewId, Vec<CalibrationPair>> {
    let mut out: BTreeMap<ViewId, Vec<CalibrationPair>> = BTreeMap::new();
    for (frame, truth) in split.frames.iter().zip(&split.truth) {
        for d in &frame.detections {
            out.entry(d.view.clone())
                .or_default()
                .push((d.gaussian, truth.position));
        }
    }
    out
}

pub fn calibrate(args: &CalibrateArgs) -> CmdResult {
    let grid = CalibrationGrid::from_specs(&args.grid_a, &args.grid_b)
        .map_err(|e| usage(anyhow!("invalid calibration grid: {e}")))?;
    let split = dataset::load_split(&args.data.data, &args.split)?;
    if split.frames.is_empty() {
        return Err(runtime(anyhow!("the {} split is empty", args.split)));
    }
    let by_view = pairs_by_view(&split);
    if by_view.is_empty() {
        return Err(runtime(anyhow!("the {} split has no detections", args.split)));
    }

    let mut set = CalibrationSet {
        shared: args.shared,
        views: BTreeMap::new(),
    };
    if args.shared {
        let fit = calibration::fit_shared(&grid, &by_view).map_err(runtime)?;
        for view in by_view.keys() {
            set.views.insert(view.clone(), fit.params);
        }
    } else {
        for (view, fit) in calibration::fit_per_view(&grid, &by_view) {
            let fit = fit.map_err(|e| runtime(anyhow!("view {view}: {e}")))?;
            set.views.insert(view, fit.params);
        }
    }

    let mut table = String::from("view,a,b,pairs,nll_before,nll_after\n");
    for (view, pairs) in &by_view {
        let p = set.params_for(view);
        let before = calibration::mean_nll(&calibration::CalibrationParams::IDENTITY, pairs)
            .map_err(runtime)?;
        let after = calibration::mean_nll(&p, pairs).map_err(runtime)?;
        println!(
            "{view}: a={} b={} nll before={before:.4} after={after:.4} ({} pairs)",
            p.a,
            p.b,
            pairs.len()
        );
        table.push_str(&format!("{view},{},{},{},{before},{after}\n", p.a, p.b, pairs.len()));
    }

    let mut rec = Recorder::new("calibrate", &out_dir(&args.out, "calibrate"))?;
    rec.input(&dataset::detections_path(&args.data.data, &args.split));
    rec.input(&dataset::truth_path(&args.data.data, &args.split));
    rec.write(CALIBRATION_FILE, &io::to_json(&set))?;
    rec.write("calibration_fit.csv", &table)?;
    rec.finish(
        json!({
            "data": args.data.data,
            "split": args.split,
            "grid_a": args.grid_a,
            "grid_b": args.grid_b,
            "grid_size": [grid.a_values().len(), grid.b_values().len()],
            "shared": args.shared,
        }),
        None,
    )?;
    Ok(())
}

pub fn tune(args: &TuneArgs) -> CmdResult {
    let config = TuneConfig {
        seq_len: args.seq_len,
        epochs: args.epochs,
        lr: args.lr,
        lr_drop_epoch: args.lr_drop_epoch,
        grad_clip: args.grad_clip,
        batch: args.batch,
        seed: args.seed,
        ..TuneConfig::default()
    };
    config.validate().map_err(usage)?;
    let stride = args.stride.unwrap_or(args.seq_len);
    if stride == 0 {
        return Err(usage(anyhow!("--stride must be positive")));
    }
    let init = load_tracker_params(
        args.params.as_deref(),
        if args.params.is_some() { None } else { args.calib.as_deref() },
    )?;

    let data = &args.data.data;
    let train = dataset::load_split(data, "train")?;
    let val = dataset::load_split(data, "val")?;
    for (name, split) in [("train", &train), ("val", &val)] {
        if split.frames.len() < args.seq_len {
            return Err(runtime(anyhow!(
                "the {name} split has {} frames, fewer than --seq-len {}; try a smaller --seq-len",
                split.frames.len(),
                args.seq_len
            )));
        }
    }
    let cut = |s: &Split| tuning::windows(&s.frames, &s.positions(), args.seq_len, stride);
    let train_seqs = cut(&train).map_err(runtime)?;
    let val_seqs = cut(&val).map_err(runtime)?;

    let views: Vec<ViewId> = pairs_by_view(&train).into_keys().collect();
    let initial = TunableParams::new(&init.filter, &init.calibration).with_views(&views);
    let outcome = tuning::tune(&config, &initial, &train_seqs, &val_seqs).map_err(runtime)?;

    for r in &outcome.history.epochs {
        println!(
            "epoch {}: train NLL {:.4}, val NLL {:.4}, sigma_accel {:.3}",
            r.epoch, r.train_nll, r.val_nll, r.sigma_accel
        );
    }
    if outcome.history.diverged {
        log::warn!("training diverged; keeping the best parameters seen");
    }
    let tuned = TrackerParams {
        filter: outcome.params.filter_params(),
        calibration: outcome.params.calibration(),
    };
    for (view, p) in &tuned.calibration.views {
        println!("{view}: a={} b={}", p.a, p.b);
    }

    let mut rec = Recorder::new("tune", &out_dir(&args.out, "tune"))?;
    for split in ["train", "val"] {
        rec.input(&dataset::detections_path(data, split));
        rec.input(&dataset::truth_path(data, split));
    }
    for p in [&args.params, &args.calib].into_iter().flatten() {
        rec.input(p);
    }
    rec.write(PARAMS_FILE, &io::to_json(&tuned))?;
    rec.write("history.csv", &outcome.history.to_csv())?;
    rec.write("history.json", &io::to_json(&outcome.history))?;
    rec.finish(
        json!({
            "data": data,
            "tune": config,
            "stride": stride,
            "train_sequences": train_seqs.len(),
            "val_sequences": val_seqs.len(),
            "initial": init,
        }),
        Some(config.seed),
    )?;
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> CmdResult {
    let sweep = match &args.alpha_sweep {
        Some(spec) => AlphaSweep::parse(spec).map_err(|e| usage(anyhow!("--alpha-sweep: {e}")))?,
        None => AlphaSweep::default(),
    };
    if args.mc_samples == 0 {
        return Err(usage(anyhow!("--mc-samples must be at least 1")));
    }
    let split = dataset::load_split(&args.data.data, &args.split)?;

    let predictions: Vec<(f64, Gaussian2D)> = match (&args.predictions, &args.view) {
        (Some(path), _) => {
            let text = read_input(path)?;
            io::read_marginals(&text)
                .and_then(|rs| {
                    rs.iter()
                        .map(|r| Ok((r.t, r.gaussian()?)))
                        .collect::<geotrack::Result<Vec<_>>>()
                })
                .map_err(|e| runtime(anyhow!("{}: {e}", path.display())))?
        }
        (None, Some(view)) => {
            let picked = io::single_view(&split.frames, &ViewId::from(view.as_str()));
            if picked.is_empty() {
                return Err(runtime(anyhow!("view `{view}` has no detections in the {} split", args.split)));
            }
            picked
        }
        (None, None) => return Err(usage(anyhow!("pass --predictions or --view"))),
    };

    let truth_at: BTreeMap<u64, usize> = split
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| (f.t.to_bits(), i))
        .collect();
    let mut records = Vec::with_capacity(predictions.len());
    let mut unmatched = 0usize;
    for (t, g) in &predictions {
        match truth_at.get(&t.to_bits()) {
            Some(&i) => records.push(EvalRecord {
                t: *t,
                prediction: *g,
                truth: split.truth[i],
            }),
            None => unmatched += 1,
        }
    }
    if unmatched > 0 {
        return Err(runtime(anyhow!(
            "{unmatched} of {} prediction steps have no ground truth at the same timestamp",
            predictions.len()
        )));
    }
    let eval = metrics::evaluate(&records, &sweep, args.mc_samples, args.seed).map_err(runtime)?;
    let report = &eval.report;

    let mut rec = Recorder::new("evaluate", &out_dir(&args.out, "evaluate"))?;
    rec.input(&dataset::truth_path(&args.data.data, &args.split));
    match &args.predictions {
        Some(p) => rec.input(p),
        None => rec.input(&dataset::detections_path(&args.data.data, &args.split)),
    }
    rec.write(REPORT_FILE, &io::to_json(report))?;
    rec.write(
        "report.csv",
        &format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row()),
    )?;
    let hist = Histogram::build(&eval.nlls, NLL_BIN).map_err(runtime)?;
    rec.write("nll_histogram.csv", &hist.to_csv())?;
    let mut scores = String::from("t,nll,opm\n");
    for ((r, nll), opm) in records.iter().zip(&eval.nlls).zip(&eval.scores) {
        scores.push_str(&format!("{},{nll},{opm}\n", r.t));
    }
    rec.write("scores.csv", &scores)?;

    println!("{}", MetricReport::CSV_HEADER);
    println!("{}", report.csv_row());
    rec.finish(
        json!({
            "data": args.data.data,
            "split": args.split,
            "predictions": args.predictions,
            "view": args.view,
            "alpha_sweep": sweep,
            "mc_samples": args.mc_samples,
            "seed": args.seed,
        }),
        Some(args.seed),
    )?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

pub fn report(args: &ReportArgs) -> CmdResult {
    let header = ["run", "nll", "opm", "det_pr", "loc_a", "fingerprint"];
    let mut rows: Vec<[String; 6]> = Vec::new();
    let mut rec = Recorder::new("report", &out_dir(&args.out, "report"))?;
    for dir in &args.runs {
        let path = dir.join(REPORT_FILE);
        let name = dir.display().to_string();
        let parsed = std::fs::read_to_string(&path)
            .map_err(anyhow::Error::from)
            .and_then(|t| serde_json::from_str::<MetricReport>(&t).map_err(anyhow::Error::from));
        let report = match parsed {
            Ok(r) => r,
            Err(e) => {
                log::warn!("{}: {e}", path.display());
                eprintln!("warning: no readable report in {name}");
                rows.push([name, "missing".into(), "missing".into(), "missing".into(), "missing".into(), "-".into()]);
                continue;
            }
        };
        rec.input(&path);
        let fingerprint = std::fs::read_to_string(dir.join(MANIFEST_FILE))
            .ok()
            .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
            .map_or_else(|| "-".to_string(), |m| m.fingerprint()[..16].to_string());
        rows.push([
            name,
            report.nll.to_string(),
            report.opm.to_string(),
            report.det_pr.to_string(),
            fmt_opt(report.loc_a),
            fingerprint,
        ]);
    }

    let mut csv = header.join(",");
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.join(","));
        csv.push('\n');
    }
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in &rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut text = line(header.to_vec());
    for r in &rows {
        text.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    print!("{text}");
    rec.write("comparison.csv", &csv)?;
    rec.write("comparison.txt", &text)?;
    rec.finish(json!({ "runs": args.runs }), None)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix2, Vector2};

    #[test]
    fn out_dir_prefers_flag() {
        let arg = OutArg {
            out: Some(PathBuf::from("x")),
        };
        assert_eq!(out_dir(&arg, "track"), PathBuf::from("x"));
    }

    #[test]
    fn ellipse_axes_follow_covariance() {
        let g = Gaussian2D::new(Vector2::zeros(), Matrix2::new(16.0, 0.0, 0.0, 4.0)).unwrap();
        let (major, minor, angle) = ellipse(&g);
        assert!((major - (CHI2_2_95 * 16.0).sqrt()).abs() < 1e-12);
        assert!((minor - (CHI2_2_95 * 4.0).sqrt()).abs() < 1e-12);
        assert_eq!(angle, 0.0);
        let (_, _, turned) = ellipse(&g.rotated(0.4));
        assert!((turned - 0.4).abs() < 1e-12);
    }

    #[test]
    fn report_cells_mark_missing_loc_a() {
        assert_eq!(fmt_opt(None), "NA");
        assert_eq!(fmt_opt(Some(0.5)), "0.5");
    }
}
