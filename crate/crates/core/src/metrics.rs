//! Probabilistic tracking metrics: NLL, object probability mass (OPM), and
//! the thresholded DetPr / DetRe / LocA over a sweep of similarity levels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{self, Gaussian2D, ObjectPose};

pub const DEFAULT_MC_SAMPLES: usize = 1000;

/// One prediction and its ground truth at a timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub t: f64,
    pub prediction: Gaussian2D,
    pub truth: ObjectPose,
}

/// Strictly ascending thresholds in `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AlphaSweep(Vec<f64>);

impl Default for AlphaSweep {
    /// `0.05, 0.10, …, 0.95`.
    fn default() -> Self {
        Self((1..20).map(|k| k as f64 / 20.0).collect())
    }
}

impl TryFrom<Vec<f64>> for AlphaSweep {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<AlphaSweep> for Vec<f64> {
    fn from(s: AlphaSweep) -> Self {
        s.0
    }
}

impl AlphaSweep {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::Empty("alpha sweep"));
        }
        if thresholds.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::InvalidArgument("alpha thresholds must lie in (0, 1)".into()));
        }
        if thresholds.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("alpha thresholds must be strictly ascending".into()));
        }
        Ok(Self(thresholds))
    }

    /// Parses `lo:hi:step` or a comma list.
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("alpha sweep `{spec}`"));
        let parts: Vec<&str> = spec.split(':').collect();
        match parts.as_slice() {
            [lo, hi, step] => {
                let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
                let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
                let step: f64 = step.trim().parse().map_err(|_| bad())?;
                if !(step > 0.0) || hi < lo {
                    return Err(bad());
                }
                let n = ((hi - lo) / step + 1e-9).floor() as usize;
                Self::new((0..=n).map(|i| lo + i as f64 * step).collect())
            }
            [list] => Self::new(
                list.split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<_>>()?,
            ),
            _ => Err(bad()),
        }
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.0
    }
}

/// Mean NLL of the true positions.
pub fn mean_nll(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    let sum = records
        .iter()
        .map(|r| geo::nll(&r.prediction, &r.truth.position))
        .sum::<Result<f64>>()?;
    Ok(sum / records.len() as f64)
}

/// Monte Carlo fraction of `n` predicted samples landing inside the truth
/// rectangle.
pub fn opm<R: rand::Rng + ?Sized>(
    prediction: &Gaussian2D,
    truth: &ObjectPose,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("OPM needs at least one sample".into()));
    }
    let inside = geo::sample_gaussian(prediction, rng, n)?
        .iter()
        .filter(|p| geo::point_in_pose(truth, p))
        .count();
    Ok(inside as f64 / n as f64)
}

/// Counts at one threshold. With exactly one prediction and one object per
/// timestep, a miss is both a false negative and a false positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThresholdCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ThresholdCounts {
    pub fn at(scores: &[f64], alpha: f64) -> Self {
        let tp = scores.iter().filter(|&&s| s > alpha).count();
        let unmatched_truth = scores.len() - tp;
        let unmatched_pred = scores.len() - tp;
        Self {
            tp,
            fp: unmatched_pred,
            fn_: unmatched_truth,
        }
    }

    pub fn precision(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fp) as f64
    }

    pub fn recall(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }
}

/// Sweep-averaged detection precision and recall.
pub fn det_pr_re(scores: &[f64], sweep: &AlphaSweep) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    let (mut pr, mut re) = (0.0, 0.0);
    for &alpha in sweep.thresholds() {
        let c = ThresholdCounts::at(scores, alpha);
        assert_eq!(c.fp, c.fn_, "single-object scoring must pair every miss");
        pr += c.precision();
        re += c.recall();
    }
    let n = sweep.thresholds().len() as f64;
    Ok((pr / n, re / n))
}

/// Fraction of timesteps with score above each threshold, averaged over the
/// sweep. Equal to DetRe by construction.
pub fn det_pr(scores: &[f64], sweep: &AlphaSweep) -> Result<f64> {
    Ok(det_pr_re(scores, sweep)?.0)
}

/// Mean score over true positives per threshold, averaged over thresholds
/// that have at least one true positive.
pub fn loc_a(scores: &[f64], sweep: &AlphaSweep) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    let per_alpha: Vec<f64> = sweep
        .thresholds()
        .iter()
        .filter_map(|&alpha| {
            let (sum, count) = scores
                .iter()
                .filter(|&&s| s > alpha)
                .fold((0.0, 0usize), |(s, c), &v| (s + v, c + 1));
            (count > 0).then(|| sum / count as f64)
        })
        .collect();
    if per_alpha.is_empty() {
        return Err(Error::NeverOnTrack);
    }
    Ok(per_alpha.iter().sum::<f64>() / per_alpha.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub nll: f64,
    pub opm: f64,
    pub det_pr: f64,
    pub det_re: f64,
    /// `None` when no threshold has a true positive.
    pub loc_a: Option<f64>,
    pub records: usize,
    pub seed: u64,
    pub n_mc: usize,
    pub sweep: AlphaSweep,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "nll,opm,det_pr,loc_a";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.nll,
            self.opm,
            self.det_pr,
            self.loc_a.map_or_else(|| "NA".to_string(), |v| v.to_string())
        )
    }
}

/// A report together with the per-timestep values it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub scores: Vec<f64>,
    pub nlls: Vec<f64>,
}

/// Per-timestep OPM with a sub-stream of `seed` per timestep index.
pub fn opm_scores(records: &[EvalRecord], n_mc: usize, seed: u64) -> Result<Vec<f64>> {
    records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            opm(&r.prediction, &r.truth, n_mc, &mut rng)
        })
        .collect()
}

/// Computes every metric from one shared list of per-timestep scores.
pub fn evaluate(
    records: &[EvalRecord],
    sweep: &AlphaSweep,
    n_mc: usize,
    seed: u64,
) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    let nlls = records
        .iter()
        .map(|r| geo::nll(&r.prediction, &r.truth.position))
        .collect::<Result<Vec<_>>>()?;
    let scores = opm_scores(records, n_mc, seed)?;
    let (det_pr, det_re) = det_pr_re(&scores, sweep)?;
    let loc_a = match loc_a(&scores, sweep) {
        Ok(v) => Some(v),
        Err(Error::NeverOnTrack) => None,
        Err(e) => return Err(e),
    };
    let n = records.len() as f64;
    Ok(Evaluation {
        report: MetricReport {
            nll: nlls.iter().sum::<f64>() / n,
            opm: scores.iter().sum::<f64>() / n,
            det_pr,
            det_re,
            loc_a,
            records: records.len(),
            seed,
            n_mc,
            sweep: sweep.clone(),
        },
        scores,
        nlls,
    })
}

/// Fixed-width histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lower: f64,
    pub width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Bins of `width` from `floor(min)` covering every finite value.
    pub fn build(values: &[f64], width: f64) -> Result<Self> {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return Err(Error::Empty("histogram values"));
        }
        if !(width > 0.0) {
            return Err(Error::InvalidArgument("bin width must be positive".into()));
        }
        let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lower = min.floor();
        let bins = (((max - lower) / width).floor() as usize) + 1;
        let mut counts = vec![0; bins];
        for v in finite {
            let i = (((v - lower) / width).floor() as usize).min(bins - 1);
            counts[i] += 1;
        }
        Ok(Self {
            lower,
            width,
            counts,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lower,bin_upper,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let lo = self.lower + i as f64 * self.width;
            out.push_str(&format!("{},{},{}\n", lo, lo + self.width, c));
        }
        out
    }
}
