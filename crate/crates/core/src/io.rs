//! Line-oriented file formats for detections, ground truth and tracker
//! marginals. Writers are deterministic and readers reproduce the exact
//! values, so write → read → write is byte-identical.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationSet;
use crate::error::{Error, Result};
use crate::geo::{Gaussian2D, ObjectPose};
use crate::kalman::{Detection, DetectionFrame, FilterParams, ViewId};

pub const TRUTH_HEADER: &str = "t,x,y,heading,width,length";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    view: ViewId,
    mean: [f64; 2],
    cov: [[f64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    t: f64,
    detections: Vec<DetectionRecord>,
}

/// A Gaussian at a timestamp, one line of a marginals file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalRecord {
    pub t: f64,
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

fn cov_rows(m: &Matrix2<f64>) -> [[f64; 2]; 2] {
    [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]
}

fn gaussian_from(line: usize, mean: [f64; 2], cov: [[f64; 2]; 2]) -> Result<Gaussian2D> {
    let cov = Matrix2::new(cov[0][0], cov[0][1], cov[1][0], cov[1][1]);
    if (cov[(0, 1)] - cov[(1, 0)]).abs() > 1e-9 * (1.0 + cov.abs().max()) {
        return Err(Error::Parse {
            line,
            message: "covariance is not symmetric".into(),
        });
    }
    Gaussian2D::new(Vector2::new(mean[0], mean[1]), cov).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })
}

impl MarginalRecord {
    pub fn new(t: f64, g: &Gaussian2D) -> Self {
        Self {
            t,
            mean: [g.mean().x, g.mean().y],
            cov: cov_rows(&g.cov()),
        }
    }

    pub fn gaussian(&self) -> Result<Gaussian2D> {
        gaussian_from(0, self.mean, self.cov)
    }
}

fn json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("records serialize")
}

fn parse_json_line<T: for<'de> Deserialize<'de>>(line: usize, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })
}

/// Non-blank lines with 1-based line numbers.
fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn check_time(line: usize, prev: Option<f64>, t: f64) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::Parse {
            line,
            message: "timestamp is not finite".into(),
        });
    }
    match prev {
        Some(p) if t <= p => Err(Error::Parse {
            line,
            message: format!("timestamp {t} does not increase after {p}"),
        }),
        _ => Ok(()),
    }
}

pub fn write_detections(frames: &[DetectionFrame]) -> String {
    let mut out = String::new();
    for f in frames {
        let record = FrameRecord {
            t: f.t,
            detections: f
                .detections
                .iter()
                .map(|d| DetectionRecord {
                    view: d.view.clone(),
                    mean: [d.gaussian.mean().x, d.gaussian.mean().y],
                    cov: cov_rows(&d.gaussian.cov()),
                })
                .collect(),
        };
        out.push_str(&json_line(&record));
        out.push('\n');
    }
    out
}

/// Parses a detections file; errors carry the 1-based line number, including
/// the first line whose timestamp does not increase.
pub fn read_detections(text: &str) -> Result<Vec<DetectionFrame>> {
    let mut frames: Vec<DetectionFrame> = Vec::new();
    for (line, l) in numbered_lines(text) {
        let record: FrameRecord = parse_json_line(line, l)?;
        check_time(line, frames.last().map(|f| f.t), record.t)?;
        let detections = record
            .detections
            .into_iter()
            .map(|d| {
                Ok(Detection {
                    view: d.view,
                    gaussian: gaussian_from(line, d.mean, d.cov)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let frame = DetectionFrame::new(record.t, detections).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        frames.push(frame);
    }
    Ok(frames)
}

pub fn write_truth(samples: &[(f64, ObjectPose)]) -> String {
    let mut out = String::from(TRUTH_HEADER);
    out.push('\n');
    for (t, p) in samples {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            t, p.position.x, p.position.y, p.heading, p.extent.0, p.extent.1
        ));
    }
    out
}

pub fn read_truth(text: &str) -> Result<Vec<(f64, ObjectPose)>> {
    let mut lines = numbered_lines(text);
    match lines.next() {
        Some((_, h)) if h == TRUTH_HEADER => {}
        Some((line, h)) => {
            return Err(Error::Parse {
                line,
                message: format!("expected header `{TRUTH_HEADER}`, found `{h}`"),
            })
        }
        None => return Err(Error::Empty("truth file")),
    }
    let mut out: Vec<(f64, ObjectPose)> = Vec::new();
    for (line, l) in lines {
        let fields = l
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    message: format!("`{f}`: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if fields.len() != 6 {
            return Err(Error::Parse {
                line,
                message: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        check_time(line, out.last().map(|s| s.0), fields[0])?;
        let pose = ObjectPose::new(
            Vector2::new(fields[1], fields[2]),
            fields[3],
            (fields[4], fields[5]),
        )
        .map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        out.push((fields[0], pose));
    }
    Ok(out)
}

pub fn write_marginals(records: &[MarginalRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&json_line(r));
        out.push('\n');
    }
    out
}

pub fn read_marginals(text: &str) -> Result<Vec<MarginalRecord>> {
    let mut out: Vec<MarginalRecord> = Vec::new();
    for (line, l) in numbered_lines(text) {
        let r: MarginalRecord = parse_json_line(line, l)?;
        check_time(line, out.last().map(|m| m.t), r.t)?;
        gaussian_from(line, r.mean, r.cov)?;
        out.push(r);
    }
    Ok(out)
}

/// Filter settings together with the per-view calibration applied before
/// fusion.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerParams {
    pub filter: FilterParams,
    #[serde(default)]
    pub calibration: CalibrationSet,
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

pub fn from_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

/// Restricts frames to one view; frames where it emitted nothing are
/// dropped.
pub fn single_view(frames: &[DetectionFrame], view: &ViewId) -> Vec<(f64, Gaussian2D)> {
    frames
        .iter()
        .filter_map(|f| {
            f.detections
                .iter()
                .find(|d| &d.view == view)
                .map(|d| (f.t, d.gaussian))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames() -> Vec<DetectionFrame> {
        vec![
            DetectionFrame::new(
                0.0,
                vec![
                    Detection {
                        view: "N1".into(),
                        gaussian: Gaussian2D::new(
                            Vector2::new(250.125, 1.0 / 3.0),
                            Matrix2::new(4.0, 0.1, 0.1, 9.5),
                        )
                        .unwrap(),
                    },
                    Detection {
                        view: "N2".into(),
                        gaussian: Gaussian2D::isotropic(Vector2::new(250.0, 350.0), 40000.0).unwrap(),
                    },
                ],
            )
            .unwrap(),
            DetectionFrame::empty(0.05),
            DetectionFrame::new(
                0.1,
                vec![Detection {
                    view: "N3".into(),
                    gaussian: Gaussian2D::isotropic(Vector2::new(0.1 + 0.2, 7.0), 2.5).unwrap(),
                }],
            )
            .unwrap(),
        ]
    }

    #[test]
    fn detections_round_trip() {
        let text = write_detections(&frames());
        let back = read_detections(&text).unwrap();
        assert_eq!(back, frames());
        assert_eq!(write_detections(&back), text);
        assert!(text.starts_with(r#"{"t":0.0,"detections":[{"view":"N1","mean":[250.125,"#));
    }

    #[test]
    fn detection_errors_carry_line() {
        let mut text = write_detections(&frames());
        text.push_str("{\"t\":0.1,\"detections\":[]}\n");
        match read_detections(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        match read_detections("{\"t\":0.0,\"detections\":[]}\nnot json\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let bad_cov = r#"{"t":0,"detections":[{"view":"N1","mean":[0,0],"cov":[[1,0],[0,-1]]}]}"#;
        assert!(matches!(read_detections(bad_cov), Err(Error::Parse { line: 1, .. })));
        let dup = r#"{"t":0,"detections":[{"view":"N1","mean":[0,0],"cov":[[1,0],[0,1]]},{"view":"N1","mean":[0,0],"cov":[[1,0],[0,1]]}]}"#;
        assert!(matches!(read_detections(dup), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn truth_round_trip() {
        let samples = vec![
            (0.0, ObjectPose::new(Vector2::new(20.5, 33.0), 0.1, (15.0, 30.0)).unwrap()),
            (0.05, ObjectPose::new(Vector2::new(21.0, 1.0 / 7.0), -3.0, (15.0, 30.0)).unwrap()),
        ];
        let text = write_truth(&samples);
        assert!(text.starts_with("t,x,y,heading,width,length\n0,20.5,33,0.1,15,30\n"));
        let back = read_truth(&text).unwrap();
        assert_eq!(back, samples);
        assert_eq!(write_truth(&back), text);
        assert!(matches!(read_truth("x,y\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            read_truth("t,x,y,heading,width,length\n0,1,2,3,4\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn marginals_round_trip() {
        let g = Gaussian2D::new(Vector2::new(1.5, -2.0), Matrix2::new(3.0, 0.5, 0.5, 2.0)).unwrap();
        let records = vec![MarginalRecord::new(0.0, &g), MarginalRecord::new(0.05, &g)];
        let text = write_marginals(&records);
        let back = read_marginals(&text).unwrap();
        assert_eq!(back, records);
        assert_eq!(write_marginals(&back), text);
        assert_eq!(back[0].gaussian().unwrap(), g);
    }

    #[test]
    fn tracker_params_round_trip() {
        let mut p = TrackerParams::default();
        p.filter.sigma_accel = 123.456;
        p.calibration
            .views
            .insert("N2".into(), crate::calibration::CalibrationParams { a: 3.25, b: 0.1 });
        let text = to_json(&p);
        let back: TrackerParams = from_json(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(to_json(&back), text);
        assert!(from_json::<TrackerParams>("{\"filter\": 3}").is_err());
    }

    #[test]
    fn single_view_selects() {
        let picked = single_view(&frames(), &"N1".into());
        assert_eq!(picked.len(), 1);
        assert_eq!(picked[0].0, 0.0);
    }
}
