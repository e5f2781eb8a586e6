//! Dataset directory layout: `<split>.detections.jsonl` and
//! `<split>.truth.csv` per split, plus the resolved `scenario.json`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use geotrack::io;
use geotrack::kalman::DetectionFrame;
use geotrack::ObjectPose;
use nalgebra::Vector2;

use crate::{usage, CmdResult, Failure};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const SCENARIO_FILE: &str = "scenario.json";

pub fn detections_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.detections.jsonl"))
}

pub fn truth_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.truth.csv"))
}

/// Reads a required input file; a missing file is a usage error.
pub fn read_input(path: &Path) -> CmdResult<String> {
    if !path.is_file() {
        return Err(usage(anyhow!("input file {} does not exist", path.display())));
    }
    std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(Failure::Runtime)
}

fn located(path: &Path, e: geotrack::Error) -> anyhow::Error {
    match e {
        geotrack::Error::Parse { line, message } => {
            anyhow!("{}:{line}: {message}", path.display())
        }
        other => anyhow!("{}: {other}", path.display()),
    }
}

pub fn load_detections(path: &Path) -> CmdResult<Vec<DetectionFrame>> {
    let text = read_input(path)?;
    io::read_detections(&text).map_err(|e| Failure::Runtime(located(path, e)))
}

pub fn load_truth(path: &Path) -> CmdResult<Vec<(f64, ObjectPose)>> {
    let text = read_input(path)?;
    io::read_truth(&text).map_err(|e| Failure::Runtime(located(path, e)))
}

/// Detections aligned one-to-one with ground truth.
#[derive(Debug)]
pub struct Split {
    pub frames: Vec<DetectionFrame>,
    pub truth: Vec<ObjectPose>,
}

impl Split {
    pub fn positions(&self) -> Vec<Vector2<f64>> {
        self.truth.iter().map(|p| p.position).collect()
    }
}

fn check_split_name(split: &str) -> CmdResult {
    if SPLITS.contains(&split) {
        Ok(())
    } else {
        Err(usage(anyhow!(
            "unknown split `{split}`; expected one of {}",
            SPLITS.join(", ")
        )))
    }
}

pub fn load_split(dir: &Path, split: &str) -> CmdResult<Split> {
    check_split_name(split)?;
    let det_path = detections_path(dir, split);
    let frames = load_detections(&det_path)?;
    let truth = load_truth(&truth_path(dir, split))?;
    if frames.len() != truth.len() {
        return Err(Failure::Runtime(anyhow!(
            "{} has {} frames but its truth file has {} rows",
            det_path.display(),
            frames.len(),
            truth.len()
        )));
    }
    let unmatched = frames
        .iter()
        .zip(&truth)
        .filter(|(f, (t, _))| f.t != *t)
        .count();
    if unmatched > 0 {
        return Err(Failure::Runtime(anyhow!(
            "{unmatched} frames of {} have no truth row at the same time",
            det_path.display()
        )));
    }
    Ok(Split {
        frames,
        truth: truth.into_iter().map(|(_, p)| p).collect(),
    })
}

/// Frames only, with truth when its file exists.
pub fn load_split_optional_truth(dir: &Path, split: &str) -> CmdResult<(Vec<DetectionFrame>, Option<Split>)> {
    check_split_name(split)?;
    if truth_path(dir, split).is_file() {
        let s = load_split(dir, split)?;
        Ok((s.frames.clone(), Some(s)))
    } else {
        Ok((load_detections(&detections_path(dir, split))?, None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_file_is_usage_error() {
        let err = read_input(Path::new("/nonexistent/x.csv")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn parse_errors_carry_path_and_line() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("test.truth.csv");
        std::fs::write(&path, "t,x,y,heading,width,length\n0,1,2,0,15,30\n0.05,oops,2,0,15,30\n").unwrap();
        let err = load_truth(&path).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("test.truth.csv:3"), "{err}");
    }

    #[test]
    fn unknown_split_is_rejected() {
        assert_eq!(load_split(Path::new("."), "dev").unwrap_err().exit_code(), 2);
    }
}
