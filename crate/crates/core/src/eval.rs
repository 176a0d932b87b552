//! One-pass evaluation: precision over center-error thresholds, success over
//! overlap thresholds, and a reinitializing accuracy/robustness harness.

use std::fmt;

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Frame};

/// Threshold grids for the two curves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalGrid {
    pub max_center_error: usize,
    pub overlap_step: f64,
}

impl Default for EvalGrid {
    fn default() -> Self {
        Self {
            max_center_error: 50,
            overlap_step: 0.05,
        }
    }
}

impl EvalGrid {
    pub fn center_thresholds(&self) -> Vec<f64> {
        (0..=self.max_center_error).map(|t| t as f64).collect()
    }

    pub fn overlap_thresholds(&self) -> Vec<f64> {
        let n = (1.0 / self.overlap_step).round() as usize;
        (0..=n).map(|i| i as f64 / n as f64).collect()
    }
}

/// A curve sampled on a threshold grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

impl Curve {
    /// Value at the grid point nearest to `threshold`.
    pub fn at(&self, threshold: f64) -> f64 {
        let i = self
            .thresholds
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - threshold).abs().total_cmp(&(b.1 - threshold).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.values[i]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// `threshold,value` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,value\n");
        for (t, v) in self.thresholds.iter().zip(&self.values) {
            s.push_str(&format!("{t},{v:.6}\n"));
        }
        s
    }
}

fn check_lengths(results: &[BoundingBox], gt: &[BoundingBox]) -> Result<()> {
    if results.len() != gt.len() {
        return Err(Error::input(format!(
            "{} result boxes for {} ground-truth boxes",
            results.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::input("no frames to evaluate"));
    }
    Ok(())
}

/// Fraction of frames whose center error is at most each threshold.
pub fn precision_curve(results: &[BoundingBox], gt: &[BoundingBox], grid: &EvalGrid) -> Result<Curve> {
    check_lengths(results, gt)?;
    let errors: Vec<f64> = results.iter().zip(gt).map(|(r, g)| r.center_distance(g)).collect();
    let thresholds = grid.center_thresholds();
    let values = thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64)
        .collect();
    Ok(Curve { thresholds, values })
}

/// Fraction of frames whose IoU strictly exceeds each threshold, and its mean.
pub fn success_curve_and_auc(
    results: &[BoundingBox],
    gt: &[BoundingBox],
    grid: &EvalGrid,
) -> Result<(Curve, f64)> {
    check_lengths(results, gt)?;
    let overlaps: Vec<f64> = results.iter().zip(gt).map(|(r, g)| r.iou(g)).collect();
    let thresholds = grid.overlap_thresholds();
    let values = thresholds
        .iter()
        .map(|&t| overlaps.iter().filter(|&&o| o > t).count() as f64 / overlaps.len() as f64)
        .collect();
    let curve = Curve { thresholds, values };
    let auc = curve.mean();
    Ok((curve, auc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurves {
    pub precision: Curve,
    pub success: Curve,
    pub auc: f64,
    /// Precision at 20 px.
    pub representative_precision: f64,
    pub mean_iou: f64,
}

pub fn evaluate(results: &[BoundingBox], gt: &[BoundingBox], grid: &EvalGrid) -> Result<EvalCurves> {
    let precision = precision_curve(results, gt, grid)?;
    let (success, auc) = success_curve_and_auc(results, gt, grid)?;
    let representative_precision = precision.at(20.0);
    let mean_iou = results.iter().zip(gt).map(|(r, g)| r.iou(g)).sum::<f64>() / gt.len() as f64;
    Ok(EvalCurves {
        precision,
        success,
        auc,
        representative_precision,
        mean_iou,
    })
}

impl EvalCurves {
    /// Both curves in one CSV, tagged by kind.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("curve,threshold,value\n");
        for (name, c) in [("precision", &self.precision), ("success", &self.success)] {
            for (t, v) in c.thresholds.iter().zip(&c.values) {
                s.push_str(&format!("{name},{t},{v:.6}\n"));
            }
        }
        s
    }
}

impl fmt::Display for EvalCurves {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "auc={:.4} precision@20={:.4} mean_iou={:.4}",
            self.auc, self.representative_precision, self.mean_iou
        )
    }
}

/// Anything that can be started from a box and then follow it frame by frame.
pub trait SequenceTracker {
    fn start(&mut self, frame: &Frame, gt: &BoundingBox) -> Result<()>;
    fn next(&mut self, frame: &Frame) -> Result<BoundingBox>;
}

/// Frames skipped after a failure before reinitializing.
pub const REINIT_GAP: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ReinitReport {
    pub failures: usize,
    /// Mean IoU over frames that were actually tracked (initialization frames excluded).
    pub accuracy: f64,
    /// Per-frame box, `None` for frames skipped after a failure.
    pub boxes: Vec<Option<BoundingBox>>,
}

/// Runs `tracker` with reinitialization: a frame with zero overlap counts as
/// a failure and the tracker restarts from ground truth `REINIT_GAP` frames later.
pub fn run_with_reinit(
    tracker: &mut impl SequenceTracker,
    frames: &[Frame],
    gt: &[BoundingBox],
) -> Result<ReinitReport> {
    if frames.len() != gt.len() || frames.is_empty() {
        return Err(Error::input("frames and ground truth must be nonempty and equal in length"));
    }
    let mut boxes = vec![None; frames.len()];
    let mut failures = 0;
    let (mut overlap_sum, mut tracked) = (0.0, 0usize);
    let mut t = 0;
    while t < frames.len() {
        tracker.start(&frames[t], &gt[t])?;
        boxes[t] = Some(gt[t]);
        t += 1;
        while t < frames.len() {
            let b = tracker.next(&frames[t])?;
            boxes[t] = Some(b);
            let o = b.iou(&gt[t]);
            if o <= 0.0 {
                failures += 1;
                t += REINIT_GAP;
                break;
            }
            overlap_sum += o;
            tracked += 1;
            t += 1;
        }
    }
    Ok(ReinitReport {
        failures,
        accuracy: if tracked > 0 { overlap_sum / tracked as f64 } else { 0.0 },
        boxes,
    })
}
