//! Per-class average precision and mAP over a set of scenes.
//!
//! Predictions of one class are ranked globally by confidence (ties: lower
//! scene index, then lower prediction index) and matched greedily to the
//! unmatched ground-truth box of the same scene and class with the highest
//! IoU at or above the threshold. AP integrates the precision envelope over
//! recall (all-point interpolation).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou3d, BoundingBox};
use crate::data::ClassVocab;
use crate::error::{Error, Result};
use crate::par;

/// Precision/recall at every rank plus the non-increasing envelope.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ApCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub interpolated: Vec<f64>,
}

impl ApCurve {
    pub fn average_precision(&self) -> f64 {
        let mut prev = 0.0;
        let mut ap = 0.0;
        for (r, p) in self.recall.iter().zip(&self.interpolated) {
            ap += (r - prev) * p;
            prev = *r;
        }
        ap
    }
}

/// `tp` flags in ranked order; `num_gt` must be positive for recall to be defined.
pub fn ap_curve(tp: &[bool], num_gt: usize) -> ApCurve {
    if tp.is_empty() || num_gt == 0 {
        return ApCurve::default();
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    let mut interpolated = precision.clone();
    for i in (0..interpolated.len().saturating_sub(1)).rev() {
        interpolated[i] = interpolated[i].max(interpolated[i + 1]);
    }
    ApCurve {
        recall,
        precision,
        interpolated,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub num_gt: usize,
    pub num_pred: usize,
    /// One entry per threshold; `None` when the class has no ground truth.
    pub ap: Vec<Option<f64>>,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    /// Mean AP over classes present in ground truth, per threshold.
    pub map: Vec<f64>,
}

impl EvalReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| (t - threshold).abs() < 1e-12)
            .map(|i| self.map[i])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Classes as columns, one row per threshold.
    pub fn to_table(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(0)
            .max(6);
        let mut s = String::new();
        let _ = write!(s, "{:<8}", "IoU");
        for c in &self.classes {
            let _ = write!(s, " {:>width$}", c.name);
        }
        let _ = writeln!(s, " {:>width$}", "mAP");
        for (ti, t) in self.thresholds.iter().enumerate() {
            let _ = write!(s, "{:<8}", format!("@{t:.2}"));
            for c in &self.classes {
                match c.ap[ti] {
                    Some(ap) => {
                        let _ = write!(s, " {:>width$.2}", 100.0 * ap);
                    }
                    None => {
                        let _ = write!(s, " {:>width$}", "-");
                    }
                }
            }
            let _ = writeln!(s, " {:>width$.2}", 100.0 * self.map[ti]);
        }
        s
    }
}

fn check_boxes(
    boxes: &[Vec<BoundingBox>],
    num_classes: usize,
    what: &str,
    scored: bool,
) -> Result<()> {
    for (si, scene) in boxes.iter().enumerate() {
        for (bi, b) in scene.iter().enumerate() {
            match b.label {
                Some(l) if l < num_classes => {}
                other => return Err(Error::Eval(format!(
                    "{what} {bi} in scene {si} has class {other:?}, vocabulary has {num_classes}"
                ))),
            }
            if scored && !b.score.is_some_and(f64::is_finite) {
                return Err(Error::Eval(format!(
                    "{what} {bi} in scene {si} has no finite confidence"
                )));
            }
        }
    }
    Ok(())
}

/// Ranked true-positive flags for one class at one IoU threshold.
pub fn match_class(
    detections: &[Vec<BoundingBox>],
    gt: &[Vec<BoundingBox>],
    class: usize,
    threshold: f64,
) -> Vec<bool> {
    let mut preds: Vec<(f64, usize, usize)> = Vec::new();
    for (si, scene) in detections.iter().enumerate() {
        for (pi, b) in scene.iter().enumerate() {
            if b.label == Some(class) {
                preds.push((b.score.unwrap_or(0.0), si, pi));
            }
        }
    }
    preds.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used: Vec<Vec<bool>> = gt.iter().map(|s| vec![false; s.len()]).collect();
    preds
        .iter()
        .map(|&(_, si, pi)| {
            let p = &detections[si][pi];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gt[si].iter().enumerate() {
                if g.label != Some(class) || used[si][gi] {
                    continue;
                }
                let iou = iou3d(p, g);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            match best {
                Some((gi, _)) => {
                    used[si][gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Detections need a label and a confidence (`score`); ground truth needs a label.
pub fn evaluate(
    detections: &[Vec<BoundingBox>],
    gt: &[Vec<BoundingBox>],
    vocab: &ClassVocab,
    thresholds: &[f64],
) -> Result<EvalReport> {
    if detections.len() != gt.len() {
        return Err(Error::Eval(format!(
            "{} detection scenes but {} ground-truth scenes",
            detections.len(),
            gt.len()
        )));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Eval(format!("bad IoU thresholds {thresholds:?}")));
    }
    let nc = vocab.len();
    check_boxes(detections, nc, "detection", true)?;
    check_boxes(gt, nc, "ground-truth box", false)?;

    let count = |boxes: &[Vec<BoundingBox>], c: usize| {
        boxes
            .iter()
            .flatten()
            .filter(|b| b.label == Some(c))
            .count()
    };
    let jobs: Vec<(usize, usize)> = (0..nc)
        .flat_map(|c| (0..thresholds.len()).map(move |t| (c, t)))
        .collect();
    let flags = par::map(&jobs, |&(c, t)| {
        match_class(detections, gt, c, thresholds[t])
    });

    let mut classes = Vec::with_capacity(nc);
    for c in 0..nc {
        let num_gt = count(gt, c);
        let mut ap = Vec::new();
        let mut tp = Vec::new();
        let mut fp = Vec::new();
        for t in 0..thresholds.len() {
            let f = &flags[c * thresholds.len() + t];
            let hits = f.iter().filter(|x| **x).count();
            tp.push(hits);
            fp.push(f.len() - hits);
            ap.push((num_gt > 0).then(|| ap_curve(f, num_gt).average_precision()));
        }
        classes.push(ClassReport {
            name: vocab.0[c].clone(),
            num_gt,
            num_pred: count(detections, c),
            ap,
            tp,
            fp,
        });
    }
    let map = (0..thresholds.len())
        .map(|t| {
            let present: Vec<f64> = classes.iter().filter_map(|c| c.ap[t]).collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        })
        .collect();
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        classes,
        map,
    })
}
