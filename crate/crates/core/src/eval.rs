//! Detection scoring: IoU, non-maximum suppression, greedy matching,
//! 11-point interpolated average precision, and cross-rater concordance.
//!
//! Matching follows the 2007 PASCAL VOC procedure: detections are visited
//! in descending score order (ties by ascending id) and each claims the
//! unmatched same-class ground truth with the highest IoU on the same
//! image; the claim is a true positive when that IoU reaches the threshold,
//! otherwise a false positive. Precision/recall points are pooled across
//! images per class, and AP averages the interpolated precision at the 11
//! recall anchors 0.0, 0.1, ..., 1.0.
//!
//! Slides carry tens of thousands of cells, so NMS gets a uniform spatial
//! grid (cell size: median box side). A detection only ever has to be
//! compared against kept boxes sharing a grid cell, which is exhaustive for
//! overlap tests because any two intersecting boxes share the cell that
//! contains a point of their intersection. Output is bit-identical to the
//! quadratic reference.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Annotation, CellClass, ClassRegistry};
use crate::sampler::LocalAnnotation;

/// Axis-aligned box in real pixel coordinates, `(x, y)` top-left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxF {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxF {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoxF { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }
}

/// Intersection over union of two boxes, in [0, 1].
pub fn iou(a: &BoxF, b: &BoxF) -> f64 {
    let ix = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let iy = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub id: u64,
    /// Slide or patch the detection belongs to; matching never crosses it.
    pub image_id: String,
    pub class: CellClass,
    pub score: f64,
    pub bbox: BoxF,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub id: u64,
    pub image_id: String,
    pub class: CellClass,
    pub bbox: BoxF,
}

impl GroundTruth {
    /// Ground-truth box of an annotation: the square of side `2 * radius`
    /// centered on the marked point.
    pub fn from_annotation(image_id: &str, ann: &Annotation) -> Self {
        let (x, y, w, h) = ann.bounding_square();
        GroundTruth {
            id: ann.id,
            image_id: image_id.to_string(),
            class: ann.class,
            bbox: BoxF::new(x, y, w, h),
        }
    }

    /// Same bridge for patch-local annotations.
    pub fn from_local(image_id: &str, ann: &LocalAnnotation) -> Self {
        let r = ann.radius as f64;
        GroundTruth {
            id: ann.id,
            image_id: image_id.to_string(),
            class: ann.class,
            bbox: BoxF::new(ann.cx as f64 - r, ann.cy as f64 - r, 2.0 * r, 2.0 * r),
        }
    }
}

/// Score-descending order with ascending ids as the deterministic
/// tie-break; the one ordering every scoring step uses.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].score.partial_cmp(&dets[a].score).unwrap().then(dets[a].id.cmp(&dets[b].id))
    });
    order
}

/// Greedy non-maximum suppression: a detection is dropped iff its IoU with
/// an already-kept detection (of the same class, when `class_aware`)
/// strictly exceeds the threshold. Result is sorted by descending score.
pub fn nms(dets: &[Detection], iou_threshold: f64, class_aware: bool) -> Vec<Detection> {
    assert!(iou_threshold > 0.0 && iou_threshold <= 1.0, "threshold must be in (0, 1]");
    if dets.is_empty() {
        return Vec::new();
    }

    // Median box side sets the grid pitch; cell extent only affects speed,
    // never the kept set.
    let mut sides: Vec<f64> = dets.iter().flat_map(|d| [d.bbox.w, d.bbox.h]).collect();
    let mid = sides.len() / 2;
    sides.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
    let cell = sides[mid].max(1e-9);

    let cells_of = |b: &BoxF| {
        let gx0 = (b.x / cell).floor() as i64;
        let gx1 = (b.right() / cell).floor() as i64;
        let gy0 = (b.y / cell).floor() as i64;
        let gy1 = (b.bottom() / cell).floor() as i64;
        (gx0, gx1, gy0, gy1)
    };

    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(dets) {
        let d = &dets[i];
        let (gx0, gx1, gy0, gy1) = cells_of(&d.bbox);
        let mut suppressed = false;
        'scan: for gy in gy0..=gy1 {
            for gx in gx0..=gx1 {
                let Some(bucket) = grid.get(&(gx, gy)) else { continue };
                for &k in bucket {
                    let other = &dets[k];
                    if (!class_aware || other.class == d.class)
                        && iou(&other.bbox, &d.bbox) > iou_threshold
                    {
                        suppressed = true;
                        break 'scan;
                    }
                }
            }
        }
        if !suppressed {
            for gy in gy0..=gy1 {
                for gx in gx0..=gx1 {
                    grid.entry((gx, gy)).or_default().push(i);
                }
            }
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// Quadratic NMS reference. Same contract as [`nms`]; kept around because
/// the grid version must stay bit-identical to it.
pub fn nms_reference(dets: &[Detection], iou_threshold: f64, class_aware: bool) -> Vec<Detection> {
    assert!(iou_threshold > 0.0 && iou_threshold <= 1.0, "threshold must be in (0, 1]");
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(dets) {
        let d = &dets[i];
        let survives = kept.iter().all(|&k| {
            let other = &dets[k];
            (class_aware && other.class != d.class) || iou(&other.bbox, &d.bbox) <= iou_threshold
        });
        if survives {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// Per-class scoring outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class: CellClass,
    pub ground_truth: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// `None` when the class has no ground truth; such classes never enter
    /// the mAP mean even if they produced false positives.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// One entry per class that occurs in the ground truth or detections,
    /// ascending class id.
    pub classes: Vec<ClassReport>,
    /// Unweighted mean AP over classes with ground truth; `None` when no
    /// class has any.
    pub mean_ap: Option<f64>,
    /// Matched (detection id, ground-truth id) pairs.
    pub matches: Vec<(u64, u64)>,
}

impl EvalReport {
    pub fn class(&self, class: CellClass) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class == class)
    }
}

/// Unweighted mean of per-class average precisions.
pub fn map_score(aps: &[f64]) -> f64 {
    assert!(!aps.is_empty(), "mAP needs at least one class");
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// 11-point interpolated AP from pooled detection outcomes.
///
/// `flags` holds one bool per detection of the class, true for TP, in
/// descending score order.
fn eleven_point_ap(flags: &[bool], n_gt: usize) -> f64 {
    debug_assert!(n_gt > 0);
    let mut points = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &is_tp in flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut sum = 0.0;
    for anchor in 0..=10 {
        let r = anchor as f64 / 10.0;
        let best = points
            .iter()
            .filter(|(recall, _)| *recall >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / 11.0
}

/// Match detections against ground truth and score every class.
///
/// Both inputs may span many images; matching is confined to pairs sharing
/// an `image_id` while the precision/recall statistics pool over all of
/// them, class by class.
pub fn match_and_ap(
    dets: &[Detection],
    ground_truth: &[GroundTruth],
    iou_threshold: f64,
) -> EvalReport {
    assert!(iou_threshold > 0.0 && iou_threshold <= 1.0, "threshold must be in (0, 1]");

    // Ground truth grouped by (image, class) for the greedy pass.
    let mut gt_pool: HashMap<(&str, CellClass), Vec<usize>> = HashMap::new();
    for (i, gt) in ground_truth.iter().enumerate() {
        gt_pool.entry((gt.image_id.as_str(), gt.class)).or_default().push(i);
    }
    let mut gt_taken = vec![false; ground_truth.len()];

    let mut flags: HashMap<CellClass, Vec<bool>> = HashMap::new();
    let mut matches = Vec::new();
    for i in score_order(dets) {
        let d = &dets[i];
        let mut best: Option<(f64, usize)> = None;
        if let Some(pool) = gt_pool.get(&(d.image_id.as_str(), d.class)) {
            for &gi in pool {
                if gt_taken[gi] {
                    continue;
                }
                let overlap = iou(&d.bbox, &ground_truth[gi].bbox);
                let better = match best {
                    None => true,
                    Some((b, bi)) => {
                        overlap > b
                            || (overlap == b && ground_truth[gi].id < ground_truth[bi].id)
                    }
                };
                if better {
                    best = Some((overlap, gi));
                }
            }
        }
        let is_tp = match best {
            Some((overlap, gi)) if overlap >= iou_threshold => {
                gt_taken[gi] = true;
                matches.push((d.id, ground_truth[gi].id));
                true
            }
            _ => false,
        };
        flags.entry(d.class).or_default().push(is_tp);
    }

    let mut gt_counts: HashMap<CellClass, usize> = HashMap::new();
    for gt in ground_truth {
        *gt_counts.entry(gt.class).or_default() += 1;
    }

    let mut class_ids: Vec<CellClass> =
        gt_counts.keys().chain(flags.keys()).copied().collect();
    class_ids.sort_unstable();
    class_ids.dedup();

    let mut classes = Vec::new();
    let mut aps = Vec::new();
    for class in class_ids {
        let n_gt = gt_counts.get(&class).copied().unwrap_or(0);
        let class_flags = flags.get(&class).map(Vec::as_slice).unwrap_or(&[]);
        let tp = class_flags.iter().filter(|f| **f).count();
        let fp = class_flags.len() - tp;
        let ap = if n_gt > 0 { Some(eleven_point_ap(class_flags, n_gt)) } else { None };
        if let Some(a) = ap {
            aps.push(a);
        }
        classes.push(ClassReport {
            class,
            ground_truth: n_gt,
            true_positives: tp,
            false_positives: fp,
            false_negatives: n_gt - tp,
            ap,
        });
    }

    let mean_ap = if aps.is_empty() { None } else { Some(map_score(&aps)) };
    EvalReport { classes, mean_ap, matches }
}

/// Agreement of independent raters against a reference annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcordanceReport {
    /// `(rater name, mAP against the reference)`.
    pub per_rater: Vec<(String, f64)>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Population standard deviation over rater mAPs.
    pub sigma: f64,
}

/// Score each rater's marks against the reference annotation. Marks carry
/// no confidence, so they are treated as detections with score 1.0.
pub fn concordance(
    reference: &[GroundTruth],
    raters: &[(String, Vec<GroundTruth>)],
    iou_threshold: f64,
) -> ConcordanceReport {
    assert!(!raters.is_empty(), "concordance needs at least one rater");
    let per_rater: Vec<(String, f64)> = raters
        .iter()
        .map(|(name, marks)| {
            let dets: Vec<Detection> = marks
                .iter()
                .map(|m| Detection {
                    id: m.id,
                    image_id: m.image_id.clone(),
                    class: m.class,
                    score: 1.0,
                    bbox: m.bbox,
                })
                .collect();
            let report = match_and_ap(&dets, reference, iou_threshold);
            (name.clone(), report.mean_ap.unwrap_or(0.0))
        })
        .collect();

    let values: Vec<f64> = per_rater.iter().map(|(_, v)| *v).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    ConcordanceReport { per_rater, mean, min, max, sigma: var.sqrt() }
}

// ---------------------------------------------------------------------------
// File formats. Detections: one JSON record per line. Report: a single
// JSON document, with an optional CSV table of the per-class AP row.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    id: u64,
    image_id: String,
    class: String,
    score: f64,
    bbox: [f64; 4],
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed detection record: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("detection {id}: {reason}")]
    InvalidRecord { id: u64, reason: String },
}

pub fn write_detections(
    mut w: impl Write,
    dets: &[Detection],
    registry: &ClassRegistry,
) -> Result<(), EvalError> {
    for d in dets {
        let record = DetectionRecord {
            id: d.id,
            image_id: d.image_id.clone(),
            class: registry.label(d.class).unwrap_or("unknown").to_string(),
            score: d.score,
            bbox: [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h],
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_detections(
    r: impl BufRead,
    registry: &mut ClassRegistry,
) -> Result<Vec<Detection>, EvalError> {
    let mut dets = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DetectionRecord = serde_json::from_str(&line)?;
        if !(0.0..=1.0).contains(&record.score) {
            return Err(EvalError::InvalidRecord {
                id: record.id,
                reason: format!("score {} outside [0, 1]", record.score),
            });
        }
        if record.bbox[2] <= 0.0 || record.bbox[3] <= 0.0 {
            return Err(EvalError::InvalidRecord {
                id: record.id,
                reason: format!("box extent {}x{} not positive", record.bbox[2], record.bbox[3]),
            });
        }
        dets.push(Detection {
            id: record.id,
            image_id: record.image_id,
            class: registry.resolve(&record.class),
            score: record.score,
            bbox: BoxF::new(record.bbox[0], record.bbox[1], record.bbox[2], record.bbox[3]),
        });
    }
    Ok(dets)
}

#[derive(Serialize, Deserialize)]
struct GroundTruthRecord {
    id: u64,
    image_id: String,
    class: String,
    bbox: [f64; 4],
}

pub fn write_ground_truth(
    mut w: impl Write,
    gts: &[GroundTruth],
    registry: &ClassRegistry,
) -> Result<(), EvalError> {
    for g in gts {
        let record = GroundTruthRecord {
            id: g.id,
            image_id: g.image_id.clone(),
            class: registry.label(g.class).unwrap_or("unknown").to_string(),
            bbox: [g.bbox.x, g.bbox.y, g.bbox.w, g.bbox.h],
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Same line format as detections, minus the score.
pub fn read_ground_truth(
    r: impl BufRead,
    registry: &mut ClassRegistry,
) -> Result<Vec<GroundTruth>, EvalError> {
    let mut gts = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GroundTruthRecord = serde_json::from_str(&line)?;
        if record.bbox[2] <= 0.0 || record.bbox[3] <= 0.0 {
            return Err(EvalError::InvalidRecord {
                id: record.id,
                reason: format!("box extent {}x{} not positive", record.bbox[2], record.bbox[3]),
            });
        }
        gts.push(GroundTruth {
            id: record.id,
            image_id: record.image_id,
            class: registry.resolve(&record.class),
            bbox: BoxF::new(record.bbox[0], record.bbox[1], record.bbox[2], record.bbox[3]),
        });
    }
    Ok(gts)
}

#[derive(Serialize)]
struct ReportClassRecord<'a> {
    class: &'a str,
    ground_truth: usize,
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    ap: Option<f64>,
}

pub fn report_to_json(report: &EvalReport, registry: &ClassRegistry) -> String {
    #[derive(Serialize)]
    struct ReportRecord<'a> {
        map: Option<f64>,
        classes: Vec<ReportClassRecord<'a>>,
    }
    let record = ReportRecord {
        map: report.mean_ap,
        classes: report
            .classes
            .iter()
            .map(|c| ReportClassRecord {
                class: registry.label(c.class).unwrap_or("unknown"),
                ground_truth: c.ground_truth,
                tp: c.true_positives,
                fp: c.false_positives,
                fn_: c.false_negatives,
                ap: c.ap,
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&record).expect("report serializes");
    s.push('\n');
    s
}

/// One CSV row of per-class APs plus the mean, mirroring the usual
/// results-table layout.
pub fn report_to_csv(report: &EvalReport, registry: &ClassRegistry) -> String {
    let mut header: Vec<String> = Vec::new();
    let mut row: Vec<String> = Vec::new();
    for c in &report.classes {
        header.push(registry.label(c.class).unwrap_or("unknown").to_string());
        row.push(c.ap.map(|a| format!("{a:.4}")).unwrap_or_default());
    }
    header.push("mean".into());
    row.push(report.mean_ap.map(|m| format!("{m:.4}")).unwrap_or_default());
    format!("{}\n{}\n", header.join(","), row.join(","))
}
