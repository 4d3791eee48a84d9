use serde::{Deserialize, Serialize};

use super::{EvalConfig, EvalError, MatchKind};
use crate::geometry::{box_iou, mask_iou, polygon_bbox, rasterize, BoundingBox, InstanceMask, NodulePolygon};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub det: usize,
    pub gt: usize,
    pub iou: f64,
}

/// TP/FP/FN tallies of one matching pass at a fixed IoU cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub pairs: Vec<MatchPair>,
    pub kind: MatchKind,
    pub threshold: f64,
}

impl MatchResult {
    pub fn empty(kind: MatchKind, threshold: f64) -> Self {
        Self {
            tp: 0,
            fp: 0,
            fn_: 0,
            pairs: Vec::new(),
            kind,
            threshold,
        }
    }

    /// Folds another result in, shifting its indices by the given offsets.
    pub fn absorb(&mut self, other: &MatchResult, det_offset: usize, gt_offset: usize) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.pairs.extend(other.pairs.iter().map(|p| MatchPair {
            det: p.det + det_offset,
            gt: p.gt + gt_offset,
            iou: p.iou,
        }));
    }
}

/// Detection indices by descending score, ties kept in input order.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy matching: walking detections in `order`, each takes the
/// unmatched same-class ground truth with the highest IoU (lowest index on
/// ties). The pair is a TP when that IoU reaches `threshold`; otherwise the
/// detection is a FP and the ground truth stays available.
///
/// Returns, per detection, `Some((gt, iou))` when it is a TP.
pub(crate) fn greedy_match(
    order: &[usize],
    det_class: &[u32],
    gt_class: &[u32],
    iou: &dyn Fn(usize, usize) -> f64,
    threshold: f64,
) -> Vec<Option<(usize, f64)>> {
    let mut taken = vec![false; gt_class.len()];
    let mut out = vec![None; det_class.len()];
    for &d in order {
        let mut best: Option<(usize, f64)> = None;
        for g in 0..gt_class.len() {
            if taken[g] || gt_class[g] != det_class[d] {
                continue;
            }
            let v = iou(d, g);
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v >= threshold {
                taken[g] = true;
                out[d] = Some((g, v));
            }
        }
    }
    out
}

pub(crate) fn tally(labels: &[Option<(usize, f64)>], n_gt: usize, kind: MatchKind, threshold: f64) -> MatchResult {
    let pairs: Vec<MatchPair> = labels
        .iter()
        .enumerate()
        .filter_map(|(det, l)| l.map(|(gt, iou)| MatchPair { det, gt, iou }))
        .collect();
    let tp = pairs.len() as u64;
    MatchResult {
        tp,
        fp: labels.len() as u64 - tp,
        fn_: n_gt as u64 - tp,
        pairs,
        kind,
        threshold,
    }
}

/// Precomputed shapes of one instance in its image frame. A polygon lying
/// entirely outside the frame has no mask and overlaps nothing.
pub(crate) struct Shape {
    pub class_id: u32,
    pub mask: Option<InstanceMask>,
    pub bbox: BoundingBox,
}

impl Shape {
    pub fn new(polygon: &NodulePolygon, width: u32, height: u32) -> Self {
        Self {
            class_id: polygon.class_id,
            mask: rasterize(polygon, width, height).ok(),
            bbox: polygon_bbox(polygon),
        }
    }
}

pub(crate) fn shape_iou(a: &Shape, b: &Shape, kind: MatchKind) -> Result<f64, EvalError> {
    match kind {
        MatchKind::Box => Ok(box_iou(&a.bbox, &b.bbox)),
        MatchKind::Mask => match (&a.mask, &b.mask) {
            (Some(x), Some(y)) => Ok(mask_iou(x, y)?),
            _ => Ok(0.0),
        },
    }
}

/// Dense IoU matrix, `iou[d * n_gt + g]`.
pub(crate) fn iou_matrix(dets: &[Shape], gts: &[Shape], kind: MatchKind) -> Result<Vec<f64>, EvalError> {
    let mut m = Vec::with_capacity(dets.len() * gts.len());
    for d in dets {
        for g in gts {
            // Disjoint boxes cannot share pixels either.
            if d.bbox.intersection_area(&g.bbox) <= 0.0 && kind == MatchKind::Box {
                m.push(0.0);
            } else {
                m.push(shape_iou(d, g, kind)?);
            }
        }
    }
    Ok(m)
}

/// Matches the detections of one image against its ground truth.
pub fn match_detections(
    dets: &[(f64, NodulePolygon)],
    gts: &[NodulePolygon],
    frame: (u32, u32),
    cfg: &EvalConfig,
    kind: MatchKind,
) -> Result<MatchResult, EvalError> {
    let (w, h) = frame;
    let det_shapes: Vec<Shape> = dets.iter().map(|(_, p)| Shape::new(p, w, h)).collect();
    let gt_shapes: Vec<Shape> = gts.iter().map(|p| Shape::new(p, w, h)).collect();
    let iou = iou_matrix(&det_shapes, &gt_shapes, kind)?;
    let scores: Vec<f64> = dets.iter().map(|(s, _)| *s).collect();
    let det_class: Vec<u32> = det_shapes.iter().map(|s| s.class_id).collect();
    let gt_class: Vec<u32> = gt_shapes.iter().map(|s| s.class_id).collect();
    let n_gt = gts.len();
    let labels = greedy_match(
        &score_order(&scores),
        &det_class,
        &gt_class,
        &|d, g| iou[d * n_gt + g],
        cfg.iou_threshold,
    );
    Ok(tally(&labels, n_gt, kind, cfg.iou_threshold))
}
