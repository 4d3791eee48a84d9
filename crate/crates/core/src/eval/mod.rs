//! Scoring of prediction sets against ground truth: Dice (pixel and
//! instance level), precision, recall and AP at a single IoU cutoff, for
//! masks and boxes independently.

mod ap;
pub mod labels;
mod matching;

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ap::{ap_from_curve, ap_from_ranked, envelope, pr_curve, ApInterpolation, PrPoint};
pub use labels::{parse_predictions, read_yolo_labels, LabelError, LabelLine, PredictionError, PredictionSet};
pub use matching::{match_detections, MatchPair, MatchResult};

use crate::annotation::{AnnotationRecord, AnnotationSet};
use crate::geometry::{Bitmap, GeometryError, NodulePolygon};
use crate::manifest::{Bucket, DatasetManifest};
use matching::{greedy_match, iou_matrix, score_order, tally, Shape};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("prediction for unknown image {0}")]
    UnknownImageRef(String),
    #[error("prediction for {image}, which is not in the evaluated set ({scope})")]
    SplitMismatch { image: String, scope: String },
    #[error("no ground-truth instances to evaluate")]
    NoGroundTruth,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Mask,
    Box,
}

impl fmt::Display for MatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchKind::Mask => "mask",
            MatchKind::Box => "box",
        })
    }
}

/// One predicted nodule. The class is the polygon's `class_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_ref: String,
    pub score: f64,
    pub polygon: NodulePolygon,
}

impl Detection {
    pub fn class_id(&self) -> u32 {
        self.polygon.class_id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Detections scoring below this are ignored.
    pub score_floor: f64,
    pub interpolation: ApInterpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            score_floor: 0.0,
            interpolation: ApInterpolation::Point101,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(EvalError::InvalidConfig(format!(
                "iou threshold {} outside (0, 1)",
                self.iou_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(EvalError::InvalidConfig(format!(
                "score floor {} outside [0, 1]",
                self.score_floor
            )));
        }
        Ok(())
    }
}

/// tp / (tp + fp), 1 when there are no detections.
pub fn precision(m: &MatchResult) -> f64 {
    ratio(m.tp, m.tp + m.fp)
}

/// tp / (tp + fn), 1 when there is no ground truth.
pub fn recall(m: &MatchResult) -> f64 {
    ratio(m.tp, m.tp + m.fn_)
}

/// 2tp / (2tp + fp + fn) over matched instances, 1 when everything is empty.
pub fn dice_instance(m: &MatchResult) -> f64 {
    dice_from_counts(m.tp, m.fp, m.fn_)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn dice_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl PixelCounts {
    fn add(&mut self, o: PixelCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn dice(&self) -> f64 {
        dice_from_counts(self.tp, self.fp, self.fn_)
    }
}

fn union_bitmap(shapes: &[Shape], width: u32, height: u32) -> Result<Bitmap, GeometryError> {
    let mut union = Bitmap::new(width, height);
    for m in shapes.iter().filter_map(|s| s.mask.as_ref()) {
        union.union_with(m.bits())?;
    }
    Ok(union)
}

fn pixel_counts(dets: &[Shape], gts: &[Shape], width: u32, height: u32) -> Result<PixelCounts, GeometryError> {
    let pred = union_bitmap(dets, width, height)?;
    let truth = union_bitmap(gts, width, height)?;
    let tp = pred.and_count(&truth)?;
    Ok(PixelCounts {
        tp,
        fp: pred.count_ones() - tp,
        fn_: truth.count_ones() - tp,
    })
}

/// Ground truth and predictions of one image in a shared frame.
#[derive(Debug, Clone)]
pub struct ImageCase<'a> {
    pub image_ref: &'a str,
    pub width: u32,
    pub height: u32,
    pub gts: &'a [NodulePolygon],
    pub dets: Vec<&'a Detection>,
}

impl<'a> ImageCase<'a> {
    pub fn from_record(record: &'a AnnotationRecord, dets: Vec<&'a Detection>) -> Self {
        Self {
            image_ref: &record.image_ref,
            width: record.width,
            height: record.height,
            gts: &record.nodules,
            dets,
        }
    }
}

/// Dataset-level pixel Dice: predicted and true masks are unioned per
/// image, and TP/FP/FN pixel counts are summed over all images before
/// applying 2TP / (2TP + FP + FN).
pub fn dice_pixel(cases: &[ImageCase<'_>]) -> Result<f64, EvalError> {
    let counts = cases
        .par_iter()
        .map(|c| {
            let d: Vec<Shape> = c.dets.iter().map(|d| Shape::new(&d.polygon, c.width, c.height)).collect();
            let g: Vec<Shape> = c.gts.iter().map(|p| Shape::new(p, c.width, c.height)).collect();
            pixel_counts(&d, &g, c.width, c.height)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = PixelCounts::default();
    counts.into_iter().for_each(|c| total.add(c));
    Ok(total.dice())
}

struct ImageOutcome {
    /// Per detection (input order): TP flag for mask and box.
    mask: MatchResult,
    boxes: MatchResult,
    mask_tp: Vec<bool>,
    box_tp: Vec<bool>,
    pixels: PixelCounts,
}

fn evaluate_image(case: &ImageCase<'_>, cfg: &EvalConfig) -> Result<ImageOutcome, EvalError> {
    let (w, h) = (case.width, case.height);
    let dets: Vec<Shape> = case.dets.iter().map(|d| Shape::new(&d.polygon, w, h)).collect();
    let gts: Vec<Shape> = case.gts.iter().map(|p| Shape::new(p, w, h)).collect();
    let scores: Vec<f64> = case.dets.iter().map(|d| d.score).collect();
    let order = score_order(&scores);
    let det_class: Vec<u32> = dets.iter().map(|s| s.class_id).collect();
    let gt_class: Vec<u32> = gts.iter().map(|s| s.class_id).collect();
    let n_gt = gts.len();

    let run = |kind| -> Result<(MatchResult, Vec<bool>), EvalError> {
        let iou = iou_matrix(&dets, &gts, kind)?;
        let labels = greedy_match(&order, &det_class, &gt_class, &|d, g| iou[d * n_gt + g], cfg.iou_threshold);
        let flags = labels.iter().map(Option::is_some).collect();
        Ok((tally(&labels, n_gt, kind, cfg.iou_threshold), flags))
    };
    let (mask, mask_tp) = run(MatchKind::Mask)?;
    let (boxes, box_tp) = run(MatchKind::Box)?;
    Ok(ImageOutcome {
        mask,
        boxes,
        mask_tp,
        box_tp,
        pixels: pixel_counts(&dets, &gts, w, h)?,
    })
}

/// Global ranking of detections: descending score, then image_ref, then
/// position within the image. Returns `(case index, detection index)`.
fn global_order(cases: &[ImageCase<'_>]) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = cases
        .iter()
        .enumerate()
        .flat_map(|(c, case)| (0..case.dets.len()).map(move |d| (c, d)))
        .collect();
    all.sort_by(|&(ca, da), &(cb, db)| {
        cases[cb].dets[db]
            .score
            .total_cmp(&cases[ca].dets[da].score)
            .then_with(|| cases[ca].image_ref.cmp(cases[cb].image_ref))
            .then(da.cmp(&db))
    });
    all
}

/// AP of one match kind over a set of images.
pub fn average_precision(cases: &[ImageCase<'_>], cfg: &EvalConfig, kind: MatchKind) -> Result<f64, EvalError> {
    let outcomes = cases
        .par_iter()
        .map(|c| evaluate_image(c, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let n_gt: usize = cases.iter().map(|c| c.gts.len()).sum();
    let flags: Vec<bool> = global_order(cases)
        .into_iter()
        .map(|(c, d)| match kind {
            MatchKind::Mask => outcomes[c].mask_tp[d],
            MatchKind::Box => outcomes[c].box_tp[d],
        })
        .collect();
    ap_from_ranked(&flags, n_gt, cfg.interpolation)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model_tag: String,
    pub dataset_version: String,
    pub bucket: Option<Bucket>,
    pub seed: Option<u64>,
    pub iou_threshold: f64,
    pub score_floor: f64,
    pub interpolation: ApInterpolation,
    /// How `dice_pixel` aggregates images.
    pub dice_pixel_averaging: String,
    /// Which detections the scalar precision/recall are computed from.
    pub operating_point: String,
    pub n_images: usize,
    pub n_ground_truth: usize,
    pub n_detections: usize,
    pub pixel_counts: PixelCounts,
    /// Metrics that fell back to 1.0 because their denominator was zero.
    pub vacuous: Vec<String>,
}

/// One scored run: the metric columns plus both PR curves and the raw
/// counts behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dice_pixel: f64,
    pub dice_instance: f64,
    pub map50_mask: f64,
    pub map50_box: f64,
    pub precision_mask: f64,
    pub precision_box: f64,
    pub recall_mask: f64,
    pub recall_box: f64,
    pub pr_curve_mask: Vec<PrPoint>,
    pub pr_curve_box: Vec<PrPoint>,
    pub counts_mask: MatchResult,
    pub counts_box: MatchResult,
    pub meta: ReportMeta,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    pub fn scalars(&self) -> [(&'static str, f64); 8] {
        [
            ("dice_pixel", self.dice_pixel),
            ("dice_instance", self.dice_instance),
            ("map50_mask", self.map50_mask),
            ("map50_box", self.map50_box),
            ("precision_mask", self.precision_mask),
            ("precision_box", self.precision_box),
            ("recall_mask", self.recall_mask),
            ("recall_box", self.recall_box),
        ]
    }
}

/// Scores prepared image cases. Every case is evaluated, including images
/// without detections (their ground truth counts as missed).
pub fn evaluate_cases(cases: &[ImageCase<'_>], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let outcomes = cases
        .par_iter()
        .map(|c| evaluate_image(c, cfg))
        .collect::<Result<Vec<_>, _>>()?;

    let mut counts_mask = MatchResult::empty(MatchKind::Mask, cfg.iou_threshold);
    let mut counts_box = MatchResult::empty(MatchKind::Box, cfg.iou_threshold);
    let mut pixels = PixelCounts::default();
    let (mut det_off, mut gt_off) = (0, 0);
    for (case, o) in cases.iter().zip(&outcomes) {
        counts_mask.absorb(&o.mask, det_off, gt_off);
        counts_box.absorb(&o.boxes, det_off, gt_off);
        pixels.add(o.pixels);
        det_off += case.dets.len();
        gt_off += case.gts.len();
    }
    let n_gt = gt_off;
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }

    let order = global_order(cases);
    let mask_flags: Vec<bool> = order.iter().map(|&(c, d)| outcomes[c].mask_tp[d]).collect();
    let box_flags: Vec<bool> = order.iter().map(|&(c, d)| outcomes[c].box_tp[d]).collect();
    let pr_curve_mask = pr_curve(&mask_flags, n_gt);
    let pr_curve_box = pr_curve(&box_flags, n_gt);

    let mut vacuous = Vec::new();
    if det_off == 0 {
        vacuous.extend(["precision_mask".to_string(), "precision_box".to_string()]);
    }
    if pixels.tp + pixels.fp + pixels.fn_ == 0 {
        vacuous.push("dice_pixel".to_string());
    }

    Ok(EvalReport {
        dice_pixel: pixels.dice(),
        dice_instance: dice_instance(&counts_mask),
        map50_mask: ap_from_curve(&pr_curve_mask, cfg.interpolation),
        map50_box: ap_from_curve(&pr_curve_box, cfg.interpolation),
        precision_mask: precision(&counts_mask),
        precision_box: precision(&counts_box),
        recall_mask: recall(&counts_mask),
        recall_box: recall(&counts_box),
        pr_curve_mask,
        pr_curve_box,
        counts_mask,
        counts_box,
        meta: ReportMeta {
            model_tag: String::new(),
            dataset_version: String::new(),
            bucket: None,
            seed: None,
            iou_threshold: cfg.iou_threshold,
            score_floor: cfg.score_floor,
            interpolation: cfg.interpolation,
            dice_pixel_averaging: "micro: pixel counts summed over all images".into(),
            operating_point: format!("all detections with score >= {}", cfg.score_floor),
            n_images: cases.len(),
            n_ground_truth: n_gt,
            n_detections: det_off,
            pixel_counts: pixels,
            vacuous,
        },
    })
}

/// Scores `preds` against the annotated images selected by `manifest` and
/// `bucket` (all non-excluded records when no manifest is given).
///
/// Fails with `UnknownImageRef` for a prediction naming an image absent
/// from the ground truth, and with `SplitMismatch` for one whose image
/// exists but lies outside the evaluated selection.
pub fn evaluate(
    preds: &PredictionSet,
    gt: &AnnotationSet,
    manifest: Option<&DatasetManifest>,
    bucket: Option<Bucket>,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let index = gt.index();
    let selected: BTreeSet<&str> = match manifest {
        Some(m) => m
            .live_entries()
            .filter(|e| bucket.is_none() || e.split == bucket)
            .map(|e| e.image_ref.as_str())
            .collect(),
        None => gt
            .records
            .iter()
            .filter(|r| r.excluded.is_none())
            .map(|r| r.image_ref.as_str())
            .collect(),
    };
    let scope = match bucket {
        Some(b) => format!("bucket {b}"),
        None => "all images".to_string(),
    };
    for image in preds.images.keys() {
        if !index.contains_key(image.as_str()) {
            return Err(EvalError::UnknownImageRef(image.clone()));
        }
        if !selected.contains(image.as_str()) {
            return Err(EvalError::SplitMismatch {
                image: image.clone(),
                scope: scope.clone(),
            });
        }
    }

    let mut cases = Vec::with_capacity(selected.len());
    for image in &selected {
        let record = match index.get(image) {
            Some(&i) => &gt.records[i],
            None => return Err(EvalError::UnknownImageRef(image.to_string())),
        };
        let dets = preds
            .images
            .get(*image)
            .map(|d| d.iter().filter(|d| d.score >= cfg.score_floor).collect())
            .unwrap_or_default();
        cases.push(ImageCase::from_record(record, dets));
    }

    let mut report = evaluate_cases(&cases, cfg)?;
    report.meta.bucket = bucket;
    if let Some(m) = manifest {
        report.meta.dataset_version = m.version_tag.to_string();
        report.meta.seed = m.split_ratios.map(|_| m.seed);
    }
    Ok(report)
}
