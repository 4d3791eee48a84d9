//! Prediction inputs: the `nodule-predictions/1` JSON file and YOLO
//! segmentation label text.

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};
use thiserror::Error;

use super::Detection;
use crate::geometry::{NodulePolygon, Point2D};

pub const PREDICTION_SCHEMA: &str = "nodule-predictions/1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictionError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("label line {line}: {reason}")]
pub struct LabelError {
    pub line: usize,
    pub reason: String,
}

fn violation(path: impl Into<String>, message: impl Into<String>) -> PredictionError {
    PredictionError::SchemaViolation {
        path: path.into(),
        message: message.into(),
    }
}

/// Detections grouped by image. Images listed with no detections are kept
/// so that "predicted nothing" stays distinguishable from "not predicted".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSet {
    pub images: BTreeMap<String, Vec<Detection>>,
}

impl PredictionSet {
    pub fn detection_count(&self) -> usize {
        self.images.values().map(Vec::len).sum()
    }

    pub fn to_value(&self) -> Value {
        let predictions: Vec<Value> = self
            .images
            .iter()
            .map(|(image, dets)| {
                let dets: Vec<Value> = dets
                    .iter()
                    .map(|d| {
                        let poly: Vec<Value> = d
                            .polygon
                            .vertices()
                            .iter()
                            .map(|p| json!([p.x, p.y]))
                            .collect();
                        json!({ "class_id": d.polygon.class_id, "score": d.score, "polygon": poly })
                    })
                    .collect();
                json!({ "image": image, "detections": dets })
            })
            .collect();
        json!({ "schema": PREDICTION_SCHEMA, "predictions": predictions })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_value()).expect("value serializes");
        s.push('\n');
        s
    }
}

fn get<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value, PredictionError> {
    obj.get(key)
        .ok_or_else(|| violation(format!("{path}.{key}"), "missing required field"))
}

fn parse_detection(v: &Value, image: &str, path: &str) -> Result<Detection, PredictionError> {
    let obj = v.as_object().ok_or_else(|| violation(path, "expected object"))?;
    let class_id = get(obj, "class_id", path)?
        .as_u64()
        .filter(|&c| c <= u32::MAX as u64)
        .ok_or_else(|| violation(format!("{path}.class_id"), "expected non-negative integer"))?
        as u32;
    let score = get(obj, "score", path)?
        .as_f64()
        .filter(|s| (0.0..=1.0).contains(s))
        .ok_or_else(|| violation(format!("{path}.score"), "expected number in [0, 1]"))?;
    let poly_path = format!("{path}.polygon");
    let pts = get(obj, "polygon", path)?
        .as_array()
        .ok_or_else(|| violation(&poly_path, "expected array of points"))?;
    let vertices = pts
        .iter()
        .enumerate()
        .map(|(i, p)| match p.as_array().map(Vec::as_slice) {
            Some([x, y]) => match (x.as_f64(), y.as_f64()) {
                (Some(x), Some(y)) => Ok(Point2D::new(x, y)),
                _ => Err(violation(format!("{poly_path}[{i}]"), "expected numeric [x, y]")),
            },
            _ => Err(violation(format!("{poly_path}[{i}]"), "expected [x, y] pair")),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let polygon = NodulePolygon::with_class(vertices, class_id)
        .map_err(|e| violation(&poly_path, e.to_string()))?;
    Ok(Detection {
        image_ref: image.to_string(),
        score,
        polygon,
    })
}

pub fn parse_predictions(bytes: &[u8]) -> Result<PredictionSet, PredictionError> {
    let root: Value =
        serde_json::from_slice(bytes).map_err(|e| PredictionError::MalformedJson(e.to_string()))?;
    let obj = root.as_object().ok_or_else(|| violation("$", "expected object"))?;
    let schema = get(obj, "schema", "$")?.as_str().unwrap_or_default();
    if schema != PREDICTION_SCHEMA {
        return Err(violation("$.schema", format!("expected {PREDICTION_SCHEMA}")));
    }
    let entries = get(obj, "predictions", "$")?
        .as_array()
        .ok_or_else(|| violation("$.predictions", "expected array"))?;
    let mut set = PredictionSet::default();
    for (i, e) in entries.iter().enumerate() {
        let path = format!("$.predictions[{i}]");
        let eo = e.as_object().ok_or_else(|| violation(&path, "expected object"))?;
        let image = get(eo, "image", &path)?
            .as_str()
            .ok_or_else(|| violation(format!("{path}.image"), "expected string"))?;
        let dets_json = get(eo, "detections", &path)?
            .as_array()
            .ok_or_else(|| violation(format!("{path}.detections"), "expected array"))?;
        let dets = dets_json
            .iter()
            .enumerate()
            .map(|(k, d)| parse_detection(d, image, &format!("{path}.detections[{k}]")))
            .collect::<Result<Vec<_>, _>>()?;
        if set.images.insert(image.to_string(), dets).is_some() {
            return Err(violation(format!("{path}.image"), format!("duplicate image {image}")));
        }
    }
    Ok(set)
}

/// One parsed YOLO segmentation line.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelLine {
    pub polygon: NodulePolygon,
    /// Trailing confidence, present when the coordinate count is odd.
    pub score: Option<f64>,
}

/// Reads YOLO segmentation label text (`class x1 y1 ... [score]`) and
/// scales coordinates back to pixels. Blank lines are skipped.
pub fn read_yolo_labels(text: &str, width: u32, height: u32) -> Result<Vec<LabelLine>, LabelError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |reason: String| LabelError { line, reason };
        let mut fields = raw.split_whitespace();
        let Some(class) = fields.next() else { continue };
        let class_id: u32 = class
            .parse()
            .map_err(|_| err(format!("bad class id {class:?}")))?;
        let mut nums = fields
            .map(|f| f.parse::<f64>().map_err(|_| err(format!("bad number {f:?}"))))
            .collect::<Result<Vec<f64>, _>>()?;
        let score = if nums.len() % 2 == 1 { nums.pop() } else { None };
        if let Some(s) = score {
            if !(0.0..=1.0).contains(&s) {
                return Err(err(format!("confidence {s} outside [0, 1]")));
            }
        }
        if nums.len() < 6 {
            return Err(err(format!("{} coordinates, need at least 6", nums.len())));
        }
        if let Some(v) = nums.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(err(format!("coordinate {v} outside [0, 1]")));
        }
        let vertices = nums
            .chunks_exact(2)
            .map(|c| Point2D::new(c[0] * width as f64, c[1] * height as f64))
            .collect();
        let polygon = NodulePolygon::with_class(vertices, class_id).map_err(|e| err(e.to_string()))?;
        out.push(LabelLine { polygon, score });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_minimal_file() {
        let json = r#"{"schema": "nodule-predictions/1", "predictions": [
            {"image": "a.png", "detections": [{"class_id": 0, "score": 0.9, "polygon": [[0,0],[4,0],[0,3]]}]},
            {"image": "b.png", "detections": []}]}"#;
        let set = parse_predictions(json.as_bytes()).unwrap();
        assert_eq!(set.images.len(), 2);
        assert_eq!(set.detection_count(), 1);
        assert_eq!(set.images["a.png"][0].score, 0.9);
        let again = parse_predictions(set.to_json().as_bytes()).unwrap();
        assert_eq!(again, set);
    }

    #[test]
    fn bad_score_is_violation() {
        let json = r#"{"schema": "nodule-predictions/1", "predictions": [
            {"image": "a.png", "detections": [{"class_id": 0, "score": 1.5, "polygon": [[0,0],[4,0],[0,3]]}]}]}"#;
        assert!(matches!(
            parse_predictions(json.as_bytes()),
            Err(PredictionError::SchemaViolation { path, .. }) if path == "$.predictions[0].detections[0].score"
        ));
    }

    #[test]
    fn yolo_reader_with_and_without_score() {
        let lines = read_yolo_labels("0 0.1 0.1 0.2 0.1 0.2 0.2 0.1 0.2\n\n0 0.1 0.1 0.2 0.1 0.2 0.2 0.97\n", 640, 480).unwrap();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].score, None);
        assert_eq!(lines[0].polygon.vertices()[0], Point2D::new(64.0, 48.0));
        assert_eq!(lines[0].polygon.vertices()[2], Point2D::new(128.0, 96.0));
        assert_eq!(lines[1].score, Some(0.97));
        assert_eq!(lines[1].polygon.vertices().len(), 3);
    }

    #[test]
    fn yolo_reader_errors_carry_line_numbers() {
        let e = read_yolo_labels("0 0.1 0.1 0.2 0.1 0.2 0.2\n0 0.1 0.2\n", 10, 10).unwrap_err();
        assert_eq!(e.line, 2);
        let e = read_yolo_labels("x 0.1 0.1 0.2 0.1 0.2 0.2\n", 10, 10).unwrap_err();
        assert_eq!(e.line, 1);
        assert!(read_yolo_labels("0 0.1 0.1 1.2 0.1 0.2 0.2\n", 10, 10).is_err());
    }
}
