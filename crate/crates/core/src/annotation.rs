//! Canonical annotation JSON (`nodule-annotations/1`) reader, writer and
//! the cross-check against decoded images.
//!
//! ```text
//! { "schema": "nodule-annotations/1",
//!   "records": [ { "image": "<filename>", "patient_id": "<string>",
//!                  "width": <int>, "height": <int>,
//!                  "no_finding": <bool, optional>,
//!                  "excluded": "<reason, optional>",
//!                  "doppler": <bool, optional>,
//!                  "nodules": [ { "polygon": [[x, y], ...],
//!                                 "tirads": "TR1".."TR5" (optional),
//!                                 "attrs": { "<k>": "<v>" } (optional) } ] } ] }
//! ```
//!
//! Fields the schema does not know are kept verbatim (as JSON text) in the
//! record's `source_meta`, keyed `<field>` for record fields and
//! `nodules[k].<field>` for nodule fields, and are written back on emit.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::geometry::{NodulePolygon, Point2D, Tirads};

pub const ANNOTATION_SCHEMA: &str = "nodule-annotations/1";

/// Vertices may overshoot the frame by this much before they count as
/// out of bounds; overshoot within it is clipped.
pub const BOUNDS_TOLERANCE_PX: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnnotationError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("export contains no records")]
    EmptyExport,
}

fn violation(path: impl Into<String>, message: impl Into<String>) -> AnnotationError {
    AnnotationError::SchemaViolation {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub image_ref: String,
    pub patient_id: String,
    pub width: u32,
    pub height: u32,
    pub nodules: Vec<NodulePolygon>,
    pub no_finding: bool,
    pub excluded: Option<String>,
    /// Explicit doppler flag from the labeling platform, when present.
    pub doppler: Option<bool>,
    pub source_meta: BTreeMap<String, String>,
}

impl AnnotationRecord {
    /// File stem of `image_ref` (no directories, no extension).
    pub fn stem(&self) -> &str {
        image_stem(&self.image_ref)
    }
}

pub fn image_stem(image_ref: &str) -> &str {
    let name = image_ref.rsplit(['/', '\\']).next().unwrap_or(image_ref);
    match name.rfind('.') {
        Some(i) if i > 0 => &name[..i],
        _ => name,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub records: Vec<AnnotationRecord>,
    pub label_schema_version: String,
}

impl AnnotationSet {
    pub fn new(records: Vec<AnnotationRecord>) -> Self {
        Self {
            records,
            label_schema_version: ANNOTATION_SCHEMA.to_string(),
        }
    }

    pub fn nodule_count(&self) -> usize {
        self.records.iter().map(|r| r.nodules.len()).sum()
    }

    pub fn get(&self, image_ref: &str) -> Option<&AnnotationRecord> {
        self.records.iter().find(|r| r.image_ref == image_ref)
    }

    /// Index from image_ref to record position.
    pub fn index(&self) -> BTreeMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.image_ref.as_str(), i))
            .collect()
    }
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value, AnnotationError> {
    obj.get(key)
        .ok_or_else(|| violation(format!("{path}.{key}"), "missing required field"))
}

fn as_string(v: &Value, path: &str) -> Result<String, AnnotationError> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| violation(path, "expected string"))
}

fn as_dim(v: &Value, path: &str) -> Result<u32, AnnotationError> {
    v.as_u64()
        .filter(|&n| n > 0 && n <= u32::MAX as u64)
        .map(|n| n as u32)
        .ok_or_else(|| violation(path, "expected positive integer"))
}

fn as_bool(v: &Value, path: &str) -> Result<bool, AnnotationError> {
    v.as_bool().ok_or_else(|| violation(path, "expected boolean"))
}

fn parse_polygon(v: &Value, path: &str) -> Result<Vec<Point2D>, AnnotationError> {
    let arr = v.as_array().ok_or_else(|| violation(path, "expected array of points"))?;
    arr.iter()
        .enumerate()
        .map(|(i, p)| {
            let pp = format!("{path}[{i}]");
            match p.as_array().map(Vec::as_slice) {
                Some([x, y]) => match (x.as_f64(), y.as_f64()) {
                    (Some(x), Some(y)) => Ok(Point2D::new(x, y)),
                    _ => Err(violation(pp, "expected numeric [x, y]")),
                },
                _ => Err(violation(pp, "expected [x, y] pair")),
            }
        })
        .collect()
}

fn parse_nodule(
    v: &Value,
    path: &str,
    k: usize,
    meta: &mut BTreeMap<String, String>,
) -> Result<NodulePolygon, AnnotationError> {
    let obj = v.as_object().ok_or_else(|| violation(path, "expected object"))?;
    let poly_path = format!("{path}.polygon");
    let vertices = parse_polygon(field(obj, "polygon", path)?, &poly_path)?;
    let mut nodule =
        NodulePolygon::new(vertices).map_err(|e| violation(poly_path, e.to_string()))?;
    for (key, value) in obj {
        match key.as_str() {
            "polygon" => {}
            "tirads" => match value.as_str().and_then(Tirads::parse) {
                Some(t) => nodule.tirads = Some(t),
                None => {
                    meta.insert(format!("nodules[{k}].tirads"), value.to_string());
                }
            },
            "attrs" => {
                let attrs = value
                    .as_object()
                    .ok_or_else(|| violation(format!("{path}.attrs"), "expected object"))?;
                for (ak, av) in attrs {
                    let s = as_string(av, &format!("{path}.attrs.{ak}"))?;
                    nodule.attrs.insert(ak.clone(), s);
                }
            }
            other => {
                meta.insert(format!("nodules[{k}].{other}"), value.to_string());
            }
        }
    }
    Ok(nodule)
}

fn parse_record(v: &Value, path: &str) -> Result<AnnotationRecord, AnnotationError> {
    let obj = v.as_object().ok_or_else(|| violation(path, "expected object"))?;
    let image_ref = as_string(field(obj, "image", path)?, &format!("{path}.image"))?;
    if image_ref.is_empty() {
        return Err(violation(format!("{path}.image"), "empty image reference"));
    }
    let patient_id = as_string(field(obj, "patient_id", path)?, &format!("{path}.patient_id"))?;
    let width = as_dim(field(obj, "width", path)?, &format!("{path}.width"))?;
    let height = as_dim(field(obj, "height", path)?, &format!("{path}.height"))?;
    let no_finding = match obj.get("no_finding") {
        Some(v) => as_bool(v, &format!("{path}.no_finding"))?,
        None => false,
    };
    let excluded = match obj.get("excluded") {
        Some(v) => Some(as_string(v, &format!("{path}.excluded"))?),
        None => None,
    };
    let doppler = match obj.get("doppler") {
        Some(v) => Some(as_bool(v, &format!("{path}.doppler"))?),
        None => None,
    };

    let mut source_meta = BTreeMap::new();
    let nodules_path = format!("{path}.nodules");
    let nodules_json = field(obj, "nodules", path)?
        .as_array()
        .ok_or_else(|| violation(&nodules_path, "expected array"))?;
    let nodules = nodules_json
        .iter()
        .enumerate()
        .map(|(k, n)| parse_nodule(n, &format!("{nodules_path}[{k}]"), k, &mut source_meta))
        .collect::<Result<Vec<_>, _>>()?;
    if nodules.is_empty() && !no_finding {
        return Err(violation(
            nodules_path,
            "no nodules and record not flagged no_finding",
        ));
    }
    if !nodules.is_empty() && no_finding {
        return Err(violation(
            format!("{path}.no_finding"),
            "record flagged no_finding but has nodules",
        ));
    }

    for (key, value) in obj {
        if !matches!(
            key.as_str(),
            "image" | "patient_id" | "width" | "height" | "no_finding" | "excluded" | "doppler"
                | "nodules"
        ) {
            source_meta.insert(key.clone(), value.to_string());
        }
    }

    Ok(AnnotationRecord {
        image_ref,
        patient_id: patient_id.trim().to_string(),
        width,
        height,
        nodules,
        no_finding,
        excluded,
        doppler,
        source_meta,
    })
}

/// Parses a canonical annotation export.
pub fn parse_annotations(json_bytes: &[u8]) -> Result<AnnotationSet, AnnotationError> {
    let root: Value = serde_json::from_slice(json_bytes)
        .map_err(|e| AnnotationError::MalformedJson(e.to_string()))?;
    let obj = root.as_object().ok_or_else(|| violation("$", "expected object"))?;
    let schema = as_string(field(obj, "schema", "$")?, "$.schema")?;
    if schema != ANNOTATION_SCHEMA {
        return Err(violation(
            "$.schema",
            format!("expected {ANNOTATION_SCHEMA}, got {schema}"),
        ));
    }
    let records_json = field(obj, "records", "$")?
        .as_array()
        .ok_or_else(|| violation("$.records", "expected array"))?;
    if records_json.is_empty() {
        return Err(AnnotationError::EmptyExport);
    }
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(records_json.len());
    for (i, r) in records_json.iter().enumerate() {
        let path = format!("$.records[{i}]");
        let record = parse_record(r, &path)?;
        if !seen.insert(record.image_ref.clone()) {
            return Err(violation(
                format!("{path}.image"),
                format!("duplicate image reference {}", record.image_ref),
            ));
        }
        records.push(record);
    }
    Ok(AnnotationSet {
        records,
        label_schema_version: schema,
    })
}

fn record_to_value(r: &AnnotationRecord) -> Value {
    let mut nodules: Vec<Map<String, Value>> = r
        .nodules
        .iter()
        .map(|n| {
            let mut m = Map::new();
            let pts: Vec<Value> = n
                .vertices()
                .iter()
                .map(|p| Value::from(vec![p.x, p.y]))
                .collect();
            m.insert("polygon".into(), Value::Array(pts));
            if let Some(t) = n.tirads {
                m.insert("tirads".into(), Value::from(t.as_str()));
            }
            if !n.attrs.is_empty() {
                let attrs: Map<String, Value> = n
                    .attrs
                    .iter()
                    .map(|(k, v)| (k.clone(), Value::from(v.as_str())))
                    .collect();
                m.insert("attrs".into(), Value::Object(attrs));
            }
            m
        })
        .collect();

    let mut obj = Map::new();
    for (key, raw) in &r.source_meta {
        let (target, name) = match key
            .strip_prefix("nodules[")
            .and_then(|rest| rest.split_once("]."))
            .and_then(|(k, name)| Some((k.parse::<usize>().ok()?, name)))
        {
            Some((k, name)) if k < nodules.len() => (&mut nodules[k], name),
            _ => (&mut obj, key.as_str()),
        };
        // Captured with Value::to_string, so these always re-parse.
        if let Ok(v) = serde_json::from_str::<Value>(raw) {
            target.insert(name.to_string(), v);
        }
    }
    obj.insert("image".into(), Value::from(r.image_ref.as_str()));
    obj.insert("patient_id".into(), Value::from(r.patient_id.as_str()));
    obj.insert("width".into(), Value::from(r.width));
    obj.insert("height".into(), Value::from(r.height));
    if r.no_finding {
        obj.insert("no_finding".into(), Value::Bool(true));
    }
    if let Some(reason) = &r.excluded {
        obj.insert("excluded".into(), Value::from(reason.as_str()));
    }
    if let Some(d) = r.doppler {
        obj.insert("doppler".into(), Value::Bool(d));
    }
    obj.insert(
        "nodules".into(),
        Value::Array(nodules.into_iter().map(Value::Object).collect()),
    );
    Value::Object(obj)
}

pub fn annotations_to_value(set: &AnnotationSet) -> Value {
    let mut root = Map::new();
    root.insert("schema".into(), Value::from(set.label_schema_version.as_str()));
    root.insert(
        "records".into(),
        Value::Array(set.records.iter().map(record_to_value).collect()),
    );
    Value::Object(root)
}

/// Serializes to the canonical schema (pretty-printed, stable key order).
pub fn emit_annotations(set: &AnnotationSet) -> String {
    let mut s = serde_json::to_string_pretty(&annotations_to_value(set))
        .expect("serializing a JSON value cannot fail");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "category", rename_all = "snake_case")]
pub enum ValidationIssue {
    /// Annotation references an image that was not found.
    MissingImage { image: String },
    /// Image present on disk with no annotation record.
    MissingAnnotation { image: String },
    /// Vertex beyond the frame by more than the tolerance.
    OutOfBounds {
        image: String,
        nodule: usize,
        vertex: usize,
        x: f64,
        y: f64,
    },
    DimensionMismatch {
        image: String,
        annotated: (u32, u32),
        actual: (u32, u32),
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
    /// Number of vertices pulled back onto the frame edge.
    pub clipped_vertices: usize,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }

    /// Image refs with at least one issue.
    pub fn flagged_images(&self) -> BTreeSet<&str> {
        self.issues
            .iter()
            .map(|i| match i {
                ValidationIssue::MissingImage { image }
                | ValidationIssue::MissingAnnotation { image }
                | ValidationIssue::OutOfBounds { image, .. }
                | ValidationIssue::DimensionMismatch { image, .. } => image.as_str(),
            })
            .collect()
    }
}

/// Cross-checks annotations against decoded image dimensions
/// (`image_ref -> (width, height)`). Returns the report and a copy of the
/// set in which vertices overshooting the frame by at most
/// [`BOUNDS_TOLERANCE_PX`] are clipped onto it. No record is removed.
pub fn validate_against_images(
    set: &AnnotationSet,
    images: &BTreeMap<String, (u32, u32)>,
) -> (ValidationReport, AnnotationSet) {
    let mut report = ValidationReport::default();
    let mut out = set.clone();

    for record in &mut out.records {
        let (w, h) = match images.get(&record.image_ref) {
            Some(&dims) => {
                if dims != (record.width, record.height) {
                    report.issues.push(ValidationIssue::DimensionMismatch {
                        image: record.image_ref.clone(),
                        annotated: (record.width, record.height),
                        actual: dims,
                    });
                }
                dims
            }
            None => {
                report.issues.push(ValidationIssue::MissingImage {
                    image: record.image_ref.clone(),
                });
                (record.width, record.height)
            }
        };
        let (wf, hf) = (w as f64, h as f64);
        let in_tolerance = |p: &Point2D| {
            p.x >= -BOUNDS_TOLERANCE_PX
                && p.x <= wf + BOUNDS_TOLERANCE_PX
                && p.y >= -BOUNDS_TOLERANCE_PX
                && p.y <= hf + BOUNDS_TOLERANCE_PX
        };

        for (k, nodule) in record.nodules.iter_mut().enumerate() {
            let mut bad = false;
            for (v, p) in nodule.vertices().iter().enumerate() {
                if !in_tolerance(p) {
                    bad = true;
                    report.issues.push(ValidationIssue::OutOfBounds {
                        image: record.image_ref.clone(),
                        nodule: k,
                        vertex: v,
                        x: p.x,
                        y: p.y,
                    });
                }
            }
            if bad {
                continue;
            }
            let mut clipped = 0;
            let verts: Vec<Point2D> = nodule
                .vertices()
                .iter()
                .map(|p| {
                    let q = Point2D::new(p.x.clamp(0.0, wf), p.y.clamp(0.0, hf));
                    if q != *p {
                        clipped += 1;
                    }
                    q
                })
                .collect();
            if clipped > 0 {
                // Clipping can flatten a sliver polygon; keep the original then.
                if let Ok(c) = nodule.with_vertices(verts) {
                    *nodule = c;
                    report.clipped_vertices += clipped;
                }
            }
        }
    }

    let annotated: BTreeSet<&str> = set.records.iter().map(|r| r.image_ref.as_str()).collect();
    for image in images.keys() {
        if !annotated.contains(image.as_str()) {
            report.issues.push(ValidationIssue::MissingAnnotation {
                image: image.clone(),
            });
        }
    }
    (report, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = r#"{
      "schema": "nodule-annotations/1",
      "records": [
        { "image": "p1_0.png", "patient_id": "P1", "width": 640, "height": 480,
          "nodules": [ { "polygon": [[64,48],[128,48],[128,96],[64,96]],
                         "tirads": "TR3", "attrs": {"shape": "oval"} } ] }
      ]
    }"#;

    #[test]
    fn single_record_fields() {
        let set = parse_annotations(ONE.as_bytes()).unwrap();
        assert_eq!(set.records.len(), 1);
        let r = &set.records[0];
        assert_eq!(r.image_ref, "p1_0.png");
        assert_eq!(r.patient_id, "P1");
        assert_eq!((r.width, r.height), (640, 480));
        assert_eq!(r.nodules.len(), 1);
        let n = &r.nodules[0];
        assert_eq!(n.tirads, Some(Tirads::TR3));
        assert_eq!(n.attrs.get("shape").map(String::as_str), Some("oval"));
        assert_eq!(n.vertices().len(), 4);
        assert_eq!(n.vertices()[2], Point2D::new(128.0, 96.0));
        assert!(!r.no_finding && r.excluded.is_none() && r.doppler.is_none());
        assert_eq!(set.label_schema_version, ANNOTATION_SCHEMA);
    }

    #[test]
    fn two_point_polygon_is_violation_at_path() {
        let json = ONE.replace("[[64,48],[128,48],[128,96],[64,96]]", "[[64,48],[128,48]]");
        match parse_annotations(json.as_bytes()) {
            Err(AnnotationError::SchemaViolation { path, .. }) => {
                assert_eq!(path, "$.records[0].nodules[0].polygon")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_records() {
        let json = r#"{"schema": "nodule-annotations/1", "records": []}"#;
        assert_eq!(
            parse_annotations(json.as_bytes()),
            Err(AnnotationError::EmptyExport)
        );
    }

    #[test]
    fn malformed_json_and_missing_fields() {
        assert!(matches!(
            parse_annotations(b"{not json"),
            Err(AnnotationError::MalformedJson(_))
        ));
        let json = ONE.replace(r#""patient_id": "P1","#, "");
        assert!(matches!(
            parse_annotations(json.as_bytes()),
            Err(AnnotationError::SchemaViolation { path, .. }) if path == "$.records[0].patient_id"
        ));
        let json = ONE.replace("nodule-annotations/1", "other/2");
        assert!(matches!(
            parse_annotations(json.as_bytes()),
            Err(AnnotationError::SchemaViolation { path, .. }) if path == "$.schema"
        ));
    }

    #[test]
    fn empty_nodules_need_no_finding_flag() {
        let base = r#"{"schema": "nodule-annotations/1", "records": [
            {"image": "a.png", "patient_id": "P", "width": 4, "height": 4, FLAG "nodules": []}]}"#;
        assert!(parse_annotations(base.replace("FLAG", "").as_bytes()).is_err());
        let set = parse_annotations(base.replace("FLAG", r#""no_finding": true,"#).as_bytes()).unwrap();
        assert!(set.records[0].no_finding);
    }

    #[test]
    fn duplicate_image_rejected() {
        let json = r#"{"schema": "nodule-annotations/1", "records": [
            {"image": "a.png", "patient_id": "P", "width": 4, "height": 4, "no_finding": true, "nodules": []},
            {"image": "a.png", "patient_id": "Q", "width": 4, "height": 4, "no_finding": true, "nodules": []}]}"#;
        assert!(matches!(
            parse_annotations(json.as_bytes()),
            Err(AnnotationError::SchemaViolation { path, .. }) if path == "$.records[1].image"
        ));
    }

    #[test]
    fn unknown_fields_preserved_through_emit() {
        let json = r#"{"schema": "nodule-annotations/1", "records": [
            {"image": "a.png", "patient_id": "P", "width": 10, "height": 10,
             "platform_id": {"x": [1, 2]},
             "nodules": [{"polygon": [[1,1],[5,1],[5,5]], "tirads": "TR9", "reviewer": "dr"}]}]}"#;
        let set = parse_annotations(json.as_bytes()).unwrap();
        let r = &set.records[0];
        assert_eq!(r.nodules[0].tirads, None);
        assert_eq!(r.source_meta.get("nodules[0].tirads").unwrap(), "\"TR9\"");
        assert_eq!(r.source_meta.get("platform_id").unwrap(), r#"{"x":[1,2]}"#);
        let again = parse_annotations(emit_annotations(&set).as_bytes()).unwrap();
        assert_eq!(again, set);
    }

    #[test]
    fn stems() {
        assert_eq!(image_stem("dir/p1_0.png"), "p1_0");
        assert_eq!(image_stem("p1_0"), "p1_0");
        assert_eq!(image_stem(".hidden"), ".hidden");
    }

    fn dims(entries: &[(&str, u32, u32)]) -> BTreeMap<String, (u32, u32)> {
        entries.iter().map(|(n, w, h)| (n.to_string(), (*w, *h))).collect()
    }

    #[test]
    fn matching_set_has_empty_report() {
        let set = parse_annotations(ONE.as_bytes()).unwrap();
        let (report, out) = validate_against_images(&set, &dims(&[("p1_0.png", 640, 480)]));
        assert!(report.is_clean());
        assert_eq!(out, set);
    }

    #[test]
    fn missing_image_and_missing_annotation() {
        let set = parse_annotations(ONE.as_bytes()).unwrap();
        let (report, out) = validate_against_images(&set, &dims(&[("x.png", 640, 480)]));
        assert_eq!(
            report.issues,
            vec![
                ValidationIssue::MissingImage { image: "p1_0.png".into() },
                ValidationIssue::MissingAnnotation { image: "x.png".into() },
            ]
        );
        assert_eq!(out.records.len(), 1);
    }

    #[test]
    fn tolerance_boundary() {
        let json = ONE.replace("[128,48],[128,96]", "[640.4,48],[128,96]");
        let set = parse_annotations(json.as_bytes()).unwrap();
        let (report, out) = validate_against_images(&set, &dims(&[("p1_0.png", 640, 480)]));
        assert!(report.is_clean());
        assert_eq!(report.clipped_vertices, 1);
        assert_eq!(out.records[0].nodules[0].vertices()[1].x, 640.0);

        let json = ONE.replace("[128,48],[128,96]", "[650,48],[128,96]");
        let set = parse_annotations(json.as_bytes()).unwrap();
        let (report, out) = validate_against_images(&set, &dims(&[("p1_0.png", 640, 480)]));
        assert_eq!(
            report.issues,
            vec![ValidationIssue::OutOfBounds {
                image: "p1_0.png".into(),
                nodule: 0,
                vertex: 1,
                x: 650.0,
                y: 48.0
            }]
        );
        // flagged, not dropped or altered
        assert_eq!(out, set);
    }

    #[test]
    fn dimension_mismatch_reported() {
        let set = parse_annotations(ONE.as_bytes()).unwrap();
        let (report, _) = validate_against_images(&set, &dims(&[("p1_0.png", 320, 240)]));
        assert!(matches!(
            report.issues.as_slice(),
            [ValidationIssue::DimensionMismatch { actual: (320, 240), .. }, ..]
        ));
    }
}
