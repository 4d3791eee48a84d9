//! Thyroid-nodule ultrasound dataset toolkit: DICOM ingest, polygon
//! annotations, patient-level splits, YOLO/COCO/mask export, and
//! instance-segmentation scoring.

pub mod annotation;
pub mod dicom;
pub mod eval;
pub mod export;
pub mod fsutil;
pub mod geometry;
pub mod image;
pub mod manifest;
pub mod report;
pub mod synth;

pub use annotation::{AnnotationRecord, AnnotationSet};
pub use eval::{evaluate, Detection, EvalConfig, EvalReport, MatchKind};
pub use geometry::{BoundingBox, InstanceMask, NodulePolygon, Point2D};
pub use manifest::{Bucket, DatasetManifest, Variant};
