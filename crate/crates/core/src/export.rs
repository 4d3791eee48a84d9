//! Training artifacts: YOLO segmentation labels, COCO instance JSON and
//! per-nodule mask PNGs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{image_stem, AnnotationRecord, AnnotationSet};
use crate::fsutil::write_atomic;
use crate::geometry::{polygon_bbox, rasterize, shoelace_area, Bitmap, GeometryError, InstanceMask};
use crate::image::{encode_png, ImageError, RasterImage};
use crate::manifest::{Bucket, DatasetManifest};

pub const COCO_CATEGORY_ID: u64 = 1;
pub const CATEGORY_NAME: &str = "nodule";

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("record {0} has no nodules and is not flagged no_finding")]
    NoNodules(String),
    #[error("manifest has no split assignment")]
    UnsplitManifest,
    #[error("manifest entry {0} has no annotation record")]
    MissingRecord(String),
    #[error("{image} nodule {nodule}: vertex outside the image frame")]
    VertexOutOfFrame { image: String, nodule: usize },
    #[error("{image} nodule {nodule}: {source}")]
    Geometry {
        image: String,
        nodule: usize,
        #[source]
        source: GeometryError,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// YOLO segmentation label text: one line per nodule,
/// `class x1 y1 x2 y2 ...` with coordinates divided by the frame size and
/// printed with six decimals. `no_finding` records yield an empty string.
pub fn export_yolo(record: &AnnotationRecord) -> Result<String, ExportError> {
    if record.nodules.is_empty() {
        return if record.no_finding {
            Ok(String::new())
        } else {
            Err(ExportError::NoNodules(record.image_ref.clone()))
        };
    }
    let (w, h) = (record.width as f64, record.height as f64);
    let mut out = String::new();
    for (k, nodule) in record.nodules.iter().enumerate() {
        let _ = write!(out, "{}", nodule.class_id);
        for p in nodule.vertices() {
            let (x, y) = (p.x / w, p.y / h);
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(ExportError::VertexOutOfFrame {
                    image: record.image_ref.clone(),
                    nodule: k,
                });
            }
            let _ = write!(out, " {x:.6} {y:.6}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Vec<Vec<f64>>,
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tirads: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDataset {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("coco serializes");
        s.push('\n');
        s
    }
}

/// COCO instances for one bucket. Image and annotation ids are dense from 1
/// in manifest order; `area` is the polygon's shoelace area and `bbox` its
/// vertex hull as `[x, y, w, h]`.
pub fn export_coco(
    manifest: &DatasetManifest,
    annotations: &AnnotationSet,
    bucket: Bucket,
) -> Result<CocoDataset, ExportError> {
    if !manifest.is_split() {
        return Err(ExportError::UnsplitManifest);
    }
    let index = annotations.index();
    let mut images = Vec::new();
    let mut anns = Vec::new();
    for entry in manifest.bucket_entries(bucket) {
        let record = index
            .get(entry.image_ref.as_str())
            .map(|&i| &annotations.records[i])
            .ok_or_else(|| ExportError::MissingRecord(entry.image_ref.clone()))?;
        let image_id = images.len() as u64 + 1;
        images.push(CocoImage {
            id: image_id,
            file_name: record.image_ref.clone(),
            width: record.width,
            height: record.height,
        });
        for nodule in &record.nodules {
            let bbox = polygon_bbox(nodule);
            anns.push(CocoAnnotation {
                id: anns.len() as u64 + 1,
                image_id,
                category_id: COCO_CATEGORY_ID,
                segmentation: vec![nodule.vertices().iter().flat_map(|p| [p.x, p.y]).collect()],
                bbox: bbox.to_xywh(),
                area: shoelace_area(nodule),
                iscrowd: 0,
                tirads: nodule.tirads.map(|t| t.as_str().to_string()),
            });
        }
    }
    Ok(CocoDataset {
        images,
        annotations: anns,
        categories: vec![CocoCategory {
            id: COCO_CATEGORY_ID,
            name: CATEGORY_NAME.to_string(),
        }],
    })
}

/// Mask file name for nodule `k` (0-based) of an image.
pub fn mask_file_name(image_ref: &str, k: usize) -> String {
    format!("{}_nodule{}.png", image_stem(image_ref), k)
}

/// Rasterizes each nodule independently; overlapping nodules keep their
/// full extent in both masks.
pub fn export_masks(record: &AnnotationRecord) -> Result<Vec<(String, InstanceMask)>, ExportError> {
    record
        .nodules
        .iter()
        .enumerate()
        .map(|(k, nodule)| {
            let mask = rasterize(nodule, record.width, record.height).map_err(|source| {
                ExportError::Geometry {
                    image: record.image_ref.clone(),
                    nodule: k,
                    source,
                }
            })?;
            Ok((mask_file_name(&record.image_ref, k), mask))
        })
        .collect()
}

/// 8-bit grayscale rendering: 255 inside, 0 outside.
pub fn mask_to_raster(mask: &InstanceMask) -> RasterImage {
    let (w, h) = (mask.width(), mask.height());
    let mut samples = vec![0u8; w as usize * h as usize];
    for (x, y) in mask.bits().iter_set() {
        samples[y as usize * w as usize + x as usize] = 255;
    }
    RasterImage::new(w, h, 1, samples).expect("dimensions match")
}

/// Re-binarizes a grayscale mask image at 128.
pub fn raster_to_mask(img: &RasterImage) -> Result<InstanceMask, GeometryError> {
    let mut bits = Bitmap::new(img.width(), img.height());
    for (i, p) in img.pixels().enumerate() {
        if p[0] >= 128 {
            let w = img.width() as usize;
            bits.set((i % w) as u32, (i / w) as u32);
        }
    }
    InstanceMask::from_bitmap(bits)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExportSummary {
    pub images: usize,
    pub label_files: usize,
    pub annotations: usize,
    pub mask_files: usize,
}

fn require_split(manifest: &DatasetManifest) -> Result<(), ExportError> {
    if manifest.is_split() {
        Ok(())
    } else {
        Err(ExportError::UnsplitManifest)
    }
}

fn record_for<'a>(
    annotations: &'a AnnotationSet,
    index: &std::collections::BTreeMap<&str, usize>,
    image_ref: &str,
) -> Result<&'a AnnotationRecord, ExportError> {
    index
        .get(image_ref)
        .map(|&i| &annotations.records[i])
        .ok_or_else(|| ExportError::MissingRecord(image_ref.to_string()))
}

fn file_name(image_ref: &str) -> &str {
    image_ref.rsplit(['/', '\\']).next().unwrap_or(image_ref)
}

/// Writes `images/<bucket>/`, `labels/<bucket>/` and `data.yaml` under
/// `out`. Images are copied byte-for-byte from `image_dir/<image_ref>`.
pub fn write_yolo_dataset(
    out: &Path,
    manifest: &DatasetManifest,
    annotations: &AnnotationSet,
    image_dir: &Path,
    buckets: &[Bucket],
) -> Result<ExportSummary, ExportError> {
    require_split(manifest)?;
    let index = annotations.index();
    let jobs: Vec<(Bucket, &AnnotationRecord)> = buckets
        .iter()
        .flat_map(|&b| manifest.bucket_entries(b).map(move |e| (b, e)))
        .map(|(b, e)| Ok((b, record_for(annotations, &index, &e.image_ref)?)))
        .collect::<Result<_, ExportError>>()?;

    jobs.par_iter().try_for_each(|(bucket, record)| {
        let src = image_dir.join(&record.image_ref);
        let bytes = std::fs::read(&src).map_err(io_err(&src))?;
        let dst = out.join("images").join(bucket.as_str()).join(file_name(&record.image_ref));
        write_atomic(&dst, &bytes).map_err(io_err(&dst))?;
        let label = export_yolo(record)?;
        let dst = out
            .join("labels")
            .join(bucket.as_str())
            .join(format!("{}.txt", record.stem()));
        write_atomic(&dst, label.as_bytes()).map_err(io_err(&dst))
    })?;

    let yaml = format!(
        "path: .\ntrain: images/train\nval: images/val\ntest: images/test\nnc: 1\nnames: ['{CATEGORY_NAME}']\n"
    );
    let dst = out.join("data.yaml");
    write_atomic(&dst, yaml.as_bytes()).map_err(io_err(&dst))?;

    Ok(ExportSummary {
        images: jobs.len(),
        label_files: jobs.len(),
        annotations: jobs.iter().map(|(_, r)| r.nodules.len()).sum(),
        mask_files: 0,
    })
}

/// Writes `annotations/instances_<bucket>.json` for each bucket.
pub fn write_coco_dataset(
    out: &Path,
    manifest: &DatasetManifest,
    annotations: &AnnotationSet,
    buckets: &[Bucket],
) -> Result<ExportSummary, ExportError> {
    let mut summary = ExportSummary::default();
    for &bucket in buckets {
        let coco = export_coco(manifest, annotations, bucket)?;
        summary.images += coco.images.len();
        summary.annotations += coco.annotations.len();
        let dst = out.join("annotations").join(format!("instances_{bucket}.json"));
        write_atomic(&dst, coco.to_json().as_bytes()).map_err(io_err(&dst))?;
    }
    Ok(summary)
}

/// Writes `masks/<stem>_nodule<k>.png` for every nodule of the listed
/// manifest entries (all live entries when `bucket` is `None`).
pub fn write_masks(
    out: &Path,
    manifest: &DatasetManifest,
    annotations: &AnnotationSet,
    bucket: Option<Bucket>,
) -> Result<ExportSummary, ExportError> {
    let index = annotations.index();
    let records: Vec<&AnnotationRecord> = manifest
        .live_entries()
        .filter(|e| bucket.is_none() || e.split == bucket)
        .map(|e| record_for(annotations, &index, &e.image_ref))
        .collect::<Result<_, _>>()?;
    let dir: PathBuf = out.join("masks");
    let counts = records
        .par_iter()
        .map(|record| {
            let masks = export_masks(record)?;
            for (name, mask) in &masks {
                let dst = dir.join(name);
                let png = encode_png(&mask_to_raster(mask))?;
                write_atomic(&dst, &png).map_err(io_err(&dst))?;
            }
            Ok(masks.len())
        })
        .collect::<Result<Vec<_>, ExportError>>()?;
    Ok(ExportSummary {
        images: records.len(),
        mask_files: counts.iter().sum(),
        ..Default::default()
    })
}
