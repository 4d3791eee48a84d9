//! Synthetic speckle frames with elliptical nodules, and perturbed
//! prediction sets whose errors are planted and counted exactly.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationRecord, AnnotationSet};
use crate::eval::{Detection, PredictionSet};
use crate::geometry::{
    box_iou, mask_iou, polygon_bbox, rasterize, BoundingBox, NodulePolygon, Point2D, Tirads,
};
use crate::image::{write_png, ImageError, RasterImage};
use crate::manifest::{build_manifest, detect_doppler, DatasetManifest, DopplerParams, ImageMeta, ManifestError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("{image}: could not place nodule {nodule} without overlap; frame too crowded")]
    Crowded { image: String, nodule: usize },
    #[error("{image}: no room for a false positive disjoint from the ground truth")]
    NoRoomForSpurious { image: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Inclusive range `[lo, hi]`.
pub type Span<T> = (T, T);

fn check_span<T: PartialOrd + std::fmt::Debug>(name: &str, s: &Span<T>) -> Result<(), SynthError> {
    if s.0 > s.1 {
        return Err(SynthError::InvalidConfig(format!("{name} range {s:?} is empty")));
    }
    Ok(())
}

fn check_fraction(name: &str, v: f64) -> Result<(), SynthError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(SynthError::InvalidConfig(format!("{name} {v} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub images_per_patient: Span<u32>,
    pub width: Span<u32>,
    pub height: Span<u32>,
    pub nodules_per_image: Span<u32>,
    /// Share of images generated without nodules.
    pub no_finding_rate: f64,
    /// Ellipse semi-axis lengths in pixels.
    pub axis_px: Span<f64>,
    /// Mean background intensity.
    pub background: f64,
    /// How much darker nodules are than the background.
    pub contrast: f64,
    /// Log-normal sigma of the multiplicative speckle.
    pub speckle: f64,
    pub doppler_fraction: f64,
    pub polygon_vertices: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 100,
            images_per_patient: (1, 3),
            width: (192, 256),
            height: (160, 224),
            nodules_per_image: (1, 2),
            no_finding_rate: 0.0,
            axis_px: (8.0, 24.0),
            background: 120.0,
            contrast: 60.0,
            speckle: 0.25,
            doppler_fraction: 0.05,
            polygon_vertices: 24,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_patients == 0 {
            return Err(SynthError::InvalidConfig("n_patients must be positive".into()));
        }
        check_span("images_per_patient", &self.images_per_patient)?;
        check_span("width", &self.width)?;
        check_span("height", &self.height)?;
        check_span("nodules_per_image", &self.nodules_per_image)?;
        check_span("axis_px", &self.axis_px)?;
        if self.images_per_patient.0 == 0 {
            return Err(SynthError::InvalidConfig("images_per_patient must start at 1".into()));
        }
        if self.nodules_per_image.0 == 0 && self.no_finding_rate == 0.0 {
            return Err(SynthError::InvalidConfig(
                "nodules_per_image may only include 0 when no_finding_rate is set".into(),
            ));
        }
        if self.width.0 < 16 || self.height.0 < 16 {
            return Err(SynthError::InvalidConfig("frames must be at least 16x16".into()));
        }
        if !(self.axis_px.0 >= 1.0) {
            return Err(SynthError::InvalidConfig("axis_px must be at least 1".into()));
        }
        if 2.0 * self.axis_px.1 + 4.0 > self.width.0.min(self.height.0) as f64 {
            return Err(SynthError::InvalidConfig(format!(
                "nodule axis {} does not fit a {}x{} frame",
                self.axis_px.1, self.width.0, self.height.0
            )));
        }
        check_fraction("no_finding_rate", self.no_finding_rate)?;
        check_fraction("doppler_fraction", self.doppler_fraction)?;
        if !(0.0..=255.0).contains(&self.background) || !(0.0..=self.background).contains(&self.contrast) {
            return Err(SynthError::InvalidConfig("background/contrast outside 8-bit range".into()));
        }
        if !(self.speckle >= 0.0 && self.speckle.is_finite()) {
            return Err(SynthError::InvalidConfig("speckle must be finite and non-negative".into()));
        }
        if self.polygon_vertices < 3 {
            return Err(SynthError::InvalidConfig("polygon_vertices must be at least 3".into()));
        }
        Ok(())
    }
}

/// Mixes a master seed with an index into an independent stream seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(splitmix(master) ^ index)
}

fn draw<T: rand::distributions::uniform::SampleUniform + PartialOrd + Copy>(rng: &mut ChaCha8Rng, s: Span<T>) -> T {
    rng.gen_range(s.0..=s.1)
}

struct ImagePlan {
    image_ref: String,
    patient_id: String,
    doppler: bool,
}

fn plan(cfg: &SynthConfig) -> Vec<ImagePlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for p in 0..cfg.n_patients {
        let n = draw(&mut rng, cfg.images_per_patient);
        for _ in 0..n {
            out.push(ImagePlan {
                image_ref: format!("synth_{:06}.png", out.len()),
                patient_id: format!("SP{p:05}"),
                doppler: false,
            });
        }
    }
    let n_doppler = (cfg.doppler_fraction * out.len() as f64).round() as usize;
    let mut idx: Vec<usize> = (0..out.len()).collect();
    idx.shuffle(&mut rng);
    for &i in &idx[..n_doppler] {
        out[i].doppler = true;
    }
    out
}

/// Regular sampling of a rotated ellipse boundary.
pub fn ellipse_polygon(center: Point2D, a: f64, b: f64, theta: f64, n: usize) -> NodulePolygon {
    let (s, c) = theta.sin_cos();
    let vertices = (0..n)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / n as f64;
            let (ex, ey) = (a * t.cos(), b * t.sin());
            Point2D::new(center.x + c * ex - s * ey, center.y + s * ex + c * ey)
        })
        .collect();
    NodulePolygon::new(vertices).expect("ellipse with positive axes is a valid polygon")
}

fn frame_box(w: u32, h: u32) -> BoundingBox {
    BoundingBox::new(0.0, 0.0, w as f64, h as f64).expect("non-empty frame")
}

fn disjoint(b: &BoundingBox, others: &[BoundingBox], gap: f64) -> bool {
    let grown = b.expanded(gap);
    others.iter().all(|o| grown.intersection_area(o) <= 0.0)
}

const PLACEMENT_ATTEMPTS: usize = 200;

fn place_nodules(cfg: &SynthConfig, rng: &mut ChaCha8Rng, w: u32, h: u32, n: u32, image: &str) -> Result<Vec<NodulePolygon>, SynthError> {
    let inner = frame_box(w, h).expanded(-1.0);
    let mut placed: Vec<NodulePolygon> = Vec::new();
    let mut boxes: Vec<BoundingBox> = Vec::new();
    for k in 0..n as usize {
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let a = draw(rng, cfg.axis_px);
            let b = draw(rng, (cfg.axis_px.0, a));
            let theta = rng.gen_range(0.0..PI);
            let center = Point2D::new(
                rng.gen_range(a + 1.0..w as f64 - a - 1.0),
                rng.gen_range(a + 1.0..h as f64 - a - 1.0),
            );
            let mut poly = ellipse_polygon(center, a, b, theta, cfg.polygon_vertices);
            let bbox = polygon_bbox(&poly);
            if !inner.contains_box(&bbox) || !disjoint(&bbox, &boxes, 2.0) {
                continue;
            }
            poly.tirads = Some(match rng.gen_range(1..=5) {
                1 => Tirads::TR1,
                2 => Tirads::TR2,
                3 => Tirads::TR3,
                4 => Tirads::TR4,
                _ => Tirads::TR5,
            });
            boxes.push(bbox);
            placed.push(poly);
            ok = true;
            break;
        }
        if !ok {
            return Err(SynthError::Crowded { image: image.to_string(), nodule: k });
        }
    }
    Ok(placed)
}

fn render(cfg: &SynthConfig, rng: &mut ChaCha8Rng, w: u32, h: u32, nodules: &[NodulePolygon], doppler: bool) -> RasterImage {
    let sigma = cfg.speckle;
    let speckle = LogNormal::new(-sigma * sigma / 2.0, sigma).expect("finite sigma");
    let mut dark = crate::geometry::Bitmap::new(w, h);
    for poly in nodules {
        if let Ok(m) = rasterize(poly, w, h) {
            dark.union_with(m.bits()).expect("same frame");
        }
    }
    let mut gray = Vec::with_capacity(w as usize * h as usize);
    for y in 0..h {
        // Gentle vertical attenuation, as deeper tissue returns less echo.
        let depth = 1.0 - 0.3 * y as f64 / h as f64;
        for x in 0..w {
            let base = if dark.get(x, y) { cfg.background - cfg.contrast } else { cfg.background };
            let v = base * depth * speckle.sample(rng);
            gray.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    if !doppler {
        return RasterImage::new(w, h, 1, gray).expect("sized buffer");
    }
    // Color patch covering a sixteenth of the frame, well above detector
    // sensitivity.
    let (pw, ph) = (w / 4, h / 4);
    let px = rng.gen_range(0..=w - pw);
    let py = rng.gen_range(0..=h - ph);
    let mut rgb = Vec::with_capacity(gray.len() * 3);
    for y in 0..h {
        for x in 0..w {
            let v = gray[(y * w + x) as usize];
            if (px..px + pw).contains(&x) && (py..py + ph).contains(&y) {
                let low = v / 3;
                let (r, b) = if (x + y) % 2 == 0 { (low.saturating_add(170), low) } else { (low, low.saturating_add(170)) };
                rgb.extend([r, low, b]);
            } else {
                rgb.extend([v, v, v]);
            }
        }
    }
    RasterImage::new(w, h, 3, rgb).expect("sized buffer")
}

fn generate_one(cfg: &SynthConfig, index: usize, p: &ImagePlan) -> Result<(AnnotationRecord, RasterImage), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index as u64));
    let w = draw(&mut rng, cfg.width);
    let h = draw(&mut rng, cfg.height);
    let no_finding = rng.gen_bool(cfg.no_finding_rate);
    let n = if no_finding { 0 } else { draw(&mut rng, cfg.nodules_per_image).max(1) };
    let nodules = place_nodules(cfg, &mut rng, w, h, n, &p.image_ref)?;
    let image = render(cfg, &mut rng, w, h, &nodules, p.doppler);
    let record = AnnotationRecord {
        image_ref: p.image_ref.clone(),
        patient_id: p.patient_id.clone(),
        width: w,
        height: h,
        no_finding: nodules.is_empty(),
        nodules,
        excluded: None,
        doppler: None,
        source_meta: BTreeMap::new(),
    };
    Ok((record, image))
}

fn assemble(records: Vec<(AnnotationRecord, ImageMeta)>) -> Result<(AnnotationSet, DatasetManifest), SynthError> {
    let mut meta = BTreeMap::new();
    let mut recs = Vec::with_capacity(records.len());
    for (r, m) in records {
        meta.insert(r.image_ref.clone(), m);
        recs.push(r);
    }
    let set = AnnotationSet::new(recs);
    let manifest = build_manifest(&set, &meta)?;
    Ok((set, manifest))
}

fn image_meta(img: &RasterImage) -> ImageMeta {
    ImageMeta {
        channels: img.channels(),
        doppler_detected: detect_doppler(img, &DopplerParams::default()),
    }
}

pub struct SynthDataset {
    pub images: Vec<(String, RasterImage)>,
    pub annotations: AnnotationSet,
    pub manifest: DatasetManifest,
}

/// Generates a dataset in memory. The manifest's doppler flags come from
/// running the detector over the rendered frames.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    cfg.validate()?;
    let plan = plan(cfg);
    let made = plan
        .par_iter()
        .enumerate()
        .map(|(i, p)| generate_one(cfg, i, p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut images = Vec::with_capacity(made.len());
    let mut records = Vec::with_capacity(made.len());
    for (r, img) in made {
        records.push((r, image_meta(&img)));
        images.push((records.last().unwrap().0.image_ref.clone(), img));
    }
    let (annotations, manifest) = assemble(records)?;
    Ok(SynthDataset { images, annotations, manifest })
}

/// Like [`generate`], but writes each frame as PNG into `image_dir` as soon
/// as it is rendered instead of keeping pixels in memory.
pub fn generate_to_dir(cfg: &SynthConfig, image_dir: &Path) -> Result<(AnnotationSet, DatasetManifest), SynthError> {
    cfg.validate()?;
    std::fs::create_dir_all(image_dir).map_err(|source| ImageError::Io {
        path: image_dir.display().to_string(),
        source,
    })?;
    let plan = plan(cfg);
    let records = plan
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let (r, img) = generate_one(cfg, i, p)?;
            write_png(&img, &image_dir.join(&r.image_ref))?;
            Ok((r, image_meta(&img)))
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    assemble(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    /// Probability that a ground-truth instance gets no prediction.
    pub drop_rate: f64,
    /// Probability, per ground-truth instance, of adding one false positive.
    pub spurious_rate: f64,
    /// Maximum per-vertex displacement of kept instances, in pixels.
    pub jitter_px: f64,
    pub matched_score: Span<f64>,
    pub spurious_score: Span<f64>,
    /// Require every matched score to exceed every spurious score.
    pub separate_scores: bool,
    /// IoU a jittered instance must keep with its source, by mask and box.
    pub iou_guard: f64,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            drop_rate: 0.0,
            spurious_rate: 0.0,
            jitter_px: 0.0,
            matched_score: (0.5, 1.0),
            spurious_score: (0.05, 0.5),
            separate_scores: false,
            iou_guard: 0.5,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        check_fraction("drop_rate", self.drop_rate)?;
        check_fraction("spurious_rate", self.spurious_rate)?;
        if !(self.jitter_px >= 0.0 && self.jitter_px.is_finite()) {
            return Err(SynthError::InvalidConfig("jitter_px must be finite and non-negative".into()));
        }
        for (name, s) in [("matched_score", self.matched_score), ("spurious_score", self.spurious_score)] {
            check_span(name, &s)?;
            check_fraction(name, s.0)?;
            check_fraction(name, s.1)?;
        }
        if self.separate_scores && self.matched_score.0 <= self.spurious_score.1 {
            return Err(SynthError::InvalidConfig(
                "matched scores must lie strictly above spurious scores".into(),
            ));
        }
        if !(self.iou_guard > 0.0 && self.iou_guard <= 1.0) {
            return Err(SynthError::InvalidConfig("iou_guard outside (0, 1]".into()));
        }
        Ok(())
    }
}

/// Exact numbers of planted outcomes: kept instances are true positives,
/// dropped ones false negatives, spurious ones false positives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedCounts {
    pub kept: u64,
    pub dropped: u64,
    pub spurious: u64,
}

impl PlantedCounts {
    fn add(&mut self, o: PlantedCounts) {
        self.kept += o.kept;
        self.dropped += o.dropped;
        self.spurious += o.spurious;
    }
}

const JITTER_RETRIES: usize = 8;

fn jitter(
    rng: &mut ChaCha8Rng,
    src: &NodulePolygon,
    others: &[BoundingBox],
    w: u32,
    h: u32,
    cfg: &PerturbConfig,
) -> NodulePolygon {
    if cfg.jitter_px == 0.0 {
        return src.clone();
    }
    let src_box = polygon_bbox(src);
    let src_mask = rasterize(src, w, h).ok();
    let mut amp = cfg.jitter_px;
    for _ in 0..JITTER_RETRIES {
        let verts: Vec<Point2D> = src
            .vertices()
            .iter()
            .map(|p| {
                Point2D::new(
                    (p.x + rng.gen_range(-amp..=amp)).clamp(0.0, w as f64),
                    (p.y + rng.gen_range(-amp..=amp)).clamp(0.0, h as f64),
                )
            })
            .collect();
        amp /= 2.0;
        let Ok(cand) = src.with_vertices(verts) else { continue };
        let bbox = polygon_bbox(&cand);
        // Overlapping a neighbour's box could let it compete for the match.
        if !disjoint(&bbox, others, 0.0) || box_iou(&bbox, &src_box) < cfg.iou_guard {
            continue;
        }
        let mask_ok = match (&src_mask, rasterize(&cand, w, h)) {
            (Some(a), Ok(b)) => mask_iou(a, &b).map_or(false, |v| v >= cfg.iou_guard),
            (None, Err(_)) => true,
            _ => false,
        };
        if mask_ok {
            return cand;
        }
    }
    src.clone()
}

fn spurious(rng: &mut ChaCha8Rng, gt_boxes: &[BoundingBox], w: u32, h: u32, image: &str) -> Result<NodulePolygon, SynthError> {
    let max_axis = (w.min(h) as f64 / 8.0).clamp(2.0, 10.0);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let a = rng.gen_range(2.0..=max_axis);
        let b = rng.gen_range(2.0..=a);
        let center = Point2D::new(rng.gen_range(a..=w as f64 - a), rng.gen_range(a..=h as f64 - a));
        let poly = ellipse_polygon(center, a, b, rng.gen_range(0.0..PI), 12);
        if disjoint(&polygon_bbox(&poly), gt_boxes, 1.0) {
            return Ok(poly);
        }
    }
    Err(SynthError::NoRoomForSpurious { image: image.to_string() })
}

fn perturb_one(record: &AnnotationRecord, index: usize, cfg: &PerturbConfig) -> Result<(Vec<Detection>, PlantedCounts), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ 0x7065_7274_7572_6221, index as u64));
    let (w, h) = (record.width, record.height);
    let boxes: Vec<BoundingBox> = record.nodules.iter().map(polygon_bbox).collect();
    let mut dets = Vec::new();
    let mut counts = PlantedCounts::default();
    for (k, gt) in record.nodules.iter().enumerate() {
        let dropped = rng.gen_bool(cfg.drop_rate);
        let add_spurious = rng.gen_bool(cfg.spurious_rate);
        if dropped {
            counts.dropped += 1;
        } else {
            let others: Vec<BoundingBox> = boxes.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, b)| *b).collect();
            let mut polygon = jitter(&mut rng, gt, &others, w, h, cfg);
            polygon.tirads = None;
            polygon.attrs.clear();
            dets.push(Detection {
                image_ref: record.image_ref.clone(),
                score: draw(&mut rng, cfg.matched_score),
                polygon,
            });
            counts.kept += 1;
        }
        if add_spurious {
            let mut polygon = spurious(&mut rng, &boxes, w, h, &record.image_ref)?;
            polygon.class_id = gt.class_id;
            dets.push(Detection {
                image_ref: record.image_ref.clone(),
                score: draw(&mut rng, cfg.spurious_score),
                polygon,
            });
            counts.spurious += 1;
        }
    }
    Ok((dets, counts))
}

/// Derives predictions from ground truth with planted errors. Every record
/// gets an entry in the returned set, possibly with no detections.
pub fn perturb(gt: &AnnotationSet, cfg: &PerturbConfig) -> Result<(PredictionSet, PlantedCounts), SynthError> {
    cfg.validate()?;
    let per_image = gt
        .records
        .par_iter()
        .enumerate()
        .map(|(i, r)| perturb_one(r, i, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let mut set = PredictionSet::default();
    let mut total = PlantedCounts::default();
    for (r, (dets, counts)) in gt.records.iter().zip(per_image) {
        set.images.insert(r.image_ref.clone(), dets);
        total.add(counts);
    }
    Ok((set, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::validate_against_images;

    fn small() -> SynthConfig {
        SynthConfig {
            n_patients: 10,
            images_per_patient: (2, 2),
            nodules_per_image: (1, 1),
            width: (96, 128),
            height: (96, 128),
            axis_px: (6.0, 16.0),
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn counts_follow_config() {
        let ds = generate(&small()).unwrap();
        assert_eq!(ds.manifest.stats.n_patients, 10);
        assert_eq!(ds.manifest.stats.n_images, 20);
        assert_eq!(ds.manifest.stats.n_nodules, 20);
        assert_eq!(ds.images.len(), 20);
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.annotations, b.annotations);
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn ground_truth_validates_cleanly() {
        let ds = generate(&small()).unwrap();
        let dims = ds
            .images
            .iter()
            .map(|(n, img)| (n.clone(), (img.width(), img.height())))
            .collect();
        let (report, clipped) = validate_against_images(&ds.annotations, &dims);
        assert!(report.is_clean(), "{report:?}");
        assert_eq!(clipped, ds.annotations);
    }

    #[test]
    fn doppler_share_is_exact() {
        let cfg = SynthConfig {
            n_patients: 200,
            images_per_patient: (2, 2),
            width: (64, 64),
            height: (64, 64),
            axis_px: (4.0, 8.0),
            doppler_fraction: 0.25,
            seed: 11,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        let flagged = ds
            .images
            .iter()
            .filter(|(_, img)| detect_doppler(img, &DopplerParams::default()))
            .count();
        assert_eq!(flagged, 100);
        assert_eq!(ds.manifest.entries.iter().filter(|e| e.doppler).count(), 100);
    }

    #[test]
    fn identity_perturbation() {
        let ds = generate(&small()).unwrap();
        let (preds, counts) = perturb(&ds.annotations, &PerturbConfig::default()).unwrap();
        assert_eq!(counts, PlantedCounts { kept: 20, dropped: 0, spurious: 0 });
        for r in &ds.annotations.records {
            let dets = &preds.images[&r.image_ref];
            let polys: Vec<_> = dets.iter().map(|d| d.polygon.vertices()).collect();
            let gts: Vec<_> = r.nodules.iter().map(|n| n.vertices()).collect();
            assert_eq!(polys, gts);
        }
    }

    #[test]
    fn spurious_needs_room() {
        let poly = NodulePolygon::from_coords(&[(0.0, 0.0), (16.0, 0.0), (16.0, 16.0), (0.0, 16.0)]).unwrap();
        let record = AnnotationRecord {
            image_ref: "full.png".into(),
            patient_id: "P".into(),
            width: 16,
            height: 16,
            nodules: vec![poly],
            no_finding: false,
            excluded: None,
            doppler: None,
            source_meta: BTreeMap::new(),
        };
        let cfg = PerturbConfig { spurious_rate: 1.0, ..Default::default() };
        assert!(matches!(
            perturb(&AnnotationSet::new(vec![record]), &cfg),
            Err(SynthError::NoRoomForSpurious { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let bad = SynthConfig { doppler_fraction: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PerturbConfig {
            separate_scores: true,
            matched_score: (0.4, 1.0),
            spurious_score: (0.0, 0.5),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
