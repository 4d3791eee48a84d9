//! Dataset manifest, doppler variants and patient-level splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::AnnotationSet;
use crate::image::RasterImage;

pub const MANIFEST_SCHEMA: &str = "nodule-manifest/1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManifestError {
    #[error("duplicate image reference {0}")]
    DuplicateImageRef(String),
    #[error("split ratios invalid: {0}")]
    InvalidRatios(String),
    #[error("{patients} patients cannot fill {buckets} buckets")]
    TooFewPatients { patients: usize, buckets: usize },
    #[error("manifest is already split; pass force to re-split")]
    AlreadySplit,
    #[error("manifest JSON: {0}")]
    Json(String),
    #[error("manifest invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Train,
    Val,
    Test,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Train, Bucket::Val, Bucket::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Bucket::Train => "train",
            Bucket::Val => "val",
            Bucket::Test => "test",
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Bucket {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Bucket::Train),
            "val" => Ok(Bucket::Val),
            "test" => Ok(Bucket::Test),
            other => Err(format!("unknown bucket {other:?} (train|val|test)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VersionTag {
    V1,
    V2,
    #[serde(rename = "custom")]
    Custom,
}

impl fmt::Display for VersionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VersionTag::V1 => "V1",
            VersionTag::V2 => "V2",
            VersionTag::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Every non-excluded image, doppler included.
    V1,
    /// V1 without doppler images.
    V2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_ref: String,
    pub patient_id: String,
    pub n_nodules: usize,
    pub doppler: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluded: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Bucket>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub n_patients: usize,
    pub n_images: usize,
    pub n_nodules: usize,
}

impl ManifestStats {
    pub fn of(entries: &[ManifestEntry]) -> Self {
        let live = entries.iter().filter(|e| e.excluded.is_none());
        let mut patients = BTreeSet::new();
        let mut stats = ManifestStats::default();
        for e in live {
            patients.insert(e.patient_id.as_str());
            stats.n_images += 1;
            stats.n_nodules += e.n_nodules;
        }
        stats.n_patients = patients.len();
        stats
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub version_tag: VersionTag,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_ratios: Option<[f64; 3]>,
    pub stats: ManifestStats,
    pub entries: Vec<ManifestEntry>,
    /// Opaque training settings carried along for the record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passthrough: Option<serde_json::Value>,
}

impl DatasetManifest {
    /// Sorts entries by image_ref and recomputes stats.
    pub fn from_entries(mut entries: Vec<ManifestEntry>, version_tag: VersionTag) -> Result<Self, ManifestError> {
        entries.sort_by(|a, b| a.image_ref.cmp(&b.image_ref));
        if let Some(w) = entries.windows(2).find(|w| w[0].image_ref == w[1].image_ref) {
            return Err(ManifestError::DuplicateImageRef(w[0].image_ref.clone()));
        }
        let stats = ManifestStats::of(&entries);
        Ok(Self {
            schema: MANIFEST_SCHEMA.to_string(),
            version_tag,
            seed: 0,
            split_ratios: None,
            stats,
            entries,
            passthrough: None,
        })
    }

    pub fn live_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.excluded.is_none())
    }

    pub fn is_split(&self) -> bool {
        self.entries.iter().any(|e| e.split.is_some())
    }

    pub fn bucket_entries(&self, bucket: Bucket) -> impl Iterator<Item = &ManifestEntry> {
        self.live_entries().filter(move |e| e.split == Some(bucket))
    }

    pub fn get(&self, image_ref: &str) -> Option<&ManifestEntry> {
        self.entries
            .binary_search_by(|e| e.image_ref.as_str().cmp(image_ref))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Patient IDs per bucket.
    pub fn bucket_patients(&self) -> BTreeMap<Bucket, BTreeSet<&str>> {
        let mut out: BTreeMap<Bucket, BTreeSet<&str>> = BTreeMap::new();
        for e in self.live_entries() {
            if let Some(b) = e.split {
                out.entry(b).or_default().insert(e.patient_id.as_str());
            }
        }
        out
    }

    /// Checks the stored invariants; used after reading from disk.
    pub fn check(&self) -> Result<(), ManifestError> {
        if self.schema != MANIFEST_SCHEMA {
            return Err(ManifestError::Invariant(format!("schema {}", self.schema)));
        }
        if ManifestStats::of(&self.entries) != self.stats {
            return Err(ManifestError::Invariant("stats do not match entries".into()));
        }
        if self.version_tag == VersionTag::V2 && self.entries.iter().any(|e| e.doppler) {
            return Err(ManifestError::Invariant("V2 manifest contains doppler entries".into()));
        }
        if self.is_split() && self.live_entries().any(|e| e.split.is_none()) {
            return Err(ManifestError::Invariant("partially split manifest".into()));
        }
        if self.entries.windows(2).any(|w| w[0].image_ref >= w[1].image_ref) {
            return Err(ManifestError::Invariant("entries not sorted by image_ref".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ManifestError> {
        let m: Self = serde_json::from_slice(bytes).map_err(|e| ManifestError::Json(e.to_string()))?;
        m.check()?;
        Ok(m)
    }
}

/// Per-image facts gathered from decoded pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ImageMeta {
    pub channels: u8,
    /// Result of [`detect_doppler`] on the decoded frame.
    pub doppler_detected: bool,
}

/// One entry per annotation record. The doppler flag comes from the
/// record's explicit flag when present, else from the detector result in
/// `image_meta` (missing images count as not doppler).
pub fn build_manifest(
    annotations: &AnnotationSet,
    image_meta: &BTreeMap<String, ImageMeta>,
) -> Result<DatasetManifest, ManifestError> {
    let entries = annotations
        .records
        .iter()
        .map(|r| ManifestEntry {
            image_ref: r.image_ref.clone(),
            patient_id: r.patient_id.clone(),
            n_nodules: r.nodules.len(),
            doppler: r.doppler.unwrap_or_else(|| {
                image_meta
                    .get(&r.image_ref)
                    .map(|m| m.doppler_detected)
                    .unwrap_or(false)
            }),
            excluded: r.excluded.clone(),
            split: None,
        })
        .collect();
    DatasetManifest::from_entries(entries, VersionTag::Custom)
}

/// Marks entries listed in a sidecar exclusion list. Unknown refs are
/// returned so callers can report them.
pub fn apply_exclusions(
    manifest: &mut DatasetManifest,
    exclusions: &BTreeMap<String, String>,
) -> Vec<String> {
    let mut unknown = Vec::new();
    for (image, reason) in exclusions {
        match manifest
            .entries
            .binary_search_by(|e| e.image_ref.as_str().cmp(image))
        {
            Ok(i) => manifest.entries[i].excluded = Some(reason.clone()),
            Err(_) => unknown.push(image.clone()),
        }
    }
    manifest.stats = ManifestStats::of(&manifest.entries);
    unknown
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DopplerParams {
    /// A pixel is chromatic when max(R,G,B) - min(R,G,B) exceeds this.
    pub chroma_threshold: u8,
    /// Image is doppler when the chromatic share exceeds this fraction.
    pub min_fraction: f64,
}

impl Default for DopplerParams {
    fn default() -> Self {
        Self {
            chroma_threshold: 20,
            min_fraction: 0.005,
        }
    }
}

/// Color-overlay heuristic; grayscale images are never doppler.
pub fn detect_doppler(img: &RasterImage, params: &DopplerParams) -> bool {
    if img.channels() != 3 {
        return false;
    }
    let total = img.width() as usize * img.height() as usize;
    if total == 0 {
        return false;
    }
    let chromatic = img
        .pixels()
        .filter(|p| {
            let max = p[0].max(p[1]).max(p[2]);
            let min = p[0].min(p[1]).min(p[2]);
            max - min > params.chroma_threshold
        })
        .count();
    chromatic as f64 / total as f64 > params.min_fraction
}

/// Derives a variant: V1 keeps every non-excluded entry, V2 additionally
/// drops doppler entries. The seed and split assignment carry over.
pub fn filter_variant(m: &DatasetManifest, variant: Variant) -> DatasetManifest {
    let entries: Vec<ManifestEntry> = m
        .live_entries()
        .filter(|e| variant == Variant::V1 || !e.doppler)
        .cloned()
        .collect();
    DatasetManifest {
        schema: MANIFEST_SCHEMA.to_string(),
        version_tag: match variant {
            Variant::V1 => VersionTag::V1,
            Variant::V2 => VersionTag::V2,
        },
        seed: m.seed,
        split_ratios: m.split_ratios,
        stats: ManifestStats::of(&entries),
        passthrough: m.passthrough.clone(),
        entries,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    ratios: [f64; 3],
    pub seed: u64,
}

impl SplitConfig {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self, ManifestError> {
        let ratios = [train, val, test];
        for (name, r) in ["train", "val", "test"].iter().zip(ratios) {
            if !(r > 0.0 && r < 1.0) {
                return Err(ManifestError::InvalidRatios(format!(
                    "{name} ratio {r} outside (0, 1)"
                )));
            }
        }
        let sum: f64 = ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ManifestError::InvalidRatios(format!(
                "ratios sum to {sum:.6}, expected 1"
            )));
        }
        Ok(Self { ratios, seed })
    }

    pub fn ratios(&self) -> [f64; 3] {
        self.ratios
    }
}

/// Assigns each patient (and so each of its images) to train, val or test.
///
/// Patients are sorted by ID, shuffled with a ChaCha8 stream seeded from
/// `cfg.seed`, then poured in order into train, val and test. A bucket
/// closes once its cumulative image count reaches `ratio * total`; the
/// patient that crosses the boundary stays in the earlier bucket. A bucket
/// also closes early if the remaining patients are only just enough to give
/// each later bucket one patient.
pub fn assign_splits(
    m: &DatasetManifest,
    cfg: &SplitConfig,
    force: bool,
) -> Result<DatasetManifest, ManifestError> {
    if m.is_split() && !force {
        return Err(ManifestError::AlreadySplit);
    }
    let mut per_patient: BTreeMap<&str, usize> = BTreeMap::new();
    for e in m.live_entries() {
        *per_patient.entry(e.patient_id.as_str()).or_default() += 1;
    }
    let buckets = Bucket::ALL.len();
    if per_patient.len() < buckets {
        return Err(ManifestError::TooFewPatients {
            patients: per_patient.len(),
            buckets,
        });
    }

    let mut order: Vec<(&str, usize)> = per_patient.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);

    let total: usize = order.iter().map(|(_, n)| n).sum();
    let mut targets = [0.0; 3];
    let mut acc = 0.0;
    for (t, r) in targets.iter_mut().zip(cfg.ratios) {
        acc += r;
        *t = acc * total as f64;
    }

    let mut assignment: BTreeMap<&str, Bucket> = BTreeMap::new();
    let mut bucket = 0usize;
    let mut cumulative = 0usize;
    for (i, (patient, n)) in order.iter().enumerate() {
        assignment.insert(patient, Bucket::ALL[bucket]);
        cumulative += n;
        if bucket + 1 < buckets {
            let remaining_patients = order.len() - i - 1;
            let later_buckets = buckets - bucket - 1;
            if cumulative as f64 >= targets[bucket] || remaining_patients <= later_buckets {
                bucket += 1;
            }
        }
    }

    let mut out = m.clone();
    for e in &mut out.entries {
        e.split = if e.excluded.is_none() {
            assignment.get(e.patient_id.as_str()).copied()
        } else {
            None
        };
    }
    out.seed = cfg.seed;
    out.split_ratios = Some(cfg.ratios);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(image: &str, patient: &str, nodules: usize, doppler: bool) -> ManifestEntry {
        ManifestEntry {
            image_ref: image.into(),
            patient_id: patient.into(),
            n_nodules: nodules,
            doppler,
            excluded: None,
            split: None,
        }
    }

    #[test]
    fn stats_count_patients_images_nodules() {
        let m = DatasetManifest::from_entries(
            vec![
                entry("a.png", "P1", 1, false),
                entry("b.png", "P1", 2, false),
                entry("c.png", "P2", 1, false),
            ],
            VersionTag::Custom,
        )
        .unwrap();
        assert_eq!(
            m.stats,
            ManifestStats {
                n_patients: 2,
                n_images: 3,
                n_nodules: 4
            }
        );
    }

    #[test]
    fn duplicate_ref_rejected() {
        let r = DatasetManifest::from_entries(
            vec![entry("a.png", "P1", 1, false), entry("a.png", "P2", 1, false)],
            VersionTag::Custom,
        );
        assert_eq!(r, Err(ManifestError::DuplicateImageRef("a.png".into())));
    }

    #[test]
    fn doppler_detection() {
        let gray = RasterImage::filled(100, 100, 1, 128).unwrap();
        assert!(!detect_doppler(&gray, &DopplerParams::default()));

        let mut rgb = RasterImage::filled(100, 100, 3, 128).unwrap();
        assert!(!detect_doppler(&rgb, &DopplerParams::default()));
        let w = rgb.width() as usize;
        for y in 0..10 {
            for x in 0..10 {
                let i = (y * w + x) * 3;
                rgb.samples_mut()[i..i + 3].copy_from_slice(&[255, 0, 0]);
            }
        }
        assert!(detect_doppler(&rgb, &DopplerParams::default()));
        // 1% is below a 2% threshold.
        let strict = DopplerParams {
            min_fraction: 0.02,
            ..Default::default()
        };
        assert!(!detect_doppler(&rgb, &strict));
    }

    #[test]
    fn variants() {
        let entries: Vec<_> = (0..10)
            .map(|i| entry(&format!("{i:02}.png"), &format!("P{i}"), 1, i < 2))
            .collect();
        let m = DatasetManifest::from_entries(entries, VersionTag::Custom).unwrap();
        assert_eq!(filter_variant(&m, Variant::V1).entries.len(), 10);
        let v2 = filter_variant(&m, Variant::V2);
        assert_eq!(v2.entries.len(), 8);
        assert_eq!(v2.version_tag, VersionTag::V2);
        v2.check().unwrap();

        let clean: Vec<_> = (0..4).map(|i| entry(&format!("{i}.png"), "P", 1, false)).collect();
        let m = DatasetManifest::from_entries(clean, VersionTag::Custom).unwrap();
        assert_eq!(
            filter_variant(&m, Variant::V1).entries,
            filter_variant(&m, Variant::V2).entries
        );
    }

    #[test]
    fn excluded_entries_leave_v1() {
        let mut m = DatasetManifest::from_entries(
            vec![entry("a.png", "P1", 1, false), entry("b.png", "P2", 3, false)],
            VersionTag::Custom,
        )
        .unwrap();
        let unknown = apply_exclusions(
            &mut m,
            &[("b.png".to_string(), "artifact".to_string()), ("z.png".into(), "x".into())]
                .into_iter()
                .collect(),
        );
        assert_eq!(unknown, vec!["z.png".to_string()]);
        assert_eq!(m.stats.n_nodules, 1);
        assert_eq!(m.entries.len(), 2);
        let v1 = filter_variant(&m, Variant::V1);
        assert_eq!(v1.entries.len(), 1);
    }

    #[test]
    fn ratio_validation() {
        assert!(SplitConfig::new(0.8, 0.15, 0.05, 1).is_ok());
        let err = SplitConfig::new(0.7, 0.15, 0.05, 1).unwrap_err();
        assert!(err.to_string().contains("0.9"), "{err}");
        assert!(SplitConfig::new(1.0, 0.0, 0.0, 1).is_err());
    }

    #[test]
    fn one_patient_cannot_split() {
        let m = DatasetManifest::from_entries(
            vec![entry("a.png", "P1", 1, false), entry("b.png", "P1", 1, false)],
            VersionTag::Custom,
        )
        .unwrap();
        let cfg = SplitConfig::new(0.8, 0.15, 0.05, 3).unwrap();
        assert_eq!(
            assign_splits(&m, &cfg, false),
            Err(ManifestError::TooFewPatients {
                patients: 1,
                buckets: 3
            })
        );
    }

    #[test]
    fn every_bucket_gets_a_patient() {
        let m = DatasetManifest::from_entries(
            vec![
                entry("a.png", "P1", 1, false),
                entry("b.png", "P2", 1, false),
                entry("c.png", "P3", 1, false),
            ],
            VersionTag::Custom,
        )
        .unwrap();
        let cfg = SplitConfig::new(0.8, 0.15, 0.05, 3).unwrap();
        let s = assign_splits(&m, &cfg, false).unwrap();
        assert_eq!(s.bucket_patients().len(), 3);
        assert_eq!(assign_splits(&s, &cfg, false), Err(ManifestError::AlreadySplit));
        assert_eq!(assign_splits(&s, &cfg, true).unwrap(), s);
    }

    #[test]
    fn json_roundtrip_and_check() {
        let m = DatasetManifest::from_entries(
            vec![entry("b.png", "P1", 1, true), entry("a.png", "P2", 0, false)],
            VersionTag::Custom,
        )
        .unwrap();
        assert_eq!(m.entries[0].image_ref, "a.png");
        let back = DatasetManifest::from_json(m.to_json().as_bytes()).unwrap();
        assert_eq!(back, m);

        let mut bad = m.clone();
        bad.stats.n_images = 7;
        assert!(DatasetManifest::from_json(bad.to_json().as_bytes()).is_err());
    }
}
