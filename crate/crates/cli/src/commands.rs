use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nodulekit::annotation::{emit_annotations, parse_annotations, validate_against_images, AnnotationSet};
use nodulekit::dicom::{decode_image, parse_dicom};
use nodulekit::eval::{evaluate, parse_predictions, ApInterpolation, EvalConfig};
use nodulekit::export::{write_coco_dataset, write_masks, write_yolo_dataset};
use nodulekit::fsutil::write_atomic;
use nodulekit::image::{png_dimensions, read_png, write_png, RasterImage};
use nodulekit::manifest::{
    apply_exclusions, assign_splits, build_manifest, detect_doppler, filter_variant, Bucket, DatasetManifest,
    ImageMeta, SplitConfig, Variant,
};
use nodulekit::report::{write_report, ReportFormat};
use nodulekit::synth::{generate_to_dir, perturb};
use nodulekit::EvalReport;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{self, parse_ratios, FileConfig};
use crate::error::CliError;
use crate::summary::{list_files, sha256_hex, RunSummary};
use crate::{
    usage, BucketArg, Cli, Command, EvaluateArgs, ExportArgs, ExportFormat, IngestArgs, InterpolationArg,
    ManifestArgs, PerturbArgs, ReportArgs, ReportFormatArg, SplitArgs, SynthArgs, ValidateArgs, VariantArgs,
};

pub fn run(cli: Cli) -> Result<RunSummary, CliError> {
    let cfg = config::load(cli.config.as_deref())?;
    if let Some(n) = cli.workers.or(cfg.workers) {
        if n == 0 {
            return Err(usage("--workers must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    let mut s = match &cli.command {
        Command::Ingest(_) => RunSummary::new("ingest"),
        Command::Validate(_) => RunSummary::new("validate"),
        Command::Manifest(_) => RunSummary::new("manifest"),
        Command::Variant(_) => RunSummary::new("variant"),
        Command::Split(_) => RunSummary::new("split"),
        Command::Export(_) => RunSummary::new("export"),
        Command::Synth(_) => RunSummary::new("synth"),
        Command::Perturb(_) => RunSummary::new("perturb"),
        Command::Evaluate(_) => RunSummary::new("evaluate"),
        Command::Report(_) => RunSummary::new("report"),
    };
    if let Some(path) = &cli.config {
        s.input(path)?;
    }
    match &cli.command {
        Command::Ingest(a) => ingest(a, &cfg, &mut s)?,
        Command::Validate(a) => validate(a, &mut s)?,
        Command::Manifest(a) => manifest(a, &cfg, &mut s)?,
        Command::Variant(a) => variant(a, &cfg, &mut s)?,
        Command::Split(a) => split(a, &cfg, &mut s)?,
        Command::Export(a) => export(a, &mut s)?,
        Command::Synth(a) => synth(a, &cfg, &mut s)?,
        Command::Perturb(a) => perturb_cmd(a, &cfg, &mut s)?,
        Command::Evaluate(a) => evaluate_cmd(a, &cfg, &mut s)?,
        Command::Report(a) => report(a, &mut s)?,
    }
    Ok(s)
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage("input does not exist").at(path))
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::from(e).at(path))
}

fn write(path: &Path, bytes: &[u8], s: &mut RunSummary) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| CliError::from(e).at(path))?;
    s.output(path);
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn pretty(v: &Value) -> String {
    let mut out = serde_json::to_string_pretty(v).expect("serializable");
    out.push('\n');
    out
}

fn load_annotations(path: &Path, s: &mut RunSummary) -> Result<AnnotationSet, CliError> {
    require(path)?;
    s.input(path)?;
    parse_annotations(&read(path)?).map_err(|e| CliError::from(e).at(path))
}

fn load_manifest(path: &Path, s: &mut RunSummary) -> Result<DatasetManifest, CliError> {
    require(path)?;
    s.input(path)?;
    DatasetManifest::from_json(&read(path)?).map_err(|e| CliError::from(e).at(path))
}

fn write_manifest(m: &DatasetManifest, path: &Path, s: &mut RunSummary) -> Result<(), CliError> {
    write(path, m.to_json().as_bytes(), s)
}

/// `/`-separated path of `file` relative to `root`.
fn relative_name(root: &Path, file: &Path) -> String {
    let rel = file.strip_prefix(root).unwrap_or(file);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn safe_file_part(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '.') { c } else { '_' })
        .collect()
}

#[derive(Serialize)]
struct IngestedImage {
    source: String,
    image: String,
    patient_id: String,
    width: u32,
    height: u32,
    channels: u8,
    doppler_detected: bool,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct IngestFailure {
    source: String,
    error: String,
}

fn ingest(a: &IngestArgs, cfg: &FileConfig, s: &mut RunSummary) -> Result<(), CliError> {
    require(&a.dicom_dir)?;
    s.input(&a.dicom_dir)?;
    let hash = a.hash_patient_ids || cfg.ingest.hash_patient_ids;
    let params = cfg.doppler.params();
    s.config = json!({ "hash_patient_ids": hash, "doppler": cfg.doppler });

    let files = list_files(&a.dicom_dir).map_err(|e| CliError::from(e).at(&a.dicom_dir))?;
    let decoded: Vec<Result<(String, RasterImage, Vec<String>), CliError>> = files
        .par_iter()
        .map(|f| {
            let obj = parse_dicom(&read(f)?).map_err(|e| CliError::from(e).at(f))?;
            let img = decode_image(&obj).map_err(|e| CliError::from(e).at(f))?;
            let pid = obj.patient_id().map_err(|e| CliError::from(e).at(f))?;
            if pid.is_empty() {
                return Err(CliError::Data("empty PatientID".into()).at(f));
            }
            let pid = if hash { sha256_hex(pid.as_bytes())[..16].to_string() } else { pid };
            Ok((pid, img, obj.warnings))
        })
        .collect();

    let mut next_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut jobs = Vec::new();
    let mut failures = Vec::new();
    let mut worst: Option<CliError> = None;
    for (f, r) in files.iter().zip(decoded) {
        match r {
            Ok((pid, img, warnings)) => {
                let key = safe_file_part(&pid);
                let idx = next_index.entry(key.clone()).or_default();
                let name = format!("{key}_{idx}.png");
                *idx += 1;
                for w in &warnings {
                    warn!("{}: {w}", f.display());
                }
                jobs.push((f, name, pid, img, warnings));
            }
            Err(e) => {
                warn!("{e}");
                failures.push(IngestFailure {
                    source: relative_name(&a.dicom_dir, f),
                    error: e.to_string(),
                });
                if worst.as_ref().map_or(true, |w| e.exit_code() > w.exit_code()) {
                    worst = Some(e);
                }
            }
        }
    }

    let images = jobs
        .par_iter()
        .map(|(f, name, pid, img, warnings)| {
            let dst = a.out.join(name);
            write_png(img, &dst)?;
            Ok(IngestedImage {
                source: relative_name(&a.dicom_dir, f),
                image: name.clone(),
                patient_id: pid.clone(),
                width: img.width(),
                height: img.height(),
                channels: img.channels(),
                doppler_detected: detect_doppler(img, &params),
                warnings: warnings.clone(),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    for img in &images {
        s.output(&a.out.join(&img.image));
    }
    let index = json!({ "images": images, "failures": failures });
    write(&a.out.join("ingest.json"), pretty(&index).as_bytes(), s)?;
    info!("ingested {} of {} files", images.len(), files.len());
    s.result = json!({ "ingested": images.len(), "failed": failures.len() });
    match worst {
        Some(e) => Err(match e {
            CliError::Io(_) => CliError::Io(format!("{} of {} files failed; first: {e}", failures.len(), files.len())),
            _ => CliError::Data(format!("{} of {} files failed; first: {e}", failures.len(), files.len())),
        }),
        None => Ok(()),
    }
}

fn png_files(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    Ok(list_files(dir)
        .map_err(|e| CliError::from(e).at(dir))?
        .into_iter()
        .filter(|p| p.extension().map_or(false, |e| e.eq_ignore_ascii_case("png")))
        .map(|p| (relative_name(dir, &p), p))
        .collect())
}

fn validate(a: &ValidateArgs, s: &mut RunSummary) -> Result<(), CliError> {
    let set = load_annotations(&a.annotations, s)?;
    require(&a.images)?;
    s.input(&a.images)?;
    let dims = png_files(&a.images)?
        .par_iter()
        .map(|(name, path)| Ok((name.clone(), png_dimensions(path).map_err(|e| CliError::from(e).at(path))?)))
        .collect::<Result<BTreeMap<_, _>, CliError>>()?;
    let (report, clipped) = validate_against_images(&set, &dims);
    if let Some(path) = &a.report {
        write(path, pretty(&to_json(&report)).as_bytes(), s)?;
    }
    if let Some(path) = &a.out {
        write(path, emit_annotations(&clipped).as_bytes(), s)?;
    }
    s.result = json!({
        "clean": report.is_clean(),
        "issues": report.issues.len(),
        "flagged_images": report.flagged_images().len(),
        "clipped_vertices": report.clipped_vertices,
    });
    if a.strict && !report.is_clean() {
        return Err(CliError::Data(format!("{} validation issues", report.issues.len())).at(&a.annotations));
    }
    Ok(())
}

fn manifest(a: &ManifestArgs, cfg: &FileConfig, s: &mut RunSummary) -> Result<(), CliError> {
    let set = load_annotations(&a.annotations, s)?;
    require(&a.images)?;
    s.input(&a.images)?;
    let params = cfg.doppler.params();
    s.config = json!({ "doppler": cfg.doppler, "passthrough": cfg.passthrough_json() });
    let meta = set
        .records
        .par_iter()
        .filter_map(|r| {
            let path = a.images.join(&r.image_ref);
            if !path.exists() {
                warn!("{}: image not found, doppler flag defaults to false", path.display());
                return None;
            }
            Some(read_png(&path).map_err(|e| CliError::from(e).at(&path)).map(|img| {
                let m = ImageMeta {
                    channels: img.channels(),
                    doppler_detected: detect_doppler(&img, &params),
                };
                (r.image_ref.clone(), m)
            }))
        })
        .collect::<Result<BTreeMap<_, _>, CliError>>()?;
    let mut m = build_manifest(&set, &meta).map_err(|e| CliError::from(e).at(&a.annotations))?;
    if let Some(path) = &a.exclusions {
        require(path)?;
        s.input(path)?;
        let list: BTreeMap<String, String> = serde_json::from_slice(&read(path)?)
            .map_err(|e| CliError::Data(format!("exclusion list: {e}")).at(path))?;
        for unknown in apply_exclusions(&mut m, &list) {
            warn!("exclusion for unknown image {unknown}");
        }
    }
    m.passthrough = cfg.passthrough_json();
    write_manifest(&m, &a.out, s)?;
    s.result = to_json(&m.stats);
    Ok(())
}

fn variant(a: &VariantArgs, cfg: &FileConfig, s: &mut RunSummary) -> Result<(), CliError> {
    let m = load_manifest(&a.manifest, s)?;
    let v = if a.doppler.drop_doppler { Variant::V2 } else { Variant::V1 };
    let mut out = filter_variant(&m, v);
    if let Some(p) = cfg.passthrough_json() {
        out.passthrough = Some(p);
    }
    s.config = json!({ "variant": out.version_tag });
    write_manifest(&out, &a.out, s)?;
    s.result = json!({
        "before": m.stats,
        "after": out.stats,
    });
    Ok(())
}

fn split(a: &SplitArgs, cfg: &FileConfig, s: &mut RunSummary) -> Result<(), CliError> {
    let m = load_manifest(&a.manifest, s)?;
    let ratios = match &a.ratios {
        Some(r) => parse_ratios(r).map_err(usage)?,
        None => cfg.split.ratios,
    };
    let seed = a.seed.unwrap_or(cfg.split.seed);
    s.seed = Some(seed);
    s.config = json!({ "ratios": ratios, "seed": seed, "force": a.force });
    let sc = SplitConfig::new(ratios[0], ratios[1], ratios[2], seed)?;
    let mut out = assign_splits(&m, &sc, a.force)?;
    if let Some(p) = cfg.passthrough_json() {
        out.passthrough = Some(p);
    }
    write_manifest(&out, &a.out, s)?;
    let live = out.stats.n_images.max(1) as f64;
    let per_bucket: BTreeMap<String, Value> = out
        .bucket_patients()
        .into_iter()
        .map(|(b, patients)| {
            let images = out.bucket_entries(b).count();
            let v = json!({ "patients": patients.len(), "images": images, "share": images as f64 / live });
            (b.to_string(), v)
        })
        .collect();
    s.result = to_json(&per_bucket);
    Ok(())
}

fn buckets(b: Option<BucketArg>) -> Vec<Bucket> {
    match b {
        Some(b) => vec![b.into()],
        None => Bucket::ALL.to_vec(),
    }
}

fn export(a: &ExportArgs, s: &mut RunSummary) -> Result<(), CliError> {
    let m = load_manifest(&a.manifest, s)?;
    let set = load_annotations(&a.annotations, s)?;
    s.config = json!({ "format": format!("{:?}", a.format).to_lowercase(), "bucket": a.bucket.map(|b| Bucket::from(b)) });
    let summary = match a.format {
        ExportFormat::Yolo => {
            let images = a.images.as_ref().ok_or_else(|| usage("--images is required for yolo export"))?;
            require(images)?;
            s.input(images)?;
            write_yolo_dataset(&a.out, &m, &set, images, &buckets(a.bucket))?
        }
        ExportFormat::Coco => write_coco_dataset(&a.out, &m, &set, &buckets(a.bucket))?,
        ExportFormat::Masks => write_masks(&a.out, &m, &set, a.bucket.map(Bucket::from))?,
    };
    s.output(&a.out);
    s.result = to_json(&summary);
    Ok(())
}

fn synth(a: &SynthArgs, cfg: &FileConfig, s: &mut RunSummary) -> Result<(), CliError> {
    let mut sc = cfg.synth.clone();
    if let Some(seed) = a.seed {
        sc.seed = seed;
    }
    if let Some(n) = a.n_patients {
        sc.n_patients = n;
    }
    if let Some(f) = a.doppler_fraction {
        sc.doppler_fraction = f;
    }
    sc.validate()?;
    s.seed = Some(sc.seed);
    s.config = to_json(&sc);
    let image_dir = a.out.join("images");
    let (set, mut m) = generate_to_dir(&sc, &image_dir)?;
    m.passthrough = cfg.passthrough_json();
    s.output(&image_dir);
    write(&a.out.join("annotations.json"), emit_annotations(&set).as_bytes(), s)?;
    write_manifest(&m, &a.out.join("manifest.json"), s)?;
    s.result = json!({
        "stats": m.stats,
        "doppler_images": m.entries.iter().filter(|e| e.doppler).count(),
    });
    Ok(())
}

/// Records of `set` that are live in `m` (and in `bucket`, when given).
fn restrict(set: &AnnotationSet, m: &DatasetManifest, bucket: Option<Bucket>) -> AnnotationSet {
    let mut out = set.clone();
    out.records.retain(|r| {
        m.get(&r.image_ref)
            .map_or(false, |e| e.excluded.is_none() && (bucket.is_none() || e.split == bucket))
    });
    out
}

fn perturb_cmd(a: &PerturbArgs, cfg: &FileConfig, s: &mut RunSummary) -> Result<(), CliError> {
    let mut set = load_annotations(&a.annotations, s)?;
    if let Some(path) = &a.manifest {
        let m = load_manifest(path, s)?;
        set = restrict(&set, &m, a.bucket.map(Bucket::from));
    }
    let mut pc = cfg.perturb.clone();
    if let Some(v) = a.drop {
        pc.drop_rate = v;
    }
    if let Some(v) = a.spurious {
        pc.spurious_rate = v;
    }
    if let Some(v) = a.jitter {
        pc.jitter_px = v;
    }
    if let Some(v) = a.seed {
        pc.seed = v;
    }
    pc.validate()?;
    s.seed = Some(pc.seed);
    s.config = json!({ "perturb": pc, "bucket": a.bucket.map(Bucket::from) });
    let (preds, planted) = perturb(&set, &pc)?;
    write(&a.out, preds.to_json().as_bytes(), s)?;
    s.result = json!({
        "images": preds.images.len(),
        "ground_truth": set.nodule_count(),
        "detections": preds.detection_count(),
        "planted": planted,
    });
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, cfg: &FileConfig, s: &mut RunSummary) -> Result<(), CliError> {
    let gt = load_annotations(&a.gt, s)?;
    require(&a.pred)?;
    s.input(&a.pred)?;
    let preds = parse_predictions(&read(&a.pred)?).map_err(|e| CliError::from(e).at(&a.pred))?;
    let m = match &a.manifest {
        Some(p) => Some(load_manifest(p, s)?),
        None => None,
    };
    let ec = EvalConfig {
        iou_threshold: a.iou.unwrap_or(cfg.eval.iou_threshold),
        score_floor: a.score_floor.unwrap_or(cfg.eval.score_floor),
        interpolation: match a.interpolation {
            Some(InterpolationArg::Point101) => ApInterpolation::Point101,
            Some(InterpolationArg::AllPoint) => ApInterpolation::AllPoint,
            None => cfg.eval.interpolation,
        },
    };
    let model_tag = a.model_tag.clone().unwrap_or_else(|| cfg.eval.model_tag.clone());
    let bucket = a.bucket.map(Bucket::from);
    s.config = json!({ "eval": ec, "model_tag": model_tag, "bucket": bucket });
    let mut r = evaluate(&preds, &gt, m.as_ref(), bucket, &ec).map_err(|e| CliError::from(e).at(&a.pred))?;
    r.meta.model_tag = model_tag;
    s.seed = r.meta.seed;
    write(&a.out, r.to_json().as_bytes(), s)?;
    let mut result: BTreeMap<&str, Value> = r.scalars().into_iter().map(|(k, v)| (k, json!(v))).collect();
    result.insert("tp_mask", json!(r.counts_mask.tp));
    result.insert("fp_mask", json!(r.counts_mask.fp));
    result.insert("fn_mask", json!(r.counts_mask.fn_));
    s.result = to_json(&result);
    Ok(())
}

fn report(a: &ReportArgs, s: &mut RunSummary) -> Result<(), CliError> {
    require(&a.input)?;
    s.input(&a.input)?;
    let r = EvalReport::from_json(&read(&a.input)?).map_err(|e| CliError::Data(e.to_string()).at(&a.input))?;
    let format = match a.format {
        ReportFormatArg::Csv => ReportFormat::Csv,
        ReportFormatArg::Json => ReportFormat::Json,
        ReportFormatArg::Svg => ReportFormat::Svg,
    };
    s.config = json!({ "format": format.extension() });
    s.seed = r.meta.seed;
    let path = write_report(&r, format, &a.out_dir).map_err(|e| CliError::from(e).at(&a.out_dir))?;
    s.output(&path);
    Ok(())
}
