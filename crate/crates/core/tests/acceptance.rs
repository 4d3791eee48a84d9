//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nodulekit::annotation::{emit_annotations, parse_annotations, AnnotationRecord, AnnotationSet};
use nodulekit::dicom::{decode_image, parse_dicom, DicomWriter, Tag, TransferSyntax};
use nodulekit::eval::{
    ap_from_ranked, evaluate, evaluate_cases, read_yolo_labels, ApInterpolation, Detection, EvalConfig,
    ImageCase, PredictionSet,
};
use nodulekit::export::{export_coco, export_yolo, write_coco_dataset, write_yolo_dataset, CocoDataset};
use nodulekit::geometry::{box_iou, mask_iou, polygon_bbox, rasterize, shoelace_area, NodulePolygon};
use nodulekit::image::{decode_png, encode_png, RasterImage};
use nodulekit::manifest::{
    assign_splits, filter_variant, Bucket, DatasetManifest, ManifestEntry, SplitConfig, Variant, VersionTag,
};
use nodulekit::synth::{generate, generate_to_dir, perturb, PerturbConfig, SynthConfig};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn identity_predictions(set: &AnnotationSet) -> PredictionSet {
    let mut preds = PredictionSet::default();
    for r in &set.records {
        let dets = r
            .nodules
            .iter()
            .map(|p| Detection {
                image_ref: r.image_ref.clone(),
                score: 1.0,
                polygon: p.clone(),
            })
            .collect();
        preds.images.insert(r.image_ref.clone(), dets);
    }
    preds
}

fn identity_suite() -> Outcome {
    let start = Instant::now();
    let cfg = SynthConfig {
        n_patients: 100,
        images_per_patient: (2, 2),
        nodules_per_image: (1, 3),
        seed: 1,
        ..Default::default()
    };
    let ds = generate(&cfg).map_err(|e| e.to_string())?;
    check(ds.annotations.records.len() == 200, "expected 200 images")?;
    let preds = identity_predictions(&ds.annotations);
    let r = evaluate(&preds, &ds.annotations, None, None, &EvalConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    for (name, v) in r.scalars() {
        check((v - 1.0).abs() <= 1e-9, format!("{name} = {v}"))?;
    }
    check(elapsed < Duration::from_secs(10), format!("took {}", secs(elapsed)))?;
    Ok(format!(
        "200 images, {} instances, all 8 metrics = 1.0, {}",
        ds.annotations.nodule_count(),
        secs(elapsed)
    ))
}

fn planted_error_suite() -> Outcome {
    let mut min_instances = usize::MAX;
    for seed in 0..10u64 {
        let cfg = SynthConfig {
            n_patients: 150,
            images_per_patient: (1, 3),
            nodules_per_image: (1, 3),
            seed: 100 + seed,
            ..Default::default()
        };
        let ds = generate(&cfg).map_err(|e| e.to_string())?;
        let n = ds.annotations.nodule_count();
        min_instances = min_instances.min(n);
        check(n >= 500, format!("seed {seed}: only {n} instances"))?;
        let pc = PerturbConfig {
            drop_rate: 0.2,
            spurious_rate: 0.1,
            jitter_px: 1.5,
            seed,
            ..Default::default()
        };
        let (preds, planted) = perturb(&ds.annotations, &pc).map_err(|e| e.to_string())?;
        let r = evaluate(&preds, &ds.annotations, None, None, &EvalConfig::default()).map_err(|e| e.to_string())?;
        for (kind, c) in [("mask", &r.counts_mask), ("box", &r.counts_box)] {
            check(
                (c.tp, c.fp, c.fn_) == (planted.kept, planted.spurious, planted.dropped),
                format!("seed {seed} {kind}: counts {:?} vs planted {planted:?}", (c.tp, c.fp, c.fn_)),
            )?;
        }
        let expected = planted.kept as f64 / n as f64;
        check(
            (r.recall_mask - expected).abs() <= 1e-12 && (r.recall_box - expected).abs() <= 1e-12,
            format!("seed {seed}: recall {} vs {expected}", r.recall_mask),
        )?;
        let p = planted.kept as f64 / (planted.kept + planted.spurious) as f64;
        check((r.precision_mask - p).abs() <= 1e-12, format!("seed {seed}: precision"))?;
    }
    Ok(format!("10 seeds, >= {min_instances} instances each, tp/fp/fn = planted exactly"))
}

fn ap_hand_check() -> Outcome {
    let sq = |x: f64| NodulePolygon::from_coords(&[(x, 0.0), (x + 10.0, 0.0), (x + 10.0, 10.0), (x, 10.0)]).unwrap();
    let record = AnnotationRecord {
        image_ref: "ap.png".into(),
        patient_id: "P".into(),
        width: 100,
        height: 20,
        nodules: vec![sq(0.0), sq(40.0)],
        no_finding: false,
        excluded: None,
        doppler: None,
        source_meta: BTreeMap::new(),
    };
    let det = |score, x| Detection { image_ref: "ap.png".into(), score, polygon: sq(x) };
    let dets = [det(0.9, 0.0), det(0.8, 80.0), det(0.7, 40.0)];
    let cases = [ImageCase::from_record(&record, dets.iter().collect())];
    let r = evaluate_cases(&cases, &EvalConfig::default()).map_err(|e| e.to_string())?;
    let expected = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
    check((r.map50_mask - 0.834983).abs() <= 1e-6, format!("mask AP {}", r.map50_mask))?;
    check((r.map50_box - 0.834983).abs() <= 1e-6, format!("box AP {}", r.map50_box))?;
    check((r.map50_mask - expected).abs() <= 1e-12, "mask AP differs from hand value")?;
    let ranked = ap_from_ranked(&[true, false, true], 2, ApInterpolation::Point101).map_err(|e| e.to_string())?;
    check((ranked - 0.834983).abs() <= 1e-6, format!("ranked AP {ranked}"))?;

    let empty = [ImageCase::from_record(&record, vec![])];
    let z = evaluate_cases(&empty, &EvalConfig::default()).map_err(|e| e.to_string())?;
    check(z.map50_mask == 0.0 && z.map50_box == 0.0, "zero-detection AP not 0")?;
    Ok(format!("AP = {:.6} (mask and box), zero-detection AP = 0", r.map50_mask))
}

fn geometry_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (w, h) = (48u32, 40u32);
    let polys: Vec<NodulePolygon> = (0..100)
        .map(|i| {
            if i % 2 == 0 {
                common::random_polygon(&mut rng, w, h, 12)
            } else {
                let cx = rng.gen_range(5.0..43.0);
                let cy = rng.gen_range(5.0..35.0);
                let n = rng.gen_range(3..16);
                common::random_star(&mut rng, cx, cy, 18.0, n)
            }
        })
        .collect();
    let grids: Vec<Vec<bool>> = polys.iter().map(|p| common::raster_oracle(p, w, h)).collect();
    let mut pixels = 0usize;
    for (i, (p, grid)) in polys.iter().zip(&grids).enumerate() {
        let any = grid.iter().any(|&b| b);
        match rasterize(p, w, h) {
            Ok(m) => {
                for y in 0..h {
                    for x in 0..w {
                        check(
                            m.get(x, y) == grid[(y * w + x) as usize],
                            format!("polygon {i}: pixel ({x},{y}) differs"),
                        )?;
                    }
                }
                pixels += m.area() as usize;
            }
            Err(_) => check(!any, format!("polygon {i}: rasterize empty but oracle not"))?,
        }
    }
    let mut pairs = 0;
    for i in 0..polys.len() {
        let j = (i * 37 + 11) % polys.len();
        if let (Ok(a), Ok(b)) = (rasterize(&polys[i], w, h), rasterize(&polys[j], w, h)) {
            let got = mask_iou(&a, &b).map_err(|e| e.to_string())?;
            let want = common::grid_iou(&grids[i], &grids[j]);
            check(got == want, format!("mask_iou {i},{j}: {got} vs {want}"))?;
            pairs += 1;
        }
        let got = box_iou(&polygon_bbox(&polys[i]), &polygon_bbox(&polys[j]));
        let want = common::box_iou_oracle(&polys[i], &polys[j]);
        check(got == want, format!("box_iou {i},{j}: {got} vs {want}"))?;
    }
    Ok(format!("100 polygons, {pixels} set pixels, {pairs} mask IoU pairs, 100 box IoU pairs, exact"))
}

fn skewed_manifest(n_patients: usize, seed: u64) -> DatasetManifest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for p in 0..n_patients {
        // Mostly one or two images, with a long tail up to 12.
        let n = if rng.gen_bool(0.1) { rng.gen_range(3..=12) } else { rng.gen_range(1..=2) };
        for k in 0..n {
            entries.push(ManifestEntry {
                image_ref: format!("p{p:05}_{k}.png"),
                patient_id: format!("P{p:05}"),
                n_nodules: 1,
                doppler: false,
                excluded: None,
                split: None,
            });
        }
    }
    DatasetManifest::from_entries(entries, VersionTag::V1).unwrap()
}

fn split_soundness() -> Outcome {
    let m = skewed_manifest(2000, 9);
    let cfg = SplitConfig::new(0.80, 0.15, 0.05, 42).map_err(|e| e.to_string())?;
    let a = assign_splits(&m, &cfg, false).map_err(|e| e.to_string())?;
    let b = assign_splits(&m, &cfg, false).map_err(|e| e.to_string())?;
    check(a == b, "same seed gave different assignments")?;

    let mut shuffled = m.clone();
    shuffled.entries.reverse();
    let c = assign_splits(&shuffled, &cfg, false).map_err(|e| e.to_string())?;
    let by_ref = |m: &DatasetManifest| -> BTreeMap<String, Option<Bucket>> {
        m.entries.iter().map(|e| (e.image_ref.clone(), e.split)).collect()
    };
    check(by_ref(&a) == by_ref(&c), "assignment depends on entry order")?;

    let mut owner: BTreeMap<&str, Bucket> = BTreeMap::new();
    let mut leaks = 0;
    for e in &a.entries {
        let bucket = e.split.ok_or("unassigned entry")?;
        if *owner.entry(e.patient_id.as_str()).or_insert(bucket) != bucket {
            leaks += 1;
        }
    }
    check(leaks == 0, format!("{leaks} leaking images"))?;
    let total = a.entries.len() as f64;
    let mut shares = Vec::new();
    for (bucket, target) in Bucket::ALL.iter().zip([0.80, 0.15, 0.05]) {
        let share = a.bucket_entries(*bucket).count() as f64 / total;
        check((share - target).abs() <= 0.02, format!("{bucket} share {share:.4} vs {target}"))?;
        shares.push(format!("{bucket} {:.2}%", share * 100.0));
    }
    Ok(format!("2000 patients, {} images, 0 leaks, deterministic, {}", a.entries.len(), shares.join(" / ")))
}

fn variant_deltas() -> Outcome {
    // Doppler-only patients: 91 with two images and 15 with one (197
    // images); 18 of those images carry a second nodule (215 nodules).
    // Remaining patients: 1963 with two images and 6 with one (3932
    // images); 260 images carry a second nodule (4192 nodules).
    let mut entries = Vec::new();
    let mut push = |patient: String, images: usize, doppler: bool, extra: &mut usize| {
        for k in 0..images {
            let two = *extra > 0;
            if two {
                *extra -= 1;
            }
            entries.push(ManifestEntry {
                image_ref: format!("{patient}_{k}.png"),
                patient_id: patient.clone(),
                n_nodules: 1 + two as usize,
                doppler,
                excluded: None,
                split: None,
            });
        }
    };
    let mut extra = 18;
    for p in 0..106 {
        push(format!("D{p:04}"), if p < 91 { 2 } else { 1 }, true, &mut extra);
    }
    let mut extra = 260;
    for p in 0..1969 {
        push(format!("G{p:04}"), if p < 1963 { 2 } else { 1 }, false, &mut extra);
    }
    let m = DatasetManifest::from_entries(entries, VersionTag::Custom).map_err(|e| e.to_string())?;
    let v1 = filter_variant(&m, Variant::V1);
    let v2 = filter_variant(&m, Variant::V2);
    let t = |m: &DatasetManifest| (m.stats.n_patients, m.stats.n_images, m.stats.n_nodules);
    check(t(&v1) == (2075, 4129, 4407), format!("V1 stats {:?}", t(&v1)))?;
    check(t(&v2) == (1969, 3932, 4192), format!("V2 stats {:?}", t(&v2)))?;
    Ok(format!("V1 {:?} -> V2 {:?}", t(&v1), t(&v2)))
}

fn round_trips() -> Outcome {
    let cfg = SynthConfig {
        n_patients: 40,
        images_per_patient: (1, 2),
        nodules_per_image: (1, 3),
        doppler_fraction: 0.2,
        seed: 77,
        ..Default::default()
    };
    let ds = generate(&cfg).map_err(|e| e.to_string())?;

    // YOLO
    let mut worst = 0.0f64;
    for r in &ds.annotations.records {
        let text = export_yolo(r).map_err(|e| e.to_string())?;
        let lines = read_yolo_labels(&text, r.width, r.height).map_err(|e| e.to_string())?;
        check(lines.len() == r.nodules.len(), "YOLO line count")?;
        for (line, orig) in lines.iter().zip(&r.nodules) {
            for (p, q) in line.polygon.vertices().iter().zip(orig.vertices()) {
                worst = worst
                    .max(((p.x - q.x) / r.width as f64).abs())
                    .max(((p.y - q.y) / r.height as f64).abs());
            }
        }
    }
    check(worst <= 1e-6, format!("YOLO error {worst}"))?;

    // COCO
    let split = assign_splits(&ds.manifest, &SplitConfig::new(0.8, 0.15, 0.05, 1).unwrap(), false)
        .map_err(|e| e.to_string())?;
    let mut coco_anns = 0;
    for bucket in Bucket::ALL {
        let coco = export_coco(&split, &ds.annotations, bucket).map_err(|e| e.to_string())?;
        let back: CocoDataset = serde_json::from_str(&coco.to_json()).map_err(|e| e.to_string())?;
        check(back == coco, format!("COCO {bucket} re-read differs"))?;
        for ann in &back.annotations {
            let img = &back.images[(ann.image_id - 1) as usize];
            let rec = ds.annotations.get(&img.file_name).ok_or("COCO image unknown")?;
            let coords: Vec<(f64, f64)> = ann.segmentation[0].chunks(2).map(|c| (c[0], c[1])).collect();
            let poly = NodulePolygon::from_coords(&coords).map_err(|e| e.to_string())?;
            check(rec.nodules.iter().any(|n| n.vertices() == poly.vertices()), "COCO polygon altered")?;
            check(ann.area == shoelace_area(&poly), "COCO area differs")?;
            check(ann.bbox == polygon_bbox(&poly).to_xywh(), "COCO bbox differs")?;
            coco_anns += 1;
        }
    }
    check(coco_anns == split.stats.n_nodules, "COCO annotation count")?;

    // DICOM -> PNG
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut dicoms = 0;
    for i in 0..60 {
        let channels = if i % 3 == 0 { 3 } else { 1 };
        let (w, h) = (rng.gen_range(1..40u32), rng.gen_range(1..40u32));
        let mut samples = vec![0u8; (w * h * channels) as usize];
        rng.fill_bytes(&mut samples);
        let img = RasterImage::new(w, h, channels as u8, samples.clone()).unwrap();
        let syntax = if i % 2 == 0 { TransferSyntax::ExplicitLittle } else { TransferSyntax::ImplicitLittle };
        let mut writer = DicomWriter::for_image(syntax, "PAT", &img);
        let mono1 = channels == 1 && i % 4 == 1;
        if mono1 {
            writer = writer.string(Tag::PHOTOMETRIC, *b"CS", "MONOCHROME1");
        }
        let obj = parse_dicom(&writer.to_bytes()).map_err(|e| e.to_string())?;
        let decoded = decode_image(&obj).map_err(|e| e.to_string())?;
        let png = encode_png(&decoded).map_err(|e| e.to_string())?;
        let back = decode_png(&png).map_err(|e| e.to_string())?;
        let expected: Vec<u8> = if mono1 { samples.iter().map(|v| 255 - v).collect() } else { samples };
        check(back.samples() == expected.as_slice(), format!("DICOM->PNG image {i} not lossless"))?;
        check((back.width(), back.height(), back.channels()) == (w, h, channels as u8), "PNG shape")?;
        dicoms += 1;
    }

    // Annotation JSON fixpoint
    let text = emit_annotations(&ds.annotations);
    let once = parse_annotations(text.as_bytes()).map_err(|e| e.to_string())?;
    check(once == ds.annotations, "annotation parse(emit(x)) != x")?;
    check(emit_annotations(&once) == text, "annotation emit not a fixpoint")?;

    Ok(format!(
        "YOLO max err {worst:.1e}, {coco_anns} COCO annotations exact, {dicoms} DICOM->PNG lossless, annotation JSON fixpoint"
    ))
}

fn mutate(base: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut b = base.to_vec();
    match rng.gen_range(0..4) {
        0 => {
            for _ in 0..rng.gen_range(1..8) {
                let i = rng.gen_range(0..b.len());
                b[i] = rng.gen();
            }
        }
        1 => b.truncate(rng.gen_range(0..b.len())),
        2 => {
            let i = rng.gen_range(0..b.len());
            let extra: Vec<u8> = (0..rng.gen_range(1..16)).map(|_| rng.gen()).collect();
            b.splice(i..i, extra);
        }
        _ => {
            let i = rng.gen_range(0..b.len());
            let j = rng.gen_range(i..b.len());
            b.drain(i..j);
        }
    }
    b
}

fn fuzz_totality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = RasterImage::new(8, 6, 1, (0..48).collect()).unwrap();
    let dicom_seed = DicomWriter::for_image(TransferSyntax::ExplicitLittle, "P1", &img).to_bytes();
    let ann_seed = br#"{"schema": "nodule-annotations/1", "records": [{"image": "a.png", "patient_id": "P1",
        "width": 64, "height": 48, "nodules": [{"polygon": [[1,1],[9,1],[9,7]], "tirads": "TR3",
        "attrs": {"shape": "oval"}}]}]}"#;
    let mut dicom_errors = 0;
    let mut ann_errors = 0;
    for i in 0..10_000 {
        let blob = if i % 2 == 0 {
            let mut b = vec![0u8; rng.gen_range(0..600)];
            rng.fill_bytes(&mut b);
            if i % 4 == 0 && b.len() >= 132 {
                b[128..132].copy_from_slice(b"DICM");
            }
            b
        } else {
            mutate(&dicom_seed, &mut rng)
        };
        let r = catch_unwind(AssertUnwindSafe(|| parse_dicom(&blob).and_then(|o| decode_image(&o).map(|_| ()))))
            .map_err(|_| format!("parse_dicom panicked on blob {i}"))?;
        dicom_errors += r.is_err() as usize;

        let blob = if i % 2 == 0 {
            let mut b = vec![0u8; rng.gen_range(0..300)];
            rng.fill_bytes(&mut b);
            b
        } else {
            mutate(ann_seed, &mut rng)
        };
        let r = catch_unwind(AssertUnwindSafe(|| parse_annotations(&blob)))
            .map_err(|_| format!("parse_annotations panicked on blob {i}"))?;
        ann_errors += r.is_err() as usize;
    }
    Ok(format!(
        "10000 blobs each, no panics ({dicom_errors} DICOM and {ann_errors} annotation structured errors)"
    ))
}

fn performance() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let cfg = SynthConfig {
        n_patients: 2075,
        images_per_patient: (1, 3),
        nodules_per_image: (1, 2),
        doppler_fraction: 0.048,
        seed: 2024,
        ..Default::default()
    };
    let images = dir.path().join("images");
    let (set, manifest) = generate_to_dir(&cfg, &images).map_err(|e| e.to_string())?;
    let n_images = set.records.len();
    check(n_images >= 4129, format!("only {n_images} images"))?;
    let split = assign_splits(&manifest, &SplitConfig::new(0.8, 0.15, 0.05, 42).unwrap(), false)
        .map_err(|e| e.to_string())?;
    let out = dir.path().join("export");
    write_yolo_dataset(&out, &split, &set, &images, &Bucket::ALL).map_err(|e| e.to_string())?;
    write_coco_dataset(&out, &split, &set, &Bucket::ALL).map_err(|e| e.to_string())?;
    let (preds, _) = perturb(
        &set,
        &PerturbConfig { drop_rate: 0.1, spurious_rate: 0.1, jitter_px: 1.0, seed: 1, ..Default::default() },
    )
    .map_err(|e| e.to_string())?;
    let eval_start = Instant::now();
    let r = evaluate(&preds, &set, None, None, &EvalConfig::default()).map_err(|e| e.to_string())?;
    let eval_time = eval_start.elapsed();
    let total = start.elapsed();
    check(r.meta.n_images == n_images, "evaluated image count")?;
    let labels = std::fs::read_dir(out.join("labels").join("train")).map_err(|e| e.to_string())?.count();
    check(labels > 0, "no labels written")?;
    check(total < Duration::from_secs(120), format!("pipeline took {}", secs(total)))?;
    check(eval_time < Duration::from_secs(30), format!("evaluation took {}", secs(eval_time)))?;
    Ok(format!(
        "{n_images} images, {} nodules: pipeline {}, evaluation {} ({} threads)",
        set.nodule_count(),
        secs(total),
        secs(eval_time),
        rayon::current_num_threads()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("identity suite", identity_suite),
        ("planted-error suite", planted_error_suite),
        ("AP hand-check", ap_hand_check),
        ("geometry oracles", geometry_oracles),
        ("split soundness", split_soundness),
        ("variant deltas", variant_deltas),
        ("round-trips", round_trips),
        ("fuzz totality", fuzz_totality),
        ("performance", performance),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
