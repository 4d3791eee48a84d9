//! Reference implementations used as test oracles. They favour obviousness
//! over speed: per-pixel loops, exhaustive replays.
#![allow(dead_code)]

use nodulekit::geometry::{NodulePolygon, Point2D, PIXEL_NUDGE};
use rand::Rng;

/// Even-odd test of one point against every edge, same crossing formula as
/// a textbook PNPOLY loop.
pub fn point_in_polygon(vertices: &[Point2D], px: f64, py: f64) -> bool {
    let n = vertices.len();
    let mut inside = false;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        if (a.y > py) != (b.y > py) && px < (b.x - a.x) * (py - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
    }
    inside
}

/// Pixel grid by sampling every pixel center.
pub fn raster_oracle(poly: &NodulePolygon, w: u32, h: u32) -> Vec<bool> {
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            out.push(point_in_polygon(
                poly.vertices(),
                x as f64 + 0.5 + PIXEL_NUDGE,
                y as f64 + 0.5,
            ));
        }
    }
    out
}

pub fn grid_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &q) in a.iter().zip(b) {
        inter += (p && q) as u64;
        union += (p || q) as u64;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Box IoU from vertex extrema, written out longhand.
pub fn box_iou_oracle(a: &NodulePolygon, b: &NodulePolygon) -> f64 {
    let ext = |p: &NodulePolygon| {
        let xs = p.vertices().iter().map(|v| v.x);
        let ys = p.vertices().iter().map(|v| v.y);
        (
            xs.clone().fold(f64::INFINITY, f64::min),
            ys.clone().fold(f64::INFINITY, f64::min),
            xs.fold(f64::NEG_INFINITY, f64::max),
            ys.fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let (ax0, ay0, ax1, ay1) = ext(a);
    let (bx0, by0, bx1, by1) = ext(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if inter <= 0.0 || union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Random polygon with 3..=max_vertices vertices inside a slightly
/// enlarged frame; may self-intersect.
pub fn random_polygon<R: Rng>(rng: &mut R, w: u32, h: u32, max_vertices: usize) -> NodulePolygon {
    loop {
        let n = rng.gen_range(3..=max_vertices);
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let r = rng.gen_range(1.0..(w.min(h) as f64 / 2.0));
        let vertices: Vec<Point2D> = (0..n)
            .map(|_| Point2D::new(cx + rng.gen_range(-r..r), cy + rng.gen_range(-r..r)))
            .collect();
        if let Ok(p) = NodulePolygon::new(vertices) {
            return p;
        }
    }
}

/// Star-shaped (simple) polygon around a center.
pub fn random_star<R: Rng>(rng: &mut R, cx: f64, cy: f64, r_max: f64, n: usize) -> NodulePolygon {
    let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    let vertices = angles
        .iter()
        .map(|&t| {
            let r = rng.gen_range(r_max * 0.3..=r_max);
            Point2D::new(cx + r * t.cos(), cy + r * t.sin())
        })
        .collect();
    NodulePolygon::new(vertices).unwrap_or_else(|_| random_star(rng, cx, cy, r_max, n))
}

/// Replays greedy matching literally: repeatedly take the highest-scoring
/// unprocessed detection (earliest on ties) and give it the best remaining
/// same-class ground truth. Returns per-detection TP flags and (tp, fp, fn).
pub fn greedy_oracle(
    scores: &[f64],
    det_class: &[u32],
    gt_class: &[u32],
    iou: &dyn Fn(usize, usize) -> f64,
    threshold: f64,
) -> (Vec<bool>, (u64, u64, u64)) {
    let mut done = vec![false; scores.len()];
    let mut taken = vec![false; gt_class.len()];
    let mut tp_flags = vec![false; scores.len()];
    for _ in 0..scores.len() {
        let mut pick: Option<usize> = None;
        for d in 0..scores.len() {
            if done[d] {
                continue;
            }
            match pick {
                Some(p) if scores[d] <= scores[p] => {}
                _ => pick = Some(d),
            }
        }
        let d = pick.unwrap();
        done[d] = true;
        let mut best: Option<(usize, f64)> = None;
        for g in 0..gt_class.len() {
            if taken[g] || gt_class[g] != det_class[d] {
                continue;
            }
            let v = iou(d, g);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v >= threshold {
                taken[g] = true;
                tp_flags[d] = true;
            }
        }
    }
    let tp = tp_flags.iter().filter(|&&f| f).count() as u64;
    (
        tp_flags,
        (tp, scores.len() as u64 - tp, gt_class.len() as u64 - tp),
    )
}

/// 101-point interpolated AP from ranked TP flags, by brute force over all
/// prefixes for every grid recall.
pub fn ap_oracle(ranked_tp: &[bool], n_gt: usize) -> f64 {
    let prefixes: Vec<(f64, f64)> = (1..=ranked_tp.len())
        .map(|k| {
            let tp = ranked_tp[..k].iter().filter(|&&f| f).count() as f64;
            (tp / n_gt as f64, tp / k as f64)
        })
        .collect();
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let best = prefixes
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / 101.0
}
