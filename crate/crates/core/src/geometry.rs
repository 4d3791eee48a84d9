//! Polygon arithmetic, rasterization and IoU.
//!
//! Coordinates are continuous pixel coordinates with the origin at the
//! top-left corner and y pointing down. Pixel `(i, j)` covers
//! `[i, i+1) x [j, j+1)` and is considered inside a polygon when its center
//! `(i + 0.5 + PIXEL_NUDGE, j + 0.5)` is inside under the even-odd rule.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Horizontal offset added to every pixel-center sample so that a vertex
/// sitting exactly on a pixel center has a defined membership.
pub const PIXEL_NUDGE: f64 = 1.0 / (1u64 << 20) as f64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate polygon: {0}")]
    DegeneratePolygon(String),
    #[error("rasterized mask is empty")]
    EmptyMask,
    #[error("mask dimensions differ: {a_width}x{a_height} vs {b_width}x{b_height}")]
    DimensionMismatch {
        a_width: u32,
        a_height: u32,
        b_width: u32,
        b_height: u32,
    },
    #[error("invalid frame size {width}x{height}")]
    InvalidFrame { width: u32, height: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<(f64, f64)> for Point2D {
    fn from((x, y): (f64, f64)) -> Self {
        Self { x, y }
    }
}

/// TIRADS risk category attached to a nodule label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tirads {
    TR1,
    TR2,
    TR3,
    TR4,
    TR5,
}

impl Tirads {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "TR1" => Some(Self::TR1),
            "TR2" => Some(Self::TR2),
            "TR3" => Some(Self::TR3),
            "TR4" => Some(Self::TR4),
            "TR5" => Some(Self::TR5),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::TR1 => "TR1",
            Self::TR2 => "TR2",
            Self::TR3 => "TR3",
            Self::TR4 => "TR4",
            Self::TR5 => "TR5",
        }
    }
}

impl fmt::Display for Tirads {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One labeled nodule outline. The closing edge from the last vertex back
/// to the first is implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct NodulePolygon {
    vertices: Vec<Point2D>,
    pub class_id: u32,
    pub tirads: Option<Tirads>,
    pub attrs: BTreeMap<String, String>,
}

impl NodulePolygon {
    /// Builds a class-0 polygon, rejecting fewer than three vertices,
    /// non-finite coordinates and zero signed area.
    pub fn new(vertices: Vec<Point2D>) -> Result<Self, GeometryError> {
        Self::with_class(vertices, 0)
    }

    pub fn with_class(vertices: Vec<Point2D>, class_id: u32) -> Result<Self, GeometryError> {
        validate_vertices(&vertices)?;
        Ok(Self {
            vertices,
            class_id,
            tirads: None,
            attrs: BTreeMap::new(),
        })
    }

    pub fn from_coords(coords: &[(f64, f64)]) -> Result<Self, GeometryError> {
        Self::new(coords.iter().copied().map(Point2D::from).collect())
    }

    pub fn vertices(&self) -> &[Point2D] {
        &self.vertices
    }

    pub fn into_vertices(self) -> Vec<Point2D> {
        self.vertices
    }

    /// Replaces the vertex list, keeping class and attributes.
    pub fn with_vertices(&self, vertices: Vec<Point2D>) -> Result<Self, GeometryError> {
        validate_vertices(&vertices)?;
        Ok(Self {
            vertices,
            class_id: self.class_id,
            tirads: self.tirads,
            attrs: self.attrs.clone(),
        })
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self, GeometryError> {
        self.with_vertices(
            self.vertices
                .iter()
                .map(|p| Point2D::new(p.x + dx, p.y + dy))
                .collect(),
        )
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, GeometryError> {
        self.with_vertices(
            self.vertices
                .iter()
                .map(|p| Point2D::new(p.x * factor, p.y * factor))
                .collect(),
        )
    }

    pub fn signed_area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn perimeter(&self) -> f64 {
        edges(&self.vertices)
            .map(|(a, b)| (b.x - a.x).hypot(b.y - a.y))
            .sum()
    }
}

fn validate_vertices(vertices: &[Point2D]) -> Result<(), GeometryError> {
    if vertices.len() < 3 {
        return Err(GeometryError::DegeneratePolygon(format!(
            "{} vertices, need at least 3",
            vertices.len()
        )));
    }
    if let Some(p) = vertices.iter().find(|p| !p.is_finite()) {
        return Err(GeometryError::DegeneratePolygon(format!(
            "non-finite vertex ({}, {})",
            p.x, p.y
        )));
    }
    if signed_area(vertices) == 0.0 {
        return Err(GeometryError::DegeneratePolygon("zero area".into()));
    }
    Ok(())
}

fn edges(vertices: &[Point2D]) -> impl Iterator<Item = (Point2D, Point2D)> + '_ {
    let n = vertices.len();
    (0..n).map(move |i| (vertices[i], vertices[(i + 1) % n]))
}

fn signed_area(vertices: &[Point2D]) -> f64 {
    let twice: f64 = edges(vertices).map(|(a, b)| a.x * b.y - b.x * a.y).sum();
    twice / 2.0
}

/// Unsigned shoelace area in px².
pub fn shoelace_area(polygon: &NodulePolygon) -> f64 {
    polygon.signed_area().abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// Returns `None` when the corners are not ordered.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Option<Self> {
        (x_min <= x_max && y_min <= y_max).then_some(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Grows the box by `margin` on every side.
    pub fn expanded(&self, margin: f64) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min - margin,
            y_min: self.y_min - margin,
            x_max: self.x_max + margin,
            y_max: self.y_max + margin,
        }
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    /// COCO layout `[x, y, w, h]`.
    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }
}

/// Tight axis-aligned hull of the vertices.
pub fn polygon_bbox(polygon: &NodulePolygon) -> BoundingBox {
    let mut bbox = BoundingBox {
        x_min: f64::INFINITY,
        y_min: f64::INFINITY,
        x_max: f64::NEG_INFINITY,
        y_max: f64::NEG_INFINITY,
    };
    for p in polygon.vertices() {
        bbox.x_min = bbox.x_min.min(p.x);
        bbox.y_min = bbox.y_min.min(p.y);
        bbox.x_max = bbox.x_max.max(p.x);
        bbox.y_max = bbox.y_max.max(p.y);
    }
    bbox
}

/// Intersection over union of two boxes. Zero-area boxes score 0 against
/// everything, themselves included.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Row-major bit grid, one bit per pixel, rows packed into `u64` words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    width: u32,
    height: u32,
    words: Vec<u64>,
}

impl Bitmap {
    pub fn new(width: u32, height: u32) -> Self {
        let bits = width as usize * height as usize;
        Self {
            width,
            height,
            words: vec![0; bits.div_ceil(64)],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        let i = self.index(x, y);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32) {
        let i = self.index(x, y);
        self.words[i / 64] |= 1 << (i % 64);
    }

    /// Sets pixels `[x0, x1)` of row `y`.
    fn set_run(&mut self, y: u32, x0: u32, x1: u32) {
        if x0 >= x1 {
            return;
        }
        let start = self.index(x0, y);
        let end = self.index(x1, y);
        let (first_word, last_word) = (start / 64, (end - 1) / 64);
        for w in first_word..=last_word {
            let lo = if w == first_word { start % 64 } else { 0 };
            let hi = if w == last_word { (end - 1) % 64 + 1 } else { 64 };
            let run = if hi - lo == 64 {
                u64::MAX
            } else {
                ((1u64 << (hi - lo)) - 1) << lo
            };
            self.words[w] |= run;
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn same_frame(&self, other: &Bitmap) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn check_frame(&self, other: &Bitmap) -> Result<(), GeometryError> {
        if self.same_frame(other) {
            Ok(())
        } else {
            Err(GeometryError::DimensionMismatch {
                a_width: self.width,
                a_height: self.height,
                b_width: other.width,
                b_height: other.height,
            })
        }
    }

    pub fn union_with(&mut self, other: &Bitmap) -> Result<(), GeometryError> {
        self.check_frame(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
        Ok(())
    }

    pub fn and_count(&self, other: &Bitmap) -> Result<u64, GeometryError> {
        self.check_frame(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as u64)
            .sum())
    }

    pub fn or_count(&self, other: &Bitmap) -> Result<u64, GeometryError> {
        self.check_frame(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as u64)
            .sum())
    }

    /// Iterates set pixels in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let width = self.width as usize;
        self.words.iter().enumerate().flat_map(move |(w, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let tz = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let i = w * 64 + tz;
                Some(((i % width) as u32, (i / width) as u32))
            })
        })
    }
}

/// Non-empty binary mask of one instance with its cached area and tight
/// pixel bounding box. The box spans pixel extents, so a single pixel at
/// `(3, 4)` has box `(3, 4, 4, 5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    bits: Bitmap,
    area: u64,
    bbox: BoundingBox,
}

impl InstanceMask {
    pub fn from_bitmap(bits: Bitmap) -> Result<Self, GeometryError> {
        let mut area = 0u64;
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
        for (x, y) in bits.iter_set() {
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        if area == 0 {
            return Err(GeometryError::EmptyMask);
        }
        let bbox = BoundingBox {
            x_min: x0 as f64,
            y_min: y0 as f64,
            x_max: x1 as f64 + 1.0,
            y_max: y1 as f64 + 1.0,
        };
        Ok(Self { bits, area, bbox })
    }

    pub fn width(&self) -> u32 {
        self.bits.width
    }

    pub fn height(&self) -> u32 {
        self.bits.height
    }

    pub fn area(&self) -> u64 {
        self.area
    }

    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    pub fn bits(&self) -> &Bitmap {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits.get(x, y)
    }
}

/// Sorted x positions where polygon edges cross the horizontal line `y`.
/// Uses a half-open rule on edge endpoints, so a vertex lying on the line is
/// counted once for a crossing edge pair and zero or two times for an
/// extremum.
pub(crate) fn scanline_crossings(vertices: &[Point2D], y: f64, out: &mut Vec<f64>) {
    out.clear();
    for (a, b) in edges(vertices) {
        if (a.y > y) != (b.y > y) {
            out.push((b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x);
        }
    }
    out.sort_by(f64::total_cmp);
}

/// Rasterizes `polygon` into a `width x height` frame using even-odd fill at
/// nudged pixel centers. Pixels outside the frame are dropped.
pub fn rasterize(
    polygon: &NodulePolygon,
    width: u32,
    height: u32,
) -> Result<InstanceMask, GeometryError> {
    if width == 0 || height == 0 {
        return Err(GeometryError::InvalidFrame { width, height });
    }
    let bbox = polygon_bbox(polygon);
    let mut bits = Bitmap::new(width, height);

    let row_lo = (bbox.y_min - 0.5).floor().max(0.0) as i64;
    let row_hi = ((bbox.y_max - 0.5).ceil() as i64).min(height as i64 - 1);
    let mut crossings = Vec::with_capacity(polygon.vertices().len());
    for row in row_lo..=row_hi {
        let y = row as f64 + 0.5;
        scanline_crossings(polygon.vertices(), y, &mut crossings);
        // A sample point px is inside when an odd number of crossings lie
        // strictly to its right, i.e. px < c for an odd count of c.
        let n = crossings.len();
        // Spans where the count of crossings <= px is k have parity n - k.
        for k in 0..n {
            if (n - k) % 2 == 0 {
                continue;
            }
            // Pixels whose sample satisfies crossings[k-1] <= px < crossings[k].
            let lo = if k == 0 { f64::NEG_INFINITY } else { crossings[k - 1] };
            let hi = crossings[k];
            let (x0, x1) = pixel_span(lo, hi, width);
            bits.set_run(row as u32, x0, x1);
        }
    }
    InstanceMask::from_bitmap(bits)
}

/// Columns `i` in `[0, width)` with `lo <= i + 0.5 + NUDGE < hi`.
fn pixel_span(lo: f64, hi: f64, width: u32) -> (u32, u32) {
    let sample = |i: i64| i as f64 + 0.5 + PIXEL_NUDGE;
    let first = |bound: f64| -> i64 {
        if bound == f64::NEG_INFINITY {
            return 0;
        }
        // Smallest i with sample(i) >= bound, corrected for rounding.
        let mut i = (bound - 0.5 - PIXEL_NUDGE).ceil() as i64;
        while sample(i) < bound {
            i += 1;
        }
        while sample(i - 1) >= bound {
            i -= 1;
        }
        i
    };
    let start = first(lo).clamp(0, width as i64);
    let end = first(hi).clamp(0, width as i64);
    (start as u32, end.max(start) as u32)
}

/// Intersection over union of two masks sharing a frame.
pub fn mask_iou(a: &InstanceMask, b: &InstanceMask) -> Result<f64, GeometryError> {
    let inter = a.bits.and_count(&b.bits)?;
    let union = a.area + b.area - inter;
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}
