//! Rendering of evaluation reports as a CSV row, JSON, or an SVG PR plot.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::eval::{EvalReport, PrPoint};
use crate::fsutil::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Svg => "svg",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(format!("unknown report format {other:?} (csv|json|svg)")),
        }
    }
}

pub const CSV_HEADER: &str = "model_tag,dataset_version,dice_pixel,dice_instance,map50_mask,map50_box,precision_mask,precision_box,recall_mask,recall_box";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn csv_row(r: &EvalReport) -> String {
    let mut row = format!("{},{}", csv_field(&r.meta.model_tag), csv_field(&r.meta.dataset_version));
    for (_, v) in r.scalars() {
        write!(row, ",{v:.3}").unwrap();
    }
    row
}

const WIDTH: f64 = 560.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const TOP: f64 = 40.0;
const PLOT_W: f64 = 400.0;
const PLOT_H: f64 = 320.0;

/// Polyline point list in data coordinates (recall, precision).
pub fn svg_points(curve: &[PrPoint]) -> String {
    curve
        .iter()
        .map(|p| format!("{},{}", p.recall, p.precision))
        .collect::<Vec<_>>()
        .join(" ")
}

fn to_px(p: &PrPoint) -> (f64, f64) {
    (LEFT + p.recall * PLOT_W, TOP + (1.0 - p.precision) * PLOT_H)
}

pub fn render_svg(r: &EvalReport) -> String {
    let mut s = String::new();
    let w = |s: &mut String, line: String| {
        s.push_str(&line);
        s.push('\n');
    };
    w(&mut s, format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    ));
    w(&mut s, format!(r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#));
    let title = format!(
        "PR @ IoU {} {} {}",
        r.meta.iou_threshold,
        r.meta.dataset_version,
        r.meta.bucket.map(|b| b.as_str()).unwrap_or("")
    );
    w(&mut s, format!(r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, LEFT + PLOT_W / 2.0, escape(title.trim())));
    w(&mut s, format!(
        r##"<rect x="{LEFT}" y="{TOP}" width="{PLOT_W}" height="{PLOT_H}" fill="none" stroke="#444"/>"##
    ));
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let x = LEFT + t * PLOT_W;
        let y = TOP + (1.0 - t) * PLOT_H;
        w(&mut s, format!(r##"<line x1="{x}" y1="{TOP}" x2="{x}" y2="{}" stroke="#ddd"/>"##, TOP + PLOT_H));
        w(&mut s, format!(r##"<line x1="{LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, LEFT + PLOT_W));
        w(&mut s, format!(r#"<text x="{x}" y="{}" text-anchor="middle">{t}</text>"#, TOP + PLOT_H + 16.0));
        w(&mut s, format!(r#"<text x="{}" y="{}" text-anchor="end">{t}</text>"#, LEFT - 6.0, y + 4.0));
    }
    w(&mut s, format!(r#"<text x="{}" y="{}" text-anchor="middle">Recall</text>"#, LEFT + PLOT_W / 2.0, TOP + PLOT_H + 36.0));
    w(&mut s, format!(
        r#"<text x="20" y="{0}" text-anchor="middle" transform="rotate(-90 20 {0})">Precision</text>"#,
        TOP + PLOT_H / 2.0
    ));

    // Curves are drawn in data coordinates so the point lists are the PR
    // points themselves.
    let transform = format!("translate({LEFT} {}) scale({PLOT_W} -{PLOT_H})", TOP + PLOT_H);
    let curves = [
        ("mask", "#1f77b4", &r.pr_curve_mask, r.map50_mask),
        ("box", "#d62728", &r.pr_curve_box, r.map50_box),
    ];
    for (i, (name, color, curve, ap)) in curves.iter().enumerate() {
        w(&mut s, format!(
            r#"<polyline id="pr-{name}" transform="{transform}" fill="none" stroke="{color}" stroke-width="2" vector-effect="non-scaling-stroke" points="{}"/>"#,
            svg_points(curve)
        ));
        if let Some(op) = curve.last() {
            let (x, y) = to_px(op);
            w(&mut s, format!(
                r#"<circle id="op-{name}" cx="{x}" cy="{y}" r="5" fill="none" stroke="{color}" stroke-width="2"><title>operating point ({name}): recall {:.3}, precision {:.3}</title></circle>"#,
                op.recall, op.precision
            ));
        }
        let ly = TOP + 16.0 + 18.0 * i as f64;
        let lx = LEFT + PLOT_W + 12.0;
        w(&mut s, format!(r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 16.0));
        w(&mut s, format!(r#"<text x="{}" y="{}">{name} AP {ap:.3}</text>"#, lx + 20.0, ly + 4.0));
    }
    let ly = TOP + 16.0 + 18.0 * 2.0;
    let lx = LEFT + PLOT_W + 12.0;
    w(&mut s, format!(r##"<circle cx="{}" cy="{ly}" r="5" fill="none" stroke="#444"/>"##, lx + 8.0));
    w(&mut s, format!(r#"<text x="{}" y="{}">operating point</text>"#, lx + 20.0, ly + 4.0));
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_report(r: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => format!("{CSV_HEADER}\n{}\n", csv_row(r)),
        ReportFormat::Json => r.to_json(),
        ReportFormat::Svg => render_svg(r),
    }
}

/// `report_<version>_<bucket>_seed<seed>.<ext>`, with `all` for an
/// unsplit evaluation and `none` for a missing seed.
pub fn report_file_name(r: &EvalReport, format: ReportFormat) -> String {
    let version = if r.meta.dataset_version.is_empty() { "custom" } else { &r.meta.dataset_version };
    let bucket = r.meta.bucket.map(|b| b.as_str()).unwrap_or("all");
    let seed = r.meta.seed.map(|s| s.to_string()).unwrap_or_else(|| "none".into());
    format!("report_{version}_{bucket}_seed{seed}.{}", format.extension())
}

pub fn write_report(r: &EvalReport, format: ReportFormat, dir: &Path) -> io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(report_file_name(r, format));
    write_atomic(&path, render_report(r, format).as_bytes())?;
    Ok(path)
}
