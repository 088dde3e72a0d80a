//! Static SVG heatmaps for frequency, diff, shared-expert and similarity grids.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::analysis::SimilarityReport;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub type Rgb = (u8, u8, u8);

const WHITE: Rgb = (255, 255, 255);
const DARK_RED: Rgb = (103, 0, 13);
const DARK_BLUE: Rgb = (5, 48, 97);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorScale {
    /// White at the grid minimum to dark red at the maximum.
    Sequential,
    /// Blue through white (exactly at zero) to red, symmetric about zero.
    Diverging,
}

#[derive(Debug, Clone)]
pub struct HeatmapSpec {
    pub grid: Matrix<f64>,
    pub scale: ColorScale,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub cell_width: u32,
    pub cell_height: u32,
    /// Print each cell's value inside it.
    pub annotate: bool,
    pub row_labels: Option<Vec<String>>,
    pub col_labels: Option<Vec<String>>,
}

impl HeatmapSpec {
    pub fn new(grid: Matrix<f64>, scale: ColorScale, title: &str) -> Self {
        Self {
            grid,
            scale,
            title: title.to_string(),
            x_label: "expert".into(),
            y_label: "layer".into(),
            cell_width: 4,
            cell_height: 12,
            annotate: false,
            row_labels: None,
            col_labels: None,
        }
    }
}

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    let mix = |x: u8, y: u8| (x as f64 + (y as f64 - x as f64) * t).round() as u8;
    (mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Value range the scale maps onto: `(min, max)` for sequential, `(−m, m)` for diverging.
pub fn scale_domain(grid: &Matrix<f64>, scale: ColorScale) -> (f64, f64) {
    let lo = grid.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    match scale {
        ColorScale::Sequential => (lo, hi),
        ColorScale::Diverging => {
            let m = lo.abs().max(hi.abs());
            (-m, m)
        }
    }
}

pub fn color_for(value: f64, scale: ColorScale, domain: (f64, f64)) -> Rgb {
    let (lo, hi) = domain;
    match scale {
        ColorScale::Sequential => {
            let t = if hi > lo { ((value - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
            lerp(WHITE, DARK_RED, t)
        }
        ColorScale::Diverging => {
            let m = hi.abs().max(lo.abs());
            if m == 0.0 || value == 0.0 {
                return WHITE;
            }
            let t = (value / m).clamp(-1.0, 1.0);
            if t > 0.0 {
                lerp(WHITE, DARK_RED, t)
            } else {
                lerp(WHITE, DARK_BLUE, -t)
            }
        }
    }
}

pub fn hex_color(c: Rgb) -> String {
    format!("#{:02x}{:02x}{:02x}", c.0, c.1, c.2)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn format_value(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e6 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// SVG document for a heatmap: one `rect.cell` per grid entry, axes and a legend.
pub fn heatmap_svg(spec: &HeatmapSpec) -> Result<String> {
    let (rows, cols) = spec.grid.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Empty("heatmap grid is empty".into()));
    }
    if !spec.grid.is_finite() {
        return Err(Error::NonFiniteInput("heatmap cell".into()));
    }
    let (cw, ch) = (spec.cell_width.max(1) as usize, spec.cell_height.max(1) as usize);
    let left = 70;
    let top = 40;
    let plot_w = cols * cw;
    let plot_h = rows * ch;
    let legend_x = left + plot_w + 30;
    let width = legend_x + 90;
    let height = (top + plot_h + 60).max(top + 220);
    let domain = scale_domain(&spec.grid, spec.scale);

    let mut s = String::with_capacity(rows * cols * 80 + 2048);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(s, "<title>{}</title>", escape(&spec.title));
    let _ = writeln!(s, r##"<rect class="background" x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>"##);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-size="16" text-anchor="middle">{}</text>"#, left + plot_w / 2, escape(&spec.title));

    let _ = writeln!(s, r#"<g class="cells" shape-rendering="crispEdges">"#);
    for r in 0..rows {
        for c in 0..cols {
            let v = spec.grid.get(r, c);
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{}" y="{}" width="{cw}" height="{ch}" fill="{}"><title>{r},{c}: {v}</title></rect>"#,
                left + c * cw,
                top + r * ch,
                hex_color(color_for(v, spec.scale, domain)),
            );
        }
    }
    let _ = writeln!(s, "</g>");

    if spec.annotate {
        let _ = writeln!(s, r#"<g class="annotations" font-size="{}" text-anchor="middle">"#, (ch / 3).clamp(8, 14));
        for r in 0..rows {
            for c in 0..cols {
                let v = spec.grid.get(r, c);
                let (lo, hi) = domain;
                let dark = hi > lo && (v - lo) / (hi - lo) > 0.6;
                let _ = writeln!(
                    s,
                    r#"<text class="value" x="{}" y="{}" dominant-baseline="middle" fill="{}">{}</text>"#,
                    left + c * cw + cw / 2,
                    top + r * ch + ch / 2,
                    if dark { "#ffffff" } else { "#000000" },
                    format_value(v)
                );
            }
        }
        let _ = writeln!(s, "</g>");
    }

    // Axes.
    let _ = writeln!(s, r##"<g class="axes" stroke="#000000" stroke-width="1">"##);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}"/>"#, top + plot_h);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}"/>"#, top + plot_h, left + plot_w);
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="ticks" font-size="10">"#);
    let row_step = (12 / ch).max(1);
    for r in (0..rows).step_by(row_step) {
        let label = spec.row_labels.as_ref().map_or_else(|| r.to_string(), |l| l[r].clone());
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
            left - 4,
            top + r * ch + ch / 2,
            escape(&label)
        );
    }
    let col_step = (32 / cw).max(1);
    for c in (0..cols).step_by(col_step) {
        let label = spec.col_labels.as_ref().map_or_else(|| c.to_string(), |l| l[c].clone());
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            left + c * cw + cw / 2,
            top + plot_h + 14,
            escape(&label)
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
        left + plot_w / 2,
        top + plot_h + 34,
        escape(&spec.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        top + plot_h / 2,
        escape(&spec.y_label)
    );

    // Legend: gradient from the domain minimum (bottom) to maximum (top).
    let stops: Vec<(f64, Rgb)> = match spec.scale {
        ColorScale::Sequential => vec![(0.0, WHITE), (1.0, DARK_RED)],
        ColorScale::Diverging => vec![(0.0, DARK_BLUE), (0.5, WHITE), (1.0, DARK_RED)],
    };
    let _ = writeln!(s, r#"<defs><linearGradient id="legend-gradient" x1="0" y1="1" x2="0" y2="0">"#);
    for (off, c) in stops {
        let _ = writeln!(s, r#"<stop offset="{off}" stop-color="{}"/>"#, hex_color(c));
    }
    let _ = writeln!(s, "</linearGradient></defs>");
    let _ = writeln!(s, r#"<g class="legend" font-size="10">"#);
    let _ = writeln!(
        s,
        r##"<rect x="{legend_x}" y="{top}" width="16" height="160" fill="url(#legend-gradient)" stroke="#000000"/>"##
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, legend_x + 22, top + 8, format_value(domain.1));
    let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, legend_x + 22, top + 160, format_value(domain.0));
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_heatmap(spec: &HeatmapSpec, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    std::fs::write(out, heatmap_svg(spec)?).map_err(|e| Error::io(out, e))
}

/// Annotated language × language heatmaps, one per metric.
pub fn similarity_specs(report: &SimilarityReport) -> Vec<(&'static str, HeatmapSpec)> {
    let l = report.language_tags.len();
    let grids = [
        ("euclidean", "Euclidean distance", &report.euclidean),
        ("kl", "KL divergence (row || column)", &report.kl),
        ("pearson", "Pearson correlation", &report.pearson),
    ];
    grids
        .into_iter()
        .map(|(name, title, g)| {
            let grid = Matrix::from_fn(l, l, |r, c| g[r][c]);
            let mut spec = HeatmapSpec::new(grid, ColorScale::Sequential, title);
            spec.cell_width = 56;
            spec.cell_height = 40;
            spec.annotate = true;
            spec.x_label = "language".into();
            spec.y_label = "language".into();
            spec.row_labels = Some(report.language_tags.clone());
            spec.col_labels = Some(report.language_tags.clone());
            (name, spec)
        })
        .collect()
}

/// Writes `euclidean.svg`, `kl.svg` and `pearson.svg` into `out_dir`.
pub fn render_similarity(report: &SimilarityReport, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    similarity_specs(report)
        .into_iter()
        .map(|(name, spec)| {
            let path = dir.join(format!("{name}.svg"));
            render_heatmap(&spec, &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_neutral() {
        assert_eq!(color_for(0.0, ColorScale::Sequential, (0.0, 1.0)), WHITE);
        assert_eq!(color_for(1.0, ColorScale::Sequential, (0.0, 1.0)), DARK_RED);
        assert_eq!(color_for(0.0, ColorScale::Diverging, (-2.0, 2.0)), WHITE);
        assert_eq!(color_for(2.0, ColorScale::Diverging, (-2.0, 2.0)), DARK_RED);
        assert_eq!(color_for(-2.0, ColorScale::Diverging, (-2.0, 2.0)), DARK_BLUE);
    }

    #[test]
    fn single_cell_lightest() {
        let spec = HeatmapSpec::new(Matrix::from_vec(1, 1, vec![0.0]), ColorScale::Sequential, "t");
        let svg = heatmap_svg(&spec).unwrap();
        assert!(svg.contains(r##"class="cell" x="70" y="40" width="4" height="12" fill="#ffffff""##));
    }

    #[test]
    fn rejects_bad_grids() {
        let spec = HeatmapSpec::new(Matrix::from_vec(1, 2, vec![0.0, f64::NAN]), ColorScale::Sequential, "t");
        assert!(heatmap_svg(&spec).is_err());
        let spec = HeatmapSpec::new(Matrix::zeros(0, 0), ColorScale::Sequential, "t");
        assert!(heatmap_svg(&spec).is_err());
    }

    #[test]
    fn titles_are_escaped() {
        let spec = HeatmapSpec::new(Matrix::from_vec(1, 1, vec![0.5]), ColorScale::Diverging, "a<b & c");
        assert!(heatmap_svg(&spec).unwrap().contains("a&lt;b &amp; c"));
    }
}
