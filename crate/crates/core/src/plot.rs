//! Static SVG scatter plots of 2-D style coordinates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

pub const CAPTION: &str =
    "t-SNE layout: cluster shapes and absolute positions are not comparable across runs";

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    pub dataset_id: String,
    pub weather: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Marker {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
}

const MARKERS: [Marker; 5] = [Marker::Circle, Marker::Square, Marker::Triangle, Marker::Diamond, Marker::Cross];

fn marker_svg(m: Marker, x: f64, y: f64, r: f64, color: &str) -> String {
    match m {
        Marker::Circle => format!(r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r}" fill="{color}"/>"#),
        Marker::Square => format!(
            r#"<rect x="{:.2}" y="{:.2}" width="{}" height="{}" fill="{color}"/>"#,
            x - r,
            y - r,
            2.0 * r,
            2.0 * r
        ),
        Marker::Triangle => format!(
            r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{color}"/>"#,
            x,
            y - r,
            x - r,
            y + r,
            x + r,
            y + r
        ),
        Marker::Diamond => format!(
            r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{color}"/>"#,
            x,
            y - r,
            x + r,
            y,
            x,
            y + r,
            x - r,
            y
        ),
        Marker::Cross => format!(
            r#"<path d="M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}" stroke="{color}" stroke-width="1.5"/>"#,
            x - r,
            y - r,
            x + r,
            y + r,
            x - r,
            y + r,
            x + r,
            y - r
        ),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Color encodes the dataset, marker shape the weather tag.
pub fn scatter_svg(points: &[PlotPoint], title: &str) -> String {
    let (w, h, pad, legend_w) = (720.0, 640.0, 40.0, 180.0);
    let mut colors: BTreeMap<&str, &str> = BTreeMap::new();
    let mut markers: BTreeMap<&str, Marker> = BTreeMap::new();
    for p in points {
        let next = colors.len();
        colors.entry(&p.dataset_id).or_insert(PALETTE[next % PALETTE.len()]);
        let tag = p.weather.as_deref().unwrap_or("none");
        let next = markers.len();
        markers.entry(tag).or_insert(MARKERS[next % MARKERS.len()]);
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let span_x = (x1 - x0).max(1e-9);
    let span_y = (y1 - y0).max(1e-9);
    let plot_w = w - legend_w - 2.0 * pad;
    let plot_h = h - 3.0 * pad;
    let sx = |x: f64| pad + (x - x0) / span_x * plot_w;
    let sy = |y: f64| 1.5 * pad + (1.0 - (y - y0) / span_y) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{pad}" y="{}" font-size="16">{}</text>"#, pad * 0.8, escape(title));
    let _ = writeln!(
        svg,
        r##"<rect x="{pad}" y="{}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#999"/>"##,
        1.5 * pad
    );
    for p in points {
        let color = colors[p.dataset_id.as_str()];
        let marker = markers[p.weather.as_deref().unwrap_or("none")];
        let _ = writeln!(svg, "{}", marker_svg(marker, sx(p.x), sy(p.y), 3.0, color));
    }
    let lx = w - legend_w;
    let mut ly = 1.5 * pad + 10.0;
    let _ = writeln!(svg, r#"<text x="{lx}" y="{ly}" font-size="13" font-weight="bold">dataset</text>"#);
    for (id, color) in &colors {
        ly += 18.0;
        let _ = writeln!(svg, "{}", marker_svg(Marker::Circle, lx + 6.0, ly - 4.0, 5.0, color));
        let _ = writeln!(svg, r#"<text x="{}" y="{ly}" font-size="12">{}</text>"#, lx + 18.0, escape(id));
    }
    ly += 30.0;
    let _ = writeln!(svg, r#"<text x="{lx}" y="{ly}" font-size="13" font-weight="bold">weather</text>"#);
    for (tag, marker) in &markers {
        ly += 18.0;
        let _ = writeln!(svg, "{}", marker_svg(*marker, lx + 6.0, ly - 4.0, 5.0, "#444"));
        let _ = writeln!(svg, r#"<text x="{}" y="{ly}" font-size="12">{}</text>"#, lx + 18.0, escape(tag));
    }
    let _ = writeln!(svg, r##"<text x="{pad}" y="{}" font-size="12" fill="#555">{CAPTION}</text>"##, h - pad * 0.5);
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64, id: &str, weather: Option<&str>) -> PlotPoint {
        PlotPoint {
            x,
            y: -x,
            dataset_id: id.into(),
            weather: weather.map(Into::into),
        }
    }

    #[test]
    fn one_marker_per_point_and_caption() {
        let pts = vec![pt(0.0, "a", Some("clear")), pt(1.0, "b", None), pt(2.0, "a", Some("dusk"))];
        let svg = scatter_svg(&pts, "style <space>");
        assert!(svg.contains(CAPTION));
        assert!(svg.contains("style &lt;space&gt;"));
        assert!(svg.contains(PALETTE[0]) && svg.contains(PALETTE[1]));
        assert!(!svg.contains(PALETTE[2]));
    }

    #[test]
    fn degenerate_extent_stays_finite() {
        let svg = scatter_svg(&[pt(1.0, "a", None), pt(1.0, "a", None)], "t");
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
