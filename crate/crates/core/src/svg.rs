//! Minimal SVG output: histogram with density overlay, and line plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::stats::Histogram;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let widen = |a: f64, b: f64| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        let (x0, x1) = widen(x0, x1);
        let (y0, y1) = widen(y0, y1);
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }

    fn axes(&self, out: &mut String, title: &str) {
        let _ = write!(
            out,
            r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>
<text x="{PAD}" y="{}" text-anchor="middle">{:.4}</text>
<text x="{}" y="{}" text-anchor="middle">{:.4}</text>
<text x="{}" y="{}" text-anchor="end">{:.4}</text>
<text x="{}" y="{PAD}" text-anchor="end">{:.4}</text>
"##,
            W / 2.0,
            escape(title),
            H - PAD,
            W - PAD,
            H - PAD,
            H - PAD,
            H - PAD + 15.0,
            self.x0,
            W - PAD,
            H - PAD + 15.0,
            self.x1,
            PAD - 4.0,
            H - PAD,
            self.y0,
            PAD - 4.0,
            self.y1,
        );
    }

    fn polyline(&self, out: &mut String, xs: &[f64], ys: &[f64], color: &str) {
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", self.px(x), self.py(y)))
            .collect();
        let _ =
            writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds<'a>(it: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    it.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Density-scaled histogram with an optional density curve on top.
pub fn histogram_svg(hist: &Histogram, density: Option<(&[f64], &[f64])>, title: &str) -> String {
    let n = hist.total().max(1) as f64;
    let bw = hist.bin_width();
    let heights: Vec<f64> = hist.counts.iter().map(|&c| if bw > 0.0 { c as f64 / (n * bw) } else { 1.0 }).collect();
    let (mut x0, mut x1) = (hist.edges[0], *hist.edges.last().unwrap());
    let mut ymax = heights.iter().copied().fold(0.0, f64::max);
    if let Some((gx, gy)) = density {
        let (a, b) = bounds(gx.iter());
        x0 = x0.min(a);
        x1 = x1.max(b);
        ymax = ymax.max(bounds(gy.iter()).1);
    }
    let f = Frame::new(x0, x1, 0.0, ymax * 1.05);
    let mut out = String::new();
    f.axes(&mut out, title);
    for (i, h) in heights.iter().enumerate() {
        let (l, r) = (f.px(hist.edges[i]), f.px(hist.edges[i + 1]));
        let top = f.py(*h);
        let _ = writeln!(
            out,
            r##"<rect x="{l:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="#9ecae1" stroke="#3182bd"/>"##,
            (r - l).max(1.0),
            f.py(0.0) - top
        );
    }
    if let Some((gx, gy)) = density {
        f.polyline(&mut out, gx, gy, "#d62728");
    }
    out.push_str("</svg>\n");
    out
}

/// One polyline per (label, ys) series over a shared x axis.
pub fn line_plot_svg(xs: &[f64], series: &[(String, Vec<f64>)], title: &str) -> String {
    let (x0, x1) = bounds(xs.iter());
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.1.iter()));
    let f = Frame::new(x0, x1, y0, y1);
    let mut out = String::new();
    f.axes(&mut out, title);
    for (i, (label, ys)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        f.polyline(&mut out, xs, ys, c);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{c}">{}</text>"#,
            W - PAD - 150.0,
            PAD + 14.0 * i as f64,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn write(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::histogram;

    #[test]
    fn histogram_svg_has_one_rect_per_bin() {
        let h = histogram(&[0.0, 1.0, 1.5, 3.0], 3).unwrap();
        let s = histogram_svg(&h, Some((&[0.0, 1.0, 2.0], &[0.1, 0.3, 0.2])), "a<b");
        assert_eq!(s.matches("<rect x=").count(), 3);
        assert!(s.contains("a&lt;b"));
        assert!(s.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn degenerate_ranges_render() {
        let h = histogram(&[2.0, 2.0], 4).unwrap();
        let s = histogram_svg(&h, None, "flat");
        assert!(!s.contains("NaN"));
        let s = line_plot_svg(&[0.0, 1.0], &[("c".into(), vec![1.0, 1.0])], "const");
        assert!(!s.contains("NaN") && s.contains("<polyline"));
    }
}
