//! Tiny deterministic SVG writer. Coordinates are printed with two decimals
//! so identical inputs give identical bytes.

use std::fmt::Write as _;

pub(crate) const PALETTE: [&str; 10] =
    ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

pub(crate) fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub(crate) struct Svg {
    comment: String,
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        Self { comment: String::new(), body: String::new(), width, height }
    }

    /// Provenance line written as an XML comment after the root element.
    pub fn with_comment(mut self, c: &str) -> Self {
        self.comment = format!("<!-- {} -->\n", c.replace("--", "- -"));
        self
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, extra: &str) {
        let _ = writeln!(self.body, r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"{extra}/>"#);
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(self.body, r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}"/>"#);
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str) {
        let _ = writeln!(self.body, r#"<polyline fill="none" stroke="{stroke}" stroke-width="1.5" points="{}"/>"#, points(pts));
    }

    pub fn polygon(&mut self, pts: &[(f64, f64)], fill: &str, opacity: f64) {
        let _ = writeln!(self.body, r#"<polygon fill="{fill}" fill-opacity="{opacity:.2}" stroke="none" points="{}"/>"#, points(pts));
    }

    pub fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        let _ = writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.2}" fill="{fill}"/>"#);
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="{size:.0}" font-family="sans-serif" text-anchor="{anchor}">{}</text>"#,
            esc(s)
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n\
             {}<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.comment,
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

fn points(pts: &[(f64, f64)]) -> String {
    let mut s = String::new();
    for (i, (x, y)) in pts.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x:.2},{y:.2}");
    }
    s
}

/// Linear map from a data range onto a pixel range; a flat range maps to the middle.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Scale {
    lo: f64,
    hi: f64,
    a: f64,
    b: f64,
}

impl Scale {
    pub fn new(lo: f64, hi: f64, a: f64, b: f64) -> Self {
        Self { lo, hi, a, b }
    }

    pub fn map(&self, v: f64) -> f64 {
        if self.hi > self.lo {
            self.a + (v - self.lo) / (self.hi - self.lo) * (self.b - self.a)
        } else {
            0.5 * (self.a + self.b)
        }
    }
}

/// Min and max of finite values, padded by 5%.
pub(crate) fn extent(vals: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if lo > hi {
        return None;
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    Some((lo - pad, hi + pad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escapes_and_is_stable() {
        let draw = || {
            let mut s = Svg::new(10.0, 10.0);
            s.text(1.0, 2.0, 10.0, "start", "a<b & \"c\"");
            s.polyline(&[(0.0, 0.0), (1.0 / 3.0, 2.0)], "black");
            s.finish()
        };
        let a = draw();
        assert_eq!(a, draw());
        assert!(a.contains("a&lt;b &amp; &quot;c&quot;"));
        assert!(a.contains("0.33,2.00"));
    }

    #[test]
    fn flat_scale_centres() {
        assert_eq!(Scale::new(1.0, 1.0, 0.0, 10.0).map(1.0), 5.0);
        assert_eq!(Scale::new(0.0, 2.0, 0.0, 10.0).map(1.0), 5.0);
    }
}
