//! Minimal SVG emission for planar sets, formations and trajectories.

use std::fmt::Write;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

/// Maps world coordinates onto a canvas with `y` pointing up.
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    lo: [f64; 2],
    hi: [f64; 2],
    width: f64,
    height: f64,
    pad: f64,
}

impl Frame {
    /// Fits `[lo, hi]` into a canvas `width` pixels wide, preserving aspect.
    pub fn fit(lo: [f64; 2], hi: [f64; 2], width: f64) -> Self {
        let span_x = (hi[0] - lo[0]).max(1e-12);
        let span_y = (hi[1] - lo[1]).max(1e-12);
        let pad = 20.0;
        let height = (width - 2.0 * pad) * span_y / span_x + 2.0 * pad;
        Self {
            lo,
            hi: [lo[0] + span_x, lo[1] + span_y],
            width,
            height,
            pad,
        }
    }

    /// Bounding frame of `points`, grown by `margin` of its span.
    pub fn around<'a>(points: impl IntoIterator<Item = &'a [f64; 2]>, margin: f64, width: f64) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        if !lo[0].is_finite() {
            lo = [-1.0, -1.0];
            hi = [1.0, 1.0];
        }
        for d in 0..2 {
            let grow = ((hi[d] - lo[d]) * margin).max(1e-6);
            lo[d] -= grow;
            hi[d] += grow;
        }
        Self::fit(lo, hi, width)
    }

    fn scale(&self) -> f64 {
        (self.width - 2.0 * self.pad) / (self.hi[0] - self.lo[0])
    }

    pub fn map(&self, p: [f64; 2]) -> (f64, f64) {
        let s = self.scale();
        (
            self.pad + (p[0] - self.lo[0]) * s,
            self.height - self.pad - (p[1] - self.lo[1]) * s,
        )
    }

    pub fn length(&self, l: f64) -> f64 {
        l * self.scale()
    }
}

/// Accumulates SVG elements over a [`Frame`].
pub struct Canvas {
    frame: Frame,
    body: String,
}

impl Canvas {
    pub fn new(frame: Frame) -> Self {
        Self {
            frame,
            body: String::new(),
        }
    }

    fn points(&self, pts: &[[f64; 2]]) -> String {
        pts.iter()
            .map(|&p| {
                let (x, y) = self.frame.map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn polygon(&mut self, pts: &[[f64; 2]], style: &str) {
        let pts = self.points(pts);
        let _ = writeln!(self.body, r#"<polygon points="{pts}" {style}/>"#);
    }

    pub fn polyline(&mut self, pts: &[[f64; 2]], style: &str) {
        let pts = self.points(pts);
        let _ = writeln!(self.body, r#"<polyline points="{pts}" fill="none" {style}/>"#);
    }

    pub fn rect(&mut self, lo: [f64; 2], hi: [f64; 2], style: &str) {
        self.polygon(&[lo, [hi[0], lo[1]], hi, [lo[0], hi[1]]], style);
    }

    pub fn circle(&mut self, c: [f64; 2], radius_px: f64, style: &str) {
        let (x, y) = self.frame.map(c);
        let _ = writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{radius_px:.2}" {style}/>"#);
    }

    /// Segment from `a` to `b` ending in an arrowhead.
    pub fn arrow(&mut self, a: [f64; 2], b: [f64; 2], style: &str) {
        let (x1, y1) = self.frame.map(a);
        let (x2, y2) = self.frame.map(b);
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" marker-end="url(#arrow)" {style}/>"#
        );
    }

    pub fn text(&mut self, at: [f64; 2], label: &str, style: &str) {
        let (x, y) = self.frame.map(at);
        let _ = writeln!(self.body, r#"<text x="{x:.2}" y="{y:.2}" {style}>{label}</text>"#);
    }

    /// Full document; `stamp` adds a generation-time comment.
    pub fn finish(self, title: &str, stamp: Option<u64>) -> String {
        let f = self.frame;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.0} {:.0}">"#,
            f.width, f.height, f.width, f.height
        );
        if let Some(t) = stamp {
            let _ = writeln!(out, "<!-- generated at unix time {t} -->");
        }
        let _ = writeln!(out, "<title>{title}</title>");
        out.push_str(
            r##"<defs><marker id="arrow" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="6" markerHeight="6" orient="auto-start-reverse"><path d="M0,0 L10,5 L0,10 z" fill="#333"/></marker></defs>
<rect width="100%" height="100%" fill="white"/>
"##,
        );
        out.push_str(&self.body);
        out.push_str("</svg>\n");
        out
    }
}
