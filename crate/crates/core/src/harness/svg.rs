//! Minimal SVG plots of 2-D sets, sample scatters and trajectories.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::geometry::Point2;

use super::results::{Payload, RunResult};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Rect { lo: Point2, hi: Point2, color: usize, filled: bool },
    Polygon { points: Vec<Point2>, color: usize },
    Points { points: Vec<Point2>, color: usize },
    Polyline { points: Vec<Point2>, color: usize },
}

impl Shape {
    fn points(&self) -> Vec<Point2> {
        match self {
            Shape::Rect { lo, hi, .. } => vec![*lo, *hi],
            Shape::Polygon { points, .. } | Shape::Points { points, .. } | Shape::Polyline { points, .. } => points.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Figure {
    pub title: String,
    pub shapes: Vec<Shape>,
}

struct Frame {
    lo: Point2,
    scale: Point2,
}

impl Frame {
    fn fit(shapes: &[Shape]) -> Option<Frame> {
        let pts: Vec<Point2> = shapes.iter().flat_map(Shape::points).filter(|p| p[0].is_finite() && p[1].is_finite()).collect();
        let first = pts.first()?;
        let (mut lo, mut hi) = (*first, *first);
        for p in &pts {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let span = |k: usize| if hi[k] > lo[k] { hi[k] - lo[k] } else { 1.0 };
        Some(Frame {
            lo,
            scale: [(WIDTH - 2.0 * MARGIN) / span(0), (HEIGHT - 2.0 * MARGIN) / span(1)],
        })
    }

    fn map(&self, p: Point2) -> Point2 {
        [MARGIN + (p[0] - self.lo[0]) * self.scale[0], HEIGHT - MARGIN - (p[1] - self.lo[1]) * self.scale[1]]
    }
}

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn path(frame: &Frame, pts: &[Point2]) -> String {
    pts.iter()
        .map(|&p| {
            let q = frame.map(p);
            format!("{:.2},{:.2}", q[0], q[1])
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn render(fig: &Figure) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    if !fig.title.is_empty() {
        let _ = writeln!(s, r#"<text x="{MARGIN}" y="24" font-family="sans-serif" font-size="14">{}</text>"#, escape(&fig.title));
    }
    if let Some(frame) = Frame::fit(&fig.shapes) {
        for shape in &fig.shapes {
            match shape {
                Shape::Rect { lo, hi, color: c, filled } => {
                    let (a, b) = (frame.map(*lo), frame.map(*hi));
                    let fill = if *filled { color(*c) } else { "none" };
                    let _ = writeln!(
                        s,
                        r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}" fill-opacity="0.15" stroke="{}" stroke-width="1"/>"#,
                        a[0],
                        b[1],
                        (b[0] - a[0]).abs(),
                        (a[1] - b[1]).abs(),
                        color(*c)
                    );
                }
                Shape::Polygon { points, color: c } => {
                    let _ = writeln!(
                        s,
                        r#"<polygon points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                        path(&frame, points),
                        color(*c)
                    );
                }
                Shape::Polyline { points, color: c } => {
                    let _ = writeln!(
                        s,
                        r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                        path(&frame, points),
                        color(*c)
                    );
                }
                Shape::Points { points, color: c } => {
                    for &p in points {
                        let q = frame.map(p);
                        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="{}"/>"#, q[0], q[1], color(*c));
                    }
                }
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn rect2(r: &crate::geometry::Hyperrect) -> Option<(Point2, Point2)> {
    (r.dim() >= 2).then(|| ([r.lower()[0], r.lower()[1]], [r.upper()[0], r.upper()[1]]))
}

/// Builds the figure for a results document. Kinds: `partition` (analyze),
/// `reach` (reach / verify) and `trajectory` (carrl-sim).
pub fn figure(result: &RunResult, kind: &str) -> Result<Figure> {
    let mut fig = Figure {
        title: format!("{} ({kind})", result.command),
        shapes: Vec::new(),
    };
    match (kind, &result.result) {
        ("partition", Payload::Analyze(a)) => {
            for c in &a.cells {
                if c.lower.len() >= 2 {
                    fig.shapes.push(Shape::Rect {
                        lo: [c.lower[0], c.lower[1]],
                        hi: [c.upper[0], c.upper[1]],
                        color: 0,
                        filled: false,
                    });
                }
            }
            if let Some((lo, hi)) = a.output_box.as_ref().and_then(rect2) {
                fig.shapes.push(Shape::Rect { lo, hi, color: 3, filled: false });
            }
            if let Some((lo, hi)) = a.under_interval.as_ref().and_then(rect2) {
                fig.shapes.push(Shape::Rect { lo, hi, color: 2, filled: false });
            }
            if !a.samples.is_empty() {
                fig.shapes.push(Shape::Points { points: a.samples.clone(), color: 1 });
            }
        }
        ("reach", Payload::Reach(r)) => {
            for (t, set) in r.sets.iter().enumerate() {
                if let Some((lo, hi)) = set.bounding_rect().ok().as_ref().and_then(rect2) {
                    fig.shapes.push(Shape::Rect { lo, hi, color: t, filled: true });
                }
            }
            for (t, pts) in r.samples.iter().enumerate() {
                if !pts.is_empty() {
                    fig.shapes.push(Shape::Points { points: pts.clone(), color: t });
                }
            }
        }
        ("trajectory", Payload::Carrl(c)) => {
            for e in &c.episodes {
                let pts: Vec<Point2> = e.episode.states.iter().filter(|s| s.len() >= 2).map(|s| [s[0], s[1]]).collect();
                let color = match e.mode {
                    crate::carrl::AgentMode::Nominal => 0,
                    crate::carrl::AgentMode::Carrl => 1,
                };
                fig.shapes.push(Shape::Polyline { points: pts, color });
            }
        }
        ("partition" | "reach" | "trajectory", _) => {
            return Err(Error::Config(format!("plot kind `{kind}` does not apply to a `{}` result", result.command)));
        }
        _ => return Err(Error::Config(format!("unknown plot kind `{kind}`"))),
    }
    Ok(fig)
}

pub fn plot_svg(result: &RunResult, kind: &str) -> Result<String> {
    Ok(render(&figure(result, kind)?))
}

/// Default plot kind for a command, if it has one.
pub fn default_kind(payload: &Payload) -> Option<&'static str> {
    match payload {
        Payload::Analyze(_) => Some("partition"),
        Payload::Reach(_) => Some("reach"),
        Payload::Carrl(_) => Some("trajectory"),
        Payload::Bench(_) => None,
    }
}
