//! Deterministic SVG rendering: fixed canvas, fixed palette, fixed number
//! formatting, no timestamps.

use std::fmt::Write as _;

use ant_lab_core::synth_data::Point;

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;

pub const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub struct Series {
    pub name: String,
    pub color: &'static str,
    pub points: Vec<(f64, f64)>,
}

/// Axis-aligned box mapping data coordinates onto the canvas.
#[derive(Debug, Clone, Copy)]
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut f = Frame {
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() {
            return Frame {
                x0: 0.0,
                x1: 1.0,
                y0: 0.0,
                y1: 1.0,
            };
        }
        if f.x1 - f.x0 < 1e-12 {
            f.x0 -= 0.5;
            f.x1 += 0.5;
        }
        if f.y1 - f.y0 < 1e-12 {
            f.y0 -= 0.5;
            f.y1 += 0.5;
        }
        f
    }

    fn sx(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn sy(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(out, "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#ffffff\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>",
        WIDTH / 2.0,
        escape(title)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(out: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        out,
        "<rect x=\"{l}\" y=\"{t}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444444\"/>",
        r - l,
        b - t
    );
    for (v, anchor, x, y) in [
        (frame.x0, "start", l, b + 16.0),
        (frame.x1, "end", r, b + 16.0),
    ] {
        let _ = writeln!(
            out,
            "<text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"{anchor}\">{}</text>",
            tick(v)
        );
    }
    for (v, y) in [(frame.y0, b), (frame.y1, t + 10.0)] {
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            l - 4.0,
            tick(v)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-3) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn polyline(out: &mut String, frame: &Frame, pts: &[(f64, f64)], color: &str, width: f64) {
    let coords: Vec<String> = pts
        .iter()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|&(x, y)| format!("{:.3},{:.3}", frame.sx(x), frame.sy(y)))
        .collect();
    let _ = writeln!(
        out,
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\" points=\"{}\"/>",
        coords.join(" ")
    );
}

fn legend(out: &mut String, series: &[Series]) {
    for (i, s) in series.iter().enumerate() {
        let y = MARGIN + 14.0 + 16.0 * i as f64;
        let x = WIDTH - MARGIN - 150.0;
        let _ = writeln!(
            out,
            "<rect x=\"{x}\" y=\"{}\" width=\"12\" height=\"4\" fill=\"{}\"/>",
            y - 4.0,
            s.color
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            x + 18.0,
            escape(&s.name)
        );
    }
}

/// One polyline per series on shared axes.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let frame = Frame::fit(series.iter().flat_map(|s| s.points.iter().copied()));
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &frame, x_label, y_label);
    for s in series {
        polyline(&mut out, &frame, &s.points, s.color, 2.0);
    }
    legend(&mut out, series);
    out.push_str("</svg>\n");
    out
}

/// Sampling chains over the mixture: mode centers as dots, one polyline per
/// chain colored by its final oracle label.
pub fn trajectory_plot(title: &str, chains: &[Vec<Point>], labels: &[usize], centers: &[Point]) -> String {
    let pts = chains
        .iter()
        .flatten()
        .chain(centers)
        .map(|p| (p[0], p[1]));
    let mut frame = Frame::fit(pts);
    // equal aspect so circles stay circles
    let span = (frame.x1 - frame.x0).max(frame.y1 - frame.y0) / 2.0;
    let (cx, cy) = ((frame.x0 + frame.x1) / 2.0, (frame.y0 + frame.y1) / 2.0);
    let aspect = (WIDTH - 2.0 * MARGIN) / (HEIGHT - 2.0 * MARGIN);
    frame = Frame {
        x0: cx - span * aspect,
        x1: cx + span * aspect,
        y0: cy - span,
        y1: cy + span,
    };
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &frame, "x", "y");
    for c in centers {
        let _ = writeln!(
            out,
            "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"1.5\" fill=\"#999999\"/>",
            frame.sx(c[0]),
            frame.sy(c[1])
        );
    }
    for (chain, label) in chains.iter().zip(labels) {
        let pts: Vec<(f64, f64)> = chain.iter().map(|p| (p[0], p[1])).collect();
        polyline(&mut out, &frame, &pts, PALETTE[label % PALETTE.len()], 1.0);
    }
    out.push_str("</svg>\n");
    out
}

/// Parse the `points` attribute of every polyline, in document order.
pub fn polyline_points(svg: &str) -> Vec<Vec<(f64, f64)>> {
    svg.lines()
        .filter(|l| l.starts_with("<polyline"))
        .map(|l| {
            let start = l.find("points=\"").map(|i| i + 8).unwrap_or(l.len());
            let body = &l[start..];
            let body = &body[..body.find('"').unwrap_or(body.len())];
            body.split_whitespace()
                .filter_map(|p| {
                    let (x, y) = p.split_once(',')?;
                    Some((x.parse().ok()?, y.parse().ok()?))
                })
                .collect()
        })
        .collect()
}
