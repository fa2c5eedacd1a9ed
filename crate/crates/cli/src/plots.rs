//! Static SVG renderings of loss curves, ROC curves and confusion matrices.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn open(title: &str, w: f64, h: f64) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
         <svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        w / 2.0,
        escape(title)
    )
}

/// Linear map from data ranges onto the plot rectangle.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)
    }

    fn axes(&self, svg: &mut String, x_label: &str, y_label: &str) {
        let (l, r, t, b) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
        let _ = writeln!(svg, "<rect x=\"{l}\" y=\"{t}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>", r - l, b - t);
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.x0 + f * (self.x1 - self.x0);
            let yv = self.y0 + f * (self.y1 - self.y0);
            let (x, y) = (self.px(xv), self.py(yv));
            let _ = writeln!(svg, "<line x1=\"{x:.2}\" y1=\"{b}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"black\"/>", b + 4.0);
            let _ = writeln!(svg, "<text x=\"{x:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>", b + 18.0, tick(xv));
            let _ = writeln!(svg, "<line x1=\"{}\" y1=\"{y:.2}\" x2=\"{l}\" y2=\"{y:.2}\" stroke=\"black\"/>", l - 4.0);
            let _ = writeln!(svg, "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>", l - 7.0, y + 4.0, tick(yv));
        }
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", (l + r) / 2.0, HEIGHT - 12.0, escape(x_label));
        let _ = writeln!(
            svg,
            "<text x=\"18\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {0})\">{1}</text>",
            (t + b) / 2.0,
            escape(y_label)
        );
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{}", (v * 1000.0).round() / 1000.0)
    }
}

fn polyline(svg: &mut String, frame: &Frame, pts: &[(f64, f64)], color: &str, dashed: bool) {
    let coords: Vec<String> = pts
        .iter()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
        .collect();
    let dash = if dashed { " stroke-dasharray=\"5,4\"" } else { "" };
    let _ = writeln!(
        svg,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>",
        coords.join(" ")
    );
}

fn legend(svg: &mut String, names: &[String]) {
    let x = WIDTH - RIGHT + 12.0;
    for (i, n) in names.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(svg, "<line x1=\"{x}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{c}\" stroke-width=\"2\"/>", x + 18.0);
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\">{}</text>", x + 24.0, y + 4.0, escape(n));
    }
}

/// One polyline per named series, axes fitted to the data.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let all = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let frame = Frame {
        x0,
        x1,
        y0: y0 - pad,
        y1: y1 + pad,
    };
    let mut svg = open(title, WIDTH, HEIGHT);
    frame.axes(&mut svg, x_label, y_label);
    for (i, (_, pts)) in series.iter().enumerate() {
        polyline(&mut svg, &frame, pts, PALETTE[i % PALETTE.len()], false);
    }
    legend(&mut svg, &series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

/// ROC curves on the unit square with the chance diagonal.
pub fn roc_chart(title: &str, curves: &[(String, Vec<(f64, f64)>)]) -> String {
    let frame = Frame {
        x0: 0.0,
        x1: 1.0,
        y0: 0.0,
        y1: 1.0,
    };
    let mut svg = open(title, WIDTH, HEIGHT);
    frame.axes(&mut svg, "false positive rate", "true positive rate");
    polyline(&mut svg, &frame, &[(0.0, 0.0), (1.0, 1.0)], "#888888", true);
    for (i, (_, pts)) in curves.iter().enumerate() {
        polyline(&mut svg, &frame, pts, PALETTE[i % PALETTE.len()], false);
    }
    legend(&mut svg, &curves.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

/// Row-normalized shading with raw counts printed in each cell.
pub fn heatmap(title: &str, labels: &[String], counts: &[Vec<u64>]) -> String {
    let n = labels.len().max(1);
    let cell = (360.0 / n as f64).clamp(14.0, 48.0);
    let (left, top) = (120.0, 60.0);
    let w = left + cell * n as f64 + 30.0;
    let h = top + cell * n as f64 + 60.0;
    let mut svg = open(title, w, h);
    for (i, row) in counts.iter().enumerate() {
        let total: u64 = row.iter().sum();
        for (j, &c) in row.iter().enumerate() {
            let frac = if total == 0 { 0.0 } else { c as f64 / total as f64 };
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let (x, y) = (left + cell * j as f64, top + cell * i as f64);
            let _ = writeln!(
                svg,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{cell:.2}\" height=\"{cell:.2}\" fill=\"rgb({shade},{shade},255)\" stroke=\"#cccccc\"/>"
            );
            let ink = if frac > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                svg,
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" fill=\"{ink}\" font-size=\"10\">{c}</text>",
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
    }
    for (k, l) in labels.iter().enumerate() {
        let mid = cell * k as f64 + cell / 2.0;
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"10\">{}</text>", left - 6.0, top + mid + 4.0, escape(l));
        let (x, y) = (left + mid, top + cell * n as f64 + 14.0);
        let _ = writeln!(
            svg,
            "<text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"end\" font-size=\"10\" transform=\"rotate(-45 {x:.2} {y:.2})\">{}</text>",
            escape(l)
        );
    }
    let _ = writeln!(svg, "<text x=\"14\" y=\"{:.2}\" font-size=\"11\">true</text>", top - 8.0);
    let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">predicted</text>", left, top - 8.0);
    svg.push_str("</svg>\n");
    svg
}
