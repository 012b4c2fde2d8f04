//! Minimal standalone SVG charts.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: [f64; 4] = [50.0, 20.0, 40.0, 60.0]; // top, right, bottom, left
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

struct Frame {
    x: [f64; 2],
    y: [f64; 2],
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a [f64; 2]>) -> Self {
        let mut x = [f64::INFINITY, f64::NEG_INFINITY];
        let mut y = x;
        for p in points.filter(|p| p[0].is_finite() && p[1].is_finite()) {
            x = [x[0].min(p[0]), x[1].max(p[0])];
            y = [y[0].min(p[1]), y[1].max(p[1])];
        }
        let widen = |r: [f64; 2]| {
            if !r[0].is_finite() {
                [0.0, 1.0]
            } else if r[1] - r[0] < 1e-12 {
                [r[0] - 0.5, r[1] + 0.5]
            } else {
                r
            }
        };
        Self {
            x: widen(x),
            y: widen(y),
        }
    }

    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        let [top, right, bottom, left] = MARGIN;
        let w = WIDTH - left - right;
        let h = HEIGHT - top - bottom;
        (
            left + (p[0] - self.x[0]) / (self.x[1] - self.x[0]) * w,
            top + h - (p[1] - self.y[0]) / (self.y[1] - self.y[0]) * h,
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn header(out: &mut String, title: &str, frame: &Frame, x_label: &str, y_label: &str) {
    let [top, right, bottom, left] = MARGIN;
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    out.push('\n');
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        WIDTH - left - right,
        HEIGHT - top - bottom
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = frame.x[0] + f * (frame.x[1] - frame.x[0]);
        let yv = frame.y[0] + f * (frame.y[1] - frame.y[0]);
        let (xp, _) = frame.px([xv, frame.y[0]]);
        let (_, yp) = frame.px([frame.x[0], yv]);
        let _ = writeln!(
            out,
            r#"<text x="{xp:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            HEIGHT - bottom + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            yp + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + (WIDTH - left - right) / 2.0,
        HEIGHT - 6.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        top + (HEIGHT - top - bottom) / 2.0,
        top + (HEIGHT - top - bottom) / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN[0] + 14.0 + 16.0 * i as f64;
        let x = WIDTH - MARGIN[1] - 150.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{y}">{}</text>"#,
            y - 9.0,
            color(i),
            x + 14.0,
            escape(name)
        );
    }
}

/// Line chart of named series; non-finite points are skipped.
pub fn line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(&str, Vec<[f64; 2]>)],
) -> String {
    let frame = Frame::fit(series.iter().flat_map(|(_, pts)| pts.iter()));
    let mut out = String::new();
    header(&mut out, title, &frame, x_label, y_label);
    for (i, (_, pts)) in series.iter().enumerate() {
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p[0].is_finite() && p[1].is_finite())
            .map(|&p| {
                let (x, y) = frame.px(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            color(i),
            path.join(" ")
        );
    }
    legend(
        &mut out,
        &series.iter().map(|(n, _)| *n).collect::<Vec<_>>(),
    );
    out.push_str("</svg>\n");
    out
}

/// Scatter chart of named point groups.
pub fn scatter(title: &str, groups: &[(&str, Vec<[f64; 2]>)]) -> String {
    let frame = Frame::fit(groups.iter().flat_map(|(_, pts)| pts.iter()));
    let mut out = String::new();
    header(&mut out, title, &frame, "t-SNE 1", "t-SNE 2");
    for (i, (_, pts)) in groups.iter().enumerate() {
        for &p in pts {
            let (x, y) = frame.px(p);
            let _ = writeln!(
                out,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{}" fill-opacity="0.6"/>"#,
                color(i)
            );
        }
    }
    legend(
        &mut out,
        &groups.iter().map(|(n, _)| *n).collect::<Vec<_>>(),
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_standalone_svg() {
        let s = line_plot(
            "FD <trace>",
            "epoch",
            "FD",
            &[("a", vec![[0.0, 1.0], [1.0, f64::INFINITY], [2.0, 0.5]])],
        );
        assert!(s.starts_with("<svg xmlns=\"http://www.w3.org/2000/svg\""));
        assert!(s.trim_end().ends_with("</svg>"));
        assert!(s.contains("FD &lt;trace&gt;"));
        assert!(!s.contains("href"));
        let s = scatter(
            "e",
            &[("real", vec![[0.0, 0.0]]), ("synthetic", vec![[1.0, 1.0]])],
        );
        assert_eq!(s.matches("<circle").count(), 2);
    }
}
