//! Standalone SVG line charts for run artifacts. Pure string assembly over
//! the numeric series: no display loop, no external assets, and identical
//! input produces identical bytes, so plots fall under the same determinism
//! contract as the CSV and JSON outputs.

/// One labeled curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 44.0;
const MARGIN_BOTTOM: f64 = 56.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Format a coordinate with enough digits to be visually exact and few
/// enough to keep files small.
fn coord(v: f64) -> String {
    format!("{v:.2}")
}

/// Tick label: trims trailing zeros of a fixed-precision rendering.
fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-4..1e6).contains(&a) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

/// Greatest "nice" step (1, 2, 2.5, 5 times a power of ten) that yields at
/// most `target` intervals over the span.
fn nice_step(span: f64, target: usize) -> f64 {
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    for mult in [1.0, 2.0, 2.5, 5.0, 10.0] {
        if mult * mag >= raw {
            return mult * mag;
        }
    }
    10.0 * mag
}

fn finite_range(series: &[Series], pick: impl Fn(&(f64, f64)) -> f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for p in &s.points {
            let v = pick(p);
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if lo > hi {
        return (0.0, 1.0);
    }
    if lo == hi {
        // degenerate span: open a symmetric window around the value
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.5 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

/// Render a line chart of the series. Non-finite points break the polyline
/// (the curve resumes at the next finite point) rather than corrupting the
/// coordinate list.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x_lo, x_hi) = finite_range(series, |p| p.0);
    let (y_lo, y_hi) = finite_range(series, |p| p.1);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |y: f64| MARGIN_TOP + (y_hi - y) / (y_hi - y_lo) * plot_h;

    let mut out = String::with_capacity(16 * 1024);
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    ));
    out.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        coord(MARGIN_LEFT + plot_w / 2.0),
        escape(title)
    ));

    // grid and ticks
    let x_step = nice_step(x_hi - x_lo, 8);
    let y_step = nice_step(y_hi - y_lo, 6);
    let mut tx = (x_lo / x_step).ceil() * x_step;
    while tx <= x_hi + 1e-9 * x_step {
        let px = sx(tx);
        out.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"#dddddd\"/>\n",
            coord(px),
            coord(MARGIN_TOP),
            coord(MARGIN_TOP + plot_h)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            coord(px),
            coord(MARGIN_TOP + plot_h + 18.0),
            tick_label(tx)
        ));
        tx += x_step;
    }
    let mut ty = (y_lo / y_step).ceil() * y_step;
    while ty <= y_hi + 1e-9 * y_step {
        let py = sy(ty);
        out.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{2}\" x2=\"{1}\" y2=\"{2}\" stroke=\"#dddddd\"/>\n",
            coord(MARGIN_LEFT),
            coord(MARGIN_LEFT + plot_w),
            coord(py)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
            coord(MARGIN_LEFT - 8.0),
            coord(py + 4.0),
            tick_label(ty)
        ));
        ty += y_step;
    }

    // axes
    out.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333333\"/>\n",
        coord(MARGIN_LEFT),
        coord(MARGIN_TOP),
        coord(plot_w),
        coord(plot_h)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
        coord(MARGIN_LEFT + plot_w / 2.0),
        coord(HEIGHT - 12.0),
        escape(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {})\">{}</text>\n",
        coord(MARGIN_TOP + plot_h / 2.0),
        coord(MARGIN_TOP + plot_h / 2.0),
        escape(y_label)
    ));

    // curves: split at non-finite points so every emitted coordinate is real
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut segment: Vec<String> = Vec::new();
        let flush = |seg: &mut Vec<String>, out: &mut String| {
            if seg.len() >= 2 {
                out.push_str(&format!(
                    "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\" points=\"{}\"/>\n",
                    seg.join(" ")
                ));
            }
            seg.clear();
        };
        for &(x, y) in &s.points {
            if x.is_finite() && y.is_finite() {
                segment.push(format!("{},{}", coord(sx(x)), coord(sy(y))));
            } else {
                flush(&mut segment, &mut out);
            }
        }
        flush(&mut segment, &mut out);
    }

    // legend
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let ly = MARGIN_TOP + 14.0 + 18.0 * k as f64;
        let lx = MARGIN_LEFT + plot_w - 150.0;
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            coord(lx),
            coord(ly - 4.0),
            coord(lx + 22.0),
            coord(ly - 4.0)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\">{}</text>\n",
            coord(lx + 28.0),
            coord(ly),
            escape(&s.label)
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Series> {
        vec![
            Series {
                label: "ceded".into(),
                points: (0..50).map(|i| (i as f64 * 0.1, (i as f64 * 0.1 - 1.0).max(0.0))).collect(),
            },
            Series {
                label: "retained".into(),
                points: (0..50).map(|i| (i as f64 * 0.1, (i as f64 * 0.1).min(1.0))).collect(),
            },
        ]
    }

    #[test]
    fn chart_is_structurally_valid_svg() {
        let svg = line_chart("treaty", "claim size", "amount", &sample());
        assert!(svg.starts_with("<svg xmlns=\"http://www.w3.org/2000/svg\""));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">treaty<"));
        assert!(svg.contains(">claim size<"));
    }

    #[test]
    fn identical_input_renders_identical_bytes() {
        let a = line_chart("t", "x", "y", &sample());
        let b = line_chart("t", "x", "y", &sample());
        assert_eq!(a, b);
    }

    #[test]
    fn labels_are_escaped() {
        let s = vec![Series { label: "a<&>b".into(), points: vec![(0.0, 0.0), (1.0, 1.0)] }];
        let svg = line_chart("x<y", "u&v", "p>q", &s);
        assert!(svg.contains("a&lt;&amp;&gt;b"));
        assert!(svg.contains("x&lt;y"));
        assert!(!svg.contains("x<y"));
    }

    #[test]
    fn degenerate_and_empty_inputs_stay_finite() {
        let flat = vec![Series { label: "flat".into(), points: vec![(0.0, 2.0), (1.0, 2.0)] }];
        let svg = line_chart("t", "x", "y", &flat);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
        let empty: Vec<Series> = vec![];
        let svg = line_chart("t", "x", "y", &empty);
        assert!(!svg.contains("NaN"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn non_finite_points_break_the_line_instead_of_leaking() {
        let s = vec![Series {
            label: "gap".into(),
            points: vec![(0.0, 0.0), (1.0, f64::NAN), (2.0, 1.0), (3.0, 2.0)],
        }];
        let svg = line_chart("t", "x", "y", &s);
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn tick_labels_are_compact() {
        assert_eq!(tick_label(0.0), "0");
        assert_eq!(tick_label(2.5), "2.5");
        assert_eq!(tick_label(4.0), "4");
        assert_eq!(tick_label(2.0e7), "2.0e7");
    }
}
