//! Minimal SVG heatmap writer. CSV is always the primary artifact; these
//! figures exist so a run can be eyeballed without external tooling.

/// Five-anchor viridis approximation, good enough for a diagnostic figure.
const STOPS: [(f64, f64, f64); 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];

fn color(t: f64) -> (u8, u8, u8) {
    if !t.is_finite() {
        return (128, 128, 128);
    }
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let lo = (t.floor() as usize).min(STOPS.len() - 2);
    let frac = t - lo as f64;
    let (r0, g0, b0) = STOPS[lo];
    let (r1, g1, b1) = STOPS[lo + 1];
    let lerp = |a: f64, b: f64| (a + (b - a) * frac).round() as u8;
    (lerp(r0, r1), lerp(g0, g1), lerp(b0, b1))
}

/// Render a row-major grid of values as a colored heatmap. Rows may not be
/// ragged. Empty input yields a stub image carrying only the title.
pub fn heatmap(values: &[Vec<f64>], title: &str, row_label: &str, col_label: &str) -> String {
    let rows = values.len();
    let cols = values.first().map_or(0, |r| r.len());
    let cell = 22.0;
    let gap = 1.0;
    let left = 58.0;
    let top = 46.0;
    let width = left + cols as f64 * (cell + gap) + 24.0;
    let height = top + rows as f64 * (cell + gap) + 44.0;

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for row in values {
        for &x in row {
            if x.is_finite() {
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         font-family=\"monospace\" font-size=\"11\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{width:.0}\" height=\"{height:.0}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"10\" y=\"18\" font-size=\"13\">{}</text>\n",
        escape(title)
    ));
    svg.push_str(&format!(
        "<text x=\"10\" y=\"34\" fill=\"#555\">rows: {} · cols: {}</text>\n",
        escape(row_label),
        escape(col_label)
    ));

    for (r, row) in values.iter().enumerate() {
        let y = top + r as f64 * (cell + gap);
        if rows <= 32 {
            svg.push_str(&format!(
                "<text x=\"{:.0}\" y=\"{:.0}\" text-anchor=\"end\" fill=\"#333\">{r}</text>\n",
                left - 6.0,
                y + cell * 0.7
            ));
        }
        for (c, &x) in row.iter().enumerate() {
            let t = if x.is_finite() { (x - lo) / span } else { f64::NAN };
            let (cr, cg, cb) = color(t);
            svg.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"rgb({cr},{cg},{cb})\"/>\n",
                left + c as f64 * (cell + gap),
                y
            ));
        }
    }
    if cols <= 32 {
        for c in 0..cols {
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.0}\" text-anchor=\"middle\" fill=\"#333\">{c}</text>\n",
                left + c as f64 * (cell + gap) + cell / 2.0,
                top + rows as f64 * (cell + gap) + 14.0
            ));
        }
    }
    if rows > 0 && cols > 0 {
        svg.push_str(&format!(
            "<text x=\"10\" y=\"{:.0}\" fill=\"#555\">min {lo:.6} · max {hi:.6}</text>\n",
            height - 10.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_emits_one_cell_per_value() {
        let svg = heatmap(
            &[vec![0.0, 0.5], vec![1.0, 0.25]],
            "demo",
            "layer",
            "head",
        );
        let cells = svg.matches("<rect").count();
        assert_eq!(cells, 1 + 4, "background plus one rect per cell");
        assert!(svg.contains("demo"), "title text present");
        assert!(svg.ends_with("</svg>\n"), "well-formed tail");
    }

    #[test]
    fn heatmap_handles_empty_input() {
        let svg = heatmap(&[], "empty", "r", "c");
        assert!(svg.contains("<svg"), "still a valid svg document");
        assert!(!svg.contains("NaN"), "no NaN leaks into attributes");
    }

    #[test]
    fn color_ramp_ends_are_the_viridis_anchors() {
        assert_eq!(color(0.0), (68, 1, 84), "low end of the ramp");
        assert_eq!(color(1.0), (253, 231, 37), "high end of the ramp");
        assert_eq!(color(f64::NAN), (128, 128, 128), "non-finite maps to gray");
    }
}
