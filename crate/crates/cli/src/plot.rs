//! Minimal SVG line plot of deletion/insertion curves.

use std::fmt::Write as _;

use sfrg_core::metrics::Curve;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 40.0;

fn polyline(curve: &Curve, color: &str) -> String {
    let (w, h) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let points: Vec<String> = curve
        .fractions
        .iter()
        .zip(&curve.confidences)
        .map(|(x, y)| format!("{:.2},{:.2}", MARGIN + x * w, HEIGHT - MARGIN - y * h))
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
        points.join(" ")
    )
}

/// Curves labelled `(name, curve)`, drawn on a unit square with axes.
pub fn curves_svg(curves: &[(&str, &Curve)]) -> String {
    const COLORS: [&str; 4] = ["#c0392b", "#2471a3", "#7d3c98", "#1e8449"];
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(out, "<path d=\"M{x0},{y1} L{x0},{y0} L{x1},{y0}\" stroke=\"black\" fill=\"none\"/>");
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">fraction of pixels</text>", WIDTH / 2.0, HEIGHT - 8.0);
    let _ = writeln!(out, "<text x=\"12\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">confidence</text>", HEIGHT / 2.0, HEIGHT / 2.0);
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(out, "{}", polyline(curve, color));
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name} (AUC {:.3})</text>",
            x1 - 150.0,
            y1 + 16.0 * (i as f64 + 1.0),
            curve.auc
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_curve() {
        let c = Curve::new(vec![0.0, 0.5, 1.0], vec![1.0, 0.4, 0.0]).unwrap();
        let svg = curves_svg(&[("deletion", &c), ("insertion", &c)]);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("AUC 0.450"));
    }
}
