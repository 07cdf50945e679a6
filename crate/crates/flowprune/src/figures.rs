//! Dependency-free SVG emission for the report figures: 2D embedding
//! scatters and magnitude step histograms.

use crate::analysis::MagnitudeProfile;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 40.0;

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"14\">{title}</text>\n",
        WIDTH / 2.0
    )
}

/// Scatter of two paired 2D point sets (set A circles, set B squares).
pub fn scatter_svg(
    title: &str,
    label_a: &str,
    coords_a: &[[f64; 2]],
    label_b: &str,
    coords_b: &[[f64; 2]],
) -> String {
    let all = coords_a.iter().chain(coords_b.iter());
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for p in all {
        xmin = xmin.min(p[0]);
        xmax = xmax.max(p[0]);
        ymin = ymin.min(p[1]);
        ymax = ymax.max(p[1]);
    }
    if !xmin.is_finite() {
        xmin = 0.0;
        xmax = 1.0;
        ymin = 0.0;
        ymax = 1.0;
    }
    let xspan = (xmax - xmin).max(1e-12);
    let yspan = (ymax - ymin).max(1e-12);
    let sx = |x: f64| MARGIN + (x - xmin) / xspan * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - ymin) / yspan * (HEIGHT - 2.0 * MARGIN);

    let mut svg = header(title);
    for p in coords_a {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#1f77b4\" fill-opacity=\"0.6\"/>\n",
            sx(p[0]),
            sy(p[1])
        ));
    }
    for p in coords_b {
        svg.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"5\" height=\"5\" fill=\"#ff7f0e\" \
             fill-opacity=\"0.6\"/>\n",
            sx(p[0]) - 2.5,
            sy(p[1]) - 2.5
        ));
    }
    svg.push_str(&format!(
        "<circle cx=\"{x}\" cy=\"40\" r=\"4\" fill=\"#1f77b4\"/>\
         <text x=\"{xt}\" y=\"44\" font-family=\"sans-serif\" font-size=\"12\">{label_a}</text>\n\
         <rect x=\"{x2}\" y=\"56\" width=\"7\" height=\"7\" fill=\"#ff7f0e\"/>\
         <text x=\"{xt}\" y=\"66\" font-family=\"sans-serif\" font-size=\"12\">{label_b}</text>\n",
        x = WIDTH - 180.0,
        x2 = WIDTH - 183.5,
        xt = WIDTH - 168.0,
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Overlaid step histograms of up to three magnitude profiles.
pub fn histogram_svg(title: &str, profiles: &[(&str, &MagnitudeProfile)]) -> String {
    let colors = ["#1f77b4", "#ff7f0e", "#2ca02c"];
    let lo = profiles
        .iter()
        .map(|(_, p)| p.bin_lo)
        .fold(f64::INFINITY, f64::min);
    let hi = profiles
        .iter()
        .map(|(_, p)| p.bin_hi)
        .fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let peak = profiles
        .iter()
        .flat_map(|(_, p)| p.histogram.iter())
        .copied()
        .max()
        .unwrap_or(1)
        .max(1) as f64;

    let mut svg = header(title);
    for (idx, (label, profile)) in profiles.iter().enumerate() {
        let color = colors[idx % colors.len()];
        let nbins = profile.histogram.len() as f64;
        let bin_w = (profile.bin_hi - profile.bin_lo).max(1e-12) / nbins;
        let mut path = String::new();
        for (b, &count) in profile.histogram.iter().enumerate() {
            let x0 =
                MARGIN + (profile.bin_lo + b as f64 * bin_w - lo) / span * (WIDTH - 2.0 * MARGIN);
            let x1 = MARGIN
                + (profile.bin_lo + (b + 1) as f64 * bin_w - lo) / span * (WIDTH - 2.0 * MARGIN);
            let y = HEIGHT - MARGIN - count as f64 / peak * (HEIGHT - 2.0 * MARGIN);
            if b == 0 {
                path.push_str(&format!("M {x0:.2} {:.2} ", HEIGHT - MARGIN));
            }
            path.push_str(&format!("L {x0:.2} {y:.2} L {x1:.2} {y:.2} "));
        }
        path.push_str(&format!("L {:.2} {:.2}", WIDTH - MARGIN, HEIGHT - MARGIN));
        svg.push_str(&format!(
            "<path d=\"{path}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
             fill=\"{color}\">{label}</text>\n",
            WIDTH - 180.0,
            44.0 + 16.0 * idx as f64
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
