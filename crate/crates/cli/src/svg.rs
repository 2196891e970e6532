//! Minimal hand-rolled SVG output: similarity heatmaps and eigenvalue
//! clouds. Static artifacts only; fixed decimal formatting keeps the bytes
//! deterministic.

use depthflow_core::linalg::Complex;
use depthflow_core::seg::SimilarityMatrix;

/// Blue-white-red map for values in [-1, 1].
fn heat_color(v: f64) -> String {
    let v = v.clamp(-1.0, 1.0);
    let (r, g, b) = if v >= 0.0 {
        let t = v;
        (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
    } else {
        let t = -v;
        (255.0 * (1.0 - t), 255.0 * (1.0 - t), 255.0)
    };
    format!("rgb({},{},{})", r.round() as u8, g.round() as u8, b.round() as u8)
}

/// Similarity heatmap with 1-based layer ticks.
pub fn similarity_heatmap(s: &SimilarityMatrix) -> String {
    let n = s.n();
    let cell = 24usize;
    let margin = 30usize;
    let size = margin + n * cell + 10;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
         viewBox=\"0 0 {size} {size}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for i in 1..=n {
        for j in 1..=n {
            let x = margin + (j - 1) * cell;
            let y = margin + (i - 1) * cell;
            out.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\"/>\n",
                heat_color(s.get(i, j))
            ));
        }
    }
    let tick = |idx: usize| -> bool { idx == 1 || idx == n || idx.is_multiple_of(5) };
    for i in 1..=n {
        if tick(i) {
            let y = margin + (i - 1) * cell + cell / 2 + 4;
            out.push_str(&format!(
                "<text x=\"4\" y=\"{y}\" font-size=\"10\" font-family=\"monospace\">{i}</text>\n"
            ));
            let x = margin + (i - 1) * cell + cell / 2 - 4;
            out.push_str(&format!(
                "<text x=\"{x}\" y=\"20\" font-size=\"10\" font-family=\"monospace\">{i}</text>\n"
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Eigenvalue cloud in the complex plane with the unit circle dashed.
pub fn eigencloud(values: &[Complex]) -> String {
    let size = 420usize;
    let center = size as f64 / 2.0;
    // Scale so the unit circle occupies most of the canvas; expand if any
    // eigenvalue lies outside it.
    let max_mod = values
        .iter()
        .map(|z| z.abs())
        .fold(1.0f64, f64::max);
    let radius = (center - 30.0) / max_mod;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
         viewBox=\"0 0 {size} {size}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    out.push_str(&format!(
        "<line x1=\"10\" y1=\"{center}\" x2=\"{}\" y2=\"{center}\" stroke=\"#999\" stroke-width=\"1\"/>\n",
        size - 10
    ));
    out.push_str(&format!(
        "<line x1=\"{center}\" y1=\"10\" x2=\"{center}\" y2=\"{}\" stroke=\"#999\" stroke-width=\"1\"/>\n",
        size - 10
    ));
    out.push_str(&format!(
        "<circle cx=\"{center}\" cy=\"{center}\" r=\"{radius:.4}\" fill=\"none\" \
         stroke=\"#333\" stroke-width=\"1\" stroke-dasharray=\"6,4\"/>\n"
    ));
    for z in values {
        let x = center + radius * z.re;
        let y = center - radius * z.im;
        out.push_str(&format!(
            "<circle cx=\"{x:.4}\" cy=\"{y:.4}\" r=\"3.5\" fill=\"rgba(30,90,200,0.65)\"/>\n"
        ));
    }
    out.push_str("</svg>\n");
    out
}
