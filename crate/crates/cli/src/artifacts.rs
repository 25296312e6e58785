//! Dependency-free preview and plot writers: 16-bit binary PGM with a window
//! sidecar, and standalone SVG line plots.

use ndarray::Array2;
use std::io::Write;
use std::path::Path;

/// Min-max windowed 16-bit PGM (big-endian samples per the format). The
/// window is recorded in a `.window.txt` sidecar.
pub fn write_pgm16(path: &Path, values: &Array2<f64>) -> std::io::Result<()> {
    let (h, w) = values.dim();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(32 + h * w * 2);
    out.extend_from_slice(format!("P5\n{w} {h}\n65535\n").as_bytes());
    for v in values.iter() {
        let scaled = ((v - lo) / range * 65535.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&scaled.to_be_bytes());
    }
    std::fs::write(path, out)?;
    let sidecar = path.with_extension("window.txt");
    std::fs::write(sidecar, format!("min,{lo:?}\nmax,{hi:?}\n"))
}

/// Standalone SVG polyline plot of (x, y) points.
pub fn write_svg_plot(
    path: &Path,
    points: &[(f64, f64)],
    title: &str,
    x_label: &str,
    y_label: &str,
) -> std::io::Result<()> {
    const W: f64 = 860.0;
    const H: f64 = 520.0;
    const M: f64 = 70.0;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"28\" text-anchor=\"middle\" font-size=\"18\">{title}</text>\n",
        W / 2.0
    ));
    if points.is_empty() {
        svg.push_str("<text x=\"430\" y=\"260\" text-anchor=\"middle\" font-size=\"14\">no data</text>\n</svg>\n");
        return std::fs::write(path, svg);
    }
    let (x0, x1) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
        (a.min(p.0), b.max(p.0))
    });
    let (y0, y1) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
        (a.min(p.1), b.max(p.1))
    });
    let xr = if x1 > x0 { x1 - x0 } else { 1.0 };
    let yr = if y1 > y0 { y1 - y0 } else { 1.0 };
    let sx = |x: f64| M + (x - x0) / xr * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / yr * (H - 2.0 * M);
    svg.push_str(&format!(
        "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - M,
        W - M,
        H - M,
        H - M
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">{x_label}</text>\n\
         <text x=\"18\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 {})\">{y_label}</text>\n",
        W / 2.0,
        H - 24.0,
        H / 2.0,
        H / 2.0
    ));
    svg.push_str(&format!(
        "<text x=\"{M}\" y=\"{}\" font-size=\"11\">{x0:.4}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"11\">{x1:.4}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"11\">{y0:.3e}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"11\">{y1:.3e}</text>\n",
        H - M + 16.0,
        W - M,
        H - M + 16.0,
        M - 6.0,
        H - M,
        M - 6.0,
        M + 6.0
    ));
    let mut line = String::from("<polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"1.5\" points=\"");
    for (i, &(x, y)) in points.iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        line.push_str(&format!("{:.2},{:.2}", sx(x), sy(y)));
    }
    line.push_str("\"/>\n");
    svg.push_str(&line);
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)
}

/// Write a manifest listing the artifacts a subcommand produced.
pub fn write_manifest(dir: &Path, entries: &[String]) -> std::io::Result<()> {
    let file = std::fs::File::create(dir.join("manifest.csv"))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "artifact")?;
    for e in entries {
        writeln!(w, "{e}")?;
    }
    w.flush()
}
