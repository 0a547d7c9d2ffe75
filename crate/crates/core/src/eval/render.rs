//! Grayscale PNG previews and small SVG charts.

use std::fmt::Write as _;

use crate::error::{arg_err, Error, Result};
use crate::Field;

/// Pixels of blank space between panels in a strip.
pub const STRIP_GAP: usize = 2;

fn to_gray(v: f64, lo: f64, hi: f64) -> u8 {
    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    (t.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Shared display range over several images: zero to the largest value.
pub fn shared_range(images: &[&Field]) -> (f64, f64) {
    let hi = images.iter().flat_map(|f| f.iter()).copied().fold(0.0_f64, f64::max);
    (0.0, if hi > 0.0 { hi } else { 1.0 })
}

fn encode(width: usize, height: usize, pixels: &[u8], text: &[(String, String)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        for (k, v) in text {
            enc.add_text_chunk(k.clone(), v.clone()).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        let mut w = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        w.write_image_data(pixels).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(out)
}

/// One image as an 8-bit grayscale PNG over `[lo, hi]`.
pub fn encode_png(image: &Field, lo: f64, hi: f64) -> Result<Vec<u8>> {
    let pixels: Vec<u8> = image.iter().map(|&v| to_gray(v, lo, hi)).collect();
    encode(image.ncols(), image.nrows(), &pixels, &[])
}

/// Equal-size images side by side on one intensity scale, with text chunks attached.
pub fn encode_strip(images: &[&Field], lo: f64, hi: f64, text: &[(String, String)]) -> Result<Vec<u8>> {
    let first = images.first().ok_or_else(|| arg_err("strip needs at least one image"))?;
    let (h, w) = first.dim();
    if images.iter().any(|f| f.dim() != (h, w)) {
        return Err(arg_err("strip images differ in size"));
    }
    let width = images.len() * w + (images.len() - 1) * STRIP_GAP;
    let mut pixels = vec![255u8; width * h];
    for (k, img) in images.iter().enumerate() {
        let x0 = k * (w + STRIP_GAP);
        for ((r, c), &v) in img.indexed_iter() {
            pixels[r * width + x0 + c] = to_gray(v, lo, hi);
        }
    }
    encode(width, h, &pixels, text)
}

const PANEL_W: f64 = 260.0;
const PANEL_H: f64 = 200.0;
const MARGIN: f64 = 40.0;

/// Line charts sharing one x axis, one panel per series.
pub fn line_panels_svg(x_label: &str, x: &[f64], series: &[(&str, &[f64])]) -> String {
    let width = series.len() as f64 * (PANEL_W + MARGIN) + MARGIN;
    let height = PANEL_H + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#);
    let (x_lo, x_hi) = bounds(x);
    for (k, (name, ys)) in series.iter().enumerate() {
        let ox = MARGIN + k as f64 * (PANEL_W + MARGIN);
        let oy = MARGIN;
        let (y_lo, y_hi) = bounds(ys);
        let px = |v: f64| ox + (v - x_lo) / (x_hi - x_lo) * PANEL_W;
        let py = |v: f64| oy + PANEL_H - (v - y_lo) / (y_hi - y_lo) * PANEL_H;
        let _ = writeln!(s, r#"<rect x="{ox}" y="{oy}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{name}</text>"#, ox + PANEL_W / 2.0, oy - 8.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, ox + PANEL_W / 2.0, oy + PANEL_H + 30.0);
        let _ = writeln!(s, r#"<text x="{ox}" y="{}">{x_lo:.3}</text>"#, oy + PANEL_H + 14.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x_hi:.3}</text>"#, ox + PANEL_W, oy + PANEL_H + 14.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y_hi:.4}</text>"#, ox - 2.0, oy + 10.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y_lo:.4}</text>"#, ox - 2.0, oy + PANEL_H);
        let points: Vec<String> = x.iter().zip(ys.iter()).map(|(&a, &b)| format!("{:.2},{:.2}", px(a), py(b))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, points.join(" "));
        for p in &points {
            let (cx, cy) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="steelblue"/>"#);
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Grayscale heat map with row and column labels and the cell values printed.
pub fn heatmap_svg(title: &str, row_label: &str, col_label: &str, labels: &[String], cells: &[Vec<f64>]) -> String {
    let k = labels.len();
    let cell = 44.0;
    let left = 80.0;
    let top = 50.0;
    let width = left + k as f64 * cell + 20.0;
    let height = top + k as f64 * cell + 40.0;
    let (lo, hi) = bounds(&cells.iter().flatten().copied().collect::<Vec<_>>());
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#);
    let _ = writeln!(s, r#"<text x="{}" y="16" text-anchor="middle" font-size="12">{title}</text>"#, width / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{col_label}</text>"#, left + k as f64 * cell / 2.0, height - 8.0);
    let _ = writeln!(s, r#"<text x="10" y="{}">{row_label}</text>"#, top - 8.0);
    for (i, row) in cells.iter().enumerate() {
        let y = top + i as f64 * cell;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 4.0, y + cell / 2.0 + 4.0, labels[i]);
        for (j, &v) in row.iter().enumerate() {
            let x = left + j as f64 * cell;
            let g = to_gray(v, lo, hi);
            let ink = if g > 128 { "black" } else { "white" };
            let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})"/>"#);
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{v:.3}</text>"#, x + cell / 2.0, y + cell / 2.0 + 4.0);
        }
    }
    for (j, l) in labels.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{l}</text>"#, left + j as f64 * cell + cell / 2.0, top + k as f64 * cell + 14.0);
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}
