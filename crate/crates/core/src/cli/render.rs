//! Output rendering: annotated images and a PR-curve SVG.

use crate::data::imageio::Rgb8Image;
use crate::detector::Detection;

/// Distinct colors per class id (cycled).
pub const CLASS_COLORS: [[u8; 3]; 6] = [
    [230, 60, 50],
    [60, 180, 75],
    [55, 100, 230],
    [240, 190, 30],
    [170, 60, 200],
    [70, 210, 210],
];

fn put(img: &mut Rgb8Image, x: i64, y: i64, color: [u8; 3]) {
    if x < 0 || y < 0 || x >= img.width as i64 || y >= img.height as i64 {
        return;
    }
    let base = (y as usize * img.width + x as usize) * 3;
    img.pixels[base..base + 3].copy_from_slice(&color);
}

/// Draw a 2px rectangle outline.
pub fn draw_box(img: &mut Rgb8Image, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let (x0, y0, x1, y1) = (
        x0.round() as i64,
        y0.round() as i64,
        x1.round() as i64 - 1,
        y1.round() as i64 - 1,
    );
    for t in 0..2i64 {
        for x in x0..=x1 {
            put(img, x, y0 + t, color);
            put(img, x, y1 - t, color);
        }
        for y in y0..=y1 {
            put(img, x0 + t, y, color);
            put(img, x1 - t, y, color);
        }
    }
}

/// Copy of the image with every detection outlined in its class color.
pub fn annotate(image: &Rgb8Image, detections: &[Detection]) -> Rgb8Image {
    let mut out = image.clone();
    for d in detections {
        let color = CLASS_COLORS[d.class_id % CLASS_COLORS.len()];
        draw_box(&mut out, d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max, color);
    }
    out
}

/// Precision-recall polylines (one per class) as a standalone SVG document.
pub fn pr_curve_svg(curves: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, margin) = (480.0, 360.0, 40.0);
    let px = |r: f64| margin + r * (w - 2.0 * margin);
    let py = |p: f64| h - margin - p * (h - 2.0 * margin);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        px(0.0),
        py(0.0),
        px(1.0),
        py(0.0)
    ));
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        px(0.0),
        py(0.0),
        px(0.0),
        py(1.0)
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">recall</text>\n",
        px(0.45),
        py(0.0) + 28.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 {} {})\">precision</text>\n",
        px(0.0) - 28.0,
        py(0.4),
        px(0.0) - 28.0,
        py(0.4)
    ));
    for (i, (name, points)) in curves.iter().enumerate() {
        let c = CLASS_COLORS[i % CLASS_COLORS.len()];
        let color = format!("rgb({},{},{})", c[0], c[1], c[2]);
        if !points.is_empty() {
            let path: Vec<String> = points
                .iter()
                .map(|&(r, p)| format!("{:.2},{:.2}", px(r), py(p)))
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                color,
                path.join(" ")
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{}\">{}</text>\n",
            w - margin - 100.0,
            margin + 14.0 * i as f64,
            color,
            name
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
