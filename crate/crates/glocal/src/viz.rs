//! Heatmap rendering: per-image min-max normalized 8-bit PNGs and
//! side-by-side composites (input | heatmap | ground-truth mask).

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::Result;

/// Color stops of the heatmap gradient (cold to hot), values in [0, 1].
const GRADIENT: [[f64; 3]; 5] = [
    [0.00, 0.00, 0.20], // deep blue
    [0.10, 0.30, 0.80], // blue
    [0.55, 0.15, 0.60], // purple
    [0.95, 0.45, 0.10], // orange
    [1.00, 0.95, 0.55], // pale yellow
];

fn gradient_color(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0) * (GRADIENT.len() - 1) as f64;
    let lo = (t.floor() as usize).min(GRADIENT.len() - 2);
    let frac = t - lo as f64;
    let mut out = [0.0; 3];
    for (c, v) in out.iter_mut().enumerate() {
        *v = GRADIENT[lo][c] * (1.0 - frac) + GRADIENT[lo + 1][c] * frac;
    }
    out
}

/// Render a map as RGB in `[0, 1]`, min-max normalized per image.
/// Constant maps render as the cold end.
pub fn heatmap_rgb(map: &Array2<f64>) -> Array3<f64> {
    let (h, w) = map.dim();
    let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
        let t = if span > 0.0 {
            (map[[i, j]] - min) / span
        } else {
            0.0
        };
        gradient_color(t)[c]
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an `[h, w, 3]` image in `[0, 1]` as an 8-bit PNG.
pub fn save_rgb_png(pixels: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([
            to_u8(pixels[[y as usize, x as usize, 0]]),
            to_u8(pixels[[y as usize, x as usize, 1]]),
            to_u8(pixels[[y as usize, x as usize, 2]]),
        ])
    });
    buf.save(path)?;
    Ok(())
}

/// Render and save a heatmap PNG at the map's resolution.
pub fn save_heatmap_png(map: &Array2<f64>, path: &Path) -> Result<()> {
    save_rgb_png(&heatmap_rgb(map), path)
}

const SEPARATOR_WIDTH: usize = 2;

/// Side-by-side composite: input, heatmap, and (when present) the
/// ground-truth mask, separated by thin white gutters.
pub fn composite_rgb(
    input: &Array3<f64>,
    map: &Array2<f64>,
    mask: Option<&Array2<f64>>,
) -> Array3<f64> {
    let (h, w, _) = input.dim();
    let panels: Vec<Array3<f64>> = {
        let mut p = vec![input.clone(), heatmap_rgb(map)];
        if let Some(mask) = mask {
            p.push(Array3::from_shape_fn((h, w, 3), |(i, j, _)| mask[[i, j]]));
        }
        p
    };
    let total_w = panels.len() * w + (panels.len() - 1) * SEPARATOR_WIDTH;
    let mut out = Array3::from_elem((h, total_w, 3), 1.0);
    for (k, panel) in panels.iter().enumerate() {
        let x0 = k * (w + SEPARATOR_WIDTH);
        out.slice_mut(ndarray::s![.., x0..x0 + w, ..]).assign(panel);
    }
    out
}

/// Render and save the composite PNG.
pub fn save_composite_png(
    input: &Array3<f64>,
    map: &Array2<f64>,
    mask: Option<&Array2<f64>>,
    path: &Path,
) -> Result<()> {
    save_rgb_png(&composite_rgb(input, map, mask), path)
}
