//! Attention figures: heatmap overlays, colored borders and location markers.

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::geo::{geo_to_overhead_pixel, GeoLocation, OverheadFrame};

/// Border/marker colors, one per panorama (cycled).
pub const PANO_COLORS: [[u8; 3]; 6] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];
pub const TARGET_COLOR: [u8; 3] = [255, 225, 25];

pub fn pano_color(k: usize) -> [u8; 3] {
    PANO_COLORS[k % PANO_COLORS.len()]
}

/// Blue-green-yellow-red ramp for values in [0, 1].
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let stops = [[0.0, 0.0, 0.5], [0.0, 0.4, 1.0], [0.0, 0.9, 0.5], [1.0, 0.9, 0.0], [0.9, 0.0, 0.0]];
    let x = v * (stops.len() - 1) as f64;
    let i = (x.floor() as usize).min(stops.len() - 2);
    let t = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = ((stops[i][c] * (1.0 - t) + stops[i + 1][c] * t) * 255.0).round() as u8;
    }
    out
}

fn sample_bilinear(map: &[f64], mh: usize, mw: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (mh - 1) as f64);
    let x = x.clamp(0.0, (mw - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(mh - 1), (x0 + 1).min(mw - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| map[r * mw + c];
    (at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx) * (1.0 - ty) + (at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx) * ty
}

/// Blends a max-normalized, bilinearly upsampled heatmap over `base`.
pub fn overlay_heatmap(base: &RgbImage, map: &[f64], mh: usize, mw: usize, alpha: f64) -> Result<RgbImage> {
    if map.len() != mh * mw || map.is_empty() {
        return Err(Error::Shape(format!("heatmap has {} values, expected {mh}x{mw}", map.len())));
    }
    let max = map.iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let (w, h) = base.dimensions();
    let sy = mh as f64 / h as f64;
    let sx = mw as f64 / w as f64;
    let mut out = base.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let v = sample_bilinear(map, mh, mw, (y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5) * scale;
        let c = colormap(v);
        for k in 0..3 {
            p.0[k] = (p.0[k] as f64 * (1.0 - alpha) + c[k] as f64 * alpha).round() as u8;
        }
    }
    Ok(out)
}

pub fn draw_border(img: &mut RgbImage, color: [u8; 3], thickness: u32) {
    let (w, h) = img.dimensions();
    for (x, y, p) in img.enumerate_pixels_mut() {
        if x < thickness || y < thickness || x + thickness >= w || y + thickness >= h {
            *p = Rgb(color);
        }
    }
}

/// Filled disc centered on continuous pixel coordinates.
pub fn draw_dot(img: &mut RgbImage, row: f64, col: f64, radius: f64, color: [u8; 3]) {
    for (x, y, p) in img.enumerate_pixels_mut() {
        let dy = y as f64 + 0.5 - row;
        let dx = x as f64 + 0.5 - col;
        if dx * dx + dy * dy <= radius * radius {
            *p = Rgb(color);
        }
    }
}

/// Hollow square outline centered on continuous pixel coordinates.
pub fn draw_square(img: &mut RgbImage, row: f64, col: f64, half: f64, color: [u8; 3]) {
    for (x, y, p) in img.enumerate_pixels_mut() {
        let dy = (y as f64 + 0.5 - row).abs();
        let dx = (x as f64 + 0.5 - col).abs();
        let d = dx.max(dy);
        if d <= half && d > half - 1.0 {
            *p = Rgb(color);
        }
    }
}

/// Local attention figure for panorama `k`.
pub fn local_attention_figure(pano: &RgbImage, map: &[f64], mh: usize, mw: usize, k: usize) -> Result<RgbImage> {
    let mut img = overlay_heatmap(pano, map, mh, mw, 0.5)?;
    draw_border(&mut img, pano_color(k), 2);
    Ok(img)
}

/// Marker placed on the overhead figure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Marker {
    pub row: f64,
    pub col: f64,
    pub color: [u8; 3],
}

/// Global attention overlaid on the overhead image with a target square and
/// one dot per panorama. Panoramas outside the footprint get no dot.
pub fn global_attention_figure(
    overhead: &RgbImage,
    map: &[f64],
    size: usize,
    frame: &OverheadFrame,
    target: GeoLocation,
    panos: &[GeoLocation],
) -> Result<(RgbImage, Vec<Marker>)> {
    let mut img = overlay_heatmap(overhead, map, size, size, 0.5)?;
    let mut markers = Vec::new();
    let (tr, tc) = geo_to_overhead_pixel(target, frame)?;
    for (k, loc) in panos.iter().enumerate() {
        if let Ok((r, c)) = geo_to_overhead_pixel(*loc, frame) {
            draw_dot(&mut img, r, c, 3.0, pano_color(k));
            markers.push(Marker { row: r, col: c, color: pano_color(k) });
        }
    }
    draw_square(&mut img, tr, tc, 5.0, TARGET_COLOR);
    markers.insert(0, Marker { row: tr, col: tc, color: TARGET_COLOR });
    Ok((img, markers))
}
