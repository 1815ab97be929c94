//! Host-side image arrays and resampling.

use std::path::Path;

use image::{imageops::FilterType, GrayImage, RgbImage};

use crate::config::ResizeFilter;
use crate::error::{Error, Result};

/// Channels-first float image, values nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageArray {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageArray {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + y as usize * w + x as usize] = p[c] as f32 / 127.5 - 1.0;
            }
        }
        ImageArray {
            channels: 3,
            height: h,
            width: w,
            data,
        }
    }

    /// Quantizes back to 8 bits, clamping out-of-range values.
    pub fn to_rgb(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", self.channels)));
        }
        let (h, w) = (self.height, self.width);
        Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                let v = self.data[c * h * w + y as usize * w + x as usize];
                ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        }))
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
            context: "image".into(),
        });
    }
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    image::open(path)
        .map(|i| i.to_luma8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn area_downsample(img: &RgbImage, height: u32, width: u32) -> Option<RgbImage> {
    let (w, h) = img.dimensions();
    if height == 0 || width == 0 || h % height != 0 || w % width != 0 {
        return None;
    }
    let (fy, fx) = (h / height, w / width);
    let n = (fy * fx) as f64;
    Some(RgbImage::from_fn(width, height, |x, y| {
        let mut acc = [0.0f64; 3];
        for dy in 0..fy {
            for dx in 0..fx {
                let p = img.get_pixel(x * fx + dx, y * fy + dy);
                for c in 0..3 {
                    acc[c] += p[c] as f64;
                }
            }
        }
        image::Rgb(acc.map(|a| (a / n).round() as u8))
    }))
}

/// Resize to `height`x`width`. `Area` averages whole blocks when the scale is
/// an integer divisor and otherwise falls back to bilinear.
pub fn resize_rgb(img: &RgbImage, height: u32, width: u32, filter: ResizeFilter) -> RgbImage {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    match filter {
        ResizeFilter::Nearest => image::imageops::resize(img, width, height, FilterType::Nearest),
        ResizeFilter::Bilinear => image::imageops::resize(img, width, height, FilterType::Triangle),
        ResizeFilter::Area => area_downsample(img, height, width)
            .unwrap_or_else(|| image::imageops::resize(img, width, height, FilterType::Triangle)),
    }
}

/// Places `times` copies side by side.
pub fn tile_horizontal(img: &RgbImage, times: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    RgbImage::from_fn(w * times, h, |x, y| *img.get_pixel(x % w, y))
}

/// Interpolation weights for half-pixel bilinear resampling of a 1-D axis,
/// as a dense `(out, in)` row-major matrix.
pub fn bilinear_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let f = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - f;
        m[o * n_in + i1] += f;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_is_exact() {
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([(x * 40) as u8, (y * 90) as u8, 17]));
        assert_eq!(ImageArray::from_rgb(&img).to_rgb().unwrap(), img);
    }

    #[test]
    fn tiling_repeats_columns() {
        let img = RgbImage::from_fn(3, 2, |x, y| image::Rgb([x as u8, y as u8, 0]));
        let t = tile_horizontal(&img, 4);
        assert_eq!(t.dimensions(), (12, 2));
        assert_eq!(t.get_pixel(7, 1), img.get_pixel(1, 1));
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (a, b) in [(4, 8), (8, 4), (5, 13), (1, 3)] {
            let m = bilinear_matrix(a, b);
            for o in 0..b {
                let s: f64 = m[o * a..(o + 1) * a].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn area_filter_averages_blocks() {
        let img = RgbImage::from_fn(4, 2, |x, _| image::Rgb([if x % 2 == 0 { 0 } else { 200 }, 0, 0]));
        let r = resize_rgb(&img, 1, 2, ResizeFilter::Area);
        assert_eq!(r.get_pixel(0, 0)[0], 100);
    }
}
