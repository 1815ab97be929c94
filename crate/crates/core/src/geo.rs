//! Geodesy and camera geometry.
//!
//! Conventions used throughout the crate:
//! - Earth is a sphere of radius [`EARTH_RADIUS_M`].
//! - Ray directions live in a local east-north-up (ENU) frame.
//! - Equirectangular panoramas cover 360° × 180°. Pixel centers sit at
//!   `+0.5` offsets; column `u` has azimuth `2π((u + 0.5)/W − 0.5)` (0 = north,
//!   clockwise positive) and row `v` has elevation `π(0.5 − (v + 0.5)/H)`.
//!   The image center `((W − 1)/2, (H − 1)/2)` therefore looks due north along
//!   the horizon and the left/right borders look south.
//! - Overhead frames are north-up with square pixels of `gsd` meters.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Default divisor applied to haversine meters for the distance feature map.
pub const DEFAULT_DISTANCE_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoLocation {
    pub lat: f64,
    pub lon: f64,
}

impl GeoLocation {
    /// Validated constructor: lat in [-90, 90], lon in [-180, 180).
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let loc = GeoLocation { lat, lon };
        if loc.is_valid() {
            Ok(loc)
        } else {
            Err(Error::InvalidLocation { lat, lon })
        }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..180.0).contains(&self.lon)
    }
}

/// Great-circle distance in meters.
pub fn haversine_distance(a: GeoLocation, b: GeoLocation) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Initial great-circle bearing from `a` to `b` in degrees, `[0, 360)`,
/// 0 = north, 90 = east.
pub fn compass_bearing(a: GeoLocation, b: GeoLocation) -> Result<f64> {
    if a == b {
        return Err(Error::CoincidentPoints);
    }
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlon = (b.lon - a.lon).to_radians();
    let y = dlon.sin() * lat2.cos();
    let x = lat1.cos() * lat2.sin() - lat1.sin() * lat2.cos() * dlon.cos();
    let deg = y.atan2(x).to_degrees();
    Ok(normalize_degrees(deg))
}

fn normalize_degrees(deg: f64) -> f64 {
    let d = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360.0 for tiny negative inputs
    if d >= 360.0 {
        0.0
    } else {
        d
    }
}

/// Azimuth (radians, 0 = north, clockwise) of a possibly fractional column.
pub fn column_azimuth(col: f64, width: usize) -> f64 {
    2.0 * PI * ((col + 0.5) / width as f64 - 0.5)
}

/// Elevation (radians, positive up) of a possibly fractional row.
pub fn row_elevation(row: f64, height: usize) -> f64 {
    PI * (0.5 - (row + 0.5) / height as f64)
}

/// Fractional column whose azimuth equals `bearing_deg`, in `[-0.5, W - 0.5)`.
pub fn azimuth_to_column(bearing_deg: f64, width: usize) -> f64 {
    let mut az = bearing_deg.to_radians();
    // map into [-π, π)
    az = (az + PI).rem_euclid(2.0 * PI) - PI;
    width as f64 * (az / (2.0 * PI) + 0.5) - 0.5
}

fn ray_from_angles(azimuth: f64, elevation: f64) -> [f64; 3] {
    let (st, ct) = azimuth.sin_cos();
    let (sp, cp) = elevation.sin_cos();
    [st * cp, ct * cp, sp]
}

/// Unit ENU ray for a fractional pixel coordinate of an `height × width`
/// equirectangular image.
pub fn pixel_ray(col: f64, row: f64, height: usize, width: usize) -> [f64; 3] {
    ray_from_angles(column_azimuth(col, width), row_elevation(row, height))
}

/// Dense per-pixel ENU ray directions, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RayField {
    height: usize,
    width: usize,
    rays: Vec<[f64; 3]>,
}

impl RayField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        self.rays[row * self.width + col]
    }

    pub fn rays(&self) -> &[[f64; 3]] {
        &self.rays
    }

    /// Ray at a fractional pixel position using the same camera model.
    pub fn ray_at(&self, col: f64, row: f64) -> [f64; 3] {
        pixel_ray(col, row, self.height, self.width)
    }

    /// Channel-first layout `[e..., n..., u...]`, each `H × W`.
    pub fn to_channels_first(&self) -> Vec<f64> {
        let n = self.rays.len();
        let mut out = vec![0.0; 3 * n];
        for (i, r) in self.rays.iter().enumerate() {
            out[i] = r[0];
            out[n + i] = r[1];
            out[2 * n + i] = r[2];
        }
        out
    }
}

pub fn pixel_ray_field(height: usize, width: usize) -> Result<RayField> {
    if height < 2 {
        return Err(Error::InvalidSize {
            what: "ray field height",
            value: height,
        });
    }
    if width < 2 {
        return Err(Error::InvalidSize {
            what: "ray field width",
            value: width,
        });
    }
    let mut rays = Vec::with_capacity(height * width);
    for v in 0..height {
        let el = row_elevation(v as f64, height);
        for u in 0..width {
            rays.push(ray_from_angles(column_azimuth(u as f64, width), el));
        }
    }
    Ok(RayField {
        height,
        width,
        rays,
    })
}

/// Rotates every ray about the up axis by `-bearing` so that the horizontal
/// direction toward the target becomes `[0, 1, 0]`.
pub fn target_relative_orientation(rays: &RayField, bearing_deg: f64) -> RayField {
    let (s, c) = bearing_deg.to_radians().sin_cos();
    let rotated = rays
        .rays
        .iter()
        .map(|&[e, n, u]| [e * c - n * s, n * c + e * s, u])
        .collect();
    RayField {
        height: rays.height,
        width: rays.width,
        rays: rotated,
    }
}

/// Constant `H × W` map holding `haversine(a, b) / scale`.
pub fn distance_feature_scaled(
    a: GeoLocation,
    b: GeoLocation,
    height: usize,
    width: usize,
    scale: f64,
) -> Vec<f64> {
    vec![haversine_distance(a, b) / scale; height * width]
}

pub fn distance_feature(a: GeoLocation, b: GeoLocation, height: usize, width: usize) -> Vec<f64> {
    distance_feature_scaled(a, b, height, width, DEFAULT_DISTANCE_SCALE)
}

/// Local tangent-plane (equirectangular) approximation around an origin.
/// Valid for the sub-kilometer extents used here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalFrame {
    pub origin: GeoLocation,
}

impl LocalFrame {
    pub fn new(origin: GeoLocation) -> Self {
        LocalFrame { origin }
    }

    /// `(east, north)` offset in meters.
    pub fn to_local(&self, loc: GeoLocation) -> (f64, f64) {
        let east = EARTH_RADIUS_M * self.origin.lat.to_radians().cos() * (loc.lon - self.origin.lon).to_radians();
        let north = EARTH_RADIUS_M * (loc.lat - self.origin.lat).to_radians();
        (east, north)
    }

    pub fn to_geo(&self, east: f64, north: f64) -> GeoLocation {
        let lat = self.origin.lat + (north / EARTH_RADIUS_M).to_degrees();
        let lon = self.origin.lon
            + (east / (EARTH_RADIUS_M * self.origin.lat.to_radians().cos())).to_degrees();
        GeoLocation { lat, lon }
    }
}

/// North-up square overhead image footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadFrame {
    pub center: GeoLocation,
    /// Meters per pixel.
    pub gsd: f64,
    /// Side length in pixels.
    pub size: usize,
}

impl OverheadFrame {
    pub fn new(center: GeoLocation, gsd: f64, size: usize) -> Result<Self> {
        if !(gsd > 0.0 && gsd.is_finite()) {
            return Err(Error::Param(format!("gsd must be positive, got {gsd}")));
        }
        if size == 0 {
            return Err(Error::InvalidSize {
                what: "overhead frame",
                value: size,
            });
        }
        Ok(OverheadFrame { center, gsd, size })
    }

    /// Footprint side length in meters.
    pub fn extent_m(&self) -> f64 {
        self.gsd * self.size as f64
    }

    /// Unchecked pixel coordinate of a location; may fall outside the frame.
    pub fn project(&self, loc: GeoLocation) -> (f64, f64) {
        let (east, north) = LocalFrame::new(self.center).to_local(loc);
        let half = self.size as f64 / 2.0;
        (half - north / self.gsd, half + east / self.gsd)
    }

    pub fn contains(&self, loc: GeoLocation) -> bool {
        let (row, col) = self.project(loc);
        let s = self.size as f64;
        (0.0..s).contains(&row) && (0.0..s).contains(&col)
    }

    /// Inverse of [`geo_to_overhead_pixel`].
    pub fn pixel_to_geo(&self, row: f64, col: f64) -> GeoLocation {
        let half = self.size as f64 / 2.0;
        let east = (col - half) * self.gsd;
        let north = (half - row) * self.gsd;
        LocalFrame::new(self.center).to_geo(east, north)
    }
}

/// `(row, col)` of a location in the overhead frame (fractional pixels,
/// pixel `i` spans `[i, i + 1)`).
pub fn geo_to_overhead_pixel(loc: GeoLocation, frame: &OverheadFrame) -> Result<(f64, f64)> {
    let (row, col) = frame.project(loc);
    let s = frame.size as f64;
    if !(0.0..s).contains(&row) || !(0.0..s).contains(&col) {
        return Err(Error::OutOfFootprint {
            row,
            col,
            size: frame.size,
        });
    }
    Ok((row, col))
}

pub fn overhead_pixel_to_geo(row: f64, col: f64, frame: &OverheadFrame) -> GeoLocation {
    frame.pixel_to_geo(row, col)
}
