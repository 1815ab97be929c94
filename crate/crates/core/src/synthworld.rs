//! Procedural toy city and its renderers.
//!
//! Scenes live in a local metric frame (east, north, up) around an origin
//! geolocation: an axis-aligned street grid, box buildings placed off the
//! streets, and tall thin landmark pillars with unique colors. Panoramas are
//! ray cast with the camera model from [`crate::geo`], so every pixel can be
//! predicted analytically.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::{RenderConfig, RunConfig, WorldConfig};
use crate::dataio::manifest::{write_manifest, ManifestRecord, PanoramaEntry, SatelliteEntry};
use crate::error::{Error, Result};
use crate::geo::{
    column_azimuth, haversine_distance, row_elevation, GeoLocation, LocalFrame, OverheadFrame,
};
use crate::rng::{indexed_substream, Rng};

pub type RenderSettings = RenderConfig;

pub const SKY: Rgb<u8> = Rgb([135, 190, 235]);
pub const GROUND: Rgb<u8> = Rgb([104, 140, 78]);
pub const STREET: Rgb<u8> = Rgb([72, 72, 78]);

pub const FACADE_COLORS: [Rgb<u8>; 6] = [
    Rgb([178, 102, 72]),
    Rgb([200, 180, 150]),
    Rgb([150, 150, 160]),
    Rgb([120, 84, 60]),
    Rgb([210, 206, 196]),
    Rgb([160, 120, 110]),
];

pub const ROOF_COLORS: [Rgb<u8>; 6] = [
    Rgb([96, 56, 40]),
    Rgb([120, 110, 96]),
    Rgb([82, 82, 92]),
    Rgb([66, 48, 36]),
    Rgb([140, 140, 136]),
    Rgb([96, 72, 66]),
];

/// Saturated colors that appear nowhere else in a render.
pub const LANDMARK_COLORS: [Rgb<u8>; 4] = [
    Rgb([255, 0, 255]),
    Rgb([0, 255, 255]),
    Rgb([255, 255, 0]),
    Rgb([255, 0, 0]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum SegClass {
    Sky = 0,
    Ground = 1,
    Street = 2,
    Building = 3,
}

impl SegClass {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(SegClass::Sky),
            1 => Some(SegClass::Ground),
            2 => Some(SegClass::Street),
            3 => Some(SegClass::Building),
            _ => None,
        }
    }

    /// Display color used when a label map is fed to the model as an image.
    pub fn color(self) -> Rgb<u8> {
        match self {
            SegClass::Sky => Rgb([70, 130, 180]),
            SegClass::Ground => Rgb([152, 251, 152]),
            SegClass::Street => Rgb([128, 64, 128]),
            SegClass::Building => Rgb([70, 70, 70]),
        }
    }
}

/// Axis-aligned rectangle in local meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_e: f64,
    pub min_n: f64,
    pub max_e: f64,
    pub max_n: f64,
}

impl Rect {
    pub fn centered(e: f64, n: f64, width: f64, depth: f64) -> Self {
        Rect {
            min_e: e - width / 2.0,
            max_e: e + width / 2.0,
            min_n: n - depth / 2.0,
            max_n: n + depth / 2.0,
        }
    }

    pub fn contains(&self, e: f64, n: f64) -> bool {
        e >= self.min_e && e <= self.max_e && n >= self.min_n && n <= self.max_n
    }

    /// Closed-interval overlap test.
    pub fn intersects(&self, o: &Rect) -> bool {
        self.min_e <= o.max_e && o.min_e <= self.max_e && self.min_n <= o.max_n && o.min_n <= self.max_n
    }

    pub fn expanded(&self, m: f64) -> Rect {
        Rect {
            min_e: self.min_e - m,
            min_n: self.min_n - m,
            max_e: self.max_e + m,
            max_n: self.max_n + m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreetAxis {
    /// Runs east-west; `center` is a northing.
    EastWest,
    /// Runs north-south; `center` is an easting.
    NorthSouth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Street {
    pub axis: StreetAxis,
    pub center: f64,
    pub start: f64,
    pub end: f64,
    pub width: f64,
}

impl Street {
    pub fn rect(&self) -> Rect {
        let hw = self.width / 2.0;
        match self.axis {
            StreetAxis::EastWest => Rect {
                min_e: self.start,
                max_e: self.end,
                min_n: self.center - hw,
                max_n: self.center + hw,
            },
            StreetAxis::NorthSouth => Rect {
                min_e: self.center - hw,
                max_e: self.center + hw,
                min_n: self.start,
                max_n: self.end,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub footprint: Rect,
    pub height: f64,
    pub color_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub location: GeoLocation,
    pub color_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub origin: GeoLocation,
    /// Side of the square footprint centered on `origin`, meters.
    pub extent: f64,
    pub streets: Vec<Street>,
    pub buildings: Vec<Building>,
    pub landmarks: Vec<Landmark>,
    pub landmark_size: f64,
    pub landmark_height: f64,
}

impl SceneSpec {
    /// Scene with no streets, buildings or landmarks.
    pub fn empty(origin: GeoLocation, extent: f64) -> Self {
        SceneSpec {
            seed: 0,
            origin,
            extent,
            streets: Vec::new(),
            buildings: Vec::new(),
            landmarks: Vec::new(),
            landmark_size: 1.5,
            landmark_height: 40.0,
        }
    }

    pub fn frame(&self) -> LocalFrame {
        LocalFrame::new(self.origin)
    }

    pub fn bounds(&self) -> Rect {
        Rect::centered(0.0, 0.0, self.extent, self.extent)
    }

    pub fn landmark_rect(&self, lm: &Landmark) -> Rect {
        let (e, n) = self.frame().to_local(lm.location);
        Rect::centered(e, n, self.landmark_size, self.landmark_size)
    }

    pub fn street_at(&self, e: f64, n: f64) -> bool {
        self.streets.iter().any(|s| s.rect().contains(e, n))
    }

    /// Solid boxes: buildings then landmarks.
    fn solids(&self) -> Vec<Solid> {
        let mut out: Vec<Solid> = self
            .buildings
            .iter()
            .map(|b| Solid {
                rect: b.footprint,
                height: b.height,
                kind: SolidKind::Building(b.color_id),
            })
            .collect();
        out.extend(self.landmarks.iter().map(|lm| Solid {
            rect: self.landmark_rect(lm),
            height: self.landmark_height,
            kind: SolidKind::Landmark(lm.color_id),
        }));
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum SolidKind {
    Building(usize),
    Landmark(usize),
}

#[derive(Debug, Clone, Copy)]
struct Solid {
    rect: Rect,
    height: f64,
    kind: SolidKind,
}

/// What a camera ray sees first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hit {
    Sky,
    Ground,
    Street,
    Building(usize),
    Landmark(usize),
}

impl Hit {
    pub fn color(self) -> Rgb<u8> {
        match self {
            Hit::Sky => SKY,
            Hit::Ground => GROUND,
            Hit::Street => STREET,
            Hit::Building(id) => FACADE_COLORS[id % FACADE_COLORS.len()],
            Hit::Landmark(id) => LANDMARK_COLORS[id % LANDMARK_COLORS.len()],
        }
    }

    pub fn class(self) -> SegClass {
        match self {
            Hit::Sky => SegClass::Sky,
            Hit::Ground => SegClass::Ground,
            Hit::Street => SegClass::Street,
            Hit::Building(_) | Hit::Landmark(_) => SegClass::Building,
        }
    }
}

pub fn generate_scene(seed: u64, params: &WorldConfig) -> Result<SceneSpec> {
    if !(params.extent > 0.0) {
        return Err(Error::Param(format!("extent must be positive, got {}", params.extent)));
    }
    if !(params.street_spacing > params.street_width && params.street_width > 0.0) {
        return Err(Error::Param("street_spacing must exceed a positive street_width".into()));
    }
    if params.building_size_min <= 0.0 || params.building_size_max < params.building_size_min {
        return Err(Error::Param("invalid building size range".into()));
    }
    if params.building_height_max < params.building_height_min {
        return Err(Error::Param("invalid building height range".into()));
    }
    let origin = GeoLocation::new(params.origin_lat, params.origin_lon)?;
    let mut rng = indexed_substream(seed, "scene", 0);
    let half = params.extent / 2.0;

    let mut streets = Vec::new();
    let kmax = ((half - params.street_width / 2.0) / params.street_spacing).floor() as i64;
    for axis in [StreetAxis::EastWest, StreetAxis::NorthSouth] {
        for k in -kmax..=kmax {
            streets.push(Street {
                axis,
                center: k as f64 * params.street_spacing,
                start: -half,
                end: half,
                width: params.street_width,
            });
        }
    }
    let street_rects: Vec<Rect> = streets.iter().map(|s| s.rect().expanded(0.5)).collect();
    let bounds = Rect::centered(0.0, 0.0, params.extent, params.extent);
    let mut occupied: Vec<Rect> = Vec::new();

    let fits = |r: &Rect, occupied: &[Rect]| {
        r.min_e >= bounds.min_e
            && r.max_e <= bounds.max_e
            && r.min_n >= bounds.min_n
            && r.max_n <= bounds.max_n
            && !street_rects.iter().any(|s| s.intersects(r))
            && !occupied.iter().any(|o| o.expanded(1.0).intersects(r))
    };

    let mut buildings = Vec::with_capacity(params.building_count);
    for i in 0..params.building_count {
        let mut placed = false;
        for _ in 0..params.placement_retries.max(1) {
            let w = rng.random_range(params.building_size_min..=params.building_size_max);
            let d = rng.random_range(params.building_size_min..=params.building_size_max);
            let e = rng.random_range(-half..half);
            let n = rng.random_range(-half..half);
            let r = Rect::centered(e, n, w, d);
            if fits(&r, &occupied) {
                let height =
                    rng.random_range(params.building_height_min..=params.building_height_max);
                let color_id = rng.random_range(0..FACADE_COLORS.len());
                buildings.push(Building {
                    footprint: r,
                    height,
                    color_id,
                });
                occupied.push(r);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Param(format!(
                "could not place building {} of {} after {} attempts; lower building_count",
                i + 1,
                params.building_count,
                params.placement_retries
            )));
        }
    }

    let frame = LocalFrame::new(origin);
    let mut landmarks = Vec::with_capacity(params.landmark_count);
    for i in 0..params.landmark_count {
        let mut placed = false;
        for _ in 0..params.placement_retries.max(1) {
            let e = rng.random_range(-half..half);
            let n = rng.random_range(-half..half);
            let r = Rect::centered(e, n, params.landmark_size, params.landmark_size);
            if fits(&r, &occupied) {
                landmarks.push(Landmark {
                    location: frame.to_geo(e, n),
                    color_id: i % LANDMARK_COLORS.len(),
                });
                occupied.push(r);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Param(format!(
                "could not place landmark {} of {}",
                i + 1,
                params.landmark_count
            )));
        }
    }

    Ok(SceneSpec {
        seed,
        origin,
        extent: params.extent,
        streets,
        buildings,
        landmarks,
        landmark_size: params.landmark_size,
        landmark_height: params.landmark_height,
    })
}

fn check_footprint(scene: &SceneSpec, frame: &OverheadFrame) -> Result<()> {
    let (e, n) = scene.frame().to_local(frame.center);
    let half = frame.extent_m() / 2.0;
    let b = scene.bounds();
    let eps = 1e-6;
    if e - half < b.min_e - eps || e + half > b.max_e + eps || n - half < b.min_n - eps || n + half > b.max_n + eps {
        return Err(Error::Param(format!(
            "overhead footprint ({:.1} m) at ({e:.1}, {n:.1}) exceeds scene extent {:.1} m",
            frame.extent_m(),
            scene.extent
        )));
    }
    Ok(())
}

/// Orthographic north-up rasterization sampled at pixel centers.
pub fn render_overhead(scene: &SceneSpec, frame: &OverheadFrame) -> Result<RgbImage> {
    check_footprint(scene, frame)?;
    let local = scene.frame();
    let landmark_rects: Vec<(Rect, usize)> = scene
        .landmarks
        .iter()
        .map(|lm| (scene.landmark_rect(lm), lm.color_id))
        .collect();
    let mut img = RgbImage::new(frame.size as u32, frame.size as u32);
    for row in 0..frame.size {
        for col in 0..frame.size {
            let g = frame.pixel_to_geo(row as f64 + 0.5, col as f64 + 0.5);
            let (e, n) = local.to_local(g);
            let color = if let Some((_, id)) = landmark_rects.iter().find(|(r, _)| r.contains(e, n)) {
                LANDMARK_COLORS[id % LANDMARK_COLORS.len()]
            } else if let Some(b) = scene.buildings.iter().find(|b| b.footprint.contains(e, n)) {
                ROOF_COLORS[b.color_id % ROOF_COLORS.len()]
            } else if scene.street_at(e, n) {
                STREET
            } else {
                GROUND
            };
            img.put_pixel(col as u32, row as u32, color);
        }
    }
    Ok(img)
}

/// Ray/box slab test for a box on the ground; returns the entry distance.
fn ray_box(origin: [f64; 3], dir: [f64; 3], rect: &Rect, height: f64) -> Option<f64> {
    let mins = [rect.min_e, rect.min_n, 0.0];
    let maxs = [rect.max_e, rect.max_n, height];
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if dir[k].abs() < 1e-15 {
            if origin[k] < mins[k] || origin[k] > maxs[k] {
                return None;
            }
        } else {
            let inv = 1.0 / dir[k];
            let (mut a, mut b) = ((mins[k] - origin[k]) * inv, (maxs[k] - origin[k]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
    }
    if t1 >= t0 && t0 > 0.0 {
        Some(t0)
    } else {
        None
    }
}

struct Caster<'a> {
    scene: &'a SceneSpec,
    solids: Vec<Solid>,
    eye: [f64; 3],
}

impl<'a> Caster<'a> {
    fn new(scene: &'a SceneSpec, loc: GeoLocation, camera_height: f64) -> Result<Self> {
        let (e, n) = scene.frame().to_local(loc);
        let solids = scene.solids();
        if solids.iter().any(|s| s.rect.contains(e, n) && camera_height <= s.height) {
            return Err(Error::CameraInsideGeometry { east: e, north: n });
        }
        Ok(Caster {
            scene,
            solids,
            eye: [e, n, camera_height],
        })
    }

    fn cast(&self, dir: [f64; 3]) -> Hit {
        let mut best: Option<(f64, SolidKind)> = None;
        for s in &self.solids {
            if let Some(t) = ray_box(self.eye, dir, &s.rect, s.height) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, s.kind));
                }
            }
        }
        if let Some((_, kind)) = best {
            return match kind {
                SolidKind::Building(id) => Hit::Building(id),
                SolidKind::Landmark(id) => Hit::Landmark(id),
            };
        }
        if dir[2] < 0.0 {
            let t = self.eye[2] / -dir[2];
            let e = self.eye[0] + t * dir[0];
            let n = self.eye[1] + t * dir[1];
            if self.scene.street_at(e, n) {
                Hit::Street
            } else {
                Hit::Ground
            }
        } else {
            Hit::Sky
        }
    }
}

/// First-hit classification for every panorama pixel, camera yawed by
/// `yaw_deg` (clockwise) from north.
pub fn cast_panorama(
    scene: &SceneSpec,
    loc: GeoLocation,
    settings: &RenderSettings,
    yaw_deg: f64,
) -> Result<Vec<Hit>> {
    let (h, w) = (settings.pano_height, settings.pano_width);
    if h < 2 || w < 2 {
        return Err(Error::InvalidSize {
            what: "panorama",
            value: h.min(w),
        });
    }
    let caster = Caster::new(scene, loc, settings.camera_height)?;
    let yaw = yaw_deg.to_radians();
    let mut hits = Vec::with_capacity(h * w);
    for v in 0..h {
        let (sp, cp) = row_elevation(v as f64, h).sin_cos();
        for u in 0..w {
            let (st, ct) = (column_azimuth(u as f64, w) + yaw).sin_cos();
            hits.push(caster.cast([st * cp, ct * cp, sp]));
        }
    }
    Ok(hits)
}

pub fn render_panorama_yawed(
    scene: &SceneSpec,
    loc: GeoLocation,
    settings: &RenderSettings,
    yaw_deg: f64,
) -> Result<RgbImage> {
    let hits = cast_panorama(scene, loc, settings, yaw_deg)?;
    let w = settings.pano_width;
    Ok(RgbImage::from_fn(w as u32, settings.pano_height as u32, |x, y| {
        hits[y as usize * w + x as usize].color()
    }))
}

pub fn render_panorama(scene: &SceneSpec, loc: GeoLocation, settings: &RenderSettings) -> Result<RgbImage> {
    render_panorama_yawed(scene, loc, settings, 0.0)
}

/// Per-pixel [`SegClass`] ids from the same ray cast as [`render_panorama`].
pub fn render_segmentation(scene: &SceneSpec, loc: GeoLocation, settings: &RenderSettings) -> Result<GrayImage> {
    let hits = cast_panorama(scene, loc, settings, 0.0)?;
    let w = settings.pano_width;
    Ok(GrayImage::from_fn(w as u32, settings.pano_height as u32, |x, y| {
        Luma([hits[y as usize * w + x as usize].class() as u8])
    }))
}

/// Colorizes a label map for use as an image condition.
pub fn colorize_segmentation(labels: &GrayImage) -> RgbImage {
    RgbImage::from_fn(labels.width(), labels.height(), |x, y| {
        SegClass::from_u8(labels.get_pixel(x, y)[0])
            .map(SegClass::color)
            .unwrap_or(Rgb([0, 0, 0]))
    })
}

/// Uniform random point on a street that also lies inside `frame` with a
/// one-pixel margin.
pub fn sample_street_point(scene: &SceneSpec, frame: &OverheadFrame, rng: &mut Rng) -> Result<GeoLocation> {
    let local = scene.frame();
    let (ce, cn) = local.to_local(frame.center);
    let half = frame.extent_m() / 2.0 - frame.gsd;
    let window = Rect::centered(ce, cn, 2.0 * half, 2.0 * half);
    let candidates: Vec<Rect> = scene
        .streets
        .iter()
        .filter_map(|s| {
            let mut r = s.rect();
            // keep to the middle half of the carriageway
            let quarter = s.width / 4.0;
            match s.axis {
                StreetAxis::EastWest => {
                    r.min_n += quarter;
                    r.max_n -= quarter;
                }
                StreetAxis::NorthSouth => {
                    r.min_e += quarter;
                    r.max_e -= quarter;
                }
            }
            let clipped = Rect {
                min_e: r.min_e.max(window.min_e),
                max_e: r.max_e.min(window.max_e),
                min_n: r.min_n.max(window.min_n),
                max_n: r.max_n.min(window.max_n),
            };
            (clipped.min_e < clipped.max_e && clipped.min_n < clipped.max_n).then_some(clipped)
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::Param("no street inside the overhead footprint".into()));
    }
    let areas: Vec<f64> = candidates
        .iter()
        .map(|r| (r.max_e - r.min_e) * (r.max_n - r.min_n))
        .collect();
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut idx = 0;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            idx = i;
            break;
        }
        pick -= a;
        idx = i;
    }
    let r = candidates[idx];
    let e = rng.random_range(r.min_e..r.max_e);
    let n = rng.random_range(r.min_n..r.max_n);
    Ok(local.to_geo(e, n))
}

/// Result of [`make_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetSummary {
    pub manifest_path: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

fn save_png<P: AsRef<Path>>(img: &image::DynamicImage, path: P) -> Result<()> {
    let path = path.as_ref();
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Renders `n_scenes` scenes, each with one satellite image, `panos_per_scene`
/// street panoramas, a target panorama and its label map, and writes a JSONL
/// manifest in `out_dir`.
pub fn make_dataset(
    n_scenes: usize,
    panos_per_scene: usize,
    seed: u64,
    out_dir: &Path,
    cfg: &RunConfig,
) -> Result<DatasetSummary> {
    if n_scenes == 0 {
        return Err(Error::Param("n_scenes must be >= 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let settings = &cfg.render;
    let mut records = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let mut rng = indexed_substream(seed, "dataset", i as u64);
        let scene_seed: u64 = rng.random();
        let scene = generate_scene(scene_seed, &cfg.world)?;
        let frame = OverheadFrame::new(scene.origin, settings.gsd, settings.overhead_size)?;

        let id = format!("scene_{i:04}");
        let dir = out_dir.join(&id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let target = sample_street_point(&scene, &frame, &mut rng)?;
        let mut panos: Vec<(GeoLocation, f64)> = Vec::with_capacity(panos_per_scene);
        while panos.len() < panos_per_scene {
            let loc = sample_street_point(&scene, &frame, &mut rng)?;
            if loc != target {
                panos.push((loc, haversine_distance(loc, target)));
            }
        }
        panos.sort_by(|a, b| a.1.total_cmp(&b.1));

        let sat = render_overhead(&scene, &frame)?;
        save_png(&sat.into(), dir.join("sat.png"))?;
        let mut pano_entries = Vec::with_capacity(panos.len());
        for (j, (loc, _)) in panos.iter().enumerate() {
            let img = render_panorama(&scene, *loc, settings)?;
            let name = format!("pano_{j:02}.png");
            save_png(&img.into(), dir.join(&name))?;
            pano_entries.push(PanoramaEntry {
                path: format!("{id}/{name}"),
                lat: loc.lat,
                lon: loc.lon,
            });
        }
        let tgt = render_panorama(&scene, target, settings)?;
        save_png(&tgt.into(), dir.join("target.png"))?;
        let seg = render_segmentation(&scene, target, settings)?;
        save_png(&seg.into(), dir.join("target_seg.png"))?;

        records.push(ManifestRecord {
            id: id.clone(),
            satellite: SatelliteEntry {
                path: format!("{id}/sat.png"),
                center: frame.center,
                gsd: frame.gsd,
                size: frame.size,
            },
            panoramas: pano_entries,
            target,
            target_pano_path: format!("{id}/target.png"),
            seg_path: Some(format!("{id}/target_seg.png")),
        });
    }
    let manifest_path = out_dir.join(MANIFEST_NAME);
    write_manifest(&manifest_path, &records)?;
    Ok(DatasetSummary {
        manifest_path,
        records,
    })
}
