use mvps_core::config::RunConfig;
use mvps_core::geo::{azimuth_to_column, compass_bearing, GeoLocation, OverheadFrame};
use mvps_core::rng::indexed_substream;
use mvps_core::synthworld::*;

/// Circular column distance on a `w`-wide panorama.
fn col_dist(a: f64, b: f64, w: f64) -> f64 {
    let d = (a - b).rem_euclid(w);
    d.min(w - d)
}

/// Landmark column check for one camera. Returns (visible, mismatched)
/// counts. A landmark matches when the column predicted from the compass
/// bearing is within one pixel of the run of columns showing its color.
fn check_camera(scene: &SceneSpec, cam: GeoLocation, render: &RunConfig) -> (usize, Vec<String>) {
    let s = &render.render;
    let img = render_panorama(scene, cam, s).unwrap();
    let w = s.pano_width;
    let mut visible = 0;
    let mut bad = Vec::new();
    for lm in &scene.landmarks {
        let color = LANDMARK_COLORS[lm.color_id % LANDMARK_COLORS.len()];
        let cols: Vec<usize> = (0..w)
            .filter(|&c| (0..s.pano_height).any(|r| *img.get_pixel(c as u32, r as u32) == color))
            .collect();
        if cols.is_empty() {
            continue;
        }
        visible += 1;
        let pred = azimuth_to_column(compass_bearing(cam, lm.location).unwrap(), w);
        let nearest = cols
            .iter()
            .map(|&c| col_dist(c as f64, pred, w as f64))
            .fold(f64::INFINITY, f64::min);
        if nearest > 1.0 {
            bad.push(format!("landmark {} predicted col {pred:.2}, nearest colored col {nearest:.2} px away", lm.color_id));
        }
    }
    (visible, bad)
}

#[test]
fn landmark_columns_follow_compass_bearing() {
    let mut cfg = RunConfig::tiny();
    cfg.render.pano_height = 256;
    cfg.render.pano_width = 1024;
    let tiny = RunConfig::tiny();
    let mut visible = 0;
    for i in 0..10u64 {
        let scene = generate_scene(1000 + i, &cfg.world).unwrap();
        let frame = OverheadFrame::new(scene.origin, tiny.render.gsd, tiny.render.overhead_size).unwrap();
        let cam = sample_street_point(&scene, &frame, &mut indexed_substream(7, "cam", i)).unwrap();
        let (v, bad) = check_camera(&scene, cam, &cfg);
        visible += v;
        assert!(bad.is_empty(), "scene {i}: {bad:?}");
    }
    assert!(visible > 0);
}

#[test]
fn dataset_is_deterministic_and_complete() {
    let cfg = RunConfig::tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = make_dataset(2, 3, 7, a.path(), &cfg).unwrap();
    let sb = make_dataset(2, 3, 7, b.path(), &cfg).unwrap();
    assert_eq!(sa.records, sb.records);
    assert_eq!(
        std::fs::read(&sa.manifest_path).unwrap(),
        std::fs::read(&sb.manifest_path).unwrap()
    );
    assert_eq!(sa.records.len(), 2);
    for r in &sa.records {
        assert_eq!(r.panoramas.len(), 3);
        for p in &r.panoramas {
            assert!(a.path().join(&p.path).is_file());
        }
        let a_img = std::fs::read(a.path().join(&r.target_pano_path)).unwrap();
        let b_img = std::fs::read(b.path().join(&r.target_pano_path)).unwrap();
        assert_eq!(a_img, b_img);
    }
    assert!(make_dataset(0, 3, 7, a.path(), &cfg).is_err());
}

#[test]
fn overhead_landmarks_sit_at_projected_pixels() {
    let cfg = RunConfig::tiny();
    let scene = generate_scene(11, &cfg.world).unwrap();
    let frame = OverheadFrame::new(scene.origin, 0.5, 192).unwrap();
    let img = render_overhead(&scene, &frame).unwrap();
    for lm in &scene.landmarks {
        if let Ok((r, c)) = mvps_core::geo::geo_to_overhead_pixel(lm.location, &frame) {
            let color = LANDMARK_COLORS[lm.color_id % LANDMARK_COLORS.len()];
            assert_eq!(*img.get_pixel(c as u32, r as u32), color);
        }
    }
}

#[test]
fn panorama_wraps_horizontally() {
    let cfg = RunConfig::tiny();
    let scene = generate_scene(5, &cfg.world).unwrap();
    let frame = OverheadFrame::new(scene.origin, cfg.render.gsd, cfg.render.overhead_size).unwrap();
    let cam = sample_street_point(&scene, &frame, &mut indexed_substream(1, "cam", 0)).unwrap();
    let a = render_panorama(&scene, cam, &cfg.render).unwrap();
    // yawing by exactly one column shifts the image by one column
    let step = 360.0 / cfg.render.pano_width as f64;
    let b = render_panorama_yawed(&scene, cam, &cfg.render, step).unwrap();
    let w = cfg.render.pano_width as u32;
    let mut same = 0;
    for y in 0..a.height() {
        for x in 0..w {
            same += (a.get_pixel((x + 1) % w, y) == b.get_pixel(x, y)) as usize;
        }
    }
    let total = (a.height() * w) as usize;
    assert!(same as f64 >= 0.99 * total as f64, "{same}/{total}");
}

#[test]
fn presets_generate_for_many_seeds() {
    for cfg in [RunConfig::tiny(), RunConfig::default()] {
        for seed in 0..300u64 {
            generate_scene(seed, &cfg.world).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        }
    }
}
