//! Condition assembly for one record.

use crate::config::{RenderConfig, ResizeFilter};
use crate::dataio::manifest::{PanoramaRef, SampleRecord};
use crate::error::Result;
use crate::geo::GeoLocation;
use crate::imageops::{load_gray, load_rgb, resize_rgb, tile_horizontal, ImageArray};
use crate::synthworld::colorize_segmentation;

/// Condition slots in branch order.
pub const SEG: usize = 0;
pub const SAT: usize = 1;
pub const PANO0: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    pub seg: ImageArray,
    pub satellite_tiled: ImageArray,
    pub panos: Vec<ImageArray>,
    /// One flag per slot: seg, satellite, then each panorama.
    pub drop_mask: Vec<bool>,
    pub prompt: String,
}

impl ConditionSet {
    pub fn slots(&self) -> usize {
        self.drop_mask.len()
    }

    /// Image for slot `i` (see [`SEG`], [`SAT`], [`PANO0`]).
    pub fn image(&self, i: usize) -> &ImageArray {
        match i {
            SEG => &self.seg,
            SAT => &self.satellite_tiled,
            k => &self.panos[k - PANO0],
        }
    }

    pub fn image_mut(&mut self, i: usize) -> &mut ImageArray {
        match i {
            SEG => &mut self.seg,
            SAT => &mut self.satellite_tiled,
            k => &mut self.panos[k - PANO0],
        }
    }

    /// Zeroes slot `i` and marks it dropped.
    pub fn drop_slot(&mut self, i: usize) {
        self.image_mut(i).data.iter_mut().for_each(|v| *v = 0.0);
        self.drop_mask[i] = true;
    }
}

/// Indices of the `k` panoramas nearest `target`; ties keep list order.
pub fn nearest_k(panoramas: &[(GeoLocation, f64)], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..panoramas.len()).collect();
    idx.sort_by(|&a, &b| panoramas[a].1.total_cmp(&panoramas[b].1));
    idx.truncate(k);
    idx
}

fn nearest_refs(record: &SampleRecord, k: usize) -> Vec<&PanoramaRef> {
    let keyed: Vec<(GeoLocation, f64)> = record.panoramas.iter().map(|p| (p.location, p.distance)).collect();
    nearest_k(&keyed, k).into_iter().map(|i| &record.panoramas[i]).collect()
}

/// Up to `n` nearest panoramas, ascending by distance.
pub fn select_attention_set(record: &SampleRecord, n: usize) -> Vec<&PanoramaRef> {
    nearest_refs(record, n)
}

/// Loads an RGB image resized to the panorama resolution.
pub fn load_pano_image(path: &std::path::Path, render: &RenderConfig, filter: ResizeFilter) -> Result<ImageArray> {
    let img = load_rgb(path)?;
    Ok(ImageArray::from_rgb(&resize_rgb(
        &img,
        render.pano_height as u32,
        render.pano_width as u32,
        filter,
    )))
}

/// Satellite image at overhead resolution.
pub fn load_satellite(record: &SampleRecord, render: &RenderConfig, filter: ResizeFilter) -> Result<ImageArray> {
    let img = load_rgb(&record.satellite_path)?;
    let s = render.overhead_size as u32;
    Ok(ImageArray::from_rgb(&resize_rgb(&img, s, s, filter)))
}

/// Builds the fixed-shape condition set: segmentation, tiled satellite and the
/// `k` nearest panoramas, padding absent ones with zeros and a drop flag.
pub fn select_conditions(
    record: &SampleRecord,
    k: usize,
    render: &RenderConfig,
    filter: ResizeFilter,
    prompt: &str,
) -> Result<ConditionSet> {
    let (h, w) = (render.pano_height, render.pano_width);
    let mut drop_mask = Vec::with_capacity(2 + k);

    let seg = match &record.seg_path {
        Some(p) => {
            let labels = load_gray(p)?;
            let rgb = colorize_segmentation(&labels);
            drop_mask.push(false);
            ImageArray::from_rgb(&resize_rgb(&rgb, h as u32, w as u32, ResizeFilter::Nearest))
        }
        None => {
            drop_mask.push(true);
            ImageArray::zeros(3, h, w)
        }
    };

    let sat = load_rgb(&record.satellite_path)?;
    let sat = resize_rgb(&sat, h as u32, h as u32, filter);
    let tiled = tile_horizontal(&sat, (w / h) as u32);
    drop_mask.push(false);

    let chosen = nearest_refs(record, k);
    let mut panos = Vec::with_capacity(k);
    for i in 0..k {
        match chosen.get(i) {
            Some(p) => {
                panos.push(load_pano_image(&p.path, render, filter)?);
                drop_mask.push(false);
            }
            None => {
                panos.push(ImageArray::zeros(3, h, w));
                drop_mask.push(true);
            }
        }
    }

    Ok(ConditionSet {
        seg,
        satellite_tiled: ImageArray::from_rgb(&tiled),
        panos,
        drop_mask,
        prompt: prompt.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_two_of_five() {
        let g = GeoLocation { lat: 0.0, lon: 0.0 };
        let list: Vec<_> = [30.0, 10.0, 50.0, 20.0, 40.0].iter().map(|&d| (g, d)).collect();
        assert_eq!(nearest_k(&list, 2), vec![1, 3]);
    }

    #[test]
    fn ties_keep_input_order() {
        let g = GeoLocation { lat: 0.0, lon: 0.0 };
        let list = vec![(g, 5.0), (g, 1.0), (g, 5.0), (g, 1.0)];
        assert_eq!(nearest_k(&list, 4), vec![1, 3, 0, 2]);
    }

    #[test]
    fn fewer_than_k_returns_all() {
        let g = GeoLocation { lat: 0.0, lon: 0.0 };
        assert_eq!(nearest_k(&[(g, 3.0)], 20), vec![0]);
        assert!(nearest_k(&[], 2).is_empty());
    }
}
