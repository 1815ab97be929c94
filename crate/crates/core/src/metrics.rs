//! Image-quality metrics on 8-bit RGB images, plus the wrap-seam probe.

use image::RgbImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::substream;

/// Value reported for identical images by the log-scale metrics.
pub const DB_CAP: f64 = 99.0;
pub const FID_EPS: f64 = 1e-6;
const PEAK: f64 = 255.0;

fn check_same(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::Shape(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    if a.width() == 0 || a.height() == 0 {
        return Err(Error::EmptyInput("zero-sized image".into()));
    }
    Ok(())
}

pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same(a, b)?;
    let s: f64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.as_raw().len() as f64)
}

fn db(err: f64) -> f64 {
    if err == 0.0 {
        DB_CAP
    } else {
        (10.0 * (PEAK * PEAK / err).log10()).min(DB_CAP)
    }
}

pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(db(mse(a, b)?))
}

pub fn rmse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

/// Whether a dB value hit the cap.
pub fn is_capped(v: f64) -> bool {
    v >= DB_CAP
}

fn plane(img: &RgbImage, c: usize) -> Vec<f64> {
    img.as_raw().iter().skip(c).step_by(3).map(|&v| v as f64).collect()
}

fn gaussian_window() -> [f64; 11] {
    let mut w = [0.0; 11];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering with the 11-tap Gaussian.
fn blur(x: &[f64], h: usize, w: usize, win: &[f64; 11]) -> Vec<f64> {
    let (ow, oh) = (w - 10, h - 10);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..11).map(|k| win[k] * x[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..11).map(|k| win[k] * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM, 11x11 Gaussian window (sigma 1.5) over valid positions,
/// averaged over channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same(a, b)?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < 11 || h < 11 {
        return Err(Error::InvalidSize {
            what: "ssim input side (needs >= 11)",
            value: w.min(h),
        });
    }
    if a == b {
        return Ok(1.0);
    }
    let c1 = (0.01 * PEAK).powi(2);
    let c2 = (0.03 * PEAK).powi(2);
    let win = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let x = plane(a, c);
        let y = plane(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur(&x, h, w, &win), blur(&y, h, w, &win));
        let (sxx, syy, sxy) = (blur(&xx, h, w, &win), blur(&yy, h, w, &win), blur(&xy, h, w, &win));
        let n = mx.len();
        let mut s = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            s += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += s / n as f64;
    }
    Ok((total / 3.0).clamp(-1.0, 1.0))
}

/// Gradient-difference sharpness in dB over the `(H-1) x (W-1)` region where
/// both forward differences exist.
pub fn sharpness_difference(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same(a, b)?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < 2 || h < 2 {
        return Err(Error::InvalidSize {
            what: "sharpness input side (needs >= 2)",
            value: w.min(h),
        });
    }
    let (pa, pb) = (a.as_raw(), b.as_raw());
    let at = |p: &[u8], r: usize, c: usize, k: usize| p[(r * w + c) * 3 + k] as f64;
    let mut sum = 0.0;
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            for k in 0..3 {
                let gxa = at(pa, r, c + 1, k) - at(pa, r, c, k);
                let gxb = at(pb, r, c + 1, k) - at(pb, r, c, k);
                let gya = at(pa, r + 1, c, k) - at(pa, r, c, k);
                let gyb = at(pb, r + 1, c, k) - at(pb, r, c, k);
                sum += (gxa - gxb).abs() + (gya - gyb).abs();
            }
        }
    }
    Ok(db(sum / ((h - 1) * (w - 1) * 3) as f64))
}

/// Ratio of the mean wrap difference (last vs first column) to the mean
/// difference over all adjacent interior column pairs. 0/0 is 1.
pub fn seam_discontinuity(pano: &RgbImage) -> f64 {
    let (w, h) = (pano.width() as usize, pano.height() as usize);
    if w < 2 || h == 0 {
        return 1.0;
    }
    let p = pano.as_raw();
    let col_diff = |c0: usize, c1: usize| -> f64 {
        let mut s = 0.0;
        for r in 0..h {
            for k in 0..3 {
                s += (p[(r * w + c0) * 3 + k] as f64 - p[(r * w + c1) * 3 + k] as f64).abs();
            }
        }
        s / (3 * h) as f64
    };
    let seam = col_diff(w - 1, 0);
    let interior = (0..w - 1).map(|c| col_diff(c, c + 1)).sum::<f64>() / (w - 1) as f64;
    match (seam == 0.0, interior == 0.0) {
        (true, true) => 1.0,
        (false, true) => f64::INFINITY,
        _ => seam / interior,
    }
}

/// Frechet distance between Gaussians given their moments. Both covariances
/// receive `FID_EPS * I`.
pub fn fid_from_moments(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::Shape("fid moment dimensions disagree".into()));
    }
    let eye = DMatrix::<f64>::identity(d, d) * FID_EPS;
    let a = s1 + &eye;
    let b = s2 + &eye;
    let ra = psd_sqrt(&a);
    let m = &ra * &b * &ra;
    let cross = psd_sqrt(&((&m + m.transpose()) * 0.5)).trace();
    let diff = mu1 - mu2;
    Ok((diff.dot(&diff) + a.trace() + b.trace() - 2.0 * cross).max(0.0))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// Sample mean and unbiased covariance of row features.
pub fn feature_moments(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::EmptyInput(format!("fid needs at least 2 feature vectors, got {n}")));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors must share a nonzero length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mu, cov))
}

pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = feature_moments(a)?;
    let (m2, s2) = feature_moments(b)?;
    fid_from_moments(&m1, &s1, &m2, &s2)
}

/// Channels-first feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Source of multi-layer features for the perceptual metrics.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn features(&self, img: &RgbImage) -> Result<Vec<FeatureMap>>;

    /// Spatially averaged features of all layers, concatenated.
    fn pooled(&self, img: &RgbImage) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for f in self.features(img)? {
            let n = (f.height * f.width) as f64;
            for c in 0..f.channels {
                let s = &f.data[c * f.height * f.width..(c + 1) * f.height * f.width];
                out.push(s.iter().sum::<f64>() / n);
            }
        }
        Ok(out)
    }
}

/// Small fixed random CNN: 3x3 convolutions with stride 2 and ReLU.
#[derive(Debug, Clone)]
pub struct ToyExtractor {
    layers: Vec<(usize, usize, Vec<f64>, Vec<f64>)>,
}

impl ToyExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = substream(seed, "metrics/toy_extractor");
        let dims = [(3, 8), (8, 16), (16, 16)];
        let layers = dims
            .iter()
            .map(|&(cin, cout)| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let w = (0..cout * cin * 9)
                    .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect::<Vec<f64>>();
                let b = (0..cout).map(|_| rng.random_range(-0.05..0.05)).collect();
                (cin, cout, w, b)
            })
            .collect();
        ToyExtractor { layers }
    }
}

impl Default for ToyExtractor {
    fn default() -> Self {
        Self::new(0)
    }
}

impl FeatureExtractor for ToyExtractor {
    fn name(&self) -> &str {
        "toy-cnn"
    }

    fn features(&self, img: &RgbImage) -> Result<Vec<FeatureMap>> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut cur = FeatureMap {
            channels: 3,
            height: h,
            width: w,
            data: (0..3)
                .flat_map(|c| plane(img, c).into_iter().map(|v| v / 127.5 - 1.0))
                .collect(),
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (cin, cout, wt, bias) in &self.layers {
            let (ih, iw) = (cur.height, cur.width);
            let (oh, ow) = (ih.div_ceil(2), iw.div_ceil(2));
            let mut data = vec![0.0; cout * oh * ow];
            for o in 0..*cout {
                for r in 0..oh {
                    for c in 0..ow {
                        let mut s = bias[o];
                        for i in 0..*cin {
                            for ky in 0..3 {
                                let y = (2 * r + ky) as isize - 1;
                                if y < 0 || y >= ih as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let x = (2 * c + kx) as isize - 1;
                                    if x < 0 || x >= iw as isize {
                                        continue;
                                    }
                                    s += wt[((o * cin + i) * 3 + ky) * 3 + kx]
                                        * cur.data[(i * ih + y as usize) * iw + x as usize];
                                }
                            }
                        }
                        data[(o * oh + r) * ow + c] = s.max(0.0);
                    }
                }
            }
            cur = FeatureMap {
                channels: *cout,
                height: oh,
                width: ow,
                data,
            };
            out.push(cur.clone());
        }
        Ok(out)
    }
}

fn unit_normalize(f: &FeatureMap) -> Vec<f64> {
    let hw = f.height * f.width;
    let mut out = f.data.clone();
    for p in 0..hw {
        let n = (0..f.channels).map(|c| f.data[c * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
        for c in 0..f.channels {
            out[c * hw + p] /= n;
        }
    }
    out
}

/// Perceptual distance: per layer, channel-normalized feature differences
/// squared, summed over channels, averaged spatially; summed over layers.
pub fn lpips(a: &RgbImage, b: &RgbImage, extractor: Option<&dyn FeatureExtractor>) -> Result<f64> {
    let ex = extractor.ok_or_else(|| {
        Error::MissingExtractor("lpips needs a feature extractor; pass ToyExtractor or an external plug-in".into())
    })?;
    check_same(a, b)?;
    if a == b {
        return Ok(0.0);
    }
    let (fa, fb) = (ex.features(a)?, ex.features(b)?);
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let hw = (x.height * x.width) as f64;
        let (nx, ny) = (unit_normalize(x), unit_normalize(y));
        total += nx.iter().zip(&ny).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / hw;
    }
    Ok(total)
}

/// One evaluated image pair.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub psnr_capped: bool,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub rmse: f64,
    pub sd: f64,
    pub sd_capped: bool,
    pub seam: Option<f64>,
}

impl MetricReport {
    pub fn compute(pred: &RgbImage, truth: &RgbImage, extractor: Option<&dyn FeatureExtractor>) -> Result<Self> {
        let psnr = psnr(pred, truth)?;
        let sd = sharpness_difference(pred, truth)?;
        Ok(MetricReport {
            psnr,
            psnr_capped: is_capped(psnr),
            ssim: ssim(pred, truth)?,
            lpips: extractor.map(|e| lpips(pred, truth, Some(e))).transpose()?,
            rmse: rmse(pred, truth)?,
            sd,
            sd_capped: is_capped(sd),
            seam: Some(seam_discontinuity(pred)),
        })
    }
}

/// Column order of the per-image report.
pub const REPORT_COLUMNS: [&str; 6] = ["psnr", "ssim", "lpips", "rmse", "fid", "sd"];
