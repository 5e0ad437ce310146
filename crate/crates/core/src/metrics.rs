//! Image quality metrics and a feature-space distance between image sets.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::nets::FeatureExtractor;

/// `10·log10(1/MSE)` with unit peak; identical images give `+∞`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_same_size(b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len().max(1) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] = std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Separable "valid" filtering of a single-channel plane.
fn filter_valid(plane: &[f64], width: usize, height: usize, w: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (width + 1 - SSIM_WINDOW, height + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| w[k] * plane[y * width + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| w[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// valid window positions and then over channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_same_size(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let w = gaussian_window();
    let (width, height) = (a.width, a.height);
    let mut total = 0.0;
    for ch in 0..3 {
        let pa: Vec<f64> = a.data.iter().skip(ch).step_by(3).copied().collect();
        let pb: Vec<f64> = b.data.iter().skip(ch).step_by(3).copied().collect();
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { pa.iter().zip(&pb).map(|(&x, &y)| f(x, y)).collect() };
        let (mu_a, _, _) = filter_valid(&pa, width, height, &w);
        let (mu_b, _, _) = filter_valid(&pb, width, height, &w);
        let (aa, _, _) = filter_valid(&prod(&|x, _| x * x), width, height, &w);
        let (bb, _, _) = filter_valid(&prod(&|_, y| y * y), width, height, &w);
        let (ab, ow, oh) = filter_valid(&prod(&|x, y| x * y), width, height, &w);
        let mut sum = 0.0;
        for i in 0..ow * oh {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += sum / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}

/// Deepest extractor stage averaged over spatial positions.
pub fn pooled_features(extractor: &FeatureExtractor, img: &ImageBuffer) -> Result<Vec<f64>> {
    let pyr = extractor.forward(img)?;
    let deep = pyr.deepest();
    let p = deep.plane() as f64;
    Ok(deep.data.chunks_exact(deep.plane()).map(|c| c.iter().sum::<f64>() / p).collect())
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

fn mean_kernel(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += poly_kernel(x, y);
        }
    }
    s / (a.len() * b.len()) as f64
}

/// Biased squared MMD between two sets of pooled features with the cubic
/// polynomial kernel `(x·y/d + 1)³`.
pub fn mmd_squared(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("feature distance needs two nonempty sets".into()));
    }
    Ok((mean_kernel(a, a) + mean_kernel(b, b) - 2.0 * mean_kernel(a, b)).max(0.0))
}

/// Feature-space distance between two image sets (a stand-in for
/// Inception-based set distances).
pub fn feature_distance(extractor: &FeatureExtractor, a: &[ImageBuffer], b: &[ImageBuffer]) -> Result<f64> {
    let fa = a.iter().map(|img| pooled_features(extractor, img)).collect::<Result<Vec<_>>>()?;
    let fb = b.iter().map(|img| pooled_features(extractor, img)).collect::<Result<Vec<_>>>()?;
    mmd_squared(&fa, &fb)
}

fn finite_or_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub name: String,
    /// `null` in JSON when infinite (identical images).
    #[serde(serialize_with = "finite_or_null")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    #[serde(serialize_with = "finite_or_null")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations_per_second: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub render_fps: Option<f64>,
}

impl MetricReport {
    /// Pairwise PSNR/SSIM of `(name, produced, reference)` triples.
    pub fn compare(pairs: &[(String, &ImageBuffer, &ImageBuffer)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidInput("no image pairs to compare".into()));
        }
        let images = pairs
            .iter()
            .map(|(name, a, b)| {
                Ok(ImageMetrics {
                    name: name.clone(),
                    psnr: psnr(a, b)?,
                    ssim: ssim(a, b)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = images.len() as f64;
        Ok(Self {
            mean_psnr: images.iter().map(|m| m.psnr).sum::<f64>() / n,
            mean_ssim: images.iter().map(|m| m.ssim).sum::<f64>() / n,
            images,
            feature_distance: None,
            iterations_per_second: None,
            render_fps: None,
        })
    }

    pub fn table(&self) -> String {
        let fmt = |v: f64| if v.is_finite() { format!("{v:8.3}") } else { "     inf".to_string() };
        let mut out = format!("{:<24} {:>8} {:>8}\n", "image", "PSNR", "SSIM");
        for m in &self.images {
            out += &format!("{:<24} {} {:8.4}\n", m.name, fmt(m.psnr), m.ssim);
        }
        out += &format!("{:<24} {} {:8.4}\n", "mean", fmt(self.mean_psnr), self.mean_ssim);
        if let Some(d) = self.feature_distance {
            out += &format!("feature distance {d:.6}\n");
        }
        if let Some(v) = self.iterations_per_second {
            out += &format!("iterations/s {v:.2}\n");
        }
        if let Some(v) = self.render_fps {
            out += &format!("render fps {v:.2}\n");
        }
        out
    }
}
