//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use stylesplat::image::ImageBuffer;
use stylesplat::render::{project, ProjectedSplat};
use stylesplat::scene::{Camera, GaussianCloud};

/// Per-pixel evaluation of every projected splat with no tiling: sort by
/// (depth, index), evaluate each splat's 2D Gaussian at the pixel center and
/// fold the compositing sum left to right.
pub fn brute_force_render(cloud: &GaussianCloud, cam: &Camera) -> ImageBuffer {
    let mut splats: Vec<ProjectedSplat> = project(cloud, cam);
    splats.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then(a.index.cmp(&b.index))
    });
    let mut img = ImageBuffer::new(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut color = [0.0f64; 3];
            let mut transmittance = 1.0f64;
            for s in &splats {
                let d = [px - s.mean[0], py - s.mean[1]];
                // Mahalanobis distance through the explicit 2×2 inverse.
                let det = s.cov[0] * s.cov[2] - s.cov[1] * s.cov[1];
                let inv = [s.cov[2] / det, -s.cov[1] / det, s.cov[0] / det];
                let m2 = inv[0] * d[0] * d[0] + 2.0 * inv[1] * d[0] * d[1] + inv[2] * d[1] * d[1];
                if m2 > 9.0 {
                    continue;
                }
                let alpha = (s.opacity * (-0.5 * m2).exp()).min(0.99);
                if alpha < 1.0 / 255.0 {
                    continue;
                }
                for ch in 0..3 {
                    color[ch] += s.color[ch] * alpha * transmittance;
                }
                transmittance *= 1.0 - alpha;
                if transmittance < 1e-4 {
                    break;
                }
            }
            for ch in 0..3 {
                color[ch] += transmittance * cloud.background[ch];
            }
            img.set(x, y, color);
        }
    }
    img
}

/// Sequential left fold of the compositing equation over `(color, alpha)`.
pub fn fold_composite(list: &[([f64; 3], f64)], background: [f64; 3]) -> [f64; 3] {
    let (acc, t) = list.iter().fold(([0.0; 3], 1.0), |(acc, t), (c, a)| {
        ([acc[0] + c[0] * a * t, acc[1] + c[1] * a * t, acc[2] + c[2] * a * t], t * (1.0 - a))
    });
    [0, 1, 2].map(|ch| acc[ch] + t * background[ch])
}
