use rayon::prelude::*;

use crate::image::{DepthBuffer, ImageBuffer};
use crate::scene::{Camera, GaussianCloud};

use super::{pixel_hit, project, ProjectedSplat, DEPTH_MASK_ALPHA, MIN_TRANSMITTANCE, TILE_SIZE};

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: ImageBuffer,
    pub depth: DepthBuffer,
    /// Accumulated alpha `1 − T_final` per pixel.
    pub alpha: Vec<f64>,
}

/// Alpha-composites a front-to-back list of `(color, alpha)` pairs over
/// `background`, stopping once transmittance drops below the threshold.
pub fn composite_pixel(splats: &[([f64; 3], f64)], background: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    let mut t = 1.0;
    for &(color, alpha) in splats {
        let w = alpha * t;
        for ch in 0..3 {
            out[ch] += color[ch] * w;
        }
        t *= 1.0 - alpha;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    for ch in 0..3 {
        out[ch] += t * background[ch];
    }
    out
}

/// Projected splats in global depth order, plus per-tile lists of positions
/// into that order.
pub(crate) struct Binned {
    pub splats: Vec<ProjectedSplat>,
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: usize,
}

pub(crate) fn project_and_bin(cloud: &GaussianCloud, cam: &Camera) -> Binned {
    let mut splats = project(cloud, cam);
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    let tiles_x = cam.width.div_ceil(TILE_SIZE);
    let tiles_y = cam.height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (pos, s) in splats.iter().enumerate() {
        let [x0, y0, x1, y1] = s.pixel_rect;
        for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                tiles[ty * tiles_x + tx].push(pos as u32);
            }
        }
    }
    Binned {
        splats,
        tiles,
        tiles_x,
    }
}

pub(crate) fn tile_pixels(tile: usize, tiles_x: usize, cam: &Camera) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let tx = tile % tiles_x;
    let ty = tile / tiles_x;
    let xs = tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(cam.width);
    let ys = ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(cam.height);
    (xs, ys)
}

struct PixelResult {
    color: [f64; 3],
    depth_sum: f64,
    weight: f64,
}

fn shade_pixel(binned: &Binned, list: &[u32], px: f64, py: f64, background: [f64; 3]) -> PixelResult {
    let mut color = [0.0; 3];
    let mut depth_sum = 0.0;
    let mut t = 1.0;
    for &pos in list {
        let s = &binned.splats[pos as usize];
        let Some(hit) = pixel_hit(s, px, py) else {
            continue;
        };
        let w = hit.alpha * t;
        for ch in 0..3 {
            color[ch] += s.color[ch] * w;
        }
        depth_sum += s.depth * w;
        t *= 1.0 - hit.alpha;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    for ch in 0..3 {
        color[ch] += t * background[ch];
    }
    PixelResult {
        color,
        depth_sum,
        weight: 1.0 - t,
    }
}

/// Renders color, depth and coverage in one pass.
pub fn render_full(cloud: &GaussianCloud, cam: &Camera) -> RenderOutput {
    let binned = project_and_bin(cloud, cam);
    let tile_results: Vec<Vec<(usize, PixelResult)>> = (0..binned.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let (xs, ys) = tile_pixels(tile, binned.tiles_x, cam);
            let list = &binned.tiles[tile];
            let mut out = Vec::with_capacity(xs.len() * ys.len());
            for y in ys {
                for x in xs.clone() {
                    let r = shade_pixel(&binned, list, x as f64 + 0.5, y as f64 + 0.5, cloud.background);
                    out.push((y * cam.width + x, r));
                }
            }
            out
        })
        .collect();

    let mut image = ImageBuffer::new(cam.width, cam.height);
    let mut depth = DepthBuffer::new(cam.width, cam.height);
    let mut alpha = vec![0.0; cam.width * cam.height];
    for (i, r) in tile_results.into_iter().flatten() {
        image.data[3 * i..3 * i + 3].copy_from_slice(&r.color);
        alpha[i] = r.weight;
        if r.weight >= DEPTH_MASK_ALPHA {
            depth.depth[i] = (r.depth_sum / r.weight) as f32;
            depth.valid[i] = true;
        }
    }
    RenderOutput { image, depth, alpha }
}

pub fn render(cloud: &GaussianCloud, cam: &Camera) -> ImageBuffer {
    render_full(cloud, cam).image
}

/// Alpha-weighted expected depth, normalized by accumulated alpha.
pub fn render_depth(cloud: &GaussianCloud, cam: &Camera) -> DepthBuffer {
    render_full(cloud, cam).depth
}
