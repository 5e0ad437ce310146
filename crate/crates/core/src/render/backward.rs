use rayon::prelude::*;

use crate::image::ImageBuffer;
use crate::scene::{quat_matrix_vjp, quat_normalize_vjp, sigmoid, Camera, GaussianCloud, Mat3, ParamGroup, Vec3};
use crate::sh;

use super::project::project_point;
use super::raster::{project_and_bin, tile_pixels, Binned};
use super::{pixel_hit, MIN_TRANSMITTANCE};

/// Which parameters the backward pass differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardScope {
    /// All five parameter classes.
    All,
    /// SH coefficients only; the geometric chain is skipped.
    Appearance,
}

/// Per-point parameter gradients, aligned with the cloud's point indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub position: Vec<[f64; 3]>,
    pub log_scale: Vec<[f64; 3]>,
    pub rotation: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    /// `point_count × sh_len`, same layout as the cloud.
    pub sh: Vec<f64>,
    pub sh_len: usize,
}

impl RenderGradients {
    pub fn zeros(points: usize, sh_len: usize) -> Self {
        Self {
            position: vec![[0.0; 3]; points],
            log_scale: vec![[0.0; 3]; points],
            rotation: vec![[0.0; 4]; points],
            opacity_logit: vec![0.0; points],
            sh: vec![0.0; points * sh_len],
            sh_len,
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logit.is_empty()
    }

    /// Gradient of one parameter group, flattened point-major like
    /// [`crate::scene::ParameterView::gather`] with a single group.
    pub fn group(&self, g: ParamGroup) -> Vec<f64> {
        match g {
            ParamGroup::Position => self.position.iter().flatten().copied().collect(),
            ParamGroup::Scale => self.log_scale.iter().flatten().copied().collect(),
            ParamGroup::Rotation => self.rotation.iter().flatten().copied().collect(),
            ParamGroup::Opacity => self.opacity_logit.clone(),
            ParamGroup::Sh => self.sh.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().flatten().all(|v| v.is_finite())
            && self.log_scale.iter().flatten().all(|v| v.is_finite())
            && self.rotation.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logit.iter().all(|v| v.is_finite())
            && self.sh.iter().all(|v| v.is_finite())
    }
}

/// Gradient with respect to the 2D quantities of one projected splat.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    /// d/d(conic a, conic b, conic c) where the pixel exponent is
    /// `-½(a dx² + c dy²) − b dx dy`.
    conic: [f64; 3],
    color: [f64; 3],
    opacity: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for i in 0..2 {
            self.mean[i] += o.mean[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity += o.opacity;
    }
}

struct Contribution {
    slot: usize,
    alpha: f64,
    gauss: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
    t_before: f64,
}

fn tile_backward(
    binned: &Binned,
    tile: usize,
    cam: &Camera,
    grad: &ImageBuffer,
    background: [f64; 3],
    scope: BackwardScope,
) -> Vec<SplatGrad> {
    let list = &binned.tiles[tile];
    let mut acc = vec![SplatGrad::default(); list.len()];
    if list.is_empty() {
        return acc;
    }
    let (xs, ys) = tile_pixels(tile, binned.tiles_x, cam);
    let mut contribs: Vec<Contribution> = Vec::with_capacity(list.len());
    for y in ys {
        for x in xs.clone() {
            let i = 3 * (y * cam.width + x);
            let dc = [grad.data[i], grad.data[i + 1], grad.data[i + 2]];
            if dc == [0.0; 3] {
                continue;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            contribs.clear();
            let mut t = 1.0;
            for (slot, &pos) in list.iter().enumerate() {
                let s = &binned.splats[pos as usize];
                let Some(hit) = pixel_hit(s, px, py) else {
                    continue;
                };
                contribs.push(Contribution {
                    slot,
                    alpha: hit.alpha,
                    gauss: hit.gauss,
                    dx: hit.dx,
                    dy: hit.dy,
                    clamped: hit.clamped,
                    t_before: t,
                });
                t *= 1.0 - hit.alpha;
                if t < MIN_TRANSMITTANCE {
                    break;
                }
            }
            // Color behind splat i, already attenuated by everything up to
            // and including i: Σ_{j>i} c_j α_j T_j + T_final · background.
            let mut behind = background.map(|b| b * t);
            for c in contribs.iter().rev() {
                let s = &binned.splats[list[c.slot] as usize];
                let g = &mut acc[c.slot];
                let w = c.alpha * c.t_before;
                for ch in 0..3 {
                    g.color[ch] += dc[ch] * w;
                }
                if scope == BackwardScope::All {
                    let mut d_alpha = 0.0;
                    for ch in 0..3 {
                        d_alpha += dc[ch] * (s.color[ch] * c.t_before - behind[ch] / (1.0 - c.alpha));
                    }
                    if !c.clamped {
                        g.opacity += d_alpha * c.gauss;
                        let d_power = d_alpha * s.opacity * c.gauss;
                        let [a, b, cc] = s.conic;
                        g.conic[0] += -0.5 * c.dx * c.dx * d_power;
                        g.conic[1] += -c.dx * c.dy * d_power;
                        g.conic[2] += -0.5 * c.dy * c.dy * d_power;
                        g.mean[0] += d_power * (a * c.dx + b * c.dy);
                        g.mean[1] += d_power * (b * c.dx + cc * c.dy);
                    }
                }
                for ch in 0..3 {
                    behind[ch] += s.color[ch] * w;
                }
            }
        }
    }
    acc
}

/// Backpropagates an image-space gradient `dL/dImage` to every parameter of
/// every point. Points culled in the forward pass get zero gradients.
///
/// Tiles are processed in parallel; their partial sums are merged in tile
/// order, so the result does not depend on the thread count.
pub fn render_backward(cloud: &GaussianCloud, cam: &Camera, d_image: &ImageBuffer, scope: BackwardScope) -> RenderGradients {
    assert_eq!(
        (d_image.width, d_image.height),
        (cam.width, cam.height),
        "gradient image must match the camera resolution"
    );
    let sh_len = cloud.sh_len();
    let mut out = RenderGradients::zeros(cloud.len(), sh_len);
    let binned = project_and_bin(cloud, cam);
    let per_tile: Vec<Vec<SplatGrad>> = (0..binned.tiles.len())
        .into_par_iter()
        .map(|tile| tile_backward(&binned, tile, cam, d_image, cloud.background, scope))
        .collect();
    let mut splat_grads = vec![SplatGrad::default(); binned.splats.len()];
    for (tile, grads) in per_tile.iter().enumerate() {
        for (slot, g) in grads.iter().enumerate() {
            splat_grads[binned.tiles[tile][slot] as usize].add(g);
        }
    }

    let w2c = cam.world_to_camera();
    let degree = cloud.sh_degree;
    let count = sh::coeff_count(degree);
    let mut basis = [0.0; 16];
    let mut basis_grad = [[0.0; 3]; 16];
    for (s, g) in binned.splats.iter().zip(&splat_grads) {
        let point = &cloud.points[s.index];
        let proj = project_point(point, cam, &w2c).expect("visible splat must project");

        // SH color, clamped at zero.
        let dir: [f64; 3] = proj.view_dir.into();
        sh::basis(degree, dir, &mut basis);
        let raw = sh::raw_color(&point.sh, &basis, count);
        let d_raw: [f64; 3] = std::array::from_fn(|ch| if raw[ch] > 0.0 { g.color[ch] } else { 0.0 });
        let sh_out = &mut out.sh[s.index * sh_len..(s.index + 1) * sh_len];
        for k in 0..count {
            for ch in 0..3 {
                sh_out[k * 3 + ch] = d_raw[ch] * basis[k];
            }
        }
        if scope == BackwardScope::Appearance {
            continue;
        }

        let mut d_pos = Vec3::zeros();
        if degree > 0 {
            sh::basis_grad(degree, dir, &mut basis_grad);
            let mut d_dir = Vec3::zeros();
            for k in 1..count {
                let w: f64 = (0..3).map(|ch| d_raw[ch] * point.sh[k * 3 + ch]).sum();
                for a in 0..3 {
                    d_dir[a] += w * basis_grad[k][a];
                }
            }
            let n = proj.view_dir;
            d_pos += (d_dir - n * n.dot(&d_dir)) / proj.view_dist;
        }

        out.opacity_logit[s.index] = g.opacity * sigmoid(point.opacity_logit) * (1.0 - sigmoid(point.opacity_logit));

        // Conic K = Σ₂⁻¹; as a symmetric matrix the off-diagonal entry b
        // appears twice, so each copy receives half of its gradient.
        let [ka, kb, kc] = s.conic;
        let k = nalgebra::Matrix2::new(ka, kb, kb, kc);
        let g_k = nalgebra::Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
        let g_cov2 = -(k * g_k * k);

        let jac = nalgebra::Matrix2x3::new(
            proj.jac[0][0], proj.jac[0][1], proj.jac[0][2],
            proj.jac[1][0], proj.jac[1][1], proj.jac[1][2],
        );
        let g_cov_cam: Mat3 = jac.transpose() * g_cov2 * jac;
        let g_jac = 2.0 * g_cov2 * jac * proj.cov_cam;
        let g_cov = w2c.transpose() * g_cov_cam * w2c;

        let sdiag = Mat3::from_diagonal(&Vec3::from(proj.scale));
        let m = proj.rot * sdiag;
        let g_m = 2.0 * g_cov * m;
        for j in 0..3 {
            let d_s: f64 = (0..3).map(|i| g_m[(i, j)] * proj.rot[(i, j)]).sum();
            out.log_scale[s.index][j] = d_s * proj.scale[j];
        }
        let g_rot = g_m * sdiag;
        let d_unit_q = quat_matrix_vjp(proj.unit_q, &g_rot);
        out.rotation[s.index] = quat_normalize_vjp(point.rotation, d_unit_q);

        // Mean and Jacobian depend on the camera-space position.
        let (x, y, z) = (proj.p_cam.x, proj.p_cam.y, proj.p_cam.z);
        let (fx, fy) = (cam.fx, cam.fy);
        let z2 = z * z;
        // J02 = −fx·sx/z with sx = x/z, or a constant slope where clamped.
        let jac_slope = |k: usize, f: f64, g02: f64| -> (f64, f64) {
            match proj.free_slope[k] {
                Some(_) => (-g02 * f / z2, g02 * 2.0 * f * proj.slope[k] / z2),
                None => (0.0, g02 * f * proj.slope[k] / z2),
            }
        };
        let (jx_x, jx_z) = jac_slope(0, fx, g_jac[(0, 2)]);
        let (jy_y, jy_z) = jac_slope(1, fy, g_jac[(1, 2)]);
        let d_cam = Vec3::new(
            g.mean[0] * fx / z + jx_x,
            g.mean[1] * fy / z + jy_y,
            -g.mean[0] * fx * x / z2 - g.mean[1] * fy * y / z2 - g_jac[(0, 0)] * fx / z2 - g_jac[(1, 1)] * fy / z2
                + jx_z
                + jy_z,
        );
        d_pos += w2c.transpose() * d_cam;
        out.position[s.index] = d_pos.into();
    }
    out
}
