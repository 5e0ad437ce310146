use crate::scene::{quat_to_matrix, Camera, GaussianCloud, GaussianPoint, Mat3, Vec3};
use crate::sh;

use super::{FRUSTUM_CLAMP, LOW_PASS, NEAR_PLANE, SIGMA_CUTOFF};

/// A Gaussian after projection into one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSplat {
    /// Index of the source point in the cloud.
    pub index: usize,
    /// Pixel-space mean; pixel `(x, y)` has its center at `(x+0.5, y+0.5)`.
    pub mean: [f64; 2],
    /// Pixel-space covariance `(xx, xy, yy)` including the low-pass term.
    pub cov: [f64; 3],
    /// Inverse of `cov`, same layout.
    pub conic: [f64; 3],
    /// Camera-space z.
    pub depth: f64,
    /// View-dependent color from the SH coefficients.
    pub color: [f64; 3],
    /// Activated opacity.
    pub opacity: f64,
    /// Cutoff radius in pixels.
    pub radius: f64,
    /// Inclusive pixel bounds `[x0, y0, x1, y1]` whose centers may be hit.
    pub pixel_rect: [usize; 4],
}

/// Intermediate quantities of the projection of one point, shared with the
/// backward pass.
pub(crate) struct Projection {
    pub p_cam: Vec3,
    pub rot: Mat3,
    pub scale: [f64; 3],
    pub unit_q: [f64; 4],
    pub jac: [[f64; 3]; 2],
    /// View-ray slopes `x/z`, `y/z` as used in the Jacobian, clamped to
    /// the widened frustum; `None` where the clamp is active.
    pub free_slope: [Option<f64>; 2],
    /// Clamped slopes (equal to the raw slopes where not clamped).
    pub slope: [f64; 2],
    pub cov_cam: Mat3,
    pub cov2d: [f64; 3],
    pub view_dir: Vec3,
    pub view_dist: f64,
}

pub(crate) fn project_point(p: &GaussianPoint, cam: &Camera, w2c: &Mat3) -> Option<Projection> {
    let pos = Vec3::from(p.position);
    let p_cam = w2c * (pos - cam.translation);
    if !(p_cam.z > NEAR_PLANE) {
        return None;
    }
    let unit_q = p.unit_rotation();
    let rot = quat_to_matrix(unit_q);
    let scale = p.scale();
    let m = rot * Mat3::from_diagonal(&Vec3::from(scale));
    let cov = m * m.transpose();
    let cov_cam = w2c * cov * w2c.transpose();
    let z = p_cam.z;
    // The affine approximation degrades far outside the image; evaluate the
    // Jacobian no further out than a frustum widened by FRUSTUM_CLAMP.
    let lim = [
        FRUSTUM_CLAMP * 0.5 * cam.width as f64 / cam.fx,
        FRUSTUM_CLAMP * 0.5 * cam.height as f64 / cam.fy,
    ];
    let raw = [p_cam.x / z, p_cam.y / z];
    let slope = [raw[0].clamp(-lim[0], lim[0]), raw[1].clamp(-lim[1], lim[1])];
    let free_slope = [0, 1].map(|k| (raw[k].abs() <= lim[k]).then_some(raw[k]));
    let jac = [
        [cam.fx / z, 0.0, -cam.fx * slope[0] / z],
        [0.0, cam.fy / z, -cam.fy * slope[1] / z],
    ];
    // J Σc Jᵀ
    let mut jc = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            jc[r][c] = (0..3).map(|k| jac[r][k] * cov_cam[(k, c)]).sum();
        }
    }
    let entry = |r: usize, c: usize| -> f64 { (0..3).map(|k| jc[r][k] * jac[c][k]).sum() };
    let cov2d = [entry(0, 0) + LOW_PASS, entry(0, 1), entry(1, 1) + LOW_PASS];
    let to_point = pos - cam.translation;
    let view_dist = to_point.norm();
    Some(Projection {
        p_cam,
        rot,
        scale,
        unit_q,
        jac,
        free_slope,
        slope,
        cov_cam,
        cov2d,
        view_dir: to_point / view_dist,
        view_dist,
    })
}

/// Projects every point into `cam`, culling points behind the near plane or
/// whose cutoff footprint misses the image. Output is in point order.
pub fn project(cloud: &GaussianCloud, cam: &Camera) -> Vec<ProjectedSplat> {
    let w2c = cam.world_to_camera();
    let count = sh::coeff_count(cloud.sh_degree);
    let mut basis = [0.0; 16];
    cloud
        .points
        .iter()
        .enumerate()
        .filter_map(|(index, p)| {
            let proj = project_point(p, cam, &w2c)?;
            let [a, b, c] = proj.cov2d;
            let det = a * c - b * b;
            if !(det > 0.0) {
                return None;
            }
            let conic = [c / det, -b / det, a / det];
            let lambda_max = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
            let radius = SIGMA_CUTOFF * lambda_max.sqrt();
            let mean = [
                cam.fx * proj.p_cam.x / proj.p_cam.z + cam.cx,
                cam.fy * proj.p_cam.y / proj.p_cam.z + cam.cy,
            ];
            let pixel_rect = pixel_rect(mean, radius, cam.width, cam.height)?;
            sh::basis(cloud.sh_degree, proj.view_dir.into(), &mut basis);
            let color = sh::raw_color(&p.sh, &basis, count).map(|v| v.max(0.0));
            Some(ProjectedSplat {
                index,
                mean,
                cov: proj.cov2d,
                conic,
                depth: proj.p_cam.z,
                color,
                opacity: p.opacity(),
                radius,
                pixel_rect,
            })
        })
        .collect()
}

/// Pixels whose centers lie within `radius` of `mean` along each axis,
/// clipped to the image. `None` when no pixel qualifies.
fn pixel_rect(mean: [f64; 2], radius: f64, width: usize, height: usize) -> Option<[usize; 4]> {
    let lo_x = (mean[0] - radius - 0.5).ceil().max(0.0);
    let hi_x = (mean[0] + radius - 0.5).floor().min(width as f64 - 1.0);
    let lo_y = (mean[1] - radius - 0.5).ceil().max(0.0);
    let hi_y = (mean[1] + radius - 0.5).floor().min(height as f64 - 1.0);
    if !(lo_x <= hi_x && lo_y <= hi_y) {
        return None;
    }
    Some([lo_x as usize, lo_y as usize, hi_x as usize, hi_y as usize])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::GaussianPoint;

    fn axis_camera() -> Camera {
        Camera::new(100.0, 120.0, 32.0, 30.0, 64, 60, Mat3::identity(), Vec3::zeros()).unwrap()
    }

    fn one_point(pos: [f64; 3], scale: f64) -> GaussianCloud {
        let mut cloud = GaussianCloud::new(0);
        cloud.points.push(GaussianPoint::isotropic(pos, scale, 0.9, [1.0, 0.0, 0.0], 0));
        cloud
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let splats = project(&one_point([0.0, 0.0, 5.0], 0.1), &axis_camera());
        assert_eq!(splats.len(), 1);
        assert!((splats[0].mean[0] - 32.0).abs() < 1e-12);
        assert!((splats[0].mean[1] - 30.0).abs() < 1e-12);
        assert!((splats[0].depth - 5.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_covariance_on_axis() {
        let (sigma, d) = (0.1, 5.0);
        let splats = project(&one_point([0.0, 0.0, d], sigma), &axis_camera());
        let cov = splats[0].cov;
        assert!((cov[0] - LOW_PASS - (100.0 * sigma / d).powi(2)).abs() < 1e-9);
        assert!((cov[2] - LOW_PASS - (120.0 * sigma / d).powi(2)).abs() < 1e-9);
        assert!(cov[1].abs() < 1e-12);
    }

    #[test]
    fn near_plane_and_behind_are_culled() {
        let cam = axis_camera();
        assert!(project(&one_point([0.0, 0.0, NEAR_PLANE], 0.1), &cam).is_empty());
        assert!(project(&one_point([0.0, 0.0, -2.0], 0.1), &cam).is_empty());
    }

    #[test]
    fn far_outside_frustum_is_culled() {
        let cam = axis_camera();
        assert!(project(&one_point([50.0, 0.0, 5.0], 0.1), &cam).is_empty());
        // Center off-screen but footprint reaching in is kept.
        let s = project(&one_point([1.7, 0.0, 5.0], 0.2), &cam);
        assert_eq!(s.len(), 1);
        assert!(s[0].mean[0] > 64.0);
    }
}
