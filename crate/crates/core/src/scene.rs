//! Gaussian point cloud data model, the structure/appearance parameter
//! partition, and the closed-form geometry kernels.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::sh;

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// One anisotropic Gaussian. Scale and opacity are stored in unconstrained
/// form (log and logit); rotation is a quaternion `(w, x, y, z)` that is
/// renormalized whenever it is used.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPoint {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    /// `3·(L+1)²` coefficients, see [`crate::sh`] for the layout.
    pub sh: Vec<f64>,
}

impl GaussianPoint {
    /// An isotropic Gaussian with a flat (view-independent) color.
    pub fn isotropic(position: [f64; 3], scale: f64, opacity: f64, rgb: [f64; 3], sh_degree: usize) -> Self {
        let mut sh = vec![0.0; 3 * sh::coeff_count(sh_degree)];
        for ch in 0..3 {
            sh[ch] = sh::rgb_to_dc(rgb[ch]);
        }
        Self {
            position,
            log_scale: [scale.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity),
            sh,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(f64::exp)
    }

    pub fn unit_rotation(&self) -> [f64; 4] {
        normalize_quat(self.rotation)
    }

    fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().all(|v| v.is_finite())
    }
}

/// The optimizable scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub points: Vec<GaussianPoint>,
    pub sh_degree: usize,
    pub background: [f64; 3],
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Self {
        Self {
            points: Vec::new(),
            sh_degree,
            background: [0.0; 3],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn sh_len(&self) -> usize {
        3 * sh::coeff_count(self.sh_degree)
    }

    /// Checks every per-point invariant.
    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > sh::MAX_DEGREE {
            return Err(Error::InvalidInput(format!(
                "SH degree {} out of range 0..={}",
                self.sh_degree,
                sh::MAX_DEGREE
            )));
        }
        let expected = self.sh_len();
        for (i, p) in self.points.iter().enumerate() {
            if p.sh.len() != expected {
                return Err(Error::Shape(format!(
                    "point {i} has {} SH coefficients, degree {} needs {expected}",
                    p.sh.len(),
                    self.sh_degree
                )));
            }
            if !p.is_finite() {
                return Err(Error::Numeric(format!("point {i} has non-finite parameters")));
            }
            if p.rotation.iter().map(|v| v * v).sum::<f64>() == 0.0 {
                return Err(Error::InvalidInput(format!("point {i} has a zero quaternion")));
            }
        }
        Ok(())
    }

    /// Changes the SH degree, keeping existing low-order coefficients.
    pub fn with_sh_degree(mut self, degree: usize) -> Self {
        let len = 3 * sh::coeff_count(degree);
        for p in &mut self.points {
            p.sh.resize(len, 0.0);
        }
        self.sh_degree = degree;
        self
    }

    /// Axis-aligned bounds of the point centers.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = self.points.first()?.position;
        Some(self.points.iter().fold((first, first), |(mut lo, mut hi), p| {
            for a in 0..3 {
                lo[a] = lo[a].min(p.position[a]);
                hi[a] = hi[a].max(p.position[a]);
            }
            (lo, hi)
        }))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back to the unit quaternion.
pub(crate) fn quat_matrix_vjp(q: [f64; 4], g: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = q;
    let g = |r: usize, c: usize| g[(r, c)];
    [
        2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1)),
        2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2)),
        2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2)),
        2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1)),
    ]
}

/// Pulls a gradient on a normalized quaternion back to the raw quaternion.
pub(crate) fn quat_normalize_vjp(raw: [f64; 4], g: [f64; 4]) -> [f64; 4] {
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q = raw.map(|v| v / n);
    let dot: f64 = q.iter().zip(&g).map(|(a, b)| a * b).sum();
    [0, 1, 2, 3].map(|i| (g[i] - q[i] * dot) / n)
}

/// `Σ = R·S·Sᵀ·Rᵀ` with `S = diag(scale)` and `R` the rotation of `rotation`
/// (renormalized first).
pub fn build_covariance(scale: [f64; 3], rotation: [f64; 4]) -> Result<Mat3> {
    if !scale.iter().chain(rotation.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite scale or rotation".into()));
    }
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidInput(format!("scale must be positive, got {scale:?}")));
    }
    if rotation.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidInput("zero quaternion".into()));
    }
    let r = quat_to_matrix(normalize_quat(rotation));
    let m = r * Mat3::from_diagonal(&Vec3::from(scale));
    Ok(m * m.transpose())
}

/// Unnormalized Gaussian falloff `exp(-½ xᵀ Σ⁻¹ x)`.
pub fn gaussian_density(cov: &Mat3, offset: [f64; 3]) -> Result<f64> {
    let det = cov.determinant();
    let scale = cov.norm().powi(3);
    if !det.is_finite() || det.abs() <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Singular(format!("covariance determinant {det:e}")));
    }
    let inv = cov
        .try_inverse()
        .ok_or_else(|| Error::Singular("covariance not invertible".into()))?;
    let x = Vec3::from(offset);
    Ok((-0.5 * x.dot(&(inv * x))).exp())
}

/// Pinhole camera with a camera-to-world rigid pose. Camera axes: +x right,
/// +y down, +z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera-to-world rotation; columns are the camera axes in world frame.
    pub rotation: Mat3,
    /// Camera center in world coordinates.
    pub translation: Vec3,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, rotation: Mat3, translation: Vec3) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the world direction that
    /// should appear upward in the image.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], fov_x_deg: f64, width: usize, height: usize) -> Result<Self> {
        let eye = Vec3::from(eye);
        let forward = (Vec3::from(target) - eye).normalize();
        let right = forward.cross(&Vec3::from(up));
        if right.norm() < 1e-9 {
            return Err(Error::InvalidInput("look_at: up vector parallel to view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self::new(fx, fx, 0.5 * width as f64, 0.5 * height as f64, width, height, rotation, eye)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("camera has zero image size".into()));
        }
        check_rotation(&self.rotation, 1e-6).map_err(Error::InvalidInput)
    }

    /// World-to-camera rotation `W = Rᵀ`.
    pub fn world_to_camera(&self) -> Mat3 {
        self.rotation.transpose()
    }

    pub fn to_camera_space(&self, p: &Vec3) -> Vec3 {
        self.world_to_camera() * (p - self.translation)
    }

    /// Same pose, different resolution (intrinsics scaled proportionally).
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }

    /// Row-major 4×4 camera-to-world matrix.
    pub fn to_matrix(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
            0.0, 0.0, 0.0, 1.0,
        ]
    }
}

/// Checks that `r` is orthonormal with determinant +1.
pub fn check_rotation(r: &Mat3, tol: f64) -> std::result::Result<(), String> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err("rotation has non-finite entries".into());
    }
    let err = (r.transpose() * r - Mat3::identity()).abs().max();
    if err > tol {
        return Err(format!("rotation not orthonormal (max |RᵀR−I| = {err:e})"));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > tol.max(1e-9) * 10.0 {
        return Err(format!("rotation determinant is {det:.6}, expected +1"));
    }
    Ok(())
}

/// Parameter classes of a Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Position,
    Scale,
    Rotation,
    Opacity,
    Sh,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Position,
        ParamGroup::Scale,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
        ParamGroup::Sh,
    ];
    pub const STRUCTURE: [ParamGroup; 4] = [
        ParamGroup::Position,
        ParamGroup::Scale,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
    ];
    pub const APPEARANCE: [ParamGroup; 1] = [ParamGroup::Sh];

    pub fn is_structure(self) -> bool {
        !matches!(self, ParamGroup::Sh)
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Scale => "scale",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Sh => "sh",
        }
    }

    /// Number of scalars this group holds per point.
    pub fn width(self, sh_len: usize) -> usize {
        match self {
            ParamGroup::Position | ParamGroup::Scale => 3,
            ParamGroup::Rotation => 4,
            ParamGroup::Opacity => 1,
            ParamGroup::Sh => sh_len,
        }
    }

    pub fn slice(self, p: &GaussianPoint) -> &[f64] {
        match self {
            ParamGroup::Position => &p.position,
            ParamGroup::Scale => &p.log_scale,
            ParamGroup::Rotation => &p.rotation,
            ParamGroup::Opacity => std::slice::from_ref(&p.opacity_logit),
            ParamGroup::Sh => &p.sh,
        }
    }

    pub fn slice_mut(self, p: &mut GaussianPoint) -> &mut [f64] {
        match self {
            ParamGroup::Position => &mut p.position,
            ParamGroup::Scale => &mut p.log_scale,
            ParamGroup::Rotation => &mut p.rotation,
            ParamGroup::Opacity => std::slice::from_mut(&mut p.opacity_logit),
            ParamGroup::Sh => &mut p.sh,
        }
    }
}

/// Where a flat parameter came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub point: u32,
    pub group: ParamGroup,
    pub component: u16,
}

/// A flat copy of a subset of the cloud's parameters together with the map
/// needed to write it back.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterView {
    pub values: Vec<f64>,
    pub slots: Vec<ParamSlot>,
}

impl ParameterView {
    /// Flattens `groups` point by point, groups in the given order.
    pub fn gather(cloud: &GaussianCloud, groups: &[ParamGroup]) -> Self {
        let mut values = Vec::new();
        let mut slots = Vec::new();
        for (i, p) in cloud.points.iter().enumerate() {
            for &g in groups {
                for (c, &v) in g.slice(p).iter().enumerate() {
                    values.push(v);
                    slots.push(ParamSlot {
                        point: i as u32,
                        group: g,
                        component: c as u16,
                    });
                }
            }
        }
        Self { values, slots }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Writes the values back into `cloud`. Only the slots of this view are
    /// touched.
    pub fn scatter(&self, cloud: &mut GaussianCloud) -> Result<()> {
        if self.values.len() != self.slots.len() {
            return Err(Error::Shape("parameter view values/slots length differ".into()));
        }
        for (slot, &v) in self.slots.iter().zip(&self.values) {
            let p = cloud
                .points
                .get_mut(slot.point as usize)
                .ok_or_else(|| Error::Shape(format!("view refers to missing point {}", slot.point)))?;
            let dst = slot
                .group
                .slice_mut(p)
                .get_mut(slot.component as usize)
                .ok_or_else(|| Error::Shape("view component out of range".into()))?;
            *dst = v;
        }
        Ok(())
    }
}

/// Splits the cloud into its structure parameters (position, scale,
/// rotation, opacity) and its appearance parameters (SH coefficients).
pub fn partition_views(cloud: &GaussianCloud) -> (ParameterView, ParameterView) {
    (
        ParameterView::gather(cloud, &ParamGroup::STRUCTURE),
        ParameterView::gather(cloud, &ParamGroup::APPEARANCE),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx_eq(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (a - b).abs().max() < tol
    }

    #[test]
    fn covariance_identity() {
        let c = build_covariance([1.0; 3], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(approx_eq(&c, &Mat3::identity(), 1e-15));
    }

    #[test]
    fn covariance_diagonal() {
        let c = build_covariance([2.0, 1.0, 1.0], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(approx_eq(&c, &Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0)), 1e-15));
    }

    #[test]
    fn covariance_rotated_about_z() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let c = build_covariance([2.0, 1.0, 1.0], [h, 0.0, 0.0, h]).unwrap();
        assert!(approx_eq(&c, &Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 1.0)), 1e-12));
    }

    #[test]
    fn covariance_rejects_bad_input() {
        assert!(build_covariance([f64::NAN, 1.0, 1.0], [1.0, 0.0, 0.0, 0.0]).is_err());
        assert!(build_covariance([1.0; 3], [f64::INFINITY, 0.0, 0.0, 0.0]).is_err());
        assert!(build_covariance([1.0; 3], [0.0; 4]).is_err());
    }

    #[test]
    fn density_center_and_unit_offset() {
        let i = Mat3::identity();
        assert_eq!(gaussian_density(&i, [0.0; 3]).unwrap(), 1.0);
        let v = gaussian_density(&i, [1.0, 0.0, 0.0]).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn density_rejects_singular() {
        let s = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 0.0));
        assert!(matches!(gaussian_density(&s, [0.0; 3]), Err(Error::Singular(_))));
    }

    #[test]
    fn partition_lengths_for_single_point() {
        let mut cloud = GaussianCloud::new(0);
        cloud.points.push(GaussianPoint::isotropic([0.0; 3], 1.0, 0.5, [0.2, 0.4, 0.6], 0));
        let (s, a) = partition_views(&cloud);
        assert_eq!(s.len(), 11);
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn quaternion_vjp_matches_finite_differences() {
        let q = normalize_quat([0.8, 0.3, -0.4, 0.2]);
        let g = Mat3::new(0.3, -1.0, 0.5, 0.2, 0.7, -0.4, 1.1, 0.05, -0.6);
        let f = |q: [f64; 4]| quat_to_matrix(q).component_mul(&g).sum();
        let analytic = quat_matrix_vjp(q, &g);
        for i in 0..4 {
            let mut p = q;
            let mut m = q;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let numeric = (f(p) - f(m)) / 2e-6;
            assert!((numeric - analytic[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn look_at_builds_proper_rotation() {
        let cam = Camera::look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 60.0, 32, 32).unwrap();
        let p = cam.to_camera_space(&Vec3::new(0.0, 1.0, 0.0));
        // World up maps to camera -y (image up).
        assert!(p.y < 0.0);
        assert!((p.z - 3.0).abs() < 1e-12);
    }

    #[test]
    fn reflection_rejected() {
        let r = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(check_rotation(&r, 1e-6).is_err());
    }
}
