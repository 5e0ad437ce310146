//! Differentiable tile rasterizer for Gaussian clouds.
//!
//! The forward pass projects every Gaussian with the local-affine (EWA)
//! approximation, sorts splats globally by view depth, bins them into
//! 16×16 tiles and alpha-composites each pixel front to back. The backward
//! pass recomputes the per-pixel splat lists tile by tile and chains the
//! image gradient down to every Gaussian parameter.

mod backward;
mod project;
mod raster;

pub use backward::{render_backward, BackwardScope, RenderGradients};
pub use project::{project, ProjectedSplat};
pub use raster::{composite_pixel, render, render_depth, render_full, RenderOutput};

/// Tile edge length in pixels.
pub const TILE_SIZE: usize = 16;
/// Points with camera-space z at or below this are culled.
pub const NEAR_PLANE: f64 = 0.2;
/// Isotropic variance added to every projected covariance (pixels²).
pub const LOW_PASS: f64 = 0.3;
/// The projection Jacobian is evaluated at view slopes clamped to this
/// multiple of the half field of view.
pub const FRUSTUM_CLAMP: f64 = 1.3;
/// Splat influence is cut off beyond this many standard deviations.
pub const SIGMA_CUTOFF: f64 = 3.0;
/// Effective alphas below this are skipped.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Effective alphas are clamped to this value.
pub const MAX_ALPHA: f64 = 0.99;
/// Compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Pixels with accumulated alpha below this have no valid depth.
pub const DEPTH_MASK_ALPHA: f64 = 0.5;

/// Effective alpha of a splat at pixel-center offset `(dx, dy)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PixelHit {
    pub alpha: f64,
    pub gauss: f64,
    pub dx: f64,
    pub dy: f64,
    pub clamped: bool,
}

#[inline]
pub(crate) fn pixel_hit(s: &ProjectedSplat, px: f64, py: f64) -> Option<PixelHit> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let [a, b, c] = s.conic;
    let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
    if !(power >= -0.5 * SIGMA_CUTOFF * SIGMA_CUTOFF) || power > 0.0 {
        return None;
    }
    let gauss = power.exp();
    let raw = s.opacity * gauss;
    if raw < MIN_ALPHA {
        return None;
    }
    let clamped = raw > MAX_ALPHA;
    Some(PixelHit {
        alpha: if clamped { MAX_ALPHA } else { raw },
        gauss,
        dx,
        dy,
        clamped,
    })
}
