//! Procedural test scenes: a textured tube seen by a fly-through camera
//! and a sphere shell seen from an orbit.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Rotation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::formats::{save_checkpoint, save_depth, save_png, Provenance};
use super::manifest::{write_manifest, Frame, Intrinsics, SceneManifest, Split, View, MANIFEST_VERSION};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::render::render_full;
use crate::scene::{logit, Camera, GaussianCloud, GaussianPoint, Mat3, Vec3};
use crate::sh;

pub const TUBE_RADIUS: f64 = 1.0;
pub const TUBE_LENGTH: f64 = 6.0;
const WALL_THICKNESS: f64 = 0.02;
const FIELD_OF_VIEW_DEG: f64 = 70.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Open cylinder along +z from 0 to [`TUBE_LENGTH`], closed at the far end.
    Tube,
    /// Unit sphere shell centred at the origin.
    Sphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorScheme {
    Warm,
    Cool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trajectory {
    /// Cameras inside the tube looking down its axis.
    FlyThrough,
    /// Cameras on a circle around the origin looking at it.
    Orbit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub layout: Layout,
    pub points: usize,
    pub color_scheme: ColorScheme,
    pub trajectory: Trajectory,
    pub width: usize,
    pub height: usize,
    pub train_views: usize,
    pub test_views: usize,
    pub sh_degree: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::tube()
    }
}

impl SyntheticSpec {
    pub fn tube() -> Self {
        Self {
            layout: Layout::Tube,
            points: 200,
            color_scheme: ColorScheme::Warm,
            trajectory: Trajectory::FlyThrough,
            width: 128,
            height: 128,
            train_views: 20,
            test_views: 5,
            sh_degree: 1,
            seed: 0,
        }
    }

    pub fn sphere() -> Self {
        Self {
            layout: Layout::Sphere,
            trajectory: Trajectory::Orbit,
            ..Self::tube()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.points < 20 {
            problems.push(format!("need at least 20 points, got {}", self.points));
        }
        if self.train_views + self.test_views < 2 || self.train_views == 0 {
            problems.push("need at least one training view and two views overall".into());
        }
        if self.width == 0 || self.height == 0 {
            problems.push("image size must be positive".into());
        }
        if self.sh_degree > sh::MAX_DEGREE {
            problems.push(format!("sh degree {} exceeds {}", self.sh_degree, sh::MAX_DEGREE));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(problems.join("; ")))
        }
    }
}

/// A generated scene held in memory, images unquantized.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SyntheticSpec,
    pub cloud: GaussianCloud,
    pub train: Vec<View>,
    pub test: Vec<View>,
}

/// Procedural albedo at a surface location given by two coordinates in
/// roughly unit range.
fn texture(scheme: ColorScheme, u: f64, v: f64) -> [f64; 3] {
    let (base, tint) = match scheme {
        ColorScheme::Warm => ([0.72, 0.36, 0.30], [0.18, 0.10, 0.06]),
        ColorScheme::Cool => ([0.28, 0.50, 0.72], [0.06, 0.12, 0.16]),
    };
    let wave = (2.0 * PI * (u + 0.35 * v)).sin() + 0.6 * (2.0 * PI * (2.0 * v - u)).cos();
    let fold = 0.5 + 0.5 * (4.0 * PI * v).cos();
    std::array::from_fn(|c| (base[c] + tint[c] * wave - 0.08 * fold).clamp(0.02, 0.98))
}

/// A flat disc Gaussian: `t1`, `t2` span the surface, `n` is its normal.
fn disc(position: Vec3, t1: Vec3, t2: Vec3, n: Vec3, s1: f64, s2: f64, rgb: [f64; 3], degree: usize) -> GaussianPoint {
    let m = Mat3::from_columns(&[t1, t2, n]);
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
    let mut p = GaussianPoint::isotropic(position.into(), 1.0, 0.95, rgb, degree);
    p.log_scale = [s1.ln(), s2.ln(), WALL_THICKNESS.ln()];
    p.rotation = [q.w, q.i, q.j, q.k];
    p.opacity_logit = logit(0.95);
    p
}

fn tube_cloud(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> GaussianCloud {
    let mut cloud = GaussianCloud::new(spec.sh_degree);
    let cap = (spec.points / 10).max(8);
    let wall = spec.points - cap;
    // Roughly square wall cells: circumference / n_theta ≈ length / n_z.
    let n_theta = ((wall as f64 * 2.0 * PI * TUBE_RADIUS / TUBE_LENGTH).sqrt().round() as usize).max(6);
    let n_z = wall / n_theta;
    let dz = TUBE_LENGTH / n_z as f64;
    let dtheta = 2.0 * PI / n_theta as f64;
    for k in 0..n_z * n_theta {
        let (iz, it) = (k / n_theta, k % n_theta);
        let theta = (it as f64 + 0.5 + rng.random_range(-0.15..0.15)) * dtheta + 0.5 * dtheta * (iz % 2) as f64;
        let z = (iz as f64 + 0.5 + rng.random_range(-0.15..0.15)) * dz;
        let (s, c) = theta.sin_cos();
        let normal = Vec3::new(-c, -s, 0.0);
        let tangent = Vec3::new(-s, c, 0.0);
        let pos = Vec3::new(TUBE_RADIUS * c, TUBE_RADIUS * s, z);
        let rgb = texture(spec.color_scheme, theta / (2.0 * PI), z / TUBE_LENGTH);
        cloud.points.push(disc(pos, tangent, Vec3::z(), normal, 0.55 * dtheta * TUBE_RADIUS, 0.55 * dz, rgb, spec.sh_degree));
    }
    // Far cap: centre point plus concentric rings, facing the tube opening.
    let remaining = spec.points - cloud.len();
    let inner = (remaining - 1) * 3 / 8;
    let outer = remaining - 1 - inner;
    let cell = (PI * TUBE_RADIUS * TUBE_RADIUS / remaining as f64).sqrt();
    for (r, count) in [(0.0, 1), (0.45, inner), (0.82, outer)] {
        let phase = rng.random_range(0.0..2.0 * PI);
        for j in 0..count {
            let a = phase + 2.0 * PI * j as f64 / count as f64;
            let pos = Vec3::new(r * a.cos(), r * a.sin(), TUBE_LENGTH);
            let rgb = texture(spec.color_scheme, a / (2.0 * PI), 1.0 + 0.3 * r);
            cloud.points.push(disc(pos, Vec3::x(), Vec3::y(), Vec3::z(), 0.6 * cell, 0.6 * cell, rgb, spec.sh_degree));
        }
    }
    cloud
}

fn sphere_cloud(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> GaussianCloud {
    let mut cloud = GaussianCloud::new(spec.sh_degree);
    let n = spec.points;
    let golden = PI * (3.0 - 5f64.sqrt());
    let cell = (4.0 * PI / n as f64).sqrt();
    let offset = rng.random_range(0.0..2.0 * PI);
    for i in 0..n {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let a = offset + golden * i as f64;
        let normal = Vec3::new(r * a.cos(), y, r * a.sin());
        let helper = if normal.y.abs() < 0.9 { Vec3::y() } else { Vec3::x() };
        let t1 = helper.cross(&normal).normalize();
        let t2 = normal.cross(&t1);
        let rgb = texture(spec.color_scheme, a / (2.0 * PI), 0.5 * (y + 1.0));
        cloud.points.push(disc(normal, t1, t2, normal, 0.6 * cell, 0.6 * cell, rgb, spec.sh_degree));
    }
    cloud
}

fn cameras(spec: &SyntheticSpec) -> Result<Vec<Camera>> {
    let total = spec.train_views + spec.test_views;
    (0..total)
        .map(|i| {
            let t = i as f64 / (total - 1).max(1) as f64;
            let (eye, target) = match spec.trajectory {
                Trajectory::FlyThrough => {
                    let z = -0.5 + 3.0 * t;
                    let x = 0.25 * (1.7 * i as f64).sin();
                    let y = 0.25 * (2.3 * i as f64).cos();
                    ([x, y, z], [-0.3 * x, -0.3 * y, z + 4.0])
                }
                Trajectory::Orbit => {
                    let a = 2.0 * PI * t * (total as f64 - 1.0) / total as f64;
                    let elev = 0.6 * (3.0 * PI * t).sin();
                    ([3.0 * a.cos() * elev.cos(), 3.0 * elev.sin(), 3.0 * a.sin() * elev.cos()], [0.0; 3])
                }
            };
            Camera::look_at(eye, target, [0.0, 1.0, 0.0], FIELD_OF_VIEW_DEG, spec.width, spec.height)
        })
        .collect()
}

/// Builds the ground-truth cloud and renders all views. Every fifth view
/// (starting with the third) is held out until `test_views` are taken.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cloud = match spec.layout {
        Layout::Tube => tube_cloud(spec, &mut rng),
        Layout::Sphere => sphere_cloud(spec, &mut rng),
    };
    let cams = cameras(spec)?;
    let total = cams.len();
    let stride = (total / spec.test_views.max(1)).max(1);
    let mut test_idx: Vec<usize> = (0..total).filter(|i| i % stride == stride / 2).take(spec.test_views).collect();
    test_idx.sort_unstable();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, camera) in cams.into_iter().enumerate() {
        let out = render_full(&cloud, &camera);
        let view = View {
            image: out.image,
            camera,
            depth: Some(out.depth),
        };
        if test_idx.binary_search(&i).is_ok() {
            test.push(view);
        } else {
            train.push(view);
        }
    }
    Ok(SyntheticScene {
        spec: spec.clone(),
        cloud,
        train,
        test,
    })
}

/// Perturbed copy of the ground-truth positions with fresh attributes, the
/// default starting point for reconstruction.
pub fn seed_cloud(scene: &SyntheticScene, jitter: f64, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<[f64; 3]> = scene
        .cloud
        .points
        .iter()
        .map(|p| std::array::from_fn(|k| p.position[k] + rng.random_range(-jitter..jitter)))
        .collect();
    crate::pipelines::init_cloud(&positions, scene.cloud.sh_degree)
}

fn file_name(split: &str, i: usize, ext: &str) -> String {
    format!("{split}_{i:03}.{ext}")
}

/// Writes images, depth maps, the ground-truth and seed checkpoints and the
/// manifest under `dir`; returns the manifest path.
pub fn write_synthetic(scene: &SyntheticScene, dir: &Path) -> Result<std::path::PathBuf> {
    for sub in ["images", "depth"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let first = scene.train.first().or(scene.test.first()).expect("validated spec has views");
    let mut frames = Vec::new();
    for (split, tag, views) in [("train", Split::Train, &scene.train), ("test", Split::Test, &scene.test)] {
        for (i, v) in views.iter().enumerate() {
            let image = format!("images/{}", file_name(split, i, "png"));
            save_png(&v.image, &dir.join(&image))?;
            let depth = v.depth.as_ref().map(|d| -> Result<String> {
                let name = format!("depth/{}", file_name(split, i, "f32d"));
                save_depth(d, &dir.join(&name))?;
                Ok(name)
            });
            frames.push(Frame {
                image,
                depth: depth.transpose()?,
                camera_to_world: v.camera.to_matrix(),
                split: tag,
            });
        }
    }
    let provenance = Provenance {
        phase: "synthetic".into(),
        iteration: 0,
        seed: scene.spec.seed,
        config_hash: super::formats::sha256_hex(&serde_json::to_vec(&scene.spec).expect("spec serializes")),
    };
    save_checkpoint(&scene.cloud, &provenance, &dir.join("ground_truth.ssgc"))?;
    save_checkpoint(&seed_cloud(scene, 0.05, scene.spec.seed), &provenance, &dir.join("seed.ssgc"))?;
    let manifest = SceneManifest {
        version: MANIFEST_VERSION,
        intrinsics: Intrinsics::of(&first.camera),
        frames,
        real_pool: Vec::new(),
        seed_cloud: Some("seed.ssgc".into()),
    };
    let path = dir.join("manifest.json");
    write_manifest(&manifest, &path)?;
    Ok(path)
}

/// Global affine color transform `clamp(M·p + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorMap {
    pub matrix: [[f64; 3]; 3],
    pub offset: [f64; 3],
}

impl ColorMap {
    pub const IDENTITY: ColorMap = ColorMap {
        matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        offset: [0.0; 3],
    };

    /// Turns the warm tube palette blue-green.
    pub const COOL: ColorMap = ColorMap {
        matrix: [[0.35, 0.15, 0.10], [0.10, 0.70, 0.15], [0.55, 0.20, 0.35]],
        offset: [0.02, 0.05, 0.10],
    };

    /// Desaturated brown tones.
    pub const SEPIA: ColorMap = ColorMap {
        matrix: [[0.39, 0.77, 0.19], [0.35, 0.69, 0.17], [0.27, 0.53, 0.13]],
        offset: [0.0; 3],
    };

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "identity" => Ok(Self::IDENTITY),
            "cool" => Ok(Self::COOL),
            "sepia" => Ok(Self::SEPIA),
            _ => Err(Error::InvalidInput(format!("unknown color map {name:?} (identity, cool, sepia)"))),
        }
    }

    pub fn apply_pixel(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|r| {
            let m = &self.matrix[r];
            (m[0] * p[0] + m[1] * p[1] + m[2] * p[2] + self.offset[r]).clamp(0.0, 1.0)
        })
    }

    pub fn apply(&self, img: &ImageBuffer) -> ImageBuffer {
        img.map_pixels(|p| self.apply_pixel(p))
    }
}

/// Number of images in a style pool.
pub const POOL_SIZE: usize = 10;

/// A pseudo real-domain pool and the matching held-out ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RecolorSet {
    pub pool: Vec<ImageBuffer>,
    pub held_out: Vec<ImageBuffer>,
}

/// Recolors the first [`POOL_SIZE`] source renders (cycling if there are
/// fewer) into the pool and every held-out render into its ground truth.
pub fn recolor_pool(sources: &[ImageBuffer], held_out: &[ImageBuffer], map: &ColorMap) -> Result<RecolorSet> {
    if sources.is_empty() {
        return Err(Error::InvalidInput("recolor pool needs at least one source render".into()));
    }
    Ok(RecolorSet {
        pool: sources.iter().cycle().take(POOL_SIZE).map(|img| map.apply(img)).collect(),
        held_out: held_out.iter().map(|img| map.apply(img)).collect(),
    })
}
