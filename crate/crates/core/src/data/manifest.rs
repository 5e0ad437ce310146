//! Scene manifests: JSON index of posed views, optional depth maps, a real
//! image pool and an optional seed cloud.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::formats::{load_checkpoint, load_depth, load_png};
use crate::error::{Error, Result};
use crate::image::{DepthBuffer, ImageBuffer};
use crate::scene::{check_rotation, Camera, GaussianCloud, Mat3, Vec3};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// Paths are relative to the manifest's directory.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    /// Row-major 4×4 camera-to-world matrix; camera +z forward, +y down.
    pub camera_to_world: [f64; 16],
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub version: u32,
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub real_pool: Vec<String>,
    /// Checkpoint to initialize reconstruction from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_cloud: Option<String>,
}

impl Intrinsics {
    pub fn of(cam: &Camera) -> Self {
        Self {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
        }
    }

    pub fn camera(&self, camera_to_world: &[f64; 16]) -> Result<Camera> {
        let m = camera_to_world;
        let rotation = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vec3::new(m[3], m[7], m[11]);
        Camera::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height, rotation, translation)
    }
}

/// One posed image.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: ImageBuffer,
    pub camera: Camera,
    pub depth: Option<DepthBuffer>,
}

#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub manifest: SceneManifest,
    pub train: Vec<View>,
    pub test: Vec<View>,
    pub real_pool: Vec<ImageBuffer>,
    pub seed_cloud: Option<GaussianCloud>,
}

impl LoadedScene {
    pub fn all_views(&self) -> impl Iterator<Item = &View> {
        self.train.iter().chain(&self.test)
    }
}

pub fn read_manifest(path: &Path) -> Result<SceneManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        kind: "manifest",
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_manifest(manifest: &SceneManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Loads every file a manifest refers to. Problems with individual frames
/// are collected and reported together.
pub fn load_scene(path: &Path) -> Result<LoadedScene> {
    let manifest = read_manifest(path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Validation(vec![format!(
            "unsupported manifest version {} (expected {MANIFEST_VERSION})",
            manifest.version
        )]));
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: &str| -> PathBuf { root.join(p) };
    let intr = manifest.intrinsics;
    let mut problems = Vec::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, frame) in manifest.frames.iter().enumerate() {
        let m = &frame.camera_to_world;
        let rot = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let before = problems.len();
        if let Err(e) = check_rotation(&rot, 1e-6) {
            problems.push(format!("frame {i}: pose: {e}"));
        }
        if m[12..] != [0.0, 0.0, 0.0, 1.0] {
            problems.push(format!("frame {i}: pose: last row must be [0, 0, 0, 1]"));
        }
        let pose_ok = problems.len() == before;
        let image = match load_png(&resolve(&frame.image)) {
            Ok(img) if (img.width, img.height) != (intr.width, intr.height) => {
                problems.push(format!(
                    "frame {i}: image {} is {}x{}, intrinsics say {}x{}",
                    frame.image, img.width, img.height, intr.width, intr.height
                ));
                None
            }
            Ok(img) => Some(img),
            Err(e) => {
                problems.push(format!("frame {i}: {e}"));
                None
            }
        };
        let depth = match &frame.depth {
            None => None,
            Some(p) => match load_depth(&resolve(p)) {
                Ok(d) if (d.width, d.height) != (intr.width, intr.height) => {
                    problems.push(format!("frame {i}: depth map {p} has the wrong size"));
                    None
                }
                Ok(d) => Some(d),
                Err(e) => {
                    problems.push(format!("frame {i}: {e}"));
                    None
                }
            },
        };
        let camera = match intr.camera(m) {
            Ok(c) => Some(c),
            Err(_) if !pose_ok => None,
            Err(e) => {
                problems.push(format!("frame {i}: camera: {e}"));
                None
            }
        };
        if let (Some(image), Some(camera)) = (image, camera) {
            let view = View { image, camera, depth };
            match frame.split {
                Split::Train => train.push(view),
                Split::Test => test.push(view),
            }
        }
    }
    let mut real_pool = Vec::new();
    for p in &manifest.real_pool {
        match load_png(&resolve(p)) {
            Ok(img) => real_pool.push(img),
            Err(e) => problems.push(format!("real pool: {e}")),
        }
    }
    let seed_cloud = match &manifest.seed_cloud {
        None => None,
        Some(p) => match load_checkpoint(&resolve(p)) {
            Ok((c, _)) => Some(c),
            Err(e) => {
                problems.push(format!("seed cloud: {e}"));
                None
            }
        },
    };
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Ok(LoadedScene {
        manifest,
        train,
        test,
        real_pool,
        seed_cloud,
    })
}
