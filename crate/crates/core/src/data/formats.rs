//! Binary and image file formats: 8-bit PNG views, raw f32 depth maps and
//! SSGC cloud checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{DepthBuffer, ImageBuffer};
use crate::scene::{GaussianCloud, GaussianPoint};
use crate::sh;

fn format_err(kind: &'static str, path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        kind,
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Quantizes to 8 bits per channel (clamped, rounded) and writes a PNG.
pub fn save_png(img: &ImageBuffer, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| Error::Shape("image buffer size does not match its dimensions".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| format_err("png", path, e.to_string()))
}

/// Reads any 8-bit PNG as RGB in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<ImageBuffer> {
    let bytes = read_bytes(path)?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| format_err("png", path, e.to_string()))?
        .to_rgb8();
    let (w, h) = decoded.dimensions();
    let data = decoded.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    ImageBuffer::from_data(w as usize, h as usize, data)
}

pub const DEPTH_MAGIC: [u8; 4] = *b"F32D";
pub const DEPTH_VERSION: u32 = 1;

/// 16-byte header (magic, version, width, height) then row-major f32
/// values; invalid pixels are stored as NaN.
pub fn encode_depth(d: &DepthBuffer) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * d.depth.len());
    out.extend_from_slice(&DEPTH_MAGIC);
    for v in [DEPTH_VERSION, d.width as u32, d.height as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (&v, &ok) in d.depth.iter().zip(&d.valid) {
        out.extend_from_slice(&(if ok { v } else { f32::NAN }).to_le_bytes());
    }
    out
}

fn decode_depth(bytes: &[u8]) -> std::result::Result<DepthBuffer, String> {
    if bytes.len() < 16 || bytes[..4] != DEPTH_MAGIC {
        return Err("bad magic".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(1) != DEPTH_VERSION {
        return Err(format!("unsupported version {}", word(1)));
    }
    let (w, h) = (word(2) as usize, word(3) as usize);
    let expected = w.checked_mul(h).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(16));
    if expected != Some(bytes.len()) {
        return Err(format!("expected {w}x{h} values, file has {} bytes", bytes.len()));
    }
    let mut d = DepthBuffer::new(w, h);
    for (i, chunk) in bytes[16..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_nan() {
            d.depth[i] = v;
            d.valid[i] = true;
        }
    }
    Ok(d)
}

pub fn save_depth(d: &DepthBuffer, path: &Path) -> Result<()> {
    write_bytes(path, &encode_depth(d))
}

pub fn load_depth(path: &Path) -> Result<DepthBuffer> {
    decode_depth(&read_bytes(path)?).map_err(|r| format_err("depth", path, r))
}

pub fn read_depth(bytes: &[u8]) -> Result<DepthBuffer> {
    decode_depth(bytes).map_err(|r| format_err("depth", Path::new(""), r))
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SSGC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where a checkpoint came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub phase: String,
    pub iteration: u64,
    pub seed: u64,
    /// Hex SHA-256 of the configuration JSON used for the run.
    pub config_hash: String,
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn put_f64s<'a>(out: &mut Vec<u8>, vals: impl Iterator<Item = &'a f64>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Little-endian bytes of the structure parameters (positions, log-scales,
/// rotations, opacity logits) as contiguous arrays.
pub fn structure_bytes(cloud: &GaussianCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 11 * 8);
    put_f64s(&mut out, cloud.points.iter().flat_map(|p| &p.position));
    put_f64s(&mut out, cloud.points.iter().flat_map(|p| &p.log_scale));
    put_f64s(&mut out, cloud.points.iter().flat_map(|p| &p.rotation));
    put_f64s(&mut out, cloud.points.iter().map(|p| &p.opacity_logit));
    out
}

pub fn structure_checksum(cloud: &GaussianCloud) -> String {
    sha256_hex(&structure_bytes(cloud))
}

/// Layout: magic, version u32, sh degree u32, point count u64, background
/// 3×f64, provenance JSON (u32 length + bytes), then the structure arrays
/// and the SH array, all f64.
pub fn encode_checkpoint(cloud: &GaussianCloud, provenance: &Provenance) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.sh_degree as u32).to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    put_f64s(&mut out, cloud.background.iter());
    let meta = serde_json::to_vec(provenance).expect("provenance serializes");
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&structure_bytes(cloud));
    put_f64s(&mut out, cloud.points.iter().flat_map(|p| &p.sh));
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let len = n.checked_mul(8).ok_or("point count overflows")?;
        Ok(self.take(len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<(GaussianCloud, Provenance), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let degree = r.u32()? as usize;
    if degree > sh::MAX_DEGREE {
        return Err(format!("sh degree {degree} exceeds {}", sh::MAX_DEGREE));
    }
    let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let bg = r.f64s(3)?;
    let meta_len = r.u32()? as usize;
    let provenance: Provenance = serde_json::from_slice(r.take(meta_len)?).map_err(|e| format!("provenance: {e}"))?;
    let sh_len = 3 * sh::coeff_count(degree);
    // Check the total size before allocating per-point arrays.
    let needed = count.checked_mul((11 + sh_len) * 8).ok_or("point count overflows")?;
    if bytes.len() - r.pos != needed {
        return Err(format!("expected {needed} bytes of parameters, found {}", bytes.len() - r.pos));
    }
    let positions = r.f64s(3 * count)?;
    let scales = r.f64s(3 * count)?;
    let rotations = r.f64s(4 * count)?;
    let opacities = r.f64s(count)?;
    let shs = r.f64s(sh_len * count)?;
    let mut cloud = GaussianCloud::new(degree);
    cloud.background = [bg[0], bg[1], bg[2]];
    cloud.points = (0..count)
        .map(|i| GaussianPoint {
            position: positions[3 * i..3 * i + 3].try_into().unwrap(),
            log_scale: scales[3 * i..3 * i + 3].try_into().unwrap(),
            rotation: rotations[4 * i..4 * i + 4].try_into().unwrap(),
            opacity_logit: opacities[i],
            sh: shs[sh_len * i..sh_len * (i + 1)].to_vec(),
        })
        .collect();
    Ok((cloud, provenance))
}

pub fn save_checkpoint(cloud: &GaussianCloud, provenance: &Provenance, path: &Path) -> Result<()> {
    write_bytes(path, &encode_checkpoint(cloud, provenance))
}

pub fn load_checkpoint(path: &Path) -> Result<(GaussianCloud, Provenance)> {
    decode_checkpoint(&read_bytes(path)?).map_err(|r| format_err("checkpoint", path, r))
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(GaussianCloud, Provenance)> {
    decode_checkpoint(bytes).map_err(|r| format_err("checkpoint", Path::new(""), r))
}
