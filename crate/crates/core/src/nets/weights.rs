//! Little-endian binary weight files.
//!
//! Layout: magic `SSNW`, version u32, layer count u32, then per layer a kind
//! tag u32, a dimension count u32 and that many u32 dims. Convolutions carry
//! dims `[out, in, kernel, stride]` followed by raw f32 weights and biases.

use std::io::{Read, Write};
use std::path::Path;

use super::{Conv2d, ConvNet, Layer};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"SSNW";
pub const WEIGHTS_VERSION: u32 = 1;

const KIND_CONV: u32 = 0;
const KIND_LEAKY: u32 = 1;
const KIND_UPSAMPLE: u32 = 2;
const KIND_SIGMOID: u32 = 3;
const KIND_SOFTPLUS: u32 = 4;

// Guards against allocating absurd buffers from corrupt headers.
const MAX_DIM: u32 = 4096;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes `net`; parameters are stored as f32.
pub fn write_net(net: &ConvNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHTS_MAGIC);
    put_u32(&mut out, WEIGHTS_VERSION);
    put_u32(&mut out, net.layers.len() as u32);
    for layer in &net.layers {
        let kind = match layer {
            Layer::Conv(_) => KIND_CONV,
            Layer::LeakyRelu => KIND_LEAKY,
            Layer::Upsample2x => KIND_UPSAMPLE,
            Layer::Sigmoid => KIND_SIGMOID,
            Layer::Softplus => KIND_SOFTPLUS,
        };
        put_u32(&mut out, kind);
        match layer {
            Layer::Conv(c) => {
                put_u32(&mut out, 4);
                for d in [c.out_channels, c.in_channels, c.kernel, c.stride] {
                    put_u32(&mut out, d as u32);
                }
                for v in c.weight.iter().chain(&c.bias) {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            _ => put_u32(&mut out, 0),
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("unexpected end of file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<ConvNet, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != WEIGHTS_MAGIC {
        return Err("bad magic".into());
    }
    let version = cur.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = cur.u32()?;
    let mut layers = Vec::new();
    for i in 0..count {
        let kind = cur.u32()?;
        let ndims = cur.u32()?;
        let dims = (0..ndims).map(|_| cur.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        let layer = match (kind, dims.as_slice()) {
            (KIND_CONV, &[out, inp, kernel, stride]) => {
                if [out, inp, kernel, stride].iter().any(|&d| d == 0 || d > MAX_DIM) || kernel % 2 == 0 || stride > 2 {
                    return Err(format!("layer {i}: invalid conv dims {dims:?}"));
                }
                let (out, inp, kernel) = (out as usize, inp as usize, kernel as usize);
                let weight = cur.f32s(out * inp * kernel * kernel)?;
                let bias = cur.f32s(out)?;
                Layer::Conv(Conv2d {
                    in_channels: inp,
                    out_channels: out,
                    kernel,
                    stride: stride as usize,
                    weight,
                    bias,
                })
            }
            (KIND_LEAKY, []) => Layer::LeakyRelu,
            (KIND_UPSAMPLE, []) => Layer::Upsample2x,
            (KIND_SIGMOID, []) => Layer::Sigmoid,
            (KIND_SOFTPLUS, []) => Layer::Softplus,
            _ => return Err(format!("layer {i}: unknown kind {kind} with dims {dims:?}")),
        };
        layers.push(layer);
    }
    if cur.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    // Channel counts must chain through the stack.
    let mut channels: Option<usize> = None;
    for (i, l) in layers.iter().enumerate() {
        if let Layer::Conv(c) = l {
            if channels.is_some_and(|ch| ch != c.in_channels) {
                return Err(format!("layer {i}: expects {} channels, previous conv gives {}", c.in_channels, channels.unwrap()));
            }
            channels = Some(c.out_channels);
        }
    }
    let net = ConvNet::new(layers);
    if !net.is_finite() {
        return Err("non-finite parameters".into());
    }
    Ok(net)
}

pub fn read_net(bytes: &[u8]) -> Result<ConvNet> {
    parse(bytes).map_err(|reason| Error::Format {
        kind: "weights",
        path: Default::default(),
        reason,
    })
}

pub fn save_net(net: &ConvNet, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&write_net(net)).map_err(|e| Error::io(path, e))
}

pub fn load_net(path: &Path) -> Result<ConvNet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|reason| Error::Format {
        kind: "weights",
        path: path.to_path_buf(),
        reason,
    })
}
