//! A minimal convolutional network kit with explicit forward and backward
//! passes: strided 3×3 / 1×1 convolutions, leaky ReLU, nearest upsampling,
//! and sigmoid / softplus heads.

mod gemm;
mod models;
mod train;
mod weights;

pub use models::{DepthNet, DepthOutput, Discriminator, FeatureExtractor, FeaturePyramid, EXTRACTOR_CHANNELS};
pub use train::{jitter_colors, train_depthnet, DepthTrainConfig, DepthTrainReport, NetOptimizer};
pub use weights::{load_net, read_net, save_net, write_net, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use gemm::gemm;

/// Slope of the leaky ReLU for negative inputs.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Dense `channels × height × width` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn from_image(img: &ImageBuffer) -> Self {
        let mut t = Self::zeros(3, img.height, img.width);
        let plane = t.plane();
        for (i, px) in img.data.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                t.data[ch * plane + i] = px[ch];
            }
        }
        t
    }

    /// Inverse of [`Tensor3::from_image`]; requires three channels.
    pub fn to_image(&self) -> Result<ImageBuffer> {
        if self.channels != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", self.channels)));
        }
        let plane = self.plane();
        let mut img = ImageBuffer::new(self.width, self.height);
        for (i, px) in img.data.chunks_exact_mut(3).enumerate() {
            for ch in 0..3 {
                px[ch] = self.data[ch * plane + i];
            }
        }
        Ok(img)
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// A 2D convolution with `kernel/2` zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `out × in × k × k`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-uniform weights drawn in single precision, zero bias.
    pub fn he_uniform(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, stride);
        let fan_in = (in_channels * kernel * kernel) as f32;
        let bound = (6.0 / fan_in).sqrt();
        for w in &mut conv.weight {
            *w = rng.random_range(-bound..bound) as f64;
        }
        conv
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let p = 2 * self.pad();
        (
            (height + p - self.kernel) / self.stride + 1,
            (width + p - self.kernel) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unrolls input patches into a `(in·k·k) × (oh·ow)` matrix.
    fn im2col(&self, input: &Tensor3, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let pad = self.pad() as isize;
        let n = oh * ow;
        let mut cols = vec![0.0; self.patch_len() * n];
        cols.par_chunks_mut(k * k * n).enumerate().for_each(|(c, block)| {
            let src = &input.data[c * input.plane()..(c + 1) * input.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut block[(ky * k + kx) * n..(ky * k + kx + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= input.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * input.width..(iy as usize + 1) * input.width];
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < input.width as isize {
                                row[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        });
        cols
    }

    /// Scatters a column-gradient matrix back onto the input grid.
    fn col2im(&self, cols: &[f64], height: usize, width: usize, oh: usize, ow: usize) -> Tensor3 {
        let k = self.kernel;
        let pad = self.pad() as isize;
        let n = oh * ow;
        let mut out = Tensor3::zeros(self.in_channels, height, width);
        let plane = height * width;
        out.data.par_chunks_mut(plane).enumerate().for_each(|(c, dst)| {
            let block = &cols[c * k * k * n..(c + 1) * k * k * n];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &block[(ky * k + kx) * n..(ky * k + kx + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < width as isize {
                                dst[iy as usize * width + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        });
        out
    }

    pub fn forward(&self, input: &Tensor3) -> Result<Tensor3> {
        if input.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        let (oh, ow) = self.output_size(input.height, input.width);
        let n = oh * ow;
        let mut out = Tensor3::zeros(self.out_channels, oh, ow);
        for (c, chunk) in out.data.chunks_exact_mut(n).enumerate() {
            chunk.fill(self.bias[c]);
        }
        let cols = self.im2col(input, oh, ow);
        gemm(self.out_channels, self.patch_len(), n, &self.weight, false, &cols, false, &mut out.data, 1.0);
        Ok(out)
    }

    /// Returns `(d_input, d_weight, d_bias)`; parameter gradients only when
    /// `param_grads` is set.
    fn backward(&self, input: &Tensor3, d_out: &Tensor3, param_grads: bool) -> (Tensor3, Option<ConvGrad>) {
        let (oh, ow) = (d_out.height, d_out.width);
        let n = oh * ow;
        let grads = param_grads.then(|| {
            let cols = self.im2col(input, oh, ow);
            let mut weight = vec![0.0; self.weight.len()];
            gemm(self.out_channels, n, self.patch_len(), &d_out.data, false, &cols, true, &mut weight, 0.0);
            let bias = d_out.data.chunks_exact(n).map(|c| c.iter().sum()).collect();
            ConvGrad { weight, bias }
        });
        let mut d_cols = vec![0.0; self.patch_len() * n];
        gemm(self.patch_len(), self.out_channels, n, &self.weight, true, &d_out.data, false, &mut d_cols, 0.0);
        (self.col2im(&d_cols, input.height, input.width, oh, ow), grads)
    }
}

/// Gradient of one convolution's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    LeakyRelu,
    Upsample2x,
    Sigmoid,
    Softplus,
}

impl Layer {
    fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        Ok(match self {
            Layer::Conv(c) => c.forward(x)?,
            Layer::LeakyRelu => map(x, |v| if v > 0.0 { v } else { LEAKY_SLOPE * v }),
            Layer::Sigmoid => map(x, |v| 1.0 / (1.0 + (-v).exp())),
            Layer::Softplus => map(x, softplus),
            Layer::Upsample2x => {
                let mut out = Tensor3::zeros(x.channels, 2 * x.height, 2 * x.width);
                let ow = out.width;
                for c in 0..x.channels {
                    for y in 0..out.height {
                        let src = &x.data[(c * x.height + y / 2) * x.width..][..x.width];
                        let dst = &mut out.data[(c * out.height + y) * ow..][..ow];
                        for (xo, d) in dst.iter_mut().enumerate() {
                            *d = src[xo / 2];
                        }
                    }
                }
                out
            }
        })
    }

    fn backward(&self, input: &Tensor3, output: &Tensor3, d_out: &Tensor3, param_grads: bool) -> (Tensor3, Option<ConvGrad>) {
        let zip = |f: &dyn Fn(f64, f64, f64) -> f64| Tensor3 {
            data: input
                .data
                .iter()
                .zip(&output.data)
                .zip(&d_out.data)
                .map(|((&i, &o), &g)| f(i, o, g))
                .collect(),
            ..*d_out
        };
        match self {
            Layer::Conv(c) => c.backward(input, d_out, param_grads),
            Layer::LeakyRelu => (zip(&|i, _, g| if i > 0.0 { g } else { LEAKY_SLOPE * g }), None),
            Layer::Sigmoid => (zip(&|_, o, g| g * o * (1.0 - o)), None),
            Layer::Softplus => (zip(&|i, _, g| g / (1.0 + (-i).exp())), None),
            Layer::Upsample2x => {
                let mut d_in = Tensor3::zeros(input.channels, input.height, input.width);
                for c in 0..input.channels {
                    for y in 0..d_out.height {
                        let src = &d_out.data[(c * d_out.height + y) * d_out.width..][..d_out.width];
                        let dst = &mut d_in.data[(c * input.height + y / 2) * input.width..][..input.width];
                        for (xo, g) in src.iter().enumerate() {
                            dst[xo / 2] += g;
                        }
                    }
                }
                (d_in, None)
            }
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv2d",
            Layer::LeakyRelu => "leaky_relu",
            Layer::Upsample2x => "upsample2x",
            Layer::Sigmoid => "sigmoid",
            Layer::Softplus => "softplus",
        }
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.max(0.0) + (-v.abs()).exp().ln_1p()
    }
}

fn map(x: &Tensor3, f: impl Fn(f64) -> f64) -> Tensor3 {
    Tensor3 {
        data: x.data.iter().map(|&v| f(v)).collect(),
        ..*x
    }
}

/// Saved activations of one forward pass: `activations[0]` is the input,
/// `activations[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Trace {
    pub activations: Vec<Tensor3>,
}

impl Trace {
    pub fn output(&self) -> &Tensor3 {
        self.activations.last().expect("trace holds at least the input")
    }
}

/// Parameter gradients per layer (None for parameter-free layers or when
/// not requested) plus the gradient with respect to the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradients {
    pub layers: Vec<Option<ConvGrad>>,
    pub input: Tensor3,
}

/// A sequential stack of layers with labelled feature taps.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub layers: Vec<Layer>,
    /// Activation indices exposed as features, see [`Trace`].
    pub taps: Vec<usize>,
}

impl ConvNet {
    pub fn new(layers: Vec<Layer>) -> Self {
        let taps = default_taps(&layers);
        Self { layers, taps }
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv2d> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.convs().map(|c| c.weight.len() + c.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.convs().all(|c| c.weight.iter().chain(&c.bias).all(|v| v.is_finite()))
    }

    /// Rounds every parameter to the nearest `f32`, the precision of the
    /// weight file.
    pub fn round_to_f32(&mut self) {
        for c in self.convs_mut() {
            for v in c.weight.iter_mut().chain(c.bias.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn forward(&self, input: &Tensor3) -> Result<Tensor3> {
        let mut x = input.clone();
        for l in &self.layers {
            x = l.forward(&x)?;
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &Tensor3) -> Result<Trace> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for l in &self.layers {
            let next = l.forward(activations.last().unwrap())?;
            activations.push(next);
        }
        Ok(Trace { activations })
    }

    pub fn tapped<'a>(&self, trace: &'a Trace) -> Vec<&'a Tensor3> {
        self.taps.iter().map(|&i| &trace.activations[i]).collect()
    }

    /// Reverse-mode pass. `seeds` injects `dL/d(activation i)` for any
    /// activation index; gradients from several seeds are summed.
    pub fn backward(&self, trace: &Trace, seeds: &[(usize, &Tensor3)], param_grads: bool) -> Result<NetGradients> {
        let n = self.layers.len();
        if trace.activations.len() != n + 1 {
            return Err(Error::InvalidInput(format!(
                "trace holds {} activations, network needs {}",
                trace.activations.len(),
                n + 1
            )));
        }
        for &(i, g) in seeds {
            if i > n {
                return Err(Error::InvalidInput(format!("seed index {i} out of range")));
            }
            if g.shape() != trace.activations[i].shape() {
                return Err(Error::Shape(format!(
                    "seed for activation {i} has shape {:?}, activation is {:?}",
                    g.shape(),
                    trace.activations[i].shape()
                )));
            }
        }
        let seed_at = |i: usize| seeds.iter().filter(move |(j, _)| *j == i).map(|(_, g)| *g);
        let mut grad: Option<Tensor3> = None;
        let mut layers = vec![None; n];
        for i in (0..n).rev() {
            for s in seed_at(i + 1) {
                match &mut grad {
                    Some(g) => g.add_assign(s),
                    None => grad = Some(s.clone()),
                }
            }
            let Some(g) = grad.take() else {
                continue;
            };
            let (d_in, pg) = self.layers[i].backward(&trace.activations[i], &trace.activations[i + 1], &g, param_grads);
            layers[i] = pg;
            grad = Some(d_in);
        }
        let input_shape = trace.activations[0].shape();
        let mut input = grad.unwrap_or_else(|| Tensor3::zeros(input_shape.0, input_shape.1, input_shape.2));
        for s in seed_at(0) {
            input.add_assign(s);
        }
        if param_grads {
            for (i, l) in self.layers.iter().enumerate() {
                if let (Layer::Conv(c), None) = (l, &layers[i]) {
                    layers[i] = Some(ConvGrad {
                        weight: vec![0.0; c.weight.len()],
                        bias: vec![0.0; c.bias.len()],
                    });
                }
            }
        }
        Ok(NetGradients { layers, input })
    }
}

/// Taps are placed after every leaky ReLU that directly follows a strided
/// convolution: the encoder stages of all networks in this crate.
fn default_taps(layers: &[Layer]) -> Vec<usize> {
    (1..layers.len())
        .filter(|&i| matches!(layers[i], Layer::LeakyRelu) && matches!(&layers[i - 1], Layer::Conv(c) if c.stride == 2))
        .map(|i| i + 1)
        .collect()
}

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
