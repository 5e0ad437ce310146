//! The three fixed architectures: feature pyramid, patch discriminator and
//! depth encoder-decoder.

use super::{seeded_rng, Conv2d, ConvNet, Layer, NetGradients, Tensor3, Trace};
use crate::error::{Error, Result};
use crate::image::{DepthBuffer, ImageBuffer};

/// Output channels of the four encoder stages shared by all networks.
pub const EXTRACTOR_CHANNELS: [usize; 4] = [16, 32, 64, 128];

const STAGES: usize = 4;
const DOWNSCALE: usize = 1 << STAGES;

fn encoder(rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut c_in = 3;
    for c in EXTRACTOR_CHANNELS {
        layers.push(Layer::Conv(Conv2d::he_uniform(c_in, c, 3, 2, rng)));
        layers.push(Layer::LeakyRelu);
        c_in = c;
    }
    layers
}

/// Checks that `net` has the same layer kinds and parameter shapes as the
/// freshly built `template`.
fn check_architecture(net: &ConvNet, template: &ConvNet, what: &str) -> Result<()> {
    let same = net.layers.len() == template.layers.len()
        && net.layers.iter().zip(&template.layers).all(|(a, b)| match (a, b) {
            (Layer::Conv(a), Layer::Conv(b)) => {
                (a.in_channels, a.out_channels, a.kernel, a.stride) == (b.in_channels, b.out_channels, b.kernel, b.stride)
                    && a.weight.len() == b.weight.len()
                    && a.bias.len() == b.bias.len()
            }
            (a, b) => std::mem::discriminant(a) == std::mem::discriminant(b),
        });
    if !same {
        return Err(Error::Shape(format!("weights do not describe a {what} network")));
    }
    if !net.is_finite() {
        return Err(Error::Numeric(format!("{what} weights are not finite")));
    }
    Ok(())
}

fn check_min_size(img: &ImageBuffer, min: usize, what: &str) -> Result<()> {
    if img.width < min || img.height < min {
        return Err(Error::Shape(format!(
            "{what} needs at least {min}x{min} input, got {}x{}",
            img.width, img.height
        )));
    }
    Ok(())
}

fn check_divisible(img: &ImageBuffer, what: &str) -> Result<()> {
    if !img.width.is_multiple_of(DOWNSCALE) || !img.height.is_multiple_of(DOWNSCALE) || img.width == 0 || img.height == 0 {
        return Err(Error::Shape(format!(
            "{what} needs dimensions divisible by {DOWNSCALE}, got {}x{}",
            img.width, img.height
        )));
    }
    Ok(())
}

/// Feature maps of the four encoder stages, shallowest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub stages: Vec<Tensor3>,
}

impl FeaturePyramid {
    pub fn deepest(&self) -> &Tensor3 {
        self.stages.last().expect("pyramid has stages")
    }
}

/// Fixed multi-scale feature network used by the style and content losses.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub net: ConvNet,
}

impl FeatureExtractor {
    pub const MIN_SIZE: usize = 32;

    pub fn seeded(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        Self {
            net: ConvNet::new(encoder(&mut rng)),
        }
    }

    pub fn from_net(net: ConvNet) -> Result<Self> {
        check_architecture(&net, &Self::seeded(0).net, "feature extractor")?;
        Ok(Self { net })
    }

    pub fn trace(&self, img: &ImageBuffer) -> Result<Trace> {
        check_min_size(img, Self::MIN_SIZE, "feature extractor")?;
        self.net.forward_trace(&Tensor3::from_image(img))
    }

    pub fn pyramid(&self, trace: &Trace) -> FeaturePyramid {
        FeaturePyramid {
            stages: self.net.tapped(trace).into_iter().cloned().collect(),
        }
    }

    pub fn forward(&self, img: &ImageBuffer) -> Result<FeaturePyramid> {
        Ok(self.pyramid(&self.trace(img)?))
    }

    /// Image gradient given per-stage feature gradients (`None` = no
    /// contribution from that stage).
    pub fn backward_image(&self, trace: &Trace, stage_grads: &[Option<Tensor3>]) -> Result<ImageBuffer> {
        if stage_grads.len() != self.net.taps.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} stage gradients, got {}",
                self.net.taps.len(),
                stage_grads.len()
            )));
        }
        let seeds: Vec<(usize, &Tensor3)> = self
            .net
            .taps
            .iter()
            .zip(stage_grads)
            .filter_map(|(&i, g)| g.as_ref().map(|g| (i, g)))
            .collect();
        self.net.backward(trace, &seeds, false)?.input.to_image()
    }
}

/// Patch discriminator: one real-probability per 16×16 input patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub net: ConvNet,
}

impl Discriminator {
    pub const MIN_SIZE: usize = 64;

    /// Encoder weights are He-uniform; the 1×1 head starts at zero so every
    /// initial score is exactly 0.5.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut layers = encoder(&mut rng);
        layers.push(Layer::Conv(Conv2d::zeros(EXTRACTOR_CHANNELS[3], 1, 1, 1)));
        layers.push(Layer::Sigmoid);
        Self {
            net: ConvNet::new(layers),
        }
    }

    pub fn from_net(net: ConvNet) -> Result<Self> {
        check_architecture(&net, &Self::seeded(0).net, "discriminator")?;
        Ok(Self { net })
    }

    fn check(img: &ImageBuffer) -> Result<()> {
        check_min_size(img, Self::MIN_SIZE, "discriminator")?;
        check_divisible(img, "discriminator")
    }

    pub fn trace(&self, img: &ImageBuffer) -> Result<Trace> {
        Self::check(img)?;
        self.net.forward_trace(&Tensor3::from_image(img))
    }

    /// Score map of shape `1 × H/16 × W/16`.
    pub fn forward(&self, img: &ImageBuffer) -> Result<Tensor3> {
        Self::check(img)?;
        self.net.forward(&Tensor3::from_image(img))
    }

    /// Seeds the score map with `d_scores`.
    pub fn backward(&self, trace: &Trace, d_scores: &Tensor3, param_grads: bool) -> Result<NetGradients> {
        self.net.backward(trace, &[(self.net.layers.len(), d_scores)], param_grads)
    }
}

/// Depth prediction plus the four encoder feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthOutput {
    /// `1 × H × W`, nonnegative.
    pub depth: Tensor3,
    pub taps: Vec<Tensor3>,
}

impl DepthOutput {
    pub fn to_depth_buffer(&self) -> DepthBuffer {
        let mut buf = DepthBuffer::new(self.depth.width, self.depth.height);
        for (i, &d) in self.depth.data.iter().enumerate() {
            buf.depth[i] = d as f32;
            buf.valid[i] = true;
        }
        buf
    }
}

/// Encoder-decoder monocular depth network.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthNet {
    pub net: ConvNet,
}

impl DepthNet {
    /// `mean_depth` sets the head bias so the untrained net predicts
    /// roughly that depth everywhere.
    pub fn seeded(seed: u64, mean_depth: f64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut layers = encoder(&mut rng);
        let mut c_in = EXTRACTOR_CHANNELS[3];
        for c in [64, 32, 16, 16] {
            layers.push(Layer::Upsample2x);
            layers.push(Layer::Conv(Conv2d::he_uniform(c_in, c, 3, 1, &mut rng)));
            layers.push(Layer::LeakyRelu);
            c_in = c;
        }
        let mut head = Conv2d::he_uniform(c_in, 1, 3, 1, &mut rng);
        // Small head weights keep the initial prediction near the bias.
        for w in &mut head.weight {
            *w = (*w * 0.1) as f32 as f64;
        }
        let m = mean_depth.max(1e-3);
        head.bias[0] = (m + (-(-m).exp_m1()).ln()) as f32 as f64;
        layers.push(Layer::Conv(head));
        layers.push(Layer::Softplus);
        Self {
            net: ConvNet::new(layers),
        }
    }

    pub fn from_net(net: ConvNet) -> Result<Self> {
        check_architecture(&net, &Self::seeded(0, 1.0).net, "depth")?;
        Ok(Self { net })
    }

    pub fn trace(&self, img: &ImageBuffer) -> Result<Trace> {
        check_divisible(img, "depth network")?;
        self.net.forward_trace(&Tensor3::from_image(img))
    }

    pub fn output(&self, trace: &Trace) -> DepthOutput {
        DepthOutput {
            depth: trace.output().clone(),
            taps: self.net.tapped(trace).into_iter().cloned().collect(),
        }
    }

    pub fn forward(&self, img: &ImageBuffer) -> Result<DepthOutput> {
        Ok(self.output(&self.trace(img)?))
    }

    /// Backward from gradients on the depth map and (optionally) each tap.
    pub fn backward(
        &self,
        trace: &Trace,
        d_depth: Option<&Tensor3>,
        tap_grads: &[Option<Tensor3>],
        param_grads: bool,
    ) -> Result<NetGradients> {
        let mut seeds: Vec<(usize, &Tensor3)> = Vec::new();
        if let Some(g) = d_depth {
            seeds.push((self.net.layers.len(), g));
        }
        for (&i, g) in self.net.taps.iter().zip(tap_grads) {
            if let Some(g) = g {
                seeds.push((i, g));
            }
        }
        self.net.backward(trace, &seeds, param_grads)
    }
}
