//! Adam training for the conv nets and the depth-network fitting loop.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{seeded_rng, ConvNet, DepthNet, NetGradients, Tensor3};
use crate::error::{Error, Result};
use crate::image::{DepthBuffer, ImageBuffer};
use crate::optim::{adam_step, clip_global_norm, AdamState};

/// Adam state for every convolution of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOptimizer {
    /// One weight and one bias state per convolution, in layer order.
    states: Vec<(AdamState, AdamState)>,
    pub lr: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl NetOptimizer {
    pub fn new(net: &ConvNet, lr: f64) -> Self {
        Self {
            states: net
                .convs()
                .map(|c| (AdamState::new(c.weight.len()), AdamState::new(c.bias.len())))
                .collect(),
            lr,
            clip: None,
        }
    }

    pub fn step(&mut self, net: &mut ConvNet, grads: &NetGradients) -> Result<()> {
        let mut flat: Vec<(Vec<f64>, Vec<f64>)> = grads
            .layers
            .iter()
            .zip(&net.layers)
            .filter(|(_, l)| matches!(l, super::Layer::Conv(_)))
            .map(|(g, _)| {
                g.as_ref()
                    .map(|g| (g.weight.clone(), g.bias.clone()))
                    .ok_or_else(|| Error::InvalidInput("missing parameter gradients".into()))
            })
            .collect::<Result<_>>()?;
        if flat.len() != self.states.len() {
            return Err(Error::Shape("gradient layout does not match the optimizer".into()));
        }
        if let Some(max) = self.clip {
            let mut views: Vec<&mut [f64]> = flat.iter_mut().flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()]).collect();
            clip_global_norm(&mut views, max);
        }
        for ((conv, (sw, sb)), (gw, gb)) in net.convs_mut().zip(&mut self.states).zip(&flat) {
            adam_step(&mut conv.weight, gw, sw, self.lr)?;
            adam_step(&mut conv.bias, gb, sb, self.lr)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip: f64,
    /// Strength of the random color transform applied to each training
    /// image (0 disables it). Keeps the predicted depth from keying on the
    /// scene's palette.
    pub color_jitter: f64,
}

impl Default for DepthTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-3,
            seed: 0,
            clip: 10.0,
            color_jitter: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthTrainReport {
    /// Loss of the sample used at each step, before its update.
    pub step_losses: Vec<f64>,
    /// Mean loss over the whole dataset with the final weights.
    pub final_loss: f64,
}

impl DepthTrainReport {
    /// Trailing moving average of the step losses.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        moving_average(&self.step_losses, window)
    }
}

pub(crate) fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || xs.len() < window {
        return Vec::new();
    }
    let mut sum: f64 = xs[..window].iter().sum();
    let mut out = vec![sum / window as f64];
    for i in window..xs.len() {
        sum += xs[i] - xs[i - window];
        out.push(sum / window as f64);
    }
    out
}

/// Mean squared error over valid pixels and its gradient w.r.t. the
/// predicted depth map.
fn depth_mse(pred: &Tensor3, gt: &DepthBuffer) -> Result<(f64, Tensor3)> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Shape(format!(
            "depth target is {}x{}, prediction {}x{}",
            gt.width, gt.height, pred.width, pred.height
        )));
    }
    let n = gt.valid_count();
    let mut grad = Tensor3::zeros(1, pred.height, pred.width);
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for i in 0..pred.data.len() {
        if gt.valid[i] {
            let d = pred.data[i] - gt.depth[i] as f64;
            loss += d * d;
            grad.data[i] = 2.0 * d / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Random global color transform: a blend between the identity and a random
/// row-stochastic channel mix, a per-channel gain and an offset, clamped to
/// `[0, 1]`.
pub fn jitter_colors(img: &ImageBuffer, strength: f64, rng: &mut impl Rng) -> ImageBuffer {
    if strength <= 0.0 {
        return img.clone();
    }
    let blend = rng.random_range(0.0..strength.min(1.0));
    let mut m = [[0.0; 3]; 3];
    let mut offset = [0.0; 3];
    for (r, row) in m.iter_mut().enumerate() {
        let mix: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let total: f64 = mix.iter().sum::<f64>().max(1e-9);
        let gain = rng.random_range(1.0 - 0.5 * strength..1.0 + 0.25 * strength);
        for c in 0..3 {
            let id = if r == c { 1.0 } else { 0.0 };
            row[c] = gain * ((1.0 - blend) * id + blend * mix[c] / total);
        }
        offset[r] = rng.random_range(-0.1..0.1) * strength;
    }
    img.map_pixels(|p| std::array::from_fn(|r| (m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + offset[r]).clamp(0.0, 1.0)))
}

/// Fits a fresh depth network to `(image, depth)` pairs with Adam on the
/// per-pixel MSE, one sample per step in seeded shuffled order.
pub fn train_depthnet(data: &[(ImageBuffer, DepthBuffer)], config: &DepthTrainConfig) -> Result<(DepthNet, DepthTrainReport)> {
    if data.is_empty() {
        return Err(Error::InvalidInput("depth training needs at least one sample".into()));
    }
    let (sum, count) = data.iter().fold((0.0, 0usize), |(s, c), (_, d)| {
        let valid = d.depth.iter().zip(&d.valid).filter(|(_, &v)| v).map(|(&x, _)| x as f64);
        (s + valid.clone().sum::<f64>(), c + valid.count())
    });
    if count == 0 {
        return Err(Error::InvalidInput("depth targets contain no valid pixels".into()));
    }
    let mut dn = DepthNet::seeded(config.seed, sum / count as f64);
    let mut opt = NetOptimizer::new(&dn.net, config.lr);
    opt.clip = Some(config.clip);
    let mut rng = seeded_rng(config.seed ^ 0x5eed);
    let mut order: Vec<usize> = Vec::new();
    let mut step_losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        if order.is_empty() {
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
        }
        let (img, gt) = &data[order.pop().unwrap()];
        let trace = if config.color_jitter > 0.0 {
            dn.trace(&jitter_colors(img, config.color_jitter, &mut rng))?
        } else {
            dn.trace(img)?
        };
        let (loss, grad) = depth_mse(trace.output(), gt)?;
        step_losses.push(loss);
        let grads = dn.backward(&trace, Some(&grad), &[], true)?;
        opt.step(&mut dn.net, &grads)?;
    }
    let mut final_loss = 0.0;
    for (img, gt) in data {
        final_loss += depth_mse(&dn.forward(img)?.depth, gt)?.0;
    }
    Ok((
        dn,
        DepthTrainReport {
            step_losses,
            final_loss: final_loss / data.len() as f64,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_sample(seed: u64, depth: f32) -> (ImageBuffer, DepthBuffer) {
        let img = ImageBuffer::from_fn(32, 32, |x, y| {
            let t = ((x * 7 + y * 3 + seed as usize * 11) % 17) as f64 / 17.0;
            [t, 1.0 - t, 0.5]
        });
        let mut d = DepthBuffer::new(32, 32);
        d.depth.fill(depth);
        d.valid.fill(true);
        (img, d)
    }

    #[test]
    fn jitter_stays_in_range() {
        let img = toy_sample(1, 1.0).0;
        let mut rng = seeded_rng(4);
        assert_eq!(jitter_colors(&img, 0.0, &mut rng), img);
        let out = jitter_colors(&img, 1.0, &mut rng);
        assert_ne!(out, img);
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(train_depthnet(&[], &DepthTrainConfig::default()).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let data = vec![toy_sample(0, 2.0)];
        let cfg = DepthTrainConfig {
            steps: 3,
            lr: 0.0,
            ..Default::default()
        };
        let (dn, _) = train_depthnet(&data, &cfg).unwrap();
        assert_eq!(dn, DepthNet::seeded(0, 2.0));
    }

    #[test]
    fn constant_depth_is_learned() {
        let data: Vec<_> = (0..3).map(|s| toy_sample(s, 3.0)).collect();
        let cfg = DepthTrainConfig {
            steps: 60,
            ..Default::default()
        };
        let (dn, report) = train_depthnet(&data, &cfg).unwrap();
        assert!(report.final_loss < 1e-3 * 9.0, "{}", report.final_loss);
        let out = dn.forward(&toy_sample(9, 0.0).0).unwrap();
        let spread = out.depth.data.iter().fold(0.0f64, |m, d| m.max((d - 3.0).abs()));
        assert!(spread < 0.3, "{spread}");
    }
}
