//! Photometric and appearance-transfer losses. Every loss returns its value
//! together with the gradient with respect to the generated image.
//!
//! Vector norms are RMS norms (`‖v‖₂ / √n`) so magnitudes do not depend on
//! resolution or channel count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::nets::{DepthNet, DepthOutput, Discriminator, FeatureExtractor, FeaturePyramid, NetOptimizer, Tensor3};

/// Lower clamp inside every logarithm of a discriminator probability.
pub const LOG_EPS: f64 = 1e-8;
/// Added to the feature variance before the square root.
pub const STD_EPS: f64 = 1e-8;

/// Squared error summed over channels, averaged over pixels.
pub fn loss_rgb(rendered: &ImageBuffer, target: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    rendered.check_same_size(target)?;
    let n = rendered.pixel_count() as f64;
    let mut grad = ImageBuffer::new(rendered.width, rendered.height);
    let mut loss = 0.0;
    for ((g, a), b) in grad.data.iter_mut().zip(&rendered.data).zip(&target.data) {
        let d = a - b;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// RMS norm of `a − b` and its gradient with respect to `a`. The gradient
/// at exactly zero difference is taken as zero.
pub fn rms_distance(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let value = (sq / n).sqrt();
    let grad = if value > 0.0 {
        a.iter().zip(b).map(|(x, y)| (x - y) / (n * value)).collect()
    } else {
        vec![0.0; a.len()]
    };
    (value, grad)
}

/// Per-channel spatial mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Moments {
    pub fn of(t: &Tensor3) -> Self {
        let p = t.plane() as f64;
        let (mut mean, mut std) = (Vec::with_capacity(t.channels), Vec::with_capacity(t.channels));
        for ch in t.data.chunks_exact(t.plane()) {
            let m = ch.iter().sum::<f64>() / p;
            let var = ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / p;
            mean.push(m);
            std.push((var + STD_EPS).sqrt());
        }
        Self { mean, std }
    }
}

/// Target feature statistics of a style pool: the mean over images of each
/// image's per-channel moments, one entry per extractor stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleTarget {
    pub stages: Vec<Moments>,
}

impl StyleTarget {
    pub fn from_pool(extractor: &FeatureExtractor, pool: &[ImageBuffer]) -> Result<Self> {
        let pyramids = pool.iter().map(|img| extractor.forward(img)).collect::<Result<Vec<_>>>()?;
        Self::from_pyramids(&pyramids)
    }

    pub fn from_pyramids(pyramids: &[FeaturePyramid]) -> Result<Self> {
        let Some(first) = pyramids.first() else {
            return Err(Error::InvalidInput("style pool is empty".into()));
        };
        let k = pyramids.len() as f64;
        let mut stages: Vec<Moments> = first
            .stages
            .iter()
            .map(|s| Moments {
                mean: vec![0.0; s.channels],
                std: vec![0.0; s.channels],
            })
            .collect();
        for pyr in pyramids {
            for (acc, stage) in stages.iter_mut().zip(&pyr.stages) {
                let m = Moments::of(stage);
                if m.mean.len() != acc.mean.len() {
                    return Err(Error::Shape("style pool pyramids disagree in channel count".into()));
                }
                for (a, v) in acc.mean.iter_mut().zip(&m.mean) {
                    *a += v / k;
                }
                for (a, v) in acc.std.iter_mut().zip(&m.std) {
                    *a += v / k;
                }
            }
        }
        Ok(Self { stages })
    }
}

/// Style loss on an already computed pyramid; returns per-stage feature
/// gradients.
fn style_on_pyramid(stages: &[&Tensor3], target: &StyleTarget) -> Result<(f64, Vec<Tensor3>)> {
    if stages.len() != target.stages.len() {
        return Err(Error::Shape(format!(
            "style target has {} stages, features have {}",
            target.stages.len(),
            stages.len()
        )));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(stages.len());
    for (feat, tgt) in stages.iter().zip(&target.stages) {
        if tgt.mean.len() != feat.channels {
            return Err(Error::Shape("style target channel count mismatch".into()));
        }
        let m = Moments::of(feat);
        let (lm, gm) = rms_distance(&m.mean, &tgt.mean);
        let (ls, gs) = rms_distance(&m.std, &tgt.std);
        loss += lm + ls;
        let p = feat.plane();
        let mut g = Tensor3::zeros(feat.channels, feat.height, feat.width);
        for c in 0..feat.channels {
            let src = &feat.data[c * p..(c + 1) * p];
            let dst = &mut g.data[c * p..(c + 1) * p];
            let a = gm[c] / p as f64;
            let b = gs[c] / (p as f64 * m.std[c]);
            for (d, v) in dst.iter_mut().zip(src) {
                *d = a + b * (v - m.mean[c]);
            }
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Σ over stages of RMS(μ − μ*) + RMS(σ − σ*).
pub fn loss_style(extractor: &FeatureExtractor, img: &ImageBuffer, target: &StyleTarget) -> Result<(f64, ImageBuffer)> {
    let trace = extractor.trace(img)?;
    let pyr = extractor.pyramid(&trace);
    let (loss, grads) = style_on_pyramid(&pyr.stages.iter().collect::<Vec<_>>(), target)?;
    let grad = extractor.backward_image(&trace, &grads.into_iter().map(Some).collect::<Vec<_>>())?;
    Ok((loss, grad))
}

fn content_on_features(deep: &Tensor3, reference: &Tensor3) -> Result<(f64, Tensor3)> {
    if deep.shape() != reference.shape() {
        return Err(Error::Shape(format!(
            "content features {:?} vs reference {:?}",
            deep.shape(),
            reference.shape()
        )));
    }
    let (v, g) = rms_distance(&deep.data, &reference.data);
    Ok((v, Tensor3 { data: g, ..deep.clone() }))
}

/// RMS distance between the deepest extractor features of `img` and the
/// cached features of the reference view.
pub fn loss_content_cached(extractor: &FeatureExtractor, img: &ImageBuffer, reference: &Tensor3) -> Result<(f64, ImageBuffer)> {
    let trace = extractor.trace(img)?;
    let deep = trace.activations[*extractor.net.taps.last().unwrap()].clone();
    let (v, g) = content_on_features(&deep, reference)?;
    let mut seeds = vec![None; extractor.net.taps.len()];
    *seeds.last_mut().unwrap() = Some(g);
    Ok((v, extractor.backward_image(&trace, &seeds)?))
}

pub fn loss_content(extractor: &FeatureExtractor, img: &ImageBuffer, reference: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    img.check_same_size(reference)?;
    let r = extractor.forward(reference)?;
    loss_content_cached(extractor, img, r.deepest())
}

/// RMS(depth difference) plus RMS of each of the four encoder-tap
/// differences; the reference branch is constant.
pub fn loss_depth_cached(dn: &DepthNet, img: &ImageBuffer, reference: &DepthOutput) -> Result<(f64, ImageBuffer)> {
    let trace = dn.trace(img)?;
    let out = dn.output(&trace);
    if out.depth.shape() != reference.depth.shape() || out.taps.len() != reference.taps.len() {
        return Err(Error::Shape("depth reference does not match the image".into()));
    }
    let (mut loss, g) = rms_distance(&out.depth.data, &reference.depth.data);
    let d_depth = Tensor3 { data: g, ..out.depth.clone() };
    let mut taps = Vec::with_capacity(out.taps.len());
    for (a, b) in out.taps.iter().zip(&reference.taps) {
        let (v, g) = rms_distance(&a.data, &b.data);
        loss += v;
        taps.push(Some(Tensor3 { data: g, ..a.clone() }));
    }
    let grads = dn.backward(&trace, Some(&d_depth), &taps, false)?;
    Ok((loss, grads.input.to_image()?))
}

pub fn loss_depth(dn: &DepthNet, img: &ImageBuffer, reference: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    img.check_same_size(reference)?;
    let r = dn.forward(reference)?;
    loss_depth_cached(dn, img, &r)
}

/// Non-saturating generator loss `−mean log max(D(img), ε)`.
pub fn loss_adv_generator(d: &Discriminator, img: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    let trace = d.trace(img)?;
    let s = trace.output();
    let n = s.data.len() as f64;
    let loss = -s.data.iter().map(|&v| v.max(LOG_EPS).ln()).sum::<f64>() / n;
    let d_scores = Tensor3 {
        data: s.data.iter().map(|&v| if v > LOG_EPS { -1.0 / (n * v) } else { 0.0 }).collect(),
        ..s.clone()
    };
    let grads = d.backward(&trace, &d_scores, false)?;
    Ok((loss, grads.input.to_image()?))
}

/// Mean over images of the mean patch score `−log D` (real) or
/// `−log(1 − D)` (fake), each clamped at `ε`.
fn disc_term(d: &Discriminator, images: &[&ImageBuffer], real: bool) -> Result<f64> {
    let mut total = 0.0;
    for img in images {
        let s = d.forward(img)?;
        let sum: f64 = s.data.iter().map(|&v| -(if real { v } else { 1.0 - v }).max(LOG_EPS).ln()).sum();
        total += sum / s.data.len() as f64;
    }
    Ok(total / images.len() as f64)
}

/// Discriminator loss `−E log D(r) − E log(1 − D(g))`.
pub fn disc_loss(d: &Discriminator, reals: &[&ImageBuffer], fakes: &[&ImageBuffer]) -> Result<f64> {
    if reals.is_empty() || fakes.is_empty() {
        return Err(Error::InvalidInput("discriminator needs real and generated images".into()));
    }
    Ok(disc_term(d, reals, true)? + disc_term(d, fakes, false)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscStep {
    pub loss_before: f64,
    pub loss_after: f64,
}

/// One Adam step on the discriminator. Generated images are plain inputs,
/// so nothing upstream of them is touched.
pub fn loss_disc_step(
    d: &mut Discriminator,
    opt: &mut NetOptimizer,
    reals: &[&ImageBuffer],
    fakes: &[&ImageBuffer],
) -> Result<DiscStep> {
    if reals.is_empty() || fakes.is_empty() {
        return Err(Error::InvalidInput("discriminator needs real and generated images".into()));
    }
    let mut loss_before = 0.0;
    let mut total: Option<crate::nets::NetGradients> = None;
    for (group, real) in [(reals, true), (fakes, false)] {
        let k = group.len() as f64;
        for img in group.iter() {
            let trace = d.trace(img)?;
            let s = trace.output();
            let n = s.data.len() as f64;
            let mut d_scores = s.clone();
            for (g, &v) in d_scores.data.iter_mut().zip(&s.data) {
                // p is the probability of the correct label.
                let (p, sign) = if real { (v, -1.0) } else { (1.0 - v, 1.0) };
                loss_before -= p.max(LOG_EPS).ln() / (n * k);
                *g = if p > LOG_EPS { sign / (n * k * p) } else { 0.0 };
            }
            let g = d.backward(&trace, &d_scores, true)?;
            match &mut total {
                None => total = Some(g),
                Some(t) => {
                    for (a, b) in t.layers.iter_mut().zip(&g.layers) {
                        if let (Some(a), Some(b)) = (a, b) {
                            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
                            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
        }
    }
    opt.step(&mut d.net, &total.expect("nonempty pools"))?;
    Ok(DiscStep {
        loss_before,
        loss_after: disc_loss(d, reals, fakes)?,
    })
}

/// Fraction of patch scores on the correct side of 0.5.
pub fn patch_accuracy(d: &Discriminator, reals: &[&ImageBuffer], fakes: &[&ImageBuffer]) -> Result<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for (group, real) in [(reals, true), (fakes, false)] {
        for img in group.iter() {
            let s = d.forward(img)?;
            right += s.data.iter().filter(|&&v| (v > 0.5) == real).count();
            total += s.data.len();
        }
    }
    Ok(right as f64 / total.max(1) as f64)
}

/// Term weights and switches of the transfer loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub style: f64,
    pub adv: f64,
    pub content: f64,
    pub depth: f64,
    pub use_style: bool,
    pub use_adv: bool,
    pub use_content: bool,
    pub use_depth: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            style: 1.0,
            adv: 1.0,
            content: 1.0,
            depth: 1.0,
            use_style: true,
            use_adv: true,
            use_content: true,
            use_depth: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("style", self.style), ("adv", self.adv), ("content", self.content), ("depth", self.depth)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidInput(format!("loss weight {name} must be finite and nonnegative, got {w}")));
            }
        }
        Ok(())
    }

    /// Effective multipliers with disabled terms set to zero.
    pub fn effective(&self) -> [f64; 4] {
        let on = |flag: bool, w: f64| if flag { w } else { 0.0 };
        [
            on(self.use_style, self.style),
            on(self.use_adv, self.adv),
            on(self.use_content, self.content),
            on(self.use_depth, self.depth),
        ]
    }
}

/// Unweighted loss terms; terms that were not evaluated are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rgb: f64,
    pub style: f64,
    pub adv: f64,
    pub content: f64,
    pub depth: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 5] = ["rgb", "style", "adv", "content", "depth"];

    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "rgb" => self.rgb,
            "style" => self.style,
            "adv" => self.adv,
            "content" => self.content,
            "depth" => self.depth,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub terms: LossTerms,
    pub grad: ImageBuffer,
}

/// The frozen networks used by the transfer loss.
#[derive(Debug, Clone, Copy)]
pub struct LossNets<'a> {
    pub extractor: &'a FeatureExtractor,
    pub discriminator: &'a Discriminator,
    pub depth: &'a DepthNet,
}

/// Cached reference quantities of one training view's original render.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewReference {
    pub content: Tensor3,
    pub depth: DepthOutput,
}

impl ViewReference {
    pub fn new(nets: &LossNets, original: &ImageBuffer) -> Result<Self> {
        Ok(Self {
            content: nets.extractor.forward(original)?.deepest().clone(),
            depth: nets.depth.forward(original)?,
        })
    }
}

/// Weighted sum of the style, adversarial, content and depth terms. The
/// extractor runs once for both style and content.
pub fn loss_efficient(
    img: &ImageBuffer,
    reference: &ViewReference,
    style: &StyleTarget,
    nets: &LossNets,
    weights: &LossWeights,
) -> Result<LossReport> {
    weights.validate()?;
    let [ws, wa, wc, wd] = weights.effective();
    let mut terms = LossTerms::default();
    let mut grad = ImageBuffer::new(img.width, img.height);

    if ws > 0.0 || wc > 0.0 {
        let ex = nets.extractor;
        let trace = ex.trace(img)?;
        let stages: Vec<&Tensor3> = ex.net.taps.iter().map(|&i| &trace.activations[i]).collect();
        let mut seeds: Vec<Option<Tensor3>> = vec![None; stages.len()];
        if ws > 0.0 {
            let (v, g) = style_on_pyramid(&stages, style)?;
            terms.style = v;
            for (s, mut g) in seeds.iter_mut().zip(g) {
                g.data.iter_mut().for_each(|x| *x *= ws);
                *s = Some(g);
            }
        }
        if wc > 0.0 {
            let (v, mut g) = content_on_features(stages.last().unwrap(), &reference.content)?;
            terms.content = v;
            g.data.iter_mut().for_each(|x| *x *= wc);
            match seeds.last_mut().unwrap() {
                Some(s) => s.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        grad.add_scaled(&ex.backward_image(&trace, &seeds)?, 1.0);
    }
    if wa > 0.0 {
        let (v, g) = loss_adv_generator(nets.discriminator, img)?;
        terms.adv = v;
        grad.add_scaled(&g, wa);
    }
    if wd > 0.0 {
        let (v, g) = loss_depth_cached(nets.depth, img, &reference.depth)?;
        terms.depth = v;
        grad.add_scaled(&g, wd);
    }
    let total = ws * terms.style + wa * terms.adv + wc * terms.content + wd * terms.depth;
    Ok(LossReport { total, terms, grad })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_offset_example() {
        let a = ImageBuffer::filled(4, 3, [0.5, 0.2, 0.7]);
        let b = a.map_pixels(|p| [p[0] + 0.1, p[1] + 0.1, p[2] + 0.1]);
        let (v, _) = loss_rgb(&b, &a).unwrap();
        assert!((v - 0.03).abs() < 1e-12);
        let (v, g) = loss_rgb(&a, &a).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data.iter().all(|&x| x == 0.0));
        assert!(loss_rgb(&a, &ImageBuffer::new(3, 3)).is_err());
    }

    #[test]
    fn rms_distance_at_zero_has_zero_gradient() {
        let (v, g) = rms_distance(&[1.0, 2.0], &[1.0, 2.0]);
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
        let (v, _) = rms_distance(&[3.0, 0.0], &[0.0, 4.0]);
        assert!((v - 12.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_discriminator_values() {
        let d = Discriminator::seeded(0);
        let img = ImageBuffer::filled(64, 64, [0.3, 0.3, 0.3]);
        let (v, _) = loss_adv_generator(&d, &img).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-7);
        let l = disc_loss(&d, &[&img], &[&img]).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-7);
    }

    #[test]
    fn empty_style_pool_is_rejected() {
        assert!(StyleTarget::from_pool(&FeatureExtractor::seeded(0), &[]).is_err());
    }

    #[test]
    fn negative_weight_is_rejected() {
        let w = LossWeights {
            adv: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
