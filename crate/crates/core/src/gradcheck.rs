//! Central finite-difference checks of analytic gradients.
//!
//! Every check here evaluates only forward functions to build the numeric
//! side, so it is independent of the backward code it verifies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::ImageBuffer;
use crate::losses::{
    loss_adv_generator, loss_content, loss_depth, loss_efficient, loss_rgb, loss_style, LossNets, LossWeights, StyleTarget,
    ViewReference,
};
use crate::nets::{Conv2d, ConvNet, DepthNet, Discriminator, FeatureExtractor, Layer, Tensor3};
use crate::render::{render, render_backward, BackwardScope};
use crate::scene::{Camera, GaussianCloud, GaussianPoint, Mat3, ParamGroup, Vec3};

/// Relative tolerance on analytic vs. numeric gradients.
pub const REL_TOL: f64 = 1e-2;
/// Absolute tolerance used when both values are close to zero.
pub const ABS_TOL: f64 = 1e-4;

/// One compared derivative.
#[derive(Debug, Clone)]
pub struct GradEntry {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradEntry {
    pub fn abs_err(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }

    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            self.abs_err() / scale
        }
    }

    pub fn passes(&self) -> bool {
        self.abs_err() < ABS_TOL || self.rel_err() < REL_TOL
    }
}

/// Results of one gradient-check suite.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub suite: String,
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn new(suite: impl Into<String>) -> Self {
        Self {
            suite: suite.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, analytic: f64, numeric: f64) {
        self.entries.push(GradEntry {
            name: name.into(),
            analytic,
            numeric,
        });
    }

    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(GradEntry::passes)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradEntry> {
        self.entries.iter().filter(|e| !e.passes())
    }

    /// Largest relative error among entries whose magnitude exceeds the
    /// absolute tolerance.
    pub fn worst_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.analytic.abs().max(e.numeric.abs()) >= ABS_TOL)
            .map(GradEntry::rel_err)
            .fold(0.0, f64::max)
    }

    pub fn summary(&self) -> String {
        let failed = self.failures().count();
        format!(
            "{}: {} derivatives, {} failed, worst rel err {:.2e}",
            self.suite,
            self.entries.len(),
            failed,
            self.worst_rel_err()
        )
    }
}

/// `(f(x+h) − f(x−h)) / 2h` for a scalar function of one perturbed value.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Dot product of a rendered image with fixed weights; the scalar loss used
/// by the renderer checks.
pub fn weighted_image_sum(img: &ImageBuffer, weights: &ImageBuffer) -> f64 {
    img.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
}

/// A random scene of `points` Gaussians in front of a 32×32 camera.
pub fn random_scene(points: usize, sh_degree: usize, seed: u64) -> (GaussianCloud, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = Camera::new(36.0, 34.0, 16.2, 15.7, 32, 32, Mat3::identity(), Vec3::zeros()).expect("valid camera");
    let mut cloud = GaussianCloud::new(sh_degree);
    cloud.background = [0.1, 0.05, 0.2];
    let sh_len = cloud.sh_len();
    for _ in 0..points {
        let z = rng.random_range(2.5..6.0);
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let sh = (0..sh_len)
            .map(|i| if i < 3 { rng.random_range(-1.0..1.5) } else { rng.random_range(-0.4..0.4) })
            .collect();
        cloud.points.push(GaussianPoint {
            position: [rng.random_range(-0.25..0.25) * z, rng.random_range(-0.25..0.25) * z, z],
            log_scale: std::array::from_fn(|_| rng.random_range(0.08f64..0.4).ln()),
            rotation: q,
            opacity_logit: rng.random_range(-1.5..2.5),
            sh,
        });
    }
    (cloud, cam)
}

/// Random per-pixel weights in `[-1, 1]`.
pub fn random_weights(width: usize, height: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBuffer::from_fn(width, height, |_, _| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
}

/// Checks `render_backward` for every parameter of every point against
/// central differences of `Σ weights · render(cloud)`.
pub fn check_renderer(cloud: &GaussianCloud, cam: &Camera, weights: &ImageBuffer, step: f64) -> GradReport {
    let analytic = render_backward(cloud, cam, weights, BackwardScope::All);
    let mut report = GradReport::new("renderer");
    let mut probe = cloud.clone();
    for i in 0..cloud.len() {
        for group in ParamGroup::ALL {
            let grads = analytic.group(group);
            let width = group.width(cloud.sh_len());
            for c in 0..width {
                let x0 = group.slice(&cloud.points[i])[c];
                let numeric = central_difference(
                    |x| {
                        group.slice_mut(&mut probe.points[i])[c] = x;
                        weighted_image_sum(&render(&probe, cam), weights)
                    },
                    x0,
                    step,
                );
                group.slice_mut(&mut probe.points[i])[c] = x0;
                report.push(format!("point{i}.{}[{c}]", group.name()), grads[i * width + c], numeric);
            }
        }
    }
    report
}

/// Renderer checks on `scenes` random scenes of 8 Gaussians (SH degree 2).
pub fn renderer_suite(scenes: usize, seed: u64) -> Vec<GradReport> {
    (0..scenes as u64)
        .map(|k| {
            let (cloud, cam) = random_scene(8, 2, seed + k);
            let mut report = check_renderer(&cloud, &cam, &random_weights(cam.width, cam.height, seed + 1000 + k), 1e-6);
            report.suite = format!("renderer scene {k}");
            report
        })
        .collect()
}

fn random_tensor(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Tensor3 {
    let mut t = Tensor3::zeros(shape.0, shape.1, shape.2);
    t.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    t
}

fn net_probe(net: &ConvNet, x: &Tensor3, weights: &Tensor3) -> f64 {
    let out = net.forward(x).expect("probe shapes are fixed");
    out.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
}

/// Checks input, weight and bias gradients of `Σ weights · net(x)` at
/// `samples` random coordinates per tensor.
pub fn check_net(name: &str, net: &ConvNet, x: &Tensor3, samples: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trace = net.forward_trace(x).expect("probe shapes are fixed");
    let weights = random_tensor(trace.output().shape(), &mut rng);
    let grads = net.backward(&trace, &[(net.layers.len(), &weights)], true).expect("trace matches net");
    let mut report = GradReport::new(name);
    for _ in 0..samples {
        let i = rng.random_range(0..x.data.len());
        let numeric = central_difference(
            |v| {
                let mut xp = x.clone();
                xp.data[i] = v;
                net_probe(net, &xp, &weights)
            },
            x.data[i],
            1e-6,
        );
        report.push(format!("input[{i}]"), grads.input.data[i], numeric);
    }
    for (li, layer) in net.layers.iter().enumerate() {
        let Layer::Conv(conv) = layer else { continue };
        let g = grads.layers[li].as_ref().expect("conv layers get gradients");
        for k in 0..samples {
            let bias = k % 4 == 3;
            let j = rng.random_range(0..if bias { conv.bias.len() } else { conv.weight.len() });
            let numeric = central_difference(
                |v| {
                    let mut n = net.clone();
                    if let Layer::Conv(c) = &mut n.layers[li] {
                        if bias {
                            c.bias[j] = v;
                        } else {
                            c.weight[j] = v;
                        }
                    }
                    net_probe(&n, x, &weights)
                },
                if bias { conv.bias[j] } else { conv.weight[j] },
                1e-6,
            );
            let analytic = if bias { g.bias[j] } else { g.weight[j] };
            report.push(format!("layer{li}.{}[{j}]", if bias { "bias" } else { "weight" }), analytic, numeric);
        }
    }
    report
}

/// One check per layer kind, each on a small random input.
pub fn layer_suite(seed: u64) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases: Vec<(&str, Layer, (usize, usize, usize))> = vec![
        ("conv 3x3 stride 1", Layer::Conv(Conv2d::he_uniform(2, 3, 3, 1, &mut rng)), (2, 6, 5)),
        ("conv 3x3 stride 2", Layer::Conv(Conv2d::he_uniform(2, 3, 3, 2, &mut rng)), (2, 7, 6)),
        ("conv 1x1", Layer::Conv(Conv2d::he_uniform(3, 2, 1, 1, &mut rng)), (3, 4, 4)),
        ("leaky relu", Layer::LeakyRelu, (2, 5, 5)),
        ("upsample", Layer::Upsample2x, (2, 3, 4)),
        ("sigmoid", Layer::Sigmoid, (2, 4, 4)),
        ("softplus", Layer::Softplus, (2, 4, 4)),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(k, (name, layer, shape))| {
            let x = random_tensor(shape, &mut rng);
            check_net(name, &ConvNet::new(vec![layer]), &x, 16, seed + k as u64)
        })
        .collect()
}

/// Checks an image gradient of `f` at `samples` random channel values.
pub fn check_image_gradient(
    name: &str,
    img: &ImageBuffer,
    grad: &ImageBuffer,
    f: impl Fn(&ImageBuffer) -> f64,
    samples: usize,
    seed: u64,
) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::new(name);
    for _ in 0..samples {
        let i = rng.random_range(0..img.data.len());
        let numeric = central_difference(
            |v| {
                let mut p = img.clone();
                p.data[i] = v;
                f(&p)
            },
            img.data[i],
            1e-6,
        );
        report.push(format!("value[{i}]"), grad.data[i], numeric);
    }
    report
}

fn random_image(width: usize, height: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
    ImageBuffer::from_fn(width, height, |_, _| std::array::from_fn(|_| rng.random_range(0.05..0.95)))
}

/// Image-gradient checks of every transfer loss and of the photometric
/// loss on random 64×64 images. The discriminator head is randomized so its
/// scores depend on the input.
pub fn loss_suite(seed: u64) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = random_image(64, 64, &mut rng);
    let other = random_image(64, 64, &mut rng);
    let pool = [random_image(64, 64, &mut rng), random_image(64, 64, &mut rng)];
    let extractor = FeatureExtractor::seeded(seed);
    let depth = DepthNet::seeded(seed + 1, 3.0);
    let mut disc = Discriminator::seeded(seed + 2);
    if let Some(Layer::Conv(head)) = disc.net.layers.iter_mut().rev().find(|l| matches!(l, Layer::Conv(_))) {
        *head = Conv2d::he_uniform(head.in_channels, 1, 1, 1, &mut rng);
    }
    let style = StyleTarget::from_pool(&extractor, &pool).expect("pool images are large enough");
    let nets = LossNets {
        extractor: &extractor,
        discriminator: &disc,
        depth: &depth,
    };
    let reference = ViewReference::new(&nets, &other).expect("reference image is large enough");
    let weights = LossWeights::default();
    let samples = 12;
    let mut out = Vec::new();
    let mut push = |name: &str, grad: ImageBuffer, f: &dyn Fn(&ImageBuffer) -> f64| {
        let k = out.len() as u64;
        out.push(check_image_gradient(name, &img, &grad, f, samples, seed + 10 + k));
    };
    push("rgb", loss_rgb(&img, &other).unwrap().1, &|x| loss_rgb(x, &other).unwrap().0);
    push("style", loss_style(&extractor, &img, &style).unwrap().1, &|x| loss_style(&extractor, x, &style).unwrap().0);
    push("content", loss_content(&extractor, &img, &other).unwrap().1, &|x| {
        loss_content(&extractor, x, &other).unwrap().0
    });
    push("depth", loss_depth(&depth, &img, &other).unwrap().1, &|x| loss_depth(&depth, x, &other).unwrap().0);
    push("adversarial", loss_adv_generator(&disc, &img).unwrap().1, &|x| loss_adv_generator(&disc, x).unwrap().0);
    push("efficient", loss_efficient(&img, &reference, &style, &nets, &weights).unwrap().grad, &|x| {
        loss_efficient(x, &reference, &style, &nets, &weights).unwrap().total
    });
    out
}

/// Every suite: renderer, layers, losses.
pub fn run_all(seed: u64) -> Vec<GradReport> {
    let mut all = renderer_suite(3, seed);
    all.extend(layer_suite(seed));
    all.extend(loss_suite(seed));
    all
}
