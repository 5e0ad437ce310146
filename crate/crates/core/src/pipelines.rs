//! The two optimization phases: photometric reconstruction of a cloud from
//! posed views, and appearance-only style transfer.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ReconstructConfig, TransferConfig};
use crate::data::{save_checkpoint, structure_checksum, Provenance, View};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::losses::{loss_disc_step, loss_efficient, loss_rgb, LossNets, LossTerms, LossWeights, StyleTarget, ViewReference};
use crate::nets::{DepthNet, Discriminator, FeatureExtractor, NetOptimizer};
use crate::optim::{adam_step, clip_global_norm, AdamState};
use crate::render::{render, render_backward, BackwardScope, RenderGradients};
use crate::scene::{logit, Camera, GaussianCloud, GaussianPoint, ParamGroup};

/// Isotropic gray Gaussians at `positions`, each sized by the mean distance
/// to its three nearest neighbours.
pub fn init_cloud(positions: &[[f64; 3]], sh_degree: usize) -> GaussianCloud {
    let mut cloud = GaussianCloud::new(sh_degree);
    for (i, p) in positions.iter().enumerate() {
        let mut d: Vec<f64> = positions
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
            .collect();
        d.sort_by(f64::total_cmp);
        let k = d.len().min(3);
        let scale = if k == 0 { 0.1 } else { (d[..k].iter().sum::<f64>() / k as f64).max(1e-4) };
        cloud.points.push(GaussianPoint::isotropic(*p, scale, 0.5, [0.5; 3], sh_degree));
    }
    cloud
}

/// `count` points scattered through the union of the camera frusta: each is
/// placed on the ray through a random pixel of a random camera at a depth
/// drawn uniformly from `depth_range`.
pub fn random_init(cameras: &[Camera], count: usize, depth_range: (f64, f64), sh_degree: usize, seed: u64) -> Result<GaussianCloud> {
    if cameras.is_empty() || count == 0 {
        return Err(Error::InvalidInput("random init needs cameras and a positive point count".into()));
    }
    let (near, far) = depth_range;
    if !(near > 0.0 && far > near) {
        return Err(Error::InvalidInput(format!("invalid depth range ({near}, {far})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<[f64; 3]> = (0..count)
        .map(|_| {
            let cam = &cameras[rng.random_range(0..cameras.len())];
            let u = rng.random_range(0.0..cam.width as f64);
            let v = rng.random_range(0.0..cam.height as f64);
            let z = rng.random_range(near..far);
            let p = crate::scene::Vec3::new((u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z);
            (cam.rotation * p + cam.translation).into()
        })
        .collect();
    Ok(init_cloud(&positions, sh_degree))
}

/// 1.1 × the largest distance of a camera centre from their mean, with a
/// floor of 1 for single-camera scenes.
pub fn scene_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let n = cameras.len() as f64;
    let mean = cameras.iter().map(|c| c.translation).sum::<crate::scene::Vec3>() / n;
    let r = cameras.iter().map(|c| (c.translation - mean).norm()).fold(0.0, f64::max);
    (1.1 * r).max(1.0)
}

fn gather(cloud: &GaussianCloud, g: ParamGroup) -> Vec<f64> {
    cloud.points.iter().flat_map(|p| g.slice(p).iter().copied()).collect()
}

fn scatter(cloud: &mut GaussianCloud, g: ParamGroup, values: &[f64]) {
    let w = g.width(cloud.sh_len());
    for (p, chunk) in cloud.points.iter_mut().zip(values.chunks_exact(w)) {
        g.slice_mut(p).copy_from_slice(chunk);
    }
}

/// Yields training indices in freshly shuffled epochs.
struct ViewSampler {
    rng: ChaCha8Rng,
    count: usize,
    order: Vec<usize>,
}

impl ViewSampler {
    fn new(count: usize, rng: ChaCha8Rng) -> Self {
        Self {
            rng,
            count,
            order: Vec::new(),
        }
    }

    fn next(&mut self) -> usize {
        if self.order.is_empty() {
            self.order = (0..self.count).rev().collect();
            self.order.shuffle(&mut self.rng);
        }
        self.order.pop().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub cloud: GaussianCloud,
    /// Photometric loss of each iteration's view, before its update.
    pub losses: Vec<f64>,
    pub pruned: usize,
    pub cloned: usize,
}

/// Fits every parameter group of `init` to the training views with Adam on
/// the photometric loss, one view per iteration.
pub fn reconstruct(views: &[View], init: GaussianCloud, config: &ReconstructConfig, seed: u64) -> Result<Reconstruction> {
    if views.is_empty() {
        return Err(Error::InvalidInput("reconstruction needs at least one view".into()));
    }
    if init.is_empty() {
        return Err(Error::InvalidInput("initial cloud is empty".into()));
    }
    init.validate()?;
    let mut cloud = init;
    let extent = scene_extent(&views.iter().map(|v| v.camera.clone()).collect::<Vec<_>>());
    let base_lr = |g: ParamGroup| match g {
        ParamGroup::Position => config.position_lr * extent,
        ParamGroup::Scale => config.scale_lr,
        ParamGroup::Rotation => config.rotation_lr,
        ParamGroup::Opacity => config.opacity_lr,
        ParamGroup::Sh => config.sh_lr,
    };
    let mut states: Vec<AdamState> = ParamGroup::ALL
        .iter()
        .map(|&g| AdamState::new(cloud.len() * g.width(cloud.sh_len())))
        .collect();
    let mut sampler = ViewSampler::new(views.len(), ChaCha8Rng::seed_from_u64(seed));
    let mut grad_accum = vec![0.0; cloud.len()];
    let mut grad_count = 0usize;
    let mut losses = Vec::with_capacity(config.iterations);
    let (mut pruned, mut cloned) = (0, 0);
    for it in 0..config.iterations {
        let view = &views[sampler.next()];
        let img = render(&cloud, &view.camera);
        let (loss, d_img) = loss_rgb(&img, &view.image)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("reconstruction loss became {loss} at iteration {it}")));
        }
        losses.push(loss);
        let grads = render_backward(&cloud, &view.camera, &d_img, BackwardScope::All);
        if !grads.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at iteration {it}")));
        }
        let mut flat: Vec<Vec<f64>> = ParamGroup::ALL.iter().map(|&g| grads.group(g)).collect();
        {
            let mut views_mut: Vec<&mut [f64]> = flat.iter_mut().map(Vec::as_mut_slice).collect();
            clip_global_norm(&mut views_mut, config.grad_clip);
        }
        for (a, g) in grad_accum.iter_mut().zip(&grads.position) {
            *a += (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        }
        grad_count += 1;
        let progress = it as f64 / (config.iterations.max(2) - 1) as f64;
        for (k, &g) in ParamGroup::ALL.iter().enumerate() {
            let mut lr = base_lr(g);
            if g == ParamGroup::Position {
                lr *= config.position_lr_final_ratio.powf(progress);
            }
            let mut values = gather(&cloud, g);
            adam_step(&mut values, &flat[k], &mut states[k], lr)?;
            scatter(&mut cloud, g, &values);
        }

        let step = it + 1;
        if config.densify_enabled && config.densify_interval > 0 && step % config.densify_interval == 0 && step < config.iterations {
            let picks: Vec<usize> = (0..cloud.len())
                .filter(|&i| grad_accum[i] / grad_count as f64 > config.densify_grad_threshold)
                .collect();
            for &i in &picks {
                let mut p = cloud.points[i].clone();
                // Halve both copies' opacity so the pair renders like the original.
                let alpha = 1.0 - (1.0 - p.opacity()).sqrt();
                p.opacity_logit = logit(alpha);
                cloud.points[i].opacity_logit = p.opacity_logit;
                cloud.points.push(p);
            }
            for (k, &g) in ParamGroup::ALL.iter().enumerate() {
                states[k].extend_zeros(picks.len() * g.width(cloud.sh_len()));
            }
            cloned += picks.len();
            grad_accum = vec![0.0; cloud.len()];
            grad_count = 0;
        }
        if config.prune_interval > 0 && step % config.prune_interval == 0 {
            let keep: Vec<bool> = cloud.points.iter().map(|p| p.opacity() >= config.prune_opacity_threshold).collect();
            let removed = keep.iter().filter(|&&k| !k).count();
            if removed > 0 && removed < cloud.len() {
                for (k, &g) in ParamGroup::ALL.iter().enumerate() {
                    states[k].retain_blocks(&keep, g.width(cloud.sh_len()));
                }
                let mut flags = keep.iter();
                cloud.points.retain(|_| *flags.next().unwrap());
                let mut flags = keep.iter();
                grad_accum.retain(|_| *flags.next().unwrap());
                pruned += removed;
            }
        }
    }
    cloud.validate()?;
    Ok(Reconstruction {
        cloud,
        losses,
        pruned,
        cloned,
    })
}

/// Everything transfer reads but never modifies.
#[derive(Debug, Clone, Copy)]
pub struct TransferInputs<'a> {
    pub cloud: &'a GaussianCloud,
    /// Unpaired target-style images.
    pub real_pool: &'a [ImageBuffer],
    /// Training poses; their renders of `cloud` are the structure references.
    pub cameras: &'a [Camera],
    pub extractor: &'a FeatureExtractor,
    pub depth_net: &'a DepthNet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub total: f64,
    pub terms: LossTerms,
    /// Discriminator loss after its step; `None` when the adversarial term
    /// is disabled and the discriminator is not trained.
    pub disc_loss: Option<f64>,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TransferRun {
    pub initial: GaussianCloud,
    pub stylized: GaussianCloud,
    pub history: Vec<HistoryRow>,
    pub discriminator: Discriminator,
    /// Caching of references and style statistics.
    pub setup_ms: f64,
    pub optimize_ms: f64,
}

impl TransferRun {
    /// CSV with one row per iteration: total, each transfer term, the
    /// discriminator loss, and wall-clock ms when it was recorded.
    pub fn history_csv(&self) -> String {
        let wall = self.history.first().is_some_and(|r| r.wall_ms.is_some());
        let mut out = String::from("iteration,total,style,adv,content,depth,disc");
        out.push_str(if wall { ",wall_ms\n" } else { "\n" });
        for r in &self.history {
            let t = &r.terms;
            let disc = r.disc_loss.map(|d| d.to_string()).unwrap_or_default();
            let _ = write!(out, "{},{},{},{},{},{},{}", r.iteration, r.total, t.style, t.adv, t.content, t.depth, disc);
            if let Some(ms) = r.wall_ms.filter(|_| wall) {
                let _ = write!(out, ",{ms:.3}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_history(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.history_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Appearance-only optimization of `inputs.cloud` toward the style of the
/// real pool. Structure parameters are never written.
pub fn transfer(
    inputs: &TransferInputs,
    mut discriminator: Discriminator,
    config: &TransferConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<TransferRun> {
    if inputs.real_pool.is_empty() {
        return Err(Error::InvalidInput("transfer needs a nonempty real image pool".into()));
    }
    if inputs.cameras.is_empty() {
        return Err(Error::InvalidInput("transfer needs at least one training camera".into()));
    }
    config.weights.validate()?;
    inputs.cloud.validate()?;
    let started = Instant::now();
    let style = StyleTarget::from_pool(inputs.extractor, inputs.real_pool)?;
    let mut stylized = inputs.cloud.clone();
    let checksum = structure_checksum(&stylized);
    let adv_on = config.weights.effective()[1] > 0.0;

    // The structure is frozen, so every reference render is fixed.
    let references: Vec<ViewReference> = {
        let nets = LossNets {
            extractor: inputs.extractor,
            discriminator: &discriminator,
            depth: inputs.depth_net,
        };
        inputs
            .cameras
            .iter()
            .map(|cam| ViewReference::new(&nets, &render(inputs.cloud, cam)))
            .collect::<Result<_>>()?
    };
    let setup_ms = started.elapsed().as_secs_f64() * 1e3;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampler = ViewSampler::new(inputs.cameras.len(), ChaCha8Rng::seed_from_u64(rng.random()));
    let mut sh_state = AdamState::new(stylized.len() * stylized.sh_len());
    let mut disc_opt = NetOptimizer::new(&discriminator.net, config.disc_lr);
    let mut history = Vec::with_capacity(config.iterations);
    let loop_start = Instant::now();
    for it in 0..config.iterations {
        let v = sampler.next();
        let cam = &inputs.cameras[v];
        let generated = render(&stylized, cam);
        let report = {
            let nets = LossNets {
                extractor: inputs.extractor,
                discriminator: &discriminator,
                depth: inputs.depth_net,
            };
            loss_efficient(&generated, &references[v], &style, &nets, &config.weights)?
        };
        if !report.total.is_finite() || !report.grad.is_finite() {
            return Err(Error::Numeric(format!("transfer loss became non-finite at iteration {it}")));
        }
        let grads: RenderGradients = render_backward(&stylized, cam, &report.grad, BackwardScope::Appearance);
        let mut g = grads.sh;
        clip_global_norm(&mut [g.as_mut_slice()], config.grad_clip);
        let mut values = gather(&stylized, ParamGroup::Sh);
        let progress = it as f64 / (config.iterations.max(2) - 1) as f64;
        let lr = config.appearance_lr * config.appearance_lr_final_ratio.powf(progress);
        adam_step(&mut values, &g, &mut sh_state, lr)?;
        scatter(&mut stylized, ParamGroup::Sh, &values);

        let disc_loss = if adv_on {
            let real = &inputs.real_pool[rng.random_range(0..inputs.real_pool.len())];
            Some(loss_disc_step(&mut discriminator, &mut disc_opt, &[real], &[&generated])?.loss_after)
        } else {
            None
        };
        history.push(HistoryRow {
            iteration: it,
            total: report.total,
            terms: report.terms,
            disc_loss,
            wall_ms: config.record_wall_clock.then(|| loop_start.elapsed().as_secs_f64() * 1e3),
        });
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_interval > 0 && (it + 1) % config.checkpoint_interval == 0 {
                let prov = Provenance {
                    phase: "transfer".into(),
                    iteration: (it + 1) as u64,
                    seed,
                    config_hash: crate::data::sha256_hex(&serde_json::to_vec(config).expect("config serializes")),
                };
                save_checkpoint(&stylized, &prov, &dir.join(format!("transfer_{:06}.ssgc", it + 1)))?;
            }
        }
    }
    if structure_checksum(&stylized) != checksum {
        return Err(Error::Numeric("structure parameters changed during transfer".into()));
    }
    Ok(TransferRun {
        initial: inputs.cloud.clone(),
        stylized,
        history,
        discriminator,
        setup_ms,
        optimize_ms: loop_start.elapsed().as_secs_f64() * 1e3,
    })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: &'static str,
    pub weights: LossWeights,
    pub run: TransferRun,
}

/// The full transfer loss followed by the three single-term ablations
/// (global style, local adversarial, structure consistency). Each run
/// starts from the same discriminator seed.
pub fn ablation_matrix(inputs: &TransferInputs, config: &TransferConfig, seed: u64, disc_seed: u64) -> Result<Vec<AblationRow>> {
    let base = config.weights;
    let variants = [
        ("full", base),
        (
            "w/o style",
            LossWeights {
                use_style: false,
                ..base
            },
        ),
        (
            "w/o adversarial",
            LossWeights {
                use_adv: false,
                ..base
            },
        ),
        (
            "w/o structure consistency",
            LossWeights {
                use_content: false,
                use_depth: false,
                ..base
            },
        ),
    ];
    variants
        .into_iter()
        .map(|(name, weights)| {
            let cfg = TransferConfig {
                weights,
                ..config.clone()
            };
            let run = transfer(inputs, Discriminator::seeded(disc_seed), &cfg, seed, None)?;
            Ok(AblationRow { name, weights, run })
        })
        .collect()
}
