//! End-to-end acceptance run. Criteria execute in order and share the
//! reconstructed tube scene; each prints one PASS/FAIL line. Pass criterion
//! numbers as arguments to run a subset.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylesplat::config::{ReconstructConfig, TransferConfig};
use stylesplat::data::{
    encode_checkpoint, encode_depth, generate_synthetic, read_checkpoint, read_depth, recolor_pool, seed_cloud,
    structure_bytes, structure_checksum, ColorMap, Provenance, RecolorSet, SyntheticScene, SyntheticSpec,
};
use stylesplat::gradcheck;
use stylesplat::image::{DepthBuffer, ImageBuffer};
use stylesplat::losses::{loss_adv_generator, loss_disc_step, patch_accuracy, LossWeights};
use stylesplat::metrics::{feature_distance, psnr, ssim};
use stylesplat::nets::{read_net, train_depthnet, write_net, DepthNet, DepthTrainConfig, Discriminator, FeatureExtractor, NetOptimizer};
use stylesplat::pipelines::{ablation_matrix, reconstruct, transfer, TransferInputs, TransferRun};
use stylesplat::render::{render, render_depth};
use stylesplat::scene::{Camera, GaussianCloud};

const SEED: u64 = 0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// State shared between criteria, built on first use.
#[derive(Default)]
struct Shared {
    /// Secondary claims checked along the way, reported after the criteria.
    checks: Vec<(String, bool)>,
    scene: Option<SyntheticScene>,
    theta: Option<GaussianCloud>,
    oracle: Option<Oracle>,
    recolor_run: Option<TransferRun>,
}

/// The recolor-oracle setup on top of the reconstructed cloud.
struct Oracle {
    cameras: Vec<Camera>,
    test_cameras: Vec<Camera>,
    set: RecolorSet,
    extractor: FeatureExtractor,
    depth_net: DepthNet,
}

impl Oracle {
    fn inputs<'a>(&'a self, theta: &'a GaussianCloud) -> TransferInputs<'a> {
        TransferInputs {
            cloud: theta,
            real_pool: &self.set.pool,
            cameras: &self.cameras,
            extractor: &self.extractor,
            depth_net: &self.depth_net,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn renders(cloud: &GaussianCloud, cams: &[Camera]) -> Vec<ImageBuffer> {
    cams.iter().map(|c| render(cloud, c)).collect()
}

fn transfer_config() -> TransferConfig {
    TransferConfig { record_wall_clock: false, ..TransferConfig::default() }
}

impl Shared {
    fn scene(&mut self) -> &SyntheticScene {
        self.scene.get_or_insert_with(|| generate_synthetic(&SyntheticSpec::tube()).expect("tube spec is valid"))
    }

    fn theta(&mut self) -> &GaussianCloud {
        if self.theta.is_none() {
            let scene = self.scene().clone();
            let init = seed_cloud(&scene, 0.05, SEED);
            let rec = reconstruct(&scene.train, init, &ReconstructConfig::default(), SEED).expect("reconstruction runs");
            self.theta = Some(rec.cloud);
        }
        self.theta.as_ref().unwrap()
    }

    fn oracle(&mut self) -> &Oracle {
        if self.oracle.is_none() {
            let theta = self.theta().clone();
            let scene = self.scene();
            let cameras: Vec<Camera> = scene.train.iter().map(|v| v.camera.clone()).collect();
            let test_cameras: Vec<Camera> = scene.test.iter().map(|v| v.camera.clone()).collect();
            let train_renders = renders(&theta, &cameras);
            let set = recolor_pool(&train_renders, &renders(&theta, &test_cameras), &ColorMap::COOL).expect("sources exist");
            let depth_data: Vec<(ImageBuffer, DepthBuffer)> =
                train_renders.into_iter().zip(cameras.iter().map(|c| render_depth(&theta, c))).collect();
            let (depth_net, _) = train_depthnet(&depth_data, &DepthTrainConfig::default()).expect("depth training runs");
            self.oracle = Some(Oracle {
                cameras,
                test_cameras,
                set,
                extractor: FeatureExtractor::seeded(SEED),
                depth_net,
            });
        }
        self.oracle.as_ref().unwrap()
    }

    fn recolor_run(&mut self) -> &TransferRun {
        if self.recolor_run.is_none() {
            self.oracle();
            let (theta, oracle) = (self.theta.as_ref().unwrap(), self.oracle.as_ref().unwrap());
            let run = transfer(&oracle.inputs(theta), Discriminator::seeded(SEED + 1), &transfer_config(), SEED, None)
                .expect("transfer runs");
            self.recolor_run = Some(run);
        }
        self.recolor_run.as_ref().unwrap()
    }
}

fn rasterizer_oracle(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let (cloud, cam) = gradcheck::random_scene(rng.random_range(1..=64), 2, 5000 + k);
        worst = worst.max(render(&cloud, &cam).max_abs_diff(&common::brute_force_render(&cloud, &cam)));
    }
    outcome(worst < 1e-5, format!("50 scenes, max abs diff {worst:.2e}"))
}

fn gradient_correctness(_: &mut Shared) -> Outcome {
    let reports = gradcheck::run_all(SEED);
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.summary()).collect();
    let worst = reports.iter().map(|r| r.worst_rel_err()).fold(0.0, f64::max);
    let count: usize = reports.iter().map(|r| r.entries.len()).sum();
    if failed.is_empty() {
        outcome(true, format!("{} suites, {count} derivatives, worst rel err {worst:.2e}", reports.len()))
    } else {
        outcome(false, failed.join("; "))
    }
}

fn reconstruction(shared: &mut Shared) -> Outcome {
    let theta = shared.theta().clone();
    let scene = shared.scene();
    let p: Vec<f64> = scene.test.iter().map(|v| psnr(&render(&theta, &v.camera), &v.image).unwrap()).collect();
    let budget = ReconstructConfig::default().iterations;
    outcome(
        mean(&p) >= 30.0,
        format!("held-out PSNR mean {:.2} dB (per view {}) after {budget} iterations", mean(&p), fmt_list(&p)),
    )
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(", ")
}

fn recolor_transfer(shared: &mut Shared) -> Outcome {
    let run = shared.recolor_run().clone();
    let oracle = shared.oracle.as_ref().unwrap();
    let after = renders(&run.stylized, &oracle.test_cameras);
    let before = renders(&run.initial, &oracle.test_cameras);
    let p: Vec<f64> = after.iter().zip(&oracle.set.held_out).map(|(a, b)| psnr(a, b).unwrap()).collect();
    let s: Vec<f64> = after.iter().zip(&oracle.set.held_out).map(|(a, b)| ssim(a, b).unwrap()).collect();
    let fd_after = feature_distance(&oracle.extractor, &after, &oracle.set.pool).unwrap();
    let fd_before = feature_distance(&oracle.extractor, &before, &oracle.set.pool).unwrap();
    let pass = mean(&p) >= 25.0 && mean(&s) >= 0.90 && fd_after < 0.5 * fd_before;
    outcome(
        pass,
        format!(
            "PSNR mean {:.2} dB ({}), SSIM mean {:.4} ({}), feature distance {fd_after:.2e} vs {fd_before:.2e} before",
            mean(&p),
            fmt_list(&p),
            mean(&s),
            s.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn structure_preservation(shared: &mut Shared) -> Outcome {
    let run = shared.recolor_run().clone();
    let bytes_equal = structure_bytes(&run.initial) == structure_bytes(&run.stylized);
    let checksum_equal = structure_checksum(&run.initial) == structure_checksum(&run.stylized);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 7);
    let mut depth_equal = true;
    for _ in 0..10 {
        let eye = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..3.0)];
        let target = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 6.0];
        let cam = Camera::look_at(eye, target, [0.0, 1.0, 0.0], rng.random_range(50.0..80.0), 96, 80).unwrap();
        depth_equal &= render_depth(&run.initial, &cam).bit_identical(&render_depth(&run.stylized, &cam));
    }
    let sh_changed = run.initial.points.iter().zip(&run.stylized.points).any(|(a, b)| a.sh != b.sh);
    outcome(
        bytes_equal && checksum_equal && depth_equal,
        format!("structure bytes equal {bytes_equal}, checksum equal {checksum_equal}, depth bit-identical on 10 cameras {depth_equal}, SH changed {sh_changed}"),
    )
}

fn consistency_fixed_point(shared: &mut Shared) -> Outcome {
    shared.oracle();
    let (theta, oracle) = (shared.theta.as_ref().unwrap(), shared.oracle.as_ref().unwrap());
    let cfg = TransferConfig {
        weights: LossWeights { use_style: false, use_adv: false, ..LossWeights::default() },
        ..transfer_config()
    };
    let run = transfer(&oracle.inputs(theta), Discriminator::seeded(SEED + 1), &cfg, SEED, None).expect("transfer runs");
    let scene = shared.scene.as_ref().unwrap();
    let gap: Vec<f64> = scene
        .test
        .iter()
        .map(|v| psnr(&render(&run.stylized, &v.camera), &v.image).unwrap() - psnr(&render(theta, &v.camera), &v.image).unwrap())
        .collect();
    let worst = gap.iter().map(|g| g.abs()).fold(0.0, f64::max);
    let self_psnr = mean(
        &oracle.test_cameras.iter().map(|c| psnr(&render(&run.stylized, c), &render(theta, c)).unwrap()).collect::<Vec<_>>(),
    );
    outcome(worst <= 0.5, format!("max held-out PSNR change {worst:.2e} dB, PSNR vs Θ renders {self_psnr:.1} dB"))
}

fn ablation_direction(shared: &mut Shared) -> Outcome {
    shared.oracle();
    let (theta, oracle) = (shared.theta.as_ref().unwrap(), shared.oracle.as_ref().unwrap());
    let rows = ablation_matrix(&oracle.inputs(theta), &transfer_config(), SEED, SEED + 1).expect("ablation runs");
    let scored: Vec<(&str, f64, f64)> = rows
        .iter()
        .map(|r| {
            let imgs = renders(&r.run.stylized, &oracle.test_cameras);
            let fd = feature_distance(&oracle.extractor, &imgs, &oracle.set.pool).unwrap();
            let p = mean(&imgs.iter().zip(&oracle.set.held_out).map(|(a, b)| psnr(a, b).unwrap()).collect::<Vec<_>>());
            (r.name, fd, p)
        })
        .collect();
    let full = scored[0].1;
    let pass = scored[1..].iter().all(|&(_, fd, _)| full <= 1.05 * fd);
    let psnr_ok = scored[1..].iter().all(|&(_, _, p)| scored[0].2 >= p - 0.5);
    shared.checks.push(("ablation PSNR ordering (full >= each ablated - 0.5 dB)".into(), psnr_ok));
    let table = scored.iter().map(|(n, fd, p)| format!("{n}: {fd:.2e} / {p:.2} dB")).collect::<Vec<_>>().join("; ");
    outcome(pass, format!("feature distance / held-out PSNR: {table}"))
}

/// Horizontal stripes (real) vs checkerboard (fake), random phase.
fn toy_texture(real: bool, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let (ox, oy) = (rng.random_range(0..8), rng.random_range(0..8));
    let tint: f64 = rng.random_range(-0.1..0.1);
    ImageBuffer::from_fn(64, 64, |x, y| {
        let on = if real { ((y + oy) / 4) % 2 == 0 } else { ((x + ox) / 4 + (y + oy) / 4) % 2 == 0 };
        let v = if on { 0.75 + tint } else { 0.25 + tint };
        [v, v, v]
    })
}

fn discriminator_sanity(shared: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let mut d = Discriminator::seeded(SEED + 4);
    let mut opt = NetOptimizer::new(&d.net, TransferConfig::default().disc_lr);
    for _ in 0..300 {
        let (real, fake) = (toy_texture(true, &mut rng), toy_texture(false, &mut rng));
        loss_disc_step(&mut d, &mut opt, &[&real], &[&fake]).expect("toy step runs");
    }
    let reals: Vec<_> = (0..8).map(|_| toy_texture(true, &mut rng)).collect();
    let fakes: Vec<_> = (0..8).map(|_| toy_texture(false, &mut rng)).collect();
    let acc = patch_accuracy(&d, &reals.iter().collect::<Vec<_>>(), &fakes.iter().collect::<Vec<_>>()).unwrap();

    // Generator loss under the trained discriminator: renders of Θ vs Θʳ.
    let run = shared.recolor_run().clone();
    let cams = &shared.oracle.as_ref().unwrap().cameras;
    let adv = |cloud: &GaussianCloud| {
        mean(&cams.iter().map(|c| loss_adv_generator(&run.discriminator, &render(cloud, c)).unwrap().0).collect::<Vec<_>>())
    };
    let (before, after) = (adv(&run.initial), adv(&run.stylized));
    let drop = 1.0 - after / before;
    outcome(
        acc > 0.9 && drop >= 0.3,
        format!("toy patch accuracy {:.1}%, adversarial loss {before:.3} -> {after:.3} ({:.0}% lower)", 100.0 * acc, 100.0 * drop),
    )
}

fn determinism_and_persistence(shared: &mut Shared) -> Outcome {
    shared.oracle();
    let (theta, oracle) = (shared.theta.as_ref().unwrap(), shared.oracle.as_ref().unwrap());
    let cfg = TransferConfig { iterations: 12, ..transfer_config() };
    let runs: Vec<TransferRun> = (0..2)
        .map(|_| transfer(&oracle.inputs(theta), Discriminator::seeded(SEED + 1), &cfg, SEED, None).expect("transfer runs"))
        .collect();
    let csv_equal = runs[0].history_csv() == runs[1].history_csv();

    let prov = Provenance { phase: "transfer".into(), iteration: 12, seed: SEED, config_hash: "x".into() };
    let bytes = encode_checkpoint(&runs[0].stylized, &prov);
    let (cloud, back) = read_checkpoint(&bytes).unwrap();
    let checkpoint_ok = cloud == runs[0].stylized && back == prov && encode_checkpoint(&cloud, &back) == bytes;
    let nets_ok = [&oracle.depth_net.net, &oracle.extractor.net, &runs[0].discriminator.net]
        .iter()
        .all(|net| write_net(&read_net(&write_net(net)).unwrap()) == write_net(net));
    let depth = render_depth(theta, &oracle.cameras[0]);
    let depth_ok = read_depth(&encode_depth(&depth)).unwrap().bit_identical(&depth);
    outcome(
        csv_equal && checkpoint_ok && nets_ok && depth_ok,
        format!("history CSV identical {csv_equal}, checkpoint {checkpoint_ok}, weights {nets_ok}, depth {depth_ok}"),
    )
}

type Criterion = fn(&mut Shared) -> Outcome;

fn main() {
    let criteria: [(&str, Criterion, f64); 9] = [
        ("rasterizer oracle equivalence", rasterizer_oracle, 60.0),
        ("gradient correctness", gradient_correctness, 300.0),
        ("phase-1 reconstruction", reconstruction, 900.0),
        ("recolor-oracle transfer", recolor_transfer, 600.0),
        ("structure preservation", structure_preservation, f64::INFINITY),
        ("pure-consistency fixed point", consistency_fixed_point, 300.0),
        ("ablation direction", ablation_direction, 1800.0),
        ("discriminator sanity", discriminator_sanity, 300.0),
        ("determinism and persistence", determinism_and_persistence, 60.0),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut shared = Shared::default();
    let mut failures = 0;
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let out = run(&mut shared);
        let secs = start.elapsed().as_secs_f64();
        let pass = out.pass && secs <= *limit;
        failures += usize::from(!pass);
        let budget = if limit.is_finite() { format!(", budget {limit:.0}s") } else { String::new() };
        println!(
            "criterion {n} {}: {name}: {} [{secs:.1}s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            out.detail
        );
    }
    for (name, pass) in &shared.checks {
        println!("check {}: {name}", if *pass { "PASS" } else { "FAIL" });
        failures += usize::from(!pass);
    }
    if failures > 0 {
        println!("{failures} acceptance checks failed");
        std::process::exit(1);
    }
}
