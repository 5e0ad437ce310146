use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use stylesplat::config::TrainConfig;
use stylesplat::data::{
    generate_synthetic, load_checkpoint, load_png, load_scene, read_manifest, recolor_pool, save_checkpoint, save_depth, save_png,
    write_manifest, write_synthetic, ColorMap, ColorScheme, LoadedScene, Provenance, SyntheticSpec,
};
use stylesplat::gradcheck::{self, GradReport};
use stylesplat::image::{DepthBuffer, ImageBuffer};
use stylesplat::metrics::{feature_distance, psnr, MetricReport};
use stylesplat::nets::{load_net, save_net, train_depthnet, DepthNet, Discriminator, FeatureExtractor};
use stylesplat::pipelines::{ablation_matrix, random_init, reconstruct, transfer, TransferInputs};
use stylesplat::render::{render, render_depth};
use stylesplat::scene::{Camera, GaussianCloud};

use crate::{Cli, Command, SpecName, SplitArg, StyleInputs, Suite};

/// Bad command-line usage detected after parsing (unreadable config etc.).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

/// A gradient check that did not pass.
#[derive(Debug, thiserror::Error)]
#[error("{0} gradient suite(s) failed")]
pub struct GradcheckFailed(pub usize);

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    if err.downcast_ref::<GradcheckFailed>().is_some() {
        return 3;
    }
    match err.downcast_ref::<stylesplat::Error>() {
        Some(stylesplat::Error::Numeric(_) | stylesplat::Error::Singular(_)) => 3,
        _ => 2,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Usage("--threads must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    }
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Usage(format!("reading config {}: {e}", path.display())))?;
            TrainConfig::from_json(&text).map_err(|e| Usage(e.to_string()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let ctx = Ctx { config, out: cli.out_dir.clone() };
    match &cli.command {
        Command::Synth(a) => ctx.synth(a),
        Command::Reconstruct(a) => ctx.reconstruct(a),
        Command::TrainDepth(a) => ctx.train_depth(a),
        Command::Transfer(a) => ctx.transfer(&a.inputs),
        Command::Render(a) => ctx.render(a),
        Command::Eval(a) => ctx.eval(a),
        Command::Gradcheck(a) => ctx.gradcheck(a.suite),
        Command::Ablate(a) => ctx.ablate(&a.inputs, a.target_dir.as_deref()),
    }
}

struct Ctx {
    config: TrainConfig,
    out: PathBuf,
}

fn write_json(value: &impl Serialize, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn file_stem(path: &str) -> String {
    Path::new(path).file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.to_string())
}

/// Every PNG in `dir`, sorted by file name.
fn load_png_dir(dir: &Path) -> Result<Vec<(String, ImageBuffer)>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    names.into_iter().map(|n| Ok((n.clone(), load_png(&dir.join(&n))?))).collect()
}

fn split_views<'a>(scene: &'a LoadedScene, split: SplitArg) -> Vec<(String, &'a Camera)> {
    let named = |views: &'a [stylesplat::data::View], tag| {
        scene
            .manifest
            .frames
            .iter()
            .filter(move |f| f.split == tag)
            .zip(views)
            .map(|(f, v)| (file_stem(&f.image), &v.camera))
            .collect::<Vec<_>>()
    };
    let train = named(&scene.train, stylesplat::data::Split::Train);
    let test = named(&scene.test, stylesplat::data::Split::Test);
    match split {
        SplitArg::Train => train,
        SplitArg::Test => test,
        SplitArg::All => train.into_iter().chain(test).collect(),
    }
}

#[derive(Serialize)]
struct ViewScore {
    name: String,
    psnr: f64,
}

#[derive(Serialize)]
struct ReconstructSummary {
    iterations: usize,
    points: usize,
    pruned: usize,
    cloned: usize,
    seconds: f64,
    iterations_per_second: f64,
    train: Vec<ViewScore>,
    test: Vec<ViewScore>,
    mean_train_psnr: f64,
    mean_test_psnr: Option<f64>,
}

#[derive(Serialize)]
struct TransferSummary {
    iterations: usize,
    setup_ms: f64,
    optimize_ms: f64,
    iterations_per_second: f64,
    final_total: Option<f64>,
    structure_checksum: String,
}

#[derive(Serialize)]
struct AblationSummary {
    name: String,
    use_style: bool,
    use_adv: bool,
    use_content: bool,
    use_depth: bool,
    feature_distance: f64,
    mean_psnr: Option<f64>,
    mean_ssim: Option<f64>,
}

impl Ctx {
    fn provenance(&self, phase: &str, iteration: u64) -> Provenance {
        Provenance { phase: phase.into(), iteration, seed: self.config.seed, config_hash: self.config.hash() }
    }

    fn synth(&self, a: &crate::SynthArgs) -> Result<()> {
        let mut spec = match a.spec {
            SpecName::Tube => SyntheticSpec::tube(),
            SpecName::Sphere => SyntheticSpec::sphere(),
        };
        spec.seed = self.config.seed;
        if let Some(s) = &a.color_scheme {
            spec.color_scheme = match s.as_str() {
                "warm" => ColorScheme::Warm,
                "cool" => ColorScheme::Cool,
                _ => return Err(Usage(format!("unknown color scheme {s:?} (warm, cool)")).into()),
            };
        }
        spec.points = a.points.unwrap_or(spec.points);
        spec.width = a.width.unwrap_or(spec.width);
        spec.height = a.height.unwrap_or(spec.height);
        spec.train_views = a.train_views.unwrap_or(spec.train_views);
        spec.test_views = a.test_views.unwrap_or(spec.test_views);
        let map = a.recolor.as_deref().map(ColorMap::named).transpose().map_err(|e| Usage(e.to_string()))?;
        let scene = generate_synthetic(&spec)?;
        let manifest_path = write_synthetic(&scene, &self.out)?;
        if let Some(map) = map {
            let sources: Vec<_> = scene.train.iter().map(|v| v.image.clone()).collect();
            let held: Vec<_> = scene.test.iter().map(|v| v.image.clone()).collect();
            let set = recolor_pool(&sources, &held, &map)?;
            let mut manifest = read_manifest(&manifest_path)?;
            for sub in ["pool", "recolor_gt"] {
                std::fs::create_dir_all(self.out.join(sub))?;
            }
            for (i, img) in set.pool.iter().enumerate() {
                let name = format!("pool/pool_{i:03}.png");
                save_png(img, &self.out.join(&name))?;
                manifest.real_pool.push(name);
            }
            let tests = manifest.frames.iter().filter(|f| f.split == stylesplat::data::Split::Test);
            for (f, img) in tests.zip(&set.held_out) {
                save_png(img, &self.out.join("recolor_gt").join(file_stem(&f.image)))?;
            }
            write_manifest(&manifest, &manifest_path)?;
        }
        eprintln!("wrote {}", manifest_path.display());
        Ok(())
    }

    fn reconstruct(&self, a: &crate::ReconstructArgs) -> Result<()> {
        let scene = load_scene(&a.scene)?;
        let mut cfg = self.config.reconstruct.clone();
        cfg.iterations = a.iterations.unwrap_or(cfg.iterations);
        let init = match (&a.init, &scene.seed_cloud) {
            (Some(path), _) => load_checkpoint(path)?.0,
            (None, Some(seed)) => seed.clone(),
            (None, None) => {
                let cams: Vec<Camera> = scene.train.iter().map(|v| v.camera.clone()).collect();
                random_init(&cams, a.init_points, (a.init_near, a.init_far), a.sh_degree, self.config.seed)?
            }
        };
        let start = Instant::now();
        let rec = reconstruct(&scene.train, init, &cfg, self.config.seed)?;
        let seconds = start.elapsed().as_secs_f64();
        save_checkpoint(&rec.cloud, &self.provenance("reconstruct", cfg.iterations as u64), &self.out.join("cloud.ssgc"))?;

        let mut csv = String::from("iteration,loss\n");
        for (i, l) in rec.losses.iter().enumerate() {
            csv += &format!("{},{l:e}\n", i + 1);
        }
        std::fs::write(self.out.join("reconstruct_loss.csv"), csv)?;

        let score = |split| -> Result<Vec<ViewScore>> {
            let views = if split == SplitArg::Train { &scene.train } else { &scene.test };
            split_views(&scene, split)
                .into_iter()
                .zip(views)
                .map(|((name, cam), v)| Ok(ViewScore { name, psnr: psnr(&render(&rec.cloud, cam).clamped(), &v.image)? }))
                .collect()
        };
        let (train, test) = (score(SplitArg::Train)?, score(SplitArg::Test)?);
        let mean = |s: &[ViewScore]| (!s.is_empty()).then(|| s.iter().map(|v| v.psnr).sum::<f64>() / s.len() as f64);
        let summary = ReconstructSummary {
            iterations: cfg.iterations,
            points: rec.cloud.len(),
            pruned: rec.pruned,
            cloned: rec.cloned,
            seconds,
            iterations_per_second: cfg.iterations as f64 / seconds.max(1e-9),
            mean_train_psnr: mean(&train).unwrap_or(f64::NAN),
            mean_test_psnr: mean(&test),
            train,
            test,
        };
        write_json(&summary, &self.out.join("reconstruct.json"))?;
        match summary.mean_test_psnr {
            Some(p) => println!("train PSNR {:.2} dB, test PSNR {p:.2} dB, {} points, {seconds:.1}s", summary.mean_train_psnr, summary.points),
            None => println!("train PSNR {:.2} dB, {} points, {seconds:.1}s", summary.mean_train_psnr, summary.points),
        }
        Ok(())
    }

    fn depth_data(&self, scene: &LoadedScene, cloud: Option<&GaussianCloud>) -> Result<Vec<(ImageBuffer, DepthBuffer)>> {
        match cloud {
            Some(cloud) => Ok(scene.train.iter().map(|v| (render(cloud, &v.camera).clamped(), render_depth(cloud, &v.camera))).collect()),
            None => scene
                .train
                .iter()
                .enumerate()
                .map(|(i, v)| match &v.depth {
                    Some(d) => Ok((v.image.clone(), d.clone())),
                    None => bail!("training view {i} has no depth map; pass --cloud to train on rendered depth"),
                })
                .collect(),
        }
    }

    fn train_depth(&self, a: &crate::TrainDepthArgs) -> Result<()> {
        let scene = load_scene(&a.scene)?;
        let cloud = a.cloud.as_deref().map(load_checkpoint).transpose()?.map(|(c, _)| c);
        let data = self.depth_data(&scene, cloud.as_ref())?;
        let mut cfg = self.config.depth;
        cfg.steps = a.steps.unwrap_or(cfg.steps);
        let (net, report) = train_depthnet(&data, &cfg)?;
        save_net(&net.net, &self.out.join("depth_net.ssnw"))?;
        let mut csv = String::from("step,loss\n");
        for (i, l) in report.step_losses.iter().enumerate() {
            csv += &format!("{},{l:e}\n", i + 1);
        }
        std::fs::write(self.out.join("depth_loss.csv"), csv)?;
        println!("depth net trained for {} steps, final loss {:.5}", cfg.steps, report.final_loss);
        Ok(())
    }

    /// Loads everything a transfer run reads: scene, cloud, pool, extractor and depth network.
    fn style_inputs(&self, a: &StyleInputs) -> Result<StyleSetup> {
        let scene = load_scene(&a.scene)?;
        let cloud = load_checkpoint(&a.cloud)?.0;
        let pool = match &a.pool_dir {
            Some(dir) => load_png_dir(dir)?.into_iter().map(|(_, img)| img).collect(),
            None => scene.real_pool.clone(),
        };
        if pool.is_empty() {
            bail!(Usage("no target-style images: the manifest has no real_pool and --pool-dir was not given".into()));
        }
        let extractor = match &a.extractor {
            Some(path) => FeatureExtractor::from_net(load_net(path)?)?,
            None => FeatureExtractor::seeded(self.config.seed),
        };
        let depth_net = match &a.depth_net {
            Some(path) => DepthNet::from_net(load_net(path)?)?,
            None => {
                eprintln!("no --depth-net given; training one on renders of the cloud");
                train_depthnet(&self.depth_data(&scene, Some(&cloud))?, &self.config.depth)?.0
            }
        };
        let cameras = scene.train.iter().map(|v| v.camera.clone()).collect();
        let mut cfg = self.config.transfer.clone();
        cfg.iterations = a.iterations.unwrap_or(cfg.iterations);
        Ok(StyleSetup { scene, cloud, pool, cameras, extractor, depth_net, cfg })
    }

    fn transfer(&self, a: &StyleInputs) -> Result<()> {
        let s = self.style_inputs(a)?;
        let run = transfer(&s.inputs(), Discriminator::seeded(self.config.seed.wrapping_add(1)), &s.cfg, self.config.seed, Some(&self.out))?;
        save_checkpoint(&run.stylized, &self.provenance("transfer", s.cfg.iterations as u64), &self.out.join("stylized.ssgc"))?;
        run.write_history(&self.out.join("history.csv"))?;
        save_net(&run.discriminator.net, &self.out.join("discriminator.ssnw"))?;
        let summary = TransferSummary {
            iterations: s.cfg.iterations,
            setup_ms: run.setup_ms,
            optimize_ms: run.optimize_ms,
            iterations_per_second: s.cfg.iterations as f64 / (run.optimize_ms / 1e3).max(1e-9),
            final_total: run.history.last().map(|r| r.total),
            structure_checksum: stylesplat::data::structure_checksum(&run.stylized),
        };
        write_json(&summary, &self.out.join("transfer.json"))?;
        println!(
            "transfer: {} iterations in {:.1}s ({:.2} it/s)",
            summary.iterations,
            run.optimize_ms / 1e3,
            summary.iterations_per_second
        );
        Ok(())
    }

    fn render(&self, a: &crate::RenderArgs) -> Result<()> {
        let scene = load_scene(&a.scene)?;
        let cloud = load_checkpoint(&a.cloud)?.0;
        let views = split_views(&scene, a.split);
        for (name, cam) in &views {
            save_png(&render(&cloud, cam), &self.out.join(name))?;
            if a.depth {
                let stem = Path::new(name).with_extension("f32d");
                save_depth(&render_depth(&cloud, cam), &self.out.join(stem))?;
            }
        }
        eprintln!("rendered {} views", views.len());
        Ok(())
    }

    fn eval(&self, a: &crate::EvalArgs) -> Result<()> {
        let pred = load_png_dir(&a.pred)?;
        let mut targets = Vec::new();
        for (name, _) in &pred {
            let path = a.target.join(name);
            if path.exists() {
                targets.push(load_png(&path)?);
            } else {
                eprintln!("skipping {name}: no matching target");
                targets.push(ImageBuffer::new(0, 0));
            }
        }
        let pairs: Vec<(String, &ImageBuffer, &ImageBuffer)> = pred
            .iter()
            .zip(&targets)
            .filter(|(_, t)| t.width > 0)
            .map(|((n, p), t)| (n.clone(), p, t))
            .collect();
        if pairs.is_empty() {
            bail!("no file names in {} match {}", a.pred.display(), a.target.display());
        }
        let mut report = MetricReport::compare(&pairs)?;
        if let Some(dir) = &a.pool {
            let pool: Vec<_> = load_png_dir(dir)?.into_iter().map(|(_, img)| img).collect();
            let produced: Vec<_> = pred.iter().map(|(_, img)| img.clone()).collect();
            report.feature_distance = Some(feature_distance(&FeatureExtractor::seeded(self.config.seed), &produced, &pool)?);
        }
        if let (Some(cloud), Some(scene)) = (&a.fps_cloud, &a.scene) {
            report.render_fps = Some(measure_fps(&load_checkpoint(cloud)?.0, &load_scene(scene)?)?);
        }
        print!("{}", report.table());
        write_json(&report, &self.out.join("metrics.json"))
    }

    fn gradcheck(&self, suite: Suite) -> Result<()> {
        let seed = self.config.seed;
        let reports: Vec<GradReport> = match suite {
            Suite::All => gradcheck::run_all(seed),
            Suite::Renderer => gradcheck::renderer_suite(3, seed),
            Suite::Layers => gradcheck::layer_suite(seed),
            Suite::Losses => gradcheck::loss_suite(seed),
        };
        for r in &reports {
            println!("{} {}", if r.passed() { "ok  " } else { "FAIL" }, r.summary());
            for e in r.failures().take(5) {
                println!("      {}: analytic {:.6e}, numeric {:.6e}", e.name, e.analytic, e.numeric);
            }
        }
        let failed = reports.iter().filter(|r| !r.passed()).count();
        if failed > 0 {
            return Err(GradcheckFailed(failed).into());
        }
        Ok(())
    }

    fn ablate(&self, a: &StyleInputs, target_dir: Option<&Path>) -> Result<()> {
        let s = self.style_inputs(a)?;
        let seed = self.config.seed;
        let rows = ablation_matrix(&s.inputs(), &s.cfg, seed, seed.wrapping_add(1))?;
        let tests = split_views(&s.scene, SplitArg::Test);
        let eval_cams: Vec<&Camera> =
            if tests.is_empty() { s.cameras.iter().collect() } else { tests.iter().map(|(_, c)| *c).collect() };
        let targets: Option<Vec<(String, ImageBuffer)>> = target_dir
            .map(|dir| tests.iter().map(|(name, _)| Ok((name.clone(), load_png(&dir.join(name))?))).collect::<Result<_>>())
            .transpose()?;
        let mut out = Vec::new();
        for row in &rows {
            let renders: Vec<_> = eval_cams.iter().map(|c| render(&row.run.stylized, c).clamped()).collect();
            let fd = feature_distance(&s.extractor, &renders, &s.pool)?;
            let quality = match &targets {
                Some(t) => {
                    let pairs: Vec<_> = t.iter().zip(&renders).map(|((n, gt), r)| (n.clone(), r, gt)).collect();
                    Some(MetricReport::compare(&pairs)?)
                }
                None => None,
            };
            let slug = row.name.replace("w/o ", "without_").replace(' ', "_");
            row.run.write_history(&self.out.join(format!("history_{slug}.csv")))?;
            println!(
                "{:<28} fd {fd:.6}{}",
                row.name,
                quality.as_ref().map(|q| format!("  PSNR {:.2}  SSIM {:.4}", q.mean_psnr, q.mean_ssim)).unwrap_or_default()
            );
            out.push(AblationSummary {
                name: row.name.to_string(),
                use_style: row.weights.use_style,
                use_adv: row.weights.use_adv,
                use_content: row.weights.use_content,
                use_depth: row.weights.use_depth,
                feature_distance: fd,
                mean_psnr: quality.as_ref().map(|q| q.mean_psnr),
                mean_ssim: quality.as_ref().map(|q| q.mean_ssim),
            });
        }
        write_json(&out, &self.out.join("ablation.json"))
    }
}

struct StyleSetup {
    scene: LoadedScene,
    cloud: GaussianCloud,
    pool: Vec<ImageBuffer>,
    cameras: Vec<Camera>,
    extractor: FeatureExtractor,
    depth_net: DepthNet,
    cfg: stylesplat::config::TransferConfig,
}

impl StyleSetup {
    fn inputs(&self) -> TransferInputs<'_> {
        TransferInputs {
            cloud: &self.cloud,
            real_pool: &self.pool,
            cameras: &self.cameras,
            extractor: &self.extractor,
            depth_net: &self.depth_net,
        }
    }
}

/// Frames per second at 512×512 from the scene's first pose, over 100 frames.
fn measure_fps(cloud: &GaussianCloud, scene: &LoadedScene) -> Result<f64> {
    let Some(view) = scene.all_views().next() else { bail!("scene has no views") };
    let c = &view.camera;
    let (sx, sy) = (512.0 / c.width as f64, 512.0 / c.height as f64);
    let cam = Camera::new(c.fx * sx, c.fy * sy, c.cx * sx, c.cy * sy, 512, 512, c.rotation, c.translation)?;
    render(cloud, &cam);
    let start = Instant::now();
    for _ in 0..100 {
        std::hint::black_box(render(cloud, &cam));
    }
    Ok(100.0 / start.elapsed().as_secs_f64())
}
