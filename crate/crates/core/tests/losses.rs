use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylesplat::gradcheck::{central_difference, GradReport};
use stylesplat::image::ImageBuffer;
use stylesplat::losses::{
    disc_loss, loss_adv_generator, loss_content, loss_depth, loss_disc_step, loss_efficient, loss_rgb, loss_style,
    LossNets, LossWeights, StyleTarget, ViewReference,
};
use stylesplat::nets::{Conv2d, DepthNet, Discriminator, FeatureExtractor, Layer, NetOptimizer, Tensor3};

fn random_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    ImageBuffer::from_fn(w, h, |_, _| [r.random(), r.random(), r.random()])
}

fn live_discriminator(seed: u64) -> Discriminator {
    let mut d = Discriminator::seeded(seed);
    let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
    if let Layer::Conv(head) = &mut d.net.layers[8] {
        *head = Conv2d::he_uniform(128, 1, 1, 1, &mut r);
    }
    d
}

/// Checks an image gradient against central differences at random pixels.
fn check_image_grad(name: &str, img: &ImageBuffer, grad: &ImageBuffer, f: impl Fn(&ImageBuffer) -> f64, samples: usize) {
    let mut r = ChaCha8Rng::seed_from_u64(77);
    let mut report = GradReport::new(name);
    for _ in 0..samples {
        let i = r.random_range(0..img.data.len());
        let numeric = central_difference(
            |v| {
                let mut p = img.clone();
                p.data[i] = v;
                f(&p)
            },
            img.data[i],
            1e-6,
        );
        report.push(format!("px{i}"), grad.data[i], numeric);
    }
    assert!(report.passed(), "{}", report.summary());
}

/// Two-pass channel moments computed directly from a feature map.
fn naive_moments(t: &Tensor3) -> (Vec<f64>, Vec<f64>) {
    let (mut means, mut stds) = (vec![], vec![]);
    for c in 0..t.channels {
        let mut vals = vec![];
        for y in 0..t.height {
            for x in 0..t.width {
                vals.push(t.at(c, y, x));
            }
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        means.push(m);
        stds.push((var + 1e-8).sqrt());
    }
    (means, stds)
}

fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

#[test]
fn rgb_matches_double_loop() {
    let a = random_image(7, 5, 1);
    let b = random_image(7, 5, 2);
    let mut want = 0.0;
    for y in 0..5 {
        for x in 0..7 {
            let (p, q) = (a.get(x, y), b.get(x, y));
            for c in 0..3 {
                want += (p[c] - q[c]).powi(2);
            }
        }
    }
    want /= 35.0;
    let (v, g) = loss_rgb(&a, &b).unwrap();
    assert!((v - want).abs() < 1e-12);
    check_image_grad("rgb", &a, &g, |p| loss_rgb(p, &b).unwrap().0, 20);
}

#[test]
fn style_against_independent_moments() {
    let fx = FeatureExtractor::seeded(2);
    let pool: Vec<_> = (0..3).map(|s| random_image(32, 32, 10 + s)).collect();
    let img = random_image(32, 32, 5);
    let target = StyleTarget::from_pool(&fx, &pool).unwrap();

    let pyramids: Vec<_> = pool.iter().map(|p| fx.forward(p).unwrap()).collect();
    let ours = fx.forward(&img).unwrap();
    let mut want = 0.0;
    for l in 0..4 {
        let per: Vec<_> = pyramids.iter().map(|p| naive_moments(&p.stages[l])).collect();
        let c = per[0].0.len();
        let mu: Vec<f64> = (0..c).map(|i| per.iter().map(|m| m.0[i]).sum::<f64>() / 3.0).collect();
        let sd: Vec<f64> = (0..c).map(|i| per.iter().map(|m| m.1[i]).sum::<f64>() / 3.0).collect();
        let (m, s) = naive_moments(&ours.stages[l]);
        want += rms(&m, &mu) + rms(&s, &sd);
    }
    let (v, g) = loss_style(&fx, &img, &target).unwrap();
    assert!((v - want).abs() < 1e-10, "{v} vs {want}");
    check_image_grad("style", &img, &g, |p| loss_style(&fx, p, &target).unwrap().0, 24);
}

#[test]
fn style_identity_and_caching() {
    let fx = FeatureExtractor::seeded(3);
    let img = random_image(32, 32, 8);
    let target = StyleTarget::from_pool(&fx, std::slice::from_ref(&img)).unwrap();
    assert_eq!(loss_style(&fx, &img, &target).unwrap().0, 0.0);

    let pool: Vec<_> = (0..2).map(|s| random_image(32, 48, s)).collect();
    let cached = StyleTarget::from_pyramids(&pool.iter().map(|p| fx.forward(p).unwrap()).collect::<Vec<_>>()).unwrap();
    drop(pool);
    let again = StyleTarget::from_pool(&fx, &(0..2).map(|s| random_image(32, 48, s)).collect::<Vec<_>>()).unwrap();
    assert_eq!(cached, again);
    let probe = random_image(32, 32, 4);
    assert_eq!(loss_style(&fx, &probe, &cached).unwrap().0, loss_style(&fx, &probe, &again).unwrap().0);
}

#[test]
fn content_identity_symmetry_and_recomputation() {
    let fx = FeatureExtractor::seeded(4);
    let a = random_image(32, 32, 1);
    let b = random_image(32, 32, 2);
    assert_eq!(loss_content(&fx, &a, &a).unwrap().0, 0.0);
    let (ab, g) = loss_content(&fx, &a, &b).unwrap();
    let (ba, _) = loss_content(&fx, &b, &a).unwrap();
    assert!((ab - ba).abs() < 1e-14);
    let fa = fx.forward(&a).unwrap();
    let fb = fx.forward(&b).unwrap();
    assert!((ab - rms(&fa.stages[3].data, &fb.stages[3].data)).abs() < 1e-12);
    check_image_grad("content", &a, &g, |p| loss_content(&fx, p, &b).unwrap().0, 24);
    assert!(loss_content(&fx, &a, &random_image(48, 32, 3)).is_err());
}

#[test]
fn depth_term_by_term() {
    let dn = DepthNet::seeded(5, 2.0);
    let a = random_image(32, 32, 3);
    let b = random_image(32, 32, 4);
    assert_eq!(loss_depth(&dn, &a, &a).unwrap().0, 0.0);
    let oa = dn.forward(&a).unwrap();
    let ob = dn.forward(&b).unwrap();
    let mut terms = vec![rms(&oa.depth.data, &ob.depth.data)];
    terms.extend(oa.taps.iter().zip(&ob.taps).map(|(x, y)| rms(&x.data, &y.data)));
    assert_eq!(terms.len(), 5);
    let (v, g) = loss_depth(&dn, &a, &b).unwrap();
    assert!((v - terms.iter().sum::<f64>()).abs() < 1e-12);
    check_image_grad("depth", &a, &g, |p| loss_depth(&dn, p, &b).unwrap().0, 24);
    assert!(loss_depth(&dn, &random_image(40, 40, 1), &random_image(40, 40, 2)).is_err());
}

#[test]
fn adversarial_gradient_and_limits() {
    let d = live_discriminator(6);
    let img = random_image(64, 64, 5);
    let (v, g) = loss_adv_generator(&d, &img).unwrap();
    assert!(v > 0.0);
    check_image_grad("adv", &img, &g, |p| loss_adv_generator(&d, p).unwrap().0, 24);

    // A head with a huge positive bias drives every score to 1.
    let mut sure = Discriminator::seeded(0);
    if let Layer::Conv(h) = &mut sure.net.layers[8] {
        h.bias[0] = 40.0;
    }
    let (v, _) = loss_adv_generator(&sure, &img).unwrap();
    assert!((0.0..1e-12).contains(&v), "{v}");
}

#[test]
fn perfect_discriminator_loss_vanishes() {
    // Positive encoder weights with zero biases keep a black image at zero
    // features and push a white one far positive; the head then separates
    // them completely.
    let mut d = Discriminator::seeded(0);
    for (i, c) in d.net.convs_mut().enumerate() {
        let w = if i == 4 { 10.0 } else { 0.1 };
        c.weight.iter_mut().for_each(|x| *x = w);
        c.bias.iter_mut().for_each(|b| *b = if i == 4 { -40.0 } else { 0.0 });
    }
    let white = ImageBuffer::filled(64, 64, [1.0, 1.0, 1.0]);
    let black = ImageBuffer::new(64, 64);
    let l = disc_loss(&d, &[&white], &[&black]).unwrap();
    assert!((0.0..1e-12).contains(&l), "{l}");
    let swapped = disc_loss(&d, &[&black], &[&white]).unwrap();
    assert!((swapped - 2.0 * -(1e-8f64).ln()).abs() < 1e-9, "{swapped}");
}

#[test]
fn disc_step_touches_only_the_discriminator() {
    let fx = FeatureExtractor::seeded(1);
    let dn = DepthNet::seeded(1, 1.0);
    let (fx0, dn0) = (fx.clone(), dn.clone());
    let mut d = Discriminator::seeded(1);
    let mut opt = NetOptimizer::new(&d.net, 1e-3);
    let real = random_image(64, 64, 1);
    let fake = random_image(64, 64, 2);
    let fake_before = fake.clone();
    let step = loss_disc_step(&mut d, &mut opt, &[&real], &[&fake]).unwrap();
    assert!((step.loss_before - 2.0 * 2f64.ln()).abs() < 1e-7);
    assert!(step.loss_after < step.loss_before);
    assert_ne!(d, Discriminator::seeded(1));
    assert_eq!(fx, fx0);
    assert_eq!(dn, dn0);
    assert_eq!(fake, fake_before);
}

#[test]
fn efficient_loss_is_linear_in_weights() {
    let fx = FeatureExtractor::seeded(7);
    let d = live_discriminator(7);
    let dn = DepthNet::seeded(7, 2.0);
    let nets = LossNets {
        extractor: &fx,
        discriminator: &d,
        depth: &dn,
    };
    let original = random_image(64, 64, 1);
    let img = random_image(64, 64, 2);
    let pool: Vec<_> = (0..3).map(|s| random_image(64, 64, 20 + s)).collect();
    let style = StyleTarget::from_pool(&fx, &pool).unwrap();
    let reference = ViewReference::new(&nets, &original).unwrap();

    let zero = LossWeights {
        style: 0.0,
        adv: 0.0,
        content: 0.0,
        depth: 0.0,
        ..Default::default()
    };
    let r = loss_efficient(&img, &reference, &style, &nets, &zero).unwrap();
    assert_eq!(r.total, 0.0);
    assert!(r.grad.data.iter().all(|&v| v == 0.0));

    let unit = loss_efficient(&img, &reference, &style, &nets, &LossWeights::default()).unwrap();
    let s = loss_style(&fx, &img, &style).unwrap();
    let a = loss_adv_generator(&d, &img).unwrap();
    let c = loss_content(&fx, &img, &original).unwrap();
    let dp = loss_depth(&dn, &img, &original).unwrap();
    assert!((unit.total - (s.0 + a.0 + c.0 + dp.0)).abs() < 1e-10);
    let mut summed = s.1.clone();
    for g in [&a.1, &c.1, &dp.1] {
        summed.add_scaled(g, 1.0);
    }
    assert!(unit.grad.max_abs_diff(&summed) < 1e-12);

    let w = LossWeights {
        style: 2.0,
        adv: 0.5,
        content: 3.0,
        depth: 0.25,
        ..Default::default()
    };
    let weighted = loss_efficient(&img, &reference, &style, &nets, &w).unwrap();
    let want = 2.0 * s.0 + 0.5 * a.0 + 3.0 * c.0 + 0.25 * dp.0;
    assert!((weighted.total - want).abs() < 1e-10);

    let ablated = LossWeights {
        use_content: false,
        use_depth: false,
        ..Default::default()
    };
    let r = loss_efficient(&img, &reference, &style, &nets, &ablated).unwrap();
    assert_eq!((r.terms.content, r.terms.depth), (0.0, 0.0));
    assert!((r.total - (s.0 + a.0)).abs() < 1e-10);
}

#[test]
fn efficient_loss_gradient_matches_finite_differences() {
    let fx = FeatureExtractor::seeded(8);
    let d = live_discriminator(8);
    let dn = DepthNet::seeded(8, 2.0);
    let nets = LossNets {
        extractor: &fx,
        discriminator: &d,
        depth: &dn,
    };
    let original = random_image(64, 64, 3);
    let img = random_image(64, 64, 4);
    let style = StyleTarget::from_pool(&fx, &[random_image(64, 64, 9)]).unwrap();
    let reference = ViewReference::new(&nets, &original).unwrap();
    let w = LossWeights::default();
    let r = loss_efficient(&img, &reference, &style, &nets, &w).unwrap();
    check_image_grad(
        "efficient",
        &img,
        &r.grad,
        |p| loss_efficient(p, &reference, &style, &nets, &w).unwrap().total,
        16,
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn losses_are_nonnegative(seed_a in 0u64..1000, seed_b in 0u64..1000) {
        let a = random_image(32, 32, seed_a);
        let b = random_image(32, 32, seed_b);
        let fx = FeatureExtractor::seeded(seed_a);
        prop_assert!(loss_rgb(&a, &b).unwrap().0 >= 0.0);
        prop_assert!(loss_content(&fx, &a, &b).unwrap().0 >= 0.0);
        let target = StyleTarget::from_pool(&fx, std::slice::from_ref(&b)).unwrap();
        prop_assert!(loss_style(&fx, &a, &target).unwrap().0 >= 0.0);
        let dn = DepthNet::seeded(seed_b, 1.0);
        prop_assert!(loss_depth(&dn, &a, &b).unwrap().0 >= 0.0);
    }
}
