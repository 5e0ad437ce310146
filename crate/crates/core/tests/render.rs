mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylesplat::gradcheck::{self, central_difference, weighted_image_sum};
use stylesplat::image::ImageBuffer;
use stylesplat::render::{composite_pixel, render, render_backward, render_depth, render_full, BackwardScope};
use stylesplat::scene::{Camera, GaussianCloud, GaussianPoint, Mat3, Vec3};
use stylesplat::sh;

#[test]
fn twenty_random_splats_match_left_fold() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let list: Vec<([f64; 3], f64)> = (0..20)
        .map(|_| (std::array::from_fn(|_| rng.random::<f64>()), rng.random_range(0.0..0.3)))
        .collect();
    let bg = [0.3, 0.6, 0.9];
    let a = composite_pixel(&list, bg);
    let b = common::fold_composite(&list, bg);
    for ch in 0..3 {
        assert!((a[ch] - b[ch]).abs() < 1e-7);
    }
}

#[test]
fn tiled_render_matches_brute_force_on_random_scenes() {
    for seed in 0..10 {
        let (cloud, cam) = gradcheck::random_scene(48, 2, 100 + seed);
        let tiled = render(&cloud, &cam);
        let oracle = common::brute_force_render(&cloud, &cam);
        assert!(tiled.max_abs_diff(&oracle) < 1e-5, "seed {seed}");
    }
}

#[test]
fn point_behind_camera_changes_nothing() {
    let (mut cloud, cam) = gradcheck::random_scene(16, 1, 3);
    let before = render(&cloud, &cam);
    cloud.points.push(GaussianPoint::isotropic([0.0, 0.0, -1.0], 5.0, 0.99, [1.0; 3], 1));
    let after = render(&cloud, &cam);
    assert_eq!(before, after);
}

#[test]
fn zero_image_gradient_gives_zero_parameter_gradients() {
    let (cloud, cam) = gradcheck::random_scene(8, 2, 5);
    let g = render_backward(&cloud, &cam, &ImageBuffer::new(cam.width, cam.height), BackwardScope::All);
    assert!(g.position.iter().flatten().all(|&v| v == 0.0));
    assert!(g.sh.iter().all(|&v| v == 0.0));
    assert!(g.opacity_logit.iter().all(|&v| v == 0.0));
}

#[test]
fn culled_points_get_zero_gradients() {
    let (mut cloud, cam) = gradcheck::random_scene(6, 1, 8);
    cloud.points.push(GaussianPoint::isotropic([0.0, 0.0, -3.0], 0.5, 0.9, [0.5; 3], 1));
    let w = gradcheck::random_weights(32, 32, 1);
    let g = render_backward(&cloud, &cam, &w, BackwardScope::All);
    let last = cloud.len() - 1;
    assert_eq!(g.position[last], [0.0; 3]);
    assert_eq!(g.opacity_logit[last], 0.0);
    assert!(g.sh[last * cloud.sh_len()..].iter().all(|&v| v == 0.0));
}

#[test]
fn single_splat_dc_gradient_is_weight_times_basis() {
    let cam = Camera::new(40.0, 40.0, 16.5, 16.5, 32, 32, Mat3::identity(), Vec3::zeros()).unwrap();
    let mut cloud = GaussianCloud::new(0);
    cloud.points.push(GaussianPoint::isotropic([0.0, 0.0, 4.0], 0.3, 0.6, [0.3, 0.5, 0.7], 0));
    // Loss: sum of the center pixel's three channels.
    let mut w = ImageBuffer::new(32, 32);
    w.set(16, 16, [1.0; 3]);
    let g = render_backward(&cloud, &cam, &w, BackwardScope::All);
    // The pixel center sits on the mean: effective alpha = opacity, T = 1.
    let expected = 0.6 * sh::DC_BASIS;
    for ch in 0..3 {
        assert!((g.sh[ch] - expected).abs() < 1e-12);
        let numeric = central_difference(
            |x| {
                let mut c = cloud.clone();
                c.points[0].sh[ch] = x;
                weighted_image_sum(&render(&c, &cam), &w)
            },
            cloud.points[0].sh[ch],
            1e-4,
        );
        assert!((numeric - expected).abs() < 1e-8);
    }
}

#[test]
fn renderer_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (cloud, cam) = gradcheck::random_scene(8, 2, 40 + seed);
        let w = gradcheck::random_weights(32, 32, 7 + seed);
        let report = gradcheck::check_renderer(&cloud, &cam, &w, 1e-6);
        for f in report.failures() {
            eprintln!("{f:?}");
        }
        assert!(report.passed(), "{}", report.summary());
    }
}

#[test]
fn appearance_scope_matches_full_sh_gradient() {
    let (cloud, cam) = gradcheck::random_scene(8, 2, 9);
    let w = gradcheck::random_weights(32, 32, 4);
    let full = render_backward(&cloud, &cam, &w, BackwardScope::All);
    let app = render_backward(&cloud, &cam, &w, BackwardScope::Appearance);
    assert_eq!(full.sh, app.sh);
    assert!(app.position.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn render_is_deterministic_across_thread_counts() {
    let (cloud, cam) = gradcheck::random_scene(40, 2, 21);
    let w = gradcheck::random_weights(32, 32, 2);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let (a, ga) = one.install(|| (render(&cloud, &cam), render_backward(&cloud, &cam, &w, BackwardScope::All)));
    let (b, gb) = four.install(|| (render(&cloud, &cam), render_backward(&cloud, &cam, &w, BackwardScope::All)));
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

#[test]
fn empty_cloud_depth_is_all_invalid() {
    let cam = Camera::new(40.0, 40.0, 16.0, 16.0, 32, 32, Mat3::identity(), Vec3::zeros()).unwrap();
    assert_eq!(render_depth(&GaussianCloud::new(0), &cam).valid_count(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn oracle_equivalence_and_alpha_bounds(seed in 0u64..10_000, n in 1usize..64, size in 8usize..64) {
        let (cloud, cam) = gradcheck::random_scene(n, 1, seed);
        let cam = cam.resized(size, size);
        let out = render_full(&cloud, &cam);
        let oracle = common::brute_force_render(&cloud, &cam);
        prop_assert!(out.image.max_abs_diff(&oracle) < 1e-5);
        prop_assert!(out.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
    }
}
