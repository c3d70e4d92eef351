use pairsplat::autodiff::{ParamStore, Tape, Tensor};
use pairsplat::gaussians::{sh_coeff_count, ShCoefficients};
use pairsplat::geometry::Camera;
use pairsplat::head::{
    bucket_depth, make_buckets, reparameterized_opacity, sample_depth, DepthBuckets, Head, HeadConfig, OffsetMode,
    SampleMode,
};
use pairsplat::linalg::{Mat3, Vec3};
use pairsplat::model::{render_node, ViewGaussians};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn head(config: HeadConfig, channels: usize, seed: u64) -> (Head, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = Head::new(config, channels, &mut store, &mut rng).unwrap();
    (h, store)
}

fn set_output_layer(h: &Head, store: &mut ParamStore, bias: impl Fn(usize) -> f64) {
    let (w, b) = h.output_layer();
    store.get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    store.get_mut(b).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = bias(i));
}

#[test]
fn bucket_endpoints_and_spacing() {
    for &(near, far, z) in &[(1.0, 100.0, 4), (0.7, 9.0, 64), (0.13, 0.9, 17), (2.0, 3.0, 2)] {
        let b = make_buckets(near, far, z).unwrap();
        assert_eq!(b.depths()[0], near);
        assert_eq!(b.boundary(z), far);
        assert!(b.depths().windows(2).all(|w| w[0] < w[1]));
        let step = (1.0 / near - 1.0 / far) / z as f64;
        for k in 0..z {
            let gap = 1.0 / b.boundary(k) - 1.0 / b.boundary(k + 1);
            assert!((gap - step).abs() <= 1e-12 * (1.0 / near), "near {near} far {far} k {k}");
        }
    }
}

#[test]
fn bucket_spot_value() {
    let b = make_buckets(1.0, 100.0, 4).unwrap();
    // 1 / (0.5·0.99 + 0.01) = 1 / 0.505.
    assert!((b.depths()[2] - 1.980_198_019_801_98).abs() < 1e-12);
}

#[test]
fn bucket_preconditions() {
    assert!(make_buckets(0.0, 1.0, 4).is_err());
    assert!(make_buckets(2.0, 1.0, 4).is_err());
    assert!(make_buckets(1.0, 2.0, 1).is_err());
}

#[test]
fn zero_output_layer_gives_uniform_distribution() {
    let cfg = HeadConfig {
        buckets: 8,
        hidden: 16,
        sh_degree: 1,
        ..HeadConfig::default()
    };
    let (h, mut store) = head(cfg, 12, 1);
    assert_eq!(h.layout().width(), 8 + 8 + 3 + 4 + 3 * 4 + 2);
    set_output_layer(&h, &mut store, |_| 0.0);
    let feature: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
    let out = h.predict(&store, &feature).unwrap();
    assert!(out.distribution.phi.iter().all(|&p| (p - 0.125).abs() < 1e-15));
    assert!(out.distribution.delta.iter().all(|&d| d == 0.5));
    assert_eq!(out.sh.len(), sh_coeff_count(1));
}

#[test]
fn head_parameters_match_finite_differences() {
    let cfg = HeadConfig {
        buckets: 4,
        hidden: 6,
        sh_degree: 0,
        ..HeadConfig::default()
    };
    let (h, store) = head(cfg, 5, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::uniform(&mut rng, &[3, 5], 1.0);
    let weights = Tensor::uniform(&mut rng, &[3, h.layout().width()], 1.0);
    let loss_of = |store: &ParamStore| {
        let tape = Tape::new();
        let params = store.bind(&tape);
        let b = h.forward(&params, tape.constant(x.clone())).unwrap();
        let raw = h.raw(&params, tape.constant(x.clone())).unwrap();
        // Exercise the activated views as well as the raw output.
        let act = b.phi.square().sum().add(b.delta.sum()).unwrap();
        let loss = raw.mul(tape.constant(weights.clone())).unwrap().sum().add(act).unwrap();
        (loss.item().unwrap(), params.gradients(&tape.backward(loss).unwrap()))
    };
    let (_, analytic) = loss_of(&store);
    let eps = 1e-5;
    let mut work = store.clone();
    for (pi, g) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for k in 0..g.len() {
            let x0 = store.values()[pi].data()[k];
            work.values_mut()[pi].data_mut()[k] = x0 + eps;
            let plus = loss_of(&work).0;
            work.values_mut()[pi].data_mut()[k] = x0 - eps;
            let minus = loss_of(&work).0;
            work.values_mut()[pi].data_mut()[k] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max((numeric - g.data()[k]).abs());
            scale = scale.max(g.data()[k].abs());
        }
        assert!(worst / scale < 1e-6, "{}: {}", store.names()[pi], worst / scale);
    }
}

#[test]
fn one_hot_always_samples_its_index() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut phi = vec![0.0; 7];
    phi[3] = 1.0;
    for _ in 0..1000 {
        assert_eq!(sample_depth(&phi, &mut rng).unwrap(), 3);
    }
}

#[test]
fn uniform_frequencies_within_four_sigma() {
    let z = 16;
    let phi = vec![1.0 / z as f64; z];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 1_000_000;
    let mut counts = vec![0usize; z];
    for _ in 0..draws {
        counts[sample_depth(&phi, &mut rng).unwrap()] += 1;
    }
    let p = 1.0 / z as f64;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - draws as f64 * p).abs() < 4.0 * sigma);
    }
}

#[test]
fn sampling_is_reproducible_and_validated() {
    let phi = [0.1, 0.2, 0.3, 0.4];
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..50).map(|_| sample_depth(&phi, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(9), draw(9));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sample_depth(&[0.5, 0.6], &mut rng).is_err());
    assert!(sample_depth(&[1.2, -0.2], &mut rng).is_err());
    assert!(sample_depth(&[0.5, 0.5 + 5e-7], &mut rng).is_ok());
}

#[test]
fn opacity_gradient_routes_to_sampled_bucket() {
    let tape = Tape::new();
    let phi = tape.leaf(Tensor::new(&[4], vec![0.1, 0.3, 0.4, 0.2]).unwrap());
    let alpha = reparameterized_opacity(phi, &[1]).unwrap();
    assert_eq!(alpha.value().data(), &[0.3]);
    let grads = tape.backward(alpha.square().sum()).unwrap();
    let g = grads.get(phi).unwrap();
    assert!((g.data()[1] - 0.6).abs() < 1e-15);
    assert_eq!([g.data()[0], g.data()[2], g.data()[3]], [0.0; 3]);

    let one_hot = tape.leaf(Tensor::new(&[2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
    let a = reparameterized_opacity(one_hot, &[1, 2]).unwrap();
    assert_eq!(a.value().data(), &[1.0, 1.0]);
    assert!(reparameterized_opacity(one_hot, &[1, 3]).is_err());
    assert!(reparameterized_opacity(one_hot, &[1]).is_err());
}

fn test_camera() -> Camera<f64> {
    Camera::pinhole(12.0, 12, 12, Mat3::identity(), Vec3::new(0.0, 0.0, -3.0)).unwrap()
}

/// Loss `MSE(render(α = φ_z), target)` for three splats whose opacities come
/// from softmax logits through the reparameterization node.
fn opacity_pipeline(logits: &Tensor, z: &[usize], target: &Tensor) -> (f64, Tensor, Vec<f64>, Vec<f64>) {
    let tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let phi = l.softmax().unwrap();
    let alpha = reparameterized_opacity(phi, z).unwrap();
    let means = Tensor::new(&[3, 3], vec![-0.5, 0.2, 0.0, 0.4, -0.3, 0.5, 0.1, 0.1, 1.0]).unwrap();
    let view = ViewGaussians {
        means: tape.constant(means),
        scale_raw: tape.constant(Tensor::full(&[3, 3], -1.2)),
        rotation_raw: tape.constant(Tensor::new(&[3, 4], [1.0, 0.0, 0.0, 0.0].repeat(3)).unwrap()),
        opacity: alpha,
        sh: tape.constant(Tensor::new(&[3, 3], vec![0.8, -0.5, 0.1, -0.3, 0.9, 0.2, 0.4, 0.4, -0.9]).unwrap()),
        depth: tape.constant(Tensor::zeros(&[3])),
    };
    let image = render_node(&[view], &test_camera(), 0, [0.1, 0.2, 0.3], 8).unwrap();
    let rgb = image.slice_last(0, 3).unwrap();
    let loss = rgb.mse(tape.constant(target.clone())).unwrap();
    let grads = tape.backward(loss).unwrap();
    let phi_v = phi.value().clone();
    let picked = z.iter().enumerate().map(|(i, &k)| phi_v.data()[i * phi_v.shape()[1] + k]).collect();
    let alpha_v = alpha.value().data().to_vec();
    let value = loss.item().unwrap();
    let g = grads.get(l).unwrap().clone();
    (value, g, alpha_v, picked)
}

#[test]
fn end_to_end_logit_gradients_with_frozen_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let target = Tensor::from_fn(&[144, 3], |_| rng.gen_range(0.0..1.0));
    for trial in 0..10 {
        let logits = Tensor::uniform(&mut rng, &[3, 5], 1.5);
        let z: Vec<usize> = {
            let mut zr = ChaCha8Rng::seed_from_u64(100 + trial);
            let phi = (0..3)
                .map(|i| {
                    let mut row = logits.data()[i * 5..(i + 1) * 5].to_vec();
                    pairsplat::autodiff::softmax_in_place(&mut row);
                    row
                })
                .collect::<Vec<_>>();
            phi.iter().map(|row| sample_depth(row, &mut zr).unwrap()).collect()
        };
        let (_, analytic, alpha, picked) = opacity_pipeline(&logits, &z, &target);
        assert_eq!(alpha, picked, "α must equal φ_z exactly");
        let h = 1e-6;
        let mut work = logits.clone();
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for k in 0..logits.len() {
            work.data_mut()[k] = logits.data()[k] + h;
            let plus = opacity_pipeline(&work, &z, &target).0;
            work.data_mut()[k] = logits.data()[k] - h;
            let minus = opacity_pipeline(&work, &z, &target).0;
            work.data_mut()[k] = logits.data()[k];
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max((numeric - analytic.data()[k]).abs());
            scale = scale.max(analytic.data()[k].abs());
        }
        assert!(worst / scale < 1e-3, "trial {trial}: {}", worst / scale);
    }
}

fn ray() -> pairsplat::geometry::Ray<f64> {
    test_camera().ray(Camera::pixel_center(4, 7)).unwrap()
}

#[test]
fn one_hot_pixel_gaussian_sits_on_bucket() {
    let cfg = HeadConfig {
        buckets: 6,
        hidden: 8,
        sh_degree: 1,
        ..HeadConfig::default()
    };
    let (h, mut store) = head(cfg, 4, 7);
    let layout = *h.layout();
    let buckets = make_buckets(1.0, 20.0, 6).unwrap();
    let r = ray();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for z in 0..6 {
        // δ logit −1000 gives δ = 0 exactly; φ logit +1000 gives a one-hot φ.
        set_output_layer(&h, &mut store, |i| {
            if i == z {
                1000.0
            } else if (layout.delta().0..layout.delta().1).contains(&i) {
                -1000.0
            } else {
                0.0
            }
        });
        let feature = [0.3, -0.1, 0.7, 0.2];
        let (g, chosen) = h
            .pixel_gaussian(&store, &feature, &r, 0.05, &buckets, &mut rng, SampleMode::Sample)
            .unwrap();
        assert_eq!(chosen, z);
        assert_eq!(g.opacity, 1.0);
        assert_eq!(g.mean, r.origin + r.direction * buckets.boundary(z));

        set_output_layer(&h, &mut store, |i| if i == z || (layout.delta().0..layout.delta().1).contains(&i) { 1000.0 } else { 0.0 });
        let (g, _) = h
            .pixel_gaussian(&store, &feature, &r, 0.05, &buckets, &mut rng, SampleMode::Argmax)
            .unwrap();
        let expected = r.origin + r.direction * buckets.boundary(z + 1);
        assert!((g.mean - expected).norm() < 1e-12 * buckets.far());
    }
}

#[test]
fn argmax_mode_is_deterministic() {
    let (h, store) = head(HeadConfig { buckets: 8, hidden: 8, ..HeadConfig::default() }, 4, 9);
    let buckets = make_buckets(0.5, 8.0, 8).unwrap();
    let feature = [0.9, -0.4, 0.1, 0.5];
    let mut a = ChaCha8Rng::seed_from_u64(1);
    let mut b = ChaCha8Rng::seed_from_u64(2);
    let ga = h.pixel_gaussian(&store, &feature, &ray(), 0.05, &buckets, &mut a, SampleMode::Argmax).unwrap();
    let gb = h.pixel_gaussian(&store, &feature, &ray(), 0.05, &buckets, &mut b, SampleMode::Argmax).unwrap();
    assert_eq!(ga, gb);
}

#[test]
fn regression_baseline_zero_logits_is_midpoint() {
    let cfg = HeadConfig {
        buckets: 4,
        hidden: 8,
        sh_degree: 0,
        ..HeadConfig::default()
    };
    let (h, mut store) = head(cfg, 4, 10);
    set_output_layer(&h, &mut store, |_| 0.0);
    let r = ray();
    let g = h.regress_depth_baseline(&store, &[1.0, 2.0, 3.0, 4.0], &r, 0.05, 1.5, 10.5).unwrap();
    assert_eq!(g.opacity, 0.5);
    assert!((g.mean - (r.origin + r.direction * 6.0)).norm() < 1e-12);
    assert_eq!(g.sh, ShCoefficients::zeros(0).unwrap());
    assert_eq!(g.rotation_raw, [1.0, 0.0, 0.0, 0.0]);
    assert!((g.scale_raw.x - (6.0f64 * 0.05).ln()).abs() < 1e-12);
}

/// `MSE(render(μ = o + d(logit)·dir))` for one splat driven by a depth logit.
fn regression_pipeline(logit: f64, target: &Tensor) -> (f64, f64) {
    let tape = Tape::new();
    let l = tape.leaf(Tensor::new(&[1], vec![logit]).unwrap());
    let (near, far) = (1.0, 6.0);
    let d = l.sigmoid().scale(far - near).add_scalar(near);
    let r = test_camera().ray(Camera::pixel_center(5, 6)).unwrap();
    let origin = tape.constant(Tensor::new(&[1, 3], r.origin.to_array().to_vec()).unwrap());
    let dir = tape.constant(Tensor::new(&[1, 3], r.direction.to_array().to_vec()).unwrap());
    let means = origin.add(d.reshape(&[1, 1]).unwrap().mul(dir).unwrap()).unwrap();
    let scale = d.reshape(&[1, 1]).unwrap().ln().add_scalar((0.08f64).ln());
    let view = ViewGaussians {
        means,
        scale_raw: scale.add(tape.constant(Tensor::new(&[1, 3], vec![0.0, 0.2, -0.1]).unwrap())).unwrap(),
        rotation_raw: tape.constant(Tensor::new(&[1, 4], vec![0.9, 0.1, -0.2, 0.3]).unwrap()),
        opacity: tape.constant(Tensor::new(&[1], vec![0.8]).unwrap()),
        sh: tape.constant(Tensor::new(&[1, 3], vec![1.0, 0.2, -0.6]).unwrap()),
        depth: d,
    };
    let image = render_node(&[view], &test_camera(), 0, [0.0; 3], 16).unwrap();
    let loss = image.mse(tape.constant(target.clone())).unwrap();
    let g = tape.backward(loss).unwrap();
    (loss.item().unwrap(), g.get(l).unwrap().data()[0])
}

#[test]
fn regression_depth_gradient_through_render() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let target = Tensor::from_fn(&[144, 4], |i| if i % 4 == 3 { 2.0 } else { rng.gen_range(0.0..1.0) });
    for logit in [-1.0, 0.0, 0.7] {
        let (_, analytic) = regression_pipeline(logit, &target);
        let h = 1e-6;
        let numeric = (regression_pipeline(logit + h, &target).0 - regression_pipeline(logit - h, &target).0) / (2.0 * h);
        assert!((numeric - analytic).abs() <= 1e-3 * analytic.abs().max(1e-6), "{numeric} vs {analytic}");
    }
}

fn any_buckets() -> impl Strategy<Value = (DepthBuckets, usize)> {
    (0.05f64..5.0, 1.1f64..50.0, 2usize..80).prop_map(|(near, ratio, z)| (make_buckets(near, near * ratio, z).unwrap(), z))
}

proptest! {
    #[test]
    fn realized_depth_stays_in_range((buckets, z) in any_buckets(), k in 0usize..1000, delta in 0.0f64..=1.0) {
        let k = k % z;
        let d = bucket_depth(&buckets, k, delta, OffsetMode::WidthScaled);
        prop_assert!(d >= buckets.near() && d <= buckets.far() * (1.0 + 1e-15));
        prop_assert!(d >= buckets.boundary(k) && d <= buckets.boundary(k + 1) * (1.0 + 1e-15));
    }
}
