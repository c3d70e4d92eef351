use pairsplat::autodiff::{ParamStore, Tape, Tensor};
use pairsplat::encoder::EncoderConfig;
use pairsplat::geometry::{scale_scene, Camera};
use pairsplat::head::{make_buckets, HeadConfig, SampleMode};
use pairsplat::linalg::{Mat3, Vec3};
use pairsplat::model::{to_world, DepthMode, Model, ModelConfig, PairInput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 16;

fn config(depth_mode: DepthMode) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            channels: 8,
            key_dim: 8,
            bands: 4,
            rounds: 1,
            epipolar_samples: 6,
            ..EncoderConfig::default()
        },
        head: HeadConfig {
            buckets: 8,
            hidden: 8,
            sh_degree: 0,
            ..HeadConfig::default()
        },
        depth_mode,
        ..ModelConfig::default()
    }
}

fn pair(seed: u64) -> PairInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = SIZE as f64;
    PairInput {
        images: [0, 1].map(|_| Tensor::from_fn(&[SIZE, SIZE, 3], |_| rng.gen_range(0.0..1.0))),
        cameras: [
            Camera::pinhole(f, SIZE, SIZE, Mat3::identity(), Vec3::zero()).unwrap(),
            Camera::pinhole(f, SIZE, SIZE, Mat3::identity(), Vec3::new(0.5, 0.0, 0.1)).unwrap(),
        ],
        near: 2.0,
        far: 20.0,
    }
}

fn target() -> Camera<f64> {
    Camera::pinhole(SIZE as f64, SIZE, SIZE, Mat3::identity(), Vec3::new(0.25, 0.1, 0.0)).unwrap()
}

fn build(depth_mode: DepthMode, seed: u64) -> (Model, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(config(depth_mode), SIZE, SIZE, &mut store, &mut rng).unwrap();
    (model, store)
}

#[test]
fn batched_head_matches_per_pixel_algorithm() {
    let (model, store) = build(DepthMode::Probabilistic, 1);
    let input = pair(2);
    let prepared = model.prepare(&input, &[]).unwrap();
    let tape = Tape::new();
    let params = store.bind(&tape);
    let images = [tape.constant(input.images[0].clone()), tape.constant(input.images[1].clone())];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pred = model.predict(&params, images, &prepared, SampleMode::Argmax, &mut rng).unwrap();
    let batched = model.gaussians(&pred.views).unwrap();
    assert_eq!(batched.len(), model.gaussian_count());

    let encoded = model.encode(&params, images, &prepared).unwrap();
    let buckets = make_buckets(1.0, prepared.canonical.far, 8).unwrap();
    let mut k = 0;
    for v in 0..2 {
        let f = encoded.features[v].values.value();
        for (p, ray) in prepared.rays[v].iter().enumerate() {
            let feature = &f.data()[p * 8..(p + 1) * 8];
            let (g, z) = model
                .head()
                .pixel_gaussian(&store, feature, ray, prepared.footprints[v], &buckets, &mut rng, SampleMode::Argmax)
                .unwrap();
            assert_eq!(z, pred.buckets[v][p]);
            let b = &batched[k];
            assert!((g.mean - b.mean).norm() < 1e-12);
            assert!((g.scale_raw - b.scale_raw).norm() < 1e-12);
            assert!((g.opacity - b.opacity).abs() < 1e-15);
            k += 1;
        }
    }
}

#[test]
fn regression_mode_has_same_gaussian_count() {
    let (model, store) = build(DepthMode::Regression, 4);
    let input = pair(5);
    let prepared = model.prepare(&input, &[]).unwrap();
    let tape = Tape::new();
    let params = store.bind(&tape);
    let images = [tape.constant(input.images[0].clone()), tape.constant(input.images[1].clone())];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pred = model.predict(&params, images, &prepared, SampleMode::Sample, &mut rng).unwrap();
    let g = model.gaussians(&pred.views).unwrap();
    assert_eq!(g.len(), model.gaussian_count());
    assert!(pred.buckets[0].is_empty());
    for v in &pred.views {
        let d = v.depth.value();
        assert!(d.data().iter().all(|&x| x > 1.0 && x < prepared.canonical.far));
    }
}

fn photometric_loss(model: &Model, store: &ParamStore, input: &PairInput, frozen: &mut Option<[Vec<usize>; 2]>) -> (f64, Vec<Tensor>) {
    let prepared = model.prepare(input, &[target()]).unwrap();
    let tape = Tape::new();
    let params = store.bind(&tape);
    let images = [tape.constant(input.images[0].clone()), tape.constant(input.images[1].clone())];
    let pred = match frozen {
        Some(b) => model.predict_frozen(&params, images, &prepared, b).unwrap(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            model.predict(&params, images, &prepared, SampleMode::Sample, &mut rng).unwrap()
        }
    };
    *frozen = Some(pred.buckets.clone());
    let image = model.render(&pred.views, &prepared.targets[0]).unwrap();
    let rgb = image.slice_last(0, 3).unwrap();
    let goal = Tensor::from_fn(&[SIZE * SIZE, 3], |i| 0.5 + 0.3 * ((i as f64) * 0.37).sin());
    let loss = rgb.mse(tape.constant(goal)).unwrap();
    let value = loss.item().unwrap();
    let grads = params.gradients(&tape.backward(loss).unwrap());
    (value, grads)
}

#[test]
fn full_pipeline_gradients_match_finite_differences() {
    for mode in [DepthMode::Probabilistic, DepthMode::Regression] {
        let (model, store) = build(mode, 7);
        let input = pair(8);
        let mut frozen = None;
        let (_, analytic) = photometric_loss(&model, &store, &input, &mut frozen);
        let h = 1e-6;
        for name in ["head.fc2.bias", "head.fc1.weight", "encoder.round0.epipolar.key", "encoder.extract.3.bias"] {
            let id = store.id(name).unwrap();
            let g = &analytic[id.index()];
            let mut work = store.clone();
            let mut worst: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for k in (0..g.len()).step_by(1 + g.len() / 12) {
                let x0 = store.get(id).data()[k];
                work.get_mut(id).data_mut()[k] = x0 + h;
                let plus = photometric_loss(&model, &work, &input, &mut frozen).0;
                work.get_mut(id).data_mut()[k] = x0 - h;
                let minus = photometric_loss(&model, &work, &input, &mut frozen).0;
                work.get_mut(id).data_mut()[k] = x0;
                let numeric = (plus - minus) / (2.0 * h);
                worst = worst.max((numeric - g.data()[k]).abs());
                scale = scale.max(g.data()[k].abs());
            }
            assert!(scale > 0.0, "{mode:?} {name}: no gradient");
            assert!(worst <= 1e-3 * scale, "{mode:?} {name}: {worst} vs {scale}");
        }
    }
}

#[test]
fn canonical_predictions_are_scale_invariant() {
    let (model, store) = build(DepthMode::Probabilistic, 9);
    let base = pair(10);
    let mut results = Vec::new();
    for s in [0.2, 1.0, 5.0] {
        let cams = scale_scene(&base.cameras, s).unwrap();
        let input = PairInput {
            cameras: [cams[0].clone(), cams[1].clone()],
            near: base.near * s,
            far: base.far * s,
            images: base.images.clone(),
        };
        let tgt = scale_scene(&[target()], s).unwrap();
        let prepared = model.prepare(&input, &tgt).unwrap();
        let tape = Tape::new();
        let params = store.bind(&tape);
        let images = [tape.constant(input.images[0].clone()), tape.constant(input.images[1].clone())];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pred = model.predict(&params, images, &prepared, SampleMode::Sample, &mut rng).unwrap();
        let rendered = model.render(&pred.views, &prepared.targets[0]).unwrap().value().clone();
        let world = to_world(&model.gaussians(&pred.views).unwrap(), prepared.canonical.unit);
        results.push((rendered, world, s));
    }
    for (img, world, s) in &results[1..] {
        assert!(img.bitwise_eq(&results[0].0));
        for (a, b) in world.iter().zip(&results[0].1) {
            let expected = b.mean * (*s / results[0].2);
            assert!((a.mean - expected).norm() <= 1e-9 * expected.norm());
        }
    }
}
