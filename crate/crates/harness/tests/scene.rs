use pairsplat::autodiff::Tensor;
use pairsplat_harness::scene::{gen_scene, PlaneSpec, SceneRenderer, SceneSpec};

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// Variance kept by 4×4 average pooling, summed over channels.
fn pooled_variance_fraction(image: &Tensor) -> f64 {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let (mut full, mut pooled) = (0.0, 0.0);
    for c in 0..3 {
        let x: Vec<f64> = image.data().iter().skip(c).step_by(3).copied().collect();
        let mut p = Vec::new();
        for j in (0..h).step_by(4) {
            for i in (0..w).step_by(4) {
                let mut s = 0.0;
                for dy in 0..4 {
                    for dx in 0..4 {
                        s += x[(j + dy) * w + i + dx];
                    }
                }
                p.push(s / 16.0);
            }
        }
        // Pooling removes within-block variance only; compare against the
        // full-resolution variance.
        full += variance(&x);
        pooled += variance(&p);
    }
    pooled / full
}

#[test]
fn single_plane_depth_is_constant() {
    let spec = SceneSpec::single_plane(4.0);
    let scene = gen_scene(&spec, 1).unwrap();
    for v in &scene.views {
        assert!(v.depth.iter().all(|&d| (d - 4.0).abs() < 1e-12), "{:?}", &v.depth[..4]);
    }
}

#[test]
fn scene_is_bitwise_deterministic() {
    let spec = SceneSpec::default();
    let a = gen_scene(&spec, 9).unwrap();
    let b = gen_scene(&spec, 9).unwrap();
    for (x, y) in a.views.iter().zip(&b.views) {
        assert!(x.image.bitwise_eq(&y.image));
        assert_eq!(x.depth.iter().map(|d| d.to_bits()).collect::<Vec<_>>(), y.depth.iter().map(|d| d.to_bits()).collect::<Vec<_>>());
    }
    let c = gen_scene(&spec, 10).unwrap();
    assert!(!a.views[0].image.bitwise_eq(&c.views[0].image));
}

/// Each plane's texture alone (unbounded, so no occlusion edges) as seen by
/// the reference cameras.
#[test]
fn textures_survive_feature_downsampling() {
    for spec in [
        SceneSpec::default(),
        SceneSpec::two_depth_clusters(),
        SceneSpec::planted(),
        SceneSpec::single_plane(4.0),
    ] {
        for plane in &spec.planes {
            let mut alone = spec.clone();
            alone.planes = vec![PlaneSpec {
                half_extent: None,
                ..plane.clone()
            }];
            let scene = gen_scene(&alone, 0).unwrap();
            for v in scene.references() {
                let f = pooled_variance_fraction(&v.image);
                assert!(f >= 0.9, "retained {f}");
            }
        }
    }
}

#[test]
fn images_do_not_depend_on_scale() {
    let spec = SceneSpec::default();
    let base = SceneRenderer::new(&spec, 4).unwrap();
    let a = base.render(0.2).unwrap();
    for s in [0.2, 5.0] {
        let v = base.with_scale(s, true).render(0.2).unwrap();
        assert!(v.image.bitwise_eq(&a.image));
        let c = v.camera.center();
        assert!((c.x - s * a.camera.center().x).abs() < 1e-12);
        for (d, d0) in v.depth.iter().zip(&a.depth) {
            assert!((d - s * d0).abs() <= 1e-12 * d.abs());
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = SceneSpec::default();
    spec.baseline = 0.0;
    assert!(spec.validate().is_err());
    let mut spec = SceneSpec::default();
    spec.near = 7.0;
    assert!(spec.validate().is_err());
    let mut spec = SceneSpec::default();
    spec.planes.push(PlaneSpec::noise([0.0, 0.0, 50.0], 1, [0.5; 3], 1.0));
    assert!(spec.validate().is_err());
    assert!(gen_scene(&spec, 0).is_err());
}

#[test]
fn targets_lie_between_references() {
    let spec = SceneSpec::default();
    let scene = gen_scene(&spec, 0).unwrap();
    let [r0, r1] = scene.references();
    let (x0, x1) = (r0.camera.center().x, r1.camera.center().x);
    assert_eq!(scene.targets().len(), spec.targets);
    for t in scene.targets() {
        let x = t.camera.center().x;
        assert!(x > x0 && x < x1);
    }
}
