use pairsplat::gaussians::{
    build_covariance, eval_sh, eval_sh_unclamped, quaternion_matrix, sh_basis, unproject, GaussianPrimitive, ShCoefficients,
};
use pairsplat::geometry::Ray;
use pairsplat::linalg::Vec3;
use pairsplat::oracles::sh_reference;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut impl Rng) -> Vec3<f64> {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if v.norm() > 0.1 {
            return v.normalized();
        }
    }
}

#[test]
fn sh_basis_matches_legendre_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let v = unit(&mut rng);
        let basis = sh_basis(2, v);
        for l in 0..=2i32 {
            for m in -l..=l {
                let k = (l * l + l + m) as usize;
                assert!((basis[k] - sh_reference(l, m, v)).abs() < 1e-12, "l={l} m={m}");
            }
        }
    }
}

#[test]
fn covariance_is_rotated_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let s = Vec3::new(rng.gen_range(-2.0..1.0), rng.gen_range(-2.0..1.0), rng.gen_range(-2.0..1.0));
        let q = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.2..1.0)];
        let cov = build_covariance(s, q).unwrap();
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = quaternion_matrix([q[0] / n, q[1] / n, q[2] / n, q[3] / n]);
        // Each rotated axis is an eigenvector with eigenvalue exp(2 s_i).
        for (i, si) in s.to_array().into_iter().enumerate() {
            let axis = r.col(i);
            let image = cov.mul_vec(axis);
            assert!((image - axis * (2.0 * si).exp()).norm() < 1e-12 * (2.0 * si).exp().max(1.0));
        }
        assert!(cov.max_abs_diff(&cov.transpose()) < 1e-15);
    }
}

#[test]
fn dc_color_is_view_independent() {
    let sh = ShCoefficients::from_rgb(2, [0.2, 0.5, 0.9]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let c = eval_sh(&sh, unit(&mut rng)).unwrap();
        for (a, b) in c.iter().zip([0.2, 0.5, 0.9]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn clamped_color_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let coeffs = (0..9).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
        let sh = ShCoefficients::new(2, coeffs).unwrap();
        let v = unit(&mut rng);
        let raw = eval_sh_unclamped(&sh, v).unwrap();
        let c = eval_sh(&sh, v).unwrap();
        for (r, x) in raw.iter().zip(c) {
            assert_eq!(x, r.max(0.0));
        }
    }
}

#[test]
fn degree_three_is_rejected() {
    assert!(ShCoefficients::<f64>::zeros(3).is_err());
    assert!(ShCoefficients::new(1, vec![[0.0; 3]; 3]).is_err());
}

#[test]
fn unprojected_means_sit_on_the_ray() {
    let ray = Ray {
        origin: Vec3::new(1.0, 2.0, 3.0),
        direction: Vec3::new(0.0, 0.6, 0.8),
    };
    let p = unproject(&ray, 5.0).unwrap();
    assert!((p - Vec3::new(1.0, 5.0, 7.0)).norm() < 1e-12);
    assert!(unproject(&ray, -1.0).is_err());
}

#[test]
fn finite_check_catches_every_field() {
    let g = GaussianPrimitive {
        mean: Vec3::new(0.0, 0.0, 1.0),
        scale_raw: Vec3::zero(),
        rotation_raw: [1.0, 0.0, 0.0, 0.0],
        opacity: 0.5,
        sh: ShCoefficients::zeros(1).unwrap(),
    };
    assert!(g.is_finite());
    let mut bad = g.clone();
    bad.opacity = f64::NAN;
    assert!(!bad.is_finite());
    let mut bad = g;
    bad.sh.coeffs_mut()[2][1] = f64::INFINITY;
    assert!(!bad.is_finite());
}

proptest! {
    #[test]
    fn covariance_is_positive_definite(
        s in prop::array::uniform3(-3.0f64..2.0),
        q in prop::array::uniform4(-1.0f64..1.0),
    ) {
        prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let cov = build_covariance(Vec3::from_array(s), q).unwrap();
        prop_assert!(cov.det() > 0.0);
        prop_assert!(cov.m[0][0] > 0.0 && cov.m[0][0] * cov.m[1][1] - cov.m[0][1] * cov.m[1][0] > 0.0);
    }

    #[test]
    fn f32_basis_tracks_f64(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
        let v = Vec3::new(x, y, z);
        prop_assume!(v.norm() > 0.1);
        let v = v.normalized();
        let a = sh_basis(2, v);
        let b = sh_basis(2, v.cast::<f32>());
        for (p, q) in a.iter().zip(b) {
            prop_assert!((p - f64::from(q)).abs() < 1e-6);
        }
    }
}
